fn main() {
    std::process::exit(turbine_pm::cli::run_from(std::env::args_os()));
}
