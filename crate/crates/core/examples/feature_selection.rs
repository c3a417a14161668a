//! PCA followed by the Pearson redundancy filter on one synthetic turbine.

use turbine_pm::features::{select_features, FeatureMatrix, SelectionSettings};
use turbine_pm::synth::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fleet = generate(&SynthConfig::default())?;
    let t = &fleet.turbines[0];
    let rows: Vec<Vec<f64>> = t.operational.iter().map(|r| r.values.clone()).collect();
    let m = FeatureMatrix::from_rows(fleet.manifest.parameters.clone(), &rows)?;
    let report = select_features(&m, SelectionSettings::default())?;
    print!("{}", report.to_text());
    let planted: Vec<&str> = fleet.truth.signatures.iter().map(|(_, n, _)| n.as_str()).collect();
    let kept: Vec<&str> = planted
        .iter()
        .copied()
        .filter(|p| report.final_parameters.iter().any(|f| f == p))
        .collect();
    println!("signature parameters kept: {kept:?}");
    Ok(())
}
