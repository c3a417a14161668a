//! Trains a forest on a toy problem, persists it as a model bundle and
//! checks the reloaded copy predicts the same.

use turbine_pm::dataset::Horizon;
use turbine_pm::forest::{load_model, save_model, train_forest, ForestParams, ModelBundle, TrainingData};
use turbine_pm::patterns::ClassLabel;
use turbine_pm::time::Timestamp;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // two noisy rings: class 1 inside radius 1, Normal outside
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..600 {
        let a = i as f64 * 0.7;
        let r = if i % 2 == 0 { 0.5 } else { 1.5 } + ((i * 37 % 11) as f64 - 5.0) / 40.0;
        rows.push(vec![r * a.cos(), r * a.sin(), (i % 13) as f64]);
        labels.push(if i % 2 == 0 { ClassLabel::Pattern(1) } else { ClassLabel::Normal });
    }
    let (train_rows, test_rows) = rows.split_at(400);
    let (train_labels, test_labels) = labels.split_at(400);
    let data = TrainingData::new(train_rows, train_labels)?;
    let params = ForestParams {
        n_trees: 40,
        max_depth: 25,
        ..Default::default()
    };
    let forest = train_forest(&data, params, 7)?;
    let test = TrainingData::new(test_rows, test_labels)?;
    println!("held-out accuracy: {:.3}", forest.accuracy(&test));
    let p = forest.predict(&[0.1, 0.2, 3.0])?;
    println!("predict (0.1, 0.2): {} with {:.0}% of votes", p.label, 100.0 * p.vote_fraction());

    let bundle = ModelBundle::new("WT01", Horizon::new(30)?, forest, vec!["x".into(), "y".into(), "z".into()], vec![], Timestamp::now());
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("h30.model");
    save_model(&bundle, &path)?;
    let back = load_model(&path)?;
    println!("bundle {} bytes, content id {}", std::fs::metadata(&path)?.len(), back.content_id());
    assert_eq!(back.forest.predict(&[0.1, 0.2, 3.0])?, p);
    Ok(())
}
