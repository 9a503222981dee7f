//! The interference ratio and the relative-improvement grid on hand-made
//! prediction sets.
//!
//! ```text
//! cargo run --example interference
//! ```

use std::collections::BTreeMap;

use kgfuse::evalkit::{interference_ratio, relative_improvement, InterferenceInput, PredictionRecord, ResultKey};

fn records(model: &str, gold: &[usize], pred: &[usize]) -> Vec<PredictionRecord> {
    gold.iter()
        .zip(pred)
        .enumerate()
        .map(|(i, (&g, &p))| PredictionRecord { id: format!("q{i}"), gold: g, pred: p, scores: vec![0.0; 3], model: model.into() })
        .collect()
}

fn main() -> kgfuse::Result<()> {
    let gold = [0, 1, 2, 0, 1, 2, 0, 1];
    let stl_a = records("stl-a", &gold, &[0, 1, 2, 0, 1, 0, 1, 1]);
    let stl_b = records("stl-b", &gold, &[0, 1, 2, 1, 1, 2, 0, 1]);
    let multi = records("multi", &gold, &[0, 2, 2, 0, 0, 2, 0, 1]);
    let common: Vec<&str> = stl_a
        .iter()
        .zip(&stl_b)
        .filter(|(a, b)| a.correct() && b.correct())
        .map(|(a, _)| a.id.as_str())
        .collect();
    println!("answered correctly by every single-KG model: {common:?}");
    let r = interference_ratio(&InterferenceInput { stl: vec![stl_a, stl_b], multi })?;
    println!("interference ratio of the multi-KG model: {r:.4}");

    let mut results = BTreeMap::new();
    for (model, kgs, bench, acc) in [
        ("stl-adapter", &["AT"][..], "csqa", 66.7),
        ("stl-adapter", &["CN"][..], "csqa", 64.9),
        ("stl-adapter", &["WN"][..], "csqa", 61.0),
        ("fusion", &["AT", "CN"][..], "csqa", 67.6),
        ("fusion", &["AT", "WN"][..], "csqa", 66.1),
        ("fusion", &["AT", "CN", "WN"][..], "csqa", 68.0),
    ] {
        results.insert(ResultKey::new(model, kgs, bench), acc);
    }
    let grid = relative_improvement(&results, "fusion", "stl-adapter")?;
    print!("\nimprovement over the best single-KG adapter:\n{}", grid.to_csv());
    Ok(())
}
