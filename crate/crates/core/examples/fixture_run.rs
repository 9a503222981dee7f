//! End-to-end run on the bundled two-KG fixture: datasets, backbone, experts,
//! KG classifier, fusion, then held-out accuracy for every model.
//!
//! ```text
//! cargo run --release --example fixture_run [output-dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use kgfuse::fixture::write_fixture;
use kgfuse::pipeline::{Experiment, ExperimentConfig, KgDecl, ModelRef, RunOptions, Stage};

fn main() -> kgfuse::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("kgfuse-fixture"));
    let kgs = write_fixture(&root.join("kgs"))?
        .into_iter()
        .map(|(name, path)| KgDecl { name, path })
        .collect();
    let exp = Experiment::new(ExperimentConfig::with_kgs(kgs), &root, Some(root.join("out")))?;
    let start = Instant::now();
    exp.run_all(RunOptions { force: true, ..RunOptions::default() }, |msg| println!("{msg}"))?;
    println!("pipeline finished in {:.1}s", start.elapsed().as_secs_f64());

    let mixed = exp.mixed_valid()?;
    for kg in exp.config.kgs.iter().map(|k| k.name.clone()) {
        let model = ModelRef::Stage(Stage::Expert(kg.clone()));
        let own = exp.predict(&model, &exp.valid(&kg)?)?.0;
        let mix = exp.predict(&model, &mixed)?.0;
        println!("expert {kg:>10}: own {own:.4}  mixed {mix:.4}");
    }
    println!("plm              mixed {:.4}", exp.predict(&ModelRef::Plm, &mixed)?.0);
    println!("fusion           mixed {:.4}", exp.predict(&ModelRef::Stage(Stage::Fusion), &mixed)?.0);
    println!("kg classifier    {:.4}", exp.kgc_accuracy()?);
    Ok(())
}
