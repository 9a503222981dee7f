//! Zero-shot fusion over the fixture experts: accuracy of each model on the
//! mixed held-out set and the fusion attention each KG's questions place on
//! each expert. Reuses a finished `fixture_run` output directory if present.
//!
//! ```text
//! cargo run --release --example fusion_attention [output-dir]
//! ```

use std::path::PathBuf;

use kgfuse::evalkit::attention_dump;
use kgfuse::fixture::write_fixture;
use kgfuse::pipeline::{Experiment, ExperimentConfig, KgDecl, ModelRef, RunOptions, Stage};

fn main() -> kgfuse::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("kgfuse-fixture"));
    let kgs = write_fixture(&root.join("kgs"))?
        .into_iter()
        .map(|(name, path)| KgDecl { name, path })
        .collect();
    let exp = Experiment::new(ExperimentConfig::with_kgs(kgs), &root, Some(root.join("out")))?;
    exp.run_all(RunOptions { resume: true, ..RunOptions::default() }, |msg| println!("{msg}"))?;

    let mixed = exp.mixed_valid()?;
    let fusion = ModelRef::Stage(Stage::Fusion);
    for model in [ModelRef::Plm, ModelRef::Stage(Stage::Expert("eventkg".into())), ModelRef::Stage(Stage::Expert("conceptkg".into())), fusion.clone()] {
        println!("{:<18} mixed accuracy {:.4}", model.to_string(), exp.predict(&model, &mixed)?.0);
    }

    let lm = exp.load_model(&fusion)?;
    let tokenizer = exp.tokenizer()?;
    println!("\nmean [CLS] attention per layer, columns {:?}", lm.expert_names);
    for kg in &lm.expert_names {
        let dump = attention_dump(&lm.view(), &tokenizer, &exp.valid(kg)?, &lm.expert_names)?;
        for l in 0..dump.mean.rows() {
            let row: Vec<String> = dump.mean.row(l).iter().map(|p| format!("{p:.3}")).collect();
            println!("  {kg:<10} layer {l}: {}", row.join("  "));
        }
    }
    Ok(())
}
