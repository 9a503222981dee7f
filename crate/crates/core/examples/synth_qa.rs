//! Turns the fixture KGs into multiple-choice QA, the KG-classification set
//! and a balanced fusion mixture, and prints a few samples of each.
//!
//! ```text
//! cargo run --release --example synth_qa
//! ```

use kgfuse::fixture::{concept_kg, event_kg};
use kgfuse::kg_store::default_templates;
use kgfuse::seed;
use kgfuse::synth::{build_fusion_mixture, derive_kgc, generate_qa, split, MixtureSpec, QaDataset};

fn main() -> kgfuse::Result<()> {
    let registry = default_templates();
    let mut datasets: Vec<QaDataset> = Vec::new();
    for kg in [event_kg(), concept_kg()] {
        let mut rng = seed::rng(seed::derive_seed(42, &format!("qa/{}", kg.name())));
        let ds = generate_qa(&kg, &registry, 3, &mut rng)?;
        println!("{}: {} triples -> {} questions", kg.name(), kg.triples().len(), ds.len());
        for s in ds.samples.iter().take(3) {
            println!("  Q: {}", s.question);
            for (j, o) in s.options.iter().enumerate() {
                println!("     {} {o}", if j == s.label { "*" } else { " " });
            }
        }
        let (train, valid) = split(&ds, 0.2, &mut rng)?;
        println!("  split: {} train / {} valid", train.len(), valid.len());
        datasets.push(ds);
    }

    let kgc = derive_kgc(&datasets)?;
    println!("\nKG classification: {} statements", kgc.len());
    for s in kgc.iter().step_by(kgc.len() / 4).take(4) {
        println!("  [{}] {}", s.kg, s.statement);
    }

    let mix = build_fusion_mixture(&datasets, MixtureSpec { per_kg_count: 100, seed: 7 })?;
    println!("\nfusion mixture: {} samples, per KG {:?}", mix.len(), mix.kg_histogram());
    Ok(())
}
