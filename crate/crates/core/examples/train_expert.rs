//! Trains one KG expert adapter on a frozen backbone with the margin ranking
//! loss and reports held-out accuracy before and after.
//!
//! ```text
//! cargo run --release --example train_expert [epochs]
//! ```

use kgfuse::evalkit::evaluate;
use kgfuse::fixture::concept_kg;
use kgfuse::kg_store::default_templates;
use kgfuse::model::{init_adapter, init_backbone, AdapterRole, ArchConfig, ModelConfig, ModelView, Parameters};
use kgfuse::objectives::LmScorer;
use kgfuse::pipeline::{pretrain_backbone, train_expert, TrainHyper};
use kgfuse::seed;
use kgfuse::synth::{generate_qa, split};
use kgfuse::tokenizer::Tokenizer;

fn main() -> kgfuse::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let kg = concept_kg();
    let ds = generate_qa(&kg, &default_templates(), 3, &mut seed::rng(5))?;
    let (train, valid) = split(&ds, 0.2, &mut seed::rng(6))?;
    let mut texts: Vec<String> = vec![".".into()];
    for s in &train.samples {
        texts.push(s.question.replace("[MASK]", " "));
        texts.extend(s.options.iter().cloned());
    }
    for s in &valid.samples {
        texts.extend(s.options.iter().cloned());
    }
    let tokenizer = Tokenizer::with_default_mask(texts.iter().map(String::as_str));
    let config = ModelConfig::new(&ArchConfig::default(), tokenizer.vocab_size());
    let corpus: Vec<Vec<u32>> = texts.iter().map(|t| tokenizer.encode_wrapped(t)).collect();
    let (backbone, _) = pretrain_backbone(
        &init_backbone(&config, 1)?,
        &corpus,
        &TrainHyper { steps: 200, seed: 2, ..TrainHyper::default() },
    )?;

    let fresh = init_adapter(&config, AdapterRole::Expert { kg: kg.name().into() }, 3)?;
    let view = ModelView::Adapter { backbone: &backbone, adapter: &fresh };
    let (before, _) = evaluate(&LmScorer::new(view, &tokenizer, "untrained"), &valid)?;

    let digest = backbone.digest();
    let hyper = TrainHyper { learning_rate: 8e-3, epochs, seed: 4, ..TrainHyper::default() };
    let (expert, report) = train_expert(&backbone, &train, &tokenizer, &hyper)?;
    for (e, (loss, gap)) in report.epoch_losses.iter().zip(&report.epoch_gaps).enumerate() {
        println!("epoch {:>2}: loss {loss:.4}  gold - best distractor score {gap:+.3}", e + 1);
    }
    let view = ModelView::Adapter { backbone: &backbone, adapter: &expert };
    let (after, _) = evaluate(&LmScorer::new(view, &tokenizer, "expert"), &valid)?;
    println!("held-out accuracy on {} questions: {before:.3} -> {after:.3}", valid.len());
    println!("backbone unchanged: {}", backbone.digest() == digest);
    Ok(())
}
