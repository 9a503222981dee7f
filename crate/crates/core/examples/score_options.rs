//! Pseudo-log-likelihood answer scoring: each option is appended to the
//! question, every token is masked in turn, and the mean negative
//! log-probability is the option's score (lower wins). Compares a random
//! backbone with one pretrained briefly on the fixture text.
//!
//! ```text
//! cargo run --release --example score_options
//! ```

use kgfuse::evalkit::evaluate;
use kgfuse::fixture::event_kg;
use kgfuse::kg_store::default_templates;
use kgfuse::model::{init_backbone, ArchConfig, ModelConfig, ModelView};
use kgfuse::objectives::{predict, LmScorer, OptionScorer};
use kgfuse::pipeline::{pretrain_backbone, TrainHyper};
use kgfuse::seed;
use kgfuse::synth::{generate_qa, QaDataset};
use kgfuse::tokenizer::Tokenizer;

fn main() -> kgfuse::Result<()> {
    let ds = generate_qa(&event_kg(), &default_templates(), 3, &mut seed::rng(1))?;
    let probe = QaDataset::new(ds.kg.clone(), ds.samples.iter().step_by(5).cloned().collect())?;
    let mut texts: Vec<String> = vec![".".into()];
    for s in &ds.samples {
        texts.push(s.question.replace("[MASK]", " "));
        texts.extend(s.options.iter().cloned());
    }
    let tokenizer = Tokenizer::with_default_mask(texts.iter().map(String::as_str));
    let config = ModelConfig::new(&ArchConfig::default(), tokenizer.vocab_size());

    let random = init_backbone(&config, 3)?;
    let corpus: Vec<Vec<u32>> = texts.iter().map(|t| tokenizer.encode_wrapped(t)).collect();
    let hyper = TrainHyper { learning_rate: 1e-3, steps: 200, seed: 3, ..TrainHyper::default() };
    let (pretrained, report) = pretrain_backbone(&random, &corpus, &hyper)?;
    println!(
        "MLM pretraining: {} steps, loss {:.3} -> {:.3}",
        report.steps,
        report.loss_curve.first().copied().unwrap_or(f64::NAN),
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );

    let sample = &probe.samples[0];
    println!("\n{}", sample.question);
    for (name, bb) in [("random", &random), ("pretrained", &pretrained)] {
        let scorer = LmScorer::new(ModelView::Plain(bb), &tokenizer, name);
        let scored = scorer.score(sample)?;
        let pred = predict(&scored);
        println!("  {name}:");
        for (j, (o, s)) in sample.options.iter().zip(&scored.scores).enumerate() {
            let mark = match (j == sample.label, j == pred) {
                (true, true) => "gold, picked",
                (true, false) => "gold",
                (false, true) => "picked",
                _ => "",
            };
            println!("    {s:7.3}  {o:<20} {mark}");
        }
        let (acc, _) = evaluate(&scorer, &probe)?;
        println!("    zero-shot accuracy on {} samples: {acc:.3}", probe.len());
    }
    Ok(())
}
