//! Training stages: backbone MLM pretraining, expert adapters, the
//! KG-classifier adapter, fusion, and the full-model STL/MTL baselines.

mod experiment;

pub use experiment::{
    output_root_override, DataPaths, EvalExtras, EvalSummary, Experiment, ExperimentConfig, FrozenDigest, Generate,
    KgDecl, LoadedModel, ModelRef, QaSettings, RunManifest, RunOptions, RunStatus, Stage, StageSettings,
    TemplateOverrides, OUTPUT_ENV,
};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    init_adapter, init_classifier_head, init_fusion, Adapter, AdapterRole, Backbone, ClassifierHead, Fusion,
    ModelView, Parameters, QueryMode, TokenBatch, Trainable,
};
use crate::objectives::{
    build_sequences, encode_statement, kgc_loss_grads, mlm_loss_grads, ranking_loss_grads, LossGrads, OptionSequence,
    RankingHyper,
};
use crate::optim::{mean_grads, AdamConfig, AdamW};
use crate::seed::{self, Rng};
use crate::synth::{KgcSample, QaDataset};
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub warmup_proportion: f64,
    pub margin: f64,
    pub epochs: usize,
    /// Optimizer steps for MLM pretraining (ignored by the other stages).
    pub steps: usize,
    /// Score only the answer span instead of the whole sequence.
    pub answer_only: bool,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_epsilon: 1e-8,
            warmup_proportion: 0.05,
            margin: 1.0,
            epochs: 1,
            steps: 0,
            answer_only: false,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            warmup_proportion: self.warmup_proportion,
        }
    }

    fn ranking(&self, option_count: usize) -> RankingHyper {
        RankingHyper {
            margin: self.margin,
            option_count,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Backbone,
    ExpertAdapter,
    KgcAdapter,
    Fusion,
    StlPlm,
    Mtl,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Backbone => "backbone",
            TrainMode::ExpertAdapter => "expert_adapter",
            TrainMode::KgcAdapter => "kgc_adapter",
            TrainMode::Fusion => "fusion",
            TrainMode::StlPlm => "stl_plm",
            TrainMode::Mtl => "mtl",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean loss of each optimizer step's batch, evaluated before the update.
    pub loss_curve: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Per epoch: mean gold score minus mean best-distractor score (ranking stages).
    pub epoch_gaps: Vec<f64>,
    /// Sample indices of the first batch, in order.
    pub first_batch: Vec<usize>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_curve.first().copied()
    }
}

/// Sample order for `epoch`: a fresh shuffle drawn from a stream tied to `(seed, label)`.
pub fn epoch_order(n: usize, seed: u64, label: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::derived_rng(seed, &format!("{label}/epoch{epoch}")));
    order
}

fn prefixed<'a>(prefix: &str, v: Vec<(String, &'a mut Matrix)>) -> Vec<(String, &'a mut Matrix)> {
    v.into_iter().map(|(n, m)| (format!("{prefix}{n}"), m)).collect()
}

fn check_finite(loss: f64, stage: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{stage}: loss diverged")))
    }
}

struct RankingRun<'h> {
    hyper: &'h TrainHyper,
    label: &'static str,
    train: Trainable,
    prefix: &'static str,
    dropout: bool,
}

type ViewFn<'f> = dyn FnMut(&ModelView<'_>) -> Result<()> + 'f;

/// Shared ranking-loss loop: per-sample gradients averaged over each batch.
fn train_ranking<P: Parameters>(
    params: &mut P,
    with_view: impl Fn(&P, &mut ViewFn) -> Result<()>,
    samples: &[(Vec<OptionSequence>, usize)],
    run: RankingRun,
) -> Result<TrainReport> {
    let hyper = run.hyper;
    hyper.validate()?;
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let per_epoch = n.div_ceil(hyper.batch_size);
    let mut opt = AdamW::new(hyper.adam(), per_epoch * hyper.epochs)?;
    let mut dropout_rng = seed::derived_rng(hyper.seed, &format!("{}/dropout", run.label));
    let mut report = TrainReport::default();
    for epoch in 0..hyper.epochs {
        let order = epoch_order(n, hyper.seed, run.label, epoch);
        let (mut loss_sum, mut gap_sum) = (0.0, 0.0);
        for batch in order.chunks(hyper.batch_size) {
            if report.first_batch.is_empty() {
                report.first_batch = batch.to_vec();
            }
            let mut grads = Vec::with_capacity(batch.len());
            let mut batch_loss = 0.0;
            with_view(params, &mut |view| {
                for &i in batch {
                    let (seqs, label) = &samples[i];
                    let rng = if run.dropout { Some(&mut dropout_rng) } else { None };
                    let (lg, scored) = ranking_loss_grads(
                        view,
                        run.train,
                        seqs,
                        *label,
                        &hyper.ranking(seqs.len()),
                        hyper.answer_only,
                        rng,
                    )?;
                    batch_loss += lg.loss;
                    let best_other = scored
                        .scores
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != *label)
                        .map(|(_, &s)| s)
                        .fold(f64::INFINITY, f64::min);
                    gap_sum += scored.scores[*label] - best_other;
                    grads.push(lg.grads);
                }
                Ok(())
            })?;
            check_finite(batch_loss, run.label)?;
            loss_sum += batch_loss;
            report.loss_curve.push(batch_loss / batch.len() as f64);
            opt.step(prefixed(run.prefix, params.tensors_mut()), &mean_grads(grads))?;
        }
        report.epoch_losses.push(loss_sum / n as f64);
        report.epoch_gaps.push(gap_sum / n as f64);
    }
    report.steps = opt.steps_taken();
    params.round_to_f32();
    Ok(report)
}

/// Option sequences and labels for every sample of `dataset`.
pub fn prepare_qa(dataset: &QaDataset, tokenizer: &Tokenizer, max_seq_len: usize) -> Result<Vec<(Vec<OptionSequence>, usize)>> {
    dataset
        .samples
        .iter()
        .map(|s| Ok((build_sequences(s, tokenizer, max_seq_len)?, s.label)))
        .collect()
}

/// Mean ranking loss of the given samples under `view`, without updating anything.
pub fn ranking_batch_loss(
    view: &ModelView,
    samples: &[(Vec<OptionSequence>, usize)],
    indices: &[usize],
    hyper: &TrainHyper,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        let (seqs, label) = &samples[i];
        let (lg, _) = ranking_loss_grads(
            view,
            Trainable::default(),
            seqs,
            *label,
            &hyper.ranking(seqs.len()),
            hyper.answer_only,
            None,
        )?;
        total += lg.loss;
    }
    Ok(total / indices.len() as f64)
}

/// Trains the expert adapter for one KG; the backbone stays frozen.
pub fn train_expert(
    backbone: &Backbone,
    dataset: &QaDataset,
    tokenizer: &Tokenizer,
    hyper: &TrainHyper,
) -> Result<(Adapter, TrainReport)> {
    if dataset.is_mixture() {
        return Err(Error::invalid("expert training needs a single-KG dataset, got a mixture"));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.kg != dataset.kg) {
        return Err(Error::invalid(format!("sample {} belongs to `{}`, not `{}`", s.id, s.kg, dataset.kg)));
    }
    let samples = prepare_qa(dataset, tokenizer, backbone.config.max_seq_len)?;
    let mut adapter = init_adapter(
        &backbone.config,
        AdapterRole::Expert {
            kg: dataset.kg.clone(),
        },
        hyper.seed,
    )?;
    let report = train_ranking(
        &mut adapter,
        |a: &Adapter, f: &mut ViewFn| f(&ModelView::Adapter { backbone, adapter: a }),
        &samples,
        RankingRun {
            hyper,
            label: "expert",
            train: Trainable {
                adapter: true,
                ..Trainable::default()
            },
            prefix: "adapter.",
            dropout: false,
        },
    )?;
    Ok((adapter, report))
}

/// Trains the fusion layers over frozen experts (and the frozen classifier
/// adapter in `kgc` query mode) on a KG mixture.
#[allow(clippy::too_many_arguments)]
pub fn train_fusion(
    backbone: &Backbone,
    experts: &[Adapter],
    mixture: &QaDataset,
    tokenizer: &Tokenizer,
    hyper: &TrainHyper,
    query_mode: QueryMode,
    kgc: Option<&Adapter>,
    attention_dropout: f64,
) -> Result<(Fusion, TrainReport)> {
    if !mixture.is_mixture() {
        return Err(Error::invalid(format!(
            "fusion training needs a mixture dataset, got `{}`",
            mixture.kg
        )));
    }
    let mut fusion = init_fusion(&backbone.config, hyper.seed, attention_dropout)?;
    ModelView::fusion(backbone, experts, &fusion, query_mode, kgc)?;
    let samples = prepare_qa(mixture, tokenizer, backbone.config.max_seq_len)?;
    let kgc = if query_mode == QueryMode::Kgc { kgc } else { None };
    let report = train_ranking(
        &mut fusion,
        |f: &Fusion, run: &mut ViewFn| {
            run(&ModelView::Fusion {
                backbone,
                experts,
                fusion: f,
                kgc,
            })
        },
        &samples,
        RankingRun {
            hyper,
            label: "fusion",
            train: Trainable {
                fusion: true,
                ..Trainable::default()
            },
            prefix: "fusion.",
            dropout: attention_dropout > 0.0,
        },
    )?;
    Ok((fusion, report))
}

/// Full-model training on one (STL-PLM) or several (MTL) QA datasets. The
/// datasets are interleaved round-robin and reshuffled every epoch.
pub fn train_full(
    backbone: &Backbone,
    datasets: &[QaDataset],
    tokenizer: &Tokenizer,
    hyper: &TrainHyper,
) -> Result<(Backbone, TrainReport)> {
    if datasets.is_empty() {
        return Err(Error::invalid("full-model training needs at least one dataset"));
    }
    let prepared: Vec<_> = datasets
        .iter()
        .map(|d| prepare_qa(d, tokenizer, backbone.config.max_seq_len))
        .collect::<Result<_>>()?;
    let longest = prepared.iter().map(Vec::len).max().unwrap_or(0);
    let mut samples = Vec::new();
    for i in 0..longest {
        for p in &prepared {
            if let Some(s) = p.get(i) {
                samples.push(s.clone());
            }
        }
    }
    let mut out = backbone.clone();
    let report = train_ranking(
        &mut out,
        |b: &Backbone, f: &mut ViewFn| f(&ModelView::Plain(b)),
        &samples,
        RankingRun {
            hyper,
            label: "full",
            train: Trainable {
                backbone: true,
                ..Trainable::default()
            },
            prefix: "backbone.",
            dropout: false,
        },
    )?;
    Ok((out, report))
}

/// Trains the KG-classifier adapter and head jointly on KGC statements.
pub fn train_kgc(
    backbone: &Backbone,
    samples: &[KgcSample],
    labels: &[String],
    tokenizer: &Tokenizer,
    hyper: &TrainHyper,
) -> Result<(Adapter, ClassifierHead, TrainReport)> {
    hyper.validate()?;
    let distinct: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.kg_label).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("KG classification needs at least two distinct KG labels"));
    }
    if let Some(s) = samples.iter().find(|s| s.kg_label >= labels.len()) {
        return Err(Error::invalid(format!("sample {} has label {} of {}", s.id, s.kg_label, labels.len())));
    }
    let cfg = &backbone.config;
    let seqs: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| encode_statement(tokenizer, &s.statement, cfg.max_seq_len))
        .collect::<Result<_>>()?;
    let mut adapter = init_adapter(cfg, AdapterRole::KgClassifier, hyper.seed)?;
    let mut head = init_classifier_head(cfg, labels.to_vec(), hyper.seed)?;
    let n = samples.len();
    let mut opt = AdamW::new(hyper.adam(), n.div_ceil(hyper.batch_size) * hyper.epochs)?;
    let mut report = TrainReport::default();
    for epoch in 0..hyper.epochs {
        let order = epoch_order(n, hyper.seed, "kgc", epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            if report.first_batch.is_empty() {
                report.first_batch = batch.to_vec();
            }
            let bs: Vec<Vec<u32>> = batch.iter().map(|&i| seqs[i].clone()).collect();
            let bl: Vec<usize> = batch.iter().map(|&i| samples[i].kg_label).collect();
            let view = ModelView::Adapter {
                backbone,
                adapter: &adapter,
            };
            let LossGrads { loss, grads } = kgc_loss_grads(&view, &head, true, true, &bs, &bl)?;
            check_finite(loss, "kgc")?;
            report.loss_curve.push(loss);
            loss_sum += loss * batch.len() as f64;
            let mut params = prefixed("adapter.", adapter.tensors_mut());
            params.push(("head.weight".into(), &mut head.weight));
            opt.step(params, &grads)?;
        }
        report.epoch_losses.push(loss_sum / n as f64);
    }
    report.steps = opt.steps_taken();
    adapter.round_to_f32();
    head.round_to_f32();
    Ok((adapter, head, report))
}

/// Fraction of masked positions in MLM pretraining.
pub const MLM_MASK_RATE: f64 = 0.15;

/// Masks `MLM_MASK_RATE` of each sequence's non-special positions (at least one).
fn mask_batch(seqs: &[&Vec<u32>], mask_id: u32, pad_id: u32, rng: &mut Rng) -> (TokenBatch, Vec<usize>, Vec<u32>) {
    let mut masked: Vec<Vec<u32>> = Vec::with_capacity(seqs.len());
    let mut picks = Vec::with_capacity(seqs.len());
    for s in seqs {
        let cands: Vec<usize> = (0..s.len()).filter(|&p| !Tokenizer::is_special(s[p])).collect();
        let mut chosen: Vec<usize> = cands.iter().copied().filter(|_| rng.random::<f64>() < MLM_MASK_RATE).collect();
        if chosen.is_empty() && !cands.is_empty() {
            chosen.push(cands[rng.random_range(0..cands.len())]);
        }
        let mut m = (*s).clone();
        for &p in &chosen {
            m[p] = mask_id;
        }
        masked.push(m);
        picks.push(chosen);
    }
    let batch = TokenBatch::padded(&masked, pad_id);
    let t = batch.layout.seq_len;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (chosen, s)) in picks.iter().zip(seqs).enumerate() {
        for &p in chosen {
            rows.push(b * t + p);
            targets.push(s[p]);
        }
    }
    (batch, rows, targets)
}

/// Masked-LM loss of `backbone` on `corpus` with masks drawn from `seed`.
pub fn mlm_eval_loss(backbone: &Backbone, corpus: &[Vec<u32>], seed: u64) -> Result<f64> {
    let mut rng = seed::derived_rng(seed, "mlm-eval");
    let cfg = &backbone.config;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in corpus.chunks(32) {
        let refs: Vec<&Vec<u32>> = chunk.iter().collect();
        let (batch, rows, targets) = mask_batch(&refs, cfg.mask_token_id, cfg.pad_token_id, &mut rng);
        if rows.is_empty() {
            continue;
        }
        let lg = mlm_loss_grads(&ModelView::Plain(backbone), Trainable::default(), &batch, &rows, &targets)?;
        total += lg.loss * rows.len() as f64;
        count += rows.len();
    }
    if count == 0 {
        return Err(Error::invalid("corpus has no maskable tokens"));
    }
    Ok(total / count as f64)
}

/// MLM pretraining for `hyper.steps` optimizer steps over `[CLS] … [SEP]` sequences.
/// With zero steps the input is returned unchanged.
pub fn pretrain_backbone(backbone: &Backbone, corpus: &[Vec<u32>], hyper: &TrainHyper) -> Result<(Backbone, TrainReport)> {
    hyper.validate()?;
    let mut out = backbone.clone();
    let mut report = TrainReport::default();
    if hyper.steps == 0 {
        return Ok((out, report));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    let cfg = backbone.config.clone();
    if let Some(s) = corpus.iter().find(|s| s.len() > cfg.max_seq_len) {
        return Err(Error::SequenceTooLong {
            len: s.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut opt = AdamW::new(hyper.adam(), hyper.steps)?;
    let mut mask_rng = seed::derived_rng(hyper.seed, "mlm/mask");
    let mut epoch = 0;
    let mut order = epoch_order(corpus.len(), hyper.seed, "mlm", epoch);
    let mut cursor = 0;
    let train = Trainable {
        backbone: true,
        ..Trainable::default()
    };
    while opt.steps_taken() < hyper.steps {
        let mut picked = Vec::with_capacity(hyper.batch_size);
        while picked.len() < hyper.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                epoch += 1;
                order = epoch_order(corpus.len(), hyper.seed, "mlm", epoch);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        if report.first_batch.is_empty() {
            report.first_batch = picked.clone();
        }
        let refs: Vec<&Vec<u32>> = picked.iter().map(|&i| &corpus[i]).collect();
        let (batch, rows, targets) = mask_batch(&refs, cfg.mask_token_id, cfg.pad_token_id, &mut mask_rng);
        if rows.is_empty() {
            return Err(Error::invalid("pretraining batch has no maskable tokens"));
        }
        let lg = mlm_loss_grads(&ModelView::Plain(&out), train, &batch, &rows, &targets)?;
        check_finite(lg.loss, "backbone")?;
        report.loss_curve.push(lg.loss);
        opt.step(prefixed("backbone.", out.tensors_mut()), &lg.grads)?;
    }
    report.steps = opt.steps_taken();
    out.round_to_f32();
    Ok((out, report))
}
