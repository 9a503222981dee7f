//! Answer scoring and training losses: pseudo-log-likelihood option scores,
//! the margin ranking loss, KG-classification cross-entropy and masked-LM NLL.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{
    classifier_logits, encode, mlm_logits, Adapter, BoundRoute, ClassifierHead, ModelConfig, ModelView, Parameters,
    TokenBatch, Trainable,
};
use crate::seed::Rng;
use crate::synth::QaSample;
use crate::tensor::{log_sum_exp, Matrix};
use crate::tokenizer::{Tokenizer, CLS_ID, MASK_ID, SEP_ID};

/// Per-option scores `S` (mean negative log-likelihood, lower is better).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredOptions {
    pub scores: Vec<f64>,
    pub token_counts: Vec<usize>,
}

impl ScoredOptions {
    pub fn new(scores: Vec<f64>, token_counts: Vec<usize>) -> Result<Self> {
        if scores.len() != token_counts.len() {
            return Err(Error::invalid("score and token-count lengths differ"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite option score"));
        }
        if token_counts.contains(&0) {
            return Err(Error::invalid("an option has no scoreable tokens"));
        }
        Ok(Self { scores, token_counts })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingHyper {
    pub margin: f64,
    pub option_count: usize,
}

impl Default for RankingHyper {
    fn default() -> Self {
        Self {
            margin: 1.0,
            option_count: 3,
        }
    }
}

/// One option's input: `[CLS] question-with-answer [SEP]` and the answer's token span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptionSequence {
    pub ids: Vec<u32>,
    pub answer: Range<usize>,
}

impl OptionSequence {
    /// Positions that are scored: everything except `[CLS]`/`[SEP]`/`[PAD]`,
    /// or only the answer span with `answer_only`.
    pub fn scoreable(&self, answer_only: bool) -> Vec<usize> {
        let range = if answer_only { self.answer.clone() } else { 0..self.ids.len() };
        range.filter(|&p| !Tokenizer::is_special(self.ids[p])).collect()
    }
}

/// The `m` option sequences of a sample. The answer fills the mask slot when
/// the question has one and is appended otherwise.
pub fn build_sequences(sample: &QaSample, tokenizer: &Tokenizer, max_seq_len: usize) -> Result<Vec<OptionSequence>> {
    sample.validate()?;
    let question = tokenizer.encode(&sample.question);
    let slot = question.iter().position(|&t| t == MASK_ID);
    sample
        .options
        .iter()
        .map(|opt| {
            let answer = tokenizer.encode(opt);
            if answer.is_empty() {
                return Err(Error::invalid(format!("sample {}: empty option text", sample.id)));
            }
            let (before, after) = match slot {
                Some(p) => (&question[..p], &question[p + 1..]),
                None => (&question[..], &[][..]),
            };
            let mut ids = Vec::with_capacity(question.len() + answer.len() + 2);
            ids.push(CLS_ID);
            ids.extend_from_slice(before);
            let start = ids.len();
            ids.extend_from_slice(&answer);
            let end = ids.len();
            ids.extend_from_slice(after);
            ids.push(SEP_ID);
            if ids.len() > max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: ids.len(),
                    max: max_seq_len,
                });
            }
            Ok(OptionSequence { ids, answer: start..end })
        })
        .collect()
}

/// Masked-token NLL terms on a tape: `logits` holds one row per target.
pub(crate) struct MaskedNll {
    pub logits: NodeId,
    pub targets: Vec<usize>,
    /// Mean NLL over the targets.
    pub value: f64,
    /// `d value / d logits`.
    pub grad: Matrix,
}

pub(crate) fn masked_nll(tape: &Tape, logits: NodeId, targets: Vec<usize>) -> MaskedNll {
    let l = tape.value(logits);
    let n = targets.len() as f64;
    let mut grad = Matrix::zeros(l.rows(), l.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = l.row(r);
        let lse = log_sum_exp(row);
        total += lse - row[t];
        for (g, &x) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (x - lse).exp() / n;
        }
        grad.row_mut(r)[t] -= 1.0 / n;
    }
    MaskedNll {
        logits,
        targets,
        value: total / n,
        grad,
    }
}

impl MaskedNll {
    pub(crate) fn seed(&self, scale: f64) -> (NodeId, Matrix) {
        let mut g = self.grad.clone();
        g.scale(scale);
        (self.logits, g)
    }
}

/// Pseudo-log-likelihood of `seq` at `positions` on a tape: one masked copy per position.
pub(crate) fn pll_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &(crate::model::BoundBackbone, BoundRoute),
    seq: &[u32],
    positions: &[usize],
    dropout_rng: Option<&mut Rng>,
) -> Result<MaskedNll> {
    if positions.is_empty() {
        return Err(Error::invalid("sequence has no scoreable positions"));
    }
    let batch = TokenBatch::masked_copies(seq, positions, config.mask_token_id);
    let enc = encode(tape, config, &bound.0, &bound.1, &batch, dropout_rng)?;
    let t = seq.len();
    let rows: Vec<usize> = positions.iter().enumerate().map(|(b, &p)| b * t + p).collect();
    let logits = mlm_logits(tape, &bound.0.head, enc.output, &rows);
    let targets = positions.iter().map(|&p| seq[p] as usize).collect();
    Ok(masked_nll(tape, logits, targets))
}

/// `S = -(1/|T|) Σ_t log P(w_t | T with t masked)` over the scoreable positions.
pub fn pseudo_ll_score(view: &ModelView, seq: &[u32]) -> Result<f64> {
    let positions: Vec<usize> = (0..seq.len()).filter(|&p| !Tokenizer::is_special(seq[p])).collect();
    score_positions(view, seq, &positions)
}

pub fn score_positions(view: &ModelView, seq: &[u32], positions: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = view.bind(&mut tape, Trainable::default(), None)?;
    Ok(pll_on_tape(&mut tape, view.config(), &bound, seq, positions, None)?.value)
}

/// `(1/m) Σ_{j≠label} max(0, η + S_label − S_j)`.
pub fn ranking_loss(scored: &ScoredOptions, label: usize, hyper: &RankingHyper) -> Result<f64> {
    Ok(ranking_loss_grad(scored, label, hyper)?.0)
}

/// The ranking loss and its gradient with respect to each score.
pub fn ranking_loss_grad(scored: &ScoredOptions, label: usize, hyper: &RankingHyper) -> Result<(f64, Vec<f64>)> {
    let m = scored.len();
    if m < 2 {
        return Err(Error::invalid("ranking loss needs at least two options"));
    }
    if label >= m {
        return Err(Error::invalid(format!("label {label} out of range for {m} options")));
    }
    if hyper.margin.is_nan() || hyper.margin <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {}", hyper.margin)));
    }
    let s = &scored.scores;
    let inv = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; m];
    for j in (0..m).filter(|&j| j != label) {
        let h = hyper.margin + s[label] - s[j];
        if h > 0.0 {
            loss += h;
            grad[label] += inv;
            grad[j] -= inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Index of the lowest score; ties go to the lowest index.
pub fn predict(scored: &ScoredOptions) -> usize {
    argmin(&scored.scores)
}

pub(crate) fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = j;
        }
    }
    best
}

/// `-log ŷ[argmax y]` for a one-hot `y`.
pub fn kgc_loss(probs: &[f64], one_hot: &[f64]) -> Result<f64> {
    if probs.len() != one_hot.len() || probs.is_empty() {
        return Err(Error::invalid("prediction and target lengths differ"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-4 || probs.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
        return Err(Error::invalid(format!("prediction is not a distribution (sums to {sum})")));
    }
    let ones = one_hot.iter().filter(|&&y| y == 1.0).count();
    if ones != 1 || one_hot.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("target is not one-hot"));
    }
    let gold = one_hot.iter().position(|&y| y == 1.0).expect("one-hot");
    Ok(-probs[gold].ln())
}

/// Scores every option of a QA sample.
pub trait OptionScorer {
    fn score(&self, sample: &QaSample) -> Result<ScoredOptions>;

    /// Tag recorded in prediction records.
    fn tag(&self) -> &str;
}

/// Pseudo-log-likelihood scorer over a model view.
pub struct LmScorer<'a> {
    pub view: ModelView<'a>,
    pub tokenizer: &'a Tokenizer,
    pub answer_only: bool,
    pub tag: String,
}

impl<'a> LmScorer<'a> {
    pub fn new(view: ModelView<'a>, tokenizer: &'a Tokenizer, tag: impl Into<String>) -> Self {
        Self {
            view,
            tokenizer,
            answer_only: false,
            tag: tag.into(),
        }
    }
}

impl OptionScorer for LmScorer<'_> {
    fn score(&self, sample: &QaSample) -> Result<ScoredOptions> {
        let seqs = build_sequences(sample, self.tokenizer, self.view.config().max_seq_len)?;
        let mut scores = Vec::with_capacity(seqs.len());
        let mut counts = Vec::with_capacity(seqs.len());
        for s in &seqs {
            let pos = s.scoreable(self.answer_only);
            scores.push(score_positions(&self.view, &s.ids, &pos)?);
            counts.push(pos.len());
        }
        ScoredOptions::new(scores, counts)
    }

    fn tag(&self) -> &str {
        &self.tag
    }
}

/// Gradients keyed `backbone.*`, `adapter.*`, `fusion.*` or `head.*`, in
/// parameter order, for the trainable groups only.
pub type NamedGrads = Vec<(String, Matrix)>;

fn grads_for(grads: &mut Gradients, prefix: &str, names: Vec<(String, &Matrix)>, ids: Vec<NodeId>) -> NamedGrads {
    names
        .into_iter()
        .zip(ids)
        .map(|((n, m), id)| {
            let g = grads.take(id).unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            (format!("{prefix}{n}"), g)
        })
        .collect()
}

fn collect_grads(
    grads: &mut Gradients,
    view: &ModelView,
    bound: &(crate::model::BoundBackbone, BoundRoute),
    train: Trainable,
) -> NamedGrads {
    let mut out = Vec::new();
    if train.backbone {
        out.extend(grads_for(grads, "backbone.", view.backbone().tensors(), bound.0.ids()));
    }
    match (view, &bound.1) {
        (ModelView::Adapter { adapter, .. }, BoundRoute::Adapter(ba)) if train.adapter => {
            out.extend(grads_for(grads, "adapter.", adapter.tensors(), ba.ids()));
        }
        (ModelView::Fusion { fusion, .. }, BoundRoute::Fusion { fusion: bf, .. }) if train.fusion => {
            out.extend(grads_for(grads, "fusion.", fusion.tensors(), bf.ids()));
        }
        _ => {}
    }
    out
}

/// Result of one differentiable loss evaluation.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub grads: NamedGrads,
}

/// Ranking loss of one sample over pseudo-LL option scores, with gradients of
/// the trainable groups. `dropout_rng` enables fusion attention dropout.
pub fn ranking_loss_grads(
    view: &ModelView,
    train: Trainable,
    seqs: &[OptionSequence],
    label: usize,
    hyper: &RankingHyper,
    answer_only: bool,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(LossGrads, ScoredOptions)> {
    let mut tape = Tape::new();
    let bound = view.bind(&mut tape, train, None)?;
    let mut terms = Vec::with_capacity(seqs.len());
    for s in seqs {
        let pos = s.scoreable(answer_only);
        terms.push(pll_on_tape(&mut tape, view.config(), &bound, &s.ids, &pos, dropout_rng.as_deref_mut())?);
    }
    let scored = ScoredOptions::new(
        terms.iter().map(|t| t.value).collect(),
        terms.iter().map(|t| t.targets.len()).collect(),
    )?;
    let (loss, dscore) = ranking_loss_grad(&scored, label, hyper)?;
    let seeds = terms
        .iter()
        .zip(&dscore)
        .filter(|(_, &d)| d != 0.0)
        .map(|(t, &d)| t.seed(d))
        .collect();
    let mut grads = tape.backward(seeds);
    let grads = collect_grads(&mut grads, view, &bound, train);
    Ok((LossGrads { loss, grads }, scored))
}

/// Mean masked-LM NLL of `batch` at `rows` (flattened row indices) against `targets`.
pub fn mlm_loss_grads(
    view: &ModelView,
    train: Trainable,
    batch: &TokenBatch,
    rows: &[usize],
    targets: &[u32],
) -> Result<LossGrads> {
    if rows.is_empty() || rows.len() != targets.len() {
        return Err(Error::invalid("masked-LM loss needs matching, non-empty rows and targets"));
    }
    let mut tape = Tape::new();
    let bound = view.bind(&mut tape, train, None)?;
    let enc = encode(&mut tape, view.config(), &bound.0, &bound.1, batch, None)?;
    let logits = mlm_logits(&mut tape, &bound.0.head, enc.output, rows);
    let nll = masked_nll(&tape, logits, targets.iter().map(|&t| t as usize).collect());
    let mut grads = tape.backward(vec![nll.seed(1.0)]);
    Ok(LossGrads {
        loss: nll.value,
        grads: collect_grads(&mut grads, view, &bound, train),
    })
}

/// Mean cross-entropy of `softmax(W_KGC · h_CLS)` over a batch of `[CLS]`-led
/// sequences. Gradients cover the classifier adapter (`adapter.*`) and/or the
/// head (`head.weight`).
pub fn kgc_loss_grads(
    view: &ModelView,
    head: &ClassifierHead,
    train_adapter: bool,
    train_head: bool,
    seqs: &[Vec<u32>],
    labels: &[usize],
) -> Result<LossGrads> {
    if seqs.is_empty() || seqs.len() != labels.len() {
        return Err(Error::invalid("classifier batch needs matching, non-empty sequences and labels"));
    }
    let k = head.labels.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("KG label {bad} out of range for {k} classes")));
    }
    let train = Trainable {
        adapter: train_adapter,
        ..Trainable::default()
    };
    let mut tape = Tape::new();
    let bound = view.bind(&mut tape, train, None)?;
    let w = head.bind(&mut tape, train_head);
    let batch = TokenBatch::padded(seqs, view.config().pad_token_id);
    let logits = classifier_logits(&mut tape, view.config(), &bound.0, &bound.1, w, &batch)?;
    let nll = masked_nll(&tape, logits, labels.to_vec());
    let mut grads = tape.backward(vec![nll.seed(1.0)]);
    let mut out = collect_grads(&mut grads, view, &bound, train);
    if train_head {
        out.push((
            "head.weight".into(),
            grads.take(w).unwrap_or_else(|| Matrix::zeros(k, head.weight.cols())),
        ));
    }
    Ok(LossGrads {
        loss: nll.value,
        grads: out,
    })
}

/// Encodes a KG-classification statement as `[CLS] statement [SEP]`.
pub fn encode_statement(tokenizer: &Tokenizer, statement: &str, max_seq_len: usize) -> Result<Vec<u32>> {
    let ids = tokenizer.encode_wrapped(statement);
    if ids.len() > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: max_seq_len,
        });
    }
    Ok(ids)
}

/// Mean classifier loss over `seqs` without gradients.
pub fn kgc_eval_loss(
    backbone: &crate::model::Backbone,
    adapter: &Adapter,
    head: &ClassifierHead,
    seqs: &[Vec<u32>],
    labels: &[usize],
) -> Result<f64> {
    let view = ModelView::Adapter { backbone, adapter };
    Ok(kgc_loss_grads(&view, head, false, false, seqs, labels)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_adapter, init_backbone, AdapterRole, ArchConfig};
    use proptest::prelude::*;

    fn scored(s: &[f64]) -> ScoredOptions {
        ScoredOptions::new(s.to_vec(), vec![1; s.len()]).unwrap()
    }

    #[test]
    fn ranking_loss_worked_values() {
        let h = RankingHyper::default();
        assert!((ranking_loss(&scored(&[0.5, 0.2]), 0, &h).unwrap() - 0.65).abs() < 1e-12);
        assert_eq!(ranking_loss(&scored(&[0.1, 1.2, 1.5]), 0, &h).unwrap(), 0.0);
        assert!((ranking_loss(&scored(&[0.4, 0.4, 0.4]), 2, &h).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(ranking_loss(&scored(&[0.4]), 0, &h).is_err());
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(&scored(&[0.9, 0.3, 0.7])), 1);
        assert_eq!(predict(&scored(&[0.5, 0.5])), 0);
        assert_eq!(predict(&scored(&[2.0])), 0);
    }

    #[test]
    fn kgc_loss_values() {
        assert_eq!(kgc_loss(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((kgc_loss(&[0.25; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((kgc_loss(&[0.25, 0.75], &[1.0, 0.0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(kgc_loss(&[0.5, 0.6], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn ranking_loss_nonnegative_and_shift_invariant(
            s in proptest::collection::vec(-5.0f64..5.0, 2..6),
            c in -3.0f64..3.0,
            label_seed in 0usize..100,
        ) {
            let label = label_seed % s.len();
            let h = RankingHyper { margin: 1.0, option_count: s.len() };
            let l = ranking_loss(&scored(&s), label, &h).unwrap();
            prop_assert!(l >= 0.0);
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            prop_assert_eq!(predict(&scored(&s)), predict(&scored(&shifted)));
            let satisfied = s.iter().enumerate().all(|(j, &x)| j == label || x - s[label] >= 1.0);
            prop_assert_eq!(l == 0.0, satisfied);
        }
    }

    fn tok() -> Tokenizer {
        Tokenizer::with_default_mask(["pentode is a [MASK] vacuum tube ascocarp girls footwear dana is seen as risky ."])
    }

    fn sample(question: &str, options: &[&str], label: usize) -> QaSample {
        QaSample {
            id: "s".into(),
            question: question.into(),
            options: options.iter().map(|s| s.to_string()).collect(),
            label,
            kg: "k".into(),
        }
    }

    #[test]
    fn sequences_fill_mask_or_append() {
        let t = tok();
        let s = sample("pentode is a [MASK]", &["vacuum tube", "ascocarp"], 0);
        let seqs = build_sequences(&s, &t, 64).unwrap();
        let mut want = vec![CLS_ID];
        want.extend(t.encode("pentode is a vacuum tube"));
        want.push(SEP_ID);
        assert_eq!(seqs[0].ids, want);
        assert_eq!(seqs[0].answer, 4..6);
        let e = sample("dana is seen as", &["risky", "ascocarp"], 0);
        let seqs = build_sequences(&e, &t, 64).unwrap();
        assert_eq!(seqs[0].ids[1..seqs[0].ids.len() - 1], t.encode("dana is seen as risky")[..]);
        assert_eq!(seqs[0].scoreable(true), vec![5]);
        assert!(build_sequences(&sample("pentode is a [MASK]", &["", "x"], 0), &t, 64).is_err());
        assert!(matches!(build_sequences(&s, &t, 5), Err(Error::SequenceTooLong { .. })));
    }

    fn toy(position_embeddings: bool, vocab: usize) -> ModelConfig {
        ModelConfig::new(
            &ArchConfig {
                hidden_dim: 8,
                layer_count: 1,
                head_count: 2,
                ffn_dim: 12,
                max_seq_len: 16,
                adapter_bottleneck_dim: 3,
                position_embeddings,
            },
            vocab,
        )
    }

    #[test]
    fn uniform_head_scores_ln_v() {
        let mut b = init_backbone(&toy(true, 25), 1).unwrap();
        b.head.weight = Matrix::zeros(8, 25);
        let s = pseudo_ll_score(&ModelView::Plain(&b), &[1, 7, 8, 9, 2]).unwrap();
        assert!((s - 25f64.ln()).abs() < 1e-12);
        assert!(pseudo_ll_score(&ModelView::Plain(&b), &[1, 2]).is_err());
    }

    #[test]
    fn context_free_model_is_invariant_to_duplication() {
        let mut b = init_backbone(&toy(false, 25), 1).unwrap();
        for l in &mut b.layers {
            l.attn_value = Matrix::zeros(8, 8);
        }
        let view = ModelView::Plain(&b);
        let once = pseudo_ll_score(&view, &[1, 7, 12, 9, 2]).unwrap();
        let twice = pseudo_ll_score(&view, &[1, 7, 12, 9, 7, 12, 9, 2]).unwrap();
        assert!((once - twice).abs() <= 1e-6);
    }

    #[test]
    fn scorer_respects_answer_only() {
        let t = tok();
        let cfg = toy(true, t.vocab_size());
        let b = init_backbone(&cfg, 3).unwrap();
        let s = sample("pentode is a [MASK]", &["vacuum tube", "ascocarp", "girls footwear"], 0);
        let mut sc = LmScorer::new(ModelView::Plain(&b), &t, "plm");
        let whole = sc.score(&s).unwrap();
        assert_eq!(whole.token_counts, vec![5, 4, 5]);
        sc.answer_only = true;
        let ans = sc.score(&s).unwrap();
        assert_eq!(ans.token_counts, vec![2, 1, 2]);
        assert!(whole.scores.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn ranking_grads_only_cover_trainable_groups() {
        let t = tok();
        let cfg = toy(true, t.vocab_size());
        let b = init_backbone(&cfg, 3).unwrap();
        let a = init_adapter(&cfg, AdapterRole::Expert { kg: "k".into() }, 1).unwrap();
        let s = sample("pentode is a [MASK]", &["vacuum tube", "ascocarp", "girls footwear"], 0);
        let seqs = build_sequences(&s, &t, 16).unwrap();
        let view = ModelView::Adapter {
            backbone: &b,
            adapter: &a,
        };
        let train = Trainable {
            adapter: true,
            ..Trainable::default()
        };
        let (lg, sc) = ranking_loss_grads(&view, train, &seqs, 0, &RankingHyper::default(), false, None).unwrap();
        assert_eq!(lg.grads.len(), a.tensors().len());
        assert!(lg.grads.iter().all(|(n, _)| n.starts_with("adapter.")));
        assert!((lg.loss - ranking_loss(&sc, 0, &RankingHyper::default()).unwrap()).abs() < 1e-12);
    }
}
