//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use kgfuse::evalkit::{interference_ratio, relative_improvement, InterferenceInput, PredictionRecord, ResultKey};
use kgfuse::fixture::{concept_kg, event_kg, write_fixture};
use kgfuse::kg_store::{default_templates, KgSource};
use kgfuse::model::{
    forward_adapter, forward_fusion, forward_plain, init_adapter, init_backbone, init_classifier_head, init_fusion,
    Adapter, AdapterRole, ArchConfig, Backbone, EncoderLayer, Embeddings, MlmHead, ModelConfig, ModelView,
    Parameters, QueryMode, TokenBatch, Trainable,
};
use kgfuse::objectives::{
    kgc_loss_grads, mlm_loss_grads, pseudo_ll_score, ranking_loss_grads, OptionSequence, RankingHyper,
};
use kgfuse::pipeline::{
    train_expert, train_fusion, Experiment, ExperimentConfig, KgDecl, ModelRef, RunOptions, Stage, TrainHyper,
};
use kgfuse::seed::{self, Rng};
use kgfuse::synth::{build_fusion_mixture, derive_kgc, generate_qa, split, MixtureSpec, QaDataset};
use kgfuse::tensor::Matrix;
use kgfuse::tokenizer::Tokenizer;
use rand::Rng as _;
use rand::seq::SliceRandom;

type Check = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. Scoring oracle

const PAD: u32 = 0;
const CLS: u32 = 1;
const SEP: u32 = 2;
const MASK: u32 = 3;

fn rand_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn hand_built(layers: usize, vocab: usize, rng: &mut Rng) -> Backbone {
    let arch = ArchConfig {
        hidden_dim: 8,
        layer_count: layers,
        head_count: 2,
        ffn_dim: 12,
        max_seq_len: 16,
        adapter_bottleneck_dim: 3,
        position_embeddings: true,
    };
    let config = ModelConfig::new(&arch, vocab);
    let (h, f) = (8, 12);
    let mut r = |rows, cols, s| rand_matrix(rows, cols, s, rng);
    let embeddings = Embeddings {
        token: r(vocab, h, 1.0),
        position: r(16, h, 0.5),
        norm_gamma: r(1, h, 0.5).data().iter().map(|v| v + 1.0).collect::<Vec<_>>().pipe(|d| Matrix::from_vec(1, h, d)),
        norm_beta: r(1, h, 0.2),
    };
    let layers = (0..layers)
        .map(|_| EncoderLayer {
            attn_query: r(h, h, 0.6),
            attn_query_bias: r(1, h, 0.1),
            attn_key: r(h, h, 0.6),
            attn_key_bias: r(1, h, 0.1),
            attn_value: r(h, h, 0.6),
            attn_value_bias: r(1, h, 0.1),
            attn_output: r(h, h, 0.6),
            attn_output_bias: r(1, h, 0.1),
            attn_norm_gamma: Matrix::from_vec(1, h, r(1, h, 0.3).data().iter().map(|v| v + 1.0).collect()),
            attn_norm_beta: r(1, h, 0.1),
            ffn_in: r(h, f, 0.6),
            ffn_in_bias: r(1, f, 0.1),
            ffn_out: r(f, h, 0.5),
            ffn_out_bias: r(1, h, 0.1),
            ffn_norm_gamma: Matrix::from_vec(1, h, r(1, h, 0.3).data().iter().map(|v| v + 1.0).collect()),
            ffn_norm_beta: r(1, h, 0.1),
        })
        .collect();
    let head = MlmHead {
        weight: r(h, vocab, 0.8),
        bias: r(1, vocab, 0.2),
    };
    Backbone {
        config,
        embeddings,
        layers,
        head,
    }
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}

/// Straight-line reimplementation of the encoder on plain vectors.
mod oracle {
    use super::*;

    pub type Mat = Vec<Vec<f64>>;

    fn get(m: &Matrix) -> Mat {
        (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect()).collect()
    }

    fn affine(x: &Mat, w: &Matrix, b: &Matrix) -> Mat {
        let (w, b) = (get(w), get(b));
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|j| b[0][j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn norm(x: &Mat, g: &Matrix, b: &Matrix) -> Mat {
        let (g, b) = (get(g), get(b));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[0][j] + b[0][j])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    /// Hidden states of the last layer.
    pub fn encode(bb: &Backbone, ids: &[u32]) -> Mat {
        let tok = get(&bb.embeddings.token);
        let pos = get(&bb.embeddings.position);
        let x: Mat = ids
            .iter()
            .enumerate()
            .map(|(p, &t)| tok[t as usize].iter().zip(&pos[p]).map(|(a, b)| a + b).collect())
            .collect();
        let mut x = norm(&x, &bb.embeddings.norm_gamma, &bb.embeddings.norm_beta);
        let heads = bb.config.head_count;
        let dh = bb.config.hidden_dim / heads;
        for l in &bb.layers {
            let q = affine(&x, &l.attn_query, &l.attn_query_bias);
            let k = affine(&x, &l.attn_key, &l.attn_key_bias);
            let v = affine(&x, &l.attn_value, &l.attn_value_bias);
            let t = ids.len();
            let mut ctx = vec![vec![0.0; bb.config.hidden_dim]; t];
            for h in 0..heads {
                for i in 0..t {
                    let s: Vec<f64> = (0..t)
                        .map(|j| (0..dh).map(|d| q[i][h * dh + d] * k[j][h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..t {
                        for d in 0..dh {
                            ctx[i][h * dh + d] += e[j] / z * v[j][h * dh + d];
                        }
                    }
                }
            }
            let a = affine(&ctx, &l.attn_output, &l.attn_output_bias);
            let a = norm(&add(&x, &a), &l.attn_norm_gamma, &l.attn_norm_beta);
            let f: Mat = affine(&a, &l.ffn_in, &l.ffn_in_bias)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            let f = affine(&f, &l.ffn_out, &l.ffn_out_bias);
            x = norm(&add(&a, &f), &l.ffn_norm_gamma, &l.ffn_norm_beta);
        }
        x
    }

    /// Mean negative log-probability of each non-special token with that token masked.
    pub fn pseudo_ll(bb: &Backbone, ids: &[u32]) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for p in 0..ids.len() {
            if matches!(ids[p], PAD | CLS | SEP) {
                continue;
            }
            let mut masked = ids.to_vec();
            masked[p] = MASK;
            let h = encode(bb, &masked);
            let logits = &affine(&vec![h[p].clone()], &bb.head.weight, &bb.head.bias)[0];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - logits[ids[p] as usize];
            n += 1;
        }
        total / n as f64
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let vocab = 24;
    let mut rng = seed::rng(11);
    let bb = hand_built(1, vocab, &mut rng);
    let mut worst = 0.0f64;
    let n = 25;
    for _ in 0..n {
        let len = rng.random_range(1..=12);
        let mut ids = vec![CLS];
        ids.extend((0..len).map(|_| rng.random_range(5..vocab as u32)));
        ids.push(SEP);
        let got = pseudo_ll_score(&ModelView::Plain(&bb), &ids).map_err(err)?;
        let want = oracle::pseudo_ll(&bb, &ids);
        worst = worst.max((got - want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-6 && secs < 10.0,
        format!("{n} sequences, max |err| {worst:.2e} (tol 1e-6), {secs:.2}s (limit 10s)"),
    ))
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

const FD_STEP: f64 = 1e-3;

fn toy_config(vocab: usize) -> ModelConfig {
    ModelConfig::new(
        &ArchConfig {
            hidden_dim: 8,
            layer_count: 2,
            head_count: 2,
            ffn_dim: 12,
            max_seq_len: 16,
            adapter_bottleneck_dim: 3,
            position_embeddings: true,
        },
        vocab,
    )
}

fn perturb<P: Parameters>(p: &mut P, scale: f64, rng: &mut Rng) {
    for (_, m) in p.tensors_mut() {
        for v in m.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Group relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and
/// central-difference gradients of `loss` over every tensor of `params`.
fn fd_group<P: Parameters + Clone>(
    params: &P,
    prefix: &str,
    analytic: &[(String, Matrix)],
    loss: impl Fn(&P) -> f64,
) -> Result<(f64, usize), String> {
    let (mut diff, mut an, mut nn, mut count) = (0.0, 0.0, 0.0, 0);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        let full = format!("{prefix}{name}");
        let a = analytic
            .iter()
            .find(|(n, _)| *n == full)
            .map(|(_, m)| m)
            .ok_or_else(|| format!("no analytic gradient for {full}"))?;
        let len = params.tensors()[t].1.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t].1.data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[t].1.data_mut()[i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let av = a.data()[i];
            diff += (av - numeric).powi(2);
            an += av * av;
            nn += numeric * numeric;
            count += 1;
        }
    }
    let denom = an.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        return Err(format!("{prefix}: all-zero gradient"));
    }
    Ok((diff.sqrt() / denom, count))
}

fn toy_sequences(vocab: u32, rng: &mut Rng) -> Vec<OptionSequence> {
    let stem: Vec<u32> = (0..4).map(|_| rng.random_range(5..vocab)).collect();
    (0..3)
        .map(|_| {
            let mut ids = vec![CLS];
            ids.extend(&stem);
            let answer = ids.len()..ids.len() + 2;
            ids.extend((0..2).map(|_| rng.random_range(5..vocab)));
            ids.push(SEP);
            OptionSequence { ids, answer }
        })
        .collect()
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let vocab = 20;
    let cfg = toy_config(vocab);
    let mut rng = seed::rng(5);
    let mut bb = init_backbone(&cfg, 1).map_err(err)?;
    perturb(&mut bb, 0.3, &mut rng);
    let mut adapter = init_adapter(&cfg, AdapterRole::Expert { kg: "a".into() }, 2).map_err(err)?;
    perturb(&mut adapter, 0.4, &mut rng);
    let mut other = init_adapter(&cfg, AdapterRole::Expert { kg: "b".into() }, 3).map_err(err)?;
    perturb(&mut other, 0.4, &mut rng);
    let mut kgc = init_adapter(&cfg, AdapterRole::KgClassifier, 4).map_err(err)?;
    perturb(&mut kgc, 0.4, &mut rng);
    let mut fusion = init_fusion(&cfg, 5, 0.0).map_err(err)?;
    perturb(&mut fusion, 0.4, &mut rng);
    let mut head = init_classifier_head(&cfg, vec!["a".into(), "b".into()], 6).map_err(err)?;
    perturb(&mut head, 0.4, &mut rng);
    let experts = vec![adapter.clone(), other];

    let seqs = toy_sequences(vocab as u32, &mut rng);
    let hyper = RankingHyper {
        margin: 1.0,
        option_count: 3,
    };
    let rank = |view: &ModelView, train: Trainable| {
        ranking_loss_grads(view, train, &seqs, 1, &hyper, false, None).map(|(lg, _)| lg)
    };
    let mut results: Vec<(String, f64, usize)> = Vec::new();

    // ranking loss: θ (full model), Φ (expert adapter), Ψ (fusion, both query modes)
    let train_bb = Trainable {
        backbone: true,
        ..Trainable::default()
    };
    let g = rank(&ModelView::Plain(&bb), train_bb).map_err(err)?;
    let (e, n) = fd_group(&bb, "backbone.", &g.grads, |b| {
        rank(&ModelView::Plain(b), Trainable::default()).unwrap().loss
    })?;
    results.push(("ranking/θ".into(), e, n));

    let train_ad = Trainable {
        adapter: true,
        ..Trainable::default()
    };
    let g = rank(&ModelView::Adapter { backbone: &bb, adapter: &adapter }, train_ad).map_err(err)?;
    let (e, n) = fd_group(&adapter, "adapter.", &g.grads, |a| {
        rank(&ModelView::Adapter { backbone: &bb, adapter: a }, Trainable::default()).unwrap().loss
    })?;
    results.push(("ranking/Φ".into(), e, n));

    let train_fu = Trainable {
        fusion: true,
        ..Trainable::default()
    };
    for (mode, q) in [("plm", None), ("kgc", Some(&kgc))] {
        let view = ModelView::Fusion {
            backbone: &bb,
            experts: &experts,
            fusion: &fusion,
            kgc: q,
        };
        let g = rank(&view, train_fu).map_err(err)?;
        let (e, n) = fd_group(&fusion, "fusion.", &g.grads, |f| {
            let v = ModelView::Fusion {
                backbone: &bb,
                experts: &experts,
                fusion: f,
                kgc: q,
            };
            rank(&v, Trainable::default()).unwrap().loss
        })?;
        results.push((format!("ranking/Ψ ({mode} query)"), e, n));
    }

    // cross-entropy: classifier adapter and W_KGC
    let stmts: Vec<Vec<u32>> = (0..4)
        .map(|_| {
            let mut s = vec![CLS];
            s.extend((0..5).map(|_| rng.random_range(5..vocab as u32)));
            s.push(SEP);
            s
        })
        .collect();
    let labels = [0, 1, 1, 0];
    let view = ModelView::Adapter {
        backbone: &bb,
        adapter: &kgc,
    };
    let g = kgc_loss_grads(&view, &head, true, true, &stmts, &labels).map_err(err)?;
    let (e, n) = fd_group(&kgc, "adapter.", &g.grads, |a| {
        let v = ModelView::Adapter { backbone: &bb, adapter: a };
        kgc_loss_grads(&v, &head, false, false, &stmts, &labels).unwrap().loss
    })?;
    results.push(("cross-entropy/Φ_KGC".into(), e, n));
    let (e, n) = fd_group(&head, "head.", &g.grads, |h| {
        kgc_loss_grads(&view, h, false, false, &stmts, &labels).unwrap().loss
    })?;
    results.push(("cross-entropy/W_KGC".into(), e, n));

    // masked LM: θ
    let seqs_mlm: Vec<Vec<u32>> = stmts.iter().take(3).cloned().collect();
    let mut masked = seqs_mlm.clone();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let t = seqs_mlm.iter().map(Vec::len).max().unwrap_or(0);
    for (b, s) in masked.iter_mut().enumerate() {
        for p in [2, 4] {
            targets.push(s[p]);
            s[p] = MASK;
            rows.push(b * t + p);
        }
    }
    let batch = TokenBatch::padded(&masked, PAD);
    let g = mlm_loss_grads(&ModelView::Plain(&bb), train_bb, &batch, &rows, &targets).map_err(err)?;
    let (e, n) = fd_group(&bb, "backbone.", &g.grads, |b| {
        mlm_loss_grads(&ModelView::Plain(b), Trainable::default(), &batch, &rows, &targets)
            .unwrap()
            .loss
    })?;
    results.push(("masked-LM/θ".into(), e, n));

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(g, e, n)| format!("{g} {e:.1e} ({n} params)"))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        worst <= 1e-3 && secs < 60.0,
        format!("{detail}; worst {worst:.1e} (tol 1e-3), {secs:.1}s (limit 60s)"),
    ))
}

// ---------------------------------------------------------------------------
// 3. Freeze contracts

fn bits<P: Parameters>(p: &P) -> Vec<u64> {
    p.tensors().iter().flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits())).collect()
}

fn small_fixture() -> Result<(Vec<QaDataset>, Tokenizer), String> {
    let reg = default_templates();
    let mut out = Vec::new();
    for kg in [event_kg(), concept_kg()] {
        let ds = generate_qa(&kg, &reg, 3, &mut seed::rng(3)).map_err(err)?;
        let samples = ds.samples.into_iter().take(24).collect();
        out.push(QaDataset::new(ds.kg, samples).map_err(err)?);
    }
    let mut texts = Vec::new();
    for d in &out {
        for s in &d.samples {
            texts.push(s.question.clone());
            texts.extend(s.options.iter().cloned());
        }
    }
    texts.push(".".into());
    let tok = Tokenizer::with_default_mask(texts.iter().map(String::as_str));
    Ok((out, tok))
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        hidden_dim: 16,
        layer_count: 2,
        head_count: 2,
        ffn_dim: 32,
        max_seq_len: 32,
        adapter_bottleneck_dim: 4,
        position_embeddings: true,
    }
}

fn criterion_3() -> Check {
    let (data, tok) = small_fixture()?;
    let cfg = ModelConfig::new(&small_arch(), tok.vocab_size());
    let bb = init_backbone(&cfg, 9).map_err(err)?;
    let hyper = TrainHyper {
        learning_rate: 5e-3,
        batch_size: 8,
        epochs: 1,
        seed: 4,
        ..TrainHyper::default()
    };
    let theta = bits(&bb);
    let experts: Vec<Adapter> = data
        .iter()
        .map(|d| train_expert(&bb, d, &tok, &hyper).map(|r| r.0))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let after_expert = bits(&bb) == theta;
    let phi: Vec<Vec<u64>> = experts.iter().map(bits).collect();
    let labels: Vec<String> = data.iter().map(|d| d.kg.clone()).collect();
    let (kgc, _, _) =
        kgfuse::pipeline::train_kgc(&bb, &derive_kgc(&data).map_err(err)?, &labels, &tok, &hyper).map_err(err)?;
    let phi_kgc = bits(&kgc);
    let after_kgc = bits(&bb) == theta;
    let mix = build_fusion_mixture(&data, MixtureSpec { per_kg_count: 12, seed: 1 }).map_err(err)?;
    let mut ok_fusion = true;
    for (mode, q) in [(QueryMode::Plm, None), (QueryMode::Kgc, Some(&kgc))] {
        let (f, _) = train_fusion(&bb, &experts, &mix, &tok, &hyper, mode, q, 0.1).map_err(err)?;
        ok_fusion &= bits(&bb) == theta
            && experts.iter().map(bits).collect::<Vec<_>>() == phi
            && bits(&kgc) == phi_kgc
            && f.is_finite();
    }
    Ok((
        after_expert && after_kgc && ok_fusion,
        format!(
            "θ unchanged by expert training: {after_expert}; by classifier training: {after_kgc}; θ, Φ and Φ_KGC unchanged by fusion (plm and kgc query): {ok_fusion}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4. Identity start

fn random_ids(vocab: u32, rng: &mut Rng) -> Vec<u32> {
    let len = rng.random_range(2..=14);
    let mut ids = vec![CLS];
    ids.extend((0..len).map(|_| rng.random_range(3..vocab)));
    ids.push(SEP);
    ids
}

fn criterion_4() -> Check {
    let vocab = 30;
    let cfg = toy_config(vocab);
    let mut rng = seed::rng(21);
    let (mut adapter_err, mut fusion_err) = (0.0f64, 0.0f64);
    for trial in 0..20u64 {
        let mut bb = init_backbone(&cfg, trial).map_err(err)?;
        perturb(&mut bb, 0.5, &mut rng);
        let fresh = init_adapter(&cfg, AdapterRole::Expert { kg: "a".into() }, trial + 100).map_err(err)?;
        let mut trained = fresh.clone();
        perturb(&mut trained, 0.5, &mut rng);
        let kgc = {
            let mut k = init_adapter(&cfg, AdapterRole::KgClassifier, trial + 200).map_err(err)?;
            perturb(&mut k, 0.5, &mut rng);
            k
        };
        let fusion = init_fusion(&cfg, trial + 300, 0.1).map_err(err)?;
        let ids = random_ids(vocab as u32, &mut rng);
        let plain = forward_plain(&bb, &ids).map_err(err)?;
        let adapted = forward_adapter(&bb, &fresh, &ids).map_err(err)?;
        adapter_err = adapter_err
            .max(plain.logits.max_abs_diff(&adapted.logits))
            .max(plain.output.max_abs_diff(&adapted.output));
        let expert = forward_adapter(&bb, &trained, &ids).map_err(err)?;
        for (mode, q) in [(QueryMode::Plm, None), (QueryMode::Kgc, Some(&kgc))] {
            let fused = forward_fusion(&bb, std::slice::from_ref(&trained), &fusion, &ids, mode, q).map_err(err)?;
            fusion_err = fusion_err
                .max(fused.logits.max_abs_diff(&expert.logits))
                .max(fused.output.max_abs_diff(&expert.output));
        }
    }
    Ok((
        adapter_err <= 1e-7 && fusion_err <= 1e-6,
        format!(
            "zero-init adapter vs plain max |Δ| {adapter_err:.1e} (tol 1e-7); K=1 fusion vs expert max |Δ| {fusion_err:.1e} (tol 1e-6); 20 random models"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 5. Attention normalization

fn criterion_5() -> Check {
    let vocab = 30;
    let cfg = toy_config(vocab);
    let mut rng = seed::rng(33);
    let mut worst = 0.0f64;
    let mut rows = 0;
    for i in 0..100u64 {
        let mut bb = init_backbone(&cfg, i).map_err(err)?;
        perturb(&mut bb, 0.3, &mut rng);
        let k = 1 + (i as usize % 4);
        let experts: Vec<Adapter> = (0..k)
            .map(|e| {
                let mut a = init_adapter(&cfg, AdapterRole::Expert { kg: format!("kg{e}") }, i * 10 + e as u64)?;
                perturb(&mut a, 0.8, &mut rng);
                Ok(a)
            })
            .collect::<kgfuse::Result<_>>()
            .map_err(err)?;
        let mut kgc = init_adapter(&cfg, AdapterRole::KgClassifier, i + 7).map_err(err)?;
        perturb(&mut kgc, 0.8, &mut rng);
        let mut fusion = init_fusion(&cfg, i, 0.1).map_err(err)?;
        perturb(&mut fusion, 2.0, &mut rng);
        let ids = random_ids(vocab as u32, &mut rng);
        let (mode, q) = if i % 2 == 0 { (QueryMode::Kgc, Some(&kgc)) } else { (QueryMode::Plm, None) };
        let trace = forward_fusion(&bb, &experts, &fusion, &ids, mode, q).map_err(err)?;
        if !trace.is_finite() || trace.attention.len() != cfg.layer_count {
            return Ok((false, format!("input {i}: non-finite trace or missing attention")));
        }
        for a in &trace.attention {
            for r in 0..a.rows() {
                let s: f64 = a.row(r).iter().sum();
                if a.row(r).iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Ok((false, format!("input {i}: probability outside [0, 1]")));
                }
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    Ok((
        worst <= 1e-6,
        format!("100 inputs, {rows} (layer, position) distributions, max |Σp − 1| {worst:.1e} (tol 1e-6)"),
    ))
}

// ---------------------------------------------------------------------------
// 6 and 7. Fixture runs

struct FixtureRun {
    exp: Experiment,
    wall: Duration,
}

fn fixture_experiment(root: &Path, out: &str, seed: u64) -> Result<Experiment, String> {
    let kgs = write_fixture(&root.join("kgs"))
        .map_err(err)?
        .into_iter()
        .map(|(name, path)| KgDecl {
            name,
            path: path.strip_prefix(root).map(Path::to_path_buf).unwrap_or(path),
        })
        .collect();
    let mut cfg = ExperimentConfig::with_kgs(kgs);
    cfg.seed = seed;
    Experiment::new(cfg, root, Some(root.join(out))).map_err(err)
}

fn run_fixture(root: &Path, out: &str, seed: u64) -> Result<FixtureRun, String> {
    let exp = fixture_experiment(root, out, seed)?;
    let start = Instant::now();
    exp.run_all(RunOptions::default(), |_| {}).map_err(err)?;
    Ok(FixtureRun {
        exp,
        wall: start.elapsed(),
    })
}

fn files_under(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).map_err(err)?.to_path_buf();
                out.insert(rel, std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn criterion_6(root: &Path) -> Result<(Check, Option<FixtureRun>), String> {
    let first = run_fixture(root, "seed42-a", 42)?;
    let exp = &first.exp;
    let kgs: Vec<String> = exp.config.kgs.iter().map(|k| k.name.clone()).collect();
    let mixed = exp.mixed_valid().map_err(err)?;
    let mut own = Vec::new();
    let mut mixed_acc = Vec::new();
    for kg in &kgs {
        let m = ModelRef::Stage(Stage::Expert(kg.clone()));
        own.push(exp.predict(&m, &exp.valid(kg).map_err(err)?).map_err(err)?.0);
        mixed_acc.push(exp.predict(&m, &mixed).map_err(err)?.0);
    }
    let fused = exp.predict(&ModelRef::Stage(Stage::Fusion), &mixed).map_err(err)?.0;
    let kgc = exp.kgc_accuracy().map_err(err)?;
    let best_single = mixed_acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let wall = first.wall.as_secs_f64();

    let second = run_fixture(root, "seed42-b", 42)?;
    let a = files_under(&first.exp.paths.root.join("ckpt"))?;
    let b = files_under(&second.exp.paths.root.join("ckpt"))?;
    let identical = !a.is_empty() && a == b;

    let ok_a = own.iter().all(|&x| x >= 0.80);
    let ok_b = fused >= best_single - 0.02;
    let ok_c = kgc >= 0.95;
    let ok_d = wall < 300.0;
    let detail = format!(
        "(a) own-KG accuracy {} (min 0.80): {ok_a}; (b) fused mixed {fused:.4} vs best single {best_single:.4} − 0.02: {ok_b}; (c) KGC {kgc:.4} (min 0.95): {ok_c}; (d) wall {wall:.1}s (limit 300s): {ok_d}; (e) rerun byte-identical over {} checkpoint files: {identical}",
        kgs.iter()
            .zip(&own)
            .map(|(k, a)| format!("{k}={a:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
        a.len()
    );
    Ok((Ok((ok_a && ok_b && ok_c && ok_d && identical, detail)), Some(first)))
}

/// Set-arithmetic oracle: |common-correct ∖ multi-correct| / |common-correct|.
fn interference_oracle(stl: &[Vec<PredictionRecord>], multi: &[PredictionRecord]) -> Option<f64> {
    let correct = |recs: &[PredictionRecord]| -> BTreeSet<String> {
        recs.iter().filter(|r| r.gold == r.pred).map(|r| r.id.clone()).collect()
    };
    let mut common = correct(&stl[0]);
    for s in &stl[1..] {
        common = common.intersection(&correct(s)).cloned().collect();
    }
    if common.is_empty() {
        return None;
    }
    let lost = common.difference(&correct(multi)).count();
    Some(lost as f64 / common.len() as f64)
}

fn random_records(ids: &[String], golds: &[usize], options: usize, p_correct: f64, rng: &mut Rng) -> Vec<PredictionRecord> {
    let mut recs: Vec<PredictionRecord> = ids
        .iter()
        .zip(golds)
        .map(|(id, &g)| {
            let pred = if rng.random::<f64>() < p_correct { g } else { (g + rng.random_range(1..options)) % options };
            PredictionRecord {
                id: id.clone(),
                gold: g,
                pred,
                scores: vec![0.0; options],
                model: "m".into(),
            }
        })
        .collect();
    recs.shuffle(rng);
    recs
}

fn interference_oracle_check() -> Result<(bool, String), String> {
    let mut rng = seed::rng(77);
    let (mut matched, mut undefined) = (0, 0);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let options = rng.random_range(2..6);
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
        let golds: Vec<usize> = (0..n).map(|_| rng.random_range(0..options)).collect();
        let k = rng.random_range(1..5);
        let stl: Vec<Vec<PredictionRecord>> =
            (0..k).map(|_| random_records(&ids, &golds, options, rng.random_range(0.3..1.0), &mut rng)).collect();
        let multi = random_records(&ids, &golds, options, rng.random_range(0.0..1.0), &mut rng);
        let got = interference_ratio(&InterferenceInput {
            stl: stl.clone(),
            multi: multi.clone(),
        });
        match (got, interference_oracle(&stl, &multi)) {
            (Ok(a), Some(b)) if a == b => matched += 1,
            (Err(kgfuse::Error::InterferenceUndefined), None) => {
                matched += 1;
                undefined += 1;
            }
            (g, o) => return Ok((false, format!("mismatch: implementation {g:?}, oracle {o:?}"))),
        }
    }
    Ok((matched == 50, format!("oracle agreement {matched}/50 ({undefined} undefined)")))
}

fn ratio(exp: &Experiment, stl: &[ModelRef], multi: &ModelRef, data: &QaDataset) -> Result<f64, String> {
    let stl = stl
        .iter()
        .map(|m| exp.predict(m, data).map(|r| r.1))
        .collect::<kgfuse::Result<Vec<_>>>()
        .map_err(err)?;
    let multi = exp.predict(multi, data).map_err(err)?.1;
    interference_ratio(&InterferenceInput { stl, multi }).map_err(err)
}

fn criterion_7(root: &Path, first: Option<FixtureRun>) -> Check {
    let (oracle_ok, oracle_detail) = interference_oracle_check()?;
    let mut rows = Vec::new();
    let mut all_ok = true;
    let mut first = first;
    for seed in [42u64, 7, 123] {
        let exp = match first.take() {
            Some(run) if seed == 42 => run.exp,
            _ => run_fixture(root, &format!("seed{seed}"), seed)?.exp,
        };
        let kgs: Vec<String> = exp.config.kgs.iter().map(|k| k.name.clone()).collect();
        for kg in &kgs {
            exp.train_stage(&Stage::StlPlm(kg.clone()), RunOptions::default()).map_err(err)?;
        }
        exp.train_stage(&Stage::Mtl, RunOptions::default()).map_err(err)?;
        let mixed = exp.mixed_valid().map_err(err)?;
        let adapters: Vec<ModelRef> = kgs.iter().map(|k| ModelRef::Stage(Stage::Expert(k.clone()))).collect();
        let plms: Vec<ModelRef> = kgs.iter().map(|k| ModelRef::Stage(Stage::StlPlm(k.clone()))).collect();
        let fusion = ModelRef::Stage(Stage::Fusion);
        let mtl = ModelRef::Stage(Stage::Mtl);
        let f = ratio(&exp, &adapters, &fusion, &mixed)?;
        let m = ratio(&exp, &plms, &mtl, &mixed)?;
        let f_cross = ratio(&exp, &plms, &fusion, &mixed).map_or_else(|e| e, |v| format!("{v:.4}"));
        let m_cross = ratio(&exp, &adapters, &mtl, &mixed).map_or_else(|e| e, |v| format!("{v:.4}"));
        all_ok &= f <= m;
        rows.push(format!(
            "seed {seed}: fusion {f:.4} ≤ MTL {m:.4}: {} [cross anchors: fusion/STL-PLM {f_cross}, MTL/STL-Adapter {m_cross}]",
            f <= m
        ));
    }
    Ok((oracle_ok && all_ok, format!("{oracle_detail}; {}", rows.join("; "))))
}

// ---------------------------------------------------------------------------
// 8. Dataset arithmetic

fn criterion_8() -> Check {
    let reg = default_templates();
    let mut sources = Vec::new();
    for kg in [event_kg(), concept_kg()] {
        let (a, b): (Vec<_>, Vec<_>) = kg.triples().iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
        for (suffix, part) in [("a", a), ("b", b)] {
            let triples = part.into_iter().map(|(_, t)| t).collect();
            sources.push(KgSource::new(format!("{}{suffix}", kg.name()), triples).map_err(err)?);
        }
    }
    let data: Vec<QaDataset> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| generate_qa(s, &reg, 3, &mut seed::rng(i as u64)))
        .collect::<kgfuse::Result<_>>()
        .map_err(err)?;
    let sizes: Vec<usize> = data.iter().map(QaDataset::len).collect();
    let kgc = derive_kgc(&data).map_err(err)?;
    let sum: usize = sizes.iter().sum();
    let kgc_ok = kgc.len() == sum;

    let n = 100;
    let mix = build_fusion_mixture(&data, MixtureSpec { per_kg_count: n, seed: 3 }).map_err(err)?;
    let hist = mix.kg_histogram();
    let flat = hist.len() == 4 && hist.values().all(|&c| c == n) && mix.len() == 4 * n;

    let mut rng = seed::rng(4);
    let (train, valid) = split(&data[0], 0.2, &mut rng).map_err(err)?;
    let split_ok = train.len() + valid.len() == data[0].len();
    Ok((
        kgc_ok && flat && split_ok,
        format!(
            "|D_KGC| {} = Σ N_k {sum} ({sizes:?}): {kgc_ok}; mixture 4 KGs × {n} → {} with histogram {hist:?}: {flat}; split sizes add up: {split_ok}",
            kgc.len(),
            mix.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9. Relative-improvement cell

fn criterion_9() -> Check {
    let mut results = BTreeMap::new();
    results.insert(ResultKey::new("stl-adapter", &["AT"], "avg"), 66.7);
    results.insert(ResultKey::new("stl-adapter", &["CN"], "avg"), 64.9);
    results.insert(ResultKey::new("fusion", &["AT", "CN"], "avg"), 67.6);
    let grid = relative_improvement(&results, "fusion", "stl-adapter").map_err(err)?;
    let cell = grid.cell(&["AT", "CN"], "avg").ok_or("cell missing")?;
    let diff = (cell - 0.9).abs();
    Ok((diff <= 1e-9, format!("cell {cell:.12} vs +0.9, |Δ| {diff:.1e} (tol 1e-9)")))
}

// ---------------------------------------------------------------------------

fn report(id: &str, name: &str, outcome: Check, failures: &mut usize) {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    if !pass {
        *failures += 1;
    }
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
}

fn main() {
    let mut failures = 0;
    report("1", "scoring oracle", criterion_1(), &mut failures);
    report("2", "gradient checks", criterion_2(), &mut failures);
    report("3", "freeze contracts", criterion_3(), &mut failures);
    report("4", "identity start", criterion_4(), &mut failures);
    report("5", "attention normalization", criterion_5(), &mut failures);
    let dir = tempfile::tempdir().expect("temp dir");
    let first = match criterion_6(dir.path()) {
        Ok((check, run)) => {
            report("6", "fixture transfer run", check, &mut failures);
            run
        }
        Err(e) => {
            report("6", "fixture transfer run", Err(e), &mut failures);
            None
        }
    };
    report("7", "interference ratio", criterion_7(dir.path(), first), &mut failures);
    report("8", "dataset arithmetic", criterion_8(), &mut failures);
    report("9", "relative-improvement cell", criterion_9(), &mut failures);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
