use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    Adapter, Backbone, BoundAdapter, BoundAdapterBlock, BoundBackbone, BoundFusion, BoundMlmHead, ClassifierHead,
    Fusion, ModelConfig,
};
use crate::autograd::{NodeId, SeqLayout, Tape};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::{softmax_in_place, Matrix};

/// Which hidden state queries the fusion attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// The backbone layer output `h^l_PLM`.
    Plm,
    /// The KG-classifier adapter output `h^l_KGC`.
    #[default]
    Kgc,
}

impl QueryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Plm => "plm",
            QueryMode::Kgc => "kgc",
        }
    }
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plm" => Ok(QueryMode::Plm),
            "kgc" => Ok(QueryMode::Kgc),
            other => Err(Error::Config(format!("unknown query mode `{other}` (expected plm or kgc)"))),
        }
    }
}

/// Equal-length token sequences laid out row-major, with per-sequence valid lengths.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub layout: SeqLayout,
}

impl TokenBatch {
    pub fn single(tokens: &[u32]) -> Self {
        Self {
            ids: tokens.to_vec(),
            layout: SeqLayout::full(1, tokens.len()),
        }
    }

    /// Pads every sequence to the longest with `pad`; padded keys are masked.
    pub fn padded(seqs: &[Vec<u32>], pad: u32) -> Self {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, t - s.len()));
        }
        Self {
            ids,
            layout: SeqLayout {
                batch: seqs.len(),
                seq_len: t,
                valid: seqs.iter().map(Vec::len).collect(),
            },
        }
    }

    /// Copies of `tokens`, copy `i` with `positions[i]` replaced by `mask`.
    pub fn masked_copies(tokens: &[u32], positions: &[usize], mask: u32) -> Self {
        let t = tokens.len();
        let mut ids = Vec::with_capacity(positions.len() * t);
        for &p in positions {
            let start = ids.len();
            ids.extend_from_slice(tokens);
            ids[start + p] = mask;
        }
        Self {
            ids,
            layout: SeqLayout::full(positions.len(), t),
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layout.seq_len == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if self.layout.seq_len > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.layout.seq_len,
                max: config.max_seq_len,
            });
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if self.layout.valid.iter().any(|&v| v == 0 || v > self.layout.seq_len) {
            return Err(Error::invalid("every sequence needs at least one valid position"));
        }
        Ok(())
    }
}

/// Trainability of each parameter group when binding a view onto a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct Trainable {
    pub backbone: bool,
    /// The adapter of an adapter view (expert or KG-classifier).
    pub adapter: bool,
    pub fusion: bool,
}

pub(crate) enum BoundRoute {
    Plain,
    Adapter(BoundAdapter),
    Fusion {
        experts: Vec<BoundAdapter>,
        fusion: BoundFusion,
        query: Option<BoundAdapter>,
        scale: f64,
        dropout: f64,
        bias: Vec<f64>,
    },
}

pub(crate) struct LayerNodes {
    pub plm: NodeId,
    pub experts: Vec<NodeId>,
    pub kgc: Option<NodeId>,
    pub fused: Option<NodeId>,
}

pub(crate) struct Encoded {
    pub layers: Vec<LayerNodes>,
    pub output: NodeId,
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn adapter_block(tape: &mut Tape, h: NodeId, blk: &BoundAdapterBlock) -> NodeId {
    let d = linear(tape, h, blk.down, blk.down_bias);
    let d = tape.gelu(d);
    let u = linear(tape, d, blk.up, blk.up_bias);
    tape.add(h, u)
}

/// Runs the encoder over `batch`. With `dropout_rng`, fusion attention dropout is active.
pub(crate) fn encode(
    tape: &mut Tape,
    config: &ModelConfig,
    bb: &BoundBackbone,
    route: &BoundRoute,
    batch: &TokenBatch,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Encoded> {
    batch.validate(config)?;
    let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let mut x = tape.gather(bb.embeddings.token, &ids);
    if config.position_embeddings {
        let t = batch.layout.seq_len;
        let pos: Vec<usize> = (0..batch.layout.rows()).map(|r| r % t).collect();
        let p = tape.gather(bb.embeddings.position, &pos);
        x = tape.add(x, p);
    }
    x = tape.layer_norm(x, bb.embeddings.norm_gamma, bb.embeddings.norm_beta);

    let mut layers = Vec::with_capacity(bb.layers.len());
    for (l, lp) in bb.layers.iter().enumerate() {
        let q = linear(tape, x, lp.attn_query, lp.attn_query_bias);
        let k = linear(tape, x, lp.attn_key, lp.attn_key_bias);
        let v = linear(tape, x, lp.attn_value, lp.attn_value_bias);
        let ctx = tape.self_attention(q, k, v, &batch.layout, config.head_count);
        let a = linear(tape, ctx, lp.attn_output, lp.attn_output_bias);
        let a = tape.add(x, a);
        let a = tape.layer_norm(a, lp.attn_norm_gamma, lp.attn_norm_beta);
        let f = linear(tape, a, lp.ffn_in, lp.ffn_in_bias);
        let f = tape.gelu(f);
        let f = linear(tape, f, lp.ffn_out, lp.ffn_out_bias);
        let h = tape.add(a, f);
        let h = tape.layer_norm(h, lp.ffn_norm_gamma, lp.ffn_norm_beta);

        let nodes = match route {
            BoundRoute::Plain => LayerNodes {
                plm: h,
                experts: Vec::new(),
                kgc: None,
                fused: None,
            },
            BoundRoute::Adapter(ad) => LayerNodes {
                plm: h,
                experts: vec![adapter_block(tape, h, &ad.blocks[l])],
                kgc: None,
                fused: None,
            },
            BoundRoute::Fusion {
                experts,
                fusion,
                query,
                scale,
                dropout,
                bias,
            } => {
                let outs: Vec<NodeId> = experts.iter().map(|e| adapter_block(tape, h, &e.blocks[l])).collect();
                let kgc = query.as_ref().map(|qa| adapter_block(tape, h, &qa.blocks[l]));
                let fl = &fusion.layers[l];
                let qn = tape.matmul(kgc.unwrap_or(h), fl.query);
                let keys: Vec<NodeId> = outs.iter().map(|&e| tape.matmul(e, fl.key)).collect();
                let values: Vec<NodeId> = outs.iter().map(|&e| tape.matmul(e, fl.value)).collect();
                let keep = match dropout_rng.as_deref_mut() {
                    Some(rng) if *dropout > 0.0 => {
                        let rows = batch.layout.rows();
                        let mut keep = Matrix::zeros(rows, outs.len());
                        let inv = 1.0 / (1.0 - dropout);
                        for v in keep.data_mut() {
                            *v = if rng.random::<f64>() < *dropout { 0.0 } else { inv };
                        }
                        Some(keep)
                    }
                    _ => None,
                };
                let z = tape.expert_mix(qn, &keys, &values, *scale, bias, keep);
                LayerNodes {
                    plm: h,
                    experts: outs,
                    kgc,
                    fused: Some(z),
                }
            }
        };
        x = match &nodes {
            LayerNodes { fused: Some(z), .. } => *z,
            LayerNodes { experts, .. } if !experts.is_empty() => experts[0],
            LayerNodes { plm, .. } => *plm,
        };
        layers.push(nodes);
    }
    Ok(Encoded { layers, output: x })
}

/// MLM logits for the selected rows of `hidden`.
pub(crate) fn mlm_logits(tape: &mut Tape, head: &BoundMlmHead, hidden: NodeId, rows: &[usize]) -> NodeId {
    let sel = tape.select_rows(hidden, rows);
    let y = tape.matmul(sel, head.weight);
    tape.add_row(y, head.bias)
}

/// A forward-capable parameter set.
#[derive(Clone, Copy, Debug)]
pub enum ModelView<'a> {
    Plain(&'a Backbone),
    Adapter {
        backbone: &'a Backbone,
        adapter: &'a Adapter,
    },
    Fusion {
        backbone: &'a Backbone,
        experts: &'a [Adapter],
        fusion: &'a Fusion,
        /// Present in KG-classifier query mode.
        kgc: Option<&'a Adapter>,
    },
}

impl<'a> ModelView<'a> {
    /// A validated fusion view; `QueryMode::Kgc` requires the classifier adapter.
    pub fn fusion(
        backbone: &'a Backbone,
        experts: &'a [Adapter],
        fusion: &'a Fusion,
        mode: QueryMode,
        kgc: Option<&'a Adapter>,
    ) -> Result<Self> {
        let kgc = match (mode, kgc) {
            (QueryMode::Kgc, None) => {
                return Err(Error::invalid("kgc query mode needs the KG-classifier adapter"))
            }
            (QueryMode::Kgc, Some(a)) => Some(a),
            (QueryMode::Plm, _) => None,
        };
        let view = ModelView::Fusion {
            backbone,
            experts,
            fusion,
            kgc,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn backbone(&self) -> &'a Backbone {
        match self {
            ModelView::Plain(b) => b,
            ModelView::Adapter { backbone, .. } | ModelView::Fusion { backbone, .. } => backbone,
        }
    }

    pub fn config(&self) -> &'a ModelConfig {
        &self.backbone().config
    }

    pub fn expert_count(&self) -> usize {
        match self {
            ModelView::Fusion { experts, .. } => experts.len(),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.config();
        match self {
            ModelView::Plain(_) => Ok(()),
            ModelView::Adapter { adapter, .. } => adapter.check_compatible(cfg),
            ModelView::Fusion {
                experts, fusion, kgc, ..
            } => {
                if experts.is_empty() {
                    return Err(Error::invalid("fusion needs at least one expert adapter"));
                }
                for e in experts.iter() {
                    e.check_compatible(cfg)?;
                }
                if let Some(k) = kgc {
                    k.check_compatible(cfg)?;
                }
                let h = cfg.hidden_dim;
                if fusion.layers.len() != cfg.layer_count
                    || fusion
                        .layers
                        .iter()
                        .any(|l| l.query.shape() != [h, h] || l.key.shape() != [h, h] || l.value.shape() != [h, h])
                {
                    return Err(Error::Shape("fusion layers do not match the backbone".into()));
                }
                Ok(())
            }
        }
    }

    pub(crate) fn bind(
        &self,
        tape: &mut Tape,
        train: Trainable,
        bias: Option<&[f64]>,
    ) -> Result<(BoundBackbone, BoundRoute)> {
        self.validate()?;
        let bb = self.backbone().bind(tape, train.backbone);
        let route = match self {
            ModelView::Plain(_) => BoundRoute::Plain,
            ModelView::Adapter { adapter, .. } => BoundRoute::Adapter(adapter.bind(tape, train.adapter)),
            ModelView::Fusion {
                experts, fusion, kgc, ..
            } => {
                let bias = match bias {
                    Some(b) if b.len() != experts.len() => {
                        return Err(Error::invalid("score bias length must equal the expert count"))
                    }
                    Some(b) => b.to_vec(),
                    None => vec![0.0; experts.len()],
                };
                BoundRoute::Fusion {
                    experts: experts.iter().map(|e| e.bind(tape, false)).collect(),
                    fusion: fusion.bind(tape, train.fusion),
                    query: kgc.map(|k| k.bind(tape, false)),
                    scale: 1.0 / ((self.config().hidden_dim as f64).sqrt() * fusion.temperature),
                    dropout: fusion.attention_dropout,
                    bias,
                }
            }
        };
        Ok((bb, route))
    }

    /// Evaluation-mode forward over one sequence.
    pub fn trace(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.trace_with(tokens, tokens.len(), None)
    }

    /// Forward over one sequence whose positions `>= valid_len` are padding.
    pub fn trace_padded(&self, tokens: &[u32], valid_len: usize) -> Result<ForwardTrace> {
        self.trace_with(tokens, valid_len, None)
    }

    fn trace_with(&self, tokens: &[u32], valid_len: usize, bias: Option<&[f64]>) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let (bb, route) = self.bind(&mut tape, Trainable::default(), bias)?;
        let mut batch = TokenBatch::single(tokens);
        batch.layout.valid = vec![valid_len];
        let enc = encode(&mut tape, self.config(), &bb, &route, &batch, None)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = mlm_logits(&mut tape, &bb.head, enc.output, &rows);
        let value = |id: NodeId| tape.value(id).clone();
        let output = value(enc.output);
        Ok(ForwardTrace {
            plm_hidden: enc.layers.iter().map(|l| value(l.plm)).collect(),
            expert_hidden: enc.layers.iter().map(|l| l.experts.iter().map(|&e| value(e)).collect()).collect(),
            kgc_hidden: enc.layers.iter().filter_map(|l| l.kgc.map(value)).collect(),
            fused: enc.layers.iter().filter_map(|l| l.fused.map(value)).collect(),
            attention: enc
                .layers
                .iter()
                .filter_map(|l| l.fused.and_then(|z| tape.mix_probs(z).cloned()))
                .collect(),
            logits: value(logits),
            cls_hidden: output.row(0).to_vec(),
            output,
        })
    }
}

/// Per-layer hidden states, fusion attention and output logits of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `h^l_PLM` per layer (T × H).
    pub plm_hidden: Vec<Matrix>,
    /// `[layer][adapter]` adapter outputs; one entry per layer for adapter views.
    pub expert_hidden: Vec<Vec<Matrix>>,
    /// `h^l_KGC` per layer in KG-classifier query mode.
    pub kgc_hidden: Vec<Matrix>,
    /// `z_l` per layer for fusion views.
    pub fused: Vec<Matrix>,
    /// Per layer, T × K attention probabilities over experts.
    pub attention: Vec<Matrix>,
    /// Final-layer hidden states (T × H).
    pub output: Matrix,
    /// T × V masked-LM logits.
    pub logits: Matrix,
    /// Final-layer hidden state at position 0.
    pub cls_hidden: Vec<f64>,
}

impl ForwardTrace {
    pub fn is_finite(&self) -> bool {
        self.plm_hidden.iter().all(Matrix::is_finite)
            && self.expert_hidden.iter().flatten().all(Matrix::is_finite)
            && self.fused.iter().all(Matrix::is_finite)
            && self.logits.is_finite()
    }
}

pub fn forward_plain(backbone: &Backbone, tokens: &[u32]) -> Result<ForwardTrace> {
    ModelView::Plain(backbone).trace(tokens)
}

pub fn forward_adapter(backbone: &Backbone, adapter: &Adapter, tokens: &[u32]) -> Result<ForwardTrace> {
    ModelView::Adapter { backbone, adapter }.trace(tokens)
}

pub fn forward_fusion(
    backbone: &Backbone,
    experts: &[Adapter],
    fusion: &Fusion,
    tokens: &[u32],
    mode: QueryMode,
    kgc: Option<&Adapter>,
) -> Result<ForwardTrace> {
    ModelView::fusion(backbone, experts, fusion, mode, kgc)?.trace(tokens)
}

/// [`forward_fusion`] with an additive per-expert score bias; `f64::NEG_INFINITY`
/// removes an expert from every attention distribution.
pub fn forward_fusion_with_bias(
    backbone: &Backbone,
    experts: &[Adapter],
    fusion: &Fusion,
    tokens: &[u32],
    mode: QueryMode,
    kgc: Option<&Adapter>,
    bias: &[f64],
) -> Result<ForwardTrace> {
    ModelView::fusion(backbone, experts, fusion, mode, kgc)?.trace_with(tokens, tokens.len(), Some(bias))
}

/// Class logits `W_KGC · h_CLS` on the tape for a batch whose sequences start with `[CLS]`.
pub(crate) fn classifier_logits(
    tape: &mut Tape,
    config: &ModelConfig,
    bb: &BoundBackbone,
    route: &BoundRoute,
    head: NodeId,
    batch: &TokenBatch,
) -> Result<NodeId> {
    let t = batch.layout.seq_len;
    if (0..batch.layout.batch).any(|b| batch.ids[b * t] != config.cls_token_id) {
        return Err(Error::invalid("classifier input must begin with [CLS]"));
    }
    let enc = encode(tape, config, bb, route, batch, None)?;
    let rows: Vec<usize> = (0..batch.layout.batch).map(|b| b * t).collect();
    let cls = tape.select_rows(enc.output, &rows);
    Ok(tape.matmul_nt(cls, head))
}

/// KG probabilities `softmax(W_KGC · h_CLS)` from the classifier-adapted forward pass.
pub fn classify_kg(backbone: &Backbone, kgc: &Adapter, head: &ClassifierHead, tokens: &[u32]) -> Result<Vec<f64>> {
    let cfg = &backbone.config;
    if head.weight.cols() != cfg.hidden_dim {
        return Err(Error::Shape("classifier head width differs from hidden size".into()));
    }
    let view = ModelView::Adapter {
        backbone,
        adapter: kgc,
    };
    let mut tape = Tape::new();
    let (bb, route) = view.bind(&mut tape, Trainable::default(), None)?;
    let w = head.bind(&mut tape, false);
    let logits = classifier_logits(&mut tape, cfg, &bb, &route, w, &TokenBatch::single(tokens))?;
    let mut p = tape.value(logits).row(0).to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}
