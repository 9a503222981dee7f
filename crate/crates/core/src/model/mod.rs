//! The neural core: a small masked-LM encoder (the frozen backbone), bottleneck
//! adapters, per-layer expert fusion, and the KG-classification head.
//!
//! Layer `l` of the backbone is a post-norm transformer block:
//!
//! ```text
//! a   = LN(x + Attn(x))
//! h   = LN(a + W2·gelu(W1·a + b1) + b2)          // h^l_PLM
//! ```
//!
//! An adapter block maps `h ↦ h + up(gelu(down(h)))`. With fusion, each expert's
//! adapter output `e_k` at every position is attended by a query taken from
//! `h` (or from the KG-classifier adapter applied to `h`), and the mixture
//! `z = Σ_k p_k · e_k W^V` is the input to the next layer.

mod checkpoint;
mod forward;

pub use checkpoint::{
    load_adapter, load_backbone, load_classifier, load_fusion, read_manifest, save_adapter, save_backbone,
    save_classifier, save_fusion, CheckpointManifest, FusionCheckpoint, TensorEntry,
};
pub use forward::{
    classify_kg, forward_adapter, forward_fusion, forward_fusion_with_bias, forward_plain, ForwardTrace, ModelView,
    QueryMode, TokenBatch, Trainable,
};
pub(crate) use forward::{classifier_logits, encode, mlm_logits, BoundRoute};

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;
use crate::tokenizer::{CLS_ID, MASK_ID, PAD_ID, SEP_ID};

/// Architecture knobs independent of the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub adapter_bottleneck_dim: usize,
    pub position_embeddings: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            layer_count: 2,
            head_count: 2,
            ffn_dim: 128,
            max_seq_len: 64,
            adapter_bottleneck_dim: 16,
            position_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub adapter_bottleneck_dim: usize,
    pub position_embeddings: bool,
    pub pad_token_id: u32,
    pub cls_token_id: u32,
    pub sep_token_id: u32,
    pub mask_token_id: u32,
}

impl ModelConfig {
    pub fn new(arch: &ArchConfig, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: arch.hidden_dim,
            layer_count: arch.layer_count,
            head_count: arch.head_count,
            ffn_dim: arch.ffn_dim,
            max_seq_len: arch.max_seq_len,
            adapter_bottleneck_dim: arch.adapter_bottleneck_dim,
            position_embeddings: arch.position_embeddings,
            pad_token_id: PAD_ID,
            cls_token_id: CLS_ID,
            sep_token_id: SEP_ID,
            mask_token_id: MASK_ID,
        }
    }

    /// The desk-scale default: 2 layers, H=64, 2 heads, FFN 128, bottleneck 16.
    pub fn desk(vocab_size: usize) -> Self {
        Self::new(&ArchConfig::default(), vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.layer_count == 0 || self.head_count == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.head_count) {
            return bad(format!(
                "hidden_dim {} not divisible by head_count {}",
                self.hidden_dim, self.head_count
            ));
        }
        if self.adapter_bottleneck_dim == 0 || self.adapter_bottleneck_dim >= self.hidden_dim {
            return bad(format!(
                "adapter bottleneck {} must lie in [1, hidden_dim)",
                self.adapter_bottleneck_dim
            ));
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must be at least 3".into());
        }
        let ids = [self.pad_token_id, self.cls_token_id, self.sep_token_id, self.mask_token_id];
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= self.vocab_size {
                return bad(format!("special token id {a} outside vocab of {}", self.vocab_size));
            }
            if ids[i + 1..].contains(a) {
                return bad(format!("special token id {a} is not distinct"));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order shared by checkpoints, optimizers and tape bindings.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn round_to_f32(&mut self) {
        for (_, m) in self.tensors_mut() {
            m.round_to_f32();
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// SHA-256 over names and exact `f64` bits; equal digests mean bitwise-equal parameters.
    fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for (name, m) in self.tensors() {
            bytes.extend_from_slice(name.as_bytes());
            for d in m.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in m.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        seed::sha256_hex(&bytes)
    }
}

macro_rules! param_block {
    ($(#[$meta:meta])* $name:ident, $bound:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: Matrix,)*
        }

        #[derive(Clone, Debug)]
        pub(crate) struct $bound {
            $(pub $field: NodeId,)*
        }

        impl $name {
            fn named(&self, prefix: &str) -> Vec<(String, &Matrix)> {
                vec![$((format!("{prefix}{}", stringify!($field)), &self.$field),)*]
            }

            fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
                vec![$((format!("{prefix}{}", stringify!($field)), &mut self.$field),)*]
            }

            pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> $bound {
                $bound { $($field: tape.leaf(self.$field.clone(), trainable),)* }
            }
        }

        impl $bound {
            #[allow(dead_code)]
            pub(crate) fn ids(&self) -> Vec<NodeId> {
                vec![$(self.$field,)*]
            }
        }
    };
}

param_block!(
    /// Token and position embeddings followed by layer norm.
    Embeddings,
    BoundEmbeddings { token, position, norm_gamma, norm_beta }
);

param_block!(
    EncoderLayer,
    BoundEncoderLayer {
        attn_query, attn_query_bias, attn_key, attn_key_bias, attn_value, attn_value_bias,
        attn_output, attn_output_bias, attn_norm_gamma, attn_norm_beta,
        ffn_in, ffn_in_bias, ffn_out, ffn_out_bias, ffn_norm_gamma, ffn_norm_beta,
    }
);

param_block!(
    /// Linear masked-LM output head `h · W + b` (H × V).
    MlmHead,
    BoundMlmHead { weight, bias }
);

param_block!(
    /// One bottleneck block: `h + up(gelu(h · down + down_bias)) + up_bias`.
    AdapterBlock,
    BoundAdapterBlock { down, down_bias, up, up_bias }
);

param_block!(
    /// Query, key and value maps (H × H) of one fusion layer.
    FusionLayer,
    BoundFusionLayer { query, key, value }
);

/// The backbone θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: ModelConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub head: MlmHead,
}

#[derive(Clone, Debug)]
pub(crate) struct BoundBackbone {
    pub embeddings: BoundEmbeddings,
    pub layers: Vec<BoundEncoderLayer>,
    pub head: BoundMlmHead,
}

impl BoundBackbone {
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.embeddings.ids();
        for l in &self.layers {
            ids.extend(l.ids());
        }
        ids.extend(self.head.ids());
        ids
    }
}

fn linear(rows: usize, cols: usize, rng: &mut seed::Rng) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

impl Backbone {
    /// Closed-form parameter count:
    /// `V·H + P·H + 2H + L·(4H² + 4H + 2H + 2HF + F + H + 2H) + H·V + V`,
    /// where `P` is `max_seq_len` with position embeddings and 0 without.
    pub fn expected_parameter_count(c: &ModelConfig) -> usize {
        let (v, h, f, l) = (c.vocab_size, c.hidden_dim, c.ffn_dim, c.layer_count);
        let p = if c.position_embeddings { c.max_seq_len } else { 0 };
        v * h + p * h + 2 * h + l * (4 * h * h + 4 * h + 2 * h + 2 * h * f + f + h + 2 * h) + h * v + v
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        BoundBackbone {
            embeddings: self.embeddings.bind(tape, trainable),
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            head: self.head.bind(tape, trainable),
        }
    }
}

/// Deterministic initialization: normal weights scaled by `1/sqrt(fan_in)`,
/// embeddings with σ=0.02, zero biases and unit layer-norm gains.
pub fn init_backbone(config: &ModelConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let mut rng = seed::derived_rng(seed, "backbone");
    let (h, f, v) = (config.hidden_dim, config.ffn_dim, config.vocab_size);
    let positions = if config.position_embeddings { config.max_seq_len } else { 0 };
    let embeddings = Embeddings {
        token: Matrix::random_normal(v, h, 0.02, &mut rng),
        position: Matrix::random_normal(positions, h, 0.02, &mut rng),
        norm_gamma: Matrix::filled(1, h, 1.0),
        norm_beta: Matrix::zeros(1, h),
    };
    let layers = (0..config.layer_count)
        .map(|_| EncoderLayer {
            attn_query: linear(h, h, &mut rng),
            attn_query_bias: Matrix::zeros(1, h),
            attn_key: linear(h, h, &mut rng),
            attn_key_bias: Matrix::zeros(1, h),
            attn_value: linear(h, h, &mut rng),
            attn_value_bias: Matrix::zeros(1, h),
            attn_output: linear(h, h, &mut rng),
            attn_output_bias: Matrix::zeros(1, h),
            attn_norm_gamma: Matrix::filled(1, h, 1.0),
            attn_norm_beta: Matrix::zeros(1, h),
            ffn_in: linear(h, f, &mut rng),
            ffn_in_bias: Matrix::zeros(1, f),
            ffn_out: linear(f, h, &mut rng),
            ffn_out_bias: Matrix::zeros(1, h),
            ffn_norm_gamma: Matrix::filled(1, h, 1.0),
            ffn_norm_beta: Matrix::zeros(1, h),
        })
        .collect();
    let head = MlmHead {
        weight: linear(h, v, &mut rng),
        bias: Matrix::zeros(1, v),
    };
    Ok(Backbone {
        config: config.clone(),
        embeddings,
        layers,
        head,
    })
}

impl Parameters for Backbone {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.embeddings.named("embeddings.");
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("layers.{i}.")));
        }
        out.extend(self.head.named("head."));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.embeddings.named_mut("embeddings.");
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut(&format!("layers.{i}.")));
        }
        out.extend(self.head.named_mut("head."));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterRole {
    Expert { kg: String },
    KgClassifier,
}

/// Adapter parameters Φ: one bottleneck block per backbone layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub role: AdapterRole,
    pub blocks: Vec<AdapterBlock>,
}

#[derive(Clone, Debug)]
pub(crate) struct BoundAdapter {
    pub blocks: Vec<BoundAdapterBlock>,
}

impl BoundAdapter {
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        self.blocks.iter().flat_map(BoundAdapterBlock::ids).collect()
    }
}

/// A fresh adapter: `down` drawn with σ=1/sqrt(H), `up` all zeros so the
/// adapted model starts out identical to the backbone.
pub fn init_adapter(config: &ModelConfig, role: AdapterRole, seed: u64) -> Result<Adapter> {
    config.validate()?;
    let label = match &role {
        AdapterRole::Expert { kg } => format!("adapter/{kg}"),
        AdapterRole::KgClassifier => "adapter/kgc".to_owned(),
    };
    let mut rng = seed::derived_rng(seed, &label);
    let (h, b) = (config.hidden_dim, config.adapter_bottleneck_dim);
    let blocks = (0..config.layer_count)
        .map(|_| AdapterBlock {
            down: linear(h, b, &mut rng),
            down_bias: Matrix::zeros(1, b),
            up: Matrix::zeros(b, h),
            up_bias: Matrix::zeros(1, h),
        })
        .collect();
    Ok(Adapter { role, blocks })
}

impl Adapter {
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapter {
        BoundAdapter {
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
        }
    }

    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.blocks.len() != config.layer_count {
            return Err(Error::Shape(format!(
                "adapter has {} blocks, backbone has {} layers",
                self.blocks.len(),
                config.layer_count
            )));
        }
        let (h, b) = (config.hidden_dim, self.bottleneck());
        for blk in &self.blocks {
            if blk.down.shape() != [h, b]
                || blk.up.shape() != [b, h]
                || blk.down_bias.shape() != [1, b]
                || blk.up_bias.shape() != [1, h]
            {
                return Err(Error::Shape(format!("adapter block does not match hidden size {h}")));
            }
        }
        Ok(())
    }

    fn bottleneck(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.down.cols())
    }

    pub fn kg(&self) -> Option<&str> {
        match &self.role {
            AdapterRole::Expert { kg } => Some(kg),
            AdapterRole::KgClassifier => None,
        }
    }
}

impl Parameters for Adapter {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.named(&format!("blocks.{i}.")))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| b.named_mut(&format!("blocks.{i}.")))
            .collect()
    }
}

/// Fusion parameters Ψ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub layers: Vec<FusionLayer>,
    pub temperature: f64,
    pub attention_dropout: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct BoundFusion {
    pub layers: Vec<BoundFusionLayer>,
}

impl BoundFusion {
    pub(crate) fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(BoundFusionLayer::ids).collect()
    }
}

pub const DEFAULT_ATTENTION_DROPOUT: f64 = 0.1;

/// `W^Q`, `W^K` drawn with σ=0.02 and `W^V` set to the identity.
pub fn init_fusion(config: &ModelConfig, seed: u64, attention_dropout: f64) -> Result<Fusion> {
    config.validate()?;
    if !(0.0..1.0).contains(&attention_dropout) {
        return Err(Error::Config(format!("attention dropout {attention_dropout} outside [0, 1)")));
    }
    let mut rng = seed::derived_rng(seed, "fusion");
    let h = config.hidden_dim;
    let layers = (0..config.layer_count)
        .map(|_| FusionLayer {
            query: Matrix::random_normal(h, h, 0.02, &mut rng),
            key: Matrix::random_normal(h, h, 0.02, &mut rng),
            value: Matrix::identity(h),
        })
        .collect();
    Ok(Fusion {
        layers,
        temperature: 1.0,
        attention_dropout,
    })
}

impl Fusion {
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFusion {
        BoundFusion {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }
}

impl Parameters for Fusion {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named(&format!("layers.{i}.")))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.named_mut(&format!("layers.{i}.")))
            .collect()
    }
}

/// KG-classification head `W_KGC` (K × H, no bias).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub labels: Vec<String>,
    pub weight: Matrix,
}

pub fn init_classifier_head(config: &ModelConfig, labels: Vec<String>, seed: u64) -> Result<ClassifierHead> {
    if labels.is_empty() {
        return Err(Error::invalid("classifier head needs at least one label"));
    }
    let mut rng = seed::derived_rng(seed, "kgc-head");
    let weight = Matrix::random_normal(labels.len(), config.hidden_dim, 0.02, &mut rng);
    Ok(ClassifierHead { labels, weight })
}

impl ClassifierHead {
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> NodeId {
        tape.leaf(self.weight.clone(), trainable)
    }
}

impl Parameters for ClassifierHead {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("weight".to_owned(), &self.weight)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("weight".to_owned(), &mut self.weight)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(
            &ArchConfig {
                hidden_dim: 8,
                layer_count: 2,
                head_count: 2,
                ffn_dim: 12,
                max_seq_len: 10,
                adapter_bottleneck_dim: 3,
                position_embeddings: true,
            },
            20,
        )
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_backbone(&tiny(), 3).unwrap();
        let b = init_backbone(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), init_backbone(&tiny(), 4).unwrap().digest());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.head_count = 3;
        assert!(init_backbone(&c, 0).is_err());
        let mut c = tiny();
        c.adapter_bottleneck_dim = 8;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.mask_token_id = c.cls_token_id;
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_parameter_count() {
        // V=100, H=64, P=64, F=128, L=2:
        // 6400 + 4096 + 128 + 2 * 33472 + 6400 + 100
        let c = ModelConfig::desk(100);
        let b = init_backbone(&c, 0).unwrap();
        assert_eq!(b.parameter_count(), 84_068);
        assert_eq!(Backbone::expected_parameter_count(&c), 84_068);
    }

    #[test]
    fn bound_ids_follow_tensor_order() {
        let b = init_backbone(&tiny(), 0).unwrap();
        let a = init_adapter(&tiny(), AdapterRole::KgClassifier, 0).unwrap();
        let f = init_fusion(&tiny(), 0, 0.1).unwrap();
        let mut tape = Tape::new();
        let bb = b.bind(&mut tape, false);
        for (id, (_, m)) in bb.ids().into_iter().zip(b.tensors()) {
            assert_eq!(tape.value(id), m);
        }
        let ba = a.bind(&mut tape, true);
        for (id, (_, m)) in ba.ids().into_iter().zip(a.tensors()) {
            assert_eq!(tape.value(id), m);
        }
        let bf = f.bind(&mut tape, true);
        assert_eq!(bf.ids().len(), f.tensors().len());
    }

    #[test]
    fn adapter_and_fusion_init_shape() {
        let a = init_adapter(&tiny(), AdapterRole::Expert { kg: "k".into() }, 1).unwrap();
        a.check_compatible(&tiny()).unwrap();
        assert!(a.blocks.iter().all(|b| b.up.data().iter().all(|&v| v == 0.0)));
        let f = init_fusion(&tiny(), 1, 0.1).unwrap();
        assert!(f.layers.iter().all(|l| l.value == Matrix::identity(8)));
    }
}
