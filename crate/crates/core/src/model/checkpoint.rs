//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! file per named tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    init_adapter, init_backbone, init_classifier_head, init_fusion, Adapter, AdapterRole, Backbone, ClassifierHead,
    Fusion, ModelConfig, Parameters,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const FORMAT: &str = "kgfuse-checkpoint/1";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// `backbone`, `adapter`, `classifier` or `fusion`.
    pub role: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Role-specific fields and training provenance.
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

impl CheckpointManifest {
    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.extra.get(key).and_then(Value::as_str)
    }
}

fn tensor_file(name: &str) -> String {
    format!("{name}.f32")
}

fn write_checkpoint(
    dir: &Path,
    role: &str,
    config: &ModelConfig,
    seed: u64,
    extra: BTreeMap<String, Value>,
    tensors: Vec<(String, &Matrix)>,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        role: role.into(),
        config: config.clone(),
        seed,
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                shape: m.shape(),
            })
            .collect(),
        extra,
    };
    crate::fsutil::write_dir_atomic(dir, |tmp| {
        for (name, m) in &tensors {
            let mut bytes = Vec::with_capacity(m.len() * 4);
            for &v in m.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let p = tmp.join(tensor_file(name));
            fs::write(&p, bytes).map_err(|e| Error::file(&p, e))?;
        }
        let p = tmp.join(MANIFEST);
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(&p, json).map_err(|e| Error::file(&p, e))
    })
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Config(format!("{}: unsupported checkpoint format `{}`", p.display(), m.format)));
    }
    m.config.validate()?;
    Ok(m)
}

fn read_expecting(dir: &Path, role: &str) -> Result<CheckpointManifest> {
    let m = read_manifest(dir)?;
    if m.role != role {
        return Err(Error::Config(format!(
            "{}: expected a {role} checkpoint, found {}",
            dir.display(),
            m.role
        )));
    }
    Ok(m)
}

/// Overwrites every tensor of `target` from disk, checking names and shapes
/// against both the manifest and the freshly built skeleton.
fn fill(dir: &Path, manifest: &CheckpointManifest, target: Vec<(String, &mut Matrix)>) -> Result<()> {
    if target.len() != manifest.tensors.len() {
        return Err(Error::Shape(format!(
            "{}: manifest lists {} tensors, model has {}",
            dir.display(),
            manifest.tensors.len(),
            target.len()
        )));
    }
    for ((name, m), entry) in target.into_iter().zip(&manifest.tensors) {
        if entry.name != name || entry.shape != m.shape() {
            return Err(Error::Shape(format!(
                "{}: tensor {} {:?} does not match expected {name} {:?}",
                dir.display(),
                entry.name,
                entry.shape,
                m.shape()
            )));
        }
        let p = dir.join(tensor_file(&name));
        let bytes = fs::read(&p).map_err(|e| Error::file(&p, e))?;
        if bytes.len() != m.len() * 4 {
            return Err(Error::Shape(format!(
                "{}: {} bytes, expected {}",
                p.display(),
                bytes.len(),
                m.len() * 4
            )));
        }
        for (v, chunk) in m.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        }
    }
    Ok(())
}

fn with_provenance(mut extra: BTreeMap<String, Value>, provenance: &Value) -> BTreeMap<String, Value> {
    if !provenance.is_null() {
        extra.insert("provenance".into(), provenance.clone());
    }
    extra
}

pub fn save_backbone(dir: &Path, backbone: &Backbone, seed: u64, provenance: &Value) -> Result<()> {
    let extra = with_provenance(BTreeMap::new(), provenance);
    write_checkpoint(dir, "backbone", &backbone.config, seed, extra, backbone.tensors())
}

pub fn load_backbone(dir: &Path) -> Result<Backbone> {
    let m = read_expecting(dir, "backbone")?;
    let mut b = init_backbone(&m.config, 0)?;
    fill(dir, &m, b.tensors_mut())?;
    Ok(b)
}

pub fn save_adapter(dir: &Path, config: &ModelConfig, adapter: &Adapter, seed: u64, provenance: &Value) -> Result<()> {
    adapter.check_compatible(config)?;
    let mut extra = BTreeMap::new();
    extra.insert("adapter_role".into(), serde_json::to_value(&adapter.role)?);
    write_checkpoint(dir, "adapter", config, seed, with_provenance(extra, provenance), adapter.tensors())
}

pub fn load_adapter(dir: &Path) -> Result<(ModelConfig, Adapter)> {
    let m = read_expecting(dir, "adapter")?;
    let role: AdapterRole = serde_json::from_value(
        m.extra
            .get("adapter_role")
            .cloned()
            .ok_or_else(|| Error::Config(format!("{}: adapter role missing", dir.display())))?,
    )?;
    let mut a = init_adapter(&m.config, role, 0)?;
    fill(dir, &m, a.tensors_mut())?;
    Ok((m.config, a))
}

/// Saves the KG-classifier adapter and its head as one bundle.
pub fn save_classifier(
    dir: &Path,
    config: &ModelConfig,
    adapter: &Adapter,
    head: &ClassifierHead,
    seed: u64,
    provenance: &Value,
) -> Result<()> {
    adapter.check_compatible(config)?;
    let mut extra = BTreeMap::new();
    extra.insert("labels".into(), serde_json::to_value(&head.labels)?);
    let mut tensors: Vec<(String, &Matrix)> =
        adapter.tensors().into_iter().map(|(n, m)| (format!("adapter.{n}"), m)).collect();
    tensors.push(("head.weight".into(), &head.weight));
    write_checkpoint(dir, "classifier", config, seed, with_provenance(extra, provenance), tensors)
}

pub fn load_classifier(dir: &Path) -> Result<(ModelConfig, Adapter, ClassifierHead)> {
    let m = read_expecting(dir, "classifier")?;
    let labels: Vec<String> = serde_json::from_value(
        m.extra
            .get("labels")
            .cloned()
            .ok_or_else(|| Error::Config(format!("{}: classifier labels missing", dir.display())))?,
    )?;
    let mut a = init_adapter(&m.config, AdapterRole::KgClassifier, 0)?;
    let mut head = init_classifier_head(&m.config, labels, 0)?;
    let mut target: Vec<(String, &mut Matrix)> =
        a.tensors_mut().into_iter().map(|(n, t)| (format!("adapter.{n}"), t)).collect();
    target.push(("head.weight".into(), &mut head.weight));
    fill(dir, &m, target)?;
    Ok((m.config, a, head))
}

/// `experts` names the expert KGs in attention order; `query_mode` is `plm` or `kgc`.
pub fn save_fusion(
    dir: &Path,
    config: &ModelConfig,
    fusion: &Fusion,
    experts: &[String],
    query_mode: super::QueryMode,
    seed: u64,
    provenance: &Value,
) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert("experts".into(), serde_json::to_value(experts)?);
    extra.insert("query_mode".into(), serde_json::to_value(query_mode)?);
    extra.insert("temperature".into(), fusion.temperature.into());
    extra.insert("attention_dropout".into(), fusion.attention_dropout.into());
    write_checkpoint(dir, "fusion", config, seed, with_provenance(extra, provenance), fusion.tensors())
}

pub struct FusionCheckpoint {
    pub config: ModelConfig,
    pub fusion: Fusion,
    pub experts: Vec<String>,
    pub query_mode: super::QueryMode,
}

pub fn load_fusion(dir: &Path) -> Result<FusionCheckpoint> {
    let m = read_expecting(dir, "fusion")?;
    let get = |k: &str| {
        m.extra
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("{}: fusion field `{k}` missing", dir.display())))
    };
    let experts: Vec<String> = serde_json::from_value(get("experts")?)?;
    let query_mode = serde_json::from_value(get("query_mode")?)?;
    let dropout = get("attention_dropout")?.as_f64().unwrap_or(super::DEFAULT_ATTENTION_DROPOUT);
    let mut fusion = init_fusion(&m.config, 0, dropout)?;
    fusion.temperature = get("temperature")?.as_f64().unwrap_or(1.0);
    fill(dir, &m, fusion.tensors_mut())?;
    Ok(FusionCheckpoint {
        config: m.config,
        fusion,
        experts,
        query_mode,
    })
}
