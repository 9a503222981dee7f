//! Config-driven experiments: dataset generation, stage training with run
//! manifests, the full run, and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{pretrain_backbone, train_expert, train_full, train_fusion, train_kgc, TrainHyper, TrainMode, TrainReport};
use crate::error::{Error, Result};
use crate::evalkit::{
    attention_dump, embeddings_csv, evaluate, export_cls_embeddings, interference_ratio, write_predictions,
    InterferenceInput, PredictionRecord,
};
use crate::kg_store::{default_templates, load_triples, TemplateRegistry};
use crate::model::{
    init_backbone, load_adapter, load_backbone, load_classifier, load_fusion, save_adapter, save_backbone,
    save_classifier, save_fusion, Adapter, ArchConfig, Backbone, ClassifierHead, Fusion, ModelConfig, ModelView,
    Parameters, QueryMode, DEFAULT_ATTENTION_DROPOUT,
};
use crate::objectives::LmScorer;
use crate::seed::{self, derive_seed, sha256_hex};
use crate::synth::{
    build_fusion_mixture, derive_kgc, generate_qa_with, read_kgc_jsonl, read_qa_jsonl, split, stats_table, statement,
    write_kgc_jsonl, write_qa_jsonl, MixtureSpec, QaDataset, QaOptions, MIXTURE_TAG,
};
use crate::tokenizer::Tokenizer;

/// Environment variable that overrides the configured output root.
pub const OUTPUT_ENV: &str = "KGFUSE_OUTPUT_DIR";

pub fn output_root_override() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgDecl {
    pub name: String,
    /// TSV triple file, relative to the config file's directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateOverrides {
    /// Extra or replacement relation prefixes.
    pub entries: BTreeMap<String, String>,
    pub mask_token: Option<String>,
    pub name_pool: Option<Vec<String>>,
}

impl TemplateOverrides {
    pub fn registry(&self) -> Result<TemplateRegistry> {
        let mut reg = default_templates();
        if let Some(mask) = &self.mask_token {
            for prefix in reg.entries.values_mut() {
                *prefix = prefix.replace(&reg.mask_token, mask);
            }
            reg.mask_token = mask.clone();
        }
        reg.entries.extend(self.entries.clone());
        if let Some(pool) = &self.name_pool {
            reg.name_pool = pool.clone();
        }
        reg.validate()?;
        Ok(reg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaSettings {
    pub option_count: usize,
    pub same_relation: bool,
    pub valid_fraction: f64,
    /// Drop triples whose relation has no template instead of failing.
    pub drop_unregistered: bool,
    /// Balanced-mixture size per KG for fusion training.
    pub mixture_per_kg: usize,
}

impl Default for QaSettings {
    fn default() -> Self {
        Self {
            option_count: 3,
            same_relation: false,
            valid_fraction: 0.2,
            drop_unregistered: false,
            mixture_per_kg: 240,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSettings {
    pub backbone: TrainHyper,
    pub expert: TrainHyper,
    pub kgc: TrainHyper,
    pub fusion: TrainHyper,
    /// STL-PLM and MTL full-model baselines.
    pub full: TrainHyper,
}

impl Default for StageSettings {
    fn default() -> Self {
        let base = TrainHyper::default();
        Self {
            backbone: TrainHyper {
                learning_rate: 1e-3,
                steps: 300,
                ..base
            },
            expert: TrainHyper {
                learning_rate: 8e-3,
                epochs: 30,
                ..base
            },
            kgc: TrainHyper {
                learning_rate: 1e-3,
                epochs: 5,
                batch_size: 64,
                ..base
            },
            fusion: TrainHyper {
                learning_rate: 1e-3,
                epochs: 5,
                ..base
            },
            full: TrainHyper {
                learning_rate: 1e-3,
                epochs: 1,
                ..base
            },
        }
    }
}

/// The single document that declares an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kgs: Vec<KgDecl>,
    #[serde(default)]
    pub templates: TemplateOverrides,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub qa: QaSettings,
    #[serde(default)]
    pub stages: StageSettings,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub query_mode: QueryMode,
    #[serde(default = "default_dropout")]
    pub attention_dropout: f64,
    /// Optional plain-text pretraining corpus, one sentence per line. Without
    /// it the backbone is pretrained on the training questions and option texts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

fn default_seed() -> u64 {
    42
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_dropout() -> f64 {
    DEFAULT_ATTENTION_DROPOUT
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the KG list.
    pub fn with_kgs(kgs: Vec<KgDecl>) -> Self {
        serde_json::from_value(json!({ "kgs": kgs })).expect("default config")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Checks everything that can be checked without touching outputs;
    /// relative paths resolve against `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kgs.is_empty() {
            return bad("at least one KG must be declared".into());
        }
        let mut names = BTreeSet::new();
        for kg in &self.kgs {
            if kg.name.is_empty()
                || kg.name == MIXTURE_TAG
                || !kg.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return bad(format!("invalid KG name `{}` (use letters, digits, - or _)", kg.name));
            }
            if !names.insert(kg.name.as_str()) {
                return bad(format!("duplicate KG name `{}`", kg.name));
            }
            let p = base.join(&kg.path);
            if !p.is_file() {
                return bad(format!("KG file {} for `{}` not found", p.display(), kg.name));
            }
        }
        if let Some(c) = &self.corpus {
            if !base.join(c).is_file() {
                return bad(format!("corpus file {} not found", base.join(c).display()));
            }
        }
        self.templates.registry()?;
        ModelConfig::new(&self.model, 16).validate()?;
        if self.qa.option_count < 2 {
            return bad("option_count must be at least 2".into());
        }
        if !(self.qa.valid_fraction > 0.0 && self.qa.valid_fraction < 1.0) {
            return bad(format!("valid_fraction {} must lie in (0, 1)", self.qa.valid_fraction));
        }
        if self.qa.mixture_per_kg == 0 {
            return bad("mixture_per_kg must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return bad(format!("attention_dropout {} must lie in [0, 1)", self.attention_dropout));
        }
        for h in [
            &self.stages.backbone,
            &self.stages.expert,
            &self.stages.kgc,
            &self.stages.fusion,
            &self.stages.full,
        ] {
            h.validate()?;
        }
        Ok(())
    }
}

/// A training stage.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Backbone,
    Expert(String),
    Kgc,
    Fusion,
    StlPlm(String),
    Mtl,
}

impl Stage {
    pub fn mode(&self) -> TrainMode {
        match self {
            Stage::Backbone => TrainMode::Backbone,
            Stage::Expert(_) => TrainMode::ExpertAdapter,
            Stage::Kgc => TrainMode::KgcAdapter,
            Stage::Fusion => TrainMode::Fusion,
            Stage::StlPlm(_) => TrainMode::StlPlm,
            Stage::Mtl => TrainMode::Mtl,
        }
    }

    /// Directory name under `ckpt/` and file stem under `runs/`.
    pub fn slug(&self) -> String {
        match self {
            Stage::Backbone => "backbone".into(),
            Stage::Expert(kg) => format!("expert-{kg}"),
            Stage::Kgc => "kgc".into(),
            Stage::Fusion => "fusion".into(),
            Stage::StlPlm(kg) => format!("stl-plm-{kg}"),
            Stage::Mtl => "mtl".into(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Backbone => f.write_str("backbone"),
            Stage::Expert(kg) => write!(f, "expert:{kg}"),
            Stage::Kgc => f.write_str("kgc"),
            Stage::Fusion => f.write_str("fusion"),
            Stage::StlPlm(kg) => write!(f, "stl-plm:{kg}"),
            Stage::Mtl => f.write_str("mtl"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kg = |rest: &str| {
            if rest.is_empty() {
                Err(Error::Config(format!("stage `{s}` needs a KG name")))
            } else {
                Ok(rest.to_owned())
            }
        };
        match s {
            "backbone" => Ok(Stage::Backbone),
            "kgc" => Ok(Stage::Kgc),
            "fusion" => Ok(Stage::Fusion),
            "mtl" => Ok(Stage::Mtl),
            _ => {
                if let Some(rest) = s.strip_prefix("expert:") {
                    Ok(Stage::Expert(kg(rest)?))
                } else if let Some(rest) = s.strip_prefix("stl-plm:") {
                    Ok(Stage::StlPlm(kg(rest)?))
                } else {
                    Err(Error::Config(format!(
                        "unknown stage `{s}` (expected backbone, expert:<kg>, kgc, fusion, stl-plm:<kg> or mtl)"
                    )))
                }
            }
        }
    }
}

/// A model to evaluate: the plain backbone or the product of a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelRef {
    Plm,
    Stage(Stage),
}

impl ModelRef {
    pub fn tag(&self) -> String {
        match self {
            ModelRef::Plm => "plm".into(),
            ModelRef::Stage(s) => s.slug(),
        }
    }
}

impl FromStr for ModelRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plm" => Ok(ModelRef::Plm),
            "backbone" | "kgc" => Err(Error::Config(format!("`{s}` is not a QA model; use plm or a QA stage"))),
            other => Ok(ModelRef::Stage(other.parse()?)),
        }
    }
}

impl fmt::Display for ModelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelRef::Plm => f.write_str("plm"),
            ModelRef::Stage(s) => s.fmt(f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenDigest {
    pub before: String,
    pub after: String,
}

/// Record of one stage run, written as `runs/<stage>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub mode: TrainMode,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub dataset_digests: BTreeMap<String, String>,
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Digest of the trained parameters.
    pub output_digest: Option<String>,
    /// Digests of every frozen input before and after the stage.
    pub frozen: BTreeMap<String, FrozenDigest>,
    pub report: Option<TrainReport>,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Set when a resumed run found the stage already complete.
    #[serde(default)]
    pub skipped: bool,
}

/// Locations of every generated artifact under the output root.
#[derive(Clone, Debug)]
pub struct DataPaths {
    pub root: PathBuf,
}

impl DataPaths {
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn templates(&self) -> PathBuf {
        self.root.join("templates.json")
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("data").join("stats.txt")
    }
    pub fn qa(&self, kg: &str, part: &str) -> PathBuf {
        self.root.join("data").join("qa").join(format!("{kg}.{part}.jsonl"))
    }
    pub fn kgc(&self, part: &str) -> PathBuf {
        self.root.join("data").join("kgc").join(format!("{part}.jsonl"))
    }
    pub fn mixture(&self, part: &str) -> PathBuf {
        self.root.join("data").join("mixture").join(format!("{part}.jsonl"))
    }
    pub fn checkpoint(&self, stage: &Stage) -> PathBuf {
        self.root.join("ckpt").join(stage.slug())
    }
    pub fn run(&self, stage: &Stage) -> PathBuf {
        self.root.join("runs").join(format!("{}.json", stage.slug()))
    }
    pub fn eval_dir(&self, tag: &str) -> PathBuf {
        self.root.join("eval").join(tag)
    }
}

/// What `generate` produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generate {
    Qa,
    Kgc,
    Mixture,
    All,
}

impl FromStr for Generate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Generate::Qa),
            "kgc" => Ok(Generate::Kgc),
            "mixture" => Ok(Generate::Mixture),
            "all" => Ok(Generate::All),
            _ => Err(Error::Config(format!("unknown dataset kind `{s}` (qa, kgc, mixture, all)"))),
        }
    }
}

/// Everything a QA evaluation needs, loaded from checkpoints.
pub struct LoadedModel {
    pub backbone: Backbone,
    pub adapter: Option<Adapter>,
    pub experts: Vec<Adapter>,
    pub expert_names: Vec<String>,
    pub fusion: Option<Fusion>,
    pub kgc: Option<Adapter>,
}

impl LoadedModel {
    pub fn view(&self) -> ModelView<'_> {
        if let Some(f) = &self.fusion {
            ModelView::Fusion {
                backbone: &self.backbone,
                experts: &self.experts,
                fusion: f,
                kgc: self.kgc.as_ref(),
            }
        } else if let Some(a) = &self.adapter {
            ModelView::Adapter {
                backbone: &self.backbone,
                adapter: a,
            }
        } else {
            ModelView::Plain(&self.backbone)
        }
    }
}

/// Options for [`Experiment::train_stage`] and [`Experiment::run_all`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub force: bool,
    pub resume: bool,
    pub query_mode: Option<QueryMode>,
}

/// Extra analyses requested alongside an evaluation.
#[derive(Clone, Debug, Default)]
pub struct EvalExtras {
    pub attention: bool,
    pub embeddings: bool,
    /// Single-KG models whose common-correct set anchors the interference ratio.
    pub interference: Vec<ModelRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub dataset: String,
    pub dataset_digest: String,
    pub samples: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interference_ratio: Option<f64>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub paths: DataPaths,
}

impl Experiment {
    /// Validates `config`; the output root is `base_dir/output_dir` unless overridden.
    pub fn new(config: ExperimentConfig, base_dir: impl Into<PathBuf>, output: Option<PathBuf>) -> Result<Self> {
        let base_dir = base_dir.into();
        config.validate(&base_dir)?;
        let root = output.unwrap_or_else(|| base_dir.join(&config.output_dir));
        Ok(Self {
            config,
            base_dir,
            paths: DataPaths { root },
        })
    }

    /// Loads a config file; the output root honours [`OUTPUT_ENV`].
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = ExperimentConfig::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base, output_root_override())
    }

    fn kg_names(&self) -> Vec<String> {
        self.config.kgs.iter().map(|k| k.name.clone()).collect()
    }

    fn stage_seed(&self, stage: &Stage) -> u64 {
        derive_seed(self.config.seed, &format!("stage/{stage}"))
    }

    fn refuse_existing(&self, files: &[PathBuf], force: bool) -> Result<()> {
        if force {
            return Ok(());
        }
        match files.iter().find(|p| p.exists()) {
            Some(p) => Err(Error::Exists(p.clone())),
            None => Ok(()),
        }
    }

    fn require(&self, p: &Path, what: &str) -> Result<()> {
        if p.exists() {
            Ok(())
        } else {
            Err(Error::MissingDependency(format!("{what} ({})", p.display())))
        }
    }

    /// Writes QA, KGC and/or mixture datasets and returns the statistics table.
    pub fn generate(&self, which: Generate, force: bool) -> Result<String> {
        if matches!(which, Generate::Qa | Generate::All) {
            self.generate_qa(force)?;
        }
        if matches!(which, Generate::Kgc | Generate::All) {
            self.generate_kgc(force)?;
        }
        if matches!(which, Generate::Mixture | Generate::All) {
            self.generate_mixture(force)?;
        }
        self.stats()
    }

    fn generate_qa(&self, force: bool) -> Result<()> {
        let names = self.kg_names();
        let mut targets: Vec<PathBuf> = names
            .iter()
            .flat_map(|k| [self.paths.qa(k, "train"), self.paths.qa(k, "valid")])
            .collect();
        targets.push(self.paths.vocab());
        self.refuse_existing(&targets, force)?;
        let registry = self.config.templates.registry()?;
        let options = QaOptions {
            option_count: self.config.qa.option_count,
            same_relation: self.config.qa.same_relation,
        };
        let mut texts: Vec<String> = Vec::new();
        for decl in &self.config.kgs {
            let step = |e: Error| Error::Step {
                step: format!("generate qa for `{}`", decl.name),
                source: Box::new(e),
            };
            let mut source = load_triples(self.base_dir.join(&decl.path), &decl.name).map_err(step)?;
            if self.config.qa.drop_unregistered {
                source = source.retain_registered(&registry).map_err(step)?;
            }
            let mut rng = seed::derived_rng(self.config.seed, &format!("qa/{}", decl.name));
            let ds = generate_qa_with(&source, &registry, options, &mut rng).map_err(step)?;
            let mut rng = seed::derived_rng(self.config.seed, &format!("split/{}", decl.name));
            let (train, valid) = split(&ds, self.config.qa.valid_fraction, &mut rng).map_err(step)?;
            for s in &ds.samples {
                texts.push(s.question.clone());
                texts.push(statement(&s.question, s.gold(), &registry.mask_token));
                texts.extend(s.options.iter().cloned());
            }
            write_qa_jsonl(self.paths.qa(&decl.name, "train"), &train)?;
            write_qa_jsonl(self.paths.qa(&decl.name, "valid"), &valid)?;
        }
        if let Some(c) = &self.config.corpus {
            let p = self.base_dir.join(c);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
            texts.extend(text.lines().map(str::to_owned));
        }
        let tokenizer = Tokenizer::build(texts.iter().map(String::as_str), &registry.mask_token);
        tokenizer.save(&self.paths.vocab())?;
        crate::fsutil::write_atomic(&self.paths.templates(), registry.to_json()?.as_bytes())
    }

    fn read_split(&self, part: &str) -> Result<Vec<QaDataset>> {
        self.kg_names()
            .iter()
            .map(|k| {
                let p = self.paths.qa(k, part);
                self.require(&p, &format!("{part} QA data for `{k}`"))?;
                read_qa_jsonl(&p)
            })
            .collect()
    }

    fn registry(&self) -> Result<TemplateRegistry> {
        self.config.templates.registry()
    }

    fn generate_kgc(&self, force: bool) -> Result<()> {
        self.refuse_existing(&[self.paths.kgc("train"), self.paths.kgc("valid")], force)?;
        let mask = self.registry()?.mask_token;
        for part in ["train", "valid"] {
            let data = self.read_split(part)?;
            let kgc = crate::synth::derive_kgc_with_mask(&data, &mask)?;
            write_kgc_jsonl(self.paths.kgc(part), &kgc)?;
        }
        Ok(())
    }

    fn generate_mixture(&self, force: bool) -> Result<()> {
        self.refuse_existing(&[self.paths.mixture("train"), self.paths.mixture("valid")], force)?;
        let train = self.read_split("train")?;
        let mix = build_fusion_mixture(
            &train,
            MixtureSpec {
                per_kg_count: self.config.qa.mixture_per_kg,
                seed: derive_seed(self.config.seed, "mixture/train"),
            },
        )?;
        write_qa_jsonl(self.paths.mixture("train"), &mix)?;
        let valid = self.read_split("valid")?;
        let all = valid.iter().map(QaDataset::len).max().unwrap_or(1).max(1);
        let mix = build_fusion_mixture(
            &valid,
            MixtureSpec {
                per_kg_count: all,
                seed: derive_seed(self.config.seed, "mixture/valid"),
            },
        )?;
        write_qa_jsonl(self.paths.mixture("valid"), &mix)
    }

    /// Per-KG split sizes plus KGC and mixture totals, from whatever exists on disk.
    pub fn stats(&self) -> Result<String> {
        let mut rows = Vec::new();
        for k in self.kg_names() {
            let (tp, vp) = (self.paths.qa(&k, "train"), self.paths.qa(&k, "valid"));
            if tp.exists() && vp.exists() {
                rows.push((k, read_qa_jsonl(&tp)?.len(), read_qa_jsonl(&vp)?.len()));
            }
        }
        let mut out = stats_table(&rows);
        if self.paths.kgc("train").exists() && self.paths.kgc("valid").exists() {
            out.push_str(&format!(
                "KGC: {} train / {} valid\n",
                read_kgc_jsonl(self.paths.kgc("train"))?.len(),
                read_kgc_jsonl(self.paths.kgc("valid"))?.len()
            ));
        }
        if self.paths.mixture("train").exists() && self.paths.mixture("valid").exists() {
            let t = read_qa_jsonl(self.paths.mixture("train"))?;
            out.push_str(&format!(
                "Mixture: {} train ({}) / {} valid\n",
                t.len(),
                t.kg_histogram()
                    .iter()
                    .map(|(k, n)| format!("{k}={n}"))
                    .collect::<Vec<_>>()
                    .join(", "),
                read_qa_jsonl(self.paths.mixture("valid"))?.len()
            ));
        }
        crate::fsutil::write_atomic(&self.paths.stats(), out.as_bytes())?;
        Ok(out)
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        self.require(&self.paths.vocab(), "vocabulary (run `generate qa` first)")?;
        Tokenizer::load(&self.paths.vocab())
    }

    fn model_config(&self, tokenizer: &Tokenizer) -> ModelConfig {
        ModelConfig::new(&self.config.model, tokenizer.vocab_size())
    }

    fn digest_file(&self, p: &Path) -> Result<String> {
        Ok(sha256_hex(&std::fs::read(p).map_err(|e| Error::file(p, e))?))
    }

    fn relative(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.paths.root).unwrap_or(p).to_path_buf()
    }

    /// Stage inputs that must exist: data files and upstream checkpoints.
    fn inputs(&self, stage: &Stage, mode: QueryMode) -> Result<(Vec<PathBuf>, Vec<Stage>)> {
        let names = self.kg_names();
        let check_kg = |kg: &str| {
            if names.iter().any(|n| n == kg) {
                Ok(())
            } else {
                Err(Error::Config(format!("stage `{stage}` names unknown KG `{kg}`")))
            }
        };
        let mut data = vec![self.paths.vocab()];
        let mut deps = Vec::new();
        match stage {
            Stage::Backbone => {
                data.extend(names.iter().map(|k| self.paths.qa(k, "train")));
            }
            Stage::Expert(kg) | Stage::StlPlm(kg) => {
                check_kg(kg)?;
                data.push(self.paths.qa(kg, "train"));
                deps.push(Stage::Backbone);
            }
            Stage::Kgc => {
                data.push(self.paths.kgc("train"));
                deps.push(Stage::Backbone);
            }
            Stage::Fusion => {
                data.push(self.paths.mixture("train"));
                deps.push(Stage::Backbone);
                deps.extend(names.iter().map(|k| Stage::Expert(k.clone())));
                if mode == QueryMode::Kgc {
                    deps.push(Stage::Kgc);
                }
            }
            Stage::Mtl => {
                data.extend(names.iter().map(|k| self.paths.qa(k, "train")));
                deps.push(Stage::Backbone);
            }
        }
        Ok((data, deps))
    }

    fn is_complete(&self, stage: &Stage) -> bool {
        self.read_run(stage)
            .map(|m| m.status == RunStatus::Complete && self.paths.checkpoint(stage).join("manifest.json").exists())
            .unwrap_or(false)
    }

    pub fn read_run(&self, stage: &Stage) -> Result<RunManifest> {
        let p = self.paths.run(stage);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_run(&self, stage: &Stage, m: &RunManifest) -> Result<()> {
        let mut json = serde_json::to_string_pretty(m)?;
        json.push('\n');
        crate::fsutil::write_atomic(&self.paths.run(stage), json.as_bytes())
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let p = self.paths.checkpoint(&Stage::Backbone);
        self.require(&p, "backbone checkpoint")?;
        load_backbone(&p)
    }

    pub fn load_expert(&self, kg: &str) -> Result<Adapter> {
        let p = self.paths.checkpoint(&Stage::Expert(kg.into()));
        self.require(&p, &format!("expert checkpoint for `{kg}`"))?;
        Ok(load_adapter(&p)?.1)
    }

    pub fn load_kgc(&self) -> Result<(Adapter, ClassifierHead)> {
        let p = self.paths.checkpoint(&Stage::Kgc);
        self.require(&p, "KG-classifier checkpoint")?;
        let (_, a, h) = load_classifier(&p)?;
        Ok((a, h))
    }

    /// Trains one stage, writing its checkpoint and run manifest.
    pub fn train_stage(&self, stage: &Stage, opts: RunOptions) -> Result<RunManifest> {
        let mode = opts.query_mode.unwrap_or(self.config.query_mode);
        let (data, deps) = self.inputs(stage, mode)?;
        if opts.resume && self.is_complete(stage) {
            let mut m = self.read_run(stage)?;
            m.skipped = true;
            return Ok(m);
        }
        let ckpt = self.paths.checkpoint(stage);
        self.refuse_existing(std::slice::from_ref(&ckpt), opts.force || opts.resume)?;
        for p in &data {
            self.require(p, &format!("input data for stage `{stage}`"))?;
        }
        for d in &deps {
            if !self.paths.checkpoint(d).join("manifest.json").exists() {
                return Err(Error::MissingDependency(format!(
                    "stage `{stage}` needs the `{d}` checkpoint ({})",
                    self.paths.checkpoint(d).display()
                )));
            }
        }
        let dataset_digests = data
            .iter()
            .map(|p| Ok((self.relative(p).display().to_string(), self.digest_file(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let seed = self.stage_seed(stage);
        let mut manifest = RunManifest {
            stage: stage.to_string(),
            mode: stage.mode(),
            status: RunStatus::Incomplete,
            config: self.config.clone(),
            config_digest: self.config.digest(),
            dataset_digests,
            seed,
            checkpoint: self.relative(&ckpt),
            output_digest: None,
            frozen: BTreeMap::new(),
            report: None,
            wall_time_secs: 0.0,
            error: None,
            skipped: false,
        };
        self.write_run(stage, &manifest)?;
        let start = Instant::now();
        let outcome = self.execute(stage, mode, seed, &manifest);
        manifest.wall_time_secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok((report, output_digest, frozen)) => {
                manifest.status = RunStatus::Complete;
                manifest.report = Some(report);
                manifest.output_digest = Some(output_digest);
                manifest.frozen = frozen;
                self.write_run(stage, &manifest)?;
                Ok(manifest)
            }
            Err(e) => {
                manifest.error = Some(e.to_string());
                self.write_run(stage, &manifest)?;
                Err(Error::Step {
                    step: stage.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn hyper(&self, base: &TrainHyper, seed: u64) -> TrainHyper {
        TrainHyper { seed, ..*base }
    }

    fn default_corpus(&self, tokenizer: &Tokenizer, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let mut texts = BTreeSet::new();
        if let Some(c) = &self.config.corpus {
            let p = self.base_dir.join(c);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
            texts.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned));
        } else {
            let mask = self.registry()?.mask_token;
            for ds in self.read_split("train")? {
                for s in &ds.samples {
                    texts.insert(s.question.replace(&mask, " ").trim().to_owned());
                    texts.extend(s.options.iter().cloned());
                }
            }
        }
        texts
            .iter()
            .map(|t| {
                let ids = tokenizer.encode_wrapped(t);
                if ids.len() > max_len {
                    Err(Error::SequenceTooLong {
                        len: ids.len(),
                        max: max_len,
                    })
                } else {
                    Ok(ids)
                }
            })
            .collect()
    }

    #[allow(clippy::type_complexity)]
    fn execute(
        &self,
        stage: &Stage,
        mode: QueryMode,
        seed: u64,
        run: &RunManifest,
    ) -> Result<(TrainReport, String, BTreeMap<String, FrozenDigest>)> {
        let tokenizer = self.tokenizer()?;
        let st = &self.config.stages;
        let ckpt = self.paths.checkpoint(stage);
        let provenance = json!({
            "stage": stage.to_string(),
            "mode": stage.mode(),
            "config_digest": run.config_digest,
            "datasets": run.dataset_digests,
        });
        let mut frozen = BTreeMap::new();
        let freeze = |frozen: &mut BTreeMap<String, FrozenDigest>, name: &str, before: String, after: String| {
            frozen.insert(name.to_owned(), FrozenDigest { before, after });
        };
        match stage {
            Stage::Backbone => {
                let cfg = self.model_config(&tokenizer);
                let init = init_backbone(&cfg, derive_seed(self.config.seed, "init/backbone"))?;
                let corpus = self.default_corpus(&tokenizer, cfg.max_seq_len)?;
                let (b, report) = pretrain_backbone(&init, &corpus, &self.hyper(&st.backbone, seed))?;
                save_backbone(&ckpt, &b, seed, &provenance)?;
                Ok((report, b.digest(), frozen))
            }
            Stage::Expert(kg) => {
                let b = self.load_backbone()?;
                let before = b.digest();
                let ds = read_qa_jsonl(self.paths.qa(kg, "train"))?;
                let (a, report) = train_expert(&b, &ds, &tokenizer, &self.hyper(&st.expert, seed))?;
                freeze(&mut frozen, "backbone", before, b.digest());
                save_adapter(&ckpt, &b.config, &a, seed, &provenance)?;
                Ok((report, a.digest(), frozen))
            }
            Stage::Kgc => {
                let b = self.load_backbone()?;
                let before = b.digest();
                let samples = read_kgc_jsonl(self.paths.kgc("train"))?;
                let (a, h, report) = train_kgc(&b, &samples, &self.kg_names(), &tokenizer, &self.hyper(&st.kgc, seed))?;
                freeze(&mut frozen, "backbone", before, b.digest());
                save_classifier(&ckpt, &b.config, &a, &h, seed, &provenance)?;
                Ok((report, format!("{}:{}", a.digest(), h.digest()), frozen))
            }
            Stage::Fusion => {
                let b = self.load_backbone()?;
                let names = self.kg_names();
                let experts: Vec<Adapter> = names.iter().map(|k| self.load_expert(k)).collect::<Result<_>>()?;
                let kgc = if mode == QueryMode::Kgc { Some(self.load_kgc()?.0) } else { None };
                let mut before: Vec<(String, String)> = vec![("backbone".into(), b.digest())];
                before.extend(names.iter().zip(&experts).map(|(k, e)| (format!("expert-{k}"), e.digest())));
                if let Some(k) = &kgc {
                    before.push(("kgc".into(), k.digest()));
                }
                let mix = read_qa_jsonl(self.paths.mixture("train"))?;
                let (f, report) = train_fusion(
                    &b,
                    &experts,
                    &mix,
                    &tokenizer,
                    &self.hyper(&st.fusion, seed),
                    mode,
                    kgc.as_ref(),
                    self.config.attention_dropout,
                )?;
                let mut after = vec![b.digest()];
                after.extend(experts.iter().map(Parameters::digest));
                after.extend(kgc.iter().map(Parameters::digest));
                for ((name, d0), d1) in before.into_iter().zip(after) {
                    freeze(&mut frozen, &name, d0, d1);
                }
                save_fusion(&ckpt, &b.config, &f, &names, mode, seed, &provenance)?;
                Ok((report, f.digest(), frozen))
            }
            Stage::StlPlm(kg) => {
                let b = self.load_backbone()?;
                let ds = read_qa_jsonl(self.paths.qa(kg, "train"))?;
                let (out, report) = train_full(&b, &[ds], &tokenizer, &self.hyper(&st.full, seed))?;
                save_backbone(&ckpt, &out, seed, &provenance)?;
                Ok((report, out.digest(), frozen))
            }
            Stage::Mtl => {
                let b = self.load_backbone()?;
                let data = self.read_split("train")?;
                let (out, report) = train_full(&b, &data, &tokenizer, &self.hyper(&st.full, seed))?;
                save_backbone(&ckpt, &out, seed, &provenance)?;
                Ok((report, out.digest(), frozen))
            }
        }
    }

    /// The five steps of the modular pipeline in order (datasets, backbone,
    /// experts, KG classifier, fusion), reporting progress through `progress`.
    pub fn run_all(&self, opts: RunOptions, mut progress: impl FnMut(&str)) -> Result<Vec<RunManifest>> {
        let data_ready = self.paths.vocab().exists()
            && self.paths.kgc("train").exists()
            && self.paths.mixture("train").exists();
        if opts.resume && data_ready {
            progress("datasets: present, skipped");
        } else {
            let stats = self.generate(Generate::All, opts.force).map_err(|e| Error::Step {
                step: "generate".into(),
                source: Box::new(e),
            })?;
            progress(&format!("datasets generated\n{stats}"));
        }
        let mode = opts.query_mode.unwrap_or(self.config.query_mode);
        let mut stages = vec![Stage::Backbone];
        stages.extend(self.kg_names().into_iter().map(Stage::Expert));
        if mode == QueryMode::Kgc {
            stages.push(Stage::Kgc);
        }
        stages.push(Stage::Fusion);
        let mut out = Vec::new();
        for s in stages {
            let m = self.train_stage(&s, opts)?;
            if m.skipped {
                progress(&format!("{s}: complete, skipped"));
            } else {
                let steps = m.report.as_ref().map_or(0, |r| r.steps);
                progress(&format!("{s}: {steps} steps in {:.1}s", m.wall_time_secs));
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Loads a QA model from checkpoints.
    pub fn load_model(&self, model: &ModelRef) -> Result<LoadedModel> {
        let mut lm = LoadedModel {
            backbone: self.load_backbone()?,
            adapter: None,
            experts: Vec::new(),
            expert_names: Vec::new(),
            fusion: None,
            kgc: None,
        };
        match model {
            ModelRef::Plm => {}
            ModelRef::Stage(Stage::Expert(kg)) => lm.adapter = Some(self.load_expert(kg)?),
            ModelRef::Stage(s @ (Stage::StlPlm(_) | Stage::Mtl)) => {
                let p = self.paths.checkpoint(s);
                self.require(&p, &format!("`{s}` checkpoint"))?;
                lm.backbone = load_backbone(&p)?;
            }
            ModelRef::Stage(Stage::Fusion) => {
                let p = self.paths.checkpoint(&Stage::Fusion);
                self.require(&p, "fusion checkpoint")?;
                let fc = load_fusion(&p)?;
                lm.experts = fc.experts.iter().map(|k| self.load_expert(k)).collect::<Result<_>>()?;
                lm.expert_names = fc.experts;
                if fc.query_mode == QueryMode::Kgc {
                    lm.kgc = Some(self.load_kgc()?.0);
                }
                lm.fusion = Some(fc.fusion);
            }
            ModelRef::Stage(s) => return Err(Error::Config(format!("`{s}` is not a QA model"))),
        }
        lm.view().validate()?;
        Ok(lm)
    }

    /// Predictions of `model` on `dataset` (no files written).
    pub fn predict(&self, model: &ModelRef, dataset: &QaDataset) -> Result<(f64, Vec<PredictionRecord>)> {
        let tokenizer = self.tokenizer()?;
        let lm = self.load_model(model)?;
        let mut scorer = LmScorer::new(lm.view(), &tokenizer, model.tag());
        scorer.answer_only = self.config.stages.expert.answer_only;
        evaluate(&scorer, dataset)
    }

    /// Evaluates `model` on `dataset` and writes predictions, metrics and the
    /// requested extras under `eval/<model>/`.
    pub fn eval(&self, model: &ModelRef, dataset: &QaDataset, dataset_name: &str, extras: &EvalExtras) -> Result<EvalSummary> {
        let tokenizer = self.tokenizer()?;
        let (accuracy, records) = self.predict(model, dataset)?;
        let dir = self.paths.eval_dir(&model.tag());
        let stem = dataset_name.replace(['/', '\\'], "_");
        write_predictions(&dir.join(format!("{stem}.predictions.jsonl")), &records)?;
        let mut summary = EvalSummary {
            model: model.to_string(),
            dataset: dataset_name.to_owned(),
            dataset_digest: sha256_hex(serde_json::to_string(&dataset.samples)?.as_bytes()),
            samples: records.len(),
            accuracy,
            interference_ratio: None,
        };
        if extras.attention || extras.embeddings {
            let lm = self.load_model(model)?;
            if extras.attention {
                let dump = attention_dump(&lm.view(), &tokenizer, dataset, &lm.expert_names)?;
                crate::fsutil::write_atomic(&dir.join(format!("{stem}.attention.csv")), dump.to_csv().as_bytes())?;
            }
            if extras.embeddings {
                let rows = export_cls_embeddings(&lm.view(), &tokenizer, dataset)?;
                crate::fsutil::write_atomic(&dir.join(format!("{stem}.embeddings.csv")), embeddings_csv(&rows).as_bytes())?;
            }
        }
        if !extras.interference.is_empty() {
            let stl = extras
                .interference
                .iter()
                .map(|m| Ok(self.predict(m, dataset)?.1))
                .collect::<Result<Vec<_>>>()?;
            summary.interference_ratio = Some(interference_ratio(&InterferenceInput { stl, multi: records })?);
        }
        let mut json = serde_json::to_string_pretty(&summary)?;
        json.push('\n');
        crate::fsutil::write_atomic(&dir.join(format!("{stem}.metrics.json")), json.as_bytes())?;
        Ok(summary)
    }

    /// Mixed held-out QA set.
    pub fn mixed_valid(&self) -> Result<QaDataset> {
        let p = self.paths.mixture("valid");
        self.require(&p, "mixed validation set")?;
        read_qa_jsonl(&p)
    }

    pub fn valid(&self, kg: &str) -> Result<QaDataset> {
        let p = self.paths.qa(kg, "valid");
        self.require(&p, &format!("validation set for `{kg}`"))?;
        read_qa_jsonl(&p)
    }

    /// KG-classifier accuracy on the held-out KGC statements.
    pub fn kgc_accuracy(&self) -> Result<f64> {
        let tokenizer = self.tokenizer()?;
        let b = self.load_backbone()?;
        let (a, h) = self.load_kgc()?;
        let samples = read_kgc_jsonl(self.paths.kgc("valid"))?;
        if samples.is_empty() {
            return Err(Error::invalid("empty KGC validation set"));
        }
        let mut correct = 0;
        for s in &samples {
            let ids = crate::objectives::encode_statement(&tokenizer, &s.statement, b.config.max_seq_len)?;
            let p = crate::model::classify_kg(&b, &a, &h, &ids)?;
            if crate::objectives::argmin(&p.iter().map(|x| -x).collect::<Vec<_>>()) == s.kg_label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    pub fn derive_kgc_preview(&self) -> Result<usize> {
        Ok(derive_kgc(&self.read_split("train")?)?.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_and_model_ref_parsing() {
        for s in ["backbone", "expert:a", "kgc", "fusion", "stl-plm:b", "mtl"] {
            assert_eq!(s.parse::<Stage>().unwrap().to_string(), s);
        }
        assert!("expert:".parse::<Stage>().is_err());
        assert!("nope".parse::<Stage>().is_err());
        assert_eq!("plm".parse::<ModelRef>().unwrap(), ModelRef::Plm);
        assert!("kgc".parse::<ModelRef>().is_err());
        assert_eq!(Stage::StlPlm("x".into()).slug(), "stl-plm-x");
    }

    #[test]
    fn config_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let files = crate::fixture::write_fixture(dir.path()).unwrap();
        let cfg = ExperimentConfig::with_kgs(
            files
                .iter()
                .map(|(n, p)| KgDecl {
                    name: n.clone(),
                    path: p.file_name().unwrap().into(),
                })
                .collect(),
        );
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        cfg.validate(dir.path()).unwrap();
        let mut dup = cfg.clone();
        dup.kgs[1].name = dup.kgs[0].name.clone();
        assert!(dup.validate(dir.path()).is_err());
        let mut missing = cfg.clone();
        missing.kgs[0].path = "nope.tsv".into();
        assert!(matches!(missing.validate(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn template_overrides_apply() {
        let mut o = TemplateOverrides::default();
        o.entries.insert("Likes".into(), "likes [MASK]".into());
        o.mask_token = Some("<mask>".into());
        let reg = o.registry().unwrap();
        assert_eq!(reg.get("Likes"), Some("likes [MASK]"));
        assert_eq!(reg.get("PartOf"), Some("is part of <mask>"));
    }
}
