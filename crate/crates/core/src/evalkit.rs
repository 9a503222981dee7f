//! Zero-shot evaluation and analysis: accuracy with per-sample records, the
//! interference ratio, fusion attention dumps, `[CLS]` embedding export and
//! relative-improvement grids.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelView;
use crate::objectives::{build_sequences, predict, OptionScorer};
use crate::synth::QaDataset;
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: usize,
    pub pred: usize,
    pub scores: Vec<f64>,
    pub model: String,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.gold == self.pred
    }
}

/// Scores every sample; returns accuracy and one record per sample in dataset order.
pub fn evaluate(scorer: &dyn OptionScorer, dataset: &QaDataset) -> Result<(f64, Vec<PredictionRecord>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut records = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let scored = scorer.score(s)?;
        records.push(PredictionRecord {
            id: s.id.clone(),
            gold: s.label,
            pred: predict(&scored),
            scores: scored.scores,
            model: scorer.tag().to_owned(),
        });
    }
    Ok((accuracy(&records), records))
}

pub fn accuracy(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    crate::fsutil::write_atomic(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Prediction sets of the single-KG models and of one multi-KG model over a shared sample universe.
#[derive(Clone, Debug)]
pub struct InterferenceInput {
    pub stl: Vec<Vec<PredictionRecord>>,
    pub multi: Vec<PredictionRecord>,
}

/// Among samples every STL model gets right, the fraction the multi-KG model gets wrong.
pub fn interference_ratio(input: &InterferenceInput) -> Result<f64> {
    if input.stl.is_empty() {
        return Err(Error::invalid("interference needs at least one STL prediction set"));
    }
    let universe: BTreeSet<&str> = input.multi.iter().map(|r| r.id.as_str()).collect();
    if universe.len() != input.multi.len() {
        return Err(Error::invalid("duplicate sample ids in the multi-KG predictions"));
    }
    let mut common: BTreeSet<&str> = universe.clone();
    for set in &input.stl {
        let ids: BTreeSet<&str> = set.iter().map(|r| r.id.as_str()).collect();
        if ids != universe || set.len() != universe.len() {
            return Err(Error::invalid("STL and multi-KG prediction sets cover different samples"));
        }
        let correct: HashSet<&str> = set.iter().filter(|r| r.correct()).map(|r| r.id.as_str()).collect();
        common.retain(|id| correct.contains(id));
    }
    if common.is_empty() {
        return Err(Error::InterferenceUndefined);
    }
    let multi: HashMap<&str, bool> = input.multi.iter().map(|r| (r.id.as_str(), r.correct())).collect();
    let wrong = common.iter().filter(|id| !multi[*id]).count();
    Ok(wrong as f64 / common.len() as f64)
}

/// `[CLS]` attention over experts: per-sample L × K matrices and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub experts: Vec<String>,
    pub mean: Matrix,
    pub samples: Vec<(String, Matrix)>,
}

impl AttentionDump {
    /// Columns: `sample,layer,<expert>...`; mean rows use the sample id `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,layer");
        for e in &self.experts {
            let _ = write!(out, ",{e}");
        }
        out.push('\n');
        let mut emit = |id: &str, m: &Matrix| {
            for l in 0..m.rows() {
                let _ = write!(out, "{id},{l}");
                for p in m.row(l) {
                    let _ = write!(out, ",{p:.8}");
                }
                out.push('\n');
            }
        };
        emit("mean", &self.mean);
        for (id, m) in &self.samples {
            emit(id, m);
        }
        out
    }
}

/// Runs each sample's gold-answer sequence through a fusion view and reads the
/// attention distribution at the `[CLS]` position of every fusion layer.
pub fn attention_dump(
    view: &ModelView,
    tokenizer: &Tokenizer,
    dataset: &QaDataset,
    expert_names: &[String],
) -> Result<AttentionDump> {
    let k = view.expert_count();
    if k == 0 {
        return Err(Error::invalid("attention dump needs a fusion model"));
    }
    if expert_names.len() != k {
        return Err(Error::invalid("expert name count differs from the fusion width"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("attention dump on an empty dataset"));
    }
    let layers = view.config().layer_count;
    let mut mean = Matrix::zeros(layers, k);
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let seqs = build_sequences(s, tokenizer, view.config().max_seq_len)?;
        let trace = view.trace(&seqs[s.label].ids)?;
        let mut m = Matrix::zeros(layers, k);
        for (l, att) in trace.attention.iter().enumerate() {
            m.row_mut(l).copy_from_slice(att.row(0));
        }
        mean.add_assign(&m);
        samples.push((s.id.clone(), m));
    }
    mean.scale(1.0 / dataset.len() as f64);
    Ok(AttentionDump {
        experts: expert_names.to_vec(),
        mean,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub dataset: String,
    pub values: Vec<f64>,
}

/// Final-layer `[CLS]` state of `[CLS] question [SEP]` for every sample.
pub fn export_cls_embeddings(view: &ModelView, tokenizer: &Tokenizer, dataset: &QaDataset) -> Result<Vec<EmbeddingRow>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let ids = tokenizer.encode_wrapped(&s.question);
            let trace = view.trace(&ids)?;
            Ok(EmbeddingRow {
                id: s.id.clone(),
                dataset: s.kg.clone(),
                values: trace.cls_hidden,
            })
        })
        .collect()
}

/// Columns: `id,dataset,h0..h{H-1}`.
pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("id,dataset");
    for i in 0..width {
        let _ = write!(out, ",h{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.id, r.dataset);
        for v in &r.values {
            let _ = write!(out, ",{v:.8}");
        }
        out.push('\n');
    }
    out
}

/// One accuracy entry: a model family trained on a KG combination, evaluated on a benchmark.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResultKey {
    pub model: String,
    pub kgs: BTreeSet<String>,
    pub benchmark: String,
}

impl ResultKey {
    pub fn new(model: &str, kgs: &[&str], benchmark: &str) -> Self {
        Self {
            model: model.into(),
            kgs: kgs.iter().map(|s| s.to_string()).collect(),
            benchmark: benchmark.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImprovementGrid {
    pub combinations: Vec<BTreeSet<String>>,
    pub benchmarks: Vec<String>,
    /// `cells[c][b]`, in the accuracy units of the input.
    pub cells: Vec<Vec<f64>>,
}

impl ImprovementGrid {
    pub fn cell(&self, kgs: &[&str], benchmark: &str) -> Option<f64> {
        let key: BTreeSet<String> = kgs.iter().map(|s| s.to_string()).collect();
        let c = self.combinations.iter().position(|k| *k == key)?;
        let b = self.benchmarks.iter().position(|x| x == benchmark)?;
        Some(self.cells[c][b])
    }

    /// Columns: `combination,<benchmark>...`; KG names within a combination are joined by `+`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("combination");
        for b in &self.benchmarks {
            let _ = write!(out, ",{b}");
        }
        out.push('\n');
        for (combo, row) in self.combinations.iter().zip(&self.cells) {
            out.push_str(&combo.iter().cloned().collect::<Vec<_>>().join("+"));
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// For every KG combination of `model`: its accuracy minus the best single-KG
/// accuracy of `baseline_family` among the combination's members, per benchmark.
pub fn relative_improvement(
    results: &BTreeMap<ResultKey, f64>,
    model: &str,
    baseline_family: &str,
) -> Result<ImprovementGrid> {
    let combinations: Vec<BTreeSet<String>> = results
        .keys()
        .filter(|k| k.model == model)
        .map(|k| k.kgs.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let benchmarks: Vec<String> = results
        .keys()
        .filter(|k| k.model == model)
        .map(|k| k.benchmark.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if combinations.is_empty() {
        return Err(Error::invalid(format!("no results for model `{model}`")));
    }
    let mut cells = Vec::with_capacity(combinations.len());
    for combo in &combinations {
        let mut row = Vec::with_capacity(benchmarks.len());
        for bench in &benchmarks {
            let key = ResultKey {
                model: model.into(),
                kgs: combo.clone(),
                benchmark: bench.clone(),
            };
            let acc = *results.get(&key).ok_or_else(|| {
                Error::invalid(format!("missing result for {model} on {} / {bench}", join(combo)))
            })?;
            let mut best = f64::NEG_INFINITY;
            for kg in combo {
                let base = ResultKey {
                    model: baseline_family.into(),
                    kgs: BTreeSet::from([kg.clone()]),
                    benchmark: bench.clone(),
                };
                let v = results.get(&base).ok_or_else(|| {
                    Error::invalid(format!("missing baseline {baseline_family} on {kg} / {bench}"))
                })?;
                best = best.max(*v);
            }
            row.push(acc - best);
        }
        cells.push(row);
    }
    Ok(ImprovementGrid {
        combinations,
        benchmarks,
        cells,
    })
}

fn join(kgs: &BTreeSet<String>) -> String {
    kgs.iter().cloned().collect::<Vec<_>>().join("+")
}
