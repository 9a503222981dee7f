//! Synthetic supervision built from KG triples: per-KG multiple-choice QA,
//! the KG-classification set, and the balanced fusion mixture.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg_store::{KgSource, TemplateRegistry, DEFAULT_MASK_TOKEN};

pub const MIXTURE_TAG: &str = "mixture";
const DISTRACTOR_RETRY_CAP: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub label: usize,
    pub kg: String,
}

impl QaSample {
    pub fn gold(&self) -> &str {
        &self.options[self.label]
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::invalid(format!("sample {}: needs at least 2 options", self.id)));
        }
        if self.label >= self.options.len() {
            return Err(Error::invalid(format!(
                "sample {}: label {} out of range for {} options",
                self.id,
                self.label,
                self.options.len()
            )));
        }
        let gold = self.gold();
        if self
            .options
            .iter()
            .enumerate()
            .any(|(j, o)| j != self.label && o == gold)
        {
            return Err(Error::invalid(format!("sample {}: a distractor equals the gold answer", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaDataset {
    pub kg: String,
    pub samples: Vec<QaSample>,
}

impl QaDataset {
    pub fn new(kg: impl Into<String>, samples: Vec<QaSample>) -> Result<Self> {
        let ds = Self { kg: kg.into(), samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_mixture(&self) -> bool {
        self.kg == MIXTURE_TAG
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(())
    }

    /// Sample counts keyed by source KG.
    pub fn kg_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.kg.clone()).or_insert(0) += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgcSample {
    pub id: String,
    pub statement: String,
    pub kg_label: usize,
    pub kg: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub per_kg_count: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaOptions {
    pub option_count: usize,
    /// Draw distractors only from triples sharing the gold triple's relation.
    pub same_relation: bool,
}

impl Default for QaOptions {
    fn default() -> Self {
        Self {
            option_count: 3,
            same_relation: false,
        }
    }
}

/// One QA sample per triple: the rendered question, the gold tail and `m - 1`
/// distinct distractor tails from other triples, in shuffled order.
pub fn generate_qa<R: Rng + ?Sized>(
    source: &KgSource,
    registry: &TemplateRegistry,
    m: usize,
    rng: &mut R,
) -> Result<QaDataset> {
    generate_qa_with(
        source,
        registry,
        QaOptions {
            option_count: m,
            same_relation: false,
        },
        rng,
    )
}

pub fn generate_qa_with<R: Rng + ?Sized>(
    source: &KgSource,
    registry: &TemplateRegistry,
    opts: QaOptions,
    rng: &mut R,
) -> Result<QaDataset> {
    let m = opts.option_count;
    if m < 2 {
        return Err(Error::invalid("option count must be at least 2"));
    }
    let triples = source.triples();
    let distinct: BTreeSet<&str> = triples.iter().map(|t| t.tail.as_str()).collect();
    if distinct.len() < m {
        return Err(Error::invalid(format!(
            "KG `{}` has {} distinct tails, fewer than {m} options",
            source.name(),
            distinct.len()
        )));
    }
    let by_relation: BTreeMap<&str, Vec<usize>> = if opts.same_relation {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in triples.iter().enumerate() {
            map.entry(t.relation.as_str()).or_default().push(i);
        }
        map
    } else {
        BTreeMap::new()
    };

    let mut samples = Vec::with_capacity(triples.len());
    for (i, triple) in triples.iter().enumerate() {
        let question = registry.render_question(triple, rng)?;
        let mut options = vec![triple.tail.clone()];
        let mut tries = 0;
        while options.len() < m {
            if tries == DISTRACTOR_RETRY_CAP {
                return Err(Error::invalid(format!(
                    "KG `{}` line {}: could not draw {} distinct distractors",
                    source.name(),
                    source.line_of(i),
                    m - 1
                )));
            }
            tries += 1;
            let j = if opts.same_relation {
                let pool = &by_relation[triple.relation.as_str()];
                pool[rng.random_range(0..pool.len())]
            } else {
                rng.random_range(0..triples.len())
            };
            if j == i {
                continue;
            }
            let cand = &triples[j].tail;
            if options.iter().any(|o| o == cand) {
                continue;
            }
            options.push(cand.clone());
        }
        options.shuffle(rng);
        let label = options
            .iter()
            .position(|o| *o == triple.tail)
            .expect("gold tail present");
        samples.push(QaSample {
            id: format!("{}-{:06}", source.name(), i),
            question,
            options,
            label,
            kg: source.name().to_owned(),
        });
    }
    QaDataset::new(source.name(), samples)
}

/// Fills the question with an answer: the mask slot is replaced when present,
/// otherwise the answer is appended after a single space.
pub fn fill_answer(question: &str, answer: &str, mask_token: &str) -> String {
    if question.contains(mask_token) {
        question.replacen(mask_token, answer, 1)
    } else {
        format!("{} {}", question.trim_end(), answer)
    }
}

/// A question with the gold answer filled in, closed with a period.
pub fn statement(question: &str, answer: &str, mask_token: &str) -> String {
    let mut s = fill_answer(question, answer, mask_token);
    if !s.ends_with('.') {
        s.push('.');
    }
    s
}

/// KG-classification samples from the per-KG QA sets, labelled by dataset order.
pub fn derive_kgc(datasets: &[QaDataset]) -> Result<Vec<KgcSample>> {
    derive_kgc_with_mask(datasets, DEFAULT_MASK_TOKEN)
}

pub fn derive_kgc_with_mask(datasets: &[QaDataset], mask_token: &str) -> Result<Vec<KgcSample>> {
    let mut tags = HashSet::new();
    for ds in datasets {
        if ds.is_mixture() {
            return Err(Error::invalid("KG classification needs per-KG datasets, got a mixture"));
        }
        if !tags.insert(ds.kg.as_str()) {
            return Err(Error::invalid(format!("duplicate KG tag `{}`", ds.kg)));
        }
    }
    let mut out = Vec::with_capacity(datasets.iter().map(QaDataset::len).sum());
    for (k, ds) in datasets.iter().enumerate() {
        for s in &ds.samples {
            out.push(KgcSample {
                id: s.id.clone(),
                statement: statement(&s.question, s.gold(), mask_token),
                kg_label: k,
                kg: ds.kg.clone(),
            });
        }
    }
    Ok(out)
}

/// Draws `per_kg_count` samples without replacement from each dataset (all of
/// it when smaller), concatenates and shuffles them.
pub fn build_fusion_mixture(datasets: &[QaDataset], spec: MixtureSpec) -> Result<QaDataset> {
    if spec.per_kg_count == 0 {
        return Err(Error::invalid("mixture per_kg_count must be at least 1"));
    }
    let mut rng = crate::seed::rng(spec.seed);
    let mut samples = Vec::new();
    for ds in datasets {
        let take = spec.per_kg_count.min(ds.len());
        let mut picked = index::sample(&mut rng, ds.len(), take).into_vec();
        picked.sort_unstable();
        samples.extend(picked.into_iter().map(|i| ds.samples[i].clone()));
    }
    samples.shuffle(&mut rng);
    QaDataset::new(MIXTURE_TAG, samples)
}

/// Deterministic train/validation partition. The validation part gets
/// `floor(n * valid_fraction)` samples, capped so at least one sample trains.
/// Both parts keep the original sample order.
pub fn split<R: Rng + ?Sized>(
    dataset: &QaDataset,
    valid_fraction: f64,
    rng: &mut R,
) -> Result<(QaDataset, QaDataset)> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "valid fraction {valid_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = dataset.len();
    let n_valid = ((n as f64 * valid_fraction).floor() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut valid_idx: Vec<usize> = order[..n_valid].to_vec();
    let mut train_idx: Vec<usize> = order[n_valid..].to_vec();
    valid_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    Ok((
        QaDataset {
            kg: dataset.kg.clone(),
            samples: pick(&train_idx),
        },
        QaDataset {
            kg: dataset.kg.clone(),
            samples: pick(&valid_idx),
        },
    ))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    crate::fsutil::write_atomic(path, out.as_bytes())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_qa_jsonl(path: impl AsRef<Path>, dataset: &QaDataset) -> Result<()> {
    write_jsonl(path.as_ref(), &dataset.samples)
}

/// Reads a QA JSONL file, validating each sample. The dataset tag is the
/// samples' shared KG, or `mixture` when they span several.
pub fn read_qa_jsonl(path: impl AsRef<Path>) -> Result<QaDataset> {
    let path = path.as_ref();
    let samples: Vec<QaSample> = read_jsonl(path)?;
    let mut ids = HashSet::new();
    for (i, s) in samples.iter().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        s.validate().map_err(|e| err(e.to_string()))?;
        if !ids.insert(s.id.clone()) {
            return Err(err(format!("duplicate sample id `{}`", s.id)));
        }
    }
    let kgs: BTreeSet<&str> = samples.iter().map(|s| s.kg.as_str()).collect();
    let kg = if kgs.len() == 1 {
        kgs.into_iter().next().unwrap().to_owned()
    } else {
        MIXTURE_TAG.to_owned()
    };
    Ok(QaDataset { kg, samples })
}

pub fn write_kgc_jsonl(path: impl AsRef<Path>, samples: &[KgcSample]) -> Result<()> {
    write_jsonl(path.as_ref(), samples)
}

pub fn read_kgc_jsonl(path: impl AsRef<Path>) -> Result<Vec<KgcSample>> {
    read_jsonl(path.as_ref())
}

/// Per-KG train/validation counts rendered as a plain-text table with a total row.
pub fn stats_table(rows: &[(String, usize, usize)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>10}", "KG", "Train", "Validation", "Total");
    let (mut tt, mut tv) = (0, 0);
    for (kg, train, valid) in rows {
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>10}", kg, train, valid, train + valid);
        tt += train;
        tv += valid;
    }
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>10}", "Whole", tt, tv, tt + tv);
    out
}
