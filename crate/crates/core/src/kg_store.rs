//! Knowledge-graph triples and the relation template registry that turns a
//! `(head, relation)` pair into a question stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self> {
        let (head, relation, tail) = (head.trim(), relation.trim(), tail.trim());
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            return Err(Error::invalid("triple fields must be non-empty"));
        }
        Ok(Self {
            head: head.to_owned(),
            relation: relation.to_owned(),
            tail: tail.to_owned(),
        })
    }
}

/// A named knowledge graph: its triples in file order plus the source line of each.
#[derive(Clone, Debug, PartialEq)]
pub struct KgSource {
    name: String,
    triples: Vec<Triple>,
    lines: Vec<usize>,
    relations: BTreeSet<String>,
}

impl KgSource {
    pub fn new(name: impl Into<String>, triples: Vec<Triple>) -> Result<Self> {
        let lines = (1..=triples.len()).collect();
        Self::with_lines(name.into(), triples, lines)
    }

    fn with_lines(name: String, triples: Vec<Triple>, lines: Vec<usize>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::EmptySource(name));
        }
        let relations = triples.iter().map(|t| t.relation.clone()).collect();
        Ok(Self {
            name,
            triples,
            lines,
            relations,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// 1-based source line of triple `i`.
    pub fn line_of(&self, i: usize) -> usize {
        self.lines[i]
    }

    pub fn relation_set(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Drops triples whose relation has no template. This is the only way to
    /// skip unregistered relations; rendering one is otherwise an error.
    pub fn retain_registered(&self, registry: &TemplateRegistry) -> Result<KgSource> {
        let (triples, lines): (Vec<_>, Vec<_>) = self
            .triples
            .iter()
            .zip(&self.lines)
            .filter(|(t, _)| registry.get(&t.relation).is_some())
            .map(|(t, l)| (t.clone(), *l))
            .unzip();
        Self::with_lines(self.name.clone(), triples, lines)
    }
}

/// Reads a UTF-8 TSV file of `head\trelation\ttail` lines. Blank lines are skipped.
pub fn load_triples(path: impl AsRef<Path>, kg_name: &str) -> Result<KgSource> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_triples(&text, path, kg_name)
}

pub fn parse_triples(text: &str, path: &Path, kg_name: &str) -> Result<KgSource> {
    let mut triples = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let triple = Triple::new(fields[0], fields[1], fields[2]).map_err(|e| parse_err(e.to_string()))?;
        triples.push(triple);
        lines.push(i + 1);
    }
    KgSource::with_lines(kg_name.to_owned(), triples, lines)
}

pub fn write_triples(path: impl AsRef<Path>, triples: &[Triple]) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateStyle {
    /// Appended after the head sentence; no mask slot.
    Event,
    /// Follows the head after a space and contains exactly one mask slot.
    Concept,
}

/// Relation → prefix patterns, the mask token, and the pool of person names
/// substituted for `PersonX`/`PersonY`/`PersonZ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    pub entries: BTreeMap<String, String>,
    pub mask_token: String,
    pub name_pool: Vec<String>,
}

const PERSON_SLOTS: [&str; 3] = ["PersonX", "PersonY", "PersonZ"];

const DEFAULT_PREFIXES: [(&str, &str); 23] = [
    ("xAttr", ". PersonX is seen as"),
    ("xIntent", ". Before, PersonX wanted"),
    ("xNeed", ". Before, PersonX needed to"),
    ("xReact", ". As a result, PersonX felt"),
    ("xWant", ". As a result, PersonX wanted to"),
    ("xEffect", ". PersonX then"),
    ("oReact", ". As a result, others felt"),
    ("oWant", ". As a result, others wanted to"),
    ("oEffect", ". Others then"),
    ("Causes", "can cause [MASK]"),
    ("UsedFor", "can be used for [MASK]"),
    ("CapableOf", "is capable of [MASK]"),
    ("CausesDesire", "causes desire for [MASK]"),
    ("IsA", "is a [MASK]"),
    ("SymbolOf", "is a symbol of [MASK]"),
    ("MadeOf", "can be made of [MASK]"),
    ("LocatedNear", "is often located near [MASK]"),
    ("Desires", "desires [MASK]"),
    ("AtLocation", "can be found at [MASK]"),
    ("HasProperty", "has property [MASK]"),
    ("PartOf", "is part of [MASK]"),
    ("HasFirstSubevent", "starts by [MASK]"),
    ("HasLastSubevent", "ends by [MASK]"),
];

const DEFAULT_NAMES: [&str; 24] = [
    "Dana", "Alex", "Riley", "Jordan", "Casey", "Morgan", "Taylor", "Jamie", "Avery", "Quinn",
    "Robin", "Skyler", "Reese", "Drew", "Kendall", "Parker", "Sage", "Rowan", "Emerson", "Hayden",
    "Logan", "Peyton", "Cameron", "Finley",
];

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

/// The 23 relation prefixes used for synthetic QA, with `[MASK]` as the mask token.
pub fn default_templates() -> TemplateRegistry {
    TemplateRegistry {
        entries: DEFAULT_PREFIXES
            .iter()
            .map(|(r, p)| (r.to_string(), p.to_string()))
            .collect(),
        mask_token: DEFAULT_MASK_TOKEN.to_owned(),
        name_pool: DEFAULT_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

impl TemplateRegistry {
    pub fn get(&self, relation: &str) -> Option<&str> {
        self.entries.get(relation).map(String::as_str)
    }

    pub fn style_of(&self, prefix: &str) -> TemplateStyle {
        if prefix.contains(&self.mask_token) {
            TemplateStyle::Concept
        } else {
            TemplateStyle::Event
        }
    }

    /// Checks every entry has a well-formed shape and the name pool is usable.
    pub fn validate(&self) -> Result<()> {
        if self.mask_token.trim().is_empty() {
            return Err(Error::Config("mask token must be non-empty".into()));
        }
        for (rel, prefix) in &self.entries {
            if prefix.trim().is_empty() {
                return Err(Error::Config(format!("empty prefix for relation `{rel}`")));
            }
            let slots = prefix.matches(&self.mask_token).count();
            if slots > 1 {
                return Err(Error::Config(format!(
                    "prefix for `{rel}` has {slots} mask slots, expected at most one"
                )));
            }
        }
        let distinct: BTreeSet<&String> = self.name_pool.iter().collect();
        if distinct.len() != self.name_pool.len() {
            return Err(Error::Config("name pool contains duplicates".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let reg: Self = serde_json::from_str(text)?;
        reg.validate()?;
        Ok(reg)
    }

    /// Renders the question stem for `triple`. The tail never appears in the output.
    ///
    /// Event-style: the head (trailing period dropped) followed by the prefix, with
    /// `PersonX`/`PersonY`/`PersonZ` replaced by distinct names drawn from the pool.
    /// Concept-style: `head + " " + prefix`.
    pub fn render_question<R: Rng + ?Sized>(&self, triple: &Triple, rng: &mut R) -> Result<String> {
        let prefix = self
            .get(&triple.relation)
            .ok_or_else(|| Error::UnknownRelation(triple.relation.clone()))?;
        match self.style_of(prefix) {
            TemplateStyle::Concept => Ok(format!("{} {}", triple.head, prefix)),
            TemplateStyle::Event => {
                let head = triple.head.trim_end();
                let head = head.strip_suffix('.').unwrap_or(head).trim_end();
                let text = format!("{head}{prefix}");
                self.substitute_names(&text, rng)
            }
        }
    }

    fn substitute_names<R: Rng + ?Sized>(&self, text: &str, rng: &mut R) -> Result<String> {
        let used: Vec<&str> = PERSON_SLOTS.iter().copied().filter(|s| text.contains(s)).collect();
        if used.is_empty() {
            return Ok(text.to_owned());
        }
        if used.len() > self.name_pool.len() {
            return Err(Error::Config(format!(
                "name pool has {} names but {} person slots need filling",
                self.name_pool.len(),
                used.len()
            )));
        }
        let picks = index::sample(rng, self.name_pool.len(), used.len());
        let mut out = text.to_owned();
        for (slot, pick) in used.iter().zip(picks.iter()) {
            out = out.replace(slot, &self.name_pool[pick]);
        }
        Ok(out)
    }
}

/// Free-function form of [`TemplateRegistry::render_question`].
pub fn render_question<R: Rng + ?Sized>(triple: &Triple, registry: &TemplateRegistry, rng: &mut R) -> Result<String> {
    registry.render_question(triple, rng)
}
