//! A pair of small synthetic KGs with disjoint entity vocabularies: an
//! event-style KG whose tails are fixed by (activity cluster, relation) and a
//! concept-style KG whose tails are fixed by (object cluster, relation).

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::kg_store::{write_triples, KgSource, Triple};

struct EventCluster {
    verbs: [&'static str; 2],
    objects: [&'static str; 5],
    /// Tails for xAttr, xIntent, xReact, xWant, oReact.
    tails: [&'static str; 5],
}

const EVENT_RELATIONS: [&str; 5] = ["xAttr", "xIntent", "xReact", "xWant", "oReact"];

const EVENT_CLUSTERS: [EventCluster; 6] = [
    EventCluster {
        verbs: ["bakes", "slices"],
        objects: ["bread", "pie", "cake", "muffins", "cookies"],
        tails: ["generous", "to feed friends", "proud", "share dessert", "hungry"],
    },
    EventCluster {
        verbs: ["repairs", "paints"],
        objects: ["fence", "roof", "shed", "gate", "porch"],
        tails: ["handy", "to fix things", "tired", "rest indoors", "impressed"],
    },
    EventCluster {
        verbs: ["sprints", "jogs"],
        objects: ["track", "trail", "hill", "stadium", "beach"],
        tails: ["athletic", "to get fit", "energized", "drink water", "motivated"],
    },
    EventCluster {
        verbs: ["studies", "reviews"],
        objects: ["chemistry", "algebra", "history", "grammar", "physics"],
        tails: ["diligent", "to pass exams", "prepared", "sleep early", "confident"],
    },
    EventCluster {
        verbs: ["loses", "misplaces"],
        objects: ["wallet", "keys", "passport", "phone", "ticket"],
        tails: ["careless", "to keep valuables", "worried", "search everywhere", "annoyed"],
    },
    EventCluster {
        verbs: ["adopts", "rescues"],
        objects: ["puppy", "kitten", "parrot", "rabbit", "hamster"],
        tails: ["caring", "to have company", "joyful", "buy pet food", "touched"],
    },
];

struct ConceptCluster {
    modifiers: [&'static str; 2],
    nouns: [&'static str; 5],
    /// Tails for IsA, PartOf, UsedFor, AtLocation, MadeOf.
    tails: [&'static str; 5],
}

const CONCEPT_RELATIONS: [&str; 5] = ["IsA", "PartOf", "UsedFor", "AtLocation", "MadeOf"];

const CONCEPT_CLUSTERS: [ConceptCluster; 6] = [
    ConceptCluster {
        modifiers: ["brass", "wooden"],
        nouns: ["trumpet", "flute", "cello", "oboe", "harp"],
        tails: ["instrument", "orchestra", "music", "concert hall", "metal"],
    },
    ConceptCluster {
        modifiers: ["red", "ripe"],
        nouns: ["apple", "plum", "cherry", "peach", "mango"],
        tails: ["fruit", "orchard", "snacking", "market stall", "pulp"],
    },
    ConceptCluster {
        modifiers: ["steel", "sharp"],
        nouns: ["chisel", "hammer", "wrench", "pliers", "saw"],
        tails: ["tool", "toolkit", "carpentry", "workshop", "iron"],
    },
    ConceptCluster {
        modifiers: ["silk", "cotton"],
        nouns: ["scarf", "shirt", "glove", "sock", "jacket"],
        tails: ["garment", "wardrobe", "warmth", "closet", "fabric"],
    },
    ConceptCluster {
        modifiers: ["granite", "marble"],
        nouns: ["statue", "column", "pillar", "fountain", "monument"],
        tails: ["sculpture", "temple", "decoration", "city square", "stone"],
    },
    ConceptCluster {
        modifiers: ["paper", "leather"],
        nouns: ["notebook", "journal", "ledger", "diary", "folder"],
        tails: ["stationery", "desk set", "writing", "office", "pulpwood"],
    },
];

pub const EVENT_KG: &str = "eventkg";
pub const CONCEPT_KG: &str = "conceptkg";

/// 300 event triples such as `(PersonX bakes the bread., xAttr, generous)`.
pub fn event_kg() -> KgSource {
    let mut triples = Vec::new();
    for c in &EVENT_CLUSTERS {
        for verb in c.verbs {
            for obj in c.objects {
                let head = format!("PersonX {verb} the {obj}.");
                for (rel, tail) in EVENT_RELATIONS.iter().zip(c.tails) {
                    triples.push(Triple::new(&head, rel, tail).expect("fixture triple"));
                }
            }
        }
    }
    KgSource::new(EVENT_KG, triples).expect("fixture KG")
}

/// 300 concept triples such as `(brass trumpet, IsA, instrument)`.
pub fn concept_kg() -> KgSource {
    let mut triples = Vec::new();
    for c in &CONCEPT_CLUSTERS {
        for m in c.modifiers {
            for noun in c.nouns {
                let head = format!("{m} {noun}");
                for (rel, tail) in CONCEPT_RELATIONS.iter().zip(c.tails) {
                    triples.push(Triple::new(&head, rel, tail).expect("fixture triple"));
                }
            }
        }
    }
    KgSource::new(CONCEPT_KG, triples).expect("fixture KG")
}

/// Writes both KGs as TSV files into `dir` and returns `(name, path)` pairs.
pub fn write_fixture(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::file(dir, e))?;
    let mut out = Vec::new();
    for kg in [event_kg(), concept_kg()] {
        let p = dir.join(format!("{}.tsv", kg.name()));
        write_triples(&p, kg.triples())?;
        out.push((kg.name().to_owned(), p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::kg_store::default_templates;
    use crate::tokenizer::Tokenizer;

    fn words(kg: &KgSource) -> BTreeSet<String> {
        let texts: Vec<String> = kg
            .triples()
            .iter()
            .flat_map(|t| [t.head.replace("PersonX", ""), t.tail.clone()])
            .collect();
        let tok = Tokenizer::with_default_mask(texts.iter().map(String::as_str));
        (5..tok.vocab_size() as u32)
            .map(|i| tok.token(i).to_owned())
            .filter(|w| !matches!(w.as_str(), "." | "the" | "to"))
            .collect()
    }

    #[test]
    fn sizes_and_registration() {
        let reg = default_templates();
        for kg in [event_kg(), concept_kg()] {
            assert_eq!(kg.len(), 300);
            kg.retain_registered(&reg).unwrap();
            assert!(kg.relation_set().len() == 5);
        }
    }

    #[test]
    fn entity_vocabularies_are_disjoint() {
        let a = words(&event_kg());
        let b = words(&concept_kg());
        assert!(a.is_disjoint(&b), "{:?}", a.intersection(&b).collect::<Vec<_>>());
    }

    #[test]
    fn writes_loadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_fixture(dir.path()).unwrap();
        let back = crate::kg_store::load_triples(&files[0].1, &files[0].0).unwrap();
        assert_eq!(back.triples(), event_kg().triples());
    }
}
