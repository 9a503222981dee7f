//! Lowercased word/punctuation tokenizer with a corpus-built vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg_store::DEFAULT_MASK_TOKEN;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Mask token as it appears in question text.
    mask_token: String,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from every word and punctuation mark in `texts`,
    /// sorted so the id assignment is independent of text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, mask_token: &str) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for piece in split_words(text, mask_token) {
                if let Piece::Word(w) = piece {
                    words.insert(w);
                }
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens, mask_token)
    }

    fn from_tokens(tokens: Vec<String>, mask_token: &str) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            mask_token: mask_token.to_owned(),
            tokens,
            index,
        }
    }

    pub fn with_default_mask<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::build(texts, DEFAULT_MASK_TOKEN)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask_token(&self) -> &str {
        &self.mask_token
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn is_special(id: u32) -> bool {
        matches!(id, PAD_ID | CLS_ID | SEP_ID)
    }

    /// Token ids of `text` without specials; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text, &self.mask_token)
            .into_iter()
            .map(|p| match p {
                Piece::Mask => MASK_ID,
                Piece::Word(w) => self.index.get(&w).copied().unwrap_or(UNK_ID),
            })
            .collect()
    }

    /// `[CLS] text [SEP]`
    pub fn encode_wrapped(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![CLS_ID];
        ids.extend(self.encode(text));
        ids.push(SEP_ID);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let raw: Tokenizer = serde_json::from_str(&text)?;
        if raw.tokens.len() < SPECIALS.len() || raw.tokens[..SPECIALS.len()] != SPECIALS.map(String::from) {
            return Err(Error::Config(format!("{}: vocabulary lacks the special tokens", path.display())));
        }
        Ok(Self::from_tokens(raw.tokens, &raw.mask_token))
    }
}

enum Piece {
    Mask,
    Word(String),
}

fn split_words(text: &str, mask_token: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    for (i, chunk) in text.split(mask_token).enumerate() {
        if i > 0 {
            out.push(Piece::Mask);
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_whitespace() {
                if !word.is_empty() {
                    out.push(Piece::Word(std::mem::take(&mut word)));
                }
            } else if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_ascii()) {
                if !word.is_empty() {
                    out.push(Piece::Word(std::mem::take(&mut word)));
                }
                out.push(Piece::Word(c.to_lowercase().collect()));
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(Piece::Word(word));
        }
    }
    out
}
