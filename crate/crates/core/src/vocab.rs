//! Whitespace-token vocabulary with fixed reserved ids.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{event_to_tokens, ScriptInstance};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const NULL: usize = 4;
pub const UNK: usize = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[NULL]", "[UNK]"];

/// Plain words always present after the reserved tokens. Manual prompts and
/// fixed label words are drawn from these.
pub const TEMPLATE_WORDS: [&str; 5] = ["the", "next", "event", "is", "then"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    hash: String,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Reserved tokens, template words, then the remaining `words` sorted.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> =
            RESERVED.iter().chain(TEMPLATE_WORDS.iter()).map(|s| s.to_string()).collect();
        let fixed: BTreeSet<String> = tokens.iter().cloned().collect();
        let extra: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !fixed.contains(w))
            .collect();
        tokens.extend(extra);
        Self::from_tokens(tokens).expect("constructed with reserved prefix")
    }

    pub fn from_corpus(instances: &[ScriptInstance]) -> Self {
        let words = instances
            .iter()
            .flat_map(|i| i.chain.iter().chain(&i.candidates))
            .flat_map(|e| event_to_tokens(e).map(str::to_owned));
        Self::build(words)
    }

    /// Uses `tokens` verbatim as the id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, name) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*name) {
                return Err(Error::Config(format!("vocabulary must hold {name} at id {id}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { hash: self.hash(), tokens: self.tokens.clone() };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let vocab = Self::from_tokens(file.tokens)?;
        if vocab.hash() != file.hash {
            return Err(Error::Config(format!("vocabulary file {} has a stale hash", path.display())));
        }
        Ok(vocab)
    }
}
