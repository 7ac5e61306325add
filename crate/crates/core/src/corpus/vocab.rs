use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::DialogueSample;
use crate::error::{MorpheusError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Begin-of-response marker.
pub const BOR_ID: usize = 2;
/// End-of-response marker.
pub const EOR_ID: usize = 3;
/// Marks a turn spoken by someone other than the responder.
pub const SPEAKER_A_ID: usize = 4;
/// Marks a turn spoken by the responder.
pub const SPEAKER_B_ID: usize = 5;

pub const RESERVED: [&str; 6] = ["<pad>", "<unk>", "<bor>", "<eor>", "<spk_a>", "<spk_b>"];

/// Lowercased word tokens. Punctuation characters other than the apostrophe
/// become tokens of their own.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() && ch != '\'' {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// Word-level vocabulary with six fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Default for Vocab {
    /// A vocabulary holding only the reserved entries; it cannot tokenize.
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds from explicit non-reserved tokens in id order. Duplicates and
    /// reserved names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || token_to_id.contains_key(&tok) {
                continue;
            }
            token_to_id.insert(tok.clone(), id_to_token.len());
            id_to_token.push(tok);
        }
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    /// Collects every word in personas, histories and responses. Ids are
    /// assigned by descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[DialogueSample], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut add = |text: &str| {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        };
        for s in corpus {
            for p in &s.persona_sentences {
                add(p);
            }
            for t in &s.history {
                add(&t.utterance);
            }
            add(&s.response);
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Reads a vocabulary file: one token per line, line `i` gets id `6 + i`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MorpheusError::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        let vocab = Self::from_tokens(lines.iter().copied());
        if vocab.len() != RESERVED.len() + lines.len() {
            return Err(MorpheusError::Format(format!(
                "{}: vocabulary lines must be unique, non-empty and not reserved",
                path.display()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for tok in &self.id_to_token[RESERVED.len()..] {
            text.push_str(tok);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| MorpheusError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED.len()..]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(MorpheusError::InvalidArgument(
                "vocabulary has not been built".into(),
            ));
        }
        Ok(words(text).iter().map(|w| self.id(w)).collect())
    }

    /// Joins token strings with single spaces. Padding, response markers and
    /// speaker markers are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id == UNK_ID || id >= RESERVED.len())
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK_ID]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
