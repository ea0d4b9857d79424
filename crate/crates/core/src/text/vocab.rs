use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{NUM_SPECIAL, SPECIAL_TOKENS, UNK};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Dense token ↔ id mapping. Ids `0..5` are the special tokens in the order
/// BOS, SEP, MASK, PAD, UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Keeps the `max_size − 5` most frequent tokens of `corpus`, ties broken
/// lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    if max_size <= NUM_SPECIAL {
        return Err(Error::invalid(format!(
            "max_size must exceed {NUM_SPECIAL}, got {max_size}"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for tok in tokenize(line.as_ref()) {
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIAL);
    Vocabulary::from_tokens(
        SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect(),
    )
}

impl Vocabulary {
    /// Builds a vocabulary from an id-ordered token list, which must start
    /// with the five special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL
            || tokens[..NUM_SPECIAL]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::invalid(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps ids back to tokens, skipping ids outside the vocabulary.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().filter_map(|&id| self.token(id)).collect()
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}
