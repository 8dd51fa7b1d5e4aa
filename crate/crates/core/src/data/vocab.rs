use std::collections::{BTreeMap, HashMap};

use crate::error::{invalid, Result};

pub const STOP: usize = 0;
pub const OOV: usize = 1;
pub const STOP_TOKEN: &str = "<stop>";
pub const OOV_TOKEN: &str = "<oov>";

/// Token/index map with reserved STOP (0) and OOV (1) entries. Regular
/// tokens are ordered by descending count, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    min_count: usize,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a, I, C>(captions: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = &'a String>,
    {
        if min_count == 0 {
            return Err(invalid("min_count must be at least 1"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for cap in captions {
            for tok in cap {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = [STOP_TOKEN, OOV_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    /// Rebuilds from an index-ordered token list (e.g. a checkpoint manifest).
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            min_count,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .filter(|&i| i > OOV)
            .unwrap_or(OOV)
    }

    pub fn token(&self, index: usize) -> &str {
        self.tokens
            .get(index)
            .map(String::as_str)
            .unwrap_or(OOV_TOKEN)
    }

    /// Token indices with STOP appended.
    pub fn encode<S: AsRef<str>>(&self, caption: &[S]) -> Vec<usize> {
        caption
            .iter()
            .map(|t| self.index_of(t.as_ref()))
            .chain(std::iter::once(STOP))
            .collect()
    }

    /// Tokens up to (excluding) the first STOP.
    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .take_while(|&&i| i != STOP)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}
