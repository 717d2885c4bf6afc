use std::collections::{BTreeSet, HashMap};

pub const CLS_TOKEN: &str = "[CLS]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS: u32 = 0;
pub const UNK: u32 = 1;

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Frozen token table. Index 0 is the CLS token, 1 the unknown bucket, the
/// rest are words in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let tokens: Vec<String> = [CLS_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(words)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.get(w).unwrap_or(UNK))
            .collect()
    }
}
