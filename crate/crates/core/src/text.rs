//! Tokenizer and closed vocabulary shared by the model, metrics and the
//! annotation-merge rule.

use std::collections::{BTreeSet, HashMap};

/// Lowercases and splits on anything that is not alphanumeric.
///
/// Punctuation never survives as a token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Marks the start of a speaker turn in the serialized dialogue.
pub const SPK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<spk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every distinct token in sorted order.
    pub fn build<'a, I>(tokens: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let distinct: BTreeSet<&str> = tokens.into_iter().collect();
        let list = SPECIALS
            .iter()
            .copied()
            .chain(distinct.into_iter().filter(|t| !SPECIALS.contains(t)))
            .map(String::from)
            .collect();
        Vocab::from_tokens(list)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    /// Space-joined tokens, skipping padding and sentinels.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | SPK))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
