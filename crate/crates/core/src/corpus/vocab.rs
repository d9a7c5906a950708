use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Token vocabulary shared by every language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from a token stream. Tokens seen at least `min_freq` times get
    /// ids after the reserved ones, in lexicographic order.
    pub fn build<I, S>(tokens: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.as_ref().to_string()).or_default() += 1;
        }
        let kept = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .map(|(t, _)| t);
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(kept).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(["b", "a", "b"], 1);
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(UNK), UNK_ID);
        assert_eq!(v.id(CLS), CLS_ID);
        assert_eq!(v.id(SEP), SEP_ID);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn min_freq_cutoff() {
        let v = Vocabulary::build(["x", "y", "y"], 2);
        assert!(!v.contains("x"));
        assert!(v.contains("y"));
    }

    #[test]
    fn ids_are_bijective() {
        let v = Vocabulary::build(["北", "京", "north", "capital", "北"], 1);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
    }

    #[test]
    fn serde_as_token_list() {
        let v = Vocabulary::build(["q", "p"], 1);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["[PAD]","[UNK]","[CLS]","[SEP]","p","q"]"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
