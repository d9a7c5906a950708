//! Deterministic lexicon-driven pseudo-translation, an offline stand-in for
//! machine translation.

use std::collections::BTreeMap;
use std::path::Path;

use super::parallel::Translation;
use super::squad::RawExample;
use super::tokenize::{join_tokens, tokenize};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    map: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, from: impl Into<String>, to: impl Into<String>) {
        self.map.insert(from.into(), to.into());
    }

    pub fn get(&self, token: &str) -> Option<&str> {
        self.map.get(token).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Two tab-separated columns per line: source token, translated token.
    /// Blank lines are skipped; a later line overrides an earlier one.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) if !a.is_empty() => lex.insert(a, b),
                _ => {
                    return Err(Error::Contract(format!(
                        "lexicon line {} is not two tab-separated columns: {line:?}",
                        n + 1
                    )))
                }
            }
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    pub fn to_tsv(&self) -> String {
        self.map.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }
}

/// Maps `text` token by token. Tokens missing from the lexicon pass through
/// as `{lang}_{token}`.
pub fn translate_text(text: &str, lang: &str, lexicon: &Lexicon) -> String {
    let mapped: Vec<String> = tokenize(text)
        .into_iter()
        .map(|t| match lexicon.get(&t) {
            Some(m) => m.to_string(),
            None => format!("{lang}_{t}"),
        })
        .collect();
    join_tokens(&mapped)
}

/// `(passage, question)` of `example` rendered into `lang`.
pub fn pseudo_translate(example: &RawExample, lang: &str, lexicon: &Lexicon) -> (String, String) {
    (
        translate_text(&example.passage, lang, lexicon),
        translate_text(&example.question, lang, lexicon),
    )
}

pub fn pseudo_translate_all(examples: &[RawExample], lang: &str, lexicon: &Lexicon) -> Vec<Translation> {
    examples
        .iter()
        .map(|ex| {
            let (passage, question) = pseudo_translate(ex, lang, lexicon);
            Translation {
                id: ex.id.clone(),
                passage,
                question,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(passage: &str) -> RawExample {
        RawExample {
            id: "x".into(),
            passage: passage.into(),
            question: "北".into(),
            answers: vec![],
            language: "zh".into(),
            is_impossible: true,
        }
    }

    #[test]
    fn rule_application() {
        let mut lex = Lexicon::new();
        lex.insert("北", "north");
        lex.insert("京", "capital");
        let (p, q) = pseudo_translate(&example("北京"), "en", &lex);
        assert_eq!(p, "north capital");
        assert_eq!(q, "north");
    }

    #[test]
    fn identity_lexicon_preserves_tokens() {
        let text = "他是王，new york";
        let mut lex = Lexicon::new();
        for t in tokenize(text) {
            lex.insert(t.clone(), t);
        }
        let (p, _) = pseudo_translate(&example(text), "en", &lex);
        assert_eq!(tokenize(&p), tokenize(text));
    }

    #[test]
    fn unmapped_tokens_get_language_tag() {
        assert_eq!(translate_text("hello world", "ja", &Lexicon::new()), "ja_hello ja_world");
    }

    #[test]
    fn deterministic() {
        let mut lex = Lexicon::new();
        lex.insert("北", "north");
        let a = pseudo_translate(&example("北京大学"), "en", &lex);
        let b = pseudo_translate(&example("北京大学"), "en", &lex);
        assert_eq!(a, b);
    }

    #[test]
    fn tsv_parsing() {
        let lex = Lexicon::parse_tsv("北\tnorth\n\n京\tcapital\n").unwrap();
        assert_eq!(lex.get("京"), Some("capital"));
        assert_eq!(Lexicon::parse_tsv(&lex.to_tsv()).unwrap(), lex);
        assert!(Lexicon::parse_tsv("only-one-column\n").is_err());
        assert!(Lexicon::parse_tsv("a\tb\tc\n").is_err());
    }
}
