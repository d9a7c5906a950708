//! Small synthetic trilingual corpus for desk-scale experiments.
//!
//! Passages are three clauses `<subject><relation><value>` in Chinese, e.g.
//! `王李在山石，张刘是花。...`; the question names one subject and relation
//! (`张刘是？`) and the answer is that clause's value. English and Japanese
//! sources come from fixed per-character lexicons, so every split shares one
//! small vocabulary.

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{pseudo_translate, Answer, Lexicon, ParallelExample, RawExample, SourceText};

pub const TARGET_LANG: &str = "zh";
pub const SOURCE_LANGS: [&str; 2] = ["en", "ja"];

const SUBJECT_CHARS: [char; 6] = ['王', '李', '张', '刘', '陈', '杨'];
const RELATIONS: [char; 4] = ['在', '是', '有', '叫'];
const VALUE_CHARS: [char; 8] = ['山', '河', '书', '花', '石', '云', '米', '茶'];
const CLAUSES: usize = 3;

const EN_PUNCT: [(&str, &str); 3] = [("，", ","), ("。", "."), ("？", "?")];
const JA_PUNCT: [(&str, &str); 3] = [("，", "、"), ("。", "。"), ("？", "？")];
const KANA: &str = "かきくけこさしすせそたちつてとなにぬ";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub sibling: usize,
    pub dev: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train: 32,
            sibling: 64,
            dev: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<ParallelExample>,
    /// Same generator, different examples; the pretraining corpus.
    pub sibling: Vec<ParallelExample>,
    pub dev: Vec<ParallelExample>,
    pub lexicons: BTreeMap<String, Lexicon>,
}

fn content_chars() -> impl Iterator<Item = char> {
    SUBJECT_CHARS.into_iter().chain(RELATIONS).chain(VALUE_CHARS)
}

/// Character-level lexicons from Chinese into each source language.
pub fn lexicons() -> BTreeMap<String, Lexicon> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut en = Lexicon::new();
    let mut ja = Lexicon::new();
    let kana: Vec<char> = KANA.chars().collect();
    for (i, c) in content_chars().enumerate() {
        let word = format!(
            "{}{}",
            CONSONANTS[i % CONSONANTS.len()] as char,
            VOWELS[i / CONSONANTS.len() % VOWELS.len()] as char
        );
        en.insert(c.to_string(), word);
        ja.insert(c.to_string(), kana[i].to_string());
    }
    for (from, to) in EN_PUNCT {
        en.insert(from, to);
    }
    for (from, to) in JA_PUNCT {
        ja.insert(from, to);
    }
    BTreeMap::from([("en".to_string(), en), ("ja".to_string(), ja)])
}

fn pick(rng: &mut ChaCha8Rng, pool: &[char], n: usize) -> String {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn raw_example(rng: &mut ChaCha8Rng, id: String) -> RawExample {
    let mut subjects: Vec<String> = Vec::with_capacity(CLAUSES);
    while subjects.len() < CLAUSES {
        let s = pick(rng, &SUBJECT_CHARS, 2);
        if !subjects.contains(&s) {
            subjects.push(s);
        }
    }
    let mut passage = String::new();
    let mut clauses = Vec::with_capacity(CLAUSES);
    for (k, subject) in subjects.iter().enumerate() {
        let relation = *RELATIONS.choose(rng).expect("non-empty");
        let len = rng.random_range(1..=3);
        let value = pick(rng, &VALUE_CHARS, len);
        passage.push_str(subject);
        passage.push(relation);
        let start = passage.chars().count();
        passage.push_str(&value);
        passage.push(if k + 1 == CLAUSES { '。' } else { '，' });
        clauses.push((subject.clone(), relation, value, start));
    }
    let (subject, relation, value, start) = clauses[rng.random_range(0..CLAUSES)].clone();
    RawExample {
        id,
        passage,
        question: format!("{subject}{relation}？"),
        answers: vec![Answer {
            text: value,
            answer_start: start,
        }],
        language: TARGET_LANG.to_string(),
        is_impossible: false,
    }
}

fn with_sources(raw: RawExample, lexicons: &BTreeMap<String, Lexicon>) -> ParallelExample {
    let mut ex = ParallelExample::monolingual(raw);
    for (lang, lex) in lexicons {
        let (passage, question) = pseudo_translate(&ex.target, lang, lex);
        ex.sources.insert(lang.clone(), SourceText { passage, question });
    }
    ex
}

/// Generates all three splits from one seeded stream; no passage-question
/// pair appears twice across splits.
pub fn generate(config: &SynthConfig) -> SynthCorpus {
    let lexicons = lexicons();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut split = |name: &str, n: usize| -> Vec<ParallelExample> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let raw = raw_example(&mut rng, format!("{name}-{:03}", out.len()));
            if seen.insert((raw.passage.clone(), raw.question.clone())) {
                out.push(with_sources(raw, &lexicons));
            }
        }
        out
    };
    let train = split("train", config.train);
    let sibling = split("sib", config.sibling);
    let dev = split("dev", config.dev);
    SynthCorpus {
        train,
        sibling,
        dev,
        lexicons,
    }
}

impl SynthCorpus {
    pub fn all(&self) -> impl Iterator<Item = &ParallelExample> {
        self.train.iter().chain(&self.sibling).chain(&self.dev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_tokens, AnswerStatus, TokenizedExample, Vocabulary};

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate(&SynthConfig::default());
        assert_eq!(a, generate(&SynthConfig::default()));
        assert_eq!((a.train.len(), a.sibling.len(), a.dev.len()), (32, 64, 16));
        let pairs: HashSet<_> = a
            .all()
            .map(|e| (e.target.passage.clone(), e.target.question.clone()))
            .collect();
        assert_eq!(pairs.len(), 112);
        assert_ne!(a, generate(&SynthConfig { seed: 1, ..SynthConfig::default() }));
    }

    #[test]
    fn answers_are_valid_and_map_to_tokens() {
        let c = generate(&SynthConfig::default());
        let all: Vec<_> = c.all().cloned().collect();
        let vocab = Vocabulary::build(corpus_tokens(&all), 1);
        assert!(vocab.len() <= 256, "{}", vocab.len());
        for ex in &all {
            ex.target.validate().unwrap();
            assert_eq!(ex.source_languages(), SOURCE_LANGS);
            let t = TokenizedExample::new(ex, &vocab, 64).unwrap();
            assert_eq!(t.target.answer_status, AnswerStatus::Mapped);
            assert_eq!(t.target.unknown_tokens, 0);
        }
    }

    #[test]
    fn lexicons_cover_every_token() {
        let c = generate(&SynthConfig::default());
        for ex in c.all() {
            for (lang, src) in &ex.sources {
                assert!(!src.passage.contains(&format!("{lang}_")), "{}", src.passage);
            }
        }
        let en = &c.train[0].sources["en"];
        assert!(en.passage.is_ascii());
        assert!(c.train[0].sources["ja"].passage.chars().all(|ch| KANA.contains(ch) || "、。".contains(ch)));
    }
}
