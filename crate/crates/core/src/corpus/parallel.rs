//! Multilingual parallel corpora: target examples plus translated sources.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::squad::{json_error, Answer, RawExample};
use crate::error::{Error, Result};

/// A translated passage/question pair. Sources never carry answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceText {
    pub passage: String,
    pub question: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub target: RawExample,
    pub sources: BTreeMap<String, SourceText>,
}

impl ParallelExample {
    pub fn monolingual(target: RawExample) -> Self {
        ParallelExample {
            target,
            sources: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.target.id
    }

    /// Source language codes in lexicographic order.
    pub fn source_languages(&self) -> Vec<String> {
        self.sources.keys().cloned().collect()
    }
}

/// A translated record keyed by the target example's id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub id: String,
    pub passage: String,
    pub question: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    /// Sorted by example id.
    pub examples: Vec<ParallelExample>,
    /// `(id, lang)` pairs for which no translation was supplied.
    pub missing: Vec<(String, String)>,
}

/// Joins targets with per-language translations.
///
/// Every example carries exactly the languages that have a translation for
/// its id; gaps are listed in [`ParallelCorpus::missing`]. The output is
/// sorted by id, so it does not depend on input order.
pub fn build_parallel_corpus(
    targets: &[RawExample],
    translations: &BTreeMap<String, Vec<Translation>>,
) -> Result<ParallelCorpus> {
    let mut by_id: HashMap<&str, ParallelExample> = HashMap::with_capacity(targets.len());
    for t in targets {
        if by_id
            .insert(&t.id, ParallelExample::monolingual(t.clone()))
            .is_some()
        {
            return Err(Error::DuplicateId(t.id.clone()));
        }
    }

    for (lang, records) in translations {
        for rec in records {
            let ex = by_id
                .get_mut(rec.id.as_str())
                .ok_or_else(|| Error::OrphanTranslation(rec.id.clone()))?;
            if *lang == ex.target.language {
                return Err(Error::Contract(format!(
                    "translation of {} into its own target language {lang}",
                    rec.id
                )));
            }
            let text = SourceText {
                passage: rec.passage.clone(),
                question: rec.question.clone(),
            };
            if ex.sources.insert(lang.clone(), text).is_some() {
                return Err(Error::DuplicateTranslation {
                    id: rec.id.clone(),
                    lang: lang.clone(),
                });
            }
        }
    }

    let mut examples: Vec<ParallelExample> = by_id.into_values().collect();
    examples.sort_by(|a, b| a.target.id.cmp(&b.target.id));

    let mut missing = Vec::new();
    for ex in &examples {
        for lang in translations.keys() {
            if !ex.sources.contains_key(lang) {
                missing.push((ex.target.id.clone(), lang.clone()));
            }
        }
    }
    for (id, lang) in &missing {
        log::warn!("example {id} has no {lang} translation");
    }
    Ok(ParallelCorpus { examples, missing })
}

/// Union of source languages across a corpus, sorted.
pub fn corpus_languages(examples: &[ParallelExample]) -> Vec<String> {
    let set: BTreeSet<&String> = examples.iter().flat_map(|e| e.sources.keys()).collect();
    set.into_iter().cloned().collect()
}

#[derive(Serialize, Deserialize)]
struct TargetRecord {
    lang: String,
    passage: String,
    question: String,
    answers: Vec<Answer>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_impossible: bool,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    target: TargetRecord,
    sources: BTreeMap<String, SourceText>,
}

impl From<&ParallelExample> for CorpusLine {
    fn from(ex: &ParallelExample) -> Self {
        let t = &ex.target;
        CorpusLine {
            id: t.id.clone(),
            target: TargetRecord {
                lang: t.language.clone(),
                passage: t.passage.clone(),
                question: t.question.clone(),
                answers: t.answers.clone(),
                is_impossible: t.is_impossible,
            },
            sources: ex.sources.clone(),
        }
    }
}

impl From<CorpusLine> for ParallelExample {
    fn from(line: CorpusLine) -> Self {
        ParallelExample {
            target: RawExample {
                is_impossible: line.target.is_impossible || line.target.answers.is_empty(),
                id: line.id,
                passage: line.target.passage,
                question: line.target.question,
                answers: line.target.answers,
                language: line.target.lang,
            },
            sources: line.sources,
        }
    }
}

pub fn write_corpus_jsonl(path: impl AsRef<Path>, examples: &[ParallelExample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, &CorpusLine::from(ex))?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_corpus_jsonl(path: impl AsRef<Path>) -> Result<Vec<ParallelExample>> {
    let path = path.as_ref();
    let label = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine =
            serde_json::from_str(&line).map_err(|e| json_error(&line, &label, &e))?;
        let ex = ParallelExample::from(rec);
        ex.target.validate()?;
        if ex.sources.contains_key(&ex.target.language) {
            return Err(Error::Contract(format!(
                "example {} lists its target language as a source",
                ex.id()
            )));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Pre-translated records, one JSON object `{"id","passage","question"}` per line.
pub fn read_translations_jsonl(path: impl AsRef<Path>) -> Result<Vec<Translation>> {
    let path = path.as_ref();
    let label = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| json_error(l, &label, &e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(id: &str) -> RawExample {
        RawExample {
            id: id.into(),
            passage: "他是王".into(),
            question: "谁".into(),
            answers: vec![Answer {
                text: "王".into(),
                answer_start: 2,
            }],
            language: "zh".into(),
            is_impossible: false,
        }
    }

    fn tr(id: &str, p: &str) -> Translation {
        Translation {
            id: id.into(),
            passage: p.into(),
            question: "who".into(),
        }
    }

    #[test]
    fn full_translations_give_all_sources() {
        let targets = [target("a"), target("b")];
        let mut t = BTreeMap::new();
        t.insert("en".to_string(), vec![tr("a", "he is wang"), tr("b", "he is wang")]);
        t.insert("ja".to_string(), vec![tr("b", "彼は王"), tr("a", "彼は王")]);
        let c = build_parallel_corpus(&targets, &t).unwrap();
        assert_eq!(c.examples.len(), 2);
        for ex in &c.examples {
            assert_eq!(ex.source_languages(), ["en", "ja"]);
        }
        assert!(c.missing.is_empty());
    }

    #[test]
    fn empty_translations_are_monolingual() {
        let c = build_parallel_corpus(&[target("a"), target("b")], &BTreeMap::new()).unwrap();
        assert_eq!(c.examples.len(), 2);
        assert!(c.examples.iter().all(|e| e.sources.is_empty()));
    }

    #[test]
    fn orphan_translation_names_id() {
        let mut t = BTreeMap::new();
        t.insert("en".to_string(), vec![tr("zzz", "x")]);
        let err = build_parallel_corpus(&[target("a")], &t).unwrap_err();
        assert!(matches!(&err, Error::OrphanTranslation(id) if id == "zzz"));
        assert!(err.to_string().contains("zzz"));
    }

    #[test]
    fn duplicate_translation_rejected() {
        let mut t = BTreeMap::new();
        t.insert("en".to_string(), vec![tr("a", "x"), tr("a", "y")]);
        assert!(matches!(
            build_parallel_corpus(&[target("a")], &t),
            Err(Error::DuplicateTranslation { .. })
        ));
    }

    #[test]
    fn missing_languages_reported_not_dropped() {
        let mut t = BTreeMap::new();
        t.insert("en".to_string(), vec![tr("a", "x")]);
        let c = build_parallel_corpus(&[target("a"), target("b")], &t).unwrap();
        assert_eq!(c.examples.len(), 2);
        assert_eq!(c.missing, vec![("b".to_string(), "en".to_string())]);
    }

    #[test]
    fn target_language_cannot_be_a_source() {
        let mut t = BTreeMap::new();
        t.insert("zh".to_string(), vec![tr("a", "x")]);
        assert!(build_parallel_corpus(&[target("a")], &t).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = BTreeMap::new();
        t.insert("en".to_string(), vec![tr("a", "he is wang")]);
        let c = build_parallel_corpus(&[target("a")], &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus_jsonl(&p, &c.examples).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(r#"{"id":"a","target":{"lang":"zh","passage":"他是王""#));
        assert_eq!(read_corpus_jsonl(&p).unwrap(), c.examples);
    }
}
