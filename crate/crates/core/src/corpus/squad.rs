//! SQuAD v1.1 / v2.0 JSON reading and writing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Offset in characters (Unicode scalar values) into the passage.
    pub answer_start: usize,
}

/// One question over one passage in a single language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawExample {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub answers: Vec<Answer>,
    pub language: String,
    /// SQuAD 2.0 unanswerable question.
    pub is_impossible: bool,
}

impl RawExample {
    /// Checks that every answer's offset points at its text.
    pub fn validate(&self) -> Result<()> {
        for a in &self.answers {
            let found: String = self
                .passage
                .chars()
                .skip(a.answer_start)
                .take(a.text.chars().count())
                .collect();
            if found != a.text {
                return Err(Error::AnswerMismatch {
                    id: self.id.clone(),
                    reason: format!(
                        "answer_start {} points at {found:?}, expected {:?}",
                        a.answer_start, a.text
                    ),
                });
            }
        }
        Ok(())
    }

    /// Training additionally needs a gold answer unless the question is
    /// marked unanswerable.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.answers.is_empty() && !self.is_impossible {
            return Err(Error::AnswerMismatch {
                id: self.id.clone(),
                reason: "training example has no answer".into(),
            });
        }
        Ok(())
    }
}

pub fn parse_squad(path: impl AsRef<Path>, language: &str) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_squad_str(&text, &path.display().to_string(), language)
}

pub(crate) fn json_error(text: &str, label: &str, e: &serde_json::Error) -> Error {
    let offset = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    Error::JsonParse {
        path: label.to_string(),
        offset,
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses SQuAD JSON text. `label` names the source in error messages.
pub fn parse_squad_str(text: &str, label: &str, language: &str) -> Result<Vec<RawExample>> {
    let root: Value = serde_json::from_str(text).map_err(|e| json_error(text, label, &e))?;
    let schema = |field: &str, id: &str| Error::Schema {
        path: label.to_string(),
        field: field.to_string(),
        id: id.to_string(),
    };

    let data = root
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("data", "-"))?;
    let mut out = Vec::new();
    for article in data {
        let paragraphs = article
            .get("paragraphs")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("paragraphs", "-"))?;
        for para in paragraphs {
            let context = para
                .get("context")
                .and_then(Value::as_str)
                .ok_or_else(|| schema("context", "-"))?;
            let qas = para
                .get("qas")
                .and_then(Value::as_array)
                .ok_or_else(|| schema("qas", "-"))?;
            for qa in qas {
                let id = match qa.get("id") {
                    Some(Value::String(s)) => s.clone(),
                    Some(Value::Number(n)) => n.to_string(),
                    _ => return Err(schema("id", "-")),
                };
                let question = qa
                    .get("question")
                    .and_then(Value::as_str)
                    .ok_or_else(|| schema("question", &id))?;
                let is_impossible = qa
                    .get("is_impossible")
                    .and_then(Value::as_bool)
                    .unwrap_or(false);
                let raw_answers = match qa.get("answers") {
                    Some(Value::Array(a)) => a.as_slice(),
                    None if is_impossible => &[],
                    _ => return Err(schema("answers", &id)),
                };
                let mut answers = Vec::with_capacity(raw_answers.len());
                for a in raw_answers {
                    let text = a
                        .get("text")
                        .and_then(Value::as_str)
                        .ok_or_else(|| schema("answers.text", &id))?;
                    let start = a
                        .get("answer_start")
                        .and_then(Value::as_u64)
                        .ok_or_else(|| schema("answers.answer_start", &id))?;
                    answers.push(Answer {
                        text: text.to_string(),
                        answer_start: start as usize,
                    });
                }
                let ex = RawExample {
                    is_impossible: is_impossible || answers.is_empty(),
                    id,
                    passage: context.to_string(),
                    question: question.to_string(),
                    answers: if is_impossible { Vec::new() } else { answers },
                    language: language.to_string(),
                };
                ex.validate()?;
                out.push(ex);
            }
        }
    }
    Ok(out)
}

/// SQuAD JSON for `examples`. Consecutive examples over the same passage
/// share a paragraph.
pub fn to_squad_json(examples: &[RawExample]) -> Value {
    let mut paragraphs: Vec<Value> = Vec::new();
    let mut current: Option<(&str, Vec<Value>)> = None;
    for ex in examples {
        let mut qa = json!({
            "id": ex.id,
            "question": ex.question,
            "answers": ex.answers,
        });
        if ex.is_impossible {
            qa["is_impossible"] = Value::Bool(true);
        }
        match &mut current {
            Some((ctx, qas)) if *ctx == ex.passage => qas.push(qa),
            _ => {
                if let Some((ctx, qas)) = current.take() {
                    paragraphs.push(json!({ "context": ctx, "qas": qas }));
                }
                current = Some((&ex.passage, vec![qa]));
            }
        }
    }
    if let Some((ctx, qas)) = current {
        paragraphs.push(json!({ "context": ctx, "qas": qas }));
    }
    json!({
        "version": "1.1",
        "data": [{ "title": "", "paragraphs": paragraphs }],
    })
}

pub fn write_squad(path: impl AsRef<Path>, examples: &[RawExample]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&to_squad_json(examples))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Gold answer strings per question id, in file order. Unanswerable questions
/// get a single empty-string gold.
pub fn gold_answers(examples: &[RawExample]) -> Vec<(String, Vec<String>)> {
    examples
        .iter()
        .map(|ex| {
            let golds = if ex.answers.is_empty() {
                vec![String::new()]
            } else {
                ex.answers.iter().map(|a| a.text.clone()).collect()
            };
            (ex.id.clone(), golds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"version":"1.1","data":[{"title":"t","paragraphs":[
        {"context":"他是王","qas":[{"id":"q1","question":"谁","answers":[{"text":"王","answer_start":2}]}]}
    ]}]}"#;

    #[test]
    fn minimal_file() {
        let ex = parse_squad_str(ONE, "one.json", "zh").unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].id, "q1");
        assert_eq!(ex[0].answers[0].answer_start, 2);
        assert_eq!(ex[0].language, "zh");
        assert!(!ex[0].is_impossible);
    }

    #[test]
    fn bad_offset_names_the_id() {
        let bad = ONE.replace("\"answer_start\":2", "\"answer_start\":1");
        let err = parse_squad_str(&bad, "bad.json", "zh").unwrap_err();
        assert!(matches!(&err, Error::AnswerMismatch { id, .. } if id == "q1"), "{err}");
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let text = "{\"data\": [\n  {\"paragraphs\": ]}";
        match parse_squad_str(text, "m.json", "en").unwrap_err() {
            Error::JsonParse { offset, line, .. } => {
                assert_eq!(line, 2);
                assert_eq!(&text[offset..offset + 1], "]");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_question_names_field_and_id() {
        let bad = ONE.replace("\"question\":\"谁\",", "");
        match parse_squad_str(&bad, "x.json", "zh").unwrap_err() {
            Error::Schema { field, id, .. } => {
                assert_eq!(field, "question");
                assert_eq!(id, "q1");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn squad2_unanswerable() {
        let text = r#"{"data":[{"paragraphs":[{"context":"abc","qas":[
            {"id":"u","question":"?","answers":[],"plausible_answers":[{"text":"a","answer_start":0}],"is_impossible":true}
        ]}]}]}"#;
        let ex = parse_squad_str(text, "v2.json", "en").unwrap();
        assert!(ex[0].is_impossible);
        assert!(ex[0].answers.is_empty());
        assert!(ex[0].validate().is_ok());
        assert_eq!(gold_answers(&ex)[0].1, vec![String::new()]);
    }

    #[test]
    fn training_requires_answer() {
        let mut ex = parse_squad_str(ONE, "one.json", "zh").unwrap().remove(0);
        assert!(ex.validate_for_training().is_ok());
        ex.answers.clear();
        assert!(ex.validate_for_training().is_err());
    }
}
