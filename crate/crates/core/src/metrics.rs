//! F1 and exact-match scoring of extracted answers.
//!
//! Text is compared as a sequence of units: one unit per CJK character, one
//! per Latin word. Case, punctuation, whitespace and English articles are
//! ignored. F1 is the bag-of-units overlap, max over the gold answers.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::is_cjk;
use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize(text: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, units: &mut Vec<String>| {
        if !word.is_empty() {
            if !ARTICLES.contains(&word.as_str()) {
                units.push(std::mem::take(word));
            }
            word.clear();
        }
    };
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_cjk(c) {
            flush(&mut word, &mut units);
            units.push(c.to_string());
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut units);
        }
    }
    flush(&mut word, &mut units);
    units
}

fn bag(units: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for u in units {
        *m.entry(u.as_str()).or_default() += 1;
    }
    m
}

/// Bag-of-units F1 in `[0, 1]`; two empty texts score 1.
pub fn f1_score(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let gb = bag(&g);
    let common: usize = bag(&p)
        .iter()
        .map(|(u, c)| (*c).min(gb.get(u).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    pub f1: f64,
    pub em: f64,
    pub prediction: Option<String>,
    pub golds: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentage, rounded to two decimals.
    pub f1: f64,
    /// Percentage, rounded to two decimals.
    pub em: f64,
    pub total: usize,
    pub missing: usize,
    pub questions: Vec<QuestionScore>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl EvalReport {
    /// Unrounded corpus F1 percentage.
    pub fn f1_exact(&self) -> f64 {
        mean(self.questions.iter().map(|q| q.f1)) * 100.0
    }

    pub fn em_exact(&self) -> f64 {
        mean(self.questions.iter().map(|q| q.em)) * 100.0
    }

    /// `F1 <v>\nEM <v>\n`
    pub fn summary(&self) -> String {
        format!("F1 {:.2}\nEM {:.2}\n", self.f1, self.em)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores `predictions` against `golds` (id with its gold answers, in order).
/// Questions without a prediction score zero.
pub fn evaluate(predictions: &HashMap<String, String>, golds: &[(String, Vec<String>)]) -> Result<EvalReport> {
    let mut seen = HashSet::with_capacity(golds.len());
    let mut questions = Vec::with_capacity(golds.len());
    let mut missing = 0;
    for (id, answers) in golds {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
        let prediction = predictions.get(id).cloned();
        let (f1, em) = match &prediction {
            Some(p) => answers.iter().fold((0.0f64, 0.0f64), |(f, e), g| {
                (f.max(f1_score(p, g)), e.max(if exact_match(p, g) { 1.0 } else { 0.0 }))
            }),
            None => {
                log::warn!("no prediction for question {id}");
                missing += 1;
                (0.0, 0.0)
            }
        };
        questions.push(QuestionScore {
            id: id.clone(),
            f1,
            em,
            prediction,
            golds: answers.clone(),
        });
    }
    let mut report = EvalReport {
        f1: 0.0,
        em: 0.0,
        total: questions.len(),
        missing,
        questions,
    };
    report.f1 = round2(report.f1_exact());
    report.em = round2(report.em_exact());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize("The  Cat."), ["cat"]);
        assert_eq!(normalize("北京。"), ["北", "京"]);
        assert!(normalize("").is_empty());
        assert_eq!(normalize("在Paris的 a 塔"), ["在", "paris", "的", "塔"]);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_score("北京大学", "北京大学"), 1.0);
        assert!((f1_score("北京大学", "北京") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_score("上海", "北京"), 0.0);
        assert_eq!(f1_score("", ""), 1.0);
        assert_eq!(f1_score("", "x"), 0.0);
        assert_eq!(f1_score("the", "a"), 1.0);
    }

    fn preds(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn evaluate_identity_and_mean() {
        let golds = vec![("a".to_string(), vec!["北京".to_string()]), ("b".to_string(), vec!["new york".to_string()])];
        let r = evaluate(&preds(&[("a", "北京"), ("b", "New York!")]), &golds).unwrap();
        assert_eq!((r.f1, r.em), (100.0, 100.0));
        let r = evaluate(&preds(&[("a", "北京"), ("b", "boston")]), &golds).unwrap();
        assert_eq!((r.f1, r.em), (50.0, 50.0));
        assert_eq!(r.summary(), "F1 50.00\nEM 50.00\n");
    }

    #[test]
    fn missing_prediction_scores_zero() {
        let golds = vec![("a".to_string(), vec!["x".to_string()])];
        let r = evaluate(&HashMap::new(), &golds).unwrap();
        assert_eq!(r.missing, 1);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn max_over_golds_and_order_invariant() {
        let g1 = vec![("a".to_string(), vec!["北京".to_string(), "北京大学".to_string()])];
        let g2 = vec![("a".to_string(), vec!["北京大学".to_string(), "北京".to_string()])];
        let p = preds(&[("a", "北京大学")]);
        assert_eq!(evaluate(&p, &g1).unwrap(), {
            let mut r = evaluate(&p, &g2).unwrap();
            r.questions[0].golds.reverse();
            r
        });
        assert_eq!(evaluate(&p, &g1).unwrap().f1, 100.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let golds = vec![("a".to_string(), vec![]), ("a".to_string(), vec![])];
        assert!(matches!(evaluate(&HashMap::new(), &golds), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn rounding_to_two_decimals() {
        let golds: Vec<_> = ["a", "b", "c"].iter().map(|i| (i.to_string(), vec!["x".to_string()])).collect();
        let r = evaluate(&preds(&[("a", "x")]), &golds).unwrap();
        assert_eq!(r.f1, 33.33);
        assert!((r.f1_exact() - 100.0 / 3.0).abs() < 1e-12);
    }
}
