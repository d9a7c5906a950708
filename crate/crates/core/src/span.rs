//! Start/end span prediction over the fused target representation.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::corpus::{join_tokens, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to the gold-position probability before taking its log.
pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

pub const W_START: &str = "span.w_s";
pub const B_START: &str = "span.b_s";
pub const W_END: &str = "span.w_e";
pub const B_END: &str = "span.b_e";

#[derive(Clone, Debug, PartialEq)]
pub struct SpanHeadParams {
    /// `2h x 1`
    pub w_start: Tensor,
    pub b_start: Tensor,
    pub w_end: Tensor,
    pub b_end: Tensor,
}

impl SpanHeadParams {
    pub fn init<R: Rng + ?Sized>(input_width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input_width as f64).sqrt();
        SpanHeadParams {
            w_start: Tensor::uniform(&[input_width, 1], bound, rng),
            b_start: Tensor::zeros(&[1]),
            w_end: Tensor::uniform(&[input_width, 1], bound, rng),
            b_end: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(input_width: usize) -> Self {
        SpanHeadParams {
            w_start: Tensor::zeros(&[input_width, 1]),
            b_start: Tensor::zeros(&[1]),
            w_end: Tensor::zeros(&[input_width, 1]),
            b_end: Tensor::zeros(&[1]),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore) {
        store.insert(W_START, self.w_start);
        store.insert(B_START, self.b_start);
        store.insert(W_END, self.w_end);
        store.insert(B_END, self.b_end);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpanHeadVars {
    pub w_start: Var,
    pub b_start: Var,
    pub w_end: Var,
    pub b_end: Var,
}

impl SpanHeadVars {
    pub fn from_bound(bound: &BoundParams) -> Result<Self> {
        Ok(SpanHeadVars {
            w_start: bound.var(W_START)?,
            b_start: bound.var(B_START)?,
            w_end: bound.var(W_END)?,
            b_end: bound.var(B_END)?,
        })
    }
}

/// Gold start and end token indices of one example (the positions of the
/// ones in its one-hot label vectors).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanLabel {
    pub start: usize,
    pub end: usize,
}

fn position_distribution(tape: &mut Tape, g: Var, w: Var, b: Var, mask: &[bool]) -> Result<Var> {
    let logits = tape.affine(g, w, b)?;
    let len = tape.value(logits).rows();
    let row = tape.reshape(logits, &[1, len])?;
    tape.masked_softmax_rows(row, mask.to_vec())
}

/// `(P_start, P_end)`, each `1 x L`. Positions where `mask` is false get
/// probability zero.
pub fn predict_distributions_on(
    tape: &mut Tape,
    g_t: Var,
    p: SpanHeadVars,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let rows = tape.value(g_t).rows();
    if mask.len() != rows {
        return Err(Error::shape("span mask", tape.value(g_t).shape(), &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked);
    }
    let start = position_distribution(tape, g_t, p.w_start, p.b_start, mask)?;
    let end = position_distribution(tape, g_t, p.w_end, p.b_end, mask)?;
    Ok((start, end))
}

/// `-(1/K) Σ_k [log P_start(y_start) + log P_end(y_end)]`, with each probability
/// floored at [`LOG_EPS`].
pub fn span_loss_on(tape: &mut Tape, preds: &[(Var, Var)], labels: &[SpanLabel]) -> Result<Var> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "span loss needs K >= 1 predictions with one label each, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&(ps, pe), label) in preds.iter().zip(labels) {
        let ls = tape.log_prob_at(ps, label.start, LOG_EPS)?;
        let le = tape.log_prob_at(pe, label.end, LOG_EPS)?;
        let both = tape.add(ls, le)?;
        total = Some(match total {
            Some(t) => tape.add(t, both)?,
            None => both,
        });
    }
    tape.scale(total.expect("K >= 1"), -1.0 / preds.len() as f64)
}

/// Value-level [`predict_distributions_on`].
pub fn predict_distributions(g_t: &Tensor, params: &SpanHeadParams, mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = SpanHeadVars {
        w_start: tape.constant(params.w_start.clone()),
        b_start: tape.constant(params.b_start.clone()),
        w_end: tape.constant(params.w_end.clone()),
        b_end: tape.constant(params.b_end.clone()),
    };
    let g = tape.constant(g_t.clone());
    let (s, e) = predict_distributions_on(&mut tape, g, p, mask)?;
    Ok((tape.value(s).values().to_vec(), tape.value(e).values().to_vec()))
}

/// Value-level [`span_loss_on`] over plain probability vectors.
pub fn span_loss(preds: &[(Vec<f64>, Vec<f64>)], labels: &[SpanLabel]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<(Var, Var)> = preds
        .iter()
        .map(|(s, e)| {
            (
                tape.constant(Tensor::vector(s.clone())),
                tape.constant(Tensor::vector(e.clone())),
            )
        })
        .collect();
    let loss = span_loss_on(&mut tape, &vars, labels)?;
    Ok(tape.value(loss).values()[0])
}

/// Best `(start, end, score)` with `start <= end < start + max_answer_len`,
/// both inside `range`, maximizing `start_probs[i] * end_probs[j]`. Ties go to
/// the smaller start, then the smaller end.
pub fn decode_span(
    start_probs: &[f64],
    end_probs: &[f64],
    range: Range<usize>,
    max_answer_len: usize,
) -> Result<(usize, usize, f64)> {
    let hi = range.end.min(start_probs.len()).min(end_probs.len());
    if range.start >= hi || max_answer_len == 0 {
        return Err(Error::EmptyPassage);
    }
    let mut best = (range.start, range.start, f64::NEG_INFINITY);
    for i in range.start..hi {
        let last = (i + max_answer_len).min(hi);
        for j in i..last {
            let score = start_probs[i] * end_probs[j];
            if score > best.2 {
                best = (i, j, score);
            }
        }
    }
    Ok(best)
}

/// Surface text of tokens `start..=end`. Spans that touch `[CLS]`, `[SEP]` or
/// leave the passage decode to the empty string.
pub fn extract_text(seq: &TokenSequence, span: (usize, usize)) -> String {
    let (s, e) = span;
    if s > e || !seq.passage_range.contains(&s) || !seq.passage_range.contains(&e) {
        return String::new();
    }
    join_tokens(&seq.tokens[s..=e])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    pub best_span: (usize, usize),
    pub best_score: f64,
    pub answer_text: String,
}

impl SpanPrediction {
    /// Decodes the best passage span. When the `[CLS]` pair outscores it the
    /// question is treated as unanswerable and the answer is empty.
    pub fn decode(start_probs: Vec<f64>, end_probs: Vec<f64>, seq: &TokenSequence, max_answer_len: usize) -> Result<Self> {
        let (s, e, score) = decode_span(&start_probs, &end_probs, seq.passage_range.clone(), max_answer_len)?;
        let null_score = start_probs[0] * end_probs[0];
        let answer_text = if null_score > score {
            String::new()
        } else {
            extract_text(seq, (s, e))
        };
        Ok(SpanPrediction {
            start_probs,
            end_probs,
            best_span: (s, e),
            best_score: score,
            answer_text,
        })
    }
}

/// SQuAD-style prediction file: `{"<id>": "<answer>", ...}`, keys sorted.
pub fn write_predictions(path: impl AsRef<Path>, preds: &BTreeMap<String, String>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(preds)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
