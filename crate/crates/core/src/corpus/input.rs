//! `[CLS] question [SEP] passage [SEP]` model inputs.

use std::collections::BTreeMap;
use std::ops::Range;

use super::parallel::ParallelExample;
use super::tokenize::{join_tokens, tokenize, tokenize_with_offsets, Token};
use super::vocab::{Vocabulary, CLS, SEP};
use crate::error::{Error, Result};

/// Where the gold answer ended up after tokenization and truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerStatus {
    /// Source-language sequence; no supervision.
    NotApplicable,
    /// Token boundaries line up exactly with the character span.
    Mapped,
    /// Unanswerable question; the span points at `[CLS]`.
    Unanswerable,
    /// Passage truncation cut the answer off.
    Truncated,
    /// The answer starts or ends inside a token.
    Misaligned,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    /// Half-open token range of the (possibly truncated) passage.
    pub passage_range: Range<usize>,
    /// Inclusive `(start, end)` token indices; target language only.
    pub answer_span: Option<(usize, usize)>,
    pub answer_status: AnswerStatus,
    /// Tokens that were not in the vocabulary.
    pub unknown_tokens: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when the sequence carries a usable training target.
    pub fn is_trainable(&self) -> bool {
        matches!(
            self.answer_status,
            AnswerStatus::Mapped | AnswerStatus::Unanswerable
        )
    }

    /// Positions a span may start or end at: the passage and `[CLS]`.
    pub fn answer_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| i == 0 || self.passage_range.contains(&i))
            .collect()
    }
}

/// Builds the input sequence of `example` in `lang` (the target language or
/// one of its sources). The passage is truncated from the right so that the
/// whole sequence fits in `max_len`; the question never is.
pub fn encode_input(
    example: &ParallelExample,
    lang: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    let is_target = lang == example.target.language;
    let (passage, question) = if is_target {
        (&example.target.passage, &example.target.question)
    } else {
        let src = example.sources.get(lang).ok_or_else(|| Error::MissingLanguage {
            id: example.id().to_string(),
            lang: lang.to_string(),
        })?;
        (&src.passage, &src.question)
    };

    let q_tokens = tokenize(question);
    let limit = max_len.saturating_sub(3);
    if q_tokens.len() > limit {
        return Err(Error::QuestionTooLong {
            id: example.id().to_string(),
            len: q_tokens.len(),
            limit,
        });
    }
    let p_all = tokenize_with_offsets(passage);
    let keep = p_all.len().min(limit - q_tokens.len());
    let p_tokens = &p_all[..keep];

    let p_start = q_tokens.len() + 2;
    let mut tokens = Vec::with_capacity(p_start + keep + 1);
    tokens.push(CLS.to_string());
    tokens.extend(q_tokens);
    tokens.push(SEP.to_string());
    tokens.extend(p_tokens.iter().map(|t| t.text.clone()));
    tokens.push(SEP.to_string());

    let mut segment_ids = vec![0u8; p_start];
    segment_ids.resize(tokens.len(), 1);
    let token_ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let unknown_tokens = tokens.iter().filter(|t| !vocab.contains(t)).count();

    let (answer_span, answer_status) = if !is_target {
        (None, AnswerStatus::NotApplicable)
    } else if let Some(answer) = example.target.answers.first() {
        let char_end = answer.answer_start + answer.text.chars().count();
        match locate_answer(&p_all, answer.answer_start, char_end) {
            Some((s, e, exact)) if e < keep => {
                let status = if exact {
                    AnswerStatus::Mapped
                } else {
                    AnswerStatus::Misaligned
                };
                (Some((p_start + s, p_start + e)), status)
            }
            Some(_) => (None, AnswerStatus::Truncated),
            None => (None, AnswerStatus::Misaligned),
        }
    } else {
        (Some((0, 0)), AnswerStatus::Unanswerable)
    };

    Ok(TokenSequence {
        passage_range: p_start..p_start + keep,
        tokens,
        token_ids,
        segment_ids,
        answer_span,
        answer_status,
        unknown_tokens,
    })
}

/// First token overlapping `char_start` and last token overlapping
/// `char_end - 1`, plus whether the boundaries match exactly.
fn locate_answer(tokens: &[Token], char_start: usize, char_end: usize) -> Option<(usize, usize, bool)> {
    let s = tokens.iter().position(|t| t.end > char_start)?;
    let e = tokens.iter().rposition(|t| t.start < char_end)?;
    if e < s {
        return None;
    }
    let exact = tokens[s].start == char_start && tokens[e].end == char_end;
    Some((s, e, exact))
}

/// The gold answer as the tokenizer would render it, for comparing against
/// decoded spans.
pub fn canonical_answer(text: &str) -> String {
    join_tokens(&tokenize(text))
}

/// A parallel example with every language turned into a [`TokenSequence`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedExample {
    pub id: String,
    pub target: TokenSequence,
    pub sources: BTreeMap<String, TokenSequence>,
}

impl TokenizedExample {
    pub fn new(example: &ParallelExample, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let target = encode_input(example, &example.target.language, vocab, max_len)?;
        let sources = example
            .sources
            .keys()
            .map(|lang| Ok((lang.clone(), encode_input(example, lang, vocab, max_len)?)))
            .collect::<Result<_>>()?;
        Ok(TokenizedExample {
            id: example.id().to_string(),
            target,
            sources,
        })
    }

    /// Drops the sources, leaving the target alone.
    pub fn monolingual(mut self) -> Self {
        self.sources.clear();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::squad::{Answer, RawExample};

    fn example() -> ParallelExample {
        ParallelExample::monolingual(RawExample {
            id: "w".into(),
            passage: "他是王".into(),
            question: "谁".into(),
            answers: vec![Answer {
                text: "王".into(),
                answer_start: 2,
            }],
            language: "zh".into(),
            is_impossible: false,
        })
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["他", "是", "王", "谁"], 1)
    }

    #[test]
    fn layout() {
        let seq = encode_input(&example(), "zh", &vocab(), 16).unwrap();
        assert_eq!(seq.tokens, ["[CLS]", "谁", "[SEP]", "他", "是", "王", "[SEP]"]);
        assert_eq!(seq.segment_ids, [0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(seq.passage_range, 3..6);
        assert_eq!(seq.unknown_tokens, 0);
    }

    // Brute-force oracle: scan every token pair for one whose surface form is
    // the answer and whose first token starts at the gold character offset.
    fn brute_force_span(passage: &str, answer: &str, char_start: usize, offset: usize) -> Option<(usize, usize)> {
        let toks = tokenize_with_offsets(passage);
        for i in 0..toks.len() {
            for j in i..toks.len() {
                let texts: Vec<&str> = toks[i..=j].iter().map(|t| t.text.as_str()).collect();
                if toks[i].start == char_start && join_tokens(&texts) == canonical_answer(answer) {
                    return Some((offset + i, offset + j));
                }
            }
        }
        None
    }

    #[test]
    fn answer_span_matches_brute_force() {
        let seq = encode_input(&example(), "zh", &vocab(), 16).unwrap();
        assert_eq!(seq.answer_span, brute_force_span("他是王", "王", 2, 3));
        assert_eq!(seq.answer_span, Some((5, 5)));
        assert_eq!(seq.answer_status, AnswerStatus::Mapped);
    }

    #[test]
    fn truncation_flags_lost_answer() {
        let seq = encode_input(&example(), "zh", &vocab(), 6).unwrap();
        assert_eq!(seq.tokens, ["[CLS]", "谁", "[SEP]", "他", "是", "[SEP]"]);
        assert_eq!(seq.answer_span, None);
        assert_eq!(seq.answer_status, AnswerStatus::Truncated);
        assert!(!seq.is_trainable());
    }

    #[test]
    fn question_never_truncated() {
        assert!(matches!(
            encode_input(&example(), "zh", &vocab(), 3),
            Err(Error::QuestionTooLong { .. })
        ));
        assert!(encode_input(&example(), "zh", &vocab(), 4).is_ok());
    }

    #[test]
    fn latin_multi_token_answer() {
        let mut ex = example();
        ex.target.passage = "He lives in New York City.".into();
        ex.target.question = "Where?".into();
        ex.target.answers = vec![Answer {
            text: "New York".into(),
            answer_start: 12,
        }];
        let v = Vocabulary::build(tokenize(&ex.target.passage), 1);
        let seq = encode_input(&ex, "zh", &v, 32).unwrap();
        let (s, e) = seq.answer_span.unwrap();
        assert_eq!(join_tokens(&seq.tokens[s..=e]), "new york");
        assert_eq!(seq.answer_span, brute_force_span(&ex.target.passage, "New York", 12, 4));
    }

    #[test]
    fn partial_token_answer_is_misaligned() {
        let mut ex = example();
        ex.target.passage = "Newark".into();
        ex.target.answers = vec![Answer {
            text: "New".into(),
            answer_start: 0,
        }];
        let seq = encode_input(&ex, "zh", &vocab(), 16).unwrap();
        assert_eq!(seq.answer_status, AnswerStatus::Misaligned);
    }

    #[test]
    fn unanswerable_points_at_cls() {
        let mut ex = example();
        ex.target.answers.clear();
        ex.target.is_impossible = true;
        let seq = encode_input(&ex, "zh", &vocab(), 16).unwrap();
        assert_eq!(seq.answer_span, Some((0, 0)));
        assert!(seq.is_trainable());
    }

    #[test]
    fn missing_language() {
        assert!(matches!(
            encode_input(&example(), "en", &vocab(), 16),
            Err(Error::MissingLanguage { .. })
        ));
    }

    #[test]
    fn answer_mask_allows_cls_and_passage() {
        let seq = encode_input(&example(), "zh", &vocab(), 16).unwrap();
        assert_eq!(seq.answer_mask(), [true, false, false, true, true, true, false]);
    }
}
