//! The full model: shared encoder, fusion stack and span head over one
//! parameter store.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelExample, TokenizedExample, Vocabulary};
use crate::encoder::{self, encode_batch_on, EncodedBatch, EncodedVars, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{self, fuse_on, FusionConfig, FusionParams, FusionTrace, FusionVars, TraceVars};
use crate::params::{BoundParams, Gradients, ParamStore};
use crate::span::{
    predict_distributions_on, span_loss_on, SpanHeadParams, SpanHeadVars, SpanLabel, SpanPrediction,
    DEFAULT_MAX_ANSWER_LEN,
};
use crate::tensor::{Tape, Tensor, Var};

fn default_max_answer_len() -> usize {
    DEFAULT_MAX_ANSWER_LEN
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    /// Keep encoder weights fixed during training.
    #[serde(default)]
    pub freeze_encoder: bool,
    #[serde(default = "default_max_answer_len")]
    pub max_answer_len: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, fusion: FusionConfig) -> Self {
        ModelConfig {
            encoder,
            fusion,
            freeze_encoder: false,
            max_answer_len: DEFAULT_MAX_ANSWER_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XlrcModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: EncodedVars,
    pub trace: TraceVars,
    pub start: Var,
    pub end: Var,
}

impl XlrcModel {
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if vocab.len() > config.encoder.vocab_size {
            return Err(Error::Contract(format!(
                "vocabulary has {} entries but the encoder embeds only {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.encoder.hidden_dim;
        let mut params = ParamStore::new();
        encoder::init_params(&config.encoder, &mut rng, &mut params);
        FusionParams::init(h, config.fusion.sources.len(), &mut rng).insert_into(&mut params);
        SpanHeadParams::init(2 * h, &mut rng).insert_into(&mut params);
        Ok(XlrcModel { config, vocab, params })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.encoder.hidden_dim
    }

    pub fn sources(&self) -> &[String] {
        &self.config.fusion.sources
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.freeze_encoder && encoder::is_encoder_param(name))
    }

    /// Switches the model to a new source-language set. The existing `W_C`
    /// and `b_C` are kept when their shapes still fit and reinitialized from
    /// `seed` otherwise; returns true on reinitialization.
    pub fn adapt_sources(&mut self, sources: &[String], seed: u64) -> Result<bool> {
        let next = FusionConfig {
            sources: FusionConfig::new(sources.iter().cloned()).sources,
            scaled: self.config.fusion.scaled,
        };
        if next == self.config.fusion {
            return Ok(false);
        }
        let h = self.hidden_dim();
        let width = next.sources.len() * h;
        let fits = self.params.get(fusion::W_C)?.shape() == [width, h];
        if fits {
            log::info!("source set {:?} -> {:?}; fusion weights reused", self.config.fusion.sources, next.sources);
        } else {
            log::warn!(
                "source set {:?} -> {:?}; W_C no longer fits and is reinitialized",
                self.config.fusion.sources,
                next.sources
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fresh = FusionParams::init(h, next.sources.len(), &mut rng);
            self.params.insert(fusion::W_C, fresh.w_c);
            self.params.insert(fusion::B_C, fresh.b_c);
        }
        self.config.fusion = next;
        Ok(!fits)
    }

    /// Longest input the encoder accepts when `max_len` is requested.
    pub fn effective_max_len(&self, max_len: usize) -> usize {
        max_len.min(self.config.encoder.max_position)
    }

    /// Tokenizes `example`, keeping its sources only when `multilingual`.
    pub fn tokenize(&self, example: &ParallelExample, max_len: usize, multilingual: bool) -> Result<TokenizedExample> {
        let t = TokenizedExample::new(example, &self.vocab, self.effective_max_len(max_len))?;
        Ok(if multilingual { t } else { t.monolingual() })
    }

    /// Encoder, fusion and span head on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, example: &TokenizedExample) -> Result<Forward> {
        let encoded = encode_batch_on(tape, bound, &self.config.encoder, example)?;
        let trace = fuse_on(tape, &encoded, FusionVars::from_bound(bound)?, &self.config.fusion)?;
        let (start, end) =
            predict_distributions_on(tape, trace.g_t, SpanHeadVars::from_bound(bound)?, &example.target.answer_mask())?;
        Ok(Forward {
            encoded,
            trace,
            start,
            end,
        })
    }

    /// Gold span of a trainable example.
    pub fn label(example: &TokenizedExample) -> Result<SpanLabel> {
        match (example.target.is_trainable(), example.target.answer_span) {
            (true, Some((start, end))) => Ok(SpanLabel { start, end }),
            _ => Err(Error::Contract(format!(
                "example {} has no usable answer span ({:?})",
                example.id, example.target.answer_status
            ))),
        }
    }

    /// Loss of one example and its gradient with respect to every parameter.
    pub fn example_gradients(&self, example: &TokenizedExample) -> Result<(f64, Gradients)> {
        let label = Self::label(example)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |n| self.is_trainable(n));
        let fwd = self.forward_on(&mut tape, &bound, example)?;
        let loss = span_loss_on(&mut tape, &[(fwd.start, fwd.end)], &[label])?;
        tape.backward(loss)?;
        Ok((tape.value(loss).values()[0], bound.gradients(&tape)))
    }

    /// Mean loss and gradient over `examples`. Per-example passes may run in
    /// parallel; they are summed in index order so the result does not
    /// depend on `exec`.
    pub fn batch_gradients(&self, examples: &[TokenizedExample], exec: Exec) -> Result<(f64, Gradients)> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let parts = exec.try_map(examples, |_, ex| self.example_gradients(ex))?;
        let weight = 1.0 / examples.len() as f64;
        let mut grads = Gradients::zeros_like(&self.params);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grads.add_scaled(g, weight);
        }
        Ok((loss * weight, grads))
    }

    /// Batch loss without gradients.
    pub fn loss(&self, examples: &[TokenizedExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let mut preds = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len());
        for ex in examples {
            labels.push(Self::label(ex)?);
            let fwd = self.forward_on(&mut tape, &bound, ex)?;
            preds.push((fwd.start, fwd.end));
        }
        let loss = span_loss_on(&mut tape, &preds, &labels)?;
        Ok(tape.value(loss).values()[0])
    }

    /// Start/end distributions and the decoded answer.
    pub fn predict(&self, example: &TokenizedExample) -> Result<SpanPrediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let fwd = self.forward_on(&mut tape, &bound, example)?;
        let start = tape.value(fwd.start).values().to_vec();
        let end = tape.value(fwd.end).values().to_vec();
        SpanPrediction::decode(start, end, &example.target, self.config.max_answer_len)
    }

    /// Every fusion intermediate for `example`.
    pub fn trace(&self, example: &TokenizedExample) -> Result<FusionTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let fwd = self.forward_on(&mut tape, &bound, example)?;
        Ok(FusionTrace::from_tape(&tape, &fwd.trace))
    }

    /// Fusion and span head on precomputed encoder states; the encoder
    /// parameters are not used. `mask` marks the admissible answer positions.
    pub fn forward_from_encoded(&self, batch: &EncodedBatch, mask: &[bool]) -> Result<(FusionTrace, Vec<f64>, Vec<f64>)> {
        batch.validate()?;
        if batch.hidden_dim() != self.hidden_dim() {
            return Err(Error::HiddenMismatch(format!(
                "precomputed states have h={} but the model has h={}",
                batch.hidden_dim(),
                self.hidden_dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let encoded = EncodedVars {
            target: tape.constant(batch.target.clone()),
            sources: batch
                .sources
                .iter()
                .map(|(l, t)| (l.clone(), tape.constant(t.clone())))
                .collect::<BTreeMap<_, _>>(),
        };
        let trace = fuse_on(&mut tape, &encoded, FusionVars::from_bound(&bound)?, &self.config.fusion)?;
        let (s, e) = predict_distributions_on(&mut tape, trace.g_t, SpanHeadVars::from_bound(&bound)?, mask)?;
        Ok((
            FusionTrace::from_tape(&tape, &trace),
            tape.value(s).values().to_vec(),
            tape.value(e).values().to_vec(),
        ))
    }

    /// Precomputed-state record of `example` under the current encoder.
    pub fn encode(&self, example: &TokenizedExample, target_lang: &str) -> Result<EncodedBatch> {
        encoder::encode_batch(example, target_lang, &self.params, &self.config.encoder)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_tokens, Answer, RawExample, SourceText};

    fn example() -> ParallelExample {
        let target = RawExample {
            id: "q1".into(),
            passage: "小王在北京。".into(),
            question: "小王在哪？".into(),
            answers: vec![Answer {
                text: "北京".into(),
                answer_start: 3,
            }],
            language: "zh".into(),
            is_impossible: false,
        };
        let mut ex = ParallelExample::monolingual(target);
        ex.sources.insert(
            "en".into(),
            SourceText {
                passage: "wang is in beijing .".into(),
                question: "where is wang ?".into(),
            },
        );
        ex
    }

    fn model(sources: &[&str]) -> (XlrcModel, ParallelExample) {
        let ex = example();
        let vocab = Vocabulary::build(corpus_tokens(std::slice::from_ref(&ex)), 1);
        let enc = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_position: 32,
            ffn_dim: 0,
        };
        let cfg = ModelConfig::new(enc, FusionConfig::new(sources.iter().copied()));
        (XlrcModel::init(cfg, vocab, 7).unwrap(), ex)
    }

    #[test]
    fn init_is_seeded() {
        let (a, _) = model(&["en"]);
        let (b, _) = model(&["en"]);
        assert_eq!(a, b);
        assert_eq!(a.param(fusion::W_C).unwrap().shape(), [8, 8]);
        assert_eq!(a.param(crate::span::W_START).unwrap().shape(), [16, 1]);
    }

    #[test]
    fn batch_loss_matches_mean_of_examples() {
        let (m, ex) = model(&["en"]);
        let t = m.tokenize(&ex, 32, true).unwrap();
        let mono = m.tokenize(&ex, 32, false).unwrap();
        let batch = [t.clone(), mono.clone()];
        let (loss, grads) = m.batch_gradients(&batch, Exec::Sequential).unwrap();
        let (l1, _) = m.example_gradients(&t).unwrap();
        let (l2, _) = m.example_gradients(&mono).unwrap();
        assert!((loss - (l1 + l2) / 2.0).abs() < 1e-12);
        assert!((m.loss(&batch).unwrap() - loss).abs() < 1e-12);
        // the fallback path never touches W_C, the multilingual one does
        let (_, g_mono) = m.example_gradients(&mono).unwrap();
        assert!(g_mono.get(fusion::W_C).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(grads.get(fusion::W_C).unwrap().values().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (m, ex) = model(&["en"]);
        let t = m.tokenize(&ex, 32, true).unwrap();
        let batch = vec![t.clone(), m.tokenize(&ex, 32, false).unwrap(), t];
        let a = m.batch_gradients(&batch, Exec::Sequential).unwrap();
        let b = m.batch_gradients(&batch, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_encoder_has_zero_gradient() {
        let (mut m, ex) = model(&["en"]);
        m.config.freeze_encoder = true;
        let t = m.tokenize(&ex, 32, true).unwrap();
        let (_, g) = m.example_gradients(&t).unwrap();
        assert!(g.get("encoder.tok_emb").unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn source_mismatch_is_an_error() {
        let (m, ex) = model(&["ja"]);
        let t = m.tokenize(&ex, 32, true).unwrap();
        assert!(matches!(m.predict(&t), Err(Error::SourceMismatch { .. })));
    }

    #[test]
    fn adapt_sources_reuses_or_reinitializes() {
        let (mut m, _) = model(&["en"]);
        let w = m.param(fusion::W_C).unwrap().clone();
        assert!(!m.adapt_sources(&["ja".into()], 1).unwrap());
        assert_eq!(m.param(fusion::W_C).unwrap(), &w);
        assert!(m.adapt_sources(&["en".into(), "ja".into()], 1).unwrap());
        assert_eq!(m.param(fusion::W_C).unwrap().shape(), [16, 8]);
        assert_eq!(m.sources(), ["en", "ja"]);
    }

    #[test]
    fn encoded_path_matches_full_forward() {
        let (m, ex) = model(&["en"]);
        let t = m.tokenize(&ex, 32, true).unwrap();
        let full = m.predict(&t).unwrap();
        let batch = m.encode(&t, "zh").unwrap();
        let (trace, s, e) = m.forward_from_encoded(&batch, &t.target.answer_mask()).unwrap();
        assert_eq!(s, full.start_probs);
        assert_eq!(e, full.end_probs);
        assert_eq!(trace, m.trace(&t).unwrap());
    }
}
