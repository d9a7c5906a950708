//! Central finite-difference verification of the reverse pass.
//!
//! Each case records one graph on a tape, runs the reverse pass, then nudges
//! every scalar of every checked leaf by `±step` and replays the tape. An
//! entry fails when `|a - n| / max(|a|, |n|)` exceeds the tolerance; entries
//! where both gradients are below [`MIN_MAGNITUDE`] are skipped.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{AnswerStatus, TokenSequence, TokenizedExample, Vocabulary, CLS_ID, PAD_ID, SEP_ID};
use crate::encoder::{self, encode_on, EncodedVars, EncoderConfig};
use crate::error::Result;
use crate::exec::Exec;
use crate::fusion::{fuse_on, FusionConfig, FusionParams, FusionVars};
use crate::model::{ModelConfig, XlrcModel};
use crate::params::ParamStore;
use crate::span::{predict_distributions_on, span_loss_on, SpanHeadParams, SpanHeadVars, SpanLabel, LOG_EPS};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const MIN_MAGNITUDE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// First few failing entries.
    pub failures: Vec<Mismatch>,
    pub failed: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

impl fmt::Display for CaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} entries, {} below threshold, max rel err {:.2e}",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.checked,
            self.skipped,
            self.max_rel_err
        )?;
        for m in &self.failures {
            write!(
                f,
                "\n    {}[{}]: analytic {:.6e} numeric {:.6e} (rel {:.2e})",
                m.leaf, m.index, m.analytic, m.numeric, m.rel_err
            )?;
        }
        Ok(())
    }
}

const MAX_LISTED: usize = 5;

/// Compares the reverse-mode gradient of `loss` against central differences
/// for every entry of `leaves`. The tape is left with its original values.
pub fn check_tape(
    name: &str,
    tape: &mut Tape,
    loss: Var,
    leaves: &[(String, Var)],
    step: f64,
    tol: f64,
) -> Result<CaseReport> {
    tape.backward(loss)?;
    let mut report = CaseReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
        failed: 0,
    };
    for (leaf_name, var) in leaves {
        let original = tape.value(*var).clone();
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(original.shape()));
        for i in 0..original.numel() {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut v = original.clone();
                v.values_mut()[i] += delta;
                tape.set_leaf(*var, v)?;
                tape.replay()?;
                Ok(tape.value(loss).values()[0])
            };
            let plus = eval_at(step)?;
            let minus = eval_at(-step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.values()[i];
            let scale = a.abs().max(numeric.abs());
            if scale <= MIN_MAGNITUDE {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel_err = (a - numeric).abs() / scale;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if !(rel_err < tol) {
                report.failed += 1;
                if report.failures.len() < MAX_LISTED {
                    report.failures.push(Mismatch {
                        leaf: leaf_name.clone(),
                        index: i,
                        analytic: a,
                        numeric,
                        rel_err,
                    });
                }
            }
        }
        tape.set_leaf(*var, original)?;
    }
    tape.replay()?;
    Ok(report)
}

/// What a configuration exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Family {
    /// Every tape primitive in one expression.
    Primitives,
    /// The transformer encoder, with respect to all its parameters.
    Encoder,
    /// Self-adaptive and multilingual attention plus the target enhancement,
    /// with respect to the encoded states and the fusion parameters.
    Fusion,
    /// Start/end distributions and the span loss.
    SpanHead,
    /// Tokens to loss through every module.
    Model,
}

const FAMILIES: [Family; 5] = [
    Family::Primitives,
    Family::Encoder,
    Family::Fusion,
    Family::SpanHead,
    Family::Model,
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub family: Family,
    pub seed: u64,
    /// Target sequence length.
    pub len_t: usize,
    /// Source sequence lengths; empty means the monolingual fallback.
    pub len_src: Vec<usize>,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub scaled: bool,
}

impl fmt::Display for GradcheckConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} seed={} L_T={} L_src={:?} h={} heads={} layers={}{}",
            self.family,
            self.seed,
            self.len_t,
            self.len_src,
            self.hidden,
            self.heads,
            self.layers,
            if self.scaled { " scaled" } else { "" }
        )
    }
}

/// `count` configurations cycling through every family, with `L <= 6` and
/// `h <= 8`.
pub fn random_configs(count: usize, seed: u64) -> Vec<GradcheckConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let family = FAMILIES[i % FAMILIES.len()];
            let hidden = [2, 4, 6, 8][rng.random_range(0..4)];
            let heads = if hidden % 2 == 0 && rng.random_bool(0.5) { 2 } else { 1 };
            let min_len = if family == Family::Model { 5 } else { 1 };
            let num_src = rng.random_range(0..=2);
            GradcheckConfig {
                family,
                seed: rng.random(),
                len_t: rng.random_range(min_len..=6),
                len_src: (0..num_src).map(|_| rng.random_range(min_len..=6)).collect(),
                hidden,
                heads,
                layers: rng.random_range(1..=2),
                scaled: rng.random_bool(0.3),
            }
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0, rng)
}

/// `sum(x ⊙ R)` for a fixed random `R`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let r = tape.constant(Tensor::uniform(&shape, 1.0, rng));
    let prod = tape.mul(x, r)?;
    tape.sum(prod)
}

fn bind_all(tape: &mut Tape, store: &ParamStore) -> Result<(crate::params::BoundParams, Vec<(String, Var)>)> {
    let bound = store.bind(tape, |_| true);
    let leaves = store
        .names()
        .map(|n| Ok((n.to_string(), bound.var(n)?)))
        .collect::<Result<_>>()?;
    Ok((bound, leaves))
}

const TOY_VOCAB: usize = 9;

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, pad: bool) -> TokenSequence {
    let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(4..TOY_VOCAB)).collect();
    if pad && len > 1 && rng.random_bool(0.5) {
        *ids.last_mut().expect("len > 1") = PAD_ID;
    }
    toy_sequence(ids, 0..len, None)
}

fn toy_sequence(token_ids: Vec<usize>, passage_range: std::ops::Range<usize>, span: Option<(usize, usize)>) -> TokenSequence {
    TokenSequence {
        tokens: token_ids.iter().map(|i| format!("t{i}")).collect(),
        segment_ids: vec![0; token_ids.len()],
        token_ids,
        passage_range,
        answer_span: span,
        answer_status: if span.is_some() {
            AnswerStatus::Mapped
        } else {
            AnswerStatus::NotApplicable
        },
        unknown_tokens: 0,
    }
}

/// `[CLS] q [SEP] passage [SEP]` of total length `len >= 5`.
fn framed_sequence(rng: &mut ChaCha8Rng, len: usize, with_answer: bool) -> TokenSequence {
    let passage = 3..len - 1;
    let mut ids = vec![CLS_ID, rng.random_range(4..TOY_VOCAB), SEP_ID];
    ids.extend(passage.clone().map(|_| rng.random_range(4..TOY_VOCAB)));
    ids.push(SEP_ID);
    let span = with_answer.then(|| {
        if rng.random_bool(0.2) {
            (0, 0)
        } else {
            let s = rng.random_range(passage.clone());
            (s, rng.random_range(s..passage.end))
        }
    });
    let mut seq = toy_sequence(ids, passage, span);
    if span == Some((0, 0)) {
        seq.answer_status = AnswerStatus::Unanswerable;
    }
    seq
}

fn encoder_config(cfg: &GradcheckConfig) -> EncoderConfig {
    EncoderConfig {
        vocab_size: TOY_VOCAB,
        hidden_dim: cfg.hidden,
        num_layers: cfg.layers,
        num_heads: cfg.heads,
        max_position: 6,
        ffn_dim: 0,
    }
}

fn source_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn primitives_case(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<(Tape, Var, Vec<(String, Var)>)> {
    let (l, h) = (cfg.len_t, cfg.hidden);
    let mut tape = Tape::new();
    let x = tape.param(random_matrix(rng, l, h));
    let w = tape.param(random_matrix(rng, h, h));
    let b = tape.param(Tensor::uniform(&[h], 1.0, rng));
    let gamma = tape.param(Tensor::uniform(&[h], 1.0, rng));
    let beta = tape.param(Tensor::uniform(&[h], 1.0, rng));
    let table = tape.param(random_matrix(rng, 4, h));

    let y = tape.affine(x, w, b)?;
    let y = tape.gelu(y)?;
    let ids: Vec<usize> = (0..l).map(|_| rng.random_range(0..4)).collect();
    let e = tape.gather_rows(table, &ids)?;
    let y = tape.add(y, e)?;
    let y = tape.layer_norm_rows(y, gamma, beta, LAYER_NORM_EPS)?;
    let yt = tape.transpose(y)?;
    let scores = tape.matmul(y, yt)?;
    let scores = tape.scale(scores, 0.5)?;
    let mut mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;
    let probs = tape.masked_softmax_rows(scores, mask)?;
    let plain = tape.softmax_rows(scores)?;
    let both = tape.concat_cols(&[probs, plain])?;
    let half = tape.slice_cols(both, l / 2, l + l / 2)?;
    let ctx = tape.matmul(half, y)?;
    let ctx = tape.mul(ctx, x)?;
    let s1 = weighted_sum(&mut tape, ctx, rng)?;
    let row = tape.reshape(plain, &[1, l * l])?;
    let row_probs = tape.softmax_rows(row)?;
    let lp = tape.log_prob_at(row_probs, rng.random_range(0..l * l), LOG_EPS)?;
    let loss = tape.add(s1, lp)?;
    let leaves = vec![
        ("x".into(), x),
        ("w".into(), w),
        ("b".into(), b),
        ("gamma".into(), gamma),
        ("beta".into(), beta),
        ("table".into(), table),
    ];
    Ok((tape, loss, leaves))
}

fn encoder_case(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<(Tape, Var, Vec<(String, Var)>)> {
    let config = encoder_config(cfg);
    let mut store = ParamStore::new();
    encoder::init_params(&config, rng, &mut store);
    // non-trivial norms and biases
    for (name, t) in store.clone().iter() {
        if name.ends_with('b') || name.contains("_b") || name.contains("_g") {
            store.insert(name, Tensor::uniform(t.shape(), 0.5, rng));
        }
    }
    let seq = random_sequence(rng, cfg.len_t, true);
    let mut tape = Tape::new();
    let (bound, leaves) = bind_all(&mut tape, &store)?;
    let out = encode_on(&mut tape, &bound, &config, &seq)?;
    let loss = weighted_sum(&mut tape, out, rng)?;
    Ok((tape, loss, leaves))
}

fn fusion_case(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<(Tape, Var, Vec<(String, Var)>)> {
    let h = cfg.hidden;
    let names = source_names(cfg.len_src.len());
    let config = FusionConfig {
        sources: names.clone(),
        scaled: cfg.scaled,
    };
    let mut store = ParamStore::new();
    let mut p = FusionParams::init(h, names.len(), rng);
    p.b_c = Tensor::uniform(&[h], 0.5, rng);
    p.gamma = Tensor::uniform(&[h], 1.0, rng);
    p.beta = Tensor::uniform(&[h], 0.5, rng);
    p.insert_into(&mut store);
    // small states keep the unnormalized inter-attention logits moderate
    store.insert("b_t", Tensor::uniform(&[cfg.len_t, h], 0.5, rng));
    for (name, &len) in names.iter().zip(&cfg.len_src) {
        store.insert(format!("b_{name}"), Tensor::uniform(&[len, h], 0.5, rng));
    }
    let mut tape = Tape::new();
    let (bound, leaves) = bind_all(&mut tape, &store)?;
    let encoded = EncodedVars {
        target: bound.var("b_t")?,
        sources: names
            .iter()
            .map(|n| Ok((n.clone(), bound.var(&format!("b_{n}"))?)))
            .collect::<Result<BTreeMap<_, _>>>()?,
    };
    let trace = fuse_on(&mut tape, &encoded, FusionVars::from_bound(&bound)?, &config)?;
    let loss = weighted_sum(&mut tape, trace.g_t, rng)?;
    Ok((tape, loss, leaves))
}

fn span_case(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<(Tape, Var, Vec<(String, Var)>)> {
    let h = cfg.hidden;
    let mut store = ParamStore::new();
    let mut p = SpanHeadParams::init(2 * h, rng);
    p.b_start = Tensor::uniform(&[1], 1.0, rng);
    p.b_end = Tensor::uniform(&[1], 1.0, rng);
    p.insert_into(&mut store);
    // one target per length: K = 1 + number of sources
    let lens: Vec<usize> = std::iter::once(cfg.len_t).chain(cfg.len_src.iter().copied()).collect();
    for (k, &len) in lens.iter().enumerate() {
        store.insert(format!("g{k}"), random_matrix(rng, len, 2 * h));
    }
    let mut tape = Tape::new();
    let (bound, leaves) = bind_all(&mut tape, &store)?;
    let vars = SpanHeadVars::from_bound(&bound)?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (k, &len) in lens.iter().enumerate() {
        let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let allowed: Vec<usize> = (0..len).filter(|&i| mask[i]).collect();
        let start = allowed[rng.random_range(0..allowed.len())];
        let end = allowed[rng.random_range(0..allowed.len())];
        preds.push(predict_distributions_on(&mut tape, bound.var(&format!("g{k}"))?, vars, &mask)?);
        labels.push(SpanLabel { start, end });
    }
    let loss = span_loss_on(&mut tape, &preds, &labels)?;
    Ok((tape, loss, leaves))
}

fn model_case(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<(Tape, Var, Vec<(String, Var)>)> {
    let names = source_names(cfg.len_src.len());
    let mut config = ModelConfig::new(
        encoder_config(cfg),
        FusionConfig {
            sources: names.clone(),
            scaled: cfg.scaled,
        },
    );
    config.freeze_encoder = false;
    let model = XlrcModel::init(config, Vocabulary::build(std::iter::empty::<String>(), 1), rng.random())?;
    let example = TokenizedExample {
        id: "g".into(),
        target: framed_sequence(rng, cfg.len_t, true),
        sources: names
            .iter()
            .zip(&cfg.len_src)
            .map(|(n, &len)| (n.clone(), framed_sequence(rng, len, false)))
            .collect(),
    };
    let label = XlrcModel::label(&example)?;
    let mut tape = Tape::new();
    let (bound, leaves) = bind_all(&mut tape, &model.params)?;
    let fwd = model.forward_on(&mut tape, &bound, &example)?;
    let loss = span_loss_on(&mut tape, &[(fwd.start, fwd.end)], &[label])?;
    Ok((tape, loss, leaves))
}

pub fn run_config(cfg: &GradcheckConfig) -> Result<CaseReport> {
    run_config_with(cfg, FD_STEP, REL_TOL)
}

pub fn run_config_with(cfg: &GradcheckConfig, step: f64, tol: f64) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut tape, loss, leaves) = match cfg.family {
        Family::Primitives => primitives_case(cfg, &mut rng)?,
        Family::Encoder => encoder_case(cfg, &mut rng)?,
        Family::Fusion => fusion_case(cfg, &mut rng)?,
        Family::SpanHead => span_case(cfg, &mut rng)?,
        Family::Model => model_case(cfg, &mut rng)?,
    };
    check_tape(&cfg.to_string(), &mut tape, loss, &leaves, step, tol)
}

pub const DEFAULT_CONFIGS: usize = 25;

/// Runs `configs`, in parallel when `exec` allows; reports keep input order.
pub fn run_suite(configs: &[GradcheckConfig], exec: Exec) -> Result<Vec<CaseReport>> {
    exec.try_map(configs, |_, c| run_config(c))
}
