//! Multilingual fusion of target and source-language states.
//!
//! For the target states `B_T` (`L_T x h`) and each source `B_S` (`L_S x h`):
//!
//! ```text
//! A_T   = softmax(B_T B_Tᵀ)              L_T x L_T
//! A_S   = softmax(B_S B_Sᵀ)              L_S x L_S
//! A_TS  = B_T B_Sᵀ                       L_T x L_S   (raw, no softmax)
//! Ã_TS  = A_T A_TS A_Sᵀ                  L_T x L_S
//! C'_S  = softmax(Ã_TS) B_S              L_T x h
//! C'    = [C'_S1 | C'_S2 | ...]          L_T x n·h   (sources in lexicographic order)
//! C     = C' W_C + b_C                   L_T x h
//! G_T   = [B_T | LayerNorm(B_T + C)]     L_T x 2h
//! ```
//!
//! Softmax is row-wise throughout. With no sources, `C = 0`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedBatch, EncodedVars};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Attention heads in the fusion stack. Only the single-head form exists.
pub const FUSION_HEADS: usize = 1;

pub const W_C: &str = "fusion.w_c";
pub const B_C: &str = "fusion.b_c";
pub const LN_GAMMA: &str = "fusion.ln_g";
pub const LN_BETA: &str = "fusion.ln_b";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Source languages, kept sorted; this fixes the concatenation order.
    pub sources: Vec<String>,
    /// Scale every dot-product logit by `1/sqrt(h)`. Off by default.
    #[serde(default)]
    pub scaled: bool,
}

impl FusionConfig {
    pub fn new<S: Into<String>>(sources: impl IntoIterator<Item = S>) -> Self {
        let mut sources: Vec<String> = sources.into_iter().map(Into::into).collect();
        sources.sort();
        sources.dedup();
        FusionConfig {
            sources,
            scaled: false,
        }
    }

    fn logit_scale(&self, h: usize) -> Option<f64> {
        self.scaled.then(|| 1.0 / (h as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// `n·h x h`
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl FusionParams {
    /// `W_C ~ U(-1/sqrt(n·h), 1/sqrt(n·h))`, zero bias and shift, unit gain.
    pub fn init<R: Rng + ?Sized>(hidden: usize, num_sources: usize, rng: &mut R) -> Self {
        let width = num_sources * hidden;
        let bound = if width == 0 { 0.0 } else { 1.0 / (width as f64).sqrt() };
        FusionParams {
            w_c: Tensor::uniform(&[width, hidden], bound, rng),
            b_c: Tensor::zeros(&[hidden]),
            gamma: Tensor::ones(&[hidden]),
            beta: Tensor::zeros(&[hidden]),
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(FusionParams {
            w_c: store.get(W_C)?.clone(),
            b_c: store.get(B_C)?.clone(),
            gamma: store.get(LN_GAMMA)?.clone(),
            beta: store.get(LN_BETA)?.clone(),
        })
    }

    pub fn insert_into(self, store: &mut ParamStore) {
        store.insert(W_C, self.w_c);
        store.insert(B_C, self.b_c);
        store.insert(LN_GAMMA, self.gamma);
        store.insert(LN_BETA, self.beta);
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        self.clone().insert_into(&mut s);
        s
    }
}

/// `softmax(B Bᵀ)`, square `L x L`.
pub fn self_attention_on(tape: &mut Tape, b: Var, scale: Option<f64>) -> Result<Var> {
    let bt = tape.transpose(b)?;
    let mut logits = tape.matmul(b, bt)?;
    if let Some(s) = scale {
        logits = tape.scale(logits, s)?;
    }
    tape.softmax_rows(logits)
}

/// Raw `B_T B_Sᵀ`.
pub fn inter_attention_on(tape: &mut Tape, b_t: Var, b_s: Var, scale: Option<f64>) -> Result<Var> {
    let (ht, hs) = (tape.value(b_t).cols(), tape.value(b_s).cols());
    if ht != hs {
        return Err(Error::shape(
            "inter_attention",
            tape.value(b_t).shape(),
            tape.value(b_s).shape(),
        ));
    }
    let bst = tape.transpose(b_s)?;
    let raw = tape.matmul(b_t, bst)?;
    match scale {
        Some(s) => tape.scale(raw, s),
        None => Ok(raw),
    }
}

/// `(Ã_TS, C'_S)` with `Ã_TS = A_T A_TS A_Sᵀ` and `C'_S = softmax(Ã_TS) B_S`.
pub fn self_adaptive_attention_on(
    tape: &mut Tape,
    a_t: Var,
    a_ts: Var,
    a_s: Var,
    b_s: Var,
) -> Result<(Var, Var)> {
    let left = tape.matmul(a_t, a_ts)?;
    let a_st = tape.transpose(a_s)?;
    let tilde = tape.matmul(left, a_st)?;
    let weights = tape.softmax_rows(tilde)?;
    let attended = tape.matmul(weights, b_s)?;
    Ok((tilde, attended))
}

/// Column-wise concatenation of the attended sources.
pub fn multilingual_attention_on(tape: &mut Tape, attended: &[Var]) -> Result<Var> {
    let first = attended
        .first()
        .ok_or_else(|| Error::Contract("multilingual attention needs at least one source".into()))?;
    let shape = tape.value(*first).shape().to_vec();
    for v in attended {
        if tape.value(*v).shape() != shape.as_slice() {
            return Err(Error::shape("multilingual_attention", &shape, tape.value(*v).shape()));
        }
    }
    if attended.len() == 1 {
        return Ok(*first);
    }
    tape.concat_cols(attended)
}

/// Handles for `W_C`, `b_C` and the layer-norm gain/shift.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w_c: Var,
    pub b_c: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl FusionVars {
    pub fn from_bound(bound: &BoundParams) -> Result<Self> {
        Ok(FusionVars {
            w_c: bound.var(W_C)?,
            b_c: bound.var(B_C)?,
            gamma: bound.var(LN_GAMMA)?,
            beta: bound.var(LN_BETA)?,
        })
    }
}

/// `(C, G_T)`. Without `c_prime` (no sources) `C` is absent and
/// `G_T = [B_T | LayerNorm(B_T)]`.
pub fn enhance_target_on(
    tape: &mut Tape,
    b_t: Var,
    c_prime: Option<Var>,
    p: FusionVars,
) -> Result<(Option<Var>, Var)> {
    let (c, residual) = match c_prime {
        Some(cp) => {
            let (w_in, cp_w) = (tape.value(p.w_c).rows(), tape.value(cp).cols());
            if w_in != cp_w {
                return Err(Error::shape(
                    "enhance_target",
                    tape.value(cp).shape(),
                    tape.value(p.w_c).shape(),
                ));
            }
            let c = tape.affine(cp, p.w_c, p.b_c)?;
            (Some(c), tape.add(b_t, c)?)
        }
        None => (None, b_t),
    };
    let normed = tape.layer_norm_rows(residual, p.gamma, p.beta, LAYER_NORM_EPS)?;
    let g = tape.concat_cols(&[b_t, normed])?;
    Ok((c, g))
}

/// Every intermediate of one fusion pass, as tape handles.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub a_t: Var,
    pub a_src: BTreeMap<String, Var>,
    pub a_t_src: BTreeMap<String, Var>,
    pub a_tilde: BTreeMap<String, Var>,
    pub c_src: BTreeMap<String, Var>,
    pub c_prime: Option<Var>,
    pub c: Option<Var>,
    pub g_t: Var,
}

/// Runs the full fusion stack. `encoded.sources` must either be empty
/// (monolingual fallback) or hold exactly `config.sources`.
pub fn fuse_on(
    tape: &mut Tape,
    encoded: &EncodedVars,
    params: FusionVars,
    config: &FusionConfig,
) -> Result<TraceVars> {
    let found: Vec<String> = encoded.sources.keys().cloned().collect();
    if !found.is_empty() && found != config.sources {
        return Err(Error::SourceMismatch {
            expected: config.sources.clone(),
            found,
        });
    }
    let h = tape.value(encoded.target).cols();
    let w_rows = tape.value(params.w_c).rows();
    if !found.is_empty() && w_rows != found.len() * h {
        return Err(Error::Contract(format!(
            "W_C expects {} input columns but {} sources of width {h} give {}",
            w_rows,
            found.len(),
            found.len() * h
        )));
    }
    let scale = config.logit_scale(h);

    let b_t = encoded.target;
    let a_t = self_attention_on(tape, b_t, scale)?;
    let mut trace = TraceVars {
        a_t,
        a_src: BTreeMap::new(),
        a_t_src: BTreeMap::new(),
        a_tilde: BTreeMap::new(),
        c_src: BTreeMap::new(),
        c_prime: None,
        c: None,
        g_t: b_t,
    };
    let mut attended = Vec::with_capacity(found.len());
    for lang in &found {
        let b_s = encoded.sources[lang];
        let a_s = self_attention_on(tape, b_s, scale)?;
        let a_ts = inter_attention_on(tape, b_t, b_s, scale)?;
        let (tilde, c_s) = self_adaptive_attention_on(tape, a_t, a_ts, a_s, b_s)?;
        trace.a_src.insert(lang.clone(), a_s);
        trace.a_t_src.insert(lang.clone(), a_ts);
        trace.a_tilde.insert(lang.clone(), tilde);
        trace.c_src.insert(lang.clone(), c_s);
        attended.push(c_s);
    }
    trace.c_prime = if attended.is_empty() {
        None
    } else {
        Some(multilingual_attention_on(tape, &attended)?)
    };
    let (c, g_t) = enhance_target_on(tape, b_t, trace.c_prime, params)?;
    trace.c = c;
    trace.g_t = g_t;
    Ok(trace)
}

/// Materialized [`TraceVars`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionTrace {
    pub a_t: Tensor,
    pub a_src: BTreeMap<String, Tensor>,
    pub a_t_src: BTreeMap<String, Tensor>,
    pub a_tilde: BTreeMap<String, Tensor>,
    pub c_src: BTreeMap<String, Tensor>,
    pub c_prime: Option<Tensor>,
    pub c: Option<Tensor>,
    pub g_t: Tensor,
}

impl FusionTrace {
    pub fn from_tape(tape: &Tape, vars: &TraceVars) -> Self {
        let get = |m: &BTreeMap<String, Var>| {
            m.iter()
                .map(|(k, v)| (k.clone(), tape.value(*v).clone()))
                .collect()
        };
        FusionTrace {
            a_t: tape.value(vars.a_t).clone(),
            a_src: get(&vars.a_src),
            a_t_src: get(&vars.a_t_src),
            a_tilde: get(&vars.a_tilde),
            c_src: get(&vars.c_src),
            c_prime: vars.c_prime.map(|v| tape.value(v).clone()),
            c: vars.c.map(|v| tape.value(v).clone()),
            g_t: tape.value(vars.g_t).clone(),
        }
    }
}

fn constant_params(tape: &mut Tape, params: &FusionParams) -> Result<FusionVars> {
    let bound = params.store().bind(tape, |_| false);
    FusionVars::from_bound(&bound)
}

pub fn self_attention(b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(b.clone());
    let out = self_attention_on(&mut tape, v, None)?;
    Ok(tape.value(out).clone())
}

pub fn inter_attention(b_t: &Tensor, b_s: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (t, s) = (tape.constant(b_t.clone()), tape.constant(b_s.clone()));
    let out = inter_attention_on(&mut tape, t, s, None)?;
    Ok(tape.value(out).clone())
}

pub fn self_adaptive_attention(
    a_t: &Tensor,
    a_ts: &Tensor,
    a_s: &Tensor,
    b_s: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = [a_t, a_ts, a_s, b_s].map(|t| tape.constant(t.clone()));
    let (tilde, c) = self_adaptive_attention_on(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok((tape.value(tilde).clone(), tape.value(c).clone()))
}

pub fn multilingual_attention(attended: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = attended.iter().map(|t| tape.constant(t.clone())).collect();
    let out = multilingual_attention_on(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Value-level [`enhance_target_on`], returning `G_T`.
pub fn enhance_target(b_t: &Tensor, c_prime: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = constant_params(&mut tape, params)?;
    let (bt, cp) = (tape.constant(b_t.clone()), tape.constant(c_prime.clone()));
    let (_, g) = enhance_target_on(&mut tape, bt, Some(cp), p)?;
    Ok(tape.value(g).clone())
}

pub fn fuse(batch: &EncodedBatch, params: &FusionParams, config: &FusionConfig) -> Result<FusionTrace> {
    batch.validate()?;
    let mut tape = Tape::new();
    let p = constant_params(&mut tape, params)?;
    let encoded = EncodedVars {
        target: tape.constant(batch.target.clone()),
        sources: batch
            .sources
            .iter()
            .map(|(l, t)| (l.clone(), tape.constant(t.clone())))
            .collect(),
    };
    let vars = fuse_on(&mut tape, &encoded, p, config)?;
    Ok(FusionTrace::from_tape(&tape, &vars))
}
