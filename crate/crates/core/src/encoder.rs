//! Per-language contextual states.
//!
//! A small post-norm transformer stands in for a pretrained multilingual
//! encoder: one parameter set encodes every language. States computed
//! elsewhere can be injected through the precomputed-state file instead.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, TokenizedExample, PAD_ID};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_position: usize,
    /// Inner width of the feed-forward block; `0` means `4 * hidden_dim`.
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 256,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            max_position: 64,
            ffn_dim: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.vocab_size,
            self.hidden_dim,
            self.num_heads,
            self.max_position,
        ]
        .iter()
        .all(|&v| v > 0);
        if !all_positive {
            return Err(Error::Contract(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Contract(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.hidden_dim
        } else {
            self.ffn_dim
        }
    }

    fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("encoder.layers.{layer}.{part}")
}

/// Adds freshly initialized encoder parameters to `store`.
pub fn init_params<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R, store: &mut ParamStore) {
    let h = config.hidden_dim;
    let f = config.ffn_width();
    store.insert("encoder.tok_emb", Tensor::uniform(&[config.vocab_size, h], 0.5, rng));
    store.insert("encoder.pos_emb", Tensor::uniform(&[config.max_position, h], 0.1, rng));
    let bound_h = 1.0 / (h as f64).sqrt();
    let bound_f = 1.0 / (f as f64).sqrt();
    for l in 0..config.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(layer_name(l, w), Tensor::uniform(&[h, h], bound_h, rng));
        }
        for b in ["bq", "bk", "bv", "bo", "b2", "ln1_b", "ln2_b"] {
            store.insert(layer_name(l, b), Tensor::zeros(&[h]));
        }
        store.insert(layer_name(l, "w1"), Tensor::uniform(&[h, f], bound_h, rng));
        store.insert(layer_name(l, "b1"), Tensor::zeros(&[f]));
        store.insert(layer_name(l, "w2"), Tensor::uniform(&[f, h], bound_f, rng));
        store.insert(layer_name(l, "ln1_g"), Tensor::ones(&[h]));
        store.insert(layer_name(l, "ln2_g"), Tensor::ones(&[h]));
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Encodes one sequence on `tape`, returning its `L x h` states.
pub fn encode_on(
    tape: &mut Tape,
    params: &BoundParams,
    config: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<Var> {
    let len = seq.token_ids.len();
    if len > config.max_position {
        return Err(Error::SequenceTooLong {
            len,
            max: config.max_position,
        });
    }
    if let Some(&id) = seq.token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }

    let tok = tape.gather_rows(params.var("encoder.tok_emb")?, &seq.token_ids)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(params.var("encoder.pos_emb")?, &positions)?;
    let mut x = tape.add(tok, pos)?;

    // An all-padding sequence attends everywhere rather than nowhere.
    let key_mask: Vec<bool> = seq.token_ids.iter().map(|&id| id != PAD_ID).collect();
    let key_mask = key_mask.iter().any(|&k| k).then_some(key_mask);

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..config.num_layers {
        let p = |part: &str| params.var(&layer_name(l, part));
        let q = tape.affine(x, p("wq")?, p("bq")?)?;
        let k = tape.affine(x, p("wk")?, p("bk")?)?;
        let v = tape.affine(x, p("wv")?, p("bv")?)?;
        let mut heads = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let (a, b) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = match &key_mask {
                Some(m) => tape.masked_softmax_rows(scores, m.clone())?,
                None => tape.softmax_rows(scores)?,
            };
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn = tape.affine(ctx, p("wo")?, p("bo")?)?;
        let res = tape.add(x, attn)?;
        x = tape.layer_norm_rows(res, p("ln1_g")?, p("ln1_b")?, LAYER_NORM_EPS)?;

        let hidden = tape.affine(x, p("w1")?, p("b1")?)?;
        let hidden = tape.gelu(hidden)?;
        let ffn = tape.affine(hidden, p("w2")?, p("b2")?)?;
        let res = tape.add(x, ffn)?;
        x = tape.layer_norm_rows(res, p("ln2_g")?, p("ln2_b")?, LAYER_NORM_EPS)?;
    }
    Ok(x)
}

/// Value-level [`encode_on`].
pub fn encode(seq: &TokenSequence, params: &ParamStore, config: &EncoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let out = encode_on(&mut tape, &bound, config, seq)?;
    Ok(tape.value(out).clone())
}

/// Contextual states of one example: the target plus every source language.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub target_lang: String,
    pub target: Tensor,
    pub sources: BTreeMap<String, Tensor>,
}

impl EncodedBatch {
    pub fn new(target_lang: impl Into<String>, target: Tensor, sources: BTreeMap<String, Tensor>) -> Result<Self> {
        let batch = EncodedBatch {
            target_lang: target_lang.into(),
            target,
            sources,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn hidden_dim(&self) -> usize {
        self.target.cols()
    }

    /// All matrices must be 2-D and share one hidden size.
    pub fn validate(&self) -> Result<()> {
        self.target.expect_matrix("encoded target")?;
        let h = self.hidden_dim();
        for (lang, t) in &self.sources {
            let (_, cols) = t.expect_matrix("encoded source")?;
            if cols != h {
                return Err(Error::HiddenMismatch(format!(
                    "{} has h={h} but {lang} has h={cols}",
                    self.target_lang
                )));
            }
        }
        Ok(())
    }

    pub fn lengths(&self) -> BTreeMap<&str, usize> {
        std::iter::once((self.target_lang.as_str(), self.target.rows()))
            .chain(self.sources.iter().map(|(l, t)| (l.as_str(), t.rows())))
            .collect()
    }
}

/// Tape handles for an encoded example.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub target: Var,
    pub sources: BTreeMap<String, Var>,
}

pub fn encode_batch_on(
    tape: &mut Tape,
    params: &BoundParams,
    config: &EncoderConfig,
    example: &TokenizedExample,
) -> Result<EncodedVars> {
    let target = encode_on(tape, params, config, &example.target)?;
    let sources = example
        .sources
        .iter()
        .map(|(lang, seq)| Ok((lang.clone(), encode_on(tape, params, config, seq)?)))
        .collect::<Result<_>>()?;
    Ok(EncodedVars { target, sources })
}

pub fn encode_batch(
    example: &TokenizedExample,
    target_lang: &str,
    params: &ParamStore,
    config: &EncoderConfig,
) -> Result<EncodedBatch> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let vars = encode_batch_on(&mut tape, &bound, config, example)?;
    EncodedBatch::new(
        target_lang,
        tape.value(vars.target).clone(),
        vars.sources
            .iter()
            .map(|(l, &v)| (l.clone(), tape.value(v).clone()))
            .collect(),
    )
}

#[derive(Serialize, Deserialize)]
struct StateMatrix {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StateLine {
    id: String,
    states: BTreeMap<String, StateMatrix>,
}

/// Appends `(id, batch)` records to a precomputed-state JSON Lines file.
pub fn write_precomputed(path: impl AsRef<Path>, records: &[(&str, &EncodedBatch)]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for (id, batch) in records {
        let states = std::iter::once((&batch.target_lang, &batch.target))
            .chain(batch.sources.iter())
            .map(|(lang, t)| {
                (
                    lang.clone(),
                    StateMatrix {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_writer(
            &mut buf,
            &StateLine {
                id: id.to_string(),
                states,
            },
        )?;
        buf.push(b'\n');
    }
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Reads the states stored for `example_id`; `target_lang` names which entry
/// is the target.
pub fn load_precomputed(path: impl AsRef<Path>, example_id: &str, target_lang: &str) -> Result<EncodedBatch> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StateLine = serde_json::from_str(&line)?;
        if rec.id != example_id {
            continue;
        }
        let mut states = BTreeMap::new();
        for (lang, m) in rec.states {
            if m.shape.len() != 2 {
                return Err(Error::Contract(format!(
                    "state of {lang} in {example_id} is not a matrix: {:?}",
                    m.shape
                )));
            }
            states.insert(lang, Tensor::new(m.shape, m.values)?);
        }
        let target = states.remove(target_lang).ok_or_else(|| Error::MissingLanguage {
            id: example_id.to_string(),
            lang: target_lang.to_string(),
        })?;
        return EncodedBatch::new(target_lang, target, states);
    }
    Err(Error::MissingId(example_id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_input, Answer, ParallelExample, RawExample, SourceText, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize) -> (EncoderConfig, ParamStore) {
        let config = EncoderConfig {
            vocab_size: 20,
            num_layers: layers,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        init_params(&config, &mut ChaCha8Rng::seed_from_u64(7), &mut store);
        (config, store)
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence {
            tokens: ids.iter().map(|i| i.to_string()).collect(),
            token_ids: ids.to_vec(),
            segment_ids: vec![0; ids.len()],
            passage_range: 0..ids.len(),
            answer_span: None,
            answer_status: crate::corpus::AnswerStatus::NotApplicable,
            unknown_tokens: 0,
        }
    }

    #[test]
    fn single_token_shape() {
        let (c, p) = setup(2);
        assert_eq!(encode(&seq(&[5]), &p, &c).unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn zero_layers_is_embedding_sum() {
        let (c, p) = setup(0);
        let out = encode(&seq(&[4, 9]), &p, &c).unwrap();
        let tok = p.get("encoder.tok_emb").unwrap();
        let pos = p.get("encoder.pos_emb").unwrap();
        for (r, &id) in [4usize, 9].iter().enumerate() {
            for j in 0..16 {
                assert_eq!(out.get(r, j), tok.get(id, j) + pos.get(r, j));
            }
        }
    }

    #[test]
    fn deterministic_and_finite_on_padding() {
        let (c, p) = setup(2);
        let a = encode(&seq(&[2, 7, 3, 8, 3]), &p, &c).unwrap();
        let b = encode(&seq(&[2, 7, 3, 8, 3]), &p, &c).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(encode(&seq(&[0, 0, 0]), &p, &c).unwrap().is_finite());
    }

    #[test]
    fn range_errors() {
        let (c, p) = setup(1);
        assert!(matches!(
            encode(&seq(&[25]), &p, &c),
            Err(Error::TokenOutOfRange { id: 25, .. })
        ));
        assert!(matches!(
            encode(&seq(&[4; 65]), &p, &c),
            Err(Error::SequenceTooLong { len: 65, max: 64 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 0;
        assert!(c.validate().is_err());
    }

    fn parallel() -> ParallelExample {
        let mut ex = ParallelExample::monolingual(RawExample {
            id: "p".into(),
            passage: "他是王".into(),
            question: "谁".into(),
            answers: vec![Answer {
                text: "王".into(),
                answer_start: 2,
            }],
            language: "zh".into(),
            is_impossible: false,
        });
        ex.sources.insert(
            "en".into(),
            SourceText {
                passage: "he is wang, yes".into(),
                question: "who".into(),
            },
        );
        ex.sources.insert(
            "ja".into(),
            SourceText {
                passage: "彼は王だ".into(),
                question: "誰".into(),
            },
        );
        ex
    }

    #[test]
    fn batch_shapes_follow_sequence_lengths() {
        let (mut c, _) = setup(2);
        let ex = parallel();
        let vocab = Vocabulary::build(crate::corpus::corpus_tokens(std::slice::from_ref(&ex)), 1);
        c.vocab_size = vocab.len();
        let mut p = ParamStore::new();
        init_params(&c, &mut ChaCha8Rng::seed_from_u64(1), &mut p);
        let tok = TokenizedExample::new(&ex, &vocab, 32).unwrap();
        let batch = encode_batch(&tok, "zh", &p, &c).unwrap();
        assert_eq!(batch.target.shape(), &[7, 16]);
        assert_eq!(batch.sources["en"].shape(), &[9, 16]);
        assert_eq!(batch.sources["ja"].shape(), &[8, 16]);
        assert_eq!(encode_batch(&tok, "zh", &p, &c).unwrap(), batch);

        let mono = encode_batch(&tok.clone().monolingual(), "zh", &p, &c).unwrap();
        assert!(mono.sources.is_empty());
        assert_eq!(mono.target, batch.target);
    }

    #[test]
    fn language_identity_only_through_tokens() {
        let (c, p) = setup(2);
        let ex = parallel();
        let vocab = Vocabulary::build(crate::corpus::corpus_tokens(std::slice::from_ref(&ex)), 1);
        let zh = encode_input(&ex, "zh", &vocab, 32).unwrap();
        let mut relabeled = ex.clone();
        relabeled.sources.insert(
            "ko".into(),
            SourceText {
                passage: ex.target.passage.clone(),
                question: ex.target.question.clone(),
            },
        );
        let ko = encode_input(&relabeled, "ko", &vocab, 32).unwrap();
        assert_eq!(encode(&zh, &p, &c).unwrap(), encode(&ko, &p, &c).unwrap());
    }

    #[test]
    fn precomputed_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("states.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sources = BTreeMap::new();
        sources.insert("en".to_string(), Tensor::uniform(&[4, 16], 1.0, &mut rng));
        let batch = EncodedBatch::new("zh", Tensor::uniform(&[3, 16], 1.0, &mut rng), sources).unwrap();
        write_precomputed(&path, &[("a", &batch)]).unwrap();
        assert_eq!(load_precomputed(&path, "a", "zh").unwrap(), batch);
        assert!(matches!(
            load_precomputed(&path, "nope", "zh"),
            Err(Error::MissingId(id)) if id == "nope"
        ));

        let bad = r#"{"id":"b","states":{"zh":{"shape":[1,16],"values":[0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]},"en":{"shape":[1,32],"values":[0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]}}}"#;
        std::fs::write(&path, format!("{bad}\n")).unwrap();
        assert!(matches!(
            load_precomputed(&path, "b", "zh"),
            Err(Error::HiddenMismatch(_))
        ));
    }
}
