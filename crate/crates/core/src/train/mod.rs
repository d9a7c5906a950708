//! Optimization, staged schedules, checkpoints and batch prediction.

mod adam;
mod checkpoint;
mod hparams;
mod schedule;

pub use adam::{Adam, AdamSettings, BETA1, BETA2, EPSILON};
pub use checkpoint::{fingerprint, Checkpoint};
pub use hparams::{parse_hparams, HyperParams, RATE_UNIT};
pub use schedule::{run_schedule, Schedule, StageSpec};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{corpus_languages, corpus_tokens, gold_answers, ParallelExample, RawExample, TokenizedExample, Vocabulary};
use crate::encoder::is_encoder_param;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::FusionConfig;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ModelConfig, XlrcModel};

/// Loss history of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub data: String,
    pub multilingual: bool,
    /// Mean loss over the stage's data before the first update.
    pub initial_loss: f64,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// One stage with its data already loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct StageData {
    pub label: String,
    pub examples: Vec<ParallelExample>,
    pub hparams: HyperParams,
    pub multilingual: bool,
}

/// Seed of the `index`-th stage (counted across checkpoint hand-offs).
pub fn stage_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(1 + index as u64)
}

/// Tokenizes a stage's data. Multilingual stages switch the model to their
/// source set (see [`XlrcModel::adapt_sources`]) and require every example to
/// carry every source.
pub fn prepare_stage(
    model: &mut XlrcModel,
    examples: &[ParallelExample],
    hparams: &HyperParams,
    multilingual: bool,
    seed: u64,
) -> Result<Vec<TokenizedExample>> {
    if multilingual {
        let langs = corpus_languages(examples);
        if langs.is_empty() {
            return Err(Error::Contract("multilingual stage has no source translations".into()));
        }
        for ex in examples {
            if let Some(lang) = langs.iter().find(|l| !ex.sources.contains_key(*l)) {
                return Err(Error::MissingLanguage {
                    id: ex.id().to_string(),
                    lang: lang.clone(),
                });
            }
        }
        model.adapt_sources(&langs, seed)?;
    }
    if hparams.max_seq_len > model.config.encoder.max_position {
        log::warn!(
            "max_seq_len {} exceeds the encoder's {} positions; inputs are cut to {}",
            hparams.max_seq_len,
            model.config.encoder.max_position,
            model.config.encoder.max_position
        );
    }
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let t = model.tokenize(ex, hparams.max_seq_len, multilingual)?;
        if t.target.is_trainable() {
            out.push(t);
        } else {
            log::warn!("skipping {}: answer {:?}", t.id, t.target.answer_status);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no trainable examples in stage".into()));
    }
    Ok(out)
}

/// Trains `model` on one stage for `E` epochs with a fresh Adam. Batch order
/// is a seeded shuffle per epoch.
pub fn train_stage(
    model: &mut XlrcModel,
    data: &StageData,
    stage: usize,
    seed: u64,
    exec: Exec,
) -> Result<(StageLog, Adam)> {
    let hp = data.hparams;
    hp.validate()?;
    let examples = prepare_stage(model, &data.examples, &hp, data.multilingual, seed)?;
    let initial_loss = model.loss(&examples)?;
    log::info!("stage {stage} ({}): {} examples, initial loss {initial_loss:.6}", data.label, examples.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(hp.learning_rate());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let frozen = model.config.freeze_encoder;
    let trainable = |n: &str| !(frozen && is_encoder_param(n));
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<TokenizedExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = model.batch_gradients(&batch, exec)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { stage, epoch, batch: b });
            }
            adam.step(&mut model.params, &grads, trainable);
            total += loss * batch.len() as f64;
        }
        let mean = total / examples.len() as f64;
        log::info!("stage {stage} epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let log = StageLog {
        data: data.label.clone(),
        multilingual: data.multilingual,
        initial_loss,
        epoch_losses,
    };
    Ok((log, adam))
}

/// Fresh model whose vocabulary covers every training stage. The encoder's
/// embedding table grows to the vocabulary when needed; the initial source
/// set is that of the first multilingual stage.
pub fn init_model(stages: &[StageData], base: &ModelConfig, seed: u64) -> Result<XlrcModel> {
    if stages.is_empty() {
        return Err(Error::Contract("a schedule needs at least one stage".into()));
    }
    let all: Vec<ParallelExample> = stages.iter().flat_map(|s| s.examples.iter().cloned()).collect();
    let vocab = Vocabulary::build(corpus_tokens(&all), 1);
    let mut config = base.clone();
    if config.encoder.vocab_size < vocab.len() {
        log::info!("encoder vocabulary grows from {} to {}", config.encoder.vocab_size, vocab.len());
        config.encoder.vocab_size = vocab.len();
    }
    let sources = stages
        .iter()
        .find(|s| s.multilingual)
        .map(|s| corpus_languages(&s.examples))
        .unwrap_or_default();
    config.fusion = FusionConfig {
        sources: FusionConfig::new(sources).sources,
        scaled: base.fusion.scaled,
    };
    XlrcModel::init(config, vocab, seed)
}

/// Continues `checkpoint` through `stages`; parameters carry over.
pub fn train_stages(mut checkpoint: Checkpoint, stages: &[StageData], exec: Exec) -> Result<Checkpoint> {
    for data in stages {
        let index = checkpoint.stage_index;
        let seed = stage_seed(checkpoint.seed, index);
        let (log, adam) = train_stage(&mut checkpoint.model, data, index, seed, exec)?;
        checkpoint.history.push(log);
        checkpoint.optimizer = Some(adam);
        checkpoint.stage_index += 1;
        checkpoint.max_seq_len = data.hparams.max_seq_len;
    }
    Ok(checkpoint)
}

/// Initializes from `seed`, trains through every stage, and evaluates on
/// `dev` when given.
pub fn run_stages(
    stages: &[StageData],
    base: &ModelConfig,
    seed: u64,
    exec: Exec,
    dev: Option<&[ParallelExample]>,
) -> Result<(Checkpoint, Option<EvalReport>)> {
    let model = init_model(stages, base, seed)?;
    let start = Checkpoint {
        model,
        optimizer: None,
        seed,
        stage_index: 0,
        max_seq_len: stages[0].hparams.max_seq_len,
        history: Vec::new(),
    };
    let checkpoint = train_stages(start, stages, exec)?;
    let report = match dev {
        Some(dev) => Some(evaluate_examples(&checkpoint.model, dev, checkpoint.max_seq_len, exec)?),
        None => None,
    };
    Ok((checkpoint, report))
}

/// Whether `example` takes the multilingual path. Examples with exactly the
/// model's sources do; examples without sources, or any example when the
/// model has none, use the fallback.
fn use_sources(model: &XlrcModel, example: &ParallelExample) -> Result<bool> {
    if model.sources().is_empty() || example.sources.is_empty() {
        return Ok(false);
    }
    let found = example.source_languages();
    if found != model.sources() {
        return Err(Error::SourceMismatch {
            expected: model.sources().to_vec(),
            found,
        });
    }
    Ok(true)
}

/// Tokenized input of `example` as prediction sees it.
pub fn prediction_input(model: &XlrcModel, example: &ParallelExample, max_len: usize) -> Result<TokenizedExample> {
    model.tokenize(example, max_len, use_sources(model, example)?)
}

/// Decoded answer per question id.
pub fn predict_examples(
    model: &XlrcModel,
    examples: &[ParallelExample],
    max_len: usize,
    exec: Exec,
) -> Result<BTreeMap<String, String>> {
    let mut ids = BTreeSet::new();
    for ex in examples {
        if !ids.insert(ex.id()) {
            return Err(Error::DuplicateId(ex.id().to_string()));
        }
    }
    let tokenized = examples
        .iter()
        .map(|ex| prediction_input(model, ex, max_len))
        .collect::<Result<Vec<_>>>()?;
    let (unknown, total) = tokenized
        .iter()
        .flat_map(|t| std::iter::once(&t.target).chain(t.sources.values()))
        .fold((0, 0), |(u, n), s| (u + s.unknown_tokens, n + s.len()));
    if unknown > 0 {
        log::warn!(
            "vocabulary coverage {:.2}%: {unknown} of {total} tokens mapped to [UNK]",
            100.0 * (total - unknown) as f64 / total as f64
        );
    }
    let answers = exec.try_map(&tokenized, |_, t| match model.predict(t) {
        Ok(p) => Ok(p.answer_text),
        Err(Error::EmptyPassage) => {
            log::warn!("{}: no passage tokens left after truncation", t.id);
            Ok(String::new())
        }
        Err(e) => Err(e),
    })?;
    Ok(tokenized.into_iter().map(|t| t.id).zip(answers).collect())
}

/// Predicts `examples` and scores them against their target answers.
pub fn evaluate_examples(model: &XlrcModel, examples: &[ParallelExample], max_len: usize, exec: Exec) -> Result<EvalReport> {
    let preds: HashMap<String, String> = predict_examples(model, examples, max_len, exec)?.into_iter().collect();
    let targets: Vec<RawExample> = examples.iter().map(|e| e.target.clone()).collect();
    evaluate(&preds, &gold_answers(&targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{generate, SynthConfig};

    fn base() -> ModelConfig {
        ModelConfig::new(
            EncoderConfig {
                vocab_size: 0,
                hidden_dim: 8,
                num_layers: 1,
                num_heads: 2,
                max_position: 40,
                ffn_dim: 0,
            },
            FusionConfig::default(),
        )
    }

    fn stage(examples: Vec<ParallelExample>, hp: &str, multilingual: bool) -> StageData {
        StageData {
            label: "synth".into(),
            examples,
            hparams: parse_hparams(hp).unwrap(),
            multilingual,
        }
    }

    #[test]
    fn memorizes_one_example() {
        let c = generate(&SynthConfig::default());
        let s = stage(c.train[..1].to_vec(), "1000,50,1,40", true);
        let (ck, report) = run_stages(&[s.clone()], &base(), 1, Exec::Sequential, Some(&c.train[..1])).unwrap();
        let log = &ck.history[0];
        assert_eq!(log.epoch_losses.len(), 50);
        assert!(*log.epoch_losses.last().unwrap() < 0.01, "{log:?}");
        assert_eq!(report.unwrap().em, 100.0);
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let c = generate(&SynthConfig::default());
        let mut s = stage(c.train[..4].to_vec(), "1,2,2,40", true);
        s.hparams.lr_multiplier = 0.0;
        let model = init_model(&[s.clone()], &base(), 5).unwrap();
        let mut trained = model.clone();
        train_stage(&mut trained, &s, 0, 9, Exec::Sequential).unwrap();
        assert_eq!(trained.params, model.params);
    }

    #[test]
    fn same_seed_same_log_and_exec_independent() {
        let c = generate(&SynthConfig::default());
        let s = [stage(c.train[..6].to_vec(), "50,3,4,40", true)];
        let (a, _) = run_stages(&s, &base(), 2, Exec::Sequential, None).unwrap();
        let (b, _) = run_stages(&s, &base(), 2, Exec::Parallel, None).unwrap();
        assert_eq!(a, b);
        let (c2, _) = run_stages(&s, &base(), 3, Exec::Sequential, None).unwrap();
        assert_ne!(a.history, c2.history);
    }

    #[test]
    fn chaining_composes() {
        let c = generate(&SynthConfig::default());
        let a = stage(c.sibling[..6].to_vec(), "50,2,3,40", true);
        let b = stage(c.train[..4].to_vec(), "50,2,2,40", false);
        let both = [a.clone(), b.clone()];
        let (joint, _) = run_stages(&both, &base(), 4, Exec::Sequential, None).unwrap();
        // same vocabulary and initialization, then an explicit hand-off
        let start = Checkpoint {
            model: init_model(&both, &base(), 4).unwrap(),
            optimizer: None,
            seed: 4,
            stage_index: 0,
            max_seq_len: 40,
            history: vec![],
        };
        let after_a = train_stages(start, &[a], Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        after_a.save(dir.path()).unwrap();
        let resumed = train_stages(Checkpoint::load(dir.path()).unwrap(), &[b], Exec::Sequential).unwrap();
        assert_eq!(resumed, joint);
    }

    #[test]
    fn multilingual_stage_requires_every_source() {
        let c = generate(&SynthConfig::default());
        let mut ex = c.train[..2].to_vec();
        ex[1].sources.remove("ja");
        let s = stage(ex, "1,1,1,40", true);
        let mut m = init_model(&[s.clone()], &base(), 0).unwrap();
        assert!(matches!(
            train_stage(&mut m, &s, 0, 0, Exec::Sequential),
            Err(Error::MissingLanguage { .. })
        ));
    }

    #[test]
    fn prediction_paths_and_empty_dataset() {
        let c = generate(&SynthConfig::default());
        let s = stage(c.train[..2].to_vec(), "1,1,1,40", true);
        let m = init_model(&[s], &base(), 0).unwrap();
        assert!(predict_examples(&m, &[], 40, Exec::Sequential).unwrap().is_empty());
        let mono: Vec<_> = c.dev.iter().map(|e| ParallelExample::monolingual(e.target.clone())).collect();
        assert_eq!(predict_examples(&m, &mono, 40, Exec::Sequential).unwrap().len(), 16);
        let mut partial = c.dev[0].clone();
        partial.sources.remove("en");
        assert!(matches!(
            predict_examples(&m, &[partial], 40, Exec::Sequential),
            Err(Error::SourceMismatch { .. })
        ));
        let dup = vec![c.dev[0].clone(), c.dev[0].clone()];
        assert!(matches!(predict_examples(&m, &dup, 40, Exec::Sequential), Err(Error::DuplicateId(_))));
    }
}
