//! `schedule.json`: staged training described on disk.
//!
//! ```json
//! {"stages": [{"data": "sib.jsonl", "hparams": "100,20,8,64", "multilingual": true},
//!             {"data": "train.jsonl", "hparams": "100,40,8,64", "multilingual": true}],
//!  "target_dev": "dev.jsonl",
//!  "encoder": {"hidden_dim": 16, "num_layers": 2, "num_heads": 2, "max_position": 64}}
//! ```
//!
//! Relative paths resolve against the schedule file's directory. `.jsonl`
//! data is a parallel corpus; anything else is SQuAD JSON in
//! `target_language`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_stages, Checkpoint, HyperParams, StageData};
use crate::corpus::load_dataset;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::FusionConfig;
use crate::metrics::EvalReport;
use crate::model::ModelConfig;
use crate::span::DEFAULT_MAX_ANSWER_LEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub data: PathBuf,
    pub hparams: HyperParams,
    #[serde(default)]
    pub multilingual: bool,
    /// Optional per-stage encoder settings; must agree with the schedule's
    /// hidden size since the encoder is shared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
}

fn default_language() -> String {
    "zh".into()
}

fn default_max_answer_len() -> usize {
    DEFAULT_MAX_ANSWER_LEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub target_dev: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_language")]
    pub target_language: String,
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Scale fusion logits by `1/sqrt(h)`.
    #[serde(default)]
    pub scaled: bool,
    #[serde(default = "default_max_answer_len")]
    pub max_answer_len: usize,
}

impl Schedule {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s: Schedule = serde_json::from_str(&text)
            .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for stage in &mut s.stages {
            stage.data = base.join(&stage.data);
        }
        s.target_dev = s.target_dev.map(|d| base.join(d));
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Contract("schedule has no stages".into()));
        }
        // the vocabulary size is settled when the model is built
        EncoderConfig {
            vocab_size: self.encoder.vocab_size.max(1),
            ..self.encoder.clone()
        }
        .validate()?;
        for (i, stage) in self.stages.iter().enumerate() {
            stage.hparams.validate()?;
            if let Some(enc) = &stage.encoder {
                if enc.hidden_dim != self.encoder.hidden_dim {
                    return Err(Error::HiddenMismatch(format!(
                        "stage {i} asks for h={} but the shared encoder has h={}",
                        enc.hidden_dim, self.encoder.hidden_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            fusion: FusionConfig {
                sources: Vec::new(),
                scaled: self.scaled,
            },
            freeze_encoder: self.freeze_encoder,
            max_answer_len: self.max_answer_len,
        }
    }

    /// Reads every stage's data.
    pub fn load_stages(&self) -> Result<Vec<StageData>> {
        self.stages
            .iter()
            .map(|s| {
                Ok(StageData {
                    label: s.data.display().to_string(),
                    examples: load_dataset(&s.data, &self.target_language)?,
                    hparams: s.hparams,
                    multilingual: s.multilingual,
                })
            })
            .collect()
    }
}

/// Runs every stage in order, then evaluates on `target_dev` if present.
pub fn run_schedule(schedule: &Schedule, seed: u64, exec: Exec) -> Result<(Checkpoint, Option<EvalReport>)> {
    schedule.validate()?;
    let stages = schedule.load_stages()?;
    let dev = match &schedule.target_dev {
        Some(p) => Some(load_dataset(p, &schedule.target_language)?),
        None => None,
    };
    run_stages(&stages, &schedule.model_config(), seed, exec, dev.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus_jsonl;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn loads_relative_paths_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&SynthConfig::default());
        write_corpus_jsonl(dir.path().join("train.jsonl"), &c.train[..4]).unwrap();
        write_corpus_jsonl(dir.path().join("dev.jsonl"), &c.dev[..2]).unwrap();
        let json = r#"{"stages":[{"data":"train.jsonl","hparams":"10,1,2,40","multilingual":true},
                                {"data":"train.jsonl","hparams":"10,1,4,40"}],
                      "target_dev":"dev.jsonl",
                      "encoder":{"vocab_size":0,"hidden_dim":8,"num_layers":1,"num_heads":1,"max_position":40}}"#;
        let path = dir.path().join("schedule.json");
        std::fs::write(&path, json).unwrap();
        let s = Schedule::load(&path).unwrap();
        assert_eq!(s.stages[0].data, dir.path().join("train.jsonl"));
        let (ck, report) = run_schedule(&s, 0, Exec::Sequential).unwrap();
        assert_eq!(ck.stage_index, 2);
        assert_eq!(report.unwrap().total, 2);
    }

    #[test]
    fn rejects_hidden_mismatch_and_empty() {
        let mut s: Schedule = serde_json::from_str(
            r#"{"stages":[{"data":"a.json","hparams":"1,1,1,8","encoder":{"vocab_size":10,"hidden_dim":32,"num_layers":1,"num_heads":1,"max_position":8}}]}"#,
        )
        .unwrap();
        assert!(matches!(s.validate(), Err(Error::HiddenMismatch(_))));
        s.stages.clear();
        assert!(s.validate().is_err());
    }
}
