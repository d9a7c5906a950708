//! The `(L, E, T, M)` hyperparameter tuple.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Unit of the learning-rate multiplier.
pub const RATE_UNIT: f64 = 1.0e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    /// `L`: the learning rate is `L × 1e-5`.
    pub lr_multiplier: f64,
    /// `E`
    pub epochs: usize,
    /// `T`
    pub batch_size: usize,
    /// `M`
    pub max_seq_len: usize,
}

impl HyperParams {
    pub fn learning_rate(&self) -> f64 {
        self.lr_multiplier * RATE_UNIT
    }

    /// Training-time check. Unlike [`parse_hparams`] this admits `L = 0`,
    /// a null update.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::HyperParams {
                input: self.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(self.lr_multiplier.is_finite() && self.lr_multiplier >= 0.0) {
            return bad("learning rate multiplier must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_seq_len == 0 {
            return bad("epochs, batch size and max length must be positive");
        }
        Ok(())
    }
}

impl fmt::Display for HyperParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.lr_multiplier, self.epochs, self.batch_size, self.max_seq_len
        )
    }
}

/// Parses `"L,E,T,M"`, e.g. `"2,2,12,128"`. All four must be positive; `E`,
/// `T` and `M` must be integers.
pub fn parse_hparams(text: &str) -> Result<HyperParams> {
    let err = |reason: String| Error::HyperParams {
        input: text.to_string(),
        reason,
    };
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(err(format!("expected 4 comma-separated values, found {}", parts.len())));
    }
    let lr: f64 = parts[0]
        .parse()
        .map_err(|_| err(format!("L={:?} is not a number", parts[0])))?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(err(format!("L={} must be positive", parts[0])));
    }
    let int = |i: usize, name: &str| -> Result<usize> {
        match parts[i].parse::<usize>() {
            Ok(0) | Err(_) => Err(err(format!("{name}={:?} must be a positive integer", parts[i]))),
            Ok(v) => Ok(v),
        }
    };
    Ok(HyperParams {
        lr_multiplier: lr,
        epochs: int(1, "E")?,
        batch_size: int(2, "T")?,
        max_seq_len: int(3, "M")?,
    })
}

impl FromStr for HyperParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_hparams(s)
    }
}

impl Serialize for HyperParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for HyperParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_hparams(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tuples() {
        let hp = parse_hparams("2,2,12,128").unwrap();
        assert_eq!(hp.learning_rate(), 2.0e-5);
        assert_eq!((hp.epochs, hp.batch_size, hp.max_seq_len), (2, 12, 128));
        assert_eq!(parse_hparams("2,2,12,160").unwrap().max_seq_len, 160);
        assert_eq!(parse_hparams("1,1,1,8").unwrap().learning_rate(), 1.0e-5);
        assert_eq!(parse_hparams(" 3.5, 1 ,4,16").unwrap().learning_rate(), 3.5 * 1.0e-5);
    }

    #[test]
    fn rejects_bad_input_quoting_it() {
        for bad in ["2,2,12", "0,2,12,128", "2,0,12,128", "2,2,-1,128", "x,2,12,128", "2,2.5,12,128", ""] {
            match parse_hparams(bad) {
                Err(Error::HyperParams { input, .. }) => assert_eq!(input, bad),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn serde_uses_the_tuple_string() {
        let hp = parse_hparams("2,2,12,128").unwrap();
        let json = serde_json::to_string(&hp).unwrap();
        assert_eq!(json, "\"2,2,12,128\"");
        assert_eq!(serde_json::from_str::<HyperParams>(&json).unwrap(), hp);
    }

    #[test]
    fn zero_rate_is_valid_for_training_only() {
        let hp = HyperParams {
            lr_multiplier: 0.0,
            epochs: 1,
            batch_size: 1,
            max_seq_len: 8,
        };
        hp.validate().unwrap();
        assert!(parse_hparams(&hp.to_string()).is_err());
    }
}
