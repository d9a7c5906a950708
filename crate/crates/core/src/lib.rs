//! Multilingual span-extraction reading comprehension.
//!
//! The pipeline runs in five layers:
//!
//! * [`corpus`] reads SQuAD-format data, builds parallel corpora from
//!   translations, and formats `[CLS] question [SEP] passage [SEP]` inputs.
//! * [`encoder`] turns each language's token sequence into contextual states
//!   with one shared parameter set, or loads precomputed states.
//! * [`fusion`] relates the target states to every source language through
//!   self-adaptive attention, concatenates the attended sources, and projects
//!   them back onto the target with a residual layer norm.
//! * [`span`] predicts start/end distributions, the cross-entropy loss and
//!   the decoded answer span.
//! * [`train`] optimizes everything end to end over staged schedules;
//!   [`metrics`] scores predictions with F1 and exact match.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod span;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
