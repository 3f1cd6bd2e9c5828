//! Promptable longitudinal lesion segmentation on paired baseline/follow-up CT.
//!
//! The crate covers the pipeline around a per-lesion segmenter: prompt
//! channels ([`promptenc`]), center-aligned patch sampling ([`patcher`]),
//! pluggable backends and fold ensembling ([`segmenter`]), multilabel fusion
//! ([`fuse`]), group-wise evaluation ([`evalx`]) and a synthetic phantom
//! generator ([`synthgen`]). [`pipeline`] wires them into reproducible runs.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod case;
pub mod error;
pub mod evalx;
pub mod fuse;
pub mod patcher;
pub mod pipeline;
pub mod promptenc;
pub mod seeding;
pub mod segmenter;
pub mod synthgen;
pub mod volgrid;

pub use case::{CaseRecord, LesionPrompt};
pub use error::{Error, Result};
pub use patcher::{PatchPair, PatchSpec, Patcher};
pub use promptenc::{InputMode, NormalizationConfig, PointBlobConfig};
pub use seeding::RngStream;
pub use volgrid::{Volume3, VoxelIndex};
