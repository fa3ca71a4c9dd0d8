//! Transfer an arbitrary symbolic (MIDI) piece toward a single favorite piece.
//!
//! The pipeline: parse MIDI into a [`midi::Score`], tokenize the melody track
//! with the REMI event codec ([`remi`]), fine-tune a small autoregressive
//! token model with a favorite-aware weighted loss ([`predictor`]), extract a
//! signature pattern from the favorite and force its interval shape into the
//! decoded output ([`pattern`], [`transfer`]), then score the result with
//! distribution-overlap and pattern-similarity metrics ([`metrics`]).
//!
//! [`pipeline`] chains the stages into a reproducible run directory; the
//! `favtune` binary is a thin wrapper over it.

pub mod corpus;
pub mod metrics;
pub mod midi;
pub mod pattern;
pub mod pipeline;
pub mod predictor;
pub mod remi;
pub mod storage;
pub mod transfer;
