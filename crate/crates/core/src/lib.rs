// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analysis engine for counting-failure diagnostics on residual-stream traces.
//!
//! Traces come from [`container`] files (or the synthetic [`fixture`]
//! generator); the analysis modules are [`probes`], [`lens`], [`decomp`],
//! [`attn`] and [`behavior`], and [`report`] joins them into a diagnosis.

pub mod attn;
pub mod behavior;
pub mod bundle;
pub mod container;
pub mod decomp;
pub mod error;
pub mod fixture;
pub mod lens;
pub mod probes;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod trace;

pub use error::{Error, Result};
pub use trace::ActivationTrace;
