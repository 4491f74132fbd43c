//! Stable feature-interaction learning for factorization-machine CTR models.
//!
//! The crate trains FM-family click models across chronologically split
//! environments and separates environment-invariant interaction parameters
//! (`phi_s`) from environment-specific ones (`phi_t`). Only the invariant part
//! is used at inference time.
//!
//! Everything here is `no_std` + `alloc`: parsing operates on text that the
//! caller has already read, randomness is always passed in, and file formats
//! live in the `stable-fi` companion crate.
//!
//! Module map:
//!
//! * [`data`]: schema, instances, environments, chronological splits, batches.
//! * [`synth`]: synthetic stable base data plus spurious / dynamic-causal
//!   injection.
//! * [`model`]: FM, field-level FM, DIL and LightDIL forward passes with
//!   analytic gradients.
//! * [`objective`]: per-environment risks, risk variance, softmax
//!   environment weights, the environment-specific regularizer, V-REx and
//!   Group-DRO objectives.
//! * [`optim`]: sparse Adam.
//! * [`trainer`]: ERM, robust baselines and the alternating DIL loop.
//! * [`metrics`]: AUC, logloss and per-split reports.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod synth;
pub mod trainer;

mod math;

pub use data::{Batch, EnvId, EnvironmentDataset, Feature, FeatureSchema, Instance, SplitPlan};
pub use error::{Error, Result};
pub use model::{GradientSet, ModelKind, ModelState, ParamGroup, Scope};
