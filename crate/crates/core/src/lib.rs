// SPDX-License-Identifier: MIT OR Apache-2.0

//! Belief measurement and steering on instrumented language models.

pub mod bridge;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod neurofeedback;
pub mod patchscope;
pub mod presets;
pub mod stats;
pub mod steering;

pub use error::{Error, Result};
