// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by model loading, decoding, metrics, and statistics.
#[derive(Debug, Error)]
pub enum Error {
    /// A file or message does not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A tensor or vector has the wrong dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// The prompt or context does not fit in the model's window.
    #[error("capacity error: {needed} tokens exceed the context limit of {limit}")]
    Capacity {
        /// Tokens required.
        needed: usize,
        /// Maximum context length of the model.
        limit: usize,
    },

    /// An index is outside a trace, layer range, or vocabulary.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// A carrier or chat prompt is malformed (e.g. placeholder count).
    #[error("prompt error: {0}")]
    Prompt(String),

    /// Invalid argument to an operation.
    #[error("input error: {0}")]
    Input(String),

    /// `‖h + α·h′‖₂` vanished at a steering position.
    #[error("singularity at position {position}: steered vector has zero norm")]
    Singular {
        /// Generation position of the failed update.
        position: usize,
    },

    /// Generated text could not be parsed (e.g. missing answer delimiter).
    #[error("parse error: {0}")]
    Parse(String),

    /// Missing or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a dataset invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A statistic or clustering is undefined for the given data.
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// Failure talking to a remote model runtime.
    #[error("bridge error: {0}")]
    Bridge(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
