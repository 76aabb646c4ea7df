// SPDX-License-Identifier: MIT OR Apache-2.0

//! The instrumented language-model contract.
//!
//! An [`InstrumentedLM`] generates text while recording the residual stream
//! at every generated position and every layer (`0` is the embedding output,
//! `1..=L` the block outputs), decodes arbitrary vectors through a carrier
//! prompt, and accepts norm-preserving additive interventions.
//!
//! Three implementations ship with the crate:
//!
//! - [`TinyTransformer`]: a deterministic pre-norm decoder-only transformer.
//! - [`ScriptedMock`]: a scripted model whose hidden states are sums of
//!   orthogonal belief codes, so every observable has a closed form.
//! - [`crate::bridge::BridgeClient`]: a wire-protocol client for external
//!   runtimes.

mod mock;
mod sampling;
pub mod tokenizer;
mod tiny;
mod weights;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mock::{
    ChannelEntry, InjectedResponse, MockScenario, PromptBackground, ScriptedMock,
    ScriptedMockSpec,
};
pub use sampling::derive_seed;
pub use tiny::TinyTransformer;
pub use tokenizer::Tokenizer;

/// Token id.
pub type TokenId = u32;

/// The delimiter that separates reasoning from the final action.
pub const ANSWER_DELIMITER: &str = "Final answer:";

/// Neutral carrier prompt used for patched decoding; `x` is the placeholder.
pub const CARRIER_TEXT: &str = "Sure, I'll tell you about x";

/// Placeholder token text (compared after trimming whitespace).
pub const PLACEHOLDER: &str = "x";

/// Number of tokens generated by a patched decode.
pub const PATCHED_DECODE_TOKENS: usize = 20;

/// Temperature used for patched decodes and seeded experiments.
pub const SAMPLING_TEMPERATURE: f32 = 0.5;

/// Default generation budget; longer generations are flagged.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 256;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture dimensions of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks `L`.
    pub layer_count: usize,
    /// Residual width `d`.
    pub hidden_dim: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    /// Attention heads.
    pub head_count: usize,
    /// Maximum context length in tokens.
    pub max_context: usize,
}

impl ModelConfig {
    /// Minimum context every model must support.
    pub const MIN_CONTEXT: usize = 512;

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.hidden_dim == 0 || self.head_count == 0 {
            return Err(Error::Config(
                "layer_count, hidden_dim and head_count must be positive".to_owned(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".to_owned()));
        }
        if !self.hidden_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        if self.max_context < Self::MIN_CONTEXT {
            return Err(Error::Config(format!(
                "max_context {} is below the minimum of {}",
                self.max_context,
                Self::MIN_CONTEXT
            )));
        }
        Ok(())
    }
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Argmax decoding; ignores temperature and seed.
    Greedy,
    /// Temperature sampling driven by a seeded generator.
    Sampled,
}

/// How tokens are chosen during generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    /// Greedy or sampled.
    pub mode: DecodeMode,
    /// Sampling temperature (`> 0` when sampled).
    pub temperature: f32,
    /// Seed for sampled decoding.
    pub seed: u64,
    /// Generation budget.
    pub max_new_tokens: usize,
}

impl GenerationSettings {
    /// Greedy decoding with the default budget.
    pub fn greedy() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 0.0,
            seed: 0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    /// Sampled decoding.
    pub fn sampled(temperature: f32, seed: u64) -> Self {
        Self {
            mode: DecodeMode::Sampled,
            temperature,
            seed,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    /// Same settings with another budget.
    #[must_use]
    pub fn with_max_new_tokens(mut self, n: usize) -> Self {
        self.max_new_tokens = n;
        self
    }

    /// Same settings with another seed.
    #[must_use]
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Reject sampled settings without a positive finite temperature.
    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Sampled
            && !(self.temperature.is_finite() && self.temperature > 0.0)
        {
            return Err(Error::Input(format!(
                "sampled decoding needs a positive temperature, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self::greedy()
    }
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

/// Speaker of a chat turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// System instructions.
    System,
    /// User turn.
    User,
    /// Assistant turn.
    Assistant,
}

/// One chat turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    /// Speaker.
    pub role: Role,
    /// Text content.
    pub content: String,
}

impl ChatMessage {
    /// System turn.
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    /// User turn.
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    /// Assistant turn.
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// A prompt: either a chat conversation awaiting an assistant reply or a raw
/// completion prefix (used for the carrier prompt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatPrompt {
    /// Chat turns; generation continues as the assistant.
    Chat {
        /// Conversation so far.
        messages: Vec<ChatMessage>,
    },
    /// Raw text continued verbatim.
    Completion {
        /// Prefix text.
        text: String,
    },
}

impl ChatPrompt {
    /// Chat prompt from turns.
    pub fn chat(messages: Vec<ChatMessage>) -> Self {
        Self::Chat { messages }
    }

    /// Raw completion prompt.
    pub fn completion(text: impl Into<String>) -> Self {
        Self::Completion { text: text.into() }
    }

    /// The neutral carrier prompt.
    pub fn carrier() -> Self {
        Self::completion(CARRIER_TEXT)
    }

    /// Content of the last user turn, if any.
    pub fn last_user(&self) -> Option<&str> {
        match self {
            Self::Chat { messages } => messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .map(|m| m.content.as_str()),
            Self::Completion { .. } => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Traces and records
// ---------------------------------------------------------------------------

/// Hidden vectors `h[i][ℓ]` for every generated position `i` and layer
/// `ℓ ∈ 0..=L`. Immutable once built; cloning shares the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    positions: usize,
    layers: usize,
    dim: usize,
    data: Arc<[f32]>,
}

impl ActivationTrace {
    /// Build from a flat buffer laid out as `[position][layer][dim]`.
    pub fn from_flat(positions: usize, layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != positions * layers * dim {
            return Err(Error::Shape(format!(
                "trace buffer holds {} values, expected {positions}×{layers}×{dim}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite trace value at flat index {bad}")));
        }
        Ok(Self { positions, layers, dim, data: data.into() })
    }

    /// Number of generated positions.
    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Number of layers including the embedding layer (`L + 1`).
    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Hidden width `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Borrow `h[position][layer]`.
    pub fn view(&self, position: usize, layer: usize) -> Result<&[f32]> {
        if position >= self.positions || layer >= self.layers {
            return Err(Error::Bounds(format!(
                "({position}, {layer}) outside trace of {} positions × {} layers",
                self.positions, self.layers
            )));
        }
        let start = (position * self.layers + layer) * self.dim;
        Ok(&self.data[start..start + self.dim])
    }

    /// Copy of `h[position][layer]`.
    pub fn read_hidden(&self, position: usize, layer: usize) -> Result<Vec<f32>> {
        self.view(position, layer).map(<[f32]>::to_vec)
    }

    /// Flat `[position][layer][dim]` buffer.
    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }
}

/// Free function form of [`ActivationTrace::read_hidden`].
pub fn read_hidden(trace: &ActivationTrace, position: usize, layer: usize) -> Result<Vec<f32>> {
    trace.read_hidden(position, layer)
}

/// Append-only trace builder used while generating.
#[derive(Debug)]
pub(crate) struct TraceBuilder {
    layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TraceBuilder {
    pub(crate) fn new(layers: usize, dim: usize) -> Self {
        Self { layers, dim, data: Vec::new() }
    }

    pub(crate) fn push(&mut self, per_layer: &[Vec<f32>]) {
        debug_assert_eq!(per_layer.len(), self.layers);
        for h in per_layer {
            debug_assert_eq!(h.len(), self.dim);
            self.data.extend_from_slice(h);
        }
    }

    pub(crate) fn finish(self) -> Result<ActivationTrace> {
        let positions = self.data.len() / (self.layers * self.dim);
        ActivationTrace::from_flat(positions, self.layers, self.dim, self.data)
    }
}

/// Outcome of one scheduled intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionEvent {
    /// Position (generation- or prompt-relative, depending on the call).
    pub position: usize,
    /// False when the update was skipped because of a singularity.
    pub applied: bool,
}

/// One generation with its captured activations.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    /// Tokenized prompt.
    pub prompt_tokens: Vec<TokenId>,
    /// Generated tokens (end-of-sequence excluded).
    pub generated_tokens: Vec<TokenId>,
    /// Detokenized generation.
    pub text: String,
    /// Byte offset of each generated token in `text` (`len + 1` entries).
    pub token_offsets: Vec<usize>,
    /// Hidden states for every generated position.
    pub trace: ActivationTrace,
    /// Settings used.
    pub settings: GenerationSettings,
    /// Generation stopped at the token budget rather than end-of-sequence.
    pub hit_length_limit: bool,
    /// Next-token logits right after the answer delimiter, captured in the
    /// same (possibly intervened) pass.
    pub answer_logits: Option<Vec<f32>>,
    /// Interventions attempted during this generation.
    pub interventions: Vec<InterventionEvent>,
}

impl GenerationRecord {
    /// Text of generated token `i`.
    pub fn token_str(&self, i: usize) -> Option<&str> {
        let start = *self.token_offsets.get(i)?;
        let end = *self.token_offsets.get(i + 1)?;
        self.text.get(start..end)
    }
}

/// Where and what to inject when steering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSite {
    /// Generation position `i` from which generation resumes.
    pub position: usize,
    /// Layer `ℓ` that every intervention targets.
    pub layer: usize,
    /// Injected vector `h′`.
    pub vector: Vec<f32>,
}

/// Injection into prompt positions with the prompt text held constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInjection {
    /// Prompt token indices to update.
    pub positions: Vec<usize>,
    /// Layer to update.
    pub layer: usize,
    /// Injected vector.
    pub vector: Vec<f32>,
    /// Scale `α`.
    pub alpha: f32,
}

// ---------------------------------------------------------------------------
// Contract
// ---------------------------------------------------------------------------

/// A language model whose residual stream can be read and written.
///
/// Implementations are read-only after construction and may be shared
/// across threads; every method is a pure function of its arguments and
/// the model weights.
pub trait InstrumentedLM: Send + Sync {
    /// Architecture dimensions.
    fn config(&self) -> &ModelConfig;

    /// Whether the chat template has a dedicated system role.
    fn supports_system_role(&self) -> bool;

    /// Encode text (no chat template applied).
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>>;

    /// Decode token ids.
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String>;

    /// Tokenize a prompt with the model's chat template.
    fn encode_prompt(&self, prompt: &ChatPrompt) -> Result<Vec<TokenId>>;

    /// Generate a reply, capturing hidden states of every generated position.
    fn generate_with_trace(
        &self,
        prompt: &ChatPrompt,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord>;

    /// Replace the placeholder's residual at `target_layer` with `vector`
    /// and return the continuation.
    fn patched_decode(
        &self,
        carrier: &ChatPrompt,
        vector: &[f32],
        target_layer: usize,
        settings: &GenerationSettings,
    ) -> Result<String>;

    /// Resume `record` from `site.position`, applying the norm-preserving
    /// update at layer `site.layer` every `stride` positions until the answer
    /// delimiter.
    fn steered_generate(
        &self,
        record: &GenerationRecord,
        site: &InjectionSite,
        alpha: f32,
        stride: usize,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord>;

    /// Generate with the norm-preserving update applied at fixed prompt
    /// positions.
    fn injected_generate(
        &self,
        prompt: &ChatPrompt,
        injection: &PromptInjection,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord>;

    /// Pre-softmax next-token scores for `context`.
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f32>>;
}

impl<T: InstrumentedLM + ?Sized> InstrumentedLM for Arc<T> {
    fn config(&self) -> &ModelConfig {
        (**self).config()
    }
    fn supports_system_role(&self) -> bool {
        (**self).supports_system_role()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        (**self).detokenize(tokens)
    }
    fn encode_prompt(&self, prompt: &ChatPrompt) -> Result<Vec<TokenId>> {
        (**self).encode_prompt(prompt)
    }
    fn generate_with_trace(
        &self,
        prompt: &ChatPrompt,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        (**self).generate_with_trace(prompt, settings)
    }
    fn patched_decode(
        &self,
        carrier: &ChatPrompt,
        vector: &[f32],
        target_layer: usize,
        settings: &GenerationSettings,
    ) -> Result<String> {
        (**self).patched_decode(carrier, vector, target_layer, settings)
    }
    fn steered_generate(
        &self,
        record: &GenerationRecord,
        site: &InjectionSite,
        alpha: f32,
        stride: usize,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        (**self).steered_generate(record, site, alpha, stride, settings)
    }
    fn injected_generate(
        &self,
        prompt: &ChatPrompt,
        injection: &PromptInjection,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        (**self).injected_generate(prompt, injection, settings)
    }
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f32>> {
        (**self).next_token_logits(context)
    }
}

/// Which in-process implementation a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Binary weight file of a [`TinyTransformer`].
    Tiny,
    /// JSON [`ScriptedMockSpec`].
    Mock,
}

/// Load an in-process model from disk.
pub fn load_model(path: &Path, kind: ModelKind) -> Result<Arc<dyn InstrumentedLM>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("model file {} does not exist", path.display()),
        )));
    }
    Ok(match kind {
        ModelKind::Tiny => Arc::new(TinyTransformer::load(path)?),
        ModelKind::Mock => Arc::new(ScriptedMock::load(path)?),
    })
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Norm-preserving additive update `(h + α·h′)·‖h‖₂ / ‖h + α·h′‖₂`.
///
/// Accumulates in `f64`. Fails with [`Error::Singular`] (tagged with
/// `position`) when `‖h + α·h′‖₂` is zero.
pub fn steer_update(h: &[f32], injected: &[f32], alpha: f32, position: usize) -> Result<Vec<f32>> {
    if h.len() != injected.len() {
        return Err(Error::Shape(format!(
            "hidden vector has {} entries, injected vector {}",
            h.len(),
            injected.len()
        )));
    }
    let alpha = f64::from(alpha);
    let sum: Vec<f64> = h
        .iter()
        .zip(injected)
        .map(|(&a, &b)| f64::from(a) + alpha * f64::from(b))
        .collect();
    let old_norm = h.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    let new_norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if new_norm == 0.0 || !new_norm.is_finite() {
        return Err(Error::Singular { position });
    }
    let scale = old_norm / new_norm;
    Ok(sum.into_iter().map(|v| (v * scale) as f32).collect())
}

/// Positions of a steering schedule: `start, start + stride, …` strictly
/// before `stop`.
pub fn steering_schedule(start: usize, stride: usize, stop: usize) -> Vec<usize> {
    if stride == 0 {
        return Vec::new();
    }
    (start..stop).step_by(stride).collect()
}

/// Whether `text` ends with the answer delimiter (ignoring trailing spaces).
pub(crate) fn ends_with_delimiter(text: &str) -> bool {
    text.trim_end_matches([' ', '\t']).ends_with(ANSWER_DELIMITER)
}

/// Whether `text` (the generation so far) has entered the answer delimiter:
/// either it already contains the delimiter, or its tail is a non-empty
/// prefix of it that starts a word.
pub(crate) fn in_delimiter(text: &str) -> bool {
    if text.contains(ANSWER_DELIMITER) {
        return true;
    }
    let trimmed = text.trim_end_matches([' ', '\t']);
    (1..ANSWER_DELIMITER.len()).rev().any(|k| {
        let prefix = &ANSWER_DELIMITER[..k];
        trimmed.ends_with(prefix) && {
            let before = &trimmed[..trimmed.len() - prefix.len()];
            before.chars().next_back().is_none_or(|c| !c.is_alphanumeric())
        }
    })
}

pub(crate) fn check_vector(vector: &[f32], dim: usize) -> Result<()> {
    if vector.len() != dim {
        return Err(Error::Shape(format!(
            "vector has {} entries, model hidden_dim is {dim}",
            vector.len()
        )));
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("vector contains non-finite values".to_owned()));
    }
    Ok(())
}
