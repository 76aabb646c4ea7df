// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dominance score ψ: decode a hidden vector through the carrier prompt at
//! several target layers and test whether a belief's verbalization appears.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_seed, ChatPrompt, GenerationSettings, InstrumentedLM};

/// A belief and the strings that verbalize it (canonical form first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Belief {
    /// Stable identifier.
    pub id: String,
    /// Canonical verbalization followed by aliases.
    #[serde(rename = "aliases")]
    pub verbalizations: Vec<String>,
}

impl Belief {
    /// Build a belief, dropping case-insensitive duplicates.
    pub fn new<S: Into<String>>(id: impl Into<String>, verbalizations: impl IntoIterator<Item = S>) -> Result<Self> {
        let id = id.into();
        let mut out: Vec<String> = Vec::new();
        for v in verbalizations {
            let v = v.into().trim().to_owned();
            if v.is_empty() {
                return Err(Error::Input(format!("belief {id} has a blank verbalization")));
            }
            if !out.iter().any(|o| casefold(o) == casefold(&v)) {
                out.push(v);
            }
        }
        if out.is_empty() {
            return Err(Error::Input(format!("belief {id} has no verbalization")));
        }
        Ok(Self { id, verbalizations: out })
    }

    /// Canonical verbalization `b̂`.
    pub fn canonical(&self) -> &str {
        &self.verbalizations[0]
    }

    /// Re-check the invariants of a deserialized belief.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(self.id.clone(), self.verbalizations.iter().cloned())?;
        if rebuilt.verbalizations.len() != self.verbalizations.len() {
            return Err(Error::Input(format!("belief {} has duplicate aliases", self.id)));
        }
        Ok(())
    }
}

/// Decoded continuations, one per target layer (times repeats).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSet {
    /// Target layer of each text.
    pub layers: Vec<usize>,
    /// Decoded texts.
    pub texts: Vec<String>,
}

impl TextSet {
    /// Number of texts matching `belief`.
    pub fn hits(&self, belief: &Belief) -> usize {
        self.texts.iter().filter(|t| match_belief(t, belief)).count()
    }

    /// Number of distinct target layers with at least one matching text.
    pub fn layer_hits(&self, belief: &Belief) -> usize {
        let mut hit: Vec<usize> = self
            .layers
            .iter()
            .zip(&self.texts)
            .filter(|(_, t)| match_belief(t, belief))
            .map(|(l, _)| *l)
            .collect();
        hit.dedup();
        hit.len()
    }

    /// ψ over this set.
    pub fn psi(&self, belief: &Belief) -> bool {
        self.texts.iter().any(|t| match_belief(t, belief))
    }
}

/// Every `stride`-th layer `0, s, 2s, … ≤ layer_count`.
pub fn target_layers(layer_count: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Config("target stride must be at least 1".to_owned()));
    }
    Ok((0..=layer_count).step_by(stride).collect())
}

/// Case fold used by all matching (full Unicode lowercase).
pub fn casefold(s: &str) -> String {
    s.to_lowercase()
}

/// Whether `needle` (already folded) occurs in `hay` (already folded)
/// bounded by non-alphanumeric characters or the string edges.
pub(crate) fn contains_word(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(rel) = hay[from..].find(needle) {
        let start = from + rel;
        let end = start + needle.len();
        let before = hay[..start].chars().next_back();
        let after = hay[end..].chars().next();
        if before.is_none_or(|c| !c.is_alphanumeric()) && after.is_none_or(|c| !c.is_alphanumeric()) {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// True iff any verbalization of `belief` appears in `text` as a whole-word
/// match after case folding.
pub fn match_belief(text: &str, belief: &Belief) -> bool {
    let hay = casefold(text);
    belief
        .verbalizations
        .iter()
        .any(|v| contains_word(&hay, &casefold(v.trim())))
}

/// Patch `vector` into the carrier at each target layer.
///
/// Each decode uses its own seed derived from `settings.seed` and the target
/// layer (and the repeat index when `repeats > 1`), so results do not depend
/// on evaluation order.
pub fn decode_set(
    lm: &dyn InstrumentedLM,
    vector: &[f32],
    target_layers: &[usize],
    settings: &GenerationSettings,
    repeats: usize,
) -> Result<TextSet> {
    if target_layers.is_empty() {
        return Err(Error::Input("no target layers".to_owned()));
    }
    let carrier = ChatPrompt::carrier();
    let mut layers = Vec::with_capacity(target_layers.len() * repeats.max(1));
    let mut texts = Vec::with_capacity(layers.capacity());
    for &layer in target_layers {
        for r in 0..repeats.max(1) {
            let mut seed = derive_seed(settings.seed, layer as u64);
            if r > 0 {
                seed = derive_seed(seed, r as u64);
            }
            texts.push(lm.patched_decode(&carrier, vector, layer, &settings.with_seed(seed))?);
            layers.push(layer);
        }
    }
    Ok(TextSet { layers, texts })
}

/// Dominance score ψ ∈ {0, 1}.
pub fn psi(
    lm: &dyn InstrumentedLM,
    vector: &[f32],
    belief: &Belief,
    target_layers: &[usize],
    settings: &GenerationSettings,
) -> Result<u8> {
    Ok(u8::from(decode_set(lm, vector, target_layers, settings, 1)?.psi(belief)))
}
