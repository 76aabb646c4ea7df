// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-report probes: discretize BD scores into `k` classes, ask the model
//! to predict its own class from in-context exemplars, and test whether
//! injecting a belief state moves the predicted distribution.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{answer_text, NEURO_SYSTEM_PROMPT};
use crate::error::{Error, Result};
use crate::model::{
    ChatMessage, ChatPrompt, GenerationSettings, InstrumentedLM, PromptInjection, Role, TokenId,
};
use crate::patchscope::{casefold, Belief};
use crate::stats::{mean, sample_std, t_test_one_sided, TestResult};

/// Probe settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuroConfig {
    /// Number of classes.
    pub k: usize,
    /// Exemplars per class in each prompt.
    pub exemplars_per_class: usize,
    /// Exemplar-sampling seeds.
    pub seeds: Vec<u64>,
    /// Injection layer; `None` means `L/4`, the middle of the default
    /// steering site range.
    pub probe_layer: Option<usize>,
    /// Injection scale.
    pub probe_alpha: f32,
    /// Budget of each classification reply.
    pub max_new_tokens: usize,
}

impl Default for NeuroConfig {
    fn default() -> Self {
        Self {
            k: 3,
            exemplars_per_class: 10,
            seeds: vec![0, 1, 2, 3, 4],
            probe_layer: None,
            probe_alpha: 2.0,
            max_new_tokens: 32,
        }
    }
}

impl NeuroConfig {
    /// Check the invariants.
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("k must be at least 2".to_owned()));
        }
        if self.exemplars_per_class == 0 {
            return Err(Error::Config("exemplars_per_class must be at least 1".to_owned()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".to_owned()));
        }
        if !self.probe_alpha.is_finite() {
            return Err(Error::Config("probe_alpha must be finite".to_owned()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Discretization
// ---------------------------------------------------------------------------

/// One-dimensional k-means labels in `1..=k`, ordered by centroid.
///
/// Computes the partition with the least within-cluster sum of squares
/// exactly: in 1-D optimal clusters are contiguous runs of the sorted
/// values, so a dynamic program over split points finds the global optimum
/// (Lloyd iteration can stall in a local one). Equal values always share a
/// cluster; among equal-cost partitions the earliest split wins.
pub fn discretize(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Input("k must be at least 2".to_owned()));
    }
    if scores.len() < k {
        return Err(Error::Input(format!("{} scores cannot form {k} clusters", scores.len())));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Input("scores must lie in [0, 1]".to_owned()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Degenerate(format!(
            "{} distinct values cannot form {k} clusters",
            distinct.len()
        )));
    }
    let n = sorted.len();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &x) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    // Sum of squares of sorted[i..j] around its mean.
    let cost = |i: usize, j: usize| -> f64 {
        let m = (j - i) as f64;
        let d = s1[j] - s1[i];
        (s2[j] - s2[i] - d * d / m).max(0.0)
    };
    // A split before index i is allowed only between distinct values.
    let can_split = |i: usize| sorted[i - 1] < sorted[i];

    // best[c][j]: least cost of the first j values in c + 1 clusters.
    let mut best = vec![vec![f64::INFINITY; n + 1]; k];
    let mut arg = vec![vec![0usize; n + 1]; k];
    for j in 1..=n {
        best[0][j] = cost(0, j);
    }
    for c in 1..k {
        for j in c + 1..=n {
            for i in c..j {
                if !can_split(i) || !best[c - 1][i].is_finite() {
                    continue;
                }
                let v = best[c - 1][i] + cost(i, j);
                if v < best[c][j] {
                    best[c][j] = v;
                    arg[c][j] = i;
                }
            }
        }
    }
    if !best[k - 1][n].is_finite() {
        return Err(Error::Degenerate(format!("no partition into {k} clusters")));
    }
    // Upper bound (exclusive) of each cluster in sorted order.
    let mut bounds = vec![n; k];
    let mut j = n;
    for c in (1..k).rev() {
        j = arg[c][j];
        bounds[c - 1] = j;
    }
    Ok(scores
        .iter()
        .map(|x| {
            let idx = sorted.partition_point(|v| v < x);
            bounds.iter().position(|&b| idx < b).expect("every index lies below n") + 1
        })
        .collect())
}

/// A query with its BD value and discretized label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuroSample {
    /// Query id.
    pub query_id: String,
    /// User text shown to the model.
    pub text: String,
    /// BD of the stream's belief.
    pub bd_value: f64,
    /// Class in `1..=k`.
    pub label: usize,
}

/// Discretize one stream of `(query id, text, bd)` into samples.
pub fn label_samples(stream: &[(String, String, f64)], k: usize) -> Result<Vec<NeuroSample>> {
    let scores: Vec<f64> = stream.iter().map(|s| s.2).collect();
    let labels = discretize(&scores, k)?;
    Ok(stream
        .iter()
        .zip(labels)
        .map(|((id, text, bd), label)| NeuroSample { query_id: id.clone(), text: text.clone(), bd_value: *bd, label })
        .collect())
}

// ---------------------------------------------------------------------------
// In-context classification
// ---------------------------------------------------------------------------

/// Few-shot prompt: system instruction, exemplar user/assistant turns (the
/// assistant turn is the bare label), then the test query.
pub fn build_icl_prompt(exemplars: &[(&str, usize)], test_text: &str, k: usize, per_class: usize) -> Result<ChatPrompt> {
    let mut counts = vec![0usize; k + 1];
    for &(_, label) in exemplars {
        if label == 0 || label > k {
            return Err(Error::Input(format!("label {label} outside 1..={k}")));
        }
        counts[label] += 1;
    }
    if counts[1..].iter().any(|&c| c != per_class) {
        return Err(Error::Input(format!(
            "exemplars are not class-balanced: {:?} (expected {per_class} per class)",
            &counts[1..]
        )));
    }
    let mut messages = vec![ChatMessage::system(NEURO_SYSTEM_PROMPT)];
    for &(text, label) in exemplars {
        messages.push(ChatMessage::user(text));
        messages.push(ChatMessage::assistant(label.to_string()));
    }
    messages.push(ChatMessage::user(test_text));
    Ok(ChatPrompt::chat(messages))
}

/// Integer label in a reply: the text after the answer delimiter when
/// present, else the whole reply, trimmed of whitespace and a final period.
pub fn parse_label(reply: &str) -> Option<usize> {
    let s = answer_text(reply).unwrap_or(reply).trim();
    let s = s.strip_suffix('.').unwrap_or(s);
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// Class-balanced exemplars for one seed; the rest is held out.
pub fn sample_exemplars(samples: &[NeuroSample], k: usize, per_class: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for class in 1..=k {
        let mut pool: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        if pool.len() < per_class {
            return Err(Error::Input(format!(
                "class {class} has {} samples, {per_class} exemplars needed",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..per_class]);
    }
    chosen.shuffle(&mut rng);
    let held: Vec<usize> = (0..samples.len()).filter(|i| !chosen.contains(i)).collect();
    Ok((chosen, held))
}

/// Accuracy of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    /// Seed.
    pub seed: u64,
    /// Correct predictions / held-out queries.
    pub accuracy: f64,
    /// Held-out queries.
    pub evaluated: usize,
    /// Replies without an integer label (counted wrong).
    pub unparsed: usize,
}

/// Classification results across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuroReport {
    /// Per seed.
    pub seeds: Vec<SeedAccuracy>,
    /// Mean accuracy.
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
    /// `1/k`.
    pub chance: f64,
    /// One-sided t test of the accuracies against chance.
    pub t_test: Option<TestResult>,
}

/// Run the few-shot self-report task for every seed.
pub fn run_classification(lm: &dyn InstrumentedLM, samples: &[NeuroSample], cfg: &NeuroConfig) -> Result<NeuroReport> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let (ex, held) = sample_exemplars(samples, cfg.k, cfg.exemplars_per_class, seed)?;
        let exemplars: Vec<(&str, usize)> = ex.iter().map(|&i| (samples[i].text.as_str(), samples[i].label)).collect();
        let settings = GenerationSettings::greedy().with_max_new_tokens(cfg.max_new_tokens);
        let outcomes = held
            .par_iter()
            .map(|&i| {
                let prompt = build_icl_prompt(&exemplars, &samples[i].text, cfg.k, cfg.exemplars_per_class)?;
                let reply = lm.generate_with_trace(&prompt, &settings)?;
                Ok(parse_label(&reply.text).map(|l| l == samples[i].label))
            })
            .collect::<Result<Vec<_>>>()?;
        let correct = outcomes.iter().filter(|o| **o == Some(true)).count();
        let unparsed = outcomes.iter().filter(|o| o.is_none()).count();
        seeds.push(SeedAccuracy {
            seed,
            accuracy: if held.is_empty() { 0.0 } else { correct as f64 / held.len() as f64 },
            evaluated: held.len(),
            unparsed,
        });
    }
    let accs: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
    let chance = 1.0 / cfg.k as f64;
    let t_test = match t_test_one_sided(&accs, chance) {
        Ok(t) => Some(t),
        Err(e) => {
            log::info!("t test against chance skipped: {e}");
            None
        }
    };
    Ok(NeuroReport { mean: mean(&accs), std: sample_std(&accs), chance, t_test, seeds })
}

// ---------------------------------------------------------------------------
// Injection probe
// ---------------------------------------------------------------------------

fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn common_suffix(a: &[TokenId], b: &[TokenId], limit: usize) -> usize {
    a.iter().rev().zip(b.iter().rev()).take(limit).take_while(|(x, y)| x == y).count()
}

fn with_last_user(prompt: &ChatPrompt, content: &str) -> Result<ChatPrompt> {
    let ChatPrompt::Chat { messages } = prompt else {
        return Err(Error::Input("injection probe needs a chat prompt".to_owned()));
    };
    let mut messages = messages.clone();
    let last = messages
        .iter_mut()
        .rev()
        .find(|m| m.role == Role::User)
        .ok_or_else(|| Error::Input("prompt has no user turn".to_owned()))?;
    last.content = content.to_owned();
    Ok(ChatPrompt::chat(messages))
}

/// Byte offset just past the earliest whole-word mention of `belief` in `text`.
pub fn mention_end(text: &str, belief: &Belief) -> Option<usize> {
    let hay = casefold(text);
    if hay.len() != text.len() {
        // Folding changed byte lengths; fall back to exact-case search.
        return belief
            .verbalizations
            .iter()
            .filter_map(|v| text.find(v.as_str()).map(|i| (i, i + v.len())))
            .min()
            .map(|(_, e)| e);
    }
    let mut best: Option<(usize, usize)> = None;
    for v in &belief.verbalizations {
        let needle = casefold(v);
        let mut from = 0;
        while let Some(rel) = hay[from..].find(&needle) {
            let start = from + rel;
            let end = start + needle.len();
            let ok_before = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let ok_after = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if ok_before && ok_after {
                // earliest start, longest match
                if best.is_none_or(|(s, e)| start < s || (start == s && end > e)) {
                    best = Some((start, end));
                }
                break;
            }
            from = start + 1;
        }
    }
    best.map(|(_, e)| e)
}

/// Prompt token positions from the last token of the mention through the
/// end of the last user message.
pub fn mention_positions(lm: &dyn InstrumentedLM, prompt: &ChatPrompt, belief: &Belief) -> Result<Option<Vec<usize>>> {
    let user = prompt
        .last_user()
        .ok_or_else(|| Error::Input("prompt has no user turn".to_owned()))?;
    let Some(end) = mention_end(user, belief) else {
        return Ok(None);
    };
    let full = lm.encode_prompt(prompt)?;
    let empty = lm.encode_prompt(&with_last_user(prompt, "")?)?;
    let suffix = common_suffix(&full, &empty, empty.len() - common_prefix(&full, &empty));
    let msg_end = full.len() - suffix;
    let cut = lm.encode_prompt(&with_last_user(prompt, &user[..end])?)?;
    let last = common_prefix(&full, &cut).min(msg_end);
    if last == 0 {
        return Ok(None);
    }
    Ok(Some((last - 1..msg_end).collect()))
}

/// One held-out query for the probe.
#[derive(Debug, Clone)]
pub struct ProbeItem {
    /// User text.
    pub text: String,
    /// Belief whose mention anchors the injection.
    pub counter: Belief,
    /// Vector decoding the counter belief, if one was found.
    pub vector: Option<Vec<f32>>,
}

/// Label distributions with and without injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// Label counts without injection (index 0 = unparsed).
    pub baseline_counts: Vec<usize>,
    /// Label counts with injection (index 0 = unparsed).
    pub injected_counts: Vec<usize>,
    /// Injected minus baseline share per class `1..=k`.
    pub shifts: Vec<f64>,
    /// Queries evaluated.
    pub evaluated: usize,
    /// Queries without a qualifying vector.
    pub skipped_no_vector: usize,
    /// Queries whose text never mentions the belief.
    pub skipped_no_mention: usize,
    /// Whether every injected prompt tokenized identically to its baseline.
    pub prompt_tokens_identical: bool,
}

fn bucket(reply: &str, k: usize) -> usize {
    parse_label(reply).filter(|&l| (1..=k).contains(&l)).unwrap_or(0)
}

/// Compare predicted labels with and without injecting each item's vector
/// at the mention positions, using the exemplars of the first seed.
pub fn run_injection_probe(
    lm: &dyn InstrumentedLM,
    exemplar_pool: &[NeuroSample],
    items: &[ProbeItem],
    cfg: &NeuroConfig,
) -> Result<ShiftReport> {
    cfg.validate()?;
    let layer = cfg.probe_layer.unwrap_or(lm.config().layer_count / 4);
    let (ex, _) = sample_exemplars(exemplar_pool, cfg.k, cfg.exemplars_per_class, cfg.seeds[0])?;
    let exemplars: Vec<(&str, usize)> = ex.iter().map(|&i| (exemplar_pool[i].text.as_str(), exemplar_pool[i].label)).collect();
    let settings = GenerationSettings::greedy().with_max_new_tokens(cfg.max_new_tokens);
    let outcomes = items
        .par_iter()
        .map(|item| -> Result<Option<std::result::Result<(usize, usize, bool), bool>>> {
            let Some(vector) = &item.vector else {
                return Ok(Some(Err(true)));
            };
            let prompt = build_icl_prompt(&exemplars, &item.text, cfg.k, cfg.exemplars_per_class)?;
            let Some(positions) = mention_positions(lm, &prompt, &item.counter)? else {
                return Ok(Some(Err(false)));
            };
            let base = lm.generate_with_trace(&prompt, &settings)?;
            let injection = PromptInjection { positions, layer, vector: vector.clone(), alpha: cfg.probe_alpha };
            let inj = lm.injected_generate(&prompt, &injection, &settings)?;
            Ok(Some(Ok((bucket(&base.text, cfg.k), bucket(&inj.text, cfg.k), base.prompt_tokens == inj.prompt_tokens))))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ShiftReport {
        baseline_counts: vec![0; cfg.k + 1],
        injected_counts: vec![0; cfg.k + 1],
        shifts: vec![0.0; cfg.k],
        evaluated: 0,
        skipped_no_vector: 0,
        skipped_no_mention: 0,
        prompt_tokens_identical: true,
    };
    for o in outcomes.into_iter().flatten() {
        match o {
            Ok((b, i, same)) => {
                report.baseline_counts[b] += 1;
                report.injected_counts[i] += 1;
                report.evaluated += 1;
                report.prompt_tokens_identical &= same;
            }
            Err(true) => report.skipped_no_vector += 1,
            Err(false) => report.skipped_no_mention += 1,
        }
    }
    if report.evaluated > 0 {
        let n = report.evaluated as f64;
        for c in 1..=cfg.k {
            report.shifts[c - 1] = (report.injected_counts[c] as f64 - report.baseline_counts[c] as f64) / n;
        }
    }
    Ok(report)
}

/// Share of each class among parsed predictions, keyed by label.
pub fn class_shares(counts: &[usize]) -> BTreeMap<usize, f64> {
    let total: usize = counts.iter().sum();
    (1..counts.len())
        .map(|c| (c, if total == 0 { 0.0 } else { counts[c] as f64 / total as f64 }))
        .collect()
}
