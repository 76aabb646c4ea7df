// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scripted mock model with analytically known belief encodings.
//!
//! Every hidden state is a weighted sum of orthonormal belief codes taken
//! from a channel plan, so each observable has a closed form:
//!
//! - trace: `h[i][ℓ] = Σ energy · code[belief]` over the plan entries at `(i, ℓ)`;
//! - patched decode: the zero vector yields `null_text`, any other vector the
//!   verbalization of the codebook entry with the largest dot product;
//! - action: per-belief evidence `E_b = Σ dot(h[i][ℓ], code[b])` over the
//!   reasoning positions (through the delimiter's `:`) and all layers; the
//!   answer is the belief with the largest positive evidence, else `"unsure"`;
//! - answer logits: `E_b` at the first token of each verbalization
//!   (`E_b − 1` when `E_b ≤ 0`), `0` for the null answer, `−1` elsewhere.
//!
//! Scenarios select alternative scripts by matching substrings of the last
//! user message (`trigger`) and of the rendered prompt (`also`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sampling::{argmax, derive_seed};
use crate::model::tokenizer::{render_chat, Tokenizer, ASSISTANT, END, USER};
use crate::model::{
    check_vector, in_delimiter, steer_update, ActivationTrace, ChatPrompt, DecodeMode,
    GenerationRecord, GenerationSettings, InjectionSite, InstrumentedLM, InterventionEvent,
    ModelConfig, PromptInjection, TokenId, ANSWER_DELIMITER, PATCHED_DECODE_TOKENS, PLACEHOLDER,
};

/// Answer emitted when no belief has positive evidence.
pub const NULL_ANSWER: &str = "unsure";

const ORTHO_TOL: f32 = 1e-5;
const MOCK_CONTEXT: usize = 32_768;
const MOCK_VOCAB: usize = 65_536;

fn default_layers() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_null_text() -> String {
    "nothing in particular".to_owned()
}
fn default_reasoning() -> String {
    "Let me think about this question carefully.".to_owned()
}

/// Belief energies at one `(position, layer)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    /// Generated position.
    pub position: usize,
    /// Layer in `0..=L`.
    pub layer: usize,
    /// `(belief id, energy)` pairs.
    pub channels: Vec<(String, f32)>,
}

/// Residual content of every prompt position at every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBackground {
    /// Belief code used as the background direction.
    pub belief: String,
    /// Its energy.
    pub energy: f32,
}

/// Reply override triggered by a prompt injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedResponse {
    /// Belief whose projection is read from the injected positions.
    pub belief: String,
    /// Mean projection at or above which `response` is emitted.
    pub threshold: f32,
    /// Answer emitted when triggered.
    pub response: String,
}

/// Alternative script selected by prompt content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScenario {
    /// Substring of the last user message.
    pub trigger: String,
    /// Further substrings required anywhere in the rendered prompt.
    #[serde(default)]
    pub also: Vec<String>,
    /// Reasoning text replacing the default.
    #[serde(default)]
    pub reasoning: Option<String>,
    /// Channel plan replacing the default.
    #[serde(default)]
    pub channel_plan: Option<Vec<ChannelEntry>>,
    /// Fixed answer replacing the evidence rule.
    #[serde(default)]
    pub answer: Option<String>,
    /// Answers picked by a hash of (seed, prompt) when non-empty.
    #[serde(default)]
    pub choices: Vec<String>,
    /// Answer override under prompt injection.
    #[serde(default)]
    pub injected_response: Option<InjectedResponse>,
}

/// JSON description of a [`ScriptedMock`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedMockSpec {
    /// Belief id → unit code vector; codes are pairwise orthogonal.
    pub belief_codebook: BTreeMap<String, Vec<f32>>,
    /// Default channel plan.
    pub channel_plan: Vec<ChannelEntry>,
    /// Belief id → canonical verbalization.
    pub verbalizer: BTreeMap<String, String>,
    /// Number of blocks `L`.
    #[serde(default = "default_layers")]
    pub layer_count: usize,
    /// Whether the chat template has a system role.
    #[serde(default = "default_true")]
    pub supports_system_role: bool,
    /// Decode of the zero vector.
    #[serde(default = "default_null_text")]
    pub null_text: String,
    /// Default reasoning text.
    #[serde(default = "default_reasoning")]
    pub reasoning: String,
    /// Residual content of prompt positions.
    #[serde(default)]
    pub prompt_background: Option<PromptBackground>,
    /// Alternative scripts; the first match wins.
    #[serde(default)]
    pub scenarios: Vec<MockScenario>,
}

impl ScriptedMockSpec {
    fn texts(&self) -> Vec<String> {
        let mut out = vec![
            self.null_text.clone(),
            self.reasoning.clone(),
            format!(" {ANSWER_DELIMITER} {NULL_ANSWER}"),
        ];
        out.extend(self.verbalizer.values().map(|v| format!(" {v} {v}")));
        for s in &self.scenarios {
            out.push(s.trigger.clone());
            out.extend(s.also.iter().cloned());
            out.extend(s.reasoning.iter().cloned());
            out.extend(s.answer.iter().map(|a| format!(" {a}")));
            out.extend(s.choices.iter().map(|a| format!(" {a}")));
            out.extend(s.injected_response.iter().map(|r| format!(" {}", r.response)));
        }
        out
    }

    fn validate(&self) -> Result<usize> {
        let mut dim = None;
        for (id, code) in &self.belief_codebook {
            if *dim.get_or_insert(code.len()) != code.len() || code.is_empty() {
                return Err(Error::Shape(format!("code for {id} has inconsistent length")));
            }
            let norm = code.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > ORTHO_TOL {
                return Err(Error::Config(format!("code for {id} is not unit norm ({norm})")));
            }
            if !self.verbalizer.contains_key(id) {
                return Err(Error::Config(format!("belief {id} has no verbalization")));
            }
        }
        let dim = dim.ok_or_else(|| Error::Config("empty belief codebook".to_owned()))?;
        let codes: Vec<(&String, &Vec<f32>)> = self.belief_codebook.iter().collect();
        for (a, (ia, ca)) in codes.iter().enumerate() {
            for (ib, cb) in &codes[a + 1..] {
                let dot: f32 = ca.iter().zip(cb.iter()).map(|(x, y)| x * y).sum();
                if dot.abs() > ORTHO_TOL {
                    return Err(Error::Config(format!("codes {ia} and {ib} are not orthogonal")));
                }
            }
        }
        let plans = std::iter::once(&self.channel_plan)
            .chain(self.scenarios.iter().filter_map(|s| s.channel_plan.as_ref()));
        for plan in plans {
            for entry in plan {
                if entry.layer > self.layer_count {
                    return Err(Error::Config(format!(
                        "channel at layer {} exceeds layer count {}",
                        entry.layer, self.layer_count
                    )));
                }
                for (belief, energy) in &entry.channels {
                    self.check_belief(belief)?;
                    if !(energy.is_finite() && *energy >= 0.0) {
                        return Err(Error::Config(format!("energy {energy} for {belief} is negative")));
                    }
                }
            }
        }
        if let Some(bg) = &self.prompt_background {
            self.check_belief(&bg.belief)?;
        }
        for s in &self.scenarios {
            if let Some(r) = &s.injected_response {
                self.check_belief(&r.belief)?;
            }
        }
        Ok(dim)
    }

    fn check_belief(&self, id: &str) -> Result<()> {
        if self.belief_codebook.contains_key(id) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown belief {id}")))
        }
    }
}

/// Deterministic mock implementing the instrumented-model contract.
#[derive(Debug, Clone)]
pub struct ScriptedMock {
    spec: ScriptedMockSpec,
    config: ModelConfig,
    tokenizer: Tokenizer,
    /// Codebook in id order.
    codes: Vec<(String, Vec<f32>)>,
}

/// Everything the mock decides for one prompt.
struct Plan<'a> {
    scenario: Option<&'a MockScenario>,
    reasoning_tokens: Vec<TokenId>,
    channel_plan: &'a [ChannelEntry],
}

impl ScriptedMock {
    /// Build from a validated spec.
    pub fn new(spec: ScriptedMockSpec) -> Result<Self> {
        let hidden_dim = spec.validate()?;
        let tokenizer = Tokenizer::build(&spec.texts(), MOCK_VOCAB)?;
        let config = ModelConfig {
            layer_count: spec.layer_count,
            hidden_dim,
            vocab_size: tokenizer.len(),
            head_count: 1,
            max_context: MOCK_CONTEXT,
        };
        config.validate()?;
        let codes = spec.belief_codebook.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        Ok(Self { spec, config, tokenizer, codes })
    }

    /// Parse a JSON spec file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ScriptedMockSpec =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("mock spec: {e}")))?;
        Self::new(spec)
    }

    /// Scenario description this mock was built from.
    pub fn spec(&self) -> &ScriptedMockSpec {
        &self.spec
    }

    /// Code vector of a belief.
    pub fn code(&self, belief: &str) -> Option<&[f32]> {
        self.spec.belief_codebook.get(belief).map(Vec::as_slice)
    }

    /// Tokenizer used by the mock.
    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Index of the codebook entry with the largest dot product, or `None`
    /// for the zero vector. Ties go to the lowest belief id.
    pub fn nearest_belief(&self, vector: &[f32]) -> Option<&str> {
        if vector.iter().all(|&v| v == 0.0) {
            return None;
        }
        let mut best: Option<(f32, &str)> = None;
        for (id, code) in &self.codes {
            let d = dot(vector, code);
            if best.is_none_or(|(b, _)| d > b) {
                best = Some((d, id));
            }
        }
        best.map(|(_, id)| id)
    }

    fn hidden(&self, plan: &[ChannelEntry], position: usize, layer: usize) -> Vec<f32> {
        let mut h = vec![0f32; self.config.hidden_dim];
        for entry in plan.iter().filter(|e| e.position == position && e.layer == layer) {
            for (belief, energy) in &entry.channels {
                let code = &self.spec.belief_codebook[belief];
                for (x, c) in h.iter_mut().zip(code) {
                    *x += energy * c;
                }
            }
        }
        h
    }

    fn scenario_for(&self, prompt_tokens: &[TokenId]) -> Result<Option<&MockScenario>> {
        let text = self.tokenizer.decode(prompt_tokens)?;
        let user = last_user_segment(&text);
        Ok(self
            .spec
            .scenarios
            .iter()
            .find(|s| user.contains(&s.trigger) && s.also.iter().all(|a| text.contains(a.as_str()))))
    }

    fn plan(&self, prompt_tokens: &[TokenId]) -> Result<Plan<'_>> {
        let scenario = self.scenario_for(prompt_tokens)?;
        let reasoning = scenario.and_then(|s| s.reasoning.as_deref()).unwrap_or(&self.spec.reasoning);
        let prefix = if reasoning.is_empty() {
            ANSWER_DELIMITER.to_owned()
        } else {
            format!("{reasoning} {ANSWER_DELIMITER}")
        };
        let channel_plan = scenario
            .and_then(|s| s.channel_plan.as_deref())
            .unwrap_or(&self.spec.channel_plan);
        Ok(Plan { scenario, reasoning_tokens: self.tokenizer.encode(&prefix), channel_plan })
    }

    /// Evidence per belief (id order) over reasoning positions and all layers.
    fn evidence(&self, trace: &[Vec<Vec<f32>>], reasoning_len: usize) -> Vec<f32> {
        self.codes
            .iter()
            .map(|(_, code)| {
                trace[..reasoning_len.min(trace.len())]
                    .iter()
                    .flat_map(|layers| layers.iter())
                    .map(|h| dot(h, code))
                    .sum()
            })
            .collect()
    }

    fn first_token(&self, text: &str) -> Option<TokenId> {
        self.tokenizer.encode(&format!(" {text}")).first().copied()
    }

    /// Answer logits from evidence, with an optional fixed answer forced on top.
    fn answer_logits(&self, evidence: &[f32], forced: Option<&str>) -> Vec<f32> {
        let mut logits = vec![-1f32; self.config.vocab_size];
        if let Some(t) = self.first_token(NULL_ANSWER) {
            logits[t as usize] = 0.0;
        }
        for ((id, _), &e) in self.codes.iter().zip(evidence) {
            if let Some(t) = self.first_token(&self.spec.verbalizer[id]) {
                let v = if e > 0.0 { e } else { e - 1.0 };
                let slot = &mut logits[t as usize];
                *slot = if *slot == -1.0 { v } else { slot.max(v) };
            }
        }
        if let Some(answer) = forced {
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if let Some(t) = self.first_token(answer) {
                logits[t as usize] = max + 1.0;
            }
        }
        logits
    }

    /// Answer implied by the logits: the argmax token's belief, or null.
    fn evidence_answer(&self, logits: &[f32], evidence: &[f32]) -> String {
        let top = argmax(logits);
        let mut best: Option<(f32, &str)> = None;
        for ((id, _), &e) in self.codes.iter().zip(evidence) {
            if e > 0.0 && self.first_token(&self.spec.verbalizer[id]) == Some(top)
                && best.is_none_or(|(b, _)| e > b) {
                    best = Some((e, id));
                }
        }
        match best {
            Some((_, id)) => self.spec.verbalizer[id].clone(),
            None => NULL_ANSWER.to_owned(),
        }
    }

    fn choice(&self, choices: &[String], prompt_tokens: &[TokenId], settings: &GenerationSettings) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in prompt_tokens {
            for b in t.to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        let seed = if settings.mode == DecodeMode::Greedy { 0 } else { settings.seed };
        let idx = derive_seed(seed, h) % choices.len() as u64;
        choices[idx as usize].clone()
    }

    /// Shared driver for plain, steered and prompt-injected generation.
    fn run(
        &self,
        prompt_tokens: &[TokenId],
        settings: &GenerationSettings,
        steer: Option<(&InjectionSite, f32, usize)>,
        injected_projection: Option<f32>,
    ) -> Result<GenerationRecord> {
        settings.validate()?;
        if prompt_tokens.len() >= self.config.max_context {
            return Err(Error::Capacity {
                needed: prompt_tokens.len() + 1,
                limit: self.config.max_context,
            });
        }
        let plan = self.plan(prompt_tokens)?;
        let reasoning_len = plan.reasoning_tokens.len();
        let layers = self.config.layer_count + 1;

        let mut trace: Vec<Vec<Vec<f32>>> = (0..reasoning_len)
            .map(|i| (0..layers).map(|l| self.hidden(plan.channel_plan, i, l)).collect())
            .collect();

        let mut events = Vec::new();
        if let Some((site, alpha, stride)) = steer {
            let mut text = String::new();
            for (j, &tok) in plan.reasoning_tokens.iter().enumerate() {
                text.push_str(self.tokenizer.token_text(tok)?);
                if in_delimiter(&text) {
                    break;
                }
                if j >= site.position && (j - site.position) % stride == 0 {
                    let h = &mut trace[j][site.layer];
                    match steer_update(h, &site.vector, alpha, j) {
                        Ok(v) => {
                            *h = v;
                            events.push(InterventionEvent { position: j, applied: true });
                        }
                        Err(e) => {
                            log::warn!("steering update skipped: {e}");
                            events.push(InterventionEvent { position: j, applied: false });
                        }
                    }
                }
            }
        }

        let evidence = self.evidence(&trace, reasoning_len);
        let scenario = plan.scenario;
        let injected = match (scenario.and_then(|s| s.injected_response.as_ref()), injected_projection) {
            (Some(r), Some(p)) if p >= r.threshold => Some(r.response.clone()),
            _ => None,
        };
        let forced = injected.or_else(|| {
            scenario.and_then(|s| {
                if s.choices.is_empty() {
                    s.answer.clone()
                } else {
                    Some(self.choice(&s.choices, prompt_tokens, settings))
                }
            })
        });
        let logits = self.answer_logits(&evidence, forced.as_deref());
        let answer = forced.unwrap_or_else(|| self.evidence_answer(&logits, &evidence));

        let mut tokens = plan.reasoning_tokens.clone();
        tokens.extend(self.tokenizer.encode(&format!(" {answer}")));
        for i in reasoning_len..tokens.len() {
            trace.push((0..layers).map(|l| self.hidden(plan.channel_plan, i, l)).collect());
        }

        let budget = settings
            .max_new_tokens
            .min(self.config.max_context - prompt_tokens.len());
        let hit_length_limit = tokens.len() > budget;
        tokens.truncate(budget);
        trace.truncate(budget);
        let answer_logits = (tokens.len() >= reasoning_len).then_some(logits);

        let flat: Vec<f32> = trace.into_iter().flatten().flatten().collect();
        let trace = ActivationTrace::from_flat(tokens.len(), layers, self.config.hidden_dim, flat)?;
        Ok(GenerationRecord {
            prompt_tokens: prompt_tokens.to_vec(),
            text: self.tokenizer.decode(&tokens)?,
            token_offsets: self.tokenizer.offsets(&tokens)?,
            generated_tokens: tokens,
            trace,
            settings: *settings,
            hit_length_limit,
            answer_logits,
            interventions: events,
        })
    }

    fn background(&self) -> Vec<f32> {
        match &self.spec.prompt_background {
            Some(bg) => self.spec.belief_codebook[&bg.belief].iter().map(|c| bg.energy * c).collect(),
            None => vec![0.0; self.config.hidden_dim],
        }
    }
}

impl InstrumentedLM for ScriptedMock {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn supports_system_role(&self) -> bool {
        self.spec.supports_system_role
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        Ok(self.tokenizer.encode(text))
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        self.tokenizer.decode(tokens)
    }

    fn encode_prompt(&self, prompt: &ChatPrompt) -> Result<Vec<TokenId>> {
        Ok(self.tokenizer.encode(&render_chat(prompt, self.supports_system_role())))
    }

    fn generate_with_trace(
        &self,
        prompt: &ChatPrompt,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        self.run(&self.encode_prompt(prompt)?, settings, None, None)
    }

    fn patched_decode(
        &self,
        carrier: &ChatPrompt,
        vector: &[f32],
        target_layer: usize,
        settings: &GenerationSettings,
    ) -> Result<String> {
        settings.validate()?;
        let tokens = self.encode_prompt(carrier)?;
        let mut count = 0;
        for &t in &tokens {
            if self.tokenizer.token_text(t)?.trim() == PLACEHOLDER {
                count += 1;
            }
        }
        if count != 1 {
            return Err(Error::Prompt(format!(
                "carrier has {count} placeholder tokens, expected exactly one"
            )));
        }
        if target_layer > self.config.layer_count {
            return Err(Error::Bounds(format!(
                "target layer {target_layer} exceeds layer count {}",
                self.config.layer_count
            )));
        }
        check_vector(vector, self.config.hidden_dim)?;
        let text = match self.nearest_belief(vector) {
            Some(id) => &self.spec.verbalizer[id],
            None => &self.spec.null_text,
        };
        let mut ids = self.tokenizer.encode(&format!(" {text}"));
        ids.truncate(PATCHED_DECODE_TOKENS.min(settings.max_new_tokens));
        self.tokenizer.decode(&ids)
    }

    fn steered_generate(
        &self,
        record: &GenerationRecord,
        site: &InjectionSite,
        alpha: f32,
        stride: usize,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        super::tiny::validate_steering(&self.config, record, site, alpha, stride)?;
        self.run(&record.prompt_tokens, settings, Some((site, alpha, stride)), None)
    }

    fn injected_generate(
        &self,
        prompt: &ChatPrompt,
        injection: &PromptInjection,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        let tokens = self.encode_prompt(prompt)?;
        super::tiny::validate_prompt_injection(&self.config, tokens.len(), injection)?;
        let plan = self.plan(&tokens)?;
        let reader = plan.scenario.and_then(|s| s.injected_response.as_ref());
        let bg = self.background();
        let mut events = Vec::new();
        let mut total = 0f32;
        let mut used = 0usize;
        for &p in &injection.positions {
            match steer_update(&bg, &injection.vector, injection.alpha, p) {
                Ok(h) => {
                    if let Some(r) = reader {
                        total += dot(&h, &self.spec.belief_codebook[&r.belief]);
                        used += 1;
                    }
                    events.push(InterventionEvent { position: p, applied: true });
                }
                Err(e) => {
                    log::warn!("prompt injection skipped: {e}");
                    events.push(InterventionEvent { position: p, applied: false });
                }
            }
        }
        let projection = (used > 0).then(|| total / used as f32);
        let mut record = self.run(&tokens, settings, None, projection)?;
        record.interventions = events;
        Ok(record)
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f32>> {
        if context.is_empty() {
            return Err(Error::Input("empty context".to_owned()));
        }
        if context.len() > self.config.max_context {
            return Err(Error::Capacity { needed: context.len(), limit: self.config.max_context });
        }
        let assistant = self.tokenizer.id(ASSISTANT);
        let split = match context.iter().rposition(|&t| Some(t) == assistant) {
            Some(i) => {
                let nl = self.tokenizer.id("\n");
                if context.get(i + 1).copied() == nl && nl.is_some() {
                    i + 2
                } else {
                    i + 1
                }
            }
            None => context.len(),
        };
        let (prompt, generated) = context.split_at(split);
        let record = self.run(prompt, &GenerationSettings::greedy().with_max_new_tokens(usize::MAX), None, None)?;
        let reasoning_len = self.plan(prompt)?.reasoning_tokens.len();
        let script = &record.generated_tokens;
        let mut logits = vec![0f32; self.config.vocab_size];
        if generated.len() == reasoning_len && script.starts_with(generated) {
            return Ok(record.answer_logits.unwrap_or(logits));
        }
        let next = if script.starts_with(generated) {
            script.get(generated.len()).copied().unwrap_or(self.tokenizer.end_id())
        } else {
            self.tokenizer.end_id()
        };
        logits[next as usize] = 1.0;
        Ok(logits)
    }
}

/// Content of the last user turn in a rendered prompt (the whole text when
/// there is none).
fn last_user_segment(text: &str) -> &str {
    let header = format!("{USER}\n");
    match text.rfind(&header) {
        Some(i) => {
            let rest = &text[i + header.len()..];
            rest.find(END).map_or(rest, |e| &rest[..e])
        }
        None => text,
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
