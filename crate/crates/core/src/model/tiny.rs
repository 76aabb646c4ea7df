// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic tiny decoder-only transformer.
//!
//! Pre-norm blocks (`h += attn(LN(h)); h += mlp(LN(h))`), learned absolute
//! positional embeddings, GELU MLP with 4× expansion, final LayerNorm and an
//! unembedding tied to the token embedding. All arithmetic is `f32` in a
//! fixed evaluation order, so incremental decoding with a KV cache and a
//! full recompute produce bit-identical activations.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::sampling::choose;
use crate::model::tokenizer::{render_chat, Tokenizer};
use crate::model::weights::{Tensor, WeightFile};
use crate::model::{
    check_vector, ends_with_delimiter, in_delimiter, steer_update, ChatPrompt, DecodeMode,
    GenerationRecord, GenerationSettings, InjectionSite, InstrumentedLM, InterventionEvent,
    ModelConfig, PromptInjection, TokenId, TraceBuilder, PATCHED_DECODE_TOKENS, PLACEHOLDER,
};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
struct Block {
    ln1_g: Vec<f32>,
    ln1_b: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ln2_g: Vec<f32>,
    ln2_b: Vec<f32>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

/// A small pre-norm transformer with full residual-stream instrumentation.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    config: ModelConfig,
    tokenizer: Tokenizer,
    tok_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    blocks: Vec<Block>,
    lnf_g: Vec<f32>,
    lnf_b: Vec<f32>,
}

/// Per-layer key/value cache, flattened `[position][dim]`.
struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        Self { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }
}

/// Edit applied to the residual stream of prompt positions.
enum PromptEdit<'a> {
    None,
    Replace { position: usize, layer: usize, vector: &'a [f32] },
    Inject(&'a PromptInjection),
}

struct Steer<'a> {
    site: &'a InjectionSite,
    alpha: f32,
    stride: usize,
}

fn expected_tensors(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, ctx) = (c.hidden_dim, c.vocab_size, c.max_context);
    let mut out = vec![
        ("tok_emb".to_owned(), vec![v, d]),
        ("pos_emb".to_owned(), vec![ctx, d]),
    ];
    for l in 0..c.layer_count {
        for (name, dims) in [
            ("ln1_g", vec![d]),
            ("ln1_b", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("ln2_g", vec![d]),
            ("ln2_b", vec![d]),
            ("w1", vec![d, 4 * d]),
            ("b1", vec![4 * d]),
            ("w2", vec![4 * d, d]),
            ("b2", vec![d]),
        ] {
            out.push((format!("blocks.{l}.{name}"), dims));
        }
    }
    out.push(("lnf_g".to_owned(), vec![d]));
    out.push(("lnf_b".to_owned(), vec![d]));
    out
}

impl TinyTransformer {
    /// Randomly initialised model over `tokenizer`'s vocabulary.
    pub fn random(
        tokenizer: Tokenizer,
        layer_count: usize,
        hidden_dim: usize,
        head_count: usize,
        max_context: usize,
        seed: u64,
    ) -> Result<Self> {
        let config = ModelConfig {
            layer_count,
            hidden_dim,
            vocab_size: tokenizer.len(),
            head_count,
            max_context,
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, std: f32| -> Vec<f32> {
            let a = std * 3f32.sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        };
        let d = hidden_dim;
        let lin = 1.0 / (d as f32).sqrt();
        let tok_emb = uniform(config.vocab_size * d, 0.5);
        let pos_emb = uniform(max_context * d, 0.1);
        let mut blocks = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            blocks.push(Block {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: uniform(d * d, lin),
                wk: uniform(d * d, lin),
                wv: uniform(d * d, lin),
                wo: uniform(d * d, lin * 0.5),
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w1: uniform(d * 4 * d, lin),
                b1: uniform(4 * d, 0.02),
                w2: uniform(4 * d * d, lin * 0.25),
                b2: uniform(d, 0.02),
            });
        }
        Ok(Self {
            config,
            tokenizer,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
        })
    }

    /// Build a tokenizer from `texts` and a random model over it.
    pub fn from_corpus<S: AsRef<str>>(
        texts: &[S],
        max_vocab: usize,
        layer_count: usize,
        hidden_dim: usize,
        head_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let tokenizer = Tokenizer::build(texts, max_vocab)?;
        Self::random(tokenizer, layer_count, hidden_dim, head_count, ModelConfig::MIN_CONTEXT, seed)
    }

    /// Tokenizer used by the model.
    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Serialize to the binary weight format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let shapes = expected_tensors(&self.config);
        let mut datas: Vec<&Vec<f32>> = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            datas.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.w1,
                &b.b1, &b.w2, &b.b2,
            ]);
        }
        datas.push(&self.lnf_g);
        datas.push(&self.lnf_b);
        for ((name, dims), data) in shapes.into_iter().zip(datas) {
            tensors.push(Tensor { name, dims, data: data.clone() });
        }
        WeightFile { config: self.config, vocab: self.tokenizer.vocab().to_vec(), tensors }
            .to_bytes()
    }

    /// Parse the binary weight format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = WeightFile::from_bytes(bytes, expected_tensors)?;
        let tokenizer = Tokenizer::from_vocab(file.vocab)?;
        let mut it = file.tensors.into_iter().map(|t| t.data);
        let mut next = || it.next().ok_or_else(|| Error::Shape("missing tensor".to_owned()));
        let tok_emb = next()?;
        let pos_emb = next()?;
        let mut blocks = Vec::with_capacity(file.config.layer_count);
        for _ in 0..file.config.layer_count {
            blocks.push(Block {
                ln1_g: next()?,
                ln1_b: next()?,
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                ln2_g: next()?,
                ln2_b: next()?,
                w1: next()?,
                b1: next()?,
                w2: next()?,
                b2: next()?,
            });
        }
        let lnf_g = next()?;
        let lnf_b = next()?;
        Ok(Self { config: file.config, tokenizer, tok_emb, pos_emb, blocks, lnf_g, lnf_b })
    }

    /// Write the weight file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Read a weight file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Run one position through the network. `hook(layer, residual)` sees
    /// (and may rewrite) the residual after the embedding (`layer = 0`) and
    /// after each block. Returns the per-layer residuals and the logits.
    fn step(
        &self,
        token: TokenId,
        cache: &mut KvCache,
        hook: &mut dyn FnMut(usize, &mut Vec<f32>),
    ) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
        let d = self.config.hidden_dim;
        let pos = cache.len;
        if pos >= self.config.max_context {
            return Err(Error::Capacity { needed: pos + 1, limit: self.config.max_context });
        }
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(Error::Bounds(format!("token id {token} outside vocabulary")));
        }
        let mut h: Vec<f32> = self.tok_emb[t * d..(t + 1) * d]
            .iter()
            .zip(&self.pos_emb[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let mut residuals = Vec::with_capacity(self.config.layer_count + 1);
        hook(0, &mut h);
        residuals.push(h.clone());
        let heads = self.config.head_count;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        for (l, b) in self.blocks.iter().enumerate() {
            let x = layer_norm(&h, &b.ln1_g, &b.ln1_b);
            let q = matvec(&x, &b.wq, d);
            let k = matvec(&x, &b.wk, d);
            let v = matvec(&x, &b.wv, d);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let n = pos + 1;
            let mut attn_out = vec![0f32; d];
            let mut scores = vec![0f32; n];
            for head in 0..heads {
                let off = head * dh;
                let mut max = f32::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &cache.keys[l][j * d + off..j * d + off + dh];
                    let dot: f32 = q[off..off + dh].iter().zip(kj).map(|(a, b)| a * b).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut total = 0f32;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / total;
                    let vj = &cache.values[l][j * d + off..j * d + off + dh];
                    for (o, vv) in attn_out[off..off + dh].iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            let proj = matvec(&attn_out, &b.wo, d);
            for (hi, p) in h.iter_mut().zip(&proj) {
                *hi += p;
            }
            let x = layer_norm(&h, &b.ln2_g, &b.ln2_b);
            let mut hidden = matvec(&x, &b.w1, 4 * d);
            for (u, bias) in hidden.iter_mut().zip(&b.b1) {
                *u = gelu(*u + bias);
            }
            let out = matvec(&hidden, &b.w2, d);
            for ((hi, o), bias) in h.iter_mut().zip(&out).zip(&b.b2) {
                *hi += o + bias;
            }
            hook(l + 1, &mut h);
            residuals.push(h.clone());
        }
        cache.len += 1;
        let x = layer_norm(&h, &self.lnf_g, &self.lnf_b);
        let logits = (0..self.config.vocab_size)
            .map(|t| {
                self.tok_emb[t * d..(t + 1) * d]
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok((residuals, logits))
    }

    /// Shared generation driver.
    ///
    /// `forced` tokens are teacher-forced as the first generated tokens; the
    /// sampler only runs (and only consumes randomness) after them.
    fn generate_inner(
        &self,
        prompt_tokens: &[TokenId],
        forced: &[TokenId],
        settings: &GenerationSettings,
        edit: PromptEdit<'_>,
        steer: Option<Steer<'_>>,
    ) -> Result<GenerationRecord> {
        settings.validate()?;
        if prompt_tokens.is_empty() {
            return Err(Error::Input("empty prompt".to_owned()));
        }
        if prompt_tokens.len() >= self.config.max_context {
            return Err(Error::Capacity {
                needed: prompt_tokens.len() + 1,
                limit: self.config.max_context,
            });
        }
        let layers = self.config.layer_count + 1;
        let mut events = Vec::new();
        let mut cache = KvCache::new(self.config.layer_count);
        let mut logits = Vec::new();
        for (p, &tok) in prompt_tokens.iter().enumerate() {
            let mut hook = |layer: usize, h: &mut Vec<f32>| match &edit {
                PromptEdit::Replace { position, layer: at, vector } if *position == p && *at == layer => {
                    h.copy_from_slice(vector);
                }
                PromptEdit::Inject(inj) if inj.layer == layer && inj.positions.contains(&p) => {
                    match steer_update(h, &inj.vector, inj.alpha, p) {
                        Ok(v) => {
                            *h = v;
                            events.push(InterventionEvent { position: p, applied: true });
                        }
                        Err(e) => {
                            log::warn!("prompt injection skipped: {e}");
                            events.push(InterventionEvent { position: p, applied: false });
                        }
                    }
                }
                _ => {}
            };
            logits = self.step(tok, &mut cache, &mut hook)?.1;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut trace = TraceBuilder::new(layers, self.config.hidden_dim);
        let mut generated: Vec<TokenId> = Vec::new();
        let mut text = String::new();
        let mut answer_logits = None;
        let mut steering_open = true;
        let mut hit_length_limit = false;
        loop {
            if generated.len() >= settings.max_new_tokens || cache.len >= self.config.max_context {
                hit_length_limit = true;
                break;
            }
            let j = generated.len();
            let tok = match forced.get(j) {
                Some(&t) => {
                    // Keep the sampler aligned with an unforced run of the same seed.
                    if settings.mode == DecodeMode::Sampled {
                        let _: f64 = rng.random();
                    }
                    t
                }
                None => {
                    let t = choose(&logits, settings, &mut rng);
                    if t == self.tokenizer.end_id() {
                        break;
                    }
                    t
                }
            };
            generated.push(tok);
            text.push_str(self.tokenizer.token_text(tok)?);

            let mut steer_here = None;
            if let Some(s) = &steer {
                if steering_open && in_delimiter(&text) {
                    steering_open = false;
                }
                if steering_open && j >= s.site.position && (j - s.site.position).is_multiple_of(s.stride) {
                    steer_here = Some(s);
                }
            }
            let mut hook = |layer: usize, h: &mut Vec<f32>| {
                if let Some(s) = steer_here {
                    if layer == s.site.layer {
                        match steer_update(h, &s.site.vector, s.alpha, j) {
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
            };
            let (residuals, next) = self.step(tok, &mut cache, &mut hook)?;
            trace.push(&residuals);
            logits = next;
            if ends_with_delimiter(&text) {
                answer_logits = Some(logits.clone());
            }
        }
        let token_offsets = self.tokenizer.offsets(&generated)?;
        Ok(GenerationRecord {
            prompt_tokens: prompt_tokens.to_vec(),
            generated_tokens: generated,
            text,
            token_offsets,
            trace: trace.finish()?,
            settings: *settings,
            hit_length_limit,
            answer_logits,
            interventions: events,
        })
    }

    /// Recompute the trace of `record` from its tokens alone.
    pub fn recompute_trace(&self, record: &GenerationRecord) -> Result<crate::model::ActivationTrace> {
        let mut cache = KvCache::new(self.config.layer_count);
        let mut noop = |_: usize, _: &mut Vec<f32>| {};
        for &t in &record.prompt_tokens {
            self.step(t, &mut cache, &mut noop)?;
        }
        let mut trace = TraceBuilder::new(self.config.layer_count + 1, self.config.hidden_dim);
        for &t in &record.generated_tokens {
            trace.push(&self.step(t, &mut cache, &mut noop)?.0);
        }
        trace.finish()
    }

    fn placeholder_index(&self, tokens: &[TokenId]) -> Result<usize> {
        let mut found = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            if self.tokenizer.token_text(t)?.trim() == PLACEHOLDER {
                found.push(i);
            }
        }
        match found.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Prompt("carrier has no placeholder token".to_owned())),
            _ => Err(Error::Prompt(format!(
                "carrier has {} placeholder tokens, expected exactly one",
                found.len()
            ))),
        }
    }
}

impl InstrumentedLM for TinyTransformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn supports_system_role(&self) -> bool {
        true
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
        let tokens = self.encode_prompt(prompt)?;
        self.generate_inner(&tokens, &[], settings, PromptEdit::None, None)
    }

    fn patched_decode(
        &self,
        carrier: &ChatPrompt,
        vector: &[f32],
        target_layer: usize,
        settings: &GenerationSettings,
    ) -> Result<String> {
        let tokens = self.encode_prompt(carrier)?;
        let position = self.placeholder_index(&tokens)?;
        if target_layer > self.config.layer_count {
            return Err(Error::Bounds(format!(
                "target layer {target_layer} exceeds layer count {}",
                self.config.layer_count
            )));
        }
        check_vector(vector, self.config.hidden_dim)?;
        let settings = settings.with_max_new_tokens(PATCHED_DECODE_TOKENS);
        let edit = PromptEdit::Replace { position, layer: target_layer, vector };
        Ok(self.generate_inner(&tokens, &[], &settings, edit, None)?.text)
    }

    fn steered_generate(
        &self,
        record: &GenerationRecord,
        site: &InjectionSite,
        alpha: f32,
        stride: usize,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        validate_steering(&self.config, record, site, alpha, stride)?;
        let forced = &record.generated_tokens[..=site.position];
        let steer = Steer { site, alpha, stride };
        self.generate_inner(&record.prompt_tokens, forced, settings, PromptEdit::None, Some(steer))
    }

    fn injected_generate(
        &self,
        prompt: &ChatPrompt,
        injection: &PromptInjection,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        let tokens = self.encode_prompt(prompt)?;
        validate_prompt_injection(&self.config, tokens.len(), injection)?;
        self.generate_inner(&tokens, &[], settings, PromptEdit::Inject(injection), None)
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f32>> {
        if context.is_empty() {
            return Err(Error::Input("empty context".to_owned()));
        }
        if context.len() > self.config.max_context {
            return Err(Error::Capacity { needed: context.len(), limit: self.config.max_context });
        }
        let mut cache = KvCache::new(self.config.layer_count);
        let mut noop = |_: usize, _: &mut Vec<f32>| {};
        let mut logits = Vec::new();
        for &t in context {
            logits = self.step(t, &mut cache, &mut noop)?.1;
        }
        Ok(logits)
    }
}

pub(crate) fn validate_steering(
    config: &ModelConfig,
    record: &GenerationRecord,
    site: &InjectionSite,
    alpha: f32,
    stride: usize,
) -> Result<()> {
    if stride == 0 {
        return Err(Error::Input("steering stride must be at least 1".to_owned()));
    }
    if !alpha.is_finite() {
        return Err(Error::Input("steering alpha must be finite".to_owned()));
    }
    if site.position >= record.generated_tokens.len() {
        return Err(Error::Bounds(format!(
            "injection position {} outside generation of {} tokens",
            site.position,
            record.generated_tokens.len()
        )));
    }
    if site.layer > config.layer_count {
        return Err(Error::Bounds(format!(
            "injection layer {} exceeds layer count {}",
            site.layer, config.layer_count
        )));
    }
    check_vector(&site.vector, config.hidden_dim)
}

pub(crate) fn validate_prompt_injection(
    config: &ModelConfig,
    prompt_len: usize,
    injection: &PromptInjection,
) -> Result<()> {
    if injection.layer > config.layer_count {
        return Err(Error::Bounds(format!(
            "injection layer {} exceeds layer count {}",
            injection.layer, config.layer_count
        )));
    }
    if let Some(&p) = injection.positions.iter().find(|&&p| p >= prompt_len) {
        return Err(Error::Bounds(format!("prompt position {p} outside prompt of {prompt_len} tokens")));
    }
    if !injection.alpha.is_finite() {
        return Err(Error::Input("injection alpha must be finite".to_owned()));
    }
    check_vector(&injection.vector, config.hidden_dim)
}

fn layer_norm(x: &[f32], g: &[f32], b: &[f32]) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// `x · W` with `W` stored row-major as `[x.len()][out]`.
fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0f32; out];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sampling::argmax;
    use crate::model::ChatMessage;

    fn tiny() -> TinyTransformer {
        TinyTransformer::from_corpus(
            &["What is the capital of France? Paris is the capital.", "The bee landed on the flower."],
            300,
            2,
            16,
            2,
            11,
        )
        .unwrap()
    }

    fn prompt() -> ChatPrompt {
        ChatPrompt::chat(vec![ChatMessage::user("What is the capital of France?")])
    }

    #[test]
    fn greedy_is_deterministic_and_recomputable() {
        let m = tiny();
        let s = GenerationSettings::greedy().with_max_new_tokens(12);
        let a = m.generate_with_trace(&prompt(), &s).unwrap();
        let b = m.generate_with_trace(&prompt(), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.positions(), a.generated_tokens.len());
        assert_eq!(m.detokenize(&a.generated_tokens).unwrap(), a.text);
        let re = m.recompute_trace(&a).unwrap();
        for (x, y) in re.as_flat().iter().zip(a.trace.as_flat()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn weights_roundtrip_bit_identical() {
        let m = tiny();
        let bytes = m.to_bytes();
        let back = TinyTransformer::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = tiny().to_bytes();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(TinyTransformer::from_bytes(cut), Err(Error::Format(_))));
        assert!(matches!(TinyTransformer::from_bytes(&bytes[..3]), Err(Error::Format(_))));
    }

    #[test]
    fn header_payload_mismatch_is_shape_error() {
        let m = tiny();
        let mut bytes = m.to_bytes();
        // hidden_dim lives at offset 12; the vocabulary entries still parse,
        // so the first tensor's recorded shape disagrees with the header.
        bytes[12..16].copy_from_slice(&32u32.to_le_bytes());
        assert!(matches!(TinyTransformer::from_bytes(&bytes), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = tiny().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(TinyTransformer::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn logits_argmax_matches_greedy() {
        let m = tiny();
        let s = GenerationSettings::greedy().with_max_new_tokens(3);
        let rec = m.generate_with_trace(&prompt(), &s).unwrap();
        let logits = m.next_token_logits(&rec.prompt_tokens).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        if let Some(&first) = rec.generated_tokens.first() {
            assert_eq!(argmax(&logits), first);
        }
        assert!(matches!(m.next_token_logits(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn patched_decode_validates_inputs() {
        let m = tiny();
        let s = GenerationSettings::sampled(0.5, 1);
        let v = vec![0.1; 16];
        assert!(m.patched_decode(&ChatPrompt::carrier(), &v, 2, &s).is_ok());
        assert!(matches!(
            m.patched_decode(&ChatPrompt::completion("Sure, tell me"), &v, 0, &s),
            Err(Error::Prompt(_))
        ));
        assert!(matches!(
            m.patched_decode(&ChatPrompt::completion("x and x"), &v, 0, &s),
            Err(Error::Prompt(_))
        ));
        assert!(matches!(m.patched_decode(&ChatPrompt::carrier(), &v, 3, &s), Err(Error::Bounds(_))));
        assert!(matches!(
            m.patched_decode(&ChatPrompt::carrier(), &[0.0; 3], 0, &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn steering_alpha_zero_matches_baseline_per_seed() {
        let m = tiny();
        let greedy = GenerationSettings::greedy().with_max_new_tokens(16);
        let rec = m.generate_with_trace(&prompt(), &greedy).unwrap();
        let site = InjectionSite { position: 1, layer: 1, vector: vec![0.3; 16] };
        for seed in 0..3 {
            let s = GenerationSettings::sampled(0.5, seed).with_max_new_tokens(16);
            let a = m.steered_generate(&rec, &site, 0.0, 4, &s).unwrap();
            let b = m.steered_generate(&rec, &site, 0.0, 4, &s).unwrap();
            assert_eq!(a.generated_tokens, b.generated_tokens);
            let steered = m.steered_generate(&rec, &site, 2.0, 4, &s).unwrap();
            assert_eq!(steered.generated_tokens[..=1], rec.generated_tokens[..=1]);
        }
    }

    #[test]
    fn capacity_error_on_overflow() {
        let m = tiny();
        let long = "Paris ".repeat(600);
        let p = ChatPrompt::chat(vec![ChatMessage::user(long)]);
        assert!(matches!(
            m.generate_with_trace(&p, &GenerationSettings::greedy()),
            Err(Error::Capacity { .. })
        ));
    }
}
