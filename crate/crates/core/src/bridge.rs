// SPDX-License-Identifier: MIT OR Apache-2.0

//! Newline-delimited JSON protocol for driving an external runtime through
//! the [`InstrumentedLM`] contract.
//!
//! Every message is one JSON object on one line. Requests carry
//! `{"v": 1, "id": <u64>, "method": <name>, "params": {...}}`; responses carry
//! the same `id` and exactly one of `result` or `error`
//! (`{"code", "message", "data"?}`). A line that cannot be parsed as a request
//! is answered with `id: null` and [`codes::PARSE`].
//!
//! Float tensors travel as [`WireTensor`]: little-endian `f32` bytes, base64
//! encoded, with an explicit `shape`. Large traces may be split into
//! `chunks` (concatenated in order, typically one per layer block) instead
//! of a single `data` string.
//!
//! | method | params | result |
//! |---|---|---|
//! | `info` | `{}` | [`BridgeInfo`] |
//! | `tokenize` | `{text}` | `{tokens}` |
//! | `detokenize` | `{tokens}` | `{text}` |
//! | `encode_prompt` | `{prompt}` | `{tokens}` |
//! | `generate_with_trace` | `{prompt, settings}` | `{record}` |
//! | `patched_decode` | `{carrier, vector, target_layer, settings}` | `{text}` |
//! | `steered_generate` | `{prompt_tokens, generated_tokens, site, alpha, stride, settings}` | `{record}` |
//! | `injected_generate` | `{prompt, injection, settings}` | `{record}` |
//! | `next_token_logits` | `{context}` | `{logits}` |
//!
//! Traces hold the residual stream after each block (layer `0` is the
//! embedding output). Servers must hook that point, not a post-norm value.
//! `encode_prompt` and `injected_generate` may be missing on older servers;
//! the client then surfaces a bridge error naming the method.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{
    ActivationTrace, ChatPrompt, GenerationRecord, GenerationSettings, InjectionSite, InstrumentedLM,
    InterventionEvent, ModelConfig, PromptInjection, TokenId,
};

/// Protocol version carried in `v`.
pub const PROTOCOL_VERSION: u32 = 1;

/// Error codes.
pub mod codes {
    /// Line is not a well-formed request.
    pub const PARSE: i64 = -32700;
    /// Request has an unsupported version.
    pub const INVALID_REQUEST: i64 = -32600;
    /// Unknown method.
    pub const METHOD_NOT_FOUND: i64 = -32601;
    /// Params do not match the method.
    pub const INVALID_PARAMS: i64 = -32602;
    /// Model-side failures, one code per error kind.
    pub const FORMAT: i64 = -32001;
    /// Shape mismatch.
    pub const SHAPE: i64 = -32002;
    /// Context overflow; `data` = `{needed, limit}`.
    pub const CAPACITY: i64 = -32003;
    /// Index out of range.
    pub const BOUNDS: i64 = -32004;
    /// Malformed prompt.
    pub const PROMPT: i64 = -32005;
    /// Invalid argument.
    pub const INPUT: i64 = -32006;
    /// Zero-norm steering update; `data` = `{position}`.
    pub const SINGULAR: i64 = -32007;
    /// Unparseable output.
    pub const OUTPUT_PARSE: i64 = -32008;
    /// Anything else (load failure, out of memory, I/O).
    pub const INTERNAL: i64 = -32603;
}

// ---------------------------------------------------------------------------
// Wire types
// ---------------------------------------------------------------------------

/// A float tensor on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTensor {
    /// Dimensions; the product is the element count.
    pub shape: Vec<usize>,
    /// Always `"f32le"`.
    pub dtype: String,
    /// Base64 payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    /// Base64 payload split into pieces, concatenated in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chunks: Vec<String>,
}

impl WireTensor {
    /// Encode `values` with the given shape.
    pub fn encode(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!("shape {shape:?} does not hold {} values", values.len())));
        }
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Self { shape, dtype: "f32le".to_owned(), data: Some(B64.encode(bytes)), chunks: Vec::new() })
    }

    /// Encode with the payload split into `pieces` chunks of whole elements.
    pub fn encode_chunked(shape: Vec<usize>, values: &[f32], pieces: usize) -> Result<Self> {
        let mut t = Self::encode(shape, values)?;
        t.data = None;
        let per = values.len().div_ceil(pieces.max(1)).max(1);
        t.chunks = values
            .chunks(per)
            .map(|c| B64.encode(c.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()))
            .collect();
        Ok(t)
    }

    /// Vector tensor.
    pub fn vector(values: &[f32]) -> Self {
        Self::encode(vec![values.len()], values).expect("1-D shape always matches")
    }

    /// Decode to a flat buffer, checking the shape.
    pub fn decode(&self) -> Result<Vec<f32>> {
        if self.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported dtype {:?}", self.dtype)));
        }
        let mut bytes = Vec::new();
        match (&self.data, self.chunks.is_empty()) {
            (Some(d), true) => bytes = decode_b64(d)?,
            (None, false) => {
                for c in &self.chunks {
                    bytes.extend(decode_b64(c)?);
                }
            }
            (None, true) => {}
            (Some(_), false) => return Err(Error::Format("tensor has both data and chunks".to_owned())),
        }
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("tensor payload is not a whole number of f32 values".to_owned()));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let expected: usize = self.shape.iter().product();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "tensor payload holds {} values, shape {:?} needs {expected}",
                values.len(),
                self.shape
            )));
        }
        Ok(values)
    }

    /// Decode a 1-D tensor.
    pub fn decode_vector(&self) -> Result<Vec<f32>> {
        if self.shape.len() != 1 {
            return Err(Error::Shape(format!("expected a vector, got shape {:?}", self.shape)));
        }
        self.decode()
    }

    /// Encode a trace as `[positions, layers, dim]`.
    pub fn from_trace(trace: &ActivationTrace) -> Self {
        Self::encode(vec![trace.positions(), trace.layers(), trace.dim()], trace.as_flat())
            .expect("trace shape always matches")
    }

    /// Decode a `[positions, layers, dim]` tensor.
    pub fn to_trace(&self) -> Result<ActivationTrace> {
        let [p, l, d] = self.shape[..] else {
            return Err(Error::Shape(format!("trace must be 3-D, got shape {:?}", self.shape)));
        };
        ActivationTrace::from_flat(p, l, d, self.decode()?)
    }
}

fn decode_b64(s: &str) -> Result<Vec<u8>> {
    B64.decode(s).map_err(|e| Error::Format(format!("invalid base64: {e}")))
}

/// [`GenerationRecord`] on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    /// Prompt tokens.
    pub prompt_tokens: Vec<TokenId>,
    /// Generated tokens.
    pub generated_tokens: Vec<TokenId>,
    /// Generated text.
    pub text: String,
    /// Token byte offsets.
    pub token_offsets: Vec<usize>,
    /// `[positions, layers, dim]` trace.
    pub trace: WireTensor,
    /// Settings used.
    pub settings: GenerationSettings,
    /// Stopped at the budget.
    pub hit_length_limit: bool,
    /// Logits after the answer delimiter.
    #[serde(default)]
    pub answer_logits: Option<WireTensor>,
    /// Interventions attempted.
    #[serde(default)]
    pub interventions: Vec<InterventionEvent>,
}

impl WireRecord {
    /// Encode a record.
    pub fn from_record(r: &GenerationRecord) -> Self {
        Self {
            prompt_tokens: r.prompt_tokens.clone(),
            generated_tokens: r.generated_tokens.clone(),
            text: r.text.clone(),
            token_offsets: r.token_offsets.clone(),
            trace: WireTensor::from_trace(&r.trace),
            settings: r.settings,
            hit_length_limit: r.hit_length_limit,
            answer_logits: r.answer_logits.as_deref().map(WireTensor::vector),
            interventions: r.interventions.clone(),
        }
    }

    /// Decode into a record.
    pub fn into_record(self) -> Result<GenerationRecord> {
        if self.token_offsets.len() != self.generated_tokens.len() + 1 {
            return Err(Error::Format(format!(
                "{} token offsets for {} generated tokens",
                self.token_offsets.len(),
                self.generated_tokens.len()
            )));
        }
        let trace = self.trace.to_trace()?;
        if trace.positions() != self.generated_tokens.len() {
            return Err(Error::Shape(format!(
                "trace has {} positions for {} generated tokens",
                trace.positions(),
                self.generated_tokens.len()
            )));
        }
        Ok(GenerationRecord {
            prompt_tokens: self.prompt_tokens,
            generated_tokens: self.generated_tokens,
            text: self.text,
            token_offsets: self.token_offsets,
            trace,
            settings: self.settings,
            hit_length_limit: self.hit_length_limit,
            answer_logits: self.answer_logits.map(|t| t.decode_vector()).transpose()?,
            interventions: self.interventions,
        })
    }
}

/// Capabilities reported by `info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeInfo {
    /// Protocol version spoken by the server.
    pub protocol_version: u32,
    /// Number of blocks `L`.
    pub layer_count: usize,
    /// Residual width.
    pub hidden_dim: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    /// Attention heads.
    pub head_count: usize,
    /// Context window.
    pub max_context: usize,
    /// Whether the chat template has a system role.
    pub supports_system_role: bool,
}

impl BridgeInfo {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            layer_count: self.layer_count,
            hidden_dim: self.hidden_dim,
            vocab_size: self.vocab_size,
            head_count: self.head_count,
            max_context: self.max_context,
        }
    }
}

#[derive(Debug, Deserialize)]
struct Request {
    #[serde(default)]
    v: Option<u32>,
    id: u64,
    method: String,
    #[serde(default)]
    params: Value,
}

#[derive(Deserialize)]
struct TextParams {
    text: String,
}

#[derive(Deserialize)]
struct TokensParams {
    tokens: Vec<TokenId>,
}

#[derive(Deserialize)]
struct PromptParams {
    prompt: ChatPrompt,
}

#[derive(Deserialize)]
struct GenerateParams {
    prompt: ChatPrompt,
    settings: GenerationSettings,
}

#[derive(Deserialize)]
struct PatchedParams {
    carrier: ChatPrompt,
    vector: WireTensor,
    target_layer: usize,
    settings: GenerationSettings,
}

#[derive(Serialize, Deserialize)]
struct WireSite {
    position: usize,
    layer: usize,
    vector: WireTensor,
}

#[derive(Deserialize)]
struct SteeredParams {
    prompt_tokens: Vec<TokenId>,
    generated_tokens: Vec<TokenId>,
    site: WireSite,
    alpha: f32,
    stride: usize,
    settings: GenerationSettings,
}

#[derive(Serialize, Deserialize)]
struct WireInjection {
    positions: Vec<usize>,
    layer: usize,
    vector: WireTensor,
    alpha: f32,
}

#[derive(Deserialize)]
struct InjectedParams {
    prompt: ChatPrompt,
    injection: WireInjection,
    settings: GenerationSettings,
}

#[derive(Deserialize)]
struct ContextParams {
    context: Vec<TokenId>,
}

// ---------------------------------------------------------------------------
// Errors on the wire
// ---------------------------------------------------------------------------

fn error_object(e: &Error) -> Value {
    let (code, message, data) = match e {
        Error::Format(m) => (codes::FORMAT, m.clone(), None),
        Error::Shape(m) => (codes::SHAPE, m.clone(), None),
        Error::Capacity { needed, limit } => {
            (codes::CAPACITY, e.to_string(), Some(json!({"needed": needed, "limit": limit})))
        }
        Error::Bounds(m) => (codes::BOUNDS, m.clone(), None),
        Error::Prompt(m) => (codes::PROMPT, m.clone(), None),
        Error::Input(m) => (codes::INPUT, m.clone(), None),
        Error::Singular { position } => (codes::SINGULAR, e.to_string(), Some(json!({"position": position}))),
        Error::Parse(m) => (codes::OUTPUT_PARSE, m.clone(), None),
        other => (codes::INTERNAL, other.to_string(), None),
    };
    let mut obj = json!({"code": code, "message": message});
    if let Some(d) = data {
        obj["data"] = d;
    }
    obj
}

fn error_from_object(obj: &Value) -> Error {
    let code = obj.get("code").and_then(Value::as_i64).unwrap_or(codes::INTERNAL);
    let message = obj.get("message").and_then(Value::as_str).unwrap_or("").to_owned();
    let field = |k: &str| obj.get("data").and_then(|d| d.get(k)).and_then(Value::as_u64).map(|v| v as usize);
    match code {
        codes::FORMAT => Error::Format(message),
        codes::SHAPE => Error::Shape(message),
        codes::CAPACITY => match (field("needed"), field("limit")) {
            (Some(needed), Some(limit)) => Error::Capacity { needed, limit },
            _ => Error::Bridge(message),
        },
        codes::BOUNDS => Error::Bounds(message),
        codes::PROMPT => Error::Prompt(message),
        codes::INPUT | codes::INVALID_PARAMS => Error::Input(message),
        codes::SINGULAR => match field("position") {
            Some(position) => Error::Singular { position },
            None => Error::Bridge(message),
        },
        codes::OUTPUT_PARSE => Error::Parse(message),
        _ => Error::Bridge(format!("remote error {code}: {message}")),
    }
}

fn response(id: Option<u64>, outcome: std::result::Result<Value, Value>) -> String {
    let mut obj = json!({"v": PROTOCOL_VERSION, "id": id});
    match outcome {
        Ok(r) => obj["result"] = r,
        Err(e) => obj["error"] = e,
    }
    obj.to_string()
}

// ---------------------------------------------------------------------------
// Server side
// ---------------------------------------------------------------------------

fn params<T: for<'de> Deserialize<'de>>(v: Value) -> std::result::Result<T, Value> {
    serde_json::from_value(v).map_err(|e| json!({"code": codes::INVALID_PARAMS, "message": e.to_string()}))
}

fn model<T>(r: Result<T>) -> std::result::Result<T, Value> {
    r.map_err(|e| error_object(&e))
}

/// Info for a model.
pub fn info_of(lm: &dyn InstrumentedLM) -> BridgeInfo {
    let c = lm.config();
    BridgeInfo {
        protocol_version: PROTOCOL_VERSION,
        layer_count: c.layer_count,
        hidden_dim: c.hidden_dim,
        vocab_size: c.vocab_size,
        head_count: c.head_count,
        max_context: c.max_context,
        supports_system_role: lm.supports_system_role(),
    }
}

fn dispatch(lm: &dyn InstrumentedLM, method: &str, p: Value) -> std::result::Result<Value, Value> {
    let record = |r: GenerationRecord| json!({"record": WireRecord::from_record(&r)});
    Ok(match method {
        "info" => serde_json::to_value(info_of(lm)).expect("info serializes"),
        "tokenize" => {
            let p: TextParams = params(p)?;
            json!({"tokens": model(lm.tokenize(&p.text))?})
        }
        "detokenize" => {
            let p: TokensParams = params(p)?;
            json!({"text": model(lm.detokenize(&p.tokens))?})
        }
        "encode_prompt" => {
            let p: PromptParams = params(p)?;
            json!({"tokens": model(lm.encode_prompt(&p.prompt))?})
        }
        "generate_with_trace" => {
            let p: GenerateParams = params(p)?;
            record(model(lm.generate_with_trace(&p.prompt, &p.settings))?)
        }
        "patched_decode" => {
            let p: PatchedParams = params(p)?;
            let v = model(p.vector.decode_vector())?;
            json!({"text": model(lm.patched_decode(&p.carrier, &v, p.target_layer, &p.settings))?})
        }
        "steered_generate" => {
            let p: SteeredParams = params(p)?;
            let site = InjectionSite {
                position: p.site.position,
                layer: p.site.layer,
                vector: model(p.site.vector.decode_vector())?,
            };
            let dim = lm.config().hidden_dim;
            let layers = lm.config().layer_count + 1;
            // Implementations only read the token prefix of the source record.
            let source = GenerationRecord {
                prompt_tokens: p.prompt_tokens,
                token_offsets: vec![0; p.generated_tokens.len() + 1],
                generated_tokens: p.generated_tokens,
                text: String::new(),
                trace: model(ActivationTrace::from_flat(0, layers, dim, Vec::new()))?,
                settings: p.settings,
                hit_length_limit: false,
                answer_logits: None,
                interventions: Vec::new(),
            };
            record(model(lm.steered_generate(&source, &site, p.alpha, p.stride, &p.settings))?)
        }
        "injected_generate" => {
            let p: InjectedParams = params(p)?;
            let injection = PromptInjection {
                positions: p.injection.positions,
                layer: p.injection.layer,
                vector: model(p.injection.vector.decode_vector())?,
                alpha: p.injection.alpha,
            };
            record(model(lm.injected_generate(&p.prompt, &injection, &p.settings))?)
        }
        "next_token_logits" => {
            let p: ContextParams = params(p)?;
            json!({"logits": WireTensor::vector(&model(lm.next_token_logits(&p.context))?)})
        }
        other => {
            return Err(json!({"code": codes::METHOD_NOT_FOUND, "message": format!("unknown method {other:?}")}))
        }
    })
}

/// Answer one request line. Pure: the same line and model always give the
/// same response line.
pub fn handle_line(lm: &dyn InstrumentedLM, line: &str) -> String {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return response(None, Err(json!({"code": codes::PARSE, "message": e.to_string()})));
        }
    };
    if let Some(v) = req.v {
        if v != PROTOCOL_VERSION {
            let msg = format!("unsupported protocol version {v}");
            return response(Some(req.id), Err(json!({"code": codes::INVALID_REQUEST, "message": msg})));
        }
    }
    let params = if req.params.is_null() { json!({}) } else { req.params };
    response(Some(req.id), dispatch(lm, &req.method, params))
}

/// Serve requests from `reader` until end of input, one response line per
/// request line. Blank lines are ignored.
pub fn serve_lm(lm: &dyn InstrumentedLM, reader: impl BufRead, mut writer: impl Write) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(writer, "{}", handle_line(lm, &line))?;
        writer.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Client side
// ---------------------------------------------------------------------------

/// Parsed endpoint string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `bridge:stdio:<command>`: spawn a server and talk over its stdin/stdout.
    Stdio(Vec<String>),
    /// `bridge:socket:<path>`: connect to a Unix socket.
    Socket(String),
}

impl Endpoint {
    /// Parse `bridge:stdio:<command>` or `bridge:socket:<path>`; the
    /// `bridge:` prefix is optional. The command is split on whitespace.
    pub fn parse(s: &str) -> Result<Self> {
        let rest = s.strip_prefix("bridge:").unwrap_or(s);
        if let Some(cmd) = rest.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if argv.is_empty() {
                return Err(Error::Config("stdio endpoint has no command".to_owned()));
            }
            Ok(Self::Stdio(argv))
        } else if let Some(path) = rest.strip_prefix("socket:") {
            if path.is_empty() {
                return Err(Error::Config("socket endpoint has no path".to_owned()));
            }
            Ok(Self::Socket(path.to_owned()))
        } else {
            Err(Error::Config(format!(
                "endpoint {s:?} is neither bridge:stdio:<command> nor bridge:socket:<path>"
            )))
        }
    }
}

struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
}

/// [`InstrumentedLM`] backed by a bridge server. Requests are serialized
/// over one connection.
pub struct BridgeClient {
    conn: Mutex<Connection>,
    info: BridgeInfo,
    config: ModelConfig,
    child: Option<Mutex<Child>>,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient").field("info", &self.info).finish_non_exhaustive()
    }
}

impl BridgeClient {
    /// Connect to an endpoint string.
    pub fn connect(endpoint: &str) -> Result<Self> {
        match Endpoint::parse(endpoint)? {
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Bridge(format!("cannot spawn {:?}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let mut client = Self::from_streams(Box::new(stdout), Box::new(stdin))?;
                client.child = Some(Mutex::new(child));
                Ok(client)
            }
            #[cfg(unix)]
            Endpoint::Socket(path) => {
                let stream = std::os::unix::net::UnixStream::connect(&path)
                    .map_err(|e| Error::Bridge(format!("cannot connect to {path}: {e}")))?;
                let read = stream.try_clone()?;
                Self::from_streams(Box::new(read), Box::new(stream))
            }
            #[cfg(not(unix))]
            Endpoint::Socket(_) => Err(Error::Config("socket endpoints need a Unix platform".to_owned())),
        }
    }

    /// Client over an existing pair of streams; sends `info` first.
    pub fn from_streams(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Result<Self> {
        let conn = Mutex::new(Connection { reader: BufReader::new(reader), writer, next_id: 1 });
        let mut client = Self {
            conn,
            info: BridgeInfo {
                protocol_version: PROTOCOL_VERSION,
                layer_count: 0,
                hidden_dim: 0,
                vocab_size: 0,
                head_count: 0,
                max_context: 0,
                supports_system_role: false,
            },
            config: ModelConfig { layer_count: 0, hidden_dim: 0, vocab_size: 0, head_count: 0, max_context: 0 },
            child: None,
        };
        let info: BridgeInfo = serde_json::from_value(client.call("info", json!({}))?)
            .map_err(|e| Error::Bridge(format!("malformed info: {e}")))?;
        if info.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Bridge(format!("server speaks protocol {}", info.protocol_version)));
        }
        client.config = info.config();
        client.config.validate()?;
        client.info = info;
        Ok(client)
    }

    /// Capabilities reported by the server.
    pub fn info(&self) -> &BridgeInfo {
        &self.info
    }

    /// Send one request and wait for its response.
    pub fn call(&self, method: &str, params: Value) -> Result<Value> {
        let mut conn = self.conn.lock().map_err(|_| Error::Bridge("connection poisoned".to_owned()))?;
        let id = conn.next_id;
        conn.next_id += 1;
        let line = json!({"v": PROTOCOL_VERSION, "id": id, "method": method, "params": params}).to_string();
        writeln!(conn.writer, "{line}").map_err(|e| Error::Bridge(format!("send failed: {e}")))?;
        conn.writer.flush().map_err(|e| Error::Bridge(format!("send failed: {e}")))?;
        let mut buf = String::new();
        let n = conn.reader.read_line(&mut buf).map_err(|e| Error::Bridge(format!("receive failed: {e}")))?;
        if n == 0 {
            return Err(Error::Bridge("server closed the connection".to_owned()));
        }
        let mut resp: Value =
            serde_json::from_str(&buf).map_err(|e| Error::Bridge(format!("malformed response: {e}")))?;
        if resp.get("id").and_then(Value::as_u64) != Some(id) {
            if let Some(err) = resp.get("error") {
                return Err(error_from_object(err));
            }
            return Err(Error::Bridge(format!("response id {:?} does not match request {id}", resp.get("id"))));
        }
        if let Some(err) = resp.get("error") {
            return Err(error_from_object(err));
        }
        resp.get_mut("result")
            .map(Value::take)
            .ok_or_else(|| Error::Bridge("response has neither result nor error".to_owned()))
    }

    fn field<T: for<'de> Deserialize<'de>>(&self, method: &str, params: Value, key: &str) -> Result<T> {
        let mut v = self.call(method, params)?;
        let f = v.get_mut(key).map(Value::take).ok_or_else(|| Error::Bridge(format!("{method} result lacks {key}")))?;
        serde_json::from_value(f).map_err(|e| Error::Bridge(format!("{method}: {e}")))
    }

    fn record(&self, method: &str, params: Value) -> Result<GenerationRecord> {
        let r: WireRecord = self.field(method, params, "record")?;
        r.into_record()
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                // Closing stdin ends the server loop; kill only if it lingers.
                if let Ok(mut conn) = self.conn.lock() {
                    conn.writer = Box::new(std::io::sink());
                }
                if !matches!(c.try_wait(), Ok(Some(_))) {
                    std::thread::sleep(std::time::Duration::from_millis(20));
                    if !matches!(c.try_wait(), Ok(Some(_))) {
                        let _ = c.kill();
                    }
                }
                let _ = c.wait();
            }
        }
    }
}

impl InstrumentedLM for BridgeClient {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn supports_system_role(&self) -> bool {
        self.info.supports_system_role
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.field("tokenize", json!({"text": text}), "tokens")
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        self.field("detokenize", json!({"tokens": tokens}), "text")
    }

    fn encode_prompt(&self, prompt: &ChatPrompt) -> Result<Vec<TokenId>> {
        self.field("encode_prompt", json!({"prompt": prompt}), "tokens")
    }

    fn generate_with_trace(&self, prompt: &ChatPrompt, settings: &GenerationSettings) -> Result<GenerationRecord> {
        self.record("generate_with_trace", json!({"prompt": prompt, "settings": settings}))
    }

    fn patched_decode(
        &self,
        carrier: &ChatPrompt,
        vector: &[f32],
        target_layer: usize,
        settings: &GenerationSettings,
    ) -> Result<String> {
        let p = json!({
            "carrier": carrier,
            "vector": WireTensor::vector(vector),
            "target_layer": target_layer,
            "settings": settings,
        });
        self.field("patched_decode", p, "text")
    }

    fn steered_generate(
        &self,
        record: &GenerationRecord,
        site: &InjectionSite,
        alpha: f32,
        stride: usize,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        let p = json!({
            "prompt_tokens": record.prompt_tokens,
            "generated_tokens": record.generated_tokens,
            "site": WireSite { position: site.position, layer: site.layer, vector: WireTensor::vector(&site.vector) },
            "alpha": alpha,
            "stride": stride,
            "settings": settings,
        });
        self.record("steered_generate", p)
    }

    fn injected_generate(
        &self,
        prompt: &ChatPrompt,
        injection: &PromptInjection,
        settings: &GenerationSettings,
    ) -> Result<GenerationRecord> {
        let inj = WireInjection {
            positions: injection.positions.clone(),
            layer: injection.layer,
            vector: WireTensor::vector(&injection.vector),
            alpha: injection.alpha,
        };
        self.record("injected_generate", json!({"prompt": prompt, "injection": inj, "settings": settings}))
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f32>> {
        let t: WireTensor = self.field("next_token_logits", json!({"context": context}), "logits")?;
        t.decode_vector()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let vals: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 * 0.37).sin() * 1e-3 + f32::EPSILON * i as f32).collect();
        let t = WireTensor::encode(vec![3, 4, 5], &vals).unwrap();
        let back = t.decode().unwrap();
        assert!(vals.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        let c = WireTensor::encode_chunked(vec![3, 4, 5], &vals, 4).unwrap();
        assert_eq!(c.chunks.len(), 4);
        assert_eq!(c.decode().unwrap(), vals);
    }

    #[test]
    fn tensor_shape_checked() {
        let mut t = WireTensor::vector(&[1.0, 2.0]);
        t.shape = vec![3];
        assert!(matches!(t.decode(), Err(Error::Shape(_))));
        t.dtype = "f16".to_owned();
        assert!(matches!(t.decode(), Err(Error::Format(_))));
    }

    #[test]
    fn endpoints() {
        assert_eq!(
            Endpoint::parse("bridge:stdio:python -m srv").unwrap(),
            Endpoint::Stdio(vec!["python".into(), "-m".into(), "srv".into()])
        );
        assert_eq!(Endpoint::parse("bridge:socket:/tmp/s").unwrap(), Endpoint::Socket("/tmp/s".into()));
        assert!(Endpoint::parse("bridge:tcp:1").is_err());
        assert!(Endpoint::parse("bridge:stdio:").is_err());
    }

    #[test]
    fn errors_roundtrip() {
        for e in [
            Error::Shape("s".into()),
            Error::Capacity { needed: 9, limit: 4 },
            Error::Singular { position: 3 },
            Error::Bounds("b".into()),
        ] {
            let back = error_from_object(&error_object(&e));
            assert_eq!(std::mem::discriminant(&back), std::mem::discriminant(&e));
        }
        assert!(matches!(error_from_object(&json!({"code": codes::SINGULAR, "message": "x", "data": {"position": 5}})), Error::Singular { position: 5 }));
    }
}
