// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace/punctuation tokenizer built from a text corpus.
//!
//! Text is pre-split into pieces: a word (alphanumeric run) or punctuation
//! character, optionally carrying a single leading space, or a lone
//! whitespace character. Pieces present in the vocabulary map to one id;
//! otherwise the piece falls back to single-character tokens, and characters
//! never seen at build time map to `<|unk|>`.
//!
//! Every token renders to a valid UTF-8 string, so
//! `decode(encode(text))` is exact whenever no character is unknown.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::model::{ChatPrompt, Role, TokenId};

/// Unknown-character token.
pub const UNK: &str = "<|unk|>";
/// End-of-turn / end-of-sequence token.
pub const END: &str = "<|end|>";
/// Chat role header tokens.
pub const SYSTEM: &str = "<|system|>";
/// Chat role header tokens.
pub const USER: &str = "<|user|>";
/// Chat role header tokens.
pub const ASSISTANT: &str = "<|assistant|>";

const SPECIALS: [&str; 5] = [UNK, END, SYSTEM, USER, ASSISTANT];
const UNK_RENDER: &str = "\u{FFFD}";

/// Texts that every vocabulary must cover so the fixed prompts tokenize
/// without character fallback.
pub const BASE_TEXTS: &[&str] = &[
    "Sure, I'll tell you about x",
    "Final answer:",
    "0 1 2 3 4 5 6 7 8 9",
    "\n",
];

/// Corpus-built word/punctuation tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Build a vocabulary from `texts`, keeping at most `max_vocab` entries.
    ///
    /// Special tokens and every character seen in the corpus are always
    /// kept; the remaining budget goes to the most frequent multi-character
    /// pieces (ties broken lexicographically), so the build is deterministic.
    pub fn build<S: AsRef<str>>(texts: &[S], max_vocab: usize) -> Result<Self> {
        let mut chars = std::collections::BTreeSet::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let all = BASE_TEXTS
            .iter()
            .copied()
            .chain(texts.iter().map(AsRef::as_ref));
        for text in all {
            for piece in pre_tokenize(text) {
                if SPECIALS.contains(&piece) {
                    continue;
                }
                for c in piece.chars() {
                    chars.insert(c.to_string());
                }
                if piece.chars().count() > 1 {
                    *counts.entry(piece.to_owned()).or_default() += 1;
                }
            }
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| (*s).to_owned()).collect();
        vocab.extend(chars);
        if vocab.len() > max_vocab {
            return Err(Error::Config(format!(
                "vocabulary budget {max_vocab} is smaller than the {} mandatory tokens",
                vocab.len()
            )));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = max_vocab - vocab.len();
        vocab.extend(ranked.into_iter().take(budget).map(|(p, _)| p));
        Self::from_vocab(vocab)
    }

    /// Rebuild a tokenizer from a stored vocabulary list.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Format(format!(
                    "vocabulary entry {i} must be the special token {s}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, piece) in vocab.iter().enumerate() {
            let id = TokenId::try_from(i)
                .map_err(|_| Error::Format("vocabulary too large".to_owned()))?;
            if index.insert(piece.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {piece:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    /// Whether the vocabulary is empty (never true for a valid tokenizer).
    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Vocabulary in id order.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Id of an exact vocabulary entry.
    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    /// End-of-sequence id.
    pub fn end_id(&self) -> TokenId {
        1
    }

    /// Encode text into token ids.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            if let Some(id) = self.id(piece) {
                out.push(id);
                continue;
            }
            let mut buf = [0u8; 4];
            for c in piece.chars() {
                out.push(self.id(c.encode_utf8(&mut buf)).unwrap_or(0));
            }
        }
        out
    }

    /// Rendered text of a single token.
    pub fn token_text(&self, id: TokenId) -> Result<&str> {
        let piece = self
            .vocab
            .get(id as usize)
            .ok_or_else(|| Error::Bounds(format!("token id {id} outside vocabulary")))?;
        Ok(if id == 0 { UNK_RENDER } else { piece })
    }

    /// Decode ids into text.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token_text(id)?);
        }
        Ok(out)
    }

    /// Byte offsets of each token in the decoded text (`ids.len() + 1` entries).
    pub fn offsets(&self, ids: &[TokenId]) -> Result<Vec<usize>> {
        let mut offsets = Vec::with_capacity(ids.len() + 1);
        let mut at = 0;
        offsets.push(0);
        for &id in ids {
            at += self.token_text(id)?.len();
            offsets.push(at);
        }
        Ok(offsets)
    }
}

/// Render a chat prompt into the template used by the in-process models.
///
/// When the model has no system role, the system content is folded into the
/// first user turn.
pub fn render_chat(prompt: &ChatPrompt, supports_system_role: bool) -> String {
    match prompt {
        ChatPrompt::Completion { text } => text.clone(),
        ChatPrompt::Chat { messages } => {
            let mut out = String::new();
            let mut pending_system: Option<&str> = None;
            for m in messages {
                let (header, content) = match m.role {
                    Role::System if !supports_system_role => {
                        pending_system = Some(&m.content);
                        continue;
                    }
                    Role::System => (SYSTEM, m.content.clone()),
                    Role::User => match pending_system.take() {
                        Some(sys) => (USER, format!("{sys}\n\n{}", m.content)),
                        None => (USER, m.content.clone()),
                    },
                    Role::Assistant => (ASSISTANT, m.content.clone()),
                };
                out.push_str(header);
                out.push('\n');
                out.push_str(&content);
                out.push_str(END);
                out.push('\n');
            }
            out.push_str(ASSISTANT);
            out.push('\n');
            out
        }
    }
}

/// Split text into pieces; see module docs.
pub(crate) fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(s) = SPECIALS.iter().find(|s| rest.starts_with(**s)) {
            pieces.push(&rest[..s.len()]);
            rest = &rest[s.len()..];
            continue;
        }
        let mut it = rest.char_indices();
        let (_, first) = it.next().unwrap_or((0, ' '));
        let len = if first == ' ' {
            match rest[1..].chars().next() {
                Some(c) if c.is_alphanumeric() => 1 + word_len(&rest[1..]),
                Some(c) if !c.is_whitespace() && !starts_special(&rest[1..]) => 1 + c.len_utf8(),
                _ => 1,
            }
        } else if first.is_alphanumeric() {
            word_len(rest)
        } else {
            first.len_utf8()
        };
        pieces.push(&rest[..len]);
        rest = &rest[len..];
    }
    pieces
}

fn starts_special(s: &str) -> bool {
    SPECIALS.iter().any(|sp| s.starts_with(sp))
}

fn word_len(s: &str) -> usize {
    s.char_indices()
        .find(|(_, c)| !c.is_alphanumeric())
        .map_or(s.len(), |(i, _)| i)
}
