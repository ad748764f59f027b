//! Chat-export parsing and extraction of preference instances.
//!
//! The export schema is normalized: a JSON object `{"messages": [...]}` (or a
//! bare array) of messages with the fields of [`ChatMessage`]. Exporter
//! output from a real chat service maps onto it field by field: message id,
//! author id, bot flag, text content, attachments (id, uploaded-by-user flag,
//! NSFW flag), the id of the message being replied to, and a millisecond
//! timestamp. Unknown fields are ignored.
//!
//! A preference session is three messages: a user prompt, a bot reply with
//! 2–4 generated images, and a user message carrying exactly one of those
//! images back. The choice must either reply to the generation message or
//! repeat its prompt verbatim. When a repeated prompt matches more than one
//! earlier generation the choice is dropped as ambiguous.

use std::collections::{HashMap, HashSet};

use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::Sha256;
use thiserror::Error;

pub use crate::dataset::PreferenceInstance;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed export at byte {offset}{}: {message}", index.map(|i| format!(" (message {i})")).unwrap_or_default())]
    MalformedExport {
        offset: usize,
        index: Option<usize>,
        message: String,
    },
    #[error("duplicate message id {id:?} at message {index}")]
    DuplicateMessageId { id: String, index: usize },
    #[error("generation message {0:?} appears in more than one session; was the log concatenated twice?")]
    DuplicateSession(String),
    #[error("invalid anonymization key: {0}")]
    BadKey(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub attachment_id: String,
    #[serde(default)]
    pub uploaded_by_user: bool,
    #[serde(default)]
    pub nsfw_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub message_id: String,
    pub author_id: String,
    #[serde(default)]
    pub is_bot: bool,
    pub content: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<String>,
    pub timestamp: i64,
}

/// Messages in ascending timestamp order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatLog {
    pub messages: Vec<ChatMessage>,
}

impl ChatLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("chat log serializes")
    }
}

#[derive(Deserialize)]
struct WrappedExport<'a> {
    #[serde(borrow)]
    messages: Vec<&'a RawValue>,
}

/// Parses a chat export. Messages come back sorted by timestamp; ties keep
/// their file order.
pub fn parse_export(raw: &[u8]) -> Result<ChatLog, IngestError> {
    let text = std::str::from_utf8(raw).map_err(|e| IngestError::MalformedExport {
        offset: e.valid_up_to(),
        index: None,
        message: "input is not valid UTF-8".into(),
    })?;
    let top_level_err = |e: serde_json::Error| IngestError::MalformedExport {
        offset: error_offset(text, &e),
        index: None,
        message: e.to_string(),
    };
    let raw_messages: Vec<&RawValue> = match text.trim_start().as_bytes().first() {
        Some(b'[') => serde_json::from_str(text).map_err(top_level_err)?,
        _ => {
            serde_json::from_str::<WrappedExport>(text)
                .map_err(top_level_err)?
                .messages
        }
    };

    let mut messages = Vec::with_capacity(raw_messages.len());
    let mut seen = HashSet::new();
    for (index, raw_msg) in raw_messages.into_iter().enumerate() {
        let slice = raw_msg.get();
        let base = slice.as_ptr() as usize - text.as_ptr() as usize;
        let msg: ChatMessage =
            serde_json::from_str(slice).map_err(|e| IngestError::MalformedExport {
                offset: base + error_offset(slice, &e),
                index: Some(index),
                message: e.to_string(),
            })?;
        if !seen.insert(msg.message_id.clone()) {
            return Err(IngestError::DuplicateMessageId {
                id: msg.message_id,
                index,
            });
        }
        messages.push(msg);
    }
    messages.sort_by_key(|m| m.timestamp);
    Ok(ChatLog { messages })
}

fn error_offset(text: &str, err: &serde_json::Error) -> usize {
    if err.line() == 0 {
        return text.len();
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(err.line() - 1)
        .map(str::len)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(text.len())
}

/// One prompt → generation → choice interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSession {
    pub prompt: String,
    pub generation_message: ChatMessage,
    pub choice_message: ChatMessage,
}

impl InteractionSession {
    /// Position of the chosen attachment among the generated ones.
    pub fn chosen_index(&self) -> Option<usize> {
        let chosen = &self.choice_message.attachments.first()?.attachment_id;
        self.generation_message
            .attachments
            .iter()
            .position(|a| &a.attachment_id == chosen)
    }
}

/// Counters for everything the session grammar skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestDiagnostics {
    pub messages: usize,
    pub generation_messages: usize,
    pub sessions: usize,
    pub dropped_user_upload: usize,
    pub dropped_nsfw: usize,
    pub dropped_ambiguous: usize,
    pub dropped_attachment_mismatch: usize,
    pub dropped_repeat_choice: usize,
    pub unmatched_messages: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Extraction {
    pub sessions: Vec<InteractionSession>,
    pub diagnostics: IngestDiagnostics,
}

fn is_generation(msg: &ChatMessage) -> bool {
    msg.is_bot && (2..=4).contains(&msg.attachments.len())
}

/// Recognizes prompt → generation → choice sessions in a timestamp-ordered log.
pub fn extract_sessions(log: &ChatLog) -> Extraction {
    let msgs = &log.messages;
    let by_id: HashMap<&str, usize> = msgs
        .iter()
        .enumerate()
        .map(|(i, m)| (m.message_id.as_str(), i))
        .collect();

    let prompt_of = |gen: &ChatMessage| -> String {
        gen.reply_to
            .as_deref()
            .and_then(|id| by_id.get(id))
            .map(|&i| &msgs[i])
            .filter(|m| !m.is_bot)
            .map_or_else(|| gen.content.trim().to_owned(), |m| m.content.trim().to_owned())
    };

    let mut diag = IngestDiagnostics {
        messages: msgs.len(),
        ..Default::default()
    };
    // prompt text -> generation message positions seen so far
    let mut generations_by_prompt: HashMap<String, Vec<usize>> = HashMap::new();
    let mut prompts: HashMap<usize, String> = HashMap::new();
    let mut chosen: HashSet<usize> = HashSet::new();
    let mut sessions = Vec::new();
    let mut consumed = vec![false; msgs.len()];

    for (pos, msg) in msgs.iter().enumerate() {
        if is_generation(msg) {
            let prompt = prompt_of(msg);
            generations_by_prompt
                .entry(prompt.clone())
                .or_default()
                .push(pos);
            prompts.insert(pos, prompt);
            diag.generation_messages += 1;
            consumed[pos] = true;
            continue;
        }
        if msg.is_bot || msg.attachments.len() != 1 {
            continue;
        }

        let target = match msg.reply_to.as_deref().and_then(|id| by_id.get(id)) {
            Some(&g) if g < pos && is_generation(&msgs[g]) => g,
            Some(_) => continue,
            None => match generations_by_prompt.get(msg.content.trim()).map(Vec::as_slice) {
                Some([g]) => *g,
                Some(many) if many.len() > 1 => {
                    diag.dropped_ambiguous += 1;
                    consumed[pos] = true;
                    continue;
                }
                _ => continue,
            },
        };
        consumed[pos] = true;

        let gen = &msgs[target];
        let attachment = &msg.attachments[0];
        if attachment.uploaded_by_user {
            diag.dropped_user_upload += 1;
            continue;
        }
        if !gen
            .attachments
            .iter()
            .any(|a| a.attachment_id == attachment.attachment_id)
        {
            diag.dropped_attachment_mismatch += 1;
            continue;
        }
        if attachment.nsfw_flag || gen.attachments.iter().any(|a| a.nsfw_flag) {
            diag.dropped_nsfw += 1;
            continue;
        }
        if !chosen.insert(target) {
            diag.dropped_repeat_choice += 1;
            continue;
        }
        // the prompt message of this session is part of the pattern, not noise
        if let Some(&p) = gen.reply_to.as_deref().and_then(|id| by_id.get(id)) {
            consumed[p] = true;
        }
        sessions.push(InteractionSession {
            prompt: prompts[&target].clone(),
            generation_message: gen.clone(),
            choice_message: msg.clone(),
        });
    }

    diag.sessions = sessions.len();
    diag.unmatched_messages = consumed.iter().filter(|c| !**c).count();
    Extraction {
        sessions,
        diagnostics: diag,
    }
}

/// Secret key for the keyed hash that replaces author ids.
#[derive(Clone, PartialEq, Eq)]
pub struct AnonymizationKey(Vec<u8>);

impl std::fmt::Debug for AnonymizationKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AnonymizationKey(..)")
    }
}

impl AnonymizationKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, IngestError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(IngestError::BadKey("key is empty".into()));
        }
        Ok(Self(bytes))
    }

    pub fn from_hex(hex_key: &str) -> Result<Self, IngestError> {
        let bytes = hex::decode(hex_key.trim()).map_err(|e| IngestError::BadKey(e.to_string()))?;
        Self::new(bytes)
    }

    /// Fresh 32-byte key from the operating system RNG.
    pub fn random() -> Self {
        let mut bytes = vec![0u8; 32];
        rand::rng().fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    /// Stable token for `author_id`: HMAC-SHA256, first 8 bytes, hex.
    pub fn anonymize(&self, author_id: &str) -> String {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(author_id.as_bytes());
        let digest = mac.finalize().into_bytes();
        format!("u_{}", hex::encode(&digest[..8]))
    }
}

/// One instance per session, keyed by the generation message id.
pub fn sessions_to_instances(
    sessions: &[InteractionSession],
    key: &AnonymizationKey,
) -> Result<Vec<PreferenceInstance>, IngestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(sessions.len());
    for session in sessions {
        let gen = &session.generation_message;
        if !seen.insert(gen.message_id.as_str()) {
            return Err(IngestError::DuplicateSession(gen.message_id.clone()));
        }
        let preferred_index = session
            .chosen_index()
            .expect("extracted sessions always reference a generated attachment");
        out.push(PreferenceInstance {
            prompt_id: gen.message_id.clone(),
            prompt: session.prompt.clone(),
            user_id: key.anonymize(&session.choice_message.author_id),
            image_ids: gen
                .attachments
                .iter()
                .map(|a| a.attachment_id.clone())
                .collect(),
            preferred_index,
        });
    }
    Ok(out)
}
