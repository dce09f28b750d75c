//! Deterministic offline backend.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{approximate_usage, BackendError, BackendReply, ChatBackend, ModelConfig};
use crate::forge::{fill, Conversation, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum MockPolicy {
    /// The first `tokens` whitespace tokens of the final user message.
    Echo { tokens: usize },
    /// A fixed text; `{messages}` expands to the conversation length.
    Template { text: String },
    /// A seeded blend of the past reviews visible in the conversation:
    /// assistant messages, or the reviews embedded in the first instruction
    /// when there are none.
    StyleReplay { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    policy: MockPolicy,
}

impl MockBackend {
    pub fn new(policy: MockPolicy) -> Self {
        Self { policy }
    }

    /// The reply text; a pure function of (conversation, policy).
    pub fn respond(&self, conversation: &Conversation) -> String {
        match &self.policy {
            MockPolicy::Echo { tokens } => conversation
                .last()
                .content
                .split_whitespace()
                .take(*tokens)
                .collect::<Vec<_>>()
                .join(" "),
            MockPolicy::Template { text } => fill(text, &[("messages", &conversation.len().to_string())]),
            MockPolicy::StyleReplay { seed } => style_replay(conversation, *seed),
        }
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, conversation: &Conversation, _config: &ModelConfig) -> Result<BackendReply, BackendError> {
        let text = self.respond(conversation);
        let usage = approximate_usage(conversation, &text);
        Ok(BackendReply {
            text,
            usage: Some(usage),
        })
    }
}

/// Review texts quoted inside a rendered first instruction.
fn embedded_reviews(instruction: &str) -> Vec<String> {
    instruction
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix("'review': "))
        .filter(|q| q.len() >= 2)
        .map(|q| q[1..q.len() - 1].replace("\\'", "'").replace("\\\\", "\\"))
        .collect()
}

fn style_replay(conversation: &Conversation, seed: u64) -> String {
    let mut sources: Vec<String> = conversation
        .messages()
        .iter()
        .filter(|m| m.role == Role::Assistant)
        .map(|m| m.content.clone())
        .collect();
    if sources.is_empty() {
        sources = embedded_reviews(&conversation.messages()[0].content);
    }
    if sources.is_empty() {
        sources.push(conversation.last().content.clone());
    }
    let tokens: Vec<Vec<&str>> = sources
        .iter()
        .map(|s| s.split_whitespace().collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return "ok".to_owned();
    }
    let digest = Sha256::digest(conversation.canonical_json().as_bytes());
    let mut salt = [0u8; 8];
    salt.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(salt));

    let target_len = tokens.iter().map(Vec::len).sum::<usize>() / tokens.len();
    let mut out: Vec<&str> = Vec::with_capacity(target_len + 8);
    while out.len() < target_len.max(1) {
        let src = &tokens[rng.gen_range(0..tokens.len())];
        let start = rng.gen_range(0..src.len());
        let chunk = rng.gen_range(3..=8);
        out.extend(src[start..(start + chunk).min(src.len())].iter().copied());
    }
    out.truncate(target_len.max(1));
    out.join(" ")
}
