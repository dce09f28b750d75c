//! Conversation construction: the single-message baseline, simple
//! conversational prompts (SCP), contrastive conversational prompts (CCP)
//! and the self-refine follow-up turns.
//!
//! Turn indices `k` are 1-based history positions. The first instruction
//! `T_j` embeds history entries `1..=j` and requests item `j + 1`; SCP with
//! `turns` conversational rounds starts from `T_{n - turns}` and replays the
//! remaining reviews as assistant messages.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{EvalInstance, HistoryEntry, Item};
use crate::negatives::NegativeAssignment;

#[derive(Debug, Error, PartialEq)]
pub enum ForgeError {
    #[error("turn count {turns} must be below the history length {n}")]
    TurnsOutOfRange { turns: usize, n: usize },
    #[error("negative count {negatives} exceeds turn count {turns}")]
    NegativesOutOfRange { negatives: usize, turns: usize },
    #[error("no negative supplied for turn {0}")]
    MissingNegative(usize),
    #[error("negative supplied for turn {k}, outside the negative turns {first}..={last}")]
    NegativeOutOfRange { k: usize, first: usize, last: usize },
    #[error("negative for turn {0} equals the true review")]
    NegativeEqualsTruth(usize),
    #[error("conversation must end with a user message")]
    EndsWithAssistant,
    #[error("generated text is empty")]
    EmptyGenerated,
    #[error("template {name} is missing placeholder {placeholder}")]
    MissingPlaceholder {
        name: &'static str,
        placeholder: &'static str,
    },
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Role-alternating chat that starts and ends with a user message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conversation {
    messages: Vec<Message>,
}

impl Conversation {
    pub fn start(first_user: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::user(first_user)],
        }
    }

    /// Wraps raw messages after checking the structural invariant.
    pub fn from_messages(messages: Vec<Message>) -> Result<Self, String> {
        let conv = Self { messages };
        conv.check()?;
        Ok(conv)
    }

    /// Appends an assistant reply and the following user message.
    pub fn exchange(&mut self, assistant: impl Into<String>, user: impl Into<String>) {
        self.messages.push(Message::assistant(assistant));
        self.messages.push(Message::user(user));
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last(&self) -> &Message {
        self.messages.last().expect("conversations are never empty")
    }

    /// Checks role alternation, non-empty contents and user endpoints.
    pub fn check(&self) -> Result<(), String> {
        let (first, last) = match (self.messages.first(), self.messages.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err("empty conversation".into()),
        };
        if first.role != Role::User || last.role != Role::User {
            return Err("conversation must start and end with a user message".into());
        }
        for (i, pair) in self.messages.windows(2).enumerate() {
            if pair[0].role == pair[1].role {
                return Err(format!("messages {i} and {} share a role", i + 1));
            }
        }
        if let Some(i) = self.messages.iter().position(|m| m.content.is_empty()) {
            return Err(format!("message {i} is empty"));
        }
        Ok(())
    }

    /// Canonical JSON serialization (array of `{role, content}`).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.messages).expect("messages serialize")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Python-literal rendering of a string, as `repr()` would print it.
pub fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Substitutes `{name}` slots in one pass, so substituted values are never
/// rescanned for placeholders.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = values.iter().find(|(name, _)| {
            tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail[1 + name.len()..].starts_with('}')
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// The prompt texts, with named `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    /// Slots: `{index_range}`, `{history}`, `{target_item}`.
    pub first_instruction: String,
    /// Slot: `{target_item}`.
    pub acceptance: String,
    pub rejection: String,
    pub refine_critique: String,
    pub refine_request: String,
    /// Maximum description length in characters inside item records.
    pub description_limit: Option<usize>,
}

const FIRST_INSTRUCTION: &str = include_str!("../templates/first_instruction.txt");
const ACCEPTANCE: &str = include_str!("../templates/acceptance.txt");
const REJECTION: &str = include_str!("../templates/rejection.txt");
const REFINE_CRITIQUE: &str = include_str!("../templates/refine_critique.txt");
const REFINE_REQUEST: &str = include_str!("../templates/refine_request.txt");

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            first_instruction: FIRST_INSTRUCTION.to_owned(),
            acceptance: ACCEPTANCE.to_owned(),
            rejection: REJECTION.to_owned(),
            refine_critique: REFINE_CRITIQUE.to_owned(),
            refine_request: REFINE_REQUEST.to_owned(),
            description_limit: None,
        }
    }
}

impl PromptTemplates {
    /// Loads `<name>.txt` files from `dir`; files that are absent keep the
    /// built-in wording. One trailing newline is dropped from each file.
    pub fn load_dir(dir: &Path) -> Result<Self, ForgeError> {
        let mut t = Self::default();
        let slots: [(&str, &mut String); 5] = [
            ("first_instruction", &mut t.first_instruction),
            ("acceptance", &mut t.acceptance),
            ("rejection", &mut t.rejection),
            ("refine_critique", &mut t.refine_critique),
            ("refine_request", &mut t.refine_request),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let mut text = fs::read_to_string(&path).map_err(|e| ForgeError::Template {
                name: name.to_owned(),
                message: e.to_string(),
            })?;
            if text.ends_with('\n') {
                text.pop();
                if text.ends_with('\r') {
                    text.pop();
                }
            }
            *slot = text;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        let required: [(&'static str, &str, &'static str); 4] = [
            ("first_instruction", &self.first_instruction, "{index_range}"),
            ("first_instruction", &self.first_instruction, "{history}"),
            ("first_instruction", &self.first_instruction, "{target_item}"),
            ("acceptance", &self.acceptance, "{target_item}"),
        ];
        for (name, text, placeholder) in required {
            if !text.contains(placeholder) {
                return Err(ForgeError::MissingPlaceholder { name, placeholder });
            }
        }
        Ok(())
    }

    fn description<'a>(&self, d: &'a str) -> std::borrow::Cow<'a, str> {
        match self.description_limit {
            Some(limit) if d.chars().count() > limit => d.chars().take(limit).collect::<String>().into(),
            _ => d.into(),
        }
    }

    /// `{'title': ..., 'category': ..., 'description': ...}`
    pub fn render_item(&self, item: &Item) -> String {
        format!(
            "{{'title': {}, 'category': {}, 'description': {}}}",
            py_repr(&item.title),
            py_repr(&item.category),
            py_repr(&self.description(&item.description)),
        )
    }

    fn render_history(&self, prefix: &[HistoryEntry]) -> String {
        if prefix.is_empty() {
            return "{}".to_owned();
        }
        let mut out = String::from("{\n");
        for (i, e) in prefix.iter().enumerate() {
            let _ = write!(
                out,
                "    {}: {{\n        'itemInfo': {},\n        'review': {}\n    }}",
                i + 1,
                self.render_item(&e.item),
                py_repr(&e.review.text),
            );
            out.push_str(if i + 1 < prefix.len() { ",\n" } else { "\n" });
        }
        out.push('}');
        out
    }

    /// The first instruction over `history_prefix` (oldest first) asking for
    /// a review of `request_item`.
    pub fn render_first_instruction(&self, history_prefix: &[HistoryEntry], request_item: &Item) -> String {
        let range = format!("from 1 (oldest) to {} (latest)", history_prefix.len());
        fill(
            &self.first_instruction,
            &[
                ("index_range", &range),
                ("history", &self.render_history(history_prefix)),
                ("target_item", &self.render_item(request_item)),
            ],
        )
    }

    pub fn render_acceptance(&self, next_item: &Item) -> String {
        fill(&self.acceptance, &[("target_item", &self.render_item(next_item))])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Scp,
    Ccp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    None,
    HighSemantic,
    HighLexical,
    LowSemantic,
    LowLexical,
    Generated,
}

impl NegativeKind {
    /// Short tag used in method labels: B, R, B-, R-, G.
    pub fn tag(self) -> &'static str {
        match self {
            NegativeKind::None => "",
            NegativeKind::HighSemantic => "B",
            NegativeKind::HighLexical => "R",
            NegativeKind::LowSemantic => "B-",
            NegativeKind::LowLexical => "R-",
            NegativeKind::Generated => "G",
        }
    }
}

/// Method identity with its turn and negative counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPlan {
    pub method: Method,
    #[serde(default)]
    pub turns: usize,
    #[serde(default)]
    pub negatives: usize,
    #[serde(default = "default_kind")]
    pub negative_kind: NegativeKind,
    /// Wrap the method's output in the critique-and-rewrite follow-up.
    #[serde(default)]
    pub self_refine: bool,
    /// Overrides the generated label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn default_kind() -> NegativeKind {
    NegativeKind::None
}

impl PromptPlan {
    pub fn baseline() -> Self {
        Self {
            method: Method::Baseline,
            turns: 0,
            negatives: 0,
            negative_kind: NegativeKind::None,
            self_refine: false,
            name: None,
        }
    }

    pub fn scp(turns: usize) -> Self {
        Self {
            method: Method::Scp,
            turns,
            ..Self::baseline()
        }
    }

    pub fn ccp(kind: NegativeKind, turns: usize, negatives: usize) -> Self {
        Self {
            method: Method::Ccp,
            turns,
            negatives,
            negative_kind: kind,
            ..Self::baseline()
        }
    }

    pub fn with_self_refine(mut self) -> Self {
        self.self_refine = true;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Display label, e.g. `Baseline`, `SCP(4)`, `CCP(B)(4,4)`, `SCP(4)+SR`.
    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let base = match self.method {
            Method::Baseline => "Baseline".to_owned(),
            Method::Scp => format!("SCP({})", self.turns),
            Method::Ccp => format!(
                "CCP({})({},{})",
                self.negative_kind.tag(),
                self.turns,
                self.negatives
            ),
        };
        if self.self_refine {
            base + "+SR"
        } else {
            base
        }
    }

    /// Checks the plan against a history length `n`.
    pub fn validate(&self, n: usize) -> Result<(), String> {
        match self.method {
            Method::Baseline => {
                if self.turns != 0 || self.negatives != 0 || self.negative_kind != NegativeKind::None {
                    return Err("baseline takes no turns or negatives".into());
                }
            }
            Method::Scp => {
                if self.turns >= n {
                    return Err(format!("turns {} must be < n = {n}", self.turns));
                }
                if self.negatives != 0 || self.negative_kind != NegativeKind::None {
                    return Err("SCP takes no negatives".into());
                }
            }
            Method::Ccp => {
                if self.turns >= n {
                    return Err(format!("turns {} must be < n = {n}", self.turns));
                }
                if self.negatives == 0 || self.negatives > self.turns {
                    return Err(format!(
                        "negatives {} must lie in 1..={}",
                        self.negatives, self.turns
                    ));
                }
                match self.negative_kind {
                    NegativeKind::None => return Err("CCP needs a negative kind".into()),
                    NegativeKind::Generated if self.negatives != self.turns => {
                        return Err("generated negatives fill every turn (negatives = turns)".into())
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// First turn index that carries a negative when `negatives` of the
/// `n` history reviews get one (the most recent turns).
pub fn first_negative_turn(n: usize, negatives: usize) -> usize {
    n - negatives + 1
}

/// Single user message with the whole history: `[user: T_n]`.
pub fn build_baseline(t: &PromptTemplates, instance: &EvalInstance) -> Conversation {
    let n = instance.n();
    Conversation::start(t.render_first_instruction(&instance.history.entries, instance.item(n + 1)))
}

fn check_turns(instance: &EvalInstance, turns: usize) -> Result<(), ForgeError> {
    let n = instance.n();
    if turns > 0 && turns >= n {
        return Err(ForgeError::TurnsOutOfRange { turns, n });
    }
    Ok(())
}

/// SCP: `T_{n-turns}` then, for each later history review, the true review
/// and an acceptance that requests the following item.
pub fn build_scp(
    t: &PromptTemplates,
    instance: &EvalInstance,
    turns: usize,
) -> Result<Conversation, ForgeError> {
    build_ccp(t, instance, turns, 0, &BTreeMap::new())
}

/// CCP: the SCP skeleton where each of the `negatives` most recent turns is
/// preceded by an incorrect review and the rejection message. With
/// `negatives == 0` this is exactly SCP.
pub fn build_ccp(
    t: &PromptTemplates,
    instance: &EvalInstance,
    turns: usize,
    negatives: usize,
    assigned: &BTreeMap<usize, NegativeAssignment>,
) -> Result<Conversation, ForgeError> {
    let n = instance.n();
    check_turns(instance, turns)?;
    if negatives > turns {
        return Err(ForgeError::NegativesOutOfRange { negatives, turns });
    }
    let first_neg = first_negative_turn(n, negatives);
    if let Some((&k, _)) = assigned.iter().find(|(k, _)| **k < first_neg || **k > n) {
        return Err(ForgeError::NegativeOutOfRange {
            k,
            first: first_neg,
            last: n,
        });
    }
    if let Some(k) = (first_neg..=n).find(|k| !assigned.contains_key(k)) {
        return Err(ForgeError::MissingNegative(k));
    }
    conversation_until(t, instance, turns, assigned, n + 1)
}

/// The CCP conversation up to and including the user message that requests
/// item `i_request` (with `n - turns + 1 <= request <= n + 1`). Turns before
/// `request` that have an entry in `assigned` include their negative.
pub fn conversation_until(
    t: &PromptTemplates,
    instance: &EvalInstance,
    turns: usize,
    assigned: &BTreeMap<usize, NegativeAssignment>,
    request: usize,
) -> Result<Conversation, ForgeError> {
    let n = instance.n();
    check_turns(instance, turns)?;
    let start = n - turns;
    debug_assert!(request > start && request <= n + 1);
    let mut conv = Conversation::start(
        t.render_first_instruction(&instance.history.entries[..start], instance.item(start + 1)),
    );
    for k in start + 1..request {
        let truth = &instance.entry(k).review.text;
        if let Some(neg) = assigned.get(&k) {
            if neg.text == *truth {
                return Err(ForgeError::NegativeEqualsTruth(k));
            }
            conv.exchange(neg.text.clone(), t.rejection.clone());
        }
        conv.exchange(truth.clone(), t.render_acceptance(instance.item(k + 1)));
    }
    Ok(conv)
}

/// The two self-refine follow-ups over a base conversation and its output.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfRefine {
    pub critique: Conversation,
    request: String,
}

impl SelfRefine {
    /// The rewrite request: the critique conversation plus the model's
    /// critique and the rewrite instruction.
    pub fn rewrite(&self, critique: impl Into<String>) -> Conversation {
        let mut conv = self.critique.clone();
        conv.exchange(critique, self.request.clone());
        conv
    }
}

pub fn build_self_refine(
    t: &PromptTemplates,
    base: &Conversation,
    generated: &str,
) -> Result<SelfRefine, ForgeError> {
    if base.last().role != Role::User {
        return Err(ForgeError::EndsWithAssistant);
    }
    if generated.trim().is_empty() {
        return Err(ForgeError::EmptyGenerated);
    }
    let mut critique = base.clone();
    critique.exchange(generated, t.refine_critique.clone());
    Ok(SelfRefine {
        critique,
        request: t.refine_request.clone(),
    })
}
