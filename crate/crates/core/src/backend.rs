//! Contract between the agent and a generative model.
//!
//! A backend answers three kinds of request: log-probabilities of the action
//! tags, free text for a chosen tag, and log-probabilities of option letters.
//! The scripted backend answers from a rule table and is what tests and
//! fixtures use; remote backends live outside this crate. Any backend can be
//! wrapped in a [`RecordingBackend`] and reproduced offline by a
//! [`ReplayBackend`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionTag {
    /// Set a subgoal.
    G,
    /// Update working memory with retrieved knowledge.
    R,
    /// Answer the current goal.
    A,
}

impl ActionTag {
    pub const ALL: [ActionTag; 3] = [ActionTag::G, ActionTag::R, ActionTag::A];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionTag::G => "G",
            ActionTag::R => "R",
            ActionTag::A => "A",
        }
    }
}

impl fmt::Display for ActionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestMode {
    ActionLogprobs,
    GenerateContent { tag: ActionTag },
    OptionLogprobs { letters: Vec<String> },
}

impl RequestMode {
    /// Tokens whose log-probabilities the request asks for.
    pub fn requested_tokens(&self) -> Vec<String> {
        match self {
            RequestMode::ActionLogprobs => ActionTag::ALL.iter().map(|t| t.as_str().to_owned()).collect(),
            RequestMode::GenerateContent { .. } => Vec::new(),
            RequestMode::OptionLogprobs { letters } => letters.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub prompt: String,
    pub mode: RequestMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub logprobs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub text: String,
    /// Opaque transcript of what the model actually returned.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub raw: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendError {
    #[error("transport error (status {status:?}): {message}")]
    Transport {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },
    #[error("backend configuration error: {message}")]
    Config { message: String },
    #[error("response is missing tokens {missing:?}")]
    MissingTokens { missing: Vec<String> },
    #[error("invalid backend response: {message}")]
    InvalidResponse { message: String },
    #[error("backend produced no text after {attempts} attempts")]
    EmptyGeneration { attempts: u32 },
    #[error("replay diverged: {message}")]
    Replay { message: String },
}

impl BackendError {
    pub fn config(message: impl Into<String>) -> Self {
        BackendError::Config {
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        BackendError::InvalidResponse {
            message: message.into(),
        }
    }
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLogprobs {
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "A")]
    pub a: f64,
}

impl ActionLogprobs {
    pub fn get(&self, tag: ActionTag) -> f64 {
        match tag {
            ActionTag::G => self.g,
            ActionTag::R => self.r,
            ActionTag::A => self.a,
        }
    }
}

fn pick_tokens(
    logprobs: &BTreeMap<String, f64>,
    wanted: &[String],
) -> Result<Vec<f64>, BackendError> {
    let missing: Vec<String> = wanted
        .iter()
        .filter(|t| !logprobs.contains_key(*t))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(BackendError::MissingTokens { missing });
    }
    wanted
        .iter()
        .map(|t| {
            let v = logprobs[t];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(BackendError::invalid(format!("non-finite logprob for {t}")))
            }
        })
        .collect()
}

pub fn action_logprobs(backend: &dyn ModelBackend, prompt: &str) -> Result<ActionLogprobs, BackendError> {
    if prompt.is_empty() {
        return Err(BackendError::config("empty prompt"));
    }
    let mode = RequestMode::ActionLogprobs;
    let wanted = mode.requested_tokens();
    let resp = backend.complete(&BackendRequest {
        prompt: prompt.to_owned(),
        mode,
    })?;
    let v = pick_tokens(&resp.logprobs, &wanted)?;
    Ok(ActionLogprobs {
        g: v[0],
        r: v[1],
        a: v[2],
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub text: String,
    pub truncated: bool,
}

/// Collapses whitespace runs containing line breaks to a single space, strips
/// trailing whitespace, and caps the result at `max_chars` characters.
pub fn tidy_generation(raw: &str, max_chars: usize) -> Generated {
    let one_paragraph = raw
        .split('\n')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let text = one_paragraph.trim().to_owned();
    if text.chars().count() > max_chars {
        Generated {
            text: text.chars().take(max_chars).collect::<String>().trim_end().to_owned(),
            truncated: true,
        }
    } else {
        Generated {
            text,
            truncated: false,
        }
    }
}

/// Generates step content for `tag`, retrying up to `retries` extra times on
/// an empty generation.
pub fn generate_content(
    backend: &dyn ModelBackend,
    prompt: &str,
    tag: ActionTag,
    max_chars: usize,
    retries: u32,
) -> Result<Generated, BackendError> {
    let request = BackendRequest {
        prompt: prompt.to_owned(),
        mode: RequestMode::GenerateContent { tag },
    };
    for _ in 0..=retries {
        let resp = backend.complete(&request)?;
        let out = tidy_generation(&resp.text, max_chars);
        if !out.text.is_empty() {
            return Ok(out);
        }
    }
    Err(BackendError::EmptyGeneration {
        attempts: retries + 1,
    })
}

pub fn option_logprobs(
    backend: &dyn ModelBackend,
    prompt: &str,
    letters: &[String],
) -> Result<BTreeMap<String, f64>, BackendError> {
    let distinct: std::collections::BTreeSet<_> = letters.iter().collect();
    if letters.len() < 2 || distinct.len() != letters.len() {
        return Err(BackendError::config("option scoring needs at least two distinct letters"));
    }
    let resp = backend.complete(&BackendRequest {
        prompt: prompt.to_owned(),
        mode: RequestMode::OptionLogprobs {
            letters: letters.to_vec(),
        },
    })?;
    let v = pick_tokens(&resp.logprobs, letters)?;
    Ok(letters.iter().cloned().zip(v).collect())
}

/// Log-softmax over the given values (max-shifted).
pub fn log_softmax(values: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let max = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.values().map(|v| (v - max).exp()).sum::<f64>().ln();
    values.iter().map(|(k, v)| (k.clone(), v - lse)).collect()
}

/// Softmax over the given values (max-shifted).
pub fn softmax(values: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    log_softmax(values).into_iter().map(|(k, v)| (k, v.exp())).collect()
}

// ---------------------------------------------------------------------------
// Scripted backend

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    Action,
    Generate,
    Options,
}

/// One scripted rule. It matches when every `contains` substring is present,
/// no `absent` substring is, and `regex` (if any) matches the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRule {
    pub mode: RuleMode,
    /// Restricts a generate rule to one tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<ActionTag>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub logprobs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDefaults {
    #[serde(default = "default_action")]
    pub action: BTreeMap<String, f64>,
    #[serde(default)]
    pub text: String,
    /// When empty, every requested letter gets logprob 0.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, f64>,
}

fn default_action() -> BTreeMap<String, f64> {
    [("A".to_owned(), 0.0), ("G".to_owned(), -5.0), ("R".to_owned(), -5.0)].into()
}

impl Default for ScriptedDefaults {
    fn default() -> Self {
        Self {
            action: default_action(),
            text: String::new(),
            options: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTable {
    #[serde(default)]
    pub defaults: ScriptedDefaults,
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
}

impl ScriptedTable {
    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        toml::from_str(text).map_err(|e| BackendError::config(format!("scripted table: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scripted table serializes")
    }
}

pub struct ScriptedBackend {
    table: ScriptedTable,
    regexes: Vec<Option<Regex>>,
}

impl ScriptedBackend {
    pub fn new(table: ScriptedTable) -> Result<Self, BackendError> {
        let mut regexes = Vec::with_capacity(table.rules.len());
        for (i, rule) in table.rules.iter().enumerate() {
            match rule.mode {
                RuleMode::Action => {
                    for tag in ActionTag::ALL {
                        if !rule.logprobs.contains_key(tag.as_str()) {
                            return Err(BackendError::config(format!(
                                "rule {i}: action rule lacks a logprob for {tag}"
                            )));
                        }
                    }
                }
                RuleMode::Generate if rule.text.trim().is_empty() => {
                    return Err(BackendError::config(format!("rule {i}: generate rule has no text")));
                }
                RuleMode::Options if rule.logprobs.is_empty() => {
                    return Err(BackendError::config(format!("rule {i}: options rule has no logprobs")));
                }
                _ => {}
            }
            if rule.tag.is_some() && rule.mode != RuleMode::Generate {
                return Err(BackendError::config(format!("rule {i}: `tag` only applies to generate rules")));
            }
            let re = match &rule.regex {
                Some(src) => Some(
                    Regex::new(src).map_err(|e| BackendError::config(format!("rule {i}: {e}")))?,
                ),
                None => None,
            };
            regexes.push(re);
        }
        Ok(Self { table, regexes })
    }

    pub fn table(&self) -> &ScriptedTable {
        &self.table
    }

    fn find_rule(&self, request: &BackendRequest) -> Option<usize> {
        let (mode, tag) = match &request.mode {
            RequestMode::ActionLogprobs => (RuleMode::Action, None),
            RequestMode::GenerateContent { tag } => (RuleMode::Generate, Some(*tag)),
            RequestMode::OptionLogprobs { .. } => (RuleMode::Options, None),
        };
        let p = &request.prompt;
        self.table.rules.iter().enumerate().position(|(i, r)| {
            r.mode == mode
                && (r.tag.is_none() || r.tag == tag)
                && r.contains.iter().all(|s| p.contains(s.as_str()))
                && !r.absent.iter().any(|s| p.contains(s.as_str()))
                && self.regexes[i].as_ref().is_none_or(|re| re.is_match(p))
        })
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let hit = self.find_rule(request);
        let raw = match hit {
            Some(i) => serde_json::json!({ "rule": i }),
            None => serde_json::json!({ "rule": "default" }),
        };
        let rule = hit.map(|i| &self.table.rules[i]);
        let defaults = &self.table.defaults;
        let resp = match &request.mode {
            RequestMode::ActionLogprobs => BackendResponse {
                logprobs: rule.map_or(&defaults.action, |r| &r.logprobs).clone(),
                raw,
                ..Default::default()
            },
            RequestMode::GenerateContent { .. } => BackendResponse {
                text: rule.map_or(&defaults.text, |r| &r.text).clone(),
                raw,
                ..Default::default()
            },
            RequestMode::OptionLogprobs { letters } => {
                let logprobs = match rule {
                    Some(r) => r.logprobs.clone(),
                    None if defaults.options.is_empty() => {
                        letters.iter().map(|l| (l.clone(), 0.0)).collect()
                    }
                    None => defaults.options.clone(),
                };
                BackendResponse {
                    logprobs,
                    raw,
                    ..Default::default()
                }
            }
        };
        Ok(resp)
    }
}

// ---------------------------------------------------------------------------
// Recording and replay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordedOutcome {
    Response(BackendResponse),
    Error(BackendError),
}

/// One request and what the backend returned for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: BackendRequest,
    pub outcome: RecordedOutcome,
}

pub struct RecordingBackend<B> {
    inner: B,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl<B: ModelBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript poisoned").clone()
    }

    /// Removes and returns everything recorded so far.
    pub fn take_transcript(&self) -> Vec<TranscriptEntry> {
        std::mem::take(&mut *self.entries.lock().expect("transcript poisoned"))
    }
}

impl<B: ModelBackend> ModelBackend for RecordingBackend<B> {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let result = self.inner.complete(request);
        let outcome = match &result {
            Ok(r) => RecordedOutcome::Response(r.clone()),
            Err(e) => RecordedOutcome::Error(e.clone()),
        };
        self.entries.lock().expect("transcript poisoned").push(TranscriptEntry {
            request: request.clone(),
            outcome,
        });
        result
    }
}

/// Answers requests in order from a recorded transcript. A request that does
/// not match the next recorded one is an error.
pub struct ReplayBackend {
    entries: Vec<TranscriptEntry>,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Self {
            entries,
            cursor: Mutex::new(0),
        }
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.cursor.lock().expect("replay cursor poisoned")
    }
}

impl ModelBackend for ReplayBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let mut cursor = self.cursor.lock().expect("replay cursor poisoned");
        let Some(entry) = self.entries.get(*cursor) else {
            return Err(BackendError::Replay {
                message: format!("transcript exhausted after {} entries", self.entries.len()),
            });
        };
        if &entry.request != request {
            return Err(BackendError::Replay {
                message: format!("request #{} differs from the recorded one", *cursor),
            });
        }
        *cursor += 1;
        match &entry.outcome {
            RecordedOutcome::Response(r) => Ok(r.clone()),
            RecordedOutcome::Error(e) => Err(e.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
    }

    fn table() -> ScriptedTable {
        ScriptedTable {
            defaults: ScriptedDefaults {
                text: "Default content.".into(),
                ..Default::default()
            },
            rules: vec![
                ScriptedRule {
                    mode: RuleMode::Action,
                    tag: None,
                    contains: vec!["dietary fiber".into()],
                    absent: vec![],
                    regex: None,
                    logprobs: lp(&[("G", -0.1), ("R", -2.0), ("A", -3.0)]),
                    text: String::new(),
                },
                ScriptedRule {
                    mode: RuleMode::Generate,
                    tag: Some(ActionTag::G),
                    contains: vec!["dietary fiber".into()],
                    absent: vec![],
                    regex: None,
                    logprobs: BTreeMap::new(),
                    text: "Identify which option is indigestible plant-based carbohydrate.".into(),
                },
                ScriptedRule {
                    mode: RuleMode::Generate,
                    tag: Some(ActionTag::A),
                    contains: vec![],
                    absent: vec![],
                    regex: Some("(?m)^PROBLEM:".into()),
                    logprobs: BTreeMap::new(),
                    text: "Cellulose is indigestible plant-based carbohydrate.".into(),
                },
                ScriptedRule {
                    mode: RuleMode::Options,
                    tag: None,
                    contains: vec!["fiber".into()],
                    absent: vec!["uniform".into()],
                    regex: None,
                    logprobs: lp(&[("A", -2.06), ("B", -0.17), ("C", -3.8), ("D", -5.1)]),
                    text: String::new(),
                },
            ],
        }
    }

    fn letters(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn scripted_action_map_is_returned_verbatim() {
        let b = ScriptedBackend::new(table()).unwrap();
        let lp = action_logprobs(&b, "which is dietary fiber?").unwrap();
        assert_eq!((lp.g, lp.r, lp.a), (-0.1, -2.0, -3.0));
    }

    #[test]
    fn scripted_generation_matches_by_tag() {
        let b = ScriptedBackend::new(table()).unwrap();
        let g = generate_content(&b, "dietary fiber", ActionTag::G, 512, 0).unwrap();
        assert_eq!(g.text, "Identify which option is indigestible plant-based carbohydrate.");
        let a = generate_content(&b, "PROBLEM: x", ActionTag::A, 512, 0).unwrap();
        assert_eq!(a.text, "Cellulose is indigestible plant-based carbohydrate.");
        let r = generate_content(&b, "nothing", ActionTag::R, 512, 0).unwrap();
        assert_eq!(r.text, "Default content.");
    }

    #[test]
    fn scripted_option_map_and_uniform_default() {
        let b = ScriptedBackend::new(table()).unwrap();
        let m = option_logprobs(&b, "fiber", &letters("ABCD")).unwrap();
        assert_eq!(m, lp(&[("A", -2.06), ("B", -0.17), ("C", -3.8), ("D", -5.1)]));
        let u = option_logprobs(&b, "uniform", &letters("ABCD")).unwrap();
        let p = softmax(&u);
        assert!(p.values().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn option_request_needs_two_distinct_letters() {
        let b = ScriptedBackend::new(table()).unwrap();
        assert!(option_logprobs(&b, "x", &letters("A")).is_err());
        assert!(option_logprobs(&b, "x", &letters("AA")).is_err());
    }

    #[test]
    fn long_generation_is_truncated() {
        let mut t = table();
        t.defaults.text = "x".repeat(10_000);
        let b = ScriptedBackend::new(t).unwrap();
        let g = generate_content(&b, "nothing", ActionTag::R, 512, 0).unwrap();
        assert_eq!(g.text.chars().count(), 512);
        assert!(g.truncated);
    }

    #[test]
    fn empty_generation_fails_after_retries() {
        let b = ScriptedBackend::new(ScriptedTable::default()).unwrap();
        assert_eq!(
            generate_content(&b, "p", ActionTag::G, 512, 2),
            Err(BackendError::EmptyGeneration { attempts: 3 })
        );
    }

    #[test]
    fn tidy_joins_lines() {
        let g = tidy_generation("  first line\n\n  second line  \n", 100);
        assert_eq!(g.text, "first line second line");
    }

    #[test]
    fn invalid_rules_are_rejected() {
        let mut t = table();
        t.rules[0].logprobs.remove("R");
        assert!(ScriptedBackend::new(t).is_err());
        let mut t = table();
        t.rules[1].text.clear();
        assert!(ScriptedBackend::new(t).is_err());
    }

    #[test]
    fn missing_tokens_are_an_error() {
        let mut t = table();
        t.rules[3].logprobs.remove("D");
        let b = ScriptedBackend::new(t).unwrap();
        assert_eq!(
            option_logprobs(&b, "fiber", &letters("ABCD")),
            Err(BackendError::MissingTokens {
                missing: vec!["D".into()]
            })
        );
    }

    #[test]
    fn log_softmax_matches_hand_computation() {
        // ln(e^-1 + e^-2 + e^-3) = -0.5923940355...
        let out = log_softmax(&lp(&[("A", -1.0), ("G", -2.0), ("R", -3.0)]));
        let lse = ((-1.0f64).exp() + (-2.0f64).exp() + (-3.0f64).exp()).ln();
        assert!((lse + 0.592_394_035_5).abs() < 1e-9);
        assert!((out["A"] - (-1.0 - lse)).abs() < 1e-12);
        assert!((out["R"] - (-3.0 - lse)).abs() < 1e-12);
    }

    #[test]
    fn record_then_replay_is_identical() {
        let rec = RecordingBackend::new(ScriptedBackend::new(table()).unwrap());
        let a = action_logprobs(&rec, "dietary fiber").unwrap();
        let g = generate_content(&rec, "dietary fiber", ActionTag::G, 512, 0).unwrap();
        let replay = ReplayBackend::new(rec.transcript());
        assert_eq!(action_logprobs(&replay, "dietary fiber").unwrap(), a);
        assert_eq!(generate_content(&replay, "dietary fiber", ActionTag::G, 512, 0).unwrap(), g);
        assert_eq!(replay.remaining(), 0);
        assert!(matches!(action_logprobs(&replay, "x"), Err(BackendError::Replay { .. })));
    }

    #[test]
    fn replay_rejects_divergent_request() {
        let rec = RecordingBackend::new(ScriptedBackend::new(table()).unwrap());
        action_logprobs(&rec, "dietary fiber").unwrap();
        let replay = ReplayBackend::new(rec.transcript());
        assert!(matches!(action_logprobs(&replay, "other"), Err(BackendError::Replay { .. })));
    }

    #[test]
    fn table_round_trips_through_toml() {
        let t = table();
        assert_eq!(ScriptedTable::from_toml(&t.to_toml()).unwrap(), t);
    }
}
