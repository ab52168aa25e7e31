//! Deterministic scripted backend for tests and hermetic runs.

use super::{
    enforce_token_cap, BackendError, CompletionBackend, CompletionRequest, CompletionResponse,
    Role,
};
use serde::Deserialize;
use std::path::Path;
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    Role(Role),
    Contains(String),
    /// Role and prompt substring must both match.
    Both(Role, String),
}

impl Matcher {
    fn matches(&self, req: &CompletionRequest) -> bool {
        match self {
            Matcher::Role(r) => req.role == *r,
            Matcher::Contains(s) => req.prompt.contains(s),
            Matcher::Both(r, s) => req.role == *r && req.prompt.contains(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptResponse {
    Text(String),
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub response: ScriptResponse,
    pub repeat: u32,
}

impl ScriptEntry {
    pub fn role(role: Role, text: impl Into<String>) -> Self {
        Self { matcher: Matcher::Role(role), response: ScriptResponse::Text(text.into()), repeat: 1 }
    }

    pub fn contains(needle: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            matcher: Matcher::Contains(needle.into()),
            response: ScriptResponse::Text(text.into()),
            repeat: 1,
        }
    }

    pub fn both(role: Role, needle: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            matcher: Matcher::Both(role, needle.into()),
            response: ScriptResponse::Text(text.into()),
            repeat: 1,
        }
    }

    pub fn failing(role: Role) -> Self {
        Self { matcher: Matcher::Role(role), response: ScriptResponse::Fail, repeat: 1 }
    }

    pub fn times(mut self, n: u32) -> Self {
        self.repeat = n;
        self
    }
}

// Wire shape of one script-file entry: `role`, `contains`, or both as the
// matcher, and either `text` or `"fail": true` as the response.
#[derive(Deserialize)]
struct RawEntry {
    role: Option<Role>,
    contains: Option<String>,
    text: Option<String>,
    #[serde(default)]
    fail: bool,
    #[serde(default = "one")]
    repeat: u32,
}

fn one() -> u32 {
    1
}

/// Ordered script of canned responses. Each call consumes the first
/// unconsumed entry whose matcher matches; running out of matching entries is
/// a hard error so fixture drift fails loudly instead of silently.
pub struct ScriptedBackend {
    entries: Mutex<Vec<(ScriptEntry, u32)>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let entries = entries.into_iter().map(|e| (e.clone(), e.repeat)).collect();
        Self { entries: Mutex::new(entries) }
    }

    /// One entry matching any role, answering `text`.
    pub fn single_text(text: impl Into<String>) -> Self {
        Self::new(vec![ScriptEntry {
            matcher: Matcher::Contains(String::new()),
            response: ScriptResponse::Text(text.into()),
            repeat: 1,
        }])
    }

    /// One entry matching any role, failing with `BackendUnavailable`.
    pub fn single_failure() -> Self {
        Self::new(vec![ScriptEntry {
            matcher: Matcher::Contains(String::new()),
            response: ScriptResponse::Fail,
            repeat: 1,
        }])
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Unavailable(format!("cannot read script {path:?}: {e}")))?;
        Self::from_json(&content)
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let raw: Vec<RawEntry> = serde_json::from_str(json)
            .map_err(|e| BackendError::MalformedResponse(format!("bad script: {e}")))?;
        let entries = raw
            .into_iter()
            .map(|r| {
                let matcher = match (r.role, r.contains) {
                    (Some(role), None) => Matcher::Role(role),
                    (None, Some(s)) => Matcher::Contains(s),
                    (Some(role), Some(s)) => Matcher::Both(role, s),
                    (None, None) => {
                        return Err(BackendError::MalformedResponse(
                            "script entry needs `role` and/or `contains`".into(),
                        ))
                    }
                };
                let response = match (r.text, r.fail) {
                    (_, true) => ScriptResponse::Fail,
                    (Some(t), false) => ScriptResponse::Text(t),
                    (None, false) => {
                        return Err(BackendError::MalformedResponse(
                            "script entry needs `text` or `fail`".into(),
                        ))
                    }
                };
                Ok(ScriptEntry { matcher, response, repeat: r.repeat })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(entries))
    }

    /// Total unconsumed responses left in the script.
    pub fn remaining(&self) -> u32 {
        self.entries.lock().unwrap().iter().map(|(_, n)| *n).sum()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let mut entries = self.entries.lock().unwrap();
        let slot = entries.iter_mut().find(|(e, n)| *n > 0 && e.matcher.matches(req));
        match slot {
            Some((entry, n)) => {
                *n -= 1;
                match &entry.response {
                    ScriptResponse::Fail => {
                        Err(BackendError::Unavailable("scripted failure".into()))
                    }
                    ScriptResponse::Text(t) => {
                        let (text, finish_reason) = enforce_token_cap(t, req.params.max_tokens);
                        Ok(CompletionResponse { text, token_logprobs: None, finish_reason })
                    }
                }
            }
            None => Err(BackendError::ScriptExhausted { role: req.role }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FinishReason, GenerationParams};

    fn req(role: Role, prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            params: GenerationParams::for_role(role),
            role,
        }
    }

    #[test]
    fn consumes_first_matching_entry() {
        let backend = ScriptedBackend::new(vec![
            ScriptEntry::role(Role::Plan, "PLAN:\n1. parse\nConfidence: 90"),
            ScriptEntry::role(Role::Code, "code here"),
        ]);
        let resp = backend.complete(&req(Role::Plan, "make a plan")).unwrap();
        assert_eq!(resp.text, "PLAN:\n1. parse\nConfidence: 90");
        assert_eq!(resp.finish_reason, FinishReason::Stop);
        let resp = backend.complete(&req(Role::Code, "write code")).unwrap();
        assert_eq!(resp.text, "code here");
    }

    #[test]
    fn fail_entry_raises_unavailable() {
        let backend = ScriptedBackend::new(vec![ScriptEntry::failing(Role::Keywords)]);
        let err = backend.complete(&req(Role::Keywords, "extract")).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable(_)));
    }

    #[test]
    fn exhausted_script_errors() {
        let backend = ScriptedBackend::new(vec![ScriptEntry::role(Role::Plan, "p")]);
        backend.complete(&req(Role::Plan, "x")).unwrap();
        let err = backend.complete(&req(Role::Plan, "x")).unwrap_err();
        assert!(matches!(err, BackendError::ScriptExhausted { role: Role::Plan }));
    }

    #[test]
    fn long_text_is_capped() {
        let backend = ScriptedBackend::single_text("a b c d e");
        let mut r = req(Role::Code, "x");
        r.params.max_tokens = 3;
        let resp = backend.complete(&r).unwrap();
        assert_eq!(resp.text, "a b c");
        assert_eq!(resp.finish_reason, FinishReason::Length);
    }

    #[test]
    fn substring_matcher_and_repeat() {
        let backend = ScriptedBackend::new(vec![
            ScriptEntry::contains("task-alpha", "A").times(2),
            ScriptEntry::contains("task-beta", "B"),
        ]);
        assert_eq!(backend.complete(&req(Role::Code, "solve task-beta now")).unwrap().text, "B");
        assert_eq!(backend.complete(&req(Role::Code, "solve task-alpha now")).unwrap().text, "A");
        assert_eq!(backend.complete(&req(Role::Code, "solve task-alpha now")).unwrap().text, "A");
        assert_eq!(backend.remaining(), 0);
    }

    #[test]
    fn both_matcher_needs_role_and_substring() {
        let backend = ScriptedBackend::new(vec![
            ScriptEntry::both(Role::Debug, "task-x", "fix for x"),
            ScriptEntry::both(Role::Keywords, "task-x", "x, words"),
        ]);
        // keywords call skips the debug entry even though the substring matches
        assert_eq!(
            backend.complete(&req(Role::Keywords, "about task-x")).unwrap().text,
            "x, words"
        );
        assert_eq!(backend.complete(&req(Role::Debug, "fix task-x")).unwrap().text, "fix for x");
    }

    #[test]
    fn script_file_format_parses() {
        let json = r#"[
            {"role": "plan", "text": "PLAN:\n1. x\nConfidence: 50", "repeat": 2},
            {"contains": "t9", "fail": true}
        ]"#;
        let backend = ScriptedBackend::from_json(json).unwrap();
        assert_eq!(backend.remaining(), 3);
        backend.complete(&req(Role::Plan, "anything")).unwrap();
        assert!(backend.complete(&req(Role::Code, "about t9")).is_err());
    }

    #[test]
    fn identical_scripts_yield_identical_sequences() {
        let mk = || {
            ScriptedBackend::new(vec![
                ScriptEntry::role(Role::Plan, "first"),
                ScriptEntry::role(Role::Plan, "second"),
            ])
        };
        let (a, b) = (mk(), mk());
        for _ in 0..2 {
            let ra = a.complete(&req(Role::Plan, "q")).unwrap();
            let rb = b.complete(&req(Role::Plan, "q")).unwrap();
            assert_eq!(ra, rb);
        }
    }
}
