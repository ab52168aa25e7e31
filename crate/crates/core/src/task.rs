//! Task, candidate, and feedback data model shared by the whole pipeline,
//! plus corpus parsing and validation.
//!
//! A task couples a natural-language description with visible tests (shown to
//! agents), hidden tests (scoring only), and the entry point all test runs
//! start from. Corpora are stored as UTF-8 files with one JSON record per
//! line; writers emit keys in a fixed order so golden files stay byte-stable.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("task `{0}` has no tests at all")]
    EmptyTests(String),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether a test is shown to agents or reserved for final scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Visible,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    pub input: String,
    pub expected_output: String,
    pub kind: TestKind,
}

/// A single programming task: description, tests, and entry point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub description: String,
    pub visible_tests: Vec<TestCase>,
    pub hidden_tests: Vec<TestCase>,
    pub entry_point: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateOrigin {
    Initial,
    Debugged,
}

/// A generated program attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCandidate {
    pub source: String,
    pub origin: CandidateOrigin,
    pub plan_id: String,
    pub attempt_index: u32,
}

impl CodeCandidate {
    pub fn initial(source: impl Into<String>, plan_id: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            origin: CandidateOrigin::Initial,
            plan_id: plan_id.into(),
            attempt_index: 0,
        }
    }

    pub fn debugged(
        source: impl Into<String>,
        plan_id: impl Into<String>,
        attempt_index: u32,
    ) -> Self {
        debug_assert!(attempt_index > 0);
        Self {
            source: source.into(),
            origin: CandidateOrigin::Debugged,
            plan_id: plan_id.into(),
            attempt_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Error => write!(f, "error"),
            Severity::Warning => write!(f, "warning"),
        }
    }
}

/// One structured compiler message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
    pub line: Option<u32>,
    pub column: Option<u32>,
}

impl Diagnostic {
    pub fn error(message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            message: message.into(),
            line: None,
            column: None,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.severity, self.message)?;
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, " at {}:{}", l, c)?;
        }
        Ok(())
    }
}

/// Parses one `severity: message[ at line:col]` line; returns `None` for
/// anything that doesn't match the grammar. Inverse of [`Diagnostic`]'s
/// `Display`.
pub fn parse_severity_line(line: &str) -> Option<Diagnostic> {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"^(error|warning):\s+(.+?)(?:\s+at\s+(\d+):(\d+))?\s*$").unwrap()
    });
    let caps = re.captures(line)?;
    let severity = match &caps[1] {
        "error" => Severity::Error,
        _ => Severity::Warning,
    };
    let line_no = caps.get(3).and_then(|m| m.as_str().parse().ok());
    let column = caps.get(4).and_then(|m| m.as_str().parse().ok());
    Some(Diagnostic { severity, message: caps[2].to_string(), line: line_no, column })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test_name: String,
    pub passed: bool,
    pub actual_output: String,
    pub duration_ms: u64,
}

/// Structured result of compiling and running a candidate.
///
/// Invariant: `compiled == false` implies `test_results` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionFeedback {
    pub compiled: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub test_results: Vec<TestOutcome>,
    pub trace: String,
    pub truncated: bool,
}

impl ExecutionFeedback {
    pub fn all_passed(&self) -> bool {
        self.compiled && !self.test_results.is_empty() && self.test_results.iter().all(|t| t.passed)
    }

    pub fn passed_count(&self) -> usize {
        self.test_results.iter().filter(|t| t.passed).count()
    }
}

fn tests_passed(tests: &[TestCase], fb: &ExecutionFeedback) -> bool {
    tests
        .iter()
        .all(|t| fb.test_results.iter().any(|o| o.test_name == t.name && o.passed))
}

/// True when the candidate compiled and every visible test of `task` passed.
pub fn visible_passed(task: &TaskSpec, fb: &ExecutionFeedback) -> bool {
    fb.compiled && tests_passed(&task.visible_tests, fb)
}

/// True when the candidate compiled and every visible and hidden test of
/// `task` passed; requires scoring-mode feedback to be meaningful.
pub fn all_tests_passed(task: &TaskSpec, fb: &ExecutionFeedback) -> bool {
    fb.compiled && tests_passed(&task.visible_tests, fb) && tests_passed(&task.hidden_tests, fb)
}

/// Fixed rendering of feedback, used both for size accounting during
/// truncation and inside debug prompts.
pub fn render_feedback(fb: &ExecutionFeedback) -> String {
    let mut out = String::new();
    out.push_str(if fb.compiled { "compile: ok\n" } else { "compile: failed\n" });
    for d in &fb.diagnostics {
        out.push_str(&d.to_string());
        out.push('\n');
    }
    for t in &fb.test_results {
        if t.passed {
            out.push_str(&format!("test {}: passed\n", t.test_name));
        } else {
            out.push_str(&format!("test {}: failed, output: {:?}\n", t.test_name, t.actual_output));
        }
    }
    if !fb.trace.is_empty() {
        out.push_str("trace:\n");
        out.push_str(&fb.trace);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus I/O
// ---------------------------------------------------------------------------

// Wire shape of one corpus line. Test objects carry no kind field; the list a
// test sits in decides it.
#[derive(Serialize, Deserialize)]
struct RawTest {
    name: String,
    input: String,
    expected_output: String,
}

#[derive(Serialize)]
struct RawTask<'a> {
    id: &'a str,
    description: &'a str,
    visible_tests: Vec<RawTest>,
    hidden_tests: Vec<RawTest>,
    entry_point: &'a str,
}

fn is_identifier(token: &str) -> bool {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn require_str(obj: &serde_json::Map<String, Value>, key: &'static str) -> Result<String, TaskError> {
    match obj.get(key) {
        None => Err(TaskError::MissingField(key)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(TaskError::InvalidField { field: key, reason: "expected a string".into() }),
    }
}

fn require_tests(
    obj: &serde_json::Map<String, Value>,
    key: &'static str,
    kind: TestKind,
) -> Result<Vec<TestCase>, TaskError> {
    let arr = match obj.get(key) {
        None => return Err(TaskError::MissingField(key)),
        Some(Value::Array(a)) => a,
        Some(_) => {
            return Err(TaskError::InvalidField { field: key, reason: "expected an array".into() })
        }
    };
    arr.iter()
        .map(|v| {
            let raw: RawTest = serde_json::from_value(v.clone())
                .map_err(|e| TaskError::InvalidField { field: key, reason: e.to_string() })?;
            Ok(TestCase {
                name: raw.name,
                input: raw.input,
                expected_output: raw.expected_output,
                kind,
            })
        })
        .collect()
}

/// Parses one corpus line into a validated [`TaskSpec`]. Unknown keys are
/// ignored.
pub fn parse_task(record: &str) -> Result<TaskSpec, TaskError> {
    let value: Value =
        serde_json::from_str(record).map_err(|e| TaskError::MalformedRecord(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| TaskError::MalformedRecord("record is not an object".into()))?;

    let task = TaskSpec {
        id: require_str(obj, "id")?,
        description: require_str(obj, "description")?,
        visible_tests: require_tests(obj, "visible_tests", TestKind::Visible)?,
        hidden_tests: require_tests(obj, "hidden_tests", TestKind::Hidden)?,
        entry_point: require_str(obj, "entry_point")?,
    };

    if task.id.is_empty() {
        return Err(TaskError::InvalidField { field: "id", reason: "must be non-empty".into() });
    }
    if task.visible_tests.is_empty() && task.hidden_tests.is_empty() {
        return Err(TaskError::EmptyTests(task.id));
    }
    if !is_identifier(&task.entry_point) {
        return Err(TaskError::InvalidField {
            field: "entry_point",
            reason: format!("{:?} is not an identifier", task.entry_point),
        });
    }
    let mut names: Vec<&str> = task
        .visible_tests
        .iter()
        .chain(&task.hidden_tests)
        .map(|t| t.name.as_str())
        .collect();
    names.sort_unstable();
    if let Some(dup) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(TaskError::InvalidField {
            field: "tests",
            reason: format!("duplicate test name {:?}", dup[0]),
        });
    }
    Ok(task)
}

/// Serializes one task as a single corpus line (no trailing newline), with
/// keys in the documented order.
pub fn render_task(task: &TaskSpec) -> String {
    let raw = RawTask {
        id: &task.id,
        description: &task.description,
        visible_tests: task
            .visible_tests
            .iter()
            .map(|t| RawTest {
                name: t.name.clone(),
                input: t.input.clone(),
                expected_output: t.expected_output.clone(),
            })
            .collect(),
        hidden_tests: task
            .hidden_tests
            .iter()
            .map(|t| RawTest {
                name: t.name.clone(),
                input: t.input.clone(),
                expected_output: t.expected_output.clone(),
            })
            .collect(),
        entry_point: &task.entry_point,
    };
    serde_json::to_string(&raw).expect("task serialization cannot fail")
}

pub fn read_corpus(path: &Path) -> Result<Vec<TaskSpec>, TaskError> {
    let content = std::fs::read_to_string(path)?;
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_task)
        .collect()
}

pub fn write_corpus(path: &Path, tasks: &[TaskSpec]) -> Result<(), TaskError> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&render_task(t));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Corpus validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    DuplicateId(String),
    DuplicateTestName { task_id: String, test_name: String },
    EmptyId,
    NoTests { task_id: String },
    BadEntryPoint { task_id: String, entry_point: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate task id {:?}", id),
            Violation::DuplicateTestName { task_id, test_name } => {
                write!(f, "task {:?} has duplicate test name {:?}", task_id, test_name)
            }
            Violation::EmptyId => write!(f, "task with empty id"),
            Violation::NoTests { task_id } => write!(f, "task {:?} has no tests", task_id),
            Violation::BadEntryPoint { task_id, entry_point } => {
                write!(f, "task {:?} has invalid entry point {:?}", task_id, entry_point)
            }
        }
    }
}

pub type ValidationReport = Vec<Violation>;

/// Checks per-task invariants and pairwise id uniqueness. Violations are data,
/// not errors; an empty report means the corpus is sound.
pub fn validate_corpus(tasks: &[TaskSpec]) -> ValidationReport {
    let mut report = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for task in tasks {
        if task.id.is_empty() {
            report.push(Violation::EmptyId);
        } else if !seen_ids.insert(task.id.as_str()) {
            report.push(Violation::DuplicateId(task.id.clone()));
        }
        if task.visible_tests.is_empty() && task.hidden_tests.is_empty() {
            report.push(Violation::NoTests { task_id: task.id.clone() });
        }
        if !is_identifier(&task.entry_point) {
            report.push(Violation::BadEntryPoint {
                task_id: task.id.clone(),
                entry_point: task.entry_point.clone(),
            });
        }
        let mut seen_tests = std::collections::HashSet::new();
        for t in task.visible_tests.iter().chain(&task.hidden_tests) {
            if !seen_tests.insert(t.name.as_str()) {
                report.push(Violation::DuplicateTestName {
                    task_id: task.id.clone(),
                    test_name: t.name.clone(),
                });
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Feedback truncation
// ---------------------------------------------------------------------------

fn char_count(s: &str) -> usize {
    s.chars().count()
}

fn truncate_chars(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

/// Bounds feedback for prompt embedding. The trace is cut to `max_chars`
/// first; diagnostics are then dropped tail-first while the rendered whole
/// still exceeds the budget, except that the first error-severity diagnostic
/// is never dropped. Idempotent for a fixed `max_chars`.
pub fn truncate_feedback(fb: &ExecutionFeedback, max_chars: usize) -> ExecutionFeedback {
    let max_chars = max_chars.max(64);
    let mut out = fb.clone();
    let mut shortened = false;

    if char_count(&out.trace) > max_chars {
        out.trace = truncate_chars(&out.trace, max_chars);
        shortened = true;
    }

    while char_count(&render_feedback(&out)) > max_chars {
        let protected = out.diagnostics.iter().position(|d| d.severity == Severity::Error);
        let droppable = (0..out.diagnostics.len()).rev().find(|i| Some(*i) != protected);
        match droppable {
            Some(i) => {
                out.diagnostics.remove(i);
                shortened = true;
            }
            None => break,
        }
    }

    out.truncated = fb.truncated || shortened;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_record() -> &'static str {
        r#"{"id":"t1","description":"add two ints","visible_tests":[{"name":"v1","input":"1 2","expected_output":"3"}],"hidden_tests":[],"entry_point":"main"}"#
    }

    #[test]
    fn parse_minimal_record() {
        let task = parse_task(minimal_record()).unwrap();
        assert_eq!(task.id, "t1");
        assert_eq!(task.visible_tests.len(), 1);
        assert_eq!(task.visible_tests[0].kind, TestKind::Visible);
        assert!(task.hidden_tests.is_empty());
        assert_eq!(task.entry_point, "main");
    }

    #[test]
    fn parse_missing_entry_point() {
        let record = r#"{"id":"t1","description":"d","visible_tests":[],"hidden_tests":[{"name":"h","input":"","expected_output":""}]}"#;
        match parse_task(record) {
            Err(TaskError::MissingField("entry_point")) => {}
            other => panic!("expected MissingField(entry_point), got {:?}", other),
        }
    }

    #[test]
    fn parse_no_tests_at_all() {
        let record = r#"{"id":"t1","description":"d","visible_tests":[],"hidden_tests":[],"entry_point":"main"}"#;
        assert!(matches!(parse_task(record), Err(TaskError::EmptyTests(_))));
    }

    #[test]
    fn parse_bad_syntax() {
        assert!(matches!(parse_task("{not json"), Err(TaskError::MalformedRecord(_))));
    }

    #[test]
    fn parse_ignores_unknown_fields() {
        let record = r#"{"id":"t1","description":"d","visible_tests":[],"hidden_tests":[{"name":"h","input":"","expected_output":""}],"entry_point":"main","extra":42}"#;
        assert!(parse_task(record).is_ok());
    }

    #[test]
    fn render_is_key_ordered() {
        let task = parse_task(minimal_record()).unwrap();
        assert_eq!(render_task(&task), minimal_record());
    }

    #[test]
    fn validate_flags_duplicates() {
        let t1 = parse_task(minimal_record()).unwrap();
        let report = validate_corpus(&[t1.clone(), t1.clone()]);
        assert!(report.contains(&Violation::DuplicateId("t1".into())));
    }

    #[test]
    fn validate_flags_duplicate_test_names() {
        let mut t1 = parse_task(minimal_record()).unwrap();
        t1.hidden_tests.push(TestCase {
            name: "v1".into(),
            input: String::new(),
            expected_output: String::new(),
            kind: TestKind::Hidden,
        });
        let report = validate_corpus(&[t1]);
        assert!(matches!(report.as_slice(), [Violation::DuplicateTestName { .. }]));
    }

    #[test]
    fn validate_clean_corpus_is_empty() {
        let tasks: Vec<TaskSpec> = (1..=3)
            .map(|i| {
                let mut t = parse_task(minimal_record()).unwrap();
                t.id = format!("t{i}");
                t
            })
            .collect();
        assert!(validate_corpus(&tasks).is_empty());
    }

    fn feedback_with(trace: &str, diagnostics: Vec<Diagnostic>) -> ExecutionFeedback {
        ExecutionFeedback {
            compiled: false,
            diagnostics,
            test_results: vec![],
            trace: trace.into(),
            truncated: false,
        }
    }

    #[test]
    fn truncate_short_trace_unchanged() {
        let fb = feedback_with("ten chars!", vec![]);
        let out = truncate_feedback(&fb, 64);
        assert_eq!(out.trace, "ten chars!");
        assert!(!out.truncated);
    }

    #[test]
    fn truncate_long_trace() {
        let fb = feedback_with(&"x".repeat(10_000), vec![]);
        let out = truncate_feedback(&fb, 500);
        assert_eq!(out.trace.chars().count(), 500);
        assert!(out.truncated);
    }

    #[test]
    fn truncate_keeps_first_error_drops_tail() {
        // 20 diagnostics: one warning, then the first error, then 18 more.
        let mut diags = vec![Diagnostic {
            severity: Severity::Warning,
            message: "w0 prelude warning before anything else".into(),
            line: None,
            column: None,
        }];
        diags.push(Diagnostic {
            severity: Severity::Error,
            message: "e1 the proximate cause".into(),
            line: Some(3),
            column: Some(7),
        });
        for i in 2..20 {
            diags.push(Diagnostic {
                severity: Severity::Error,
                message: format!("e{i} cascading failure with a long message body"),
                line: Some(i),
                column: Some(1),
            });
        }
        let fb = feedback_with("", diags);
        let out = truncate_feedback(&fb, 64);
        assert!(out.truncated);
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(out.diagnostics[0].message, "e1 the proximate cause");
    }

    #[test]
    fn truncate_is_idempotent() {
        let mut diags = Vec::new();
        for i in 0..20 {
            diags.push(Diagnostic {
                severity: if i == 4 { Severity::Error } else { Severity::Warning },
                message: format!("diagnostic number {i} with padding text"),
                line: Some(i),
                column: Some(2),
            });
        }
        let fb = feedback_with(&"t".repeat(300), diags);
        let once = truncate_feedback(&fb, 128);
        let twice = truncate_feedback(&once, 128);
        assert_eq!(once, twice);
    }

    #[test]
    fn render_feedback_compile_failure_has_no_test_section() {
        let fb = feedback_with("boom", vec![Diagnostic::error("bad token")]);
        let rendered = render_feedback(&fb);
        assert!(rendered.starts_with("compile: failed\n"));
        assert!(rendered.contains("error: bad token\n"));
        assert!(!rendered.contains("test "));
    }
}
