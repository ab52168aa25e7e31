//! External toolchain runner.
//!
//! Candidates are compiled and executed through arbitrary argv templates, so
//! tests drive the harness hermetically with shell-script stubs while real
//! deployments point the same config at a Move (or any other) toolchain.
//! Every assessment runs in a fresh working directory; stdout/stderr are
//! capped; wall-clock limits are enforced by killing the child.

use crate::task::{
    parse_severity_line, CodeCandidate, Diagnostic, ExecutionFeedback, TaskSpec, TestCase,
    TestOutcome,
};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("toolchain missing: failed to spawn {command:?}: {source}")]
    ToolchainMissing { command: String, source: std::io::Error },
    #[error("bad toolchain template: {0}")]
    BadTemplate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn default_time_limit() -> u64 {
    10_000
}
fn default_output_cap() -> usize {
    65_536
}
fn default_max_procs() -> usize {
    4
}
fn default_src_filename() -> String {
    "main.move".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolchainConfig {
    /// Compile argv template; must contain a `{src}` placeholder.
    pub compile_cmd: Vec<String>,
    /// Run argv template; must contain `{src}` and `{entry}` placeholders.
    pub run_cmd: Vec<String>,
    pub workdir: PathBuf,
    #[serde(default = "default_src_filename")]
    pub src_filename: String,
    #[serde(default = "default_time_limit")]
    pub time_limit_ms: u64,
    #[serde(default = "default_output_cap")]
    pub output_cap_bytes: usize,
    /// Upper bound on concurrent child processes across one harness.
    #[serde(default = "default_max_procs")]
    pub max_procs: usize,
}

impl ToolchainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !self.compile_cmd.iter().any(|a| a.contains("{src}")) {
            return Err(HarnessError::BadTemplate("compile_cmd lacks {src}".into()));
        }
        if !self.run_cmd.iter().any(|a| a.contains("{src}")) {
            return Err(HarnessError::BadTemplate("run_cmd lacks {src}".into()));
        }
        if !self.run_cmd.iter().any(|a| a.contains("{entry}")) {
            return Err(HarnessError::BadTemplate("run_cmd lacks {entry}".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompileResult {
    pub success: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub raw_stderr: String,
}

/// Pipeline mode runs visible tests only; scoring mode also runs the hidden
/// tests. Agents only ever see pipeline-mode feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssessMode {
    Pipeline,
    Scoring,
}

// Counting semaphore bounding concurrent child processes.
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().unwrap() += 1;
        self.gate.cv.notify_one();
    }
}

struct ProcOutput {
    exit_ok: bool,
    stdout: String,
    stderr: String,
    overflowed: bool,
    timed_out: bool,
}

fn read_capped(mut reader: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let mut overflow = false;
    loop {
        match reader.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if buf.len() < cap {
                    let take = (cap - buf.len()).min(n);
                    buf.extend_from_slice(&chunk[..take]);
                    if take < n {
                        overflow = true;
                    }
                } else {
                    overflow = true;
                }
            }
        }
    }
    (buf, overflow)
}

/// Runs the toolchain loop for one pipeline. Construct via [`Toolchain::new`];
/// `with_fixed_durations` pins reported test durations for byte-reproducible
/// runs (timeouts still report the limit).
pub struct Toolchain {
    cfg: ToolchainConfig,
    gate: Gate,
    fixed_duration_ms: Option<u64>,
}

impl Toolchain {
    pub fn new(cfg: ToolchainConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let gate = Gate::new(cfg.max_procs);
        Ok(Self { cfg, gate, fixed_duration_ms: None })
    }

    pub fn with_fixed_durations(mut self, duration_ms: u64) -> Self {
        self.fixed_duration_ms = Some(duration_ms);
        self
    }

    pub fn config(&self) -> &ToolchainConfig {
        &self.cfg
    }

    fn substitute(template: &[String], src: &Path, entry: &str) -> Vec<String> {
        template
            .iter()
            .map(|a| a.replace("{src}", &src.display().to_string()).replace("{entry}", entry))
            .collect()
    }

    fn run_process(
        &self,
        argv: &[String],
        dir: &Path,
        stdin_data: Option<&str>,
    ) -> Result<ProcOutput, HarnessError> {
        let _permit = self.gate.acquire();
        let mut command = Command::new(&argv[0]);
        command
            .args(&argv[1..])
            .current_dir(dir)
            .stdin(if stdin_data.is_some() { Stdio::piped() } else { Stdio::null() })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = command.spawn().map_err(|source| HarnessError::ToolchainMissing {
            command: argv[0].clone(),
            source,
        })?;

        if let Some(data) = stdin_data {
            let mut stdin = child.stdin.take().expect("stdin was piped");
            let data = data.to_string();
            // writer may hit a broken pipe if the child exits early
            std::thread::spawn(move || {
                let _ = stdin.write_all(data.as_bytes());
            });
        }

        let cap = self.cfg.output_cap_bytes;
        let stdout_pipe = child.stdout.take().expect("stdout was piped");
        let stderr_pipe = child.stderr.take().expect("stderr was piped");
        let (tx_out, rx_out) = std::sync::mpsc::channel();
        let (tx_err, rx_err) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let _ = tx_out.send(read_capped(stdout_pipe, cap));
        });
        std::thread::spawn(move || {
            let _ = tx_err.send(read_capped(stderr_pipe, cap));
        });

        let deadline = Instant::now() + Duration::from_millis(self.cfg.time_limit_ms);
        let mut timed_out = false;
        let status = loop {
            match child.try_wait()? {
                Some(status) => break Some(status),
                None => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        timed_out = true;
                        break None;
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
            }
        };

        // a killed stub may leave grandchildren holding the pipes open;
        // don't wait on them forever
        let grace = Duration::from_millis(500);
        let (stdout, out_over) = rx_out.recv_timeout(grace).unwrap_or((Vec::new(), false));
        let (stderr, err_over) = rx_err.recv_timeout(grace).unwrap_or((Vec::new(), false));

        Ok(ProcOutput {
            exit_ok: status.is_some_and(|s| s.success()),
            stdout: String::from_utf8_lossy(&stdout).into_owned(),
            stderr: String::from_utf8_lossy(&stderr).into_owned(),
            overflowed: out_over || err_over,
            timed_out,
        })
    }

    fn fresh_dir(&self) -> Result<tempfile::TempDir, HarnessError> {
        std::fs::create_dir_all(&self.cfg.workdir)?;
        Ok(tempfile::Builder::new().prefix("assess-").tempdir_in(&self.cfg.workdir)?)
    }

    fn write_source(&self, dir: &Path, candidate: &CodeCandidate) -> Result<PathBuf, HarnessError> {
        let src = dir.join(&self.cfg.src_filename);
        std::fs::write(&src, &candidate.source)?;
        Ok(src)
    }

    fn compile_in(&self, dir: &Path, src: &Path) -> Result<(CompileResult, String), HarnessError> {
        let argv = Self::substitute(&self.cfg.compile_cmd, src, "");
        let out = self.run_process(&argv, dir, None)?;
        let mut diagnostics = parse_diagnostics(&out.stderr);
        if out.timed_out {
            diagnostics.push(Diagnostic::error(format!(
                "compile timed out after {} ms",
                self.cfg.time_limit_ms
            )));
        }
        let has_errors =
            diagnostics.iter().any(|d| d.severity == crate::task::Severity::Error);
        let success = out.exit_ok && !out.timed_out && !has_errors;
        let mut trace = out.stderr.clone();
        trace.push_str(&out.stdout);
        if trace.len() > self.cfg.output_cap_bytes {
            trace.truncate(self.cfg.output_cap_bytes);
            // keep the cut on a char boundary
            while !trace.is_char_boundary(trace.len()) {
                trace.pop();
            }
        }
        let result = CompileResult { success, diagnostics, raw_stderr: out.stderr };
        let truncated_marker = if out.overflowed { "\u{1}" } else { "" };
        Ok((result, format!("{truncated_marker}{trace}")))
    }

    /// Compiles a candidate in a fresh directory.
    pub fn compile(&self, candidate: &CodeCandidate) -> Result<CompileResult, HarnessError> {
        let dir = self.fresh_dir()?;
        let src = self.write_source(dir.path(), candidate)?;
        Ok(self.compile_in(dir.path(), &src)?.0)
    }

    fn run_tests_in(
        &self,
        dir: &Path,
        src: &Path,
        tests: &[TestCase],
        entry: &str,
    ) -> Result<Vec<TestOutcome>, HarnessError> {
        let argv = Self::substitute(&self.cfg.run_cmd, src, entry);
        let mut outcomes = Vec::with_capacity(tests.len());
        for test in tests {
            let started = Instant::now();
            let out = self.run_process(&argv, dir, Some(&test.input))?;
            let elapsed = started.elapsed().as_millis() as u64;
            let duration_ms = if out.timed_out {
                self.cfg.time_limit_ms
            } else {
                self.fixed_duration_ms.unwrap_or(elapsed).min(self.cfg.time_limit_ms)
            };
            let passed = !out.timed_out
                && out.exit_ok
                && out.stdout.trim() == test.expected_output.trim();
            outcomes.push(TestOutcome {
                test_name: test.name.clone(),
                passed,
                actual_output: out.stdout,
                duration_ms,
            });
        }
        Ok(outcomes)
    }

    /// Runs tests for an already-compiling candidate in a fresh directory.
    pub fn run_tests(
        &self,
        candidate: &CodeCandidate,
        tests: &[TestCase],
        entry: &str,
    ) -> Result<Vec<TestOutcome>, HarnessError> {
        let dir = self.fresh_dir()?;
        let src = self.write_source(dir.path(), candidate)?;
        self.run_tests_in(dir.path(), &src, tests, entry)
    }

    /// Compiles and tests a candidate, producing structured feedback.
    ///
    /// Pipeline mode executes visible tests only; scoring mode appends the
    /// hidden tests. The mode is decided by the harness caller and is never
    /// visible to agents.
    pub fn assess(
        &self,
        candidate: &CodeCandidate,
        task: &TaskSpec,
        mode: AssessMode,
    ) -> Result<ExecutionFeedback, HarnessError> {
        let dir = self.fresh_dir()?;
        let src = self.write_source(dir.path(), candidate)?;
        let (compile, trace_tagged) = self.compile_in(dir.path(), &src)?;
        let (overflowed, trace) = match trace_tagged.strip_prefix('\u{1}') {
            Some(rest) => (true, rest.to_string()),
            None => (false, trace_tagged),
        };

        let mut test_results = Vec::new();
        if compile.success {
            test_results.extend(self.run_tests_in(
                dir.path(),
                &src,
                &task.visible_tests,
                &task.entry_point,
            )?);
            if mode == AssessMode::Scoring {
                test_results.extend(self.run_tests_in(
                    dir.path(),
                    &src,
                    &task.hidden_tests,
                    &task.entry_point,
                )?);
            }
        }
        Ok(ExecutionFeedback {
            compiled: compile.success,
            diagnostics: compile.diagnostics,
            test_results,
            trace,
            truncated: overflowed,
        })
    }
}

/// Parses `severity: message[ at line:col]` lines; anything else is left to
/// the caller's raw trace, never dropped silently.
pub fn parse_diagnostics(stderr: &str) -> Vec<Diagnostic> {
    stderr.lines().filter_map(parse_severity_line).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{Severity, TestKind};

    fn write_stub(dir: &Path, name: &str, body: &str) -> Vec<String> {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        vec!["sh".into(), path.display().to_string(), "{src}".into(), "{entry}".into()]
    }

    fn toolchain_with(dir: &Path, compile_body: &str, run_body: &str) -> Toolchain {
        toolchain_with_limits(dir, compile_body, run_body, 10_000, 65_536)
    }

    fn toolchain_with_limits(
        dir: &Path,
        compile_body: &str,
        run_body: &str,
        time_limit_ms: u64,
        cap: usize,
    ) -> Toolchain {
        let cfg = ToolchainConfig {
            compile_cmd: write_stub(dir, "compile.sh", compile_body),
            run_cmd: write_stub(dir, "run.sh", run_body),
            workdir: dir.join("work"),
            src_filename: default_src_filename(),
            time_limit_ms,
            output_cap_bytes: cap,
            max_procs: 4,
        };
        Toolchain::new(cfg).unwrap()
    }

    fn task() -> TaskSpec {
        TaskSpec {
            id: "t1".into(),
            description: "echo".into(),
            visible_tests: vec![
                TestCase {
                    name: "v1".into(),
                    input: "3".into(),
                    expected_output: "3".into(),
                    kind: TestKind::Visible,
                },
                TestCase {
                    name: "v2".into(),
                    input: "4".into(),
                    expected_output: "5".into(),
                    kind: TestKind::Visible,
                },
            ],
            hidden_tests: vec![TestCase {
                name: "h1".into(),
                input: "7".into(),
                expected_output: "7".into(),
                kind: TestKind::Hidden,
            }],
            entry_point: "main".into(),
        }
    }

    #[test]
    fn parse_diagnostics_examples() {
        let diags = parse_diagnostics(
            "error: type mismatch at 10:2\nwarning: unused variable\nthread panicked wildly\n",
        );
        assert_eq!(diags.len(), 2);
        assert_eq!(diags[0].severity, Severity::Error);
        assert_eq!(diags[0].message, "type mismatch");
        assert_eq!((diags[0].line, diags[0].column), (Some(10), Some(2)));
        assert_eq!(diags[1].severity, Severity::Warning);
        assert_eq!(diags[1].message, "unused variable");
        assert_eq!((diags[1].line, diags[1].column), (None, None));
    }

    #[test]
    fn parse_diagnostics_free_form_is_empty() {
        assert!(parse_diagnostics("some panic\nbacktrace follows\n").is_empty());
    }

    #[test]
    fn compile_success_without_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with(dir.path(), "exit 0\n", "cat\n");
        let result = tc.compile(&CodeCandidate::initial("src", "p1")).unwrap();
        assert!(result.success);
        assert!(result.diagnostics.is_empty());
    }

    #[test]
    fn compile_failure_parses_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with(
            dir.path(),
            "echo 'error: unexpected token at 3:7' >&2\nexit 1\n",
            "cat\n",
        );
        let result = tc.compile(&CodeCandidate::initial("src", "p1")).unwrap();
        assert!(!result.success);
        assert_eq!(result.diagnostics.len(), 1);
        let d = &result.diagnostics[0];
        assert_eq!(d.severity, Severity::Error);
        assert_eq!(d.message, "unexpected token");
        assert_eq!((d.line, d.column), (Some(3), Some(7)));
    }

    #[test]
    fn compile_timeout_synthesizes_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with_limits(dir.path(), "sleep 1\n", "cat\n", 100, 65_536);
        let result = tc.compile(&CodeCandidate::initial("src", "p1")).unwrap();
        assert!(!result.success);
        assert!(result.diagnostics.iter().any(|d| d.message.contains("timed out")));
    }

    #[test]
    fn run_tests_echo_stub() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with(dir.path(), "exit 0\n", "cat\n");
        let outcomes = tc
            .run_tests(&CodeCandidate::initial("src", "p1"), &task().visible_tests, "main")
            .unwrap();
        assert!(outcomes[0].passed);
        assert!(!outcomes[1].passed);
        assert_eq!(outcomes[1].actual_output.trim(), "4");
    }

    #[test]
    fn run_test_timeout_reports_limit() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with_limits(dir.path(), "exit 0\n", "sleep 1\n", 100, 65_536);
        let outcomes = tc
            .run_tests(&CodeCandidate::initial("src", "p1"), &task().visible_tests[..1], "main")
            .unwrap();
        assert!(!outcomes[0].passed);
        assert_eq!(outcomes[0].duration_ms, 100);
    }

    #[test]
    fn assess_compile_failure_has_no_test_results() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with(dir.path(), "echo 'error: no good' >&2\nexit 1\n", "cat\n");
        let fb = tc
            .assess(&CodeCandidate::initial("src", "p1"), &task(), AssessMode::Pipeline)
            .unwrap();
        assert!(!fb.compiled);
        assert!(fb.test_results.is_empty());
    }

    #[test]
    fn assess_modes_control_hidden_tests() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with(dir.path(), "exit 0\n", "cat\n");
        let candidate = CodeCandidate::initial("src", "p1");
        let pipeline = tc.assess(&candidate, &task(), AssessMode::Pipeline).unwrap();
        assert_eq!(pipeline.test_results.len(), 2);
        let scoring = tc.assess(&candidate, &task(), AssessMode::Scoring).unwrap();
        assert_eq!(scoring.test_results.len(), 3);
        assert!(scoring.test_results.iter().any(|t| t.test_name == "h1"));
    }

    #[test]
    fn assess_uses_fresh_directories() {
        let dir = tempfile::tempdir().unwrap();
        // fails if any previous run left a marker behind
        let tc = toolchain_with(
            dir.path(),
            "if [ -f marker ]; then echo 'error: stale state' >&2; exit 1; fi\ntouch marker\nexit 0\n",
            "cat\n",
        );
        let candidate = CodeCandidate::initial("src", "p1");
        for _ in 0..2 {
            let fb = tc.assess(&candidate, &task(), AssessMode::Pipeline).unwrap();
            assert!(fb.compiled, "stale state leaked between assessments");
        }
    }

    #[test]
    fn output_caps_are_respected() {
        let dir = tempfile::tempdir().unwrap();
        let flood = "head -c 1048576 /dev/zero | tr '\\0' 'x' >&2\nexit 1\n";
        let tc = toolchain_with_limits(dir.path(), flood, "cat\n", 10_000, 4096);
        let fb = tc
            .assess(&CodeCandidate::initial("src", "p1"), &task(), AssessMode::Pipeline)
            .unwrap();
        assert!(fb.trace.len() <= 4096);
        assert!(fb.truncated);
        let result = tc.compile(&CodeCandidate::initial("src", "p1")).unwrap();
        assert!(result.raw_stderr.len() <= 4096);
    }

    #[test]
    fn missing_toolchain_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToolchainConfig {
            compile_cmd: vec!["definitely-not-a-real-binary-zq".into(), "{src}".into()],
            run_cmd: vec!["cat".into(), "{src}".into(), "{entry}".into()],
            workdir: dir.path().join("work"),
            src_filename: default_src_filename(),
            time_limit_ms: 1000,
            output_cap_bytes: 4096,
            max_procs: 2,
        };
        let tc = Toolchain::new(cfg).unwrap();
        let err = tc.compile(&CodeCandidate::initial("src", "p1")).unwrap_err();
        assert!(matches!(err, HarnessError::ToolchainMissing { .. }));
    }

    #[test]
    fn template_validation() {
        let cfg = ToolchainConfig {
            compile_cmd: vec!["cc".into()],
            run_cmd: vec!["run".into(), "{src}".into(), "{entry}".into()],
            workdir: PathBuf::from("w"),
            src_filename: default_src_filename(),
            time_limit_ms: 1,
            output_cap_bytes: 1,
            max_procs: 1,
        };
        assert!(matches!(Toolchain::new(cfg), Err(HarnessError::BadTemplate(_))));
    }

    #[test]
    fn fixed_durations_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let tc = toolchain_with(dir.path(), "exit 0\n", "cat\n").with_fixed_durations(0);
        let outcomes = tc
            .run_tests(&CodeCandidate::initial("src", "p1"), &task().visible_tests, "main")
            .unwrap();
        assert!(outcomes.iter().all(|o| o.duration_ms == 0));
    }
}
