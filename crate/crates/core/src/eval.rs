//! Evaluation protocol: fault-corpus building, one-time vs. self-refine
//! solve rates, and relative-improvement reporting.
//!
//! A task counts as solved only when a candidate passes the visible AND the
//! hidden tests; visible-only success is reported as a separate diagnostic
//! column. Reports are deterministic: per-task rows are sorted by id and the
//! config snapshot is embedded, so identical runs produce identical bytes.

use crate::agents::generate_direct;
use crate::harness::{AssessMode, Toolchain};
use crate::task::{all_tests_passed, visible_passed, CodeCandidate, ExecutionFeedback, TaskSpec};
use crate::traversal::{solve_with_refinement, SolveDeps, SolveStatus, TraversalConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("one-time rate must be positive")]
    ZeroBaseline,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    OneTime,
    SelfRefine,
}

fn default_k() -> usize {
    10
}
fn default_refine_rounds() -> usize {
    5
}
fn default_concurrency() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Independent single-shot attempts per task in one-time mode.
    #[serde(default = "default_k")]
    pub k_iterations: usize,
    /// Refinement cap per task in self-refine mode.
    #[serde(default = "default_refine_rounds")]
    pub refine_rounds: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::OneTime,
            k_iterations: default_k(),
            refine_rounds: default_refine_rounds(),
            concurrency: default_concurrency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    /// Visible and hidden tests all passed.
    pub solved: bool,
    /// Visible tests passed (diagnostic column).
    pub visible_solved: bool,
    pub attempts_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub eval_config: EvalConfig,
    pub traversal_config: TraversalConfig,
    pub per_task: Vec<TaskResult>,
    pub solve_rate: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut json =
            serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        json.push('\n');
        json
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>7} {:>8} {:>9}  note\n",
            "task", "solved", "visible", "attempts"
        ));
        for row in &self.per_task {
            out.push_str(&format!(
                "{:<16} {:>7} {:>8} {:>9}  {}\n",
                row.task_id,
                if row.solved { "yes" } else { "no" },
                if row.visible_solved { "yes" } else { "no" },
                row.attempts_used,
                row.failure.as_deref().unwrap_or(""),
            ));
        }
        let solved = self.per_task.iter().filter(|r| r.solved).count();
        out.push_str(&format!(
            "solve rate: {:.4} ({}/{})\n",
            self.solve_rate,
            solved,
            self.per_task.len()
        ));
        out
    }
}

/// Few-shot example prepended to sampling prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotExample {
    pub description: String,
    pub code: String,
}

pub fn read_shots(path: &Path) -> Result<Vec<ShotExample>, EvalError> {
    let content = std::fs::read_to_string(path)?;
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EvalError::Config(format!("bad shot: {e}"))))
        .collect()
}

pub fn render_shots(shots: &[ShotExample]) -> String {
    let mut out = String::new();
    for shot in shots {
        out.push_str(&format!("Problem:\n{}\n\nSolution:\n{}\n\n", shot.description, shot.code));
    }
    out
}

/// One fault-corpus row: a failing candidate and its feedback.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultEntry {
    pub task_id: String,
    pub candidate: CodeCandidate,
    pub feedback: ExecutionFeedback,
}

#[derive(Debug, Default)]
pub struct FaultCorpus {
    pub entries: Vec<FaultEntry>,
    /// Per-task failures (task id, reason); the build continues past them.
    pub failures: Vec<(String, String)>,
}

pub fn write_fault_corpus(path: &Path, corpus: &FaultCorpus) -> Result<(), EvalError> {
    let mut out = String::new();
    for e in &corpus.entries {
        out.push_str(&serde_json::to_string(e).expect("entry serialization cannot fail"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Samples `samples_per_task` candidates per task with `shots` few-shot
/// examples prepended, assesses each, and keeps only the failing ones paired
/// with their feedback.
pub fn build_fault_corpus(
    tasks: &[TaskSpec],
    backend: &dyn crate::backend::CompletionBackend,
    toolchain: &Toolchain,
    agent: &crate::agents::AgentContext,
    shots: &[ShotExample],
    samples_per_task: usize,
    shots_count: usize,
) -> Result<FaultCorpus, EvalError> {
    if shots.len() < shots_count {
        return Err(EvalError::Config(format!(
            "need {shots_count} shot examples, have {}",
            shots.len()
        )));
    }
    let shots_block = render_shots(&shots[..shots_count]);
    let mut corpus = FaultCorpus::default();
    for task in tasks {
        for _ in 0..samples_per_task {
            let candidate = match generate_direct(task, &shots_block, backend, agent) {
                Ok(c) => c,
                Err(e) => {
                    corpus.failures.push((task.id.clone(), e.to_string()));
                    break;
                }
            };
            let feedback = match toolchain.assess(&candidate, task, AssessMode::Pipeline) {
                Ok(fb) => fb,
                Err(e) => {
                    corpus.failures.push((task.id.clone(), e.to_string()));
                    break;
                }
            };
            if !visible_passed(task, &feedback) {
                corpus.entries.push(FaultEntry {
                    task_id: task.id.clone(),
                    candidate,
                    feedback,
                });
            }
        }
    }
    Ok(corpus)
}

fn evaluate_one_time(
    task: &TaskSpec,
    deps: &SolveDeps<'_>,
    k_iterations: usize,
) -> TaskResult {
    let mut result = TaskResult {
        task_id: task.id.clone(),
        solved: false,
        visible_solved: false,
        attempts_used: 0,
        failure: None,
    };
    for _ in 0..k_iterations {
        result.attempts_used += 1;
        let candidate = match generate_direct(task, "", deps.backend, deps.agent) {
            Ok(c) => c,
            Err(e) => {
                result.failure = Some(e.to_string());
                break;
            }
        };
        let feedback = match deps.toolchain.assess(&candidate, task, AssessMode::Scoring) {
            Ok(fb) => fb,
            Err(e) => {
                result.failure = Some(e.to_string());
                break;
            }
        };
        result.visible_solved |= visible_passed(task, &feedback);
        if all_tests_passed(task, &feedback) {
            result.solved = true;
            break;
        }
    }
    result
}

fn evaluate_self_refine(
    task: &TaskSpec,
    deps: &SolveDeps<'_>,
    traversal_cfg: &TraversalConfig,
    refine_rounds: usize,
) -> TaskResult {
    let mut result = TaskResult {
        task_id: task.id.clone(),
        solved: false,
        visible_solved: false,
        attempts_used: 0,
        failure: None,
    };
    let seed = match generate_direct(task, "", deps.backend, deps.agent) {
        Ok(c) => c,
        Err(e) => {
            result.failure = Some(e.to_string());
            return result;
        }
    };
    let cfg = TraversalConfig { max_total_refinements: refine_rounds, ..traversal_cfg.clone() };
    match solve_with_refinement(task, deps, &cfg, seed) {
        Ok(run) => {
            result.attempts_used = run.attempts.len();
            result.visible_solved = run.status == SolveStatus::Solved;
            result.solved = run.fully_passed(task);
        }
        Err(e) => result.failure = Some(e.to_string()),
    }
    result
}

/// Runs the evaluation protocol over a corpus.
///
/// One-time mode gives each task up to `k_iterations` independent single-shot
/// generations (no repair); a task is solved as soon as one attempt fully
/// passes. Self-refine mode seeds one refinement chain per task from a
/// single-shot output, capped at `refine_rounds`.
pub fn evaluate(
    tasks: &[TaskSpec],
    deps: &SolveDeps<'_>,
    eval_cfg: &EvalConfig,
    traversal_cfg: &TraversalConfig,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::Config("empty task corpus".into()));
    }
    if eval_cfg.k_iterations == 0 || eval_cfg.refine_rounds == 0 {
        return Err(EvalError::Config("k_iterations and refine_rounds must be >= 1".into()));
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<TaskResult>> = Mutex::new(Vec::with_capacity(tasks.len()));
    let workers = eval_cfg.concurrency.clamp(1, tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let task = &tasks[i];
                let row = match eval_cfg.mode {
                    EvalMode::OneTime => evaluate_one_time(task, deps, eval_cfg.k_iterations),
                    EvalMode::SelfRefine => {
                        evaluate_self_refine(task, deps, traversal_cfg, eval_cfg.refine_rounds)
                    }
                };
                results.lock().unwrap().push(row);
            });
        }
    });

    let mut per_task = results.into_inner().unwrap();
    per_task.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let solved = per_task.iter().filter(|r| r.solved).count();
    Ok(EvalReport {
        mode: eval_cfg.mode,
        eval_config: eval_cfg.clone(),
        traversal_config: traversal_cfg.clone(),
        solve_rate: solved as f64 / per_task.len() as f64,
        per_task,
    })
}

/// Relative improvement of the self-refine rate over the one-time baseline,
/// in percent, rounded to one decimal (half away from zero).
pub fn relative_improvement(one_time_rate: f64, self_refine_rate: f64) -> Result<f64, EvalError> {
    if !(one_time_rate > 0.0) {
        return Err(EvalError::ZeroBaseline);
    }
    let percent = 100.0 * (self_refine_rate - one_time_rate) / one_time_rate;
    Ok((percent * 10.0).round() / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_improvement_table_cells() {
        assert_eq!(relative_improvement(14.0, 20.7).unwrap(), 47.9);
        assert_eq!(relative_improvement(12.2, 12.2).unwrap(), 0.0);
        assert_eq!(relative_improvement(15.9, 16.5).unwrap(), 3.8);
    }

    #[test]
    fn relative_improvement_is_zero_on_equal_rates() {
        for x in [0.1, 1.0, 14.0, 99.5] {
            assert_eq!(relative_improvement(x, x).unwrap(), 0.0);
        }
    }

    #[test]
    fn relative_improvement_zero_baseline() {
        assert!(matches!(relative_improvement(0.0, 5.0), Err(EvalError::ZeroBaseline)));
    }

    #[test]
    fn shots_render_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shots.jsonl");
        std::fs::write(
            &path,
            "{\"description\":\"d1\",\"code\":\"c1\"}\n{\"description\":\"d2\",\"code\":\"c2\"}\n",
        )
        .unwrap();
        let shots = read_shots(&path).unwrap();
        assert_eq!(shots.len(), 2);
        let block = render_shots(&shots[..1]);
        assert!(block.contains("Problem:\nd1"));
        assert!(block.contains("Solution:\nc1"));
    }
}
