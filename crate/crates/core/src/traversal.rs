//! The dynamic-traversal controller: rank plans by confidence, code the best,
//! debug up to the iteration cap, fall back to the next plan, and write fully
//! verified solutions into the memory pool.
//!
//! # Backend-call accounting
//!
//! With `p = plans_per_task` and `d = debug_iters_per_plan`, one [`solve`]
//! issues at most:
//!
//! | stage                | completions |
//! |----------------------|-------------|
//! | initial retrieval    | 0 (raw task description, memory bypassed) |
//! | planning             | <= p (one per retrieved example, or p generic) |
//! | per coded plan       | 1 code completion |
//! | per debug iteration  | 3 (candidate description, keyword extraction, repair) |
//! | memory write-back    | 1 keyword extraction, only on a full pass |
//!
//! Bound: `backend_calls <= p + p*(1 + 3*d) + 1 = 2p + 3pd + 1`. Refinement
//! mode skips planning and the write-back, so it is bounded by
//! `3 * min(d, max_total_refinements)`.

use crate::agents::{
    debug_code, generate_code, make_plans, run_retrieval, task_nl, AgentContext, AgentError,
    AggrContext, Plan, Stage,
};
use crate::backend::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};
use crate::harness::{AssessMode, HarnessError, Toolchain};
use crate::kg::ConceptGraph;
use crate::memory::{extract_keywords, MemoryPool, MemoryRecord};
use crate::task::{visible_passed, CodeCandidate, ExecutionFeedback, TaskSpec};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraversalError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

fn default_plans() -> usize {
    3
}
fn default_debug_iters() -> usize {
    5
}
fn default_refinements() -> usize {
    4
}
fn default_memory_threshold() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraversalConfig {
    #[serde(default = "default_plans")]
    pub plans_per_task: usize,
    #[serde(default = "default_debug_iters")]
    pub debug_iters_per_plan: usize,
    /// Refinement-mode cap, applied on top of `debug_iters_per_plan`.
    #[serde(default = "default_refinements")]
    pub max_total_refinements: usize,
    #[serde(default = "default_memory_threshold")]
    pub memory_threshold: f64,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        Self {
            plans_per_task: default_plans(),
            debug_iters_per_plan: default_debug_iters(),
            max_total_refinements: default_refinements(),
            memory_threshold: default_memory_threshold(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Solved,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub plan_id: String,
    pub attempt_index: u32,
    pub feedback: ExecutionFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub status: SolveStatus,
    pub final_candidate: CodeCandidate,
    pub attempts: Vec<Attempt>,
    pub backend_calls: u32,
    /// Scoring-mode feedback (visible + hidden), taken exactly once after the
    /// pipeline halts on a visible pass. `None` when exhausted.
    pub scoring_feedback: Option<ExecutionFeedback>,
}

impl PipelineResult {
    /// True when the task is fully solved: visible pass plus a full scoring
    /// pass over the hidden tests.
    pub fn fully_passed(&self, task: &TaskSpec) -> bool {
        self.status == SolveStatus::Solved
            && self
                .scoring_feedback
                .as_ref()
                .is_some_and(|fb| crate::task::all_tests_passed(task, fb))
    }
}

/// Shared dependencies of one pipeline run.
pub struct SolveDeps<'a> {
    pub graph: &'a ConceptGraph,
    pub pool: &'a Mutex<MemoryPool>,
    pub backend: &'a dyn CompletionBackend,
    pub toolchain: &'a Toolchain,
    pub agent: &'a AgentContext,
}

struct CountingBackend<'a> {
    inner: &'a dyn CompletionBackend,
    calls: AtomicU32,
}

impl<'a> CountingBackend<'a> {
    fn new(inner: &'a dyn CompletionBackend) -> Self {
        Self { inner, calls: AtomicU32::new(0) }
    }

    fn count(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionBackend for CountingBackend<'_> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
}

/// Non-increasing confidence; equal confidences keep generation order.
pub fn rank_plans(mut plans: Vec<Plan>) -> Vec<Plan> {
    plans.sort_by(|a, b| {
        b.confidence.partial_cmp(&a.confidence).unwrap_or(std::cmp::Ordering::Equal)
    });
    plans
}

struct BestCandidate {
    passed: usize,
    candidate: CodeCandidate,
}

fn update_best(best: &mut Option<BestCandidate>, fb: &ExecutionFeedback, candidate: &CodeCandidate) {
    let passed = fb.passed_count();
    // >= keeps the latest attempt on ties
    if best.as_ref().map_or(true, |b| passed >= b.passed) {
        *best = Some(BestCandidate { passed, candidate: candidate.clone() });
    }
}

/// Scores the solved candidate once (visible + hidden) and, on a full pass in
/// solve mode, extracts keywords and appends a memory record.
fn finish_solved(
    task: &TaskSpec,
    deps: &SolveDeps<'_>,
    counting: &CountingBackend<'_>,
    plan: &Plan,
    candidate: CodeCandidate,
    attempts: Vec<Attempt>,
    write_memory: bool,
) -> Result<PipelineResult, TraversalError> {
    let scoring = deps.toolchain.assess(&candidate, task, AssessMode::Scoring)?;
    if write_memory && crate::task::all_tests_passed(task, &scoring) {
        let keywords = extract_keywords(&task.description, &candidate, counting, deps.agent);
        let record = MemoryRecord::new(task.description.clone(), plan.clone(), keywords);
        // write-back is best-effort; a full pool failure must not undo a solve
        let _ = deps.pool.lock().unwrap().insert(record);
    }
    Ok(PipelineResult {
        status: SolveStatus::Solved,
        final_candidate: candidate,
        attempts,
        backend_calls: counting.count(),
        scoring_feedback: Some(scoring),
    })
}

/// One debug round: retrieval over the faulty candidate, plan-aware repair,
/// reassessment. Returns `None` when the repair itself failed (the caller
/// falls through to the next plan).
#[allow(clippy::too_many_arguments)]
fn debug_round(
    task: &TaskSpec,
    deps: &SolveDeps<'_>,
    counting: &CountingBackend<'_>,
    cfg: &TraversalConfig,
    plan: &Plan,
    candidate: &CodeCandidate,
    feedback: &ExecutionFeedback,
) -> Result<Option<(CodeCandidate, ExecutionFeedback)>, TraversalError> {
    let bundle = {
        let pool = deps.pool.lock().unwrap();
        run_retrieval(
            task,
            deps.graph,
            &pool,
            Stage::Debug,
            Some(candidate),
            Some(plan),
            Some(feedback),
            counting,
            deps.agent,
            cfg.memory_threshold,
        )
    };
    let aggr = AggrContext {
        nl: task_nl(task),
        fg: candidate.source.clone(),
        ef: feedback.clone(),
    };
    let next = match debug_code(
        task,
        plan,
        &aggr,
        &bundle.memories,
        candidate.attempt_index,
        counting,
        deps.agent,
    ) {
        Ok(c) => c,
        Err(AgentError::EmptyCode) | Err(AgentError::Backend(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let fb = deps.toolchain.assess(&next, task, AssessMode::Pipeline)?;
    Ok(Some((next, fb)))
}

/// Runs the full pipeline on one task: initial retrieval, planning, ranked
/// plan traversal with per-plan debug loops, and memory write-back on a full
/// visible+hidden pass.
pub fn solve(
    task: &TaskSpec,
    deps: &SolveDeps<'_>,
    cfg: &TraversalConfig,
) -> Result<PipelineResult, TraversalError> {
    let counting = CountingBackend::new(deps.backend);
    let bundle = {
        let pool = deps.pool.lock().unwrap();
        run_retrieval(
            task,
            deps.graph,
            &pool,
            Stage::Initial,
            None,
            None,
            None,
            &counting,
            deps.agent,
            cfg.memory_threshold,
        )
    };
    let plans = rank_plans(make_plans(task, &bundle, cfg.plans_per_task, &counting, deps.agent)?);

    let mut attempts: Vec<Attempt> = Vec::new();
    let mut best: Option<BestCandidate> = None;
    let mut last_generation_error: Option<AgentError> = None;

    for plan in &plans {
        let mut candidate = match generate_code(task, plan, &bundle, &counting, deps.agent) {
            Ok(c) => c,
            Err(e) => {
                last_generation_error = Some(e);
                continue;
            }
        };
        let mut feedback = deps.toolchain.assess(&candidate, task, AssessMode::Pipeline)?;
        attempts.push(Attempt {
            plan_id: plan.id.clone(),
            attempt_index: candidate.attempt_index,
            feedback: feedback.clone(),
        });
        update_best(&mut best, &feedback, &candidate);
        if visible_passed(task, &feedback) {
            return finish_solved(task, deps, &counting, plan, candidate, attempts, true);
        }

        for _ in 0..cfg.debug_iters_per_plan {
            let Some((next, fb)) =
                debug_round(task, deps, &counting, cfg, plan, &candidate, &feedback)?
            else {
                break;
            };
            candidate = next;
            feedback = fb;
            attempts.push(Attempt {
                plan_id: plan.id.clone(),
                attempt_index: candidate.attempt_index,
                feedback: feedback.clone(),
            });
            update_best(&mut best, &feedback, &candidate);
            if visible_passed(task, &feedback) {
                return finish_solved(task, deps, &counting, plan, candidate, attempts, true);
            }
        }
    }

    let Some(best) = best else {
        // every plan failed before producing an assessable candidate
        return Err(last_generation_error.unwrap_or(AgentError::NoPlansProduced).into());
    };
    Ok(PipelineResult {
        status: SolveStatus::Exhausted,
        final_candidate: best.candidate,
        attempts,
        backend_calls: counting.count(),
        scoring_feedback: None,
    })
}

/// Refinement mode: skips initial generation and enters the debug loop
/// directly on a prior candidate's feedback, capped at
/// `min(debug_iters_per_plan, max_total_refinements)` rounds. No memory
/// write-back happens here, so a prior that already passes costs zero
/// completions beyond its assessment.
pub fn solve_with_refinement(
    task: &TaskSpec,
    deps: &SolveDeps<'_>,
    cfg: &TraversalConfig,
    prior: CodeCandidate,
) -> Result<PipelineResult, TraversalError> {
    let counting = CountingBackend::new(deps.backend);
    let mut candidate = prior;
    let mut feedback = deps.toolchain.assess(&candidate, task, AssessMode::Pipeline)?;
    let mut attempts = vec![Attempt {
        plan_id: candidate.plan_id.clone(),
        attempt_index: candidate.attempt_index,
        feedback: feedback.clone(),
    }];
    let mut best: Option<BestCandidate> = None;
    update_best(&mut best, &feedback, &candidate);

    let plan = Plan::new(
        candidate.plan_id.clone(),
        vec!["Revise the previous attempt until it compiles and passes the provided tests.".into()],
        0.5,
    );

    if visible_passed(task, &feedback) {
        return finish_solved(task, deps, &counting, &plan, candidate, attempts, false);
    }

    let rounds = cfg.debug_iters_per_plan.min(cfg.max_total_refinements);
    for _ in 0..rounds {
        let Some((next, fb)) =
            debug_round(task, deps, &counting, cfg, &plan, &candidate, &feedback)?
        else {
            break;
        };
        candidate = next;
        feedback = fb;
        attempts.push(Attempt {
            plan_id: candidate.plan_id.clone(),
            attempt_index: candidate.attempt_index,
            feedback: feedback.clone(),
        });
        update_best(&mut best, &feedback, &candidate);
        if visible_passed(task, &feedback) {
            return finish_solved(task, deps, &counting, &plan, candidate, attempts, false);
        }
    }

    let best = best.expect("at least the prior candidate was assessed");
    Ok(PipelineResult {
        status: SolveStatus::Exhausted,
        final_candidate: best.candidate,
        attempts,
        backend_calls: counting.count(),
        scoring_feedback: None,
    })
}
