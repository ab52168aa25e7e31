//! The four pipeline agents as prompt assembly plus response parsing over a
//! completion backend: concept retrieval, planning with confidence scores,
//! coding, and plan-aware debugging.
//!
//! Prompts are pure functions of their inputs so every template render is
//! golden-file stable. Hidden tests are never rendered into any prompt; only
//! `visible_tests` reach [`task_nl`] and the feedback blocks.

use crate::backend::{CompletionBackend, CompletionRequest, GenerationParams, Role};
use crate::kg::{describe_code_query, query_concepts, ConceptGraph, ConceptHit, ConceptNode};
use crate::memory::{extract_keywords, MemoryMatch, MemoryPool, MemoryQuery};
use crate::task::{
    render_feedback, truncate_feedback, CodeCandidate, ExecutionFeedback, TaskSpec,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no plan response could be parsed")]
    NoPlansProduced,
    #[error("no plan steps could be extracted from the response")]
    UnparseablePlan,
    #[error("the extracted code is empty")]
    EmptyCode,
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Debug,
}

/// What retrieval hands to the planner and debugger. During the initial
/// stage the memory pool is bypassed, so `memories` is always empty there.
#[derive(Debug, Clone)]
pub struct RetrievalBundle {
    pub concepts: Vec<ConceptHit>,
    pub memories: Vec<MemoryMatch>,
    pub stage: Stage,
}

/// A step-by-step generation plan with a confidence score in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub id: String,
    pub steps: Vec<String>,
    pub confidence: f64,
    pub source_example: Option<String>,
}

impl Plan {
    pub fn new(id: impl Into<String>, steps: Vec<String>, confidence: f64) -> Self {
        debug_assert!(!steps.is_empty());
        Self { id: id.into(), steps, confidence: confidence.clamp(0.0, 1.0), source_example: None }
    }
}

/// The aggregated refinement context: problem description, faulty generated
/// code, and its execution feedback. Only exists in the debug stage.
#[derive(Debug, Clone)]
pub struct AggrContext {
    pub nl: String,
    pub fg: String,
    pub ef: ExecutionFeedback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommentStyle {
    pub open: String,
    pub close: String,
}

impl Default for CommentStyle {
    fn default() -> Self {
        Self { open: "/*".into(), close: "*/".into() }
    }
}

/// Per-role generation parameter overrides from the config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamOverride {
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<usize>,
    pub seed: Option<u64>,
}

/// The versioned prompt templates. Defaults are compiled in; a directory of
/// same-named `.txt` files overrides individual templates.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub describe: String,
    pub keywords: String,
    pub plan: String,
    pub code: String,
    pub debug: String,
    pub direct: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            describe: include_str!("../resources/prompts/describe.txt").to_string(),
            keywords: include_str!("../resources/prompts/keywords.txt").to_string(),
            plan: include_str!("../resources/prompts/plan.txt").to_string(),
            code: include_str!("../resources/prompts/code.txt").to_string(),
            debug: include_str!("../resources/prompts/debug.txt").to_string(),
            direct: include_str!("../resources/prompts/direct.txt").to_string(),
        }
    }
}

impl PromptSet {
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        for (name, slot) in [
            ("describe", &mut set.describe),
            ("keywords", &mut set.keywords),
            ("plan", &mut set.plan),
            ("code", &mut set.code),
            ("debug", &mut set.debug),
            ("direct", &mut set.direct),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(set)
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Agent-side configuration: templates, comment syntax for the target
/// language, the feedback character budget, and per-role parameter overrides.
#[derive(Debug, Clone)]
pub struct AgentContext {
    pub prompts: PromptSet,
    pub comment: CommentStyle,
    pub feedback_budget: usize,
    pub param_overrides: BTreeMap<String, ParamOverride>,
}

impl Default for AgentContext {
    fn default() -> Self {
        Self {
            prompts: PromptSet::default(),
            comment: CommentStyle::default(),
            feedback_budget: 2000,
            param_overrides: BTreeMap::new(),
        }
    }
}

impl AgentContext {
    pub fn params(&self, role: Role) -> GenerationParams {
        let mut params = GenerationParams::for_role(role);
        if let Some(o) = self.param_overrides.get(&role.to_string()) {
            if let Some(t) = o.temperature {
                params.temperature = t;
            }
            if let Some(p) = o.top_p {
                params.top_p = p;
            }
            if let Some(m) = o.max_tokens {
                params.max_tokens = m;
            }
            if let Some(s) = o.seed {
                params.seed = Some(s);
            }
        }
        params
    }

    pub fn render_describe(&self, code: &str) -> String {
        fill(&self.prompts.describe, &[("code", code)])
    }

    pub fn render_keywords(&self, description: &str, code: &str) -> String {
        fill(&self.prompts.keywords, &[("description", description), ("code", code)])
    }

    pub fn render_plan_prompt(&self, problem: &str, example: &str) -> String {
        fill(&self.prompts.plan, &[("problem", problem), ("example", example)])
    }

    pub fn render_code_prompt(&self, problem: &str, plan: &str, concepts: &str) -> String {
        fill(&self.prompts.code, &[("problem", problem), ("plan", plan), ("concepts", concepts)])
    }

    pub fn render_debug_prompt(&self, aggr: &str, plan: &str, memories: &str) -> String {
        fill(&self.prompts.debug, &[("aggr", aggr), ("plan", plan), ("memories", memories)])
    }

    pub fn render_direct(&self, shots: &str, problem: &str) -> String {
        fill(&self.prompts.direct, &[("shots", shots), ("problem", problem)])
    }
}

/// Renders the problem block shown to agents: the description plus the
/// visible tests. Hidden tests never appear here.
pub fn task_nl(task: &TaskSpec) -> String {
    let mut s = task.description.clone();
    if !task.visible_tests.is_empty() {
        s.push_str("\n\nSample tests:\n");
        for t in &task.visible_tests {
            s.push_str(&format!(
                "- {}: input {:?} expects output {:?}\n",
                t.name, t.input, t.expected_output
            ));
        }
    }
    s.trim_end().to_string()
}

fn render_example(node: &ConceptNode) -> String {
    let mut s = format!("{}\n{}", node.title, node.body);
    for snippet in &node.code_snippets {
        s.push_str(&format!("\n```\n{snippet}\n```"));
    }
    s.trim_end().to_string()
}

fn render_concepts(hits: &[ConceptHit]) -> String {
    if hits.is_empty() {
        return "(none)".to_string();
    }
    let mut s = String::new();
    for hit in hits.iter().take(3) {
        s.push_str(&format!("### {}\n{}\n", hit.node.title, hit.node.body));
        for snippet in &hit.node.code_snippets {
            s.push_str(&format!("```\n{snippet}\n```\n"));
        }
    }
    s.trim_end().to_string()
}

fn render_memories(memories: &[MemoryMatch]) -> String {
    if memories.is_empty() {
        return "(none)".to_string();
    }
    let mut s = String::new();
    for m in memories {
        s.push_str(&format!("#### {}\n{}\n", m.record.task_description, plan_steps(&m.record.plan)));
    }
    s.trim_end().to_string()
}

/// Numbered step list without the PLAN/Confidence markers.
pub fn plan_steps(plan: &Plan) -> String {
    plan.steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Canonical plan rendering; `parse_plan_response` of this text recovers the
/// steps and confidence.
pub fn render_plan(plan: &Plan) -> String {
    format!("PLAN:\n{}\nConfidence: {}", plan_steps(plan), plan.confidence * 100.0)
}

fn summarize_feedback(fb: &ExecutionFeedback) -> String {
    if !fb.compiled {
        match fb.diagnostics.iter().find(|d| d.severity == crate::task::Severity::Error) {
            Some(d) => format!("compile failed: {}", d.message),
            None => "compile failed".to_string(),
        }
    } else {
        format!("compiled, {}/{} visible tests passed", fb.passed_count(), fb.test_results.len())
    }
}

const CONCEPTS_PER_QUERY: usize = 5;
const MEMORIES_PER_QUERY: usize = 3;

/// Gathers concepts (and, in the debug stage, memories) for a task.
///
/// The graph query is the backend's description of the current candidate when
/// one exists, otherwise the raw task description. Retrieval never aborts the
/// pipeline: degradation yields empty lists.
#[allow(clippy::too_many_arguments)]
pub fn run_retrieval(
    task: &TaskSpec,
    graph: &ConceptGraph,
    pool: &MemoryPool,
    stage: Stage,
    candidate: Option<&CodeCandidate>,
    plan: Option<&Plan>,
    feedback: Option<&ExecutionFeedback>,
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
    memory_threshold: f64,
) -> RetrievalBundle {
    let query = match candidate {
        Some(c) if !c.source.trim().is_empty() => describe_code_query(c, backend, ctx),
        _ => task.description.clone(),
    };
    let concepts = if graph.is_empty() {
        Vec::new()
    } else {
        query_concepts(graph, &query, CONCEPTS_PER_QUERY)
    };
    let memories = match (stage, candidate) {
        (Stage::Initial, _) | (Stage::Debug, None) => Vec::new(),
        (Stage::Debug, Some(c)) => {
            let keywords = extract_keywords(&task.description, c, backend, ctx);
            let query = MemoryQuery {
                task_description: task.description.clone(),
                plan: plan.cloned(),
                keywords,
                execution_summary: feedback.map(summarize_feedback),
            };
            pool.match_similar(&query, MEMORIES_PER_QUERY, memory_threshold)
        }
    };
    debug_assert!(stage != Stage::Initial || memories.is_empty());
    RetrievalBundle { concepts, memories, stage }
}

/// Generates one plan per retrieved example (capped at `n`), or `n` generic
/// plans when nothing was retrieved. Responses that fail to parse are
/// skipped; producing zero plans is an error.
pub fn make_plans(
    task: &TaskSpec,
    bundle: &RetrievalBundle,
    n: usize,
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
) -> Result<Vec<Plan>, AgentError> {
    let problem = task_nl(task);
    let examples: Vec<Option<&ConceptHit>> = if bundle.concepts.is_empty() {
        vec![None; n.max(1)]
    } else {
        bundle.concepts.iter().take(n.max(1)).map(Some).collect()
    };
    let mut plans = Vec::new();
    for hit in examples {
        let example = hit.map(|h| render_example(&h.node)).unwrap_or_else(|| "(none)".to_string());
        let req = CompletionRequest {
            prompt: ctx.render_plan_prompt(&problem, &example),
            params: ctx.params(Role::Plan),
            role: Role::Plan,
        };
        let Ok(resp) = backend.complete(&req) else { continue };
        let Ok(mut plan) = parse_plan_response(&resp.text) else { continue };
        plan.id = format!("p{}", plans.len() + 1);
        plan.source_example = hit.map(|h| h.node.id.clone());
        plans.push(plan);
    }
    if plans.is_empty() {
        return Err(AgentError::NoPlansProduced);
    }
    Ok(plans)
}

fn strip_step_marker(line: &str) -> &str {
    let trimmed = line.trim();
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &trimmed[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim();
        }
    }
    trimmed
        .strip_prefix("- ")
        .or_else(|| trimmed.strip_prefix("* "))
        .map(str::trim)
        .unwrap_or(trimmed)
}

fn is_numbered(line: &str) -> bool {
    let trimmed = line.trim();
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    digits > 0 && matches!(trimmed[digits..].chars().next(), Some('.') | Some(')'))
}

fn is_confidence_line(line: &str) -> bool {
    line.trim().to_ascii_lowercase().starts_with("confidence:")
}

/// Parses a plan-role response. Steps are the lines after a `PLAN:` marker
/// (or all numbered lines when the marker is absent); the confidence is read
/// from a `Confidence:` line on a 0-100 scale and normalized, defaulting to
/// 0.5 when missing and clamped when out of range.
pub fn parse_plan_response(text: &str) -> Result<Plan, AgentError> {
    let lines: Vec<&str> = text.lines().collect();

    let confidence = lines
        .iter()
        .find(|l| is_confidence_line(l))
        .and_then(|l| {
            let value = l.trim()[11..].trim().trim_end_matches('%').trim();
            value.parse::<f64>().ok()
        })
        .map(|v| (v / 100.0).clamp(0.0, 1.0))
        .unwrap_or(0.5);

    let mut steps: Vec<String> = Vec::new();
    if let Some(pos) = lines.iter().position(|l| l.trim().to_ascii_uppercase().starts_with("PLAN:"))
    {
        let inline = lines[pos].trim()[5..].trim();
        if !inline.is_empty() {
            steps.push(strip_step_marker(inline).to_string());
        }
        for line in &lines[pos + 1..] {
            if is_confidence_line(line) {
                break;
            }
            let step = strip_step_marker(line);
            if !step.is_empty() {
                steps.push(step.to_string());
            }
        }
    } else {
        for line in &lines {
            if is_numbered(line) {
                steps.push(strip_step_marker(line).to_string());
            }
        }
    }
    if steps.is_empty() {
        return Err(AgentError::UnparseablePlan);
    }
    Ok(Plan { id: String::new(), steps, confidence, source_example: None })
}

/// First fenced code block of a response, or the whole response when no
/// fence is present.
pub fn extract_code_block(text: &str) -> String {
    if let Some(open) = text.find("```") {
        let after_fence = &text[open + 3..];
        let body_start = after_fence.find('\n').map(|i| i + 1).unwrap_or(after_fence.len());
        let body = &after_fence[body_start..];
        let end = body.find("```").unwrap_or(body.len());
        body[..end].trim_end().trim_start_matches('\n').to_string()
    } else {
        text.trim().to_string()
    }
}

/// Translates a plan into code with the code-role template.
pub fn generate_code(
    task: &TaskSpec,
    plan: &Plan,
    bundle: &RetrievalBundle,
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
) -> Result<CodeCandidate, AgentError> {
    let req = CompletionRequest {
        prompt: ctx.render_code_prompt(
            &task_nl(task),
            &plan_steps(plan),
            &render_concepts(&bundle.concepts),
        ),
        params: ctx.params(Role::Code),
        role: Role::Code,
    };
    let resp = backend.complete(&req)?;
    let source = extract_code_block(&resp.text);
    if source.trim().is_empty() {
        return Err(AgentError::EmptyCode);
    }
    Ok(CodeCandidate::initial(source, plan.id.clone()))
}

/// Single-shot generation without a plan; used for one-time evaluation and
/// fault-corpus sampling. `shots` is a preformatted few-shot block (may be
/// empty).
pub fn generate_direct(
    task: &TaskSpec,
    shots: &str,
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
) -> Result<CodeCandidate, AgentError> {
    let req = CompletionRequest {
        prompt: ctx.render_direct(shots, &task_nl(task)),
        params: ctx.params(Role::Code),
        role: Role::Code,
    };
    let resp = backend.complete(&req)?;
    let source = extract_code_block(&resp.text);
    if source.trim().is_empty() {
        return Err(AgentError::EmptyCode);
    }
    Ok(CodeCandidate::initial(source, "direct"))
}

/// Plan-aware repair of a faulty candidate.
pub fn debug_code(
    task: &TaskSpec,
    plan: &Plan,
    aggr: &AggrContext,
    memories: &[MemoryMatch],
    prev_attempt_index: u32,
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
) -> Result<CodeCandidate, AgentError> {
    let _ = task; // the problem statement already sits inside the AGGR block
    let req = CompletionRequest {
        prompt: ctx.render_debug_prompt(
            &assemble_aggr_prompt(aggr, ctx),
            &plan_steps(plan),
            &render_memories(memories),
        ),
        params: ctx.params(Role::Debug),
        role: Role::Debug,
    };
    let resp = backend.complete(&req)?;
    let source = extract_code_block(&resp.text);
    if source.trim().is_empty() {
        return Err(AgentError::EmptyCode);
    }
    Ok(CodeCandidate::debugged(source, plan.id.clone(), prev_attempt_index + 1))
}

/// Renders the aggregated refinement context with a fixed, byte-exact layout:
/// the problem as a leading block comment, the faulty code verbatim, the
/// feedback as a trailing block comment, then the refinement instruction.
/// The feedback is truncated to the configured budget first.
pub fn assemble_aggr_prompt(aggr: &AggrContext, ctx: &AgentContext) -> String {
    let ef = truncate_feedback(&aggr.ef, ctx.feedback_budget);
    format!(
        "{open}\nProblem:\n{nl}\n{close}\n{fg}\n{open}\nFeedback:\n{fb}{close}\nRevise the code above so it compiles and passes every listed test. Reply with only the corrected code.",
        open = ctx.comment.open,
        close = ctx.comment.close,
        nl = aggr.nl,
        fg = aggr.fg,
        fb = render_feedback(&ef),
    )
}
