//! Append-only episodic memory of solved tasks.
//!
//! Each record pairs a past task description with the plan that solved it and
//! a keyword set, and is only admitted once a solution has passed both the
//! visible and the hidden tests. During debugging the pool is queried by
//! keyword/description similarity; during initial generation it is bypassed
//! entirely (enforced by the retrieval stage).

use crate::agents::{AgentContext, Plan};
use crate::backend::{BackendError, CompletionBackend, CompletionRequest, Role};
use crate::task::CodeCandidate;
use crate::text;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("corrupt store at line {line}: {reason}")]
    CorruptStore { line: usize, reason: String },
    #[error("record has no keywords")]
    EmptyKeywords,
    #[error("record is not marked as a full visible+hidden pass")]
    Unverified,
}

/// One solved task: description, the plan that solved it, extracted keywords.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub task_description: String,
    pub plan: Plan,
    pub keywords: BTreeSet<String>,
    /// Monotonic sequence number, assigned at insertion.
    pub created_at: u64,
    /// Provenance: the solution passed every visible and hidden test.
    pub full_pass: bool,
}

impl MemoryRecord {
    pub fn new(
        task_description: impl Into<String>,
        plan: Plan,
        keywords: BTreeSet<String>,
    ) -> Self {
        Self {
            task_description: task_description.into(),
            plan,
            keywords,
            created_at: 0,
            full_pass: true,
        }
    }
}

/// Lookup key during debugging.
#[derive(Debug, Clone, Default)]
pub struct MemoryQuery {
    pub task_description: String,
    pub plan: Option<Plan>,
    pub keywords: BTreeSet<String>,
    pub execution_summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMatch {
    pub record: MemoryRecord,
    pub similarity: f64,
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn description_cosine(a: &str, b: &str) -> f64 {
    let count = |s: &str| {
        let mut m = std::collections::BTreeMap::new();
        for t in text::words(s) {
            *m.entry(t).or_insert(0u32) += 1;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca
        .iter()
        .filter_map(|(t, n)| cb.get(t).map(|m| f64::from(*n) * f64::from(*m)))
        .sum();
    let norm = |m: &std::collections::BTreeMap<String, u32>| {
        m.values().map(|n| f64::from(*n).powi(2)).sum::<f64>().sqrt()
    };
    let (na, nb) = (norm(&ca), norm(&cb));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Persistent pool of [`MemoryRecord`]s. Append-only: nothing mutates or
/// removes an existing record. When bound to a path, each insert appends one
/// line and flushes, so readers never see a partial record.
#[derive(Debug, Default)]
pub struct MemoryPool {
    records: Vec<MemoryRecord>,
    path: Option<PathBuf>,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) a file-backed pool; inserts append to the file.
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
        let mut pool =
            if path.exists() { Self::load(path)? } else { Self::default() };
        pool.path = Some(path.to_path_buf());
        Ok(pool)
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let content = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        let mut last_seq = 0u64;
        for (i, line) in content.lines().enumerate() {
            let record: MemoryRecord =
                serde_json::from_str(line).map_err(|e| MemoryError::CorruptStore {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            if record.created_at <= last_seq {
                return Err(MemoryError::CorruptStore {
                    line: i + 1,
                    reason: format!(
                        "sequence {} not increasing (previous {})",
                        record.created_at, last_seq
                    ),
                });
            }
            last_seq = record.created_at;
            records.push(record);
        }
        Ok(Self { records, path: None })
    }

    pub fn persist(&self, path: &Path) -> Result<(), MemoryError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialization cannot fail"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn get(&self, seq: u64) -> Option<&MemoryRecord> {
        self.records.iter().find(|r| r.created_at == seq)
    }

    /// Appends a record, assigning the next sequence number. Rejects records
    /// without keywords or without full-pass provenance.
    pub fn insert(&mut self, mut record: MemoryRecord) -> Result<u64, MemoryError> {
        if record.keywords.is_empty() {
            return Err(MemoryError::EmptyKeywords);
        }
        if !record.full_pass {
            return Err(MemoryError::Unverified);
        }
        let seq = self.records.last().map(|r| r.created_at).unwrap_or(0) + 1;
        record.created_at = seq;
        if let Some(path) = &self.path {
            let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            let mut line =
                serde_json::to_string(&record).expect("record serialization cannot fail");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.records.push(record);
        Ok(seq)
    }

    /// Scores every record against the query and returns the top-k at or
    /// above the threshold. Similarity is 0.6 x keyword Jaccard + 0.4 x
    /// description token cosine; ties prefer newer records.
    pub fn match_similar(&self, query: &MemoryQuery, k: usize, threshold: f64) -> Vec<MemoryMatch> {
        let mut matches: Vec<MemoryMatch> = self
            .records
            .iter()
            .map(|r| MemoryMatch {
                similarity: 0.6 * jaccard(&query.keywords, &r.keywords)
                    + 0.4 * description_cosine(&query.task_description, &r.task_description),
                record: r.clone(),
            })
            .filter(|m| m.similarity >= threshold && m.similarity > 0.0)
            .collect();
        matches.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.record.created_at.cmp(&a.record.created_at))
        });
        matches.truncate(k);
        matches
    }
}

fn cap_by_frequency(counts: std::collections::BTreeMap<String, u32>, cap: usize) -> BTreeSet<String> {
    let mut ranked: Vec<(String, u32)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(cap).map(|(t, _)| t).collect()
}

const KEYWORD_CAP: usize = 32;

/// Extracts a keyword set for a solved task from its description and code.
///
/// Prefers the backend (keywords role); on failure or an empty parse it falls
/// back to a deterministic extractor over the description's non-stopword
/// tokens and the code's identifiers, so the pipeline keeps working without a
/// live model. Results are lowercased and capped at 32 tokens by descending
/// frequency, then lexicographic order.
pub fn extract_keywords(
    task_description: &str,
    candidate: &CodeCandidate,
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
) -> BTreeSet<String> {
    let req = CompletionRequest {
        prompt: ctx.render_keywords(task_description, &candidate.source),
        params: ctx.params(Role::Keywords),
        role: Role::Keywords,
    };
    let parsed = match backend.complete(&req) {
        Ok(resp) => {
            let mut counts = std::collections::BTreeMap::new();
            for piece in resp.text.split(|c| c == ',' || c == '\n') {
                let token = piece.trim().to_lowercase();
                if !token.is_empty() {
                    *counts.entry(token).or_insert(0u32) += 1;
                }
            }
            counts
        }
        Err(BackendError::Unavailable(_))
        | Err(BackendError::RateLimited { .. })
        | Err(BackendError::MalformedResponse(_))
        | Err(BackendError::ScriptExhausted { .. }) => Default::default(),
    };
    if !parsed.is_empty() {
        return cap_by_frequency(parsed, KEYWORD_CAP);
    }

    let mut counts = std::collections::BTreeMap::new();
    for t in text::words(task_description) {
        if !text::is_stopword(&t) {
            *counts.entry(t).or_insert(0u32) += 1;
        }
    }
    let source_words = text::words(&candidate.source);
    for ident in text::identifiers(&candidate.source) {
        let lower = ident.to_lowercase();
        let occurrences = source_words.iter().filter(|w| **w == lower).count() as u32;
        *counts.entry(lower).or_insert(0) += occurrences.max(1);
    }
    if counts.is_empty() {
        // degenerate inputs without any word characters
        for t in text::words(task_description) {
            *counts.entry(t).or_insert(0u32) += 1;
        }
    }
    cap_by_frequency(counts, KEYWORD_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;

    fn plan(id: &str) -> Plan {
        Plan::new(id, vec!["step one".into()], 0.9)
    }

    fn record(desc: &str, kws: &[&str]) -> MemoryRecord {
        MemoryRecord::new(desc, plan("p1"), kws.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn insert_assigns_increasing_sequences() {
        let mut pool = MemoryPool::new();
        assert_eq!(pool.insert(record("a", &["x"])).unwrap(), 1);
        assert_eq!(pool.insert(record("b", &["y"])).unwrap(), 2);
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn insert_rejects_empty_keywords() {
        let mut pool = MemoryPool::new();
        let err = pool.insert(record("a", &[])).unwrap_err();
        assert!(matches!(err, MemoryError::EmptyKeywords));
    }

    #[test]
    fn insert_rejects_unverified_records() {
        let mut pool = MemoryPool::new();
        let mut r = record("a", &["x"]);
        r.full_pass = false;
        assert!(matches!(pool.insert(r), Err(MemoryError::Unverified)));
    }

    #[test]
    fn similarity_hand_example() {
        // record K={a,b,c}, query K={a,b}, identical descriptions:
        // 0.6*(2/3) + 0.4*1.0 = 0.8
        let mut pool = MemoryPool::new();
        pool.insert(record("mint a coin", &["a", "b", "c"])).unwrap();
        let query = MemoryQuery {
            task_description: "mint a coin".into(),
            plan: Some(plan("q")),
            keywords: ["a", "b"].iter().map(|s| s.to_string()).collect(),
            execution_summary: None,
        };
        let matches = pool.match_similar(&query, 5, 0.0);
        assert_eq!(matches.len(), 1);
        assert!((matches[0].similarity - 0.8).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_is_empty() {
        let mut pool = MemoryPool::new();
        pool.insert(record("mint a coin", &["mint", "coin"])).unwrap();
        let query = MemoryQuery {
            task_description: "sort numbers quickly".into(),
            plan: Some(plan("q")),
            keywords: ["sort"].iter().map(|s| s.to_string()).collect(),
            execution_summary: None,
        };
        assert!(pool.match_similar(&query, 5, 0.25).is_empty());
    }

    #[test]
    fn equal_similarity_prefers_newer() {
        let mut pool = MemoryPool::new();
        pool.insert(record("same description", &["k"])).unwrap();
        pool.insert(record("same description", &["k"])).unwrap();
        let query = MemoryQuery {
            task_description: "same description".into(),
            plan: Some(plan("q")),
            keywords: ["k"].iter().map(|s| s.to_string()).collect(),
            execution_summary: None,
        };
        let matches = pool.match_similar(&query, 2, 0.0);
        assert_eq!(matches.len(), 2);
        assert_eq!(matches[0].record.created_at, 2);
        assert_eq!(matches[1].record.created_at, 1);
    }

    #[test]
    fn similarity_is_bounded() {
        let mut pool = MemoryPool::new();
        pool.insert(record("alpha beta gamma", &["alpha", "beta"])).unwrap();
        let query = MemoryQuery {
            task_description: "alpha beta gamma".into(),
            plan: Some(plan("q")),
            keywords: ["alpha", "beta"].iter().map(|s| s.to_string()).collect(),
            execution_summary: None,
        };
        let m = &pool.match_similar(&query, 1, 0.0)[0];
        assert!(m.similarity > 0.0 && m.similarity <= 1.0 + 1e-12);
    }

    #[test]
    fn persist_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let mut pool = MemoryPool::new();
        for i in 0..3 {
            pool.insert(record(&format!("task {i}"), &["kw"])).unwrap();
        }
        pool.persist(&path).unwrap();
        let loaded = MemoryPool::load(&path).unwrap();
        assert_eq!(loaded.records(), pool.records());
    }

    #[test]
    fn load_truncated_line_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let mut pool = MemoryPool::new();
        pool.insert(record("t", &["kw"])).unwrap();
        pool.persist(&path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str("{\"task_description\":\"cut off");
        std::fs::write(&path, content).unwrap();
        match MemoryPool::load(&path) {
            Err(MemoryError::CorruptStore { line: 2, .. }) => {}
            other => panic!("expected CorruptStore at line 2, got {other:?}"),
        }
    }

    #[test]
    fn load_empty_file_is_empty_pool() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(MemoryPool::load(&path).unwrap().is_empty());
    }

    #[test]
    fn open_appends_durably() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        {
            let mut pool = MemoryPool::open(&path).unwrap();
            pool.insert(record("first", &["kw"])).unwrap();
        }
        {
            let mut pool = MemoryPool::open(&path).unwrap();
            assert_eq!(pool.len(), 1);
            pool.insert(record("second", &["kw"])).unwrap();
        }
        let pool = MemoryPool::load(&path).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.records()[1].created_at, 2);
    }

    #[test]
    fn extract_keywords_parses_backend_list() {
        let backend = ScriptedBackend::single_text("coin, transfer, address");
        let c = CodeCandidate::initial("fun f() {}", "p1");
        let kws = extract_keywords("move a coin", &c, &backend, &AgentContext::default());
        let expect: BTreeSet<String> =
            ["coin", "transfer", "address"].iter().map(|s| s.to_string()).collect();
        assert_eq!(kws, expect);
    }

    #[test]
    fn extract_keywords_fallback() {
        let backend = ScriptedBackend::single_failure();
        let c = CodeCandidate::initial("fun split_coin(c: Coin) { }", "p1");
        let kws = extract_keywords("split a coin", &c, &backend, &AgentContext::default());
        for expected in ["split", "coin", "split_coin"] {
            assert!(kws.contains(expected), "missing {expected} in {kws:?}");
        }
        assert!(!kws.contains("a"), "stopword leaked into {kws:?}");
    }

    #[test]
    fn extract_keywords_caps_at_32() {
        let many: Vec<String> = (0..50).map(|i| format!("kw{i:02}")).collect();
        let backend = ScriptedBackend::single_text(many.join(", "));
        let c = CodeCandidate::initial("fun f() {}", "p1");
        let kws = extract_keywords("task", &c, &backend, &AgentContext::default());
        assert_eq!(kws.len(), 32);
        // equal frequency, so the lexicographically smallest 32 survive
        assert!(kws.contains("kw00"));
        assert!(kws.contains("kw31"));
        assert!(!kws.contains("kw32"));
    }
}
