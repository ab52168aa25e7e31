//! Documentation-derived concept graph.
//!
//! Ingests markdown-like documentation into one node per heading section,
//! links sections by nesting, cross references, and shared vocabulary, and
//! answers natural-language queries with TF-IDF cosine ranking plus a small
//! one-hop neighbor bonus. Ingestion and querying are pure functions of their
//! inputs, so the same docs always produce the same graph bytes and the same
//! ranking.

use crate::agents::AgentContext;
use crate::backend::{CompletionBackend, CompletionRequest, Role};
use crate::task::CodeCandidate;
use crate::text;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("no documents to ingest")]
    EmptyCorpus,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt graph file: {0}")]
    Corrupt(String),
}

/// One documentation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    /// Stable hash of (source document, heading path).
    pub id: String,
    pub title: String,
    pub body: String,
    pub code_snippets: Vec<String>,
    /// Lowercased token counts over title + body; code blocks excluded.
    pub terms: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    ParentChild,
    CrossReference,
    SharedTerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConceptGraph {
    pub nodes: BTreeMap<String, ConceptNode>,
    pub edges: Vec<ConceptEdge>,
    pub idf: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptHit {
    pub node: ConceptNode,
    pub score: f64,
}

impl ConceptGraph {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        let json = serde_json::to_string_pretty(self).expect("graph serialization cannot fail");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KgError> {
        let content = std::fs::read_to_string(path)?;
        serde_json::from_str(&content).map_err(|e| KgError::Corrupt(e.to_string()))
    }
}

fn fnv1a64(data: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in data.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn node_id(doc: &str, heading_path: &[String]) -> String {
    let key = format!("{}\u{1f}{}", doc, heading_path.join("\u{1f}"));
    format!("{:016x}", fnv1a64(&key))
}

struct Section {
    doc: String,
    path: Vec<String>,
    title: String,
    body: String,
    snippets: Vec<String>,
}

fn heading_level(line: &str) -> Option<(usize, &str)> {
    let hashes = line.chars().take_while(|&c| c == '#').count();
    if hashes == 0 {
        return None;
    }
    let rest = &line[hashes..];
    rest.strip_prefix(' ').map(|title| (hashes, title.trim())).filter(|(_, t)| !t.is_empty())
}

fn split_sections(doc_path: &str, content: &str) -> Vec<Section> {
    let mut sections: Vec<Section> = Vec::new();
    // (level, index into sections) of open ancestors
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut in_fence = false;
    let mut fence_buf = String::new();

    for line in content.lines() {
        if line.trim_start().starts_with("```") {
            if in_fence {
                if let Some(sec) = sections.last_mut() {
                    sec.snippets.push(fence_buf.trim_end().to_string());
                }
                fence_buf.clear();
            }
            in_fence = !in_fence;
            continue;
        }
        if in_fence {
            fence_buf.push_str(line);
            fence_buf.push('\n');
            continue;
        }
        if let Some((level, title)) = heading_level(line) {
            while stack.last().is_some_and(|(l, _)| *l >= level) {
                stack.pop();
            }
            let mut path: Vec<String> =
                stack.iter().map(|(_, i)| sections[*i].title.clone()).collect();
            path.push(title.to_string());
            sections.push(Section {
                doc: doc_path.to_string(),
                path,
                title: title.to_string(),
                body: String::new(),
                snippets: Vec::new(),
            });
            stack.push((level, sections.len() - 1));
        } else if let Some(sec) = sections.last_mut() {
            sec.body.push_str(line);
            sec.body.push('\n');
        }
    }

    if sections.is_empty() && !content.trim().is_empty() {
        // a document without headings becomes a single whole-document node
        sections.push(Section {
            doc: doc_path.to_string(),
            path: vec![doc_path.to_string()],
            title: doc_path.to_string(),
            body: content.to_string(),
            snippets: Vec::new(),
        });
    }
    sections
}

fn nonstop_terms(node: &ConceptNode) -> BTreeSet<&str> {
    node.terms.keys().map(String::as_str).filter(|t| !text::is_stopword(t)).collect()
}

/// Builds the concept graph from (path, content) documentation pairs.
pub fn ingest_documents(docs: &[(String, String)]) -> Result<ConceptGraph, KgError> {
    if docs.is_empty() {
        return Err(KgError::EmptyCorpus);
    }

    let mut sections: Vec<Section> = Vec::new();
    // parent/child pairs by section index, recorded during the per-doc pass
    let mut parent_edges: Vec<(usize, usize)> = Vec::new();
    for (path, content) in docs {
        let base = sections.len();
        let doc_sections = split_sections(path, content);
        // reconstruct nesting from heading paths: the parent of a section is
        // the nearest earlier section whose path is a prefix of this one
        for (i, sec) in doc_sections.iter().enumerate() {
            if sec.path.len() > 1 {
                let parent_path = &sec.path[..sec.path.len() - 1];
                if let Some(p) = doc_sections[..i]
                    .iter()
                    .rposition(|s| s.path.as_slice() == parent_path)
                {
                    parent_edges.push((base + p, base + i));
                }
            }
        }
        sections.extend(doc_sections);
    }

    // disambiguate repeated heading paths within a document
    let mut seen: HashMap<String, u32> = HashMap::new();
    let mut nodes_in_order: Vec<ConceptNode> = Vec::new();
    for sec in &sections {
        let mut path = sec.path.clone();
        let key = format!("{}\u{1f}{}", sec.doc, path.join("\u{1f}"));
        let n = seen.entry(key).or_insert(0);
        *n += 1;
        if *n > 1 {
            if let Some(last) = path.last_mut() {
                *last = format!("{} ({})", last, n);
            }
        }
        let mut terms: BTreeMap<String, u32> = BTreeMap::new();
        for token in text::words(&sec.title).into_iter().chain(text::words(&sec.body)) {
            *terms.entry(token).or_insert(0) += 1;
        }
        nodes_in_order.push(ConceptNode {
            id: node_id(&sec.doc, &path),
            title: sec.title.clone(),
            body: sec.body.trim().to_string(),
            code_snippets: sec.snippets.clone(),
            terms,
        });
    }

    let mut edges: BTreeSet<(String, String, EdgeKind, u64)> = BTreeSet::new();
    let mut push_edge = |from: &str, to: &str, kind: EdgeKind, weight: f64| {
        if from != to {
            edges.insert((from.to_string(), to.to_string(), kind, weight.to_bits()));
        }
    };

    for (p, c) in &parent_edges {
        push_edge(&nodes_in_order[*p].id, &nodes_in_order[*c].id, EdgeKind::ParentChild, 1.0);
    }
    for a in &nodes_in_order {
        for b in &nodes_in_order {
            if a.id != b.id && a.body.contains(&b.title) {
                push_edge(&a.id, &b.id, EdgeKind::CrossReference, 1.0);
            }
        }
    }
    for (i, a) in nodes_in_order.iter().enumerate() {
        for b in &nodes_in_order[i + 1..] {
            let ta = nonstop_terms(a);
            let tb = nonstop_terms(b);
            let shared = ta.intersection(&tb).count();
            if shared >= 3 {
                let union = ta.union(&tb).count();
                let jaccard = shared as f64 / union as f64;
                let (from, to) =
                    if a.id <= b.id { (&a.id, &b.id) } else { (&b.id, &a.id) };
                push_edge(from, to, EdgeKind::SharedTerm, jaccard);
            }
        }
    }

    let nodes: BTreeMap<String, ConceptNode> =
        nodes_in_order.into_iter().map(|n| (n.id.clone(), n)).collect();

    let total = nodes.len() as f64;
    let mut df: BTreeMap<String, u32> = BTreeMap::new();
    for node in nodes.values() {
        for token in node.terms.keys() {
            *df.entry(token.clone()).or_insert(0) += 1;
        }
    }
    let idf: BTreeMap<String, f64> =
        df.into_iter().map(|(t, d)| (t, (1.0 + total / d as f64).ln())).collect();

    Ok(ConceptGraph {
        nodes,
        edges: edges
            .into_iter()
            .map(|(from, to, kind, w)| ConceptEdge { from, to, kind, weight: f64::from_bits(w) })
            .collect(),
        idf,
    })
}

/// Ingests every regular file under `dir` (sorted by path) as documentation.
pub fn ingest_dir(dir: &Path) -> Result<ConceptGraph, KgError> {
    let mut paths: Vec<std::path::PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                paths.push(p);
            }
        }
    }
    paths.sort();
    let docs: Vec<(String, String)> = paths
        .into_iter()
        .map(|p| {
            let content = std::fs::read_to_string(&p)?;
            Ok((p.display().to_string(), content))
        })
        .collect::<Result<_, std::io::Error>>()?;
    ingest_documents(&docs)
}

/// Ranks nodes against a natural-language query.
///
/// Score = TF-IDF cosine between the query's non-stopword tokens and the node
/// terms, then each scored node adds 0.1x its score to its direct neighbors.
/// Zero-score nodes are excluded; ties break by node id ascending.
pub fn query_concepts(graph: &ConceptGraph, nl_query: &str, k: usize) -> Vec<ConceptHit> {
    if graph.nodes.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut q_counts: BTreeMap<String, u32> = BTreeMap::new();
    for token in text::words(nl_query) {
        if !text::is_stopword(&token) {
            *q_counts.entry(token).or_insert(0) += 1;
        }
    }
    // query weights only for tokens known to the corpus
    let q_weights: BTreeMap<&str, f64> = q_counts
        .iter()
        .filter_map(|(t, c)| graph.idf.get(t).map(|idf| (t.as_str(), f64::from(*c) * idf)))
        .collect();
    let q_norm = q_weights.values().map(|w| w * w).sum::<f64>().sqrt();
    if q_norm == 0.0 {
        return Vec::new();
    }

    let mut base: BTreeMap<&str, f64> = BTreeMap::new();
    for (id, node) in &graph.nodes {
        let mut dot = 0.0;
        let mut d_norm_sq = 0.0;
        for (t, tf) in &node.terms {
            let idf = graph.idf.get(t).copied().unwrap_or(0.0);
            let w = f64::from(*tf) * idf;
            d_norm_sq += w * w;
            if let Some(qw) = q_weights.get(t.as_str()) {
                dot += qw * w;
            }
        }
        let score = if d_norm_sq > 0.0 { dot / (q_norm * d_norm_sq.sqrt()) } else { 0.0 };
        base.insert(id, score);
    }

    let mut adjacency: HashMap<&str, HashSet<&str>> = HashMap::new();
    for e in &graph.edges {
        adjacency.entry(e.from.as_str()).or_default().insert(e.to.as_str());
        adjacency.entry(e.to.as_str()).or_default().insert(e.from.as_str());
    }

    let mut scored: Vec<(&str, f64)> = base
        .iter()
        .map(|(id, s)| {
            let bonus: f64 = adjacency
                .get(id)
                .map(|ns| ns.iter().map(|n| 0.1 * base.get(n).copied().unwrap_or(0.0)).sum())
                .unwrap_or(0.0);
            (*id, s + bonus)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(b.0))
    });
    scored
        .into_iter()
        .take(k)
        .map(|(id, score)| ConceptHit { node: graph.nodes[id].clone(), score })
        .collect()
}

/// Asks the backend for a one-paragraph description of a candidate, used as
/// the graph query during debugging. Falls back to the ordered identifier
/// list of the source when the backend fails or returns nothing, so a query
/// is always produced.
pub fn describe_code_query(
    candidate: &CodeCandidate,
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
) -> String {
    let req = CompletionRequest {
        prompt: ctx.render_describe(&candidate.source),
        params: ctx.params(Role::Describe),
        role: Role::Describe,
    };
    match backend.complete(&req) {
        Ok(resp) if !resp.text.trim().is_empty() => resp.text.trim().to_string(),
        _ => text::identifiers(&candidate.source).join(" "),
    }
}
