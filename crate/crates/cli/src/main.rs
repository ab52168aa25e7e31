//! Command-line entry point: documentation ingestion, fault-corpus building,
//! single-task generation, corpus evaluation, memory inspection, and loss
//! evaluation. Exit codes: 0 success, 1 evaluation-level failure, 2 usage
//! error.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use redraft_core::config::AppConfig;
use redraft_core::eval::{
    build_fault_corpus, evaluate, read_shots, write_fault_corpus, EvalMode,
};
use redraft_core::kg::{ingest_dir, ConceptGraph};
use redraft_core::losses::{eval_samples, read_samples};
use redraft_core::memory::MemoryPool;
use redraft_core::task::read_corpus;
use redraft_core::traversal::{solve, SolveDeps, SolveStatus};
use std::path::PathBuf;
use std::sync::Mutex;

#[derive(Parser)]
#[command(name = "redraft", version, about = "Agent-driven code generation and self-repair")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a documentation directory into a concept graph file.
    IngestDocs {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Sample candidates per task and keep failing ones with their feedback.
    BuildCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        shots: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        shots_count: usize,
    },
    /// Run the full pipeline on a single task.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Structured result file.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Run log: one JSON record per attempt.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a task corpus in one-time or self-refine mode.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Overrides the mode from the config file (one_time | self_refine).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Inspect a memory pool file.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// Loss utilities over sample files.
    Losses {
        #[command(subcommand)]
        action: LossesAction,
    },
}

#[derive(Subcommand)]
enum MemoryAction {
    /// List all records.
    List {
        #[arg(long)]
        pool: PathBuf,
    },
    /// Print one record in full.
    Show {
        seq: u64,
        #[arg(long)]
        pool: PathBuf,
    },
}

#[derive(Subcommand)]
enum LossesAction {
    /// Print per-sample and mean masked NLL for a sample file.
    Eval { file: PathBuf },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn load_graph(path: Option<&PathBuf>) -> Result<ConceptGraph> {
    match path {
        Some(p) => ConceptGraph::load(p).with_context(|| format!("loading graph {p:?}")),
        None => Ok(ConceptGraph::empty()),
    }
}

fn open_pool(path: Option<&PathBuf>) -> Result<MemoryPool> {
    match path {
        Some(p) => MemoryPool::open(p).with_context(|| format!("opening pool {p:?}")),
        None => Ok(MemoryPool::new()),
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::IngestDocs { dir, output } => {
            let graph = ingest_dir(&dir)?;
            graph.save(&output)?;
            println!(
                "ingested {} concepts, {} edges -> {}",
                graph.nodes.len(),
                graph.edges.len(),
                output.display()
            );
            Ok(0)
        }

        Command::BuildCorpus { config, tasks, shots, output, samples, shots_count } => {
            let config = AppConfig::load(&config)?;
            let backend = config.build_backend()?;
            let toolchain = config.build_toolchain()?;
            let agent = config.build_agent_context()?;
            let tasks = read_corpus(&tasks)?;
            let shots = read_shots(&shots)?;
            let corpus = build_fault_corpus(
                &tasks,
                backend.as_ref(),
                &toolchain,
                &agent,
                &shots,
                samples,
                shots_count,
            )?;
            write_fault_corpus(&output, &corpus)?;
            println!(
                "{} fault entries over {} tasks -> {}",
                corpus.entries.len(),
                tasks.len(),
                output.display()
            );
            for (task_id, reason) in &corpus.failures {
                eprintln!("task {task_id}: {reason}");
            }
            Ok(if corpus.failures.is_empty() { 0 } else { 1 })
        }

        Command::Generate { config, tasks, task, graph, pool, output, log } => {
            let config = AppConfig::load(&config)?;
            let backend = config.build_backend()?;
            let toolchain = config.build_toolchain()?;
            let agent = config.build_agent_context()?;
            let corpus = read_corpus(&tasks)?;
            let task = corpus
                .iter()
                .find(|t| t.id == task)
                .ok_or_else(|| anyhow!("task {task:?} not found in corpus"))?;
            let graph = load_graph(graph.as_ref())?;
            let pool = Mutex::new(open_pool(pool.as_ref())?);
            let deps = SolveDeps {
                graph: &graph,
                pool: &pool,
                backend: backend.as_ref(),
                toolchain: &toolchain,
                agent: &agent,
            };
            let result = solve(task, &deps, &config.traversal)?;

            println!("task {}: {:?}", task.id, result.status);
            println!("{:<8} {:>7}  outcome", "plan", "attempt");
            for a in &result.attempts {
                let outcome = if !a.feedback.compiled {
                    "compile failed".to_string()
                } else {
                    format!(
                        "{}/{} visible tests passed",
                        a.feedback.passed_count(),
                        a.feedback.test_results.len()
                    )
                };
                println!("{:<8} {:>7}  {}", a.plan_id, a.attempt_index, outcome);
            }
            println!("backend calls: {}", result.backend_calls);
            if let Some(path) = output {
                std::fs::write(&path, serde_json::to_string_pretty(&result)?)?;
                println!("result -> {}", path.display());
            }
            if let Some(path) = log {
                let mut lines = String::new();
                for a in &result.attempts {
                    lines.push_str(&serde_json::to_string(a)?);
                    lines.push('\n');
                }
                std::fs::write(&path, lines)?;
            }
            Ok(if result.status == SolveStatus::Solved { 0 } else { 1 })
        }

        Command::Evaluate { config, tasks, mode, graph, pool, output } => {
            let config = AppConfig::load(&config)?;
            let backend = config.build_backend()?;
            let toolchain = config.build_toolchain()?;
            let agent = config.build_agent_context()?;
            let corpus = read_corpus(&tasks)?;
            let mut eval_cfg = config.evaluation.clone();
            if let Some(mode) = mode {
                eval_cfg.mode = match mode.as_str() {
                    "one_time" => EvalMode::OneTime,
                    "self_refine" => EvalMode::SelfRefine,
                    other => bail!("unknown mode {other:?} (expected one_time | self_refine)"),
                };
            }
            let graph = load_graph(graph.as_ref())?;
            let pool = Mutex::new(open_pool(pool.as_ref())?);
            let deps = SolveDeps {
                graph: &graph,
                pool: &pool,
                backend: backend.as_ref(),
                toolchain: &toolchain,
                agent: &agent,
            };
            let report = evaluate(&corpus, &deps, &eval_cfg, &config.traversal)?;
            print!("{}", report.render_table());
            std::fs::write(&output, report.to_json())?;
            println!("report -> {}", output.display());
            let had_failures = report.per_task.iter().any(|r| r.failure.is_some());
            Ok(if had_failures { 1 } else { 0 })
        }

        Command::Memory { action } => match action {
            MemoryAction::List { pool } => {
                let pool = MemoryPool::load(&pool)?;
                println!("{:<6} {:>9}  description", "seq", "keywords");
                for r in pool.records() {
                    let mut description = r.task_description.replace('\n', " ");
                    if description.chars().count() > 60 {
                        description = description.chars().take(57).collect::<String>() + "...";
                    }
                    println!("{:<6} {:>9}  {}", r.created_at, r.keywords.len(), description);
                }
                println!("{} records", pool.len());
                Ok(0)
            }
            MemoryAction::Show { seq, pool } => {
                let pool = MemoryPool::load(&pool)?;
                let record =
                    pool.get(seq).ok_or_else(|| anyhow!("no record with sequence {seq}"))?;
                println!("{}", serde_json::to_string_pretty(record)?);
                Ok(0)
            }
        },

        Command::Losses { action } => match action {
            LossesAction::Eval { file } => {
                let samples = read_samples(&file)?;
                let (losses, mean) = eval_samples(&samples)?;
                println!("{:<8} {:>14}", "sample", "masked_nll");
                for (i, loss) in losses.iter().enumerate() {
                    println!("{:<8} {:>14.6}", i + 1, loss);
                }
                println!("mean: {mean:.6} over {} samples", losses.len());
                Ok(0)
            }
        },
    }
}
