//! `rpm`: build per-user factor models and reasoning memories from
//! interaction history, run personalized inference, and evaluate.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rpm_core::domain::RetrievalStrategy;
use rpm_pipeline::dataset::load_dataset;
use rpm_pipeline::gateway::LlmGateway;
use rpm_pipeline::harness::{
    build_user_artifacts, load_user_artifacts, run_experiment, summarize_runs, MetricReport,
    RunConfig,
};
use rpm_pipeline::inference::{build_memory_index, InferenceEngine};

#[derive(Parser)]
#[command(
    name = "rpm",
    version,
    about = "Reasoning-level personalization pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the run configuration (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build Stage 1 factor sets for users in the dataset.
    BuildFactors {
        #[command(flatten)]
        config: ConfigArg,
        /// Restrict the build to these user ids.
        #[arg(long = "user")]
        users: Vec<String>,
    },
    /// Build Stage 2 reasoning memories (includes Stage 1).
    BuildMemory {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "user")]
        users: Vec<String>,
    },
    /// Personalize one target query for one user.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        user: String,
        /// File holding the raw target query text.
        #[arg(long)]
        query_file: PathBuf,
        /// Override the configured retrieval strategy.
        #[arg(long)]
        retriever: Option<String>,
        /// Override the configured number of retrieved examples.
        #[arg(long)]
        k: Option<usize>,
        /// Disable target reasoning generation (ablation mode).
        #[arg(long)]
        no_target_reasoning: bool,
        /// Write the prediction record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full evaluation over the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Rebuild Stage 1/2 artifacts before evaluating.
        #[arg(long)]
        build: bool,
        /// Repeat the evaluation with varied seeds and report mean/std.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        /// Write the metric report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretty-print a saved metric report.
    Report {
        /// Path to a metric report JSON produced by `eval`.
        #[arg(long)]
        report: PathBuf,
    },
}

fn print_report(report: &MetricReport) {
    println!("task: {}", report.task_id);
    println!(
        "items: {} scored of {} total ({} imputed answers)",
        report.scored_items, report.total_items, report.imputed_answers
    );
    for (metric, value) in &report.metrics {
        println!("  {metric}: {value:.4}");
    }
    println!(
        "ledger: {} calls, {} prompt tokens, {} completion tokens, ${:.4}",
        report.ledger.calls,
        report.ledger.prompt_tokens,
        report.ledger.completion_tokens,
        report.ledger.estimated_cost
    );
    println!(
        "cost split: preprocessing ${:.4} ({} calls), inference ${:.4} ({} calls)",
        report.cost_split.preprocessing.estimated_cost,
        report.cost_split.preprocessing.calls,
        report.cost_split.inference.estimated_cost,
        report.cost_split.inference.calls
    );
    println!("per-user:");
    for user in &report.per_user {
        let metrics = user
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!(
            "  {}: {} items, {metrics}, ${:.4}, {} ms",
            user.user_id, user.items, user.estimated_cost, user.wall_time_ms
        );
    }
    if !report.flags.is_empty() {
        println!("flags:");
        for flag in &report.flags {
            println!("  {flag}");
        }
    }
}

async fn cmd_build(config_path: &Path, users: &[String], with_memory: bool) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let task = config.task()?;
    let templates = config.templates()?;
    let gateway = LlmGateway::new(config.backend.clone());
    let mut split = load_dataset(&task, &config.dataset_path, &config.dataset)?;
    if !users.is_empty() {
        split.users.retain(|u| users.contains(&u.train.user_id));
    } else if let Some(selected) = &config.users {
        split.users.retain(|u| selected.contains(&u.train.user_id));
    }
    if split.users.is_empty() {
        bail!("no matching users in {}", config.dataset_path.display());
    }
    for user_split in &split.users {
        let state =
            build_user_artifacts(&config, &gateway, &templates, &task, &user_split.train).await?;
        let coverage = state.stage_one.factor_set.coverage_fraction;
        println!(
            "built {}: {} factors, {:.1}% feature coverage{}",
            user_split.train.user_id,
            state.stage_one.factor_set.factors.len(),
            coverage * 100.0,
            if with_memory {
                format!(", {} memory examples", state.memory.len())
            } else {
                String::new()
            }
        );
    }
    let totals = gateway.totals();
    println!(
        "done: {} calls, ${:.4} estimated",
        totals.calls, totals.estimated_cost
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
async fn cmd_infer(
    config_path: &Path,
    user: &str,
    query_file: &Path,
    retriever: Option<String>,
    k: Option<usize>,
    no_target_reasoning: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let task = config.task()?;
    let templates = config.templates()?;
    let gateway = LlmGateway::new(config.backend.clone());
    let mut retrieval = config.retrieval.clone();
    if let Some(strategy) = retriever {
        retrieval.strategy = strategy
            .parse::<RetrievalStrategy>()
            .map_err(|e| anyhow::anyhow!(e))?;
    }
    if let Some(k) = k {
        retrieval.k = k;
    }
    let target_query = std::fs::read_to_string(query_file)
        .with_context(|| format!("reading {}", query_file.display()))?
        .trim()
        .to_string();
    if target_query.is_empty() {
        bail!("query file {} is empty", query_file.display());
    }

    let state = load_user_artifacts(&config, user)
        .with_context(|| format!("artifacts for user {user} not found; run build-memory first"))?;
    let index = build_memory_index(
        &gateway,
        &state.memory,
        retrieval.strategy,
        Some(&config.memory_dir()),
    )
    .await?;
    let engine = InferenceEngine::new(&gateway, &templates, &task);
    let record = engine
        .personalize(
            &state,
            &index,
            &target_query,
            &retrieval,
            !no_target_reasoning,
            config.pas.rng_seed,
        )
        .await?;
    let json = serde_json::to_string_pretty(&record)?;
    match out {
        Some(path) => {
            std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

async fn cmd_eval(config_path: &Path, build: bool, runs: u32, out: Option<PathBuf>) -> Result<()> {
    let base = RunConfig::load(config_path)?;
    let mut reports = Vec::new();
    for run_index in 0..runs.max(1) {
        let mut config = base.clone();
        config.pas.rng_seed = base.pas.rng_seed.wrapping_add(run_index as u64);
        let gateway = LlmGateway::new(config.backend.clone());
        // Artifacts are rebuilt only on the first pass.
        let report = run_experiment(&config, &gateway, build && run_index == 0).await?;
        print_report(&report);
        reports.push(report);
    }
    if reports.len() > 1 {
        let summary = summarize_runs(&reports);
        println!("over {} runs:", summary.runs);
        for (metric, mean) in &summary.mean {
            println!("  {metric}: {:.4} ± {:.4}", mean, summary.std[metric]);
        }
    }
    if let Some(path) = out {
        let json = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])?
        } else {
            serde_json::to_string_pretty(&serde_json::json!({
                "runs": reports,
                "summary": summarize_runs(&reports),
            }))?
        };
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_report(report_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(report_path)
        .with_context(|| format!("reading {}", report_path.display()))?;
    let report: MetricReport =
        serde_json::from_str(&text).with_context(|| "report file is not a metric report")?;
    print_report(&report);
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::BuildFactors { config, users } => cmd_build(&config.config, &users, false).await,
        Command::BuildMemory { config, users } => cmd_build(&config.config, &users, true).await,
        Command::Infer {
            config,
            user,
            query_file,
            retriever,
            k,
            no_target_reasoning,
            out,
        } => {
            cmd_infer(
                &config.config,
                &user,
                &query_file,
                retriever,
                k,
                no_target_reasoning,
                out,
            )
            .await
        }
        Command::Eval {
            config,
            build,
            runs,
            out,
        } => cmd_eval(&config.config, build, runs, out).await,
        Command::Report { report } => cmd_report(&report),
    }
}
