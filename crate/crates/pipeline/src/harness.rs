//! Experiment orchestration: run configuration, per-user artifact
//! builds, scoring over the chronological test split, and the metric /
//! cost report.
//!
//! Unparseable answers on discrete tasks are imputed with the user's
//! majority training label and flagged; dropping them would inflate
//! the scores. Metrics are micro-averaged over all test items; the
//! per-user breakdown is included so macro views stay recoverable.
//! Reported wall time is the sum of ledger latencies, which keeps
//! replay runs byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rpm_core::domain::{
    MemoryProvenance, OutputMode, PasConfig, PredictionRecord, RetrievalConfig, TaskProfile,
    UserHistory,
};
use rpm_core::metrics;
use rpm_core::prompt::TemplateStore;

use crate::dataset::{builtin_task, load_dataset, DatasetOptions, UserSplit};
use crate::error::PipelineError;
use crate::factors::{load_stage_one, save_stage_one, FactorBuilder, StageOne};
use crate::gateway::{ledger_totals, purpose, BackendConfig, LedgerTotals, LlmGateway};
use crate::inference::{build_memory_index, InferenceEngine, UserState};
use crate::memory::{load_memory, save_memory, MemoryBuilder};

fn default_true() -> bool {
    true
}

/// One experiment: task, data, backend and stage parameters. Loadable
/// from TOML or JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task_id: String,
    pub dataset_path: PathBuf,
    /// Root for `factors/`, `memory/` and reports.
    pub artifacts_dir: PathBuf,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub pas: PasConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub dataset: DatasetOptions,
    /// Disable to reproduce the no-target-reasoning ablation.
    #[serde(default = "default_true")]
    pub include_target_reasoning: bool,
    /// When present, only these users run.
    #[serde(default)]
    pub users: Option<Vec<String>>,
    /// Optional directory of template overrides.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::io(path.display(), e))?;
        let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
        if is_toml {
            toml::from_str(&text).map_err(|e| PipelineError::io(path.display(), e))
        } else {
            serde_json::from_str(&text).map_err(|e| PipelineError::io(path.display(), e))
        }
    }

    pub fn task(&self) -> Result<TaskProfile, PipelineError> {
        builtin_task(&self.task_id)
            .ok_or_else(|| PipelineError::Data(format!("unknown task `{}`", self.task_id)))
    }

    pub fn templates(&self) -> Result<TemplateStore, PipelineError> {
        let mut store = TemplateStore::builtin();
        if let Some(dir) = &self.templates_dir {
            store.load_dir(dir)?;
        }
        Ok(store)
    }

    pub fn factors_dir(&self) -> PathBuf {
        self.artifacts_dir.join("factors")
    }

    pub fn memory_dir(&self) -> PathBuf {
        self.artifacts_dir.join("memory")
    }
}

/// Per-user slice of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub user_id: String,
    pub items: usize,
    pub scored_items: usize,
    pub imputed_answers: usize,
    pub metrics: BTreeMap<String, f64>,
    pub estimated_cost: f64,
    /// Sum of ledger latencies over this user's inference calls.
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostSplit {
    pub preprocessing: LedgerTotals,
    pub inference: LedgerTotals,
}

/// The experiment result: micro-averaged metrics, per-user breakdown,
/// ledger totals and the preprocessing/inference cost split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_id: String,
    pub metrics: BTreeMap<String, f64>,
    pub per_user: Vec<UserReport>,
    pub total_items: usize,
    pub scored_items: usize,
    pub imputed_answers: usize,
    pub ledger: LedgerTotals,
    pub cost_split: CostSplit,
    pub flags: Vec<String>,
}

/// Builds (or rebuilds) Stage 1 and Stage 2 artifacts for one user and
/// persists them under the configured artifact directories.
pub async fn build_user_artifacts(
    config: &RunConfig,
    gateway: &LlmGateway,
    templates: &TemplateStore,
    task: &TaskProfile,
    train: &UserHistory,
) -> Result<UserState, PipelineError> {
    let factor_builder = FactorBuilder::new(gateway, templates, task);
    let stage_one = factor_builder
        .build_user_factors(train, &config.pas)
        .await?;
    save_stage_one(&config.factors_dir(), &stage_one)?;

    let memory_builder = MemoryBuilder::new(gateway, templates, task);
    let provenance = MemoryProvenance {
        backbone_model_id: gateway.config().model_id.clone(),
        embed_model_id: gateway.config().embed_model_id.clone(),
        built_at: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let (memory, _report) = memory_builder
        .build_memory(train, &stage_one, provenance)
        .await?;
    save_memory(&config.memory_dir(), &memory)?;

    Ok(UserState { stage_one, memory })
}

/// Loads previously built artifacts for one user.
pub fn load_user_artifacts(config: &RunConfig, user_id: &str) -> Result<UserState, PipelineError> {
    let stage_one: StageOne = load_stage_one(&config.factors_dir(), user_id)?;
    let memory = load_memory(&config.memory_dir(), user_id)?;
    Ok(UserState { stage_one, memory })
}

fn majority_train_label(train: &UserHistory) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for interaction in &train.interactions {
        *counts.entry(interaction.response.as_str()).or_default() += 1;
    }
    // Ties break toward the lexicographically smallest label.
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
        .map(|(label, _)| label.to_string())
}

fn numeric_labels(values: &[String]) -> Result<Vec<f64>, PipelineError> {
    values
        .iter()
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| PipelineError::Data(format!("label `{v}` is not numeric")))
        })
        .collect()
}

fn compute_metrics(
    task: &TaskProfile,
    preds: &[String],
    golds: &[String],
) -> Result<BTreeMap<String, f64>, PipelineError> {
    let mut out = BTreeMap::new();
    if preds.is_empty() {
        return Ok(out);
    }
    for metric_id in &task.metric_ids {
        let value = match metric_id.as_str() {
            "accuracy" => {
                metrics::accuracy(preds, golds).map_err(|e| PipelineError::Data(e.to_string()))?
            }
            "macro_f1" => {
                let class_space = task.class_space.as_deref().unwrap_or(&[]);
                metrics::macro_f1(preds, golds, class_space)
                    .map_err(|e| PipelineError::Data(e.to_string()))?
            }
            "mae" => {
                let p = numeric_labels(preds)?;
                let g = numeric_labels(golds)?;
                metrics::mae(&p, &g).map_err(|e| PipelineError::Data(e.to_string()))?
            }
            "rmse" => {
                let p = numeric_labels(preds)?;
                let g = numeric_labels(golds)?;
                metrics::rmse(&p, &g).map_err(|e| PipelineError::Data(e.to_string()))?
            }
            "rouge1" => {
                let sum: f64 = preds
                    .iter()
                    .zip(golds)
                    .map(|(p, g)| metrics::rouge1(p, g))
                    .sum();
                sum / preds.len() as f64
            }
            "rougeL" => {
                let sum: f64 = preds
                    .iter()
                    .zip(golds)
                    .map(|(p, g)| metrics::rouge_l(p, g))
                    .sum();
                sum / preds.len() as f64
            }
            other => {
                return Err(PipelineError::Data(format!("unknown metric `{other}`")));
            }
        };
        out.insert(metric_id.clone(), value);
    }
    Ok(out)
}

fn item_seed(base: u64, user_index: usize, item_index: usize) -> u64 {
    base ^ (user_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (item_index as u64).wrapping_mul(0x85EB_CA6B)
}

/// Scored predictions of one user plus their audit records.
pub struct UserRun {
    pub user_id: String,
    pub preds: Vec<String>,
    pub golds: Vec<String>,
    pub records: Vec<PredictionRecord>,
    pub imputed: usize,
    pub failures: Vec<String>,
}

/// Personalizes every test item of one user.
pub async fn run_user(
    config: &RunConfig,
    gateway: &LlmGateway,
    templates: &TemplateStore,
    task: &TaskProfile,
    split: &UserSplit,
    state: &UserState,
    user_index: usize,
) -> Result<UserRun, PipelineError> {
    let engine = InferenceEngine::new(gateway, templates, task);
    let index = build_memory_index(
        gateway,
        &state.memory,
        config.retrieval.strategy,
        Some(&config.memory_dir()),
    )
    .await?;

    let mut run = UserRun {
        user_id: split.train.user_id.clone(),
        preds: Vec::new(),
        golds: Vec::new(),
        records: Vec::new(),
        imputed: 0,
        failures: Vec::new(),
    };
    let majority = majority_train_label(&split.train);
    for (item_index, item) in split.test.iter().enumerate() {
        let seed = item_seed(config.pas.rng_seed, user_index, item_index);
        let result = engine
            .personalize(
                state,
                &index,
                &item.query,
                &config.retrieval,
                config.include_target_reasoning,
                seed,
            )
            .await;
        match result {
            Ok(record) => {
                let pred = if record.answer_error && task.output_mode != OutputMode::FreeText {
                    run.imputed += 1;
                    match &majority {
                        Some(label) => label.clone(),
                        None => record.answer.clone(),
                    }
                } else {
                    record.answer.clone()
                };
                run.preds.push(pred);
                run.golds.push(item.response.clone());
                run.records.push(record);
            }
            Err(e) => {
                run.failures
                    .push(format!("user {} item {item_index}: {e}", run.user_id));
            }
        }
    }
    Ok(run)
}

/// Runs the full experiment over every user in the split.
///
/// With `build` set, Stage 1/2 artifacts are rebuilt; otherwise they
/// must already exist on disk.
pub async fn run_experiment(
    config: &RunConfig,
    gateway: &LlmGateway,
    build: bool,
) -> Result<MetricReport, PipelineError> {
    let task = config.task()?;
    let templates = config.templates()?;
    let mut split = load_dataset(&task, &config.dataset_path, &config.dataset)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    if let Some(users) = &config.users {
        split.users.retain(|u| users.contains(&u.train.user_id));
    }
    if split.users.is_empty() {
        return Err(PipelineError::Data("no users selected".to_string()));
    }

    let mut user_runs = Vec::new();
    let mut flags = Vec::new();
    for (user_index, user_split) in split.users.iter().enumerate() {
        let state = if build {
            build_user_artifacts(config, gateway, &templates, &task, &user_split.train).await?
        } else {
            load_user_artifacts(config, &user_split.train.user_id)?
        };
        let run = run_user(
            config, gateway, &templates, &task, user_split, &state, user_index,
        )
        .await?;
        flags.extend(run.failures.iter().cloned());
        user_runs.push(run);
    }
    // Aggregate in user-id order so shuffling the input leaves the
    // report unchanged.
    user_runs.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let mut per_user = Vec::new();
    let mut all_preds = Vec::new();
    let mut all_golds = Vec::new();
    let mut total_items = 0;
    let mut imputed_answers = 0;
    for run in &user_runs {
        let user_metrics = compute_metrics(&task, &run.preds, &run.golds)?;
        let entries: Vec<_> = run.records.iter().flat_map(|r| r.ledger.clone()).collect();
        let totals = ledger_totals(&entries);
        per_user.push(UserReport {
            user_id: run.user_id.clone(),
            items: run.preds.len() + run.failures.len(),
            scored_items: run.preds.len(),
            imputed_answers: run.imputed,
            metrics: user_metrics,
            estimated_cost: totals.estimated_cost,
            wall_time_ms: totals.latency_ms,
        });
        total_items += run.preds.len() + run.failures.len();
        imputed_answers += run.imputed;
        all_preds.extend(run.preds.iter().cloned());
        all_golds.extend(run.golds.iter().cloned());
    }
    per_user.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    flags.sort();

    let metrics = compute_metrics(&task, &all_preds, &all_golds)?;
    let ledger_entries = gateway.ledger();
    let ledger = ledger_totals(&ledger_entries);
    let preprocessing: Vec<_> = ledger_entries
        .iter()
        .filter(|e| purpose::PREPROCESSING.contains(&e.purpose.as_str()))
        .cloned()
        .collect();
    let inference: Vec<_> = ledger_entries
        .iter()
        .filter(|e| !purpose::PREPROCESSING.contains(&e.purpose.as_str()))
        .cloned()
        .collect();

    Ok(MetricReport {
        task_id: task.task_id.clone(),
        metrics,
        per_user,
        total_items,
        scored_items: all_preds.len(),
        imputed_answers,
        ledger,
        cost_split: CostSplit {
            preprocessing: ledger_totals(&preprocessing),
            inference: ledger_totals(&inference),
        },
        flags,
    })
}

/// Mean and standard deviation of each metric across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

pub fn summarize_runs(reports: &[MetricReport]) -> RunsSummary {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    if reports.is_empty() {
        return RunsSummary { runs: 0, mean, std };
    }
    let keys: Vec<String> = reports[0].metrics.keys().cloned().collect();
    for key in keys {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.metrics.get(&key).copied())
            .collect();
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
        mean.insert(key.clone(), m);
        std.insert(key, var.sqrt());
    }
    RunsSummary {
        runs: reports.len(),
        mean,
        std,
    }
}
