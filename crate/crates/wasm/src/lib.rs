//! Browser demo bindings: three interactive operations over the core
//! crate, each taking and returning JSON strings so the page stays
//! framework-free.
//!
//! - `demo_retrieval`: builds a synthetic reasoning memory from a seed
//!   and ranks it under all six retrieval strategies for an editable
//!   target.
//! - `demo_factor_stats`: computes per-factor statistics (propensity,
//!   coverage, influence, polarity) from an editable interaction table.
//! - `demo_greedy_selection`: runs the greedy max-coverage factor
//!   selection and returns the full pick trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

use rpm_core::domain::{
    Factor, FactorStats, Feature, FeatureRef, FeatureSet, InfluenceJudgment, Interaction,
    MemoryProvenance, PolarityLabel, ReasoningExample, ReasoningMemory, RetrievalConfig,
    RetrievalStrategy, UserHistory,
};
use rpm_core::embed::hash_embedding;
use rpm_core::factor::{
    compute_open_stats, compute_propensity, select_factors_with_cover, AssignmentMatrix,
};
use rpm_core::retrieval::{retrieve, MemoryIndex, TargetQuery};

fn err_json(message: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": message.to_string() }).to_string()
}

// ---------------------------------------------------------------------------
// Retrieval playground
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RetrievalInput {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_memory_size")]
    memory_size: usize,
    #[serde(default = "default_dim")]
    dim: usize,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_multiplier")]
    pool_multiplier: usize,
    /// One "name: context" line per target feature.
    target_features: Vec<String>,
    target_query: String,
}

fn default_memory_size() -> usize {
    12
}
fn default_dim() -> usize {
    16
}
fn default_k() -> usize {
    3
}
fn default_multiplier() -> usize {
    3
}

#[derive(Serialize)]
struct MemoryRow {
    index: usize,
    query: String,
    features: String,
    factors: Vec<String>,
}

#[derive(Serialize)]
struct RankedRow {
    index: usize,
    score: f64,
}

#[derive(Serialize)]
struct RetrievalOutput {
    memory: Vec<MemoryRow>,
    strategies: BTreeMap<String, Vec<RankedRow>>,
    cosine_evaluations: BTreeMap<String, usize>,
}

const TOPICS: [&str; 6] = [
    "privacy",
    "efficiency",
    "novelty",
    "evaluation",
    "theory",
    "systems",
];

fn synthetic_memory(seed: u64, size: usize, dim: usize) -> ReasoningMemory {
    // Small deterministic generator; xorshift keeps the demo free of
    // extra dependencies.
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    let mut next = move |bound: usize| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state as usize) % bound.max(1)
    };
    let examples = (0..size)
        .map(|i| {
            let topic_a = TOPICS[next(TOPICS.len())];
            let topic_b = TOPICS[next(TOPICS.len())];
            let features: Vec<Feature> = (0..1 + next(3))
                .map(|j| {
                    let topic = if j % 2 == 0 { topic_a } else { topic_b };
                    let mut f = Feature::new(
                        format!("{topic} focus"),
                        format!("how {topic} shapes the answer"),
                    );
                    f.factor_id = Some(topic.to_string());
                    f
                })
                .collect();
            let feature_set = FeatureSet::new(Some(i), features);
            let embedding = hash_embedding(&feature_set.concatenated_text(), dim);
            ReasoningExample {
                query: format!("past query {i} about {topic_a} and {topic_b}"),
                features: feature_set,
                reasoning: format!("the user weighed {topic_a} first"),
                response: format!("answer {i}"),
                embedding: Some(embedding),
            }
        })
        .collect();
    ReasoningMemory {
        user_id: "demo".into(),
        examples,
        provenance: MemoryProvenance::default(),
    }
}

fn run_retrieval(input: &str) -> Result<RetrievalOutput, String> {
    let input: RetrievalInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    if input.memory_size == 0 || input.memory_size > 500 {
        return Err("memory_size must be in 1..=500".to_string());
    }
    let dim = input.dim.clamp(4, 256);
    let memory = synthetic_memory(input.seed, input.memory_size, dim);
    let per_feature: Vec<Vec<Vec<f64>>> = memory
        .examples
        .iter()
        .map(|e| {
            e.features
                .feature_texts()
                .iter()
                .map(|t| hash_embedding(t, dim))
                .collect()
        })
        .collect();
    let query_embeddings: Vec<Vec<f64>> = memory
        .examples
        .iter()
        .map(|e| hash_embedding(&e.query, dim))
        .collect();
    let index = MemoryIndex::build(&memory)
        .map_err(|e| e.to_string())?
        .with_feature_embeddings(per_feature)
        .with_query_embeddings(query_embeddings);

    let target_concat = if input.target_features.is_empty() {
        rpm_core::domain::EMPTY_FEATURES_SENTINEL.to_string()
    } else {
        input.target_features.join("; ")
    };
    let target_factors = input
        .target_features
        .iter()
        .filter_map(|line| line.split(':').next())
        .map(|name| name.trim().trim_end_matches(" focus").to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let target = TargetQuery {
        query_text: input.target_query.clone(),
        sample_embedding: Some(hash_embedding(&target_concat, dim)),
        query_embedding: Some(hash_embedding(&input.target_query, dim)),
        feature_embeddings: Some(
            input
                .target_features
                .iter()
                .map(|t| hash_embedding(t, dim))
                .collect(),
        ),
        factor_ids: target_factors,
    };

    let mut strategies = BTreeMap::new();
    let mut cosine_evaluations = BTreeMap::new();
    for strategy in [
        RetrievalStrategy::Random,
        RetrievalStrategy::Bm25,
        RetrievalStrategy::QueryCosine,
        RetrievalStrategy::FeatureCosine,
        RetrievalStrategy::FeatureLevel,
        RetrievalStrategy::TwoStage,
    ] {
        let config = RetrievalConfig {
            strategy,
            k: input.k,
            two_stage_pool_multiplier: input.pool_multiplier,
        };
        let outcome = retrieve(&index, &config, &target, input.seed).map_err(|e| e.to_string())?;
        let name = serde_json::to_value(strategy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| format!("{strategy:?}"));
        cosine_evaluations.insert(name.clone(), outcome.cosine_evaluations);
        strategies.insert(
            name,
            outcome
                .results
                .into_iter()
                .map(|s| RankedRow {
                    index: s.index,
                    score: s.score,
                })
                .collect(),
        );
    }

    Ok(RetrievalOutput {
        memory: memory
            .examples
            .iter()
            .enumerate()
            .map(|(index, e)| MemoryRow {
                index,
                query: e.query.clone(),
                features: e.features.concatenated_text(),
                factors: e.features.factor_ids().into_iter().collect(),
            })
            .collect(),
        strategies,
        cosine_evaluations,
    })
}

/// Ranks a synthetic memory under every retrieval strategy.
#[wasm_bindgen]
pub fn demo_retrieval(input: &str) -> String {
    match run_retrieval(input) {
        Ok(output) => serde_json::to_string(&output).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

// ---------------------------------------------------------------------------
// Factor statistics explorer
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct StatsFeatureInput {
    factor: String,
    /// "pos", "neu", "neg", or "no" (not influenced).
    #[serde(default)]
    influence: Option<String>,
}

#[derive(Deserialize)]
struct StatsInteractionInput {
    response: String,
    features: Vec<StatsFeatureInput>,
}

#[derive(Deserialize)]
struct StatsInput {
    interactions: Vec<StatsInteractionInput>,
    #[serde(default)]
    class_space: Option<Vec<String>>,
}

#[derive(Serialize)]
struct FactorStatsRow {
    label: String,
    coverage: usize,
    influence: usize,
    influence_rate: Option<f64>,
    polarity: Option<BTreeMap<String, f64>>,
    propensity: Option<BTreeMap<String, f64>>,
}

#[derive(Serialize)]
struct StatsOutput {
    history_length: usize,
    factors: Vec<FactorStatsRow>,
}

fn run_factor_stats(input: &str) -> Result<StatsOutput, String> {
    let input: StatsInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    if input.interactions.is_empty() {
        return Err("at least one interaction is required".to_string());
    }
    let history = UserHistory {
        user_id: "demo".into(),
        interactions: input
            .interactions
            .iter()
            .enumerate()
            .map(|(i, it)| Interaction {
                query: format!("interaction {i}"),
                response: it.response.clone(),
                timestamp: i as i64,
            })
            .collect(),
    };
    let class_space: Vec<String> = input.class_space.unwrap_or_else(|| {
        let mut classes: Vec<String> = input
            .interactions
            .iter()
            .map(|it| it.response.clone())
            .collect();
        classes.sort();
        classes.dedup();
        classes
    });

    let mut feature_sets = Vec::new();
    let mut judgments: Vec<Vec<InfluenceJudgment>> = Vec::new();
    let mut members: BTreeMap<String, Vec<FeatureRef>> = BTreeMap::new();
    for (i, interaction) in input.interactions.iter().enumerate() {
        let mut features = Vec::new();
        let mut row = Vec::new();
        for (j, feature) in interaction.features.iter().enumerate() {
            let mut f = Feature::new(format!("feature {i}.{j}"), "demo feature");
            f.factor_id = Some(feature.factor.clone());
            features.push(f);
            members
                .entry(feature.factor.clone())
                .or_default()
                .push(FeatureRef::new(i, j));
            let judgment = match feature.influence.as_deref() {
                Some("pos") => InfluenceJudgment::influenced(PolarityLabel::Pos),
                Some("neu") => InfluenceJudgment::influenced(PolarityLabel::Neu),
                Some("neg") => InfluenceJudgment::influenced(PolarityLabel::Neg),
                Some("no") | None => InfluenceJudgment::not_influenced(),
                Some(other) => return Err(format!("unknown influence `{other}`")),
            };
            row.push(judgment);
        }
        feature_sets.push(FeatureSet::new(Some(i), features));
        judgments.push(row);
    }

    let mut rows = Vec::new();
    for (label, refs) in members {
        let factor = Factor {
            factor_id: label.clone(),
            label: label.clone(),
            member_feature_refs: refs,
            stats: FactorStats::empty_open_ended(),
        };
        let open =
            compute_open_stats(&feature_sets, &judgments, &factor).map_err(|e| e.to_string())?;
        let propensity = compute_propensity(&history, &feature_sets, &factor, &class_space)
            .map_err(|e| e.to_string())?;
        rows.push(FactorStatsRow {
            label,
            coverage: open.coverage,
            influence: open.influence,
            influence_rate: (open.coverage > 0)
                .then(|| open.influence as f64 / open.coverage as f64),
            polarity: open.polarity.map(|p| {
                BTreeMap::from([
                    ("pos".to_string(), p.pos),
                    ("neu".to_string(), p.neu),
                    ("neg".to_string(), p.neg),
                ])
            }),
            propensity,
        });
    }
    Ok(StatsOutput {
        history_length: history.len(),
        factors: rows,
    })
}

/// Computes factor statistics from an editable interaction table.
#[wasm_bindgen]
pub fn demo_factor_stats(input: &str) -> String {
    match run_factor_stats(input) {
        Ok(output) => serde_json::to_string(&output).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

// ---------------------------------------------------------------------------
// Greedy selection trace
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct SelectionInput {
    candidates: Vec<String>,
    /// Per row, the candidate indices the row belongs to.
    memberships: Vec<Vec<usize>>,
    #[serde(default = "default_p_max")]
    p_max: usize,
}

fn default_p_max() -> usize {
    8
}

#[derive(Serialize)]
struct SelectionStepRow {
    candidate: String,
    candidate_index: usize,
    covered_rows: Vec<usize>,
    cumulative_coverage: f64,
}

#[derive(Serialize)]
struct SelectionOutput {
    steps: Vec<SelectionStepRow>,
    uncovered_rows: Vec<usize>,
    final_coverage: f64,
}

fn run_greedy_selection(input: &str) -> Result<SelectionOutput, String> {
    let input: SelectionInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let rows = input.memberships.len();
    if rows == 0 {
        return Err("at least one row is required".to_string());
    }
    let cols = input.candidates.len();
    let mut entries = vec![vec![false; cols]; rows];
    for (row, cells) in input.memberships.iter().enumerate() {
        for &col in cells {
            if col >= cols {
                return Err(format!("row {row} references candidate {col} of {cols}"));
            }
            entries[row][col] = true;
        }
    }
    let matrix = AssignmentMatrix {
        rows: (0..rows).map(|i| FeatureRef::new(i, 0)).collect(),
        candidates: input.candidates.clone(),
        entries,
    };
    let steps = select_factors_with_cover(&matrix, input.p_max);
    let mut covered = vec![false; rows];
    let mut out_steps = Vec::new();
    for step in steps {
        for &row in &step.covered_rows {
            covered[row] = true;
        }
        let cumulative = covered.iter().filter(|&&c| c).count() as f64 / rows as f64;
        out_steps.push(SelectionStepRow {
            candidate: input.candidates[step.candidate].clone(),
            candidate_index: step.candidate,
            covered_rows: step.covered_rows,
            cumulative_coverage: cumulative,
        });
    }
    let uncovered_rows: Vec<usize> = covered
        .iter()
        .enumerate()
        .filter(|(_, &c)| !c)
        .map(|(i, _)| i)
        .collect();
    let final_coverage = 1.0 - uncovered_rows.len() as f64 / rows as f64;
    Ok(SelectionOutput {
        steps: out_steps,
        uncovered_rows,
        final_coverage,
    })
}

/// Traces the greedy max-coverage candidate selection.
#[wasm_bindgen]
pub fn demo_greedy_selection(input: &str) -> String {
    match run_greedy_selection(input) {
        Ok(output) => serde_json::to_string(&output).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retrieval_demo_ranks_all_strategies() {
        let input = serde_json::json!({
            "seed": 7,
            "memory_size": 10,
            "k": 3,
            "target_features": ["privacy focus: how privacy shapes the answer"],
            "target_query": "a question about privacy",
        })
        .to_string();
        let output: serde_json::Value = serde_json::from_str(&demo_retrieval(&input)).unwrap();
        assert!(output.get("error").is_none(), "{output}");
        let strategies = output["strategies"].as_object().unwrap();
        assert_eq!(strategies.len(), 6);
        for (name, ranked) in strategies {
            assert_eq!(ranked.as_array().unwrap().len(), 3, "{name}");
        }
        assert_eq!(output["memory"].as_array().unwrap().len(), 10);
        // Same input twice is identical.
        assert_eq!(demo_retrieval(&input), demo_retrieval(&input));
    }

    #[test]
    fn factor_stats_demo_matches_hand_counts() {
        let input = serde_json::json!({
            "interactions": [
                {"response": "5", "features": [
                    {"factor": "Quality", "influence": "pos"},
                    {"factor": "Price", "influence": "neg"}
                ]},
                {"response": "5", "features": [{"factor": "Quality", "influence": "pos"}]},
                {"response": "4", "features": [{"factor": "Quality", "influence": "no"}]},
                {"response": "2", "features": [{"factor": "Price", "influence": "neg"}]}
            ]
        })
        .to_string();
        let output: serde_json::Value = serde_json::from_str(&demo_factor_stats(&input)).unwrap();
        assert!(output.get("error").is_none(), "{output}");
        let factors = output["factors"].as_array().unwrap();
        let quality = factors.iter().find(|f| f["label"] == "Quality").unwrap();
        assert_eq!(quality["coverage"], 3);
        assert_eq!(quality["influence"], 2);
        assert!((quality["propensity"]["5"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-9);
        let price = factors.iter().find(|f| f["label"] == "Price").unwrap();
        assert_eq!(price["coverage"], 2);
        assert_eq!(price["polarity"]["neg"].as_f64().unwrap(), 1.0);
    }

    #[test]
    fn greedy_demo_traces_picks() {
        let input = serde_json::json!({
            "candidates": ["A", "B", "C"],
            "memberships": [[0], [0], [0, 1], [1], [2]],
            "p_max": 2,
        })
        .to_string();
        let output: serde_json::Value =
            serde_json::from_str(&demo_greedy_selection(&input)).unwrap();
        assert!(output.get("error").is_none(), "{output}");
        let steps = output["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0]["candidate"], "A");
        assert_eq!(steps[1]["candidate"], "B");
        assert_eq!(output["uncovered_rows"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn malformed_input_reports_an_error() {
        let output: serde_json::Value = serde_json::from_str(&demo_retrieval("not json")).unwrap();
        assert!(output["error"].as_str().is_some());
    }
}
