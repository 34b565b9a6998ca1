//! Shared fixtures for the integration and acceptance targets: a
//! scripted survey backend, a synthetic survey dataset and its run
//! configuration.
#![allow(dead_code)]

use std::path::Path;

use rpm_core::domain::{PasConfig, RetrievalConfig};
use rpm_pipeline::dataset::DatasetOptions;
use rpm_pipeline::gateway::{BackendConfig, GatewayMode};
use rpm_pipeline::harness::RunConfig;
use rpm_pipeline::testing::ScriptedTransport;

pub fn labels_json(labels: &[String]) -> String {
    serde_json::json!({ "factors": labels }).to_string()
}

pub fn filler_labels(prefix: &str, from: usize, to: usize) -> Vec<String> {
    (from..to).map(|i| format!("{prefix}{i:02}")).collect()
}

/// Scripted backend answering every stage of a survey-task run.
pub fn survey_transport() -> ScriptedTransport {
    let transport = ScriptedTransport::new(12);
    transport.push_rule(
        &["Extract all relevant features"],
        &serde_json::json!({
            "features": [
                {"feature_name": "Civic values", "context": "what the group prioritizes", "factor": "Civic"},
                {"feature_name": "Policy stance", "context": "the position implied by the options", "factor": "Civic"}
            ]
        })
        .to_string(),
    );
    let mut labels = vec!["Civic".to_string()];
    labels.extend(filler_labels("Filler", 1, 16));
    transport.push_rule(&["identify 16 meaningful factors"], &labels_json(&labels));
    transport.push_rule(&["Feature: "], r#"{"assignments":"0"}"#);
    transport.push_rule(
        &["generate a logical personalized reasoning"],
        &serde_json::json!({"reasoning": "the group leans consistently toward the same options"})
            .to_string(),
    );
    transport.push_rule(
        &["Exemplars:"],
        &serde_json::json!({"reasoning": "pattern match over the exemplars", "predicted_answer": "A"})
            .to_string(),
    );
    transport
}

/// 40 questions x 3 groups, every top option above the 0.8 threshold.
pub fn write_survey_dataset(path: &Path) {
    let groups = ["GroupA", "GroupB", "GroupC"];
    let items: Vec<serde_json::Value> = (0..40)
        .map(|i| {
            let options: Vec<String> = (0..4).map(|o| format!("option {o} of q{i}")).collect();
            let mut selections = serde_json::Map::new();
            for (g, group) in groups.iter().enumerate() {
                let top = (i + g) % 4;
                let probs: Vec<f64> = (0..4).map(|o| if o == top { 0.88 } else { 0.04 }).collect();
                selections.insert(group.to_string(), serde_json::json!(probs));
            }
            serde_json::json!({
                "question": format!("Survey question {i}: which option does the group favour?"),
                "options": options,
                "selections": selections,
            })
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&items).unwrap()).unwrap();
}

pub fn survey_config(
    dataset: &Path,
    artifacts: &Path,
    store: &Path,
    mode: GatewayMode,
) -> RunConfig {
    RunConfig {
        task_id: "goqa".into(),
        dataset_path: dataset.to_path_buf(),
        artifacts_dir: artifacts.to_path_buf(),
        backend: BackendConfig {
            mode,
            replay_dir: store.to_path_buf(),
            api_key_env: String::new(),
            retry_base_delay_ms: 1,
            prompt_cost_per_1k: 0.15,
            completion_cost_per_1k: 0.60,
            ..BackendConfig::default()
        },
        pas: PasConfig {
            rng_seed: 5,
            ..PasConfig::default()
        },
        retrieval: RetrievalConfig::default(),
        dataset: DatasetOptions::default(),
        include_target_reasoning: true,
        users: None,
        templates_dir: None,
    }
}
