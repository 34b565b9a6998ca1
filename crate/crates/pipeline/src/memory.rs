//! Stage 2: personalized reasoning construction and the on-disk memory.
//!
//! For every history interaction the backend writes a reasoning path
//! that connects the interaction's features and the user's factor
//! statistics to the observed response. The prompt carries the gold
//! response but instructs the model not to quote it; a verbatim
//! occurrence is flagged in the build report, not fatal. Each example
//! is stored with the embedding of its concatenated feature texts.
//!
//! Memory files are immutable snapshots: `memory/<user_id>.jsonl` holds
//! one JSON example per line, `memory/<user_id>.meta.json` the backend
//! provenance. A rebuild moves the previous snapshot to a versioned
//! name instead of appending.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rpm_core::domain::{
    FactorSet, FeatureSet, Interaction, MemoryProvenance, ReasoningExample, ReasoningMemory,
    TaskProfile, UserHistory,
};
use rpm_core::prompt::{parse_reasoning, TemplateId, TemplateStore};

use crate::error::PipelineError;
use crate::factors::StageOne;
use crate::gateway::{purpose, LlmGateway};
use crate::render;

/// Non-fatal observations from a memory build.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuildReport {
    /// Interactions whose reasoning contains the gold response verbatim.
    pub leakage_flagged: Vec<usize>,
}

pub struct MemoryBuilder<'a> {
    pub gateway: &'a LlmGateway,
    pub templates: &'a TemplateStore,
    pub task: &'a TaskProfile,
}

impl<'a> MemoryBuilder<'a> {
    pub fn new(
        gateway: &'a LlmGateway,
        templates: &'a TemplateStore,
        task: &'a TaskProfile,
    ) -> Self {
        Self {
            gateway,
            templates,
            task,
        }
    }

    /// Generates the reasoning path for one interaction.
    pub async fn construct_reasoning(
        &self,
        interaction: &Interaction,
        features: &FeatureSet,
        factors: &FactorSet,
        ordinal: usize,
    ) -> Result<String, PipelineError> {
        let bindings = BTreeMap::from([
            (self.task.input_key(), interaction.query.clone()),
            (
                "features",
                render::features_binding(features, Some(factors)),
            ),
            ("factors", render::factor_block(factors)),
            (self.task.output_key(), interaction.response.clone()),
        ]);
        let prompt = self.templates.render(
            &self.task.task_id,
            TemplateId::ReasoningConstruction,
            &bindings,
        )?;
        let (completion, _) = self
            .gateway
            .chat_complete(&prompt, purpose::REASONING_CONSTRUCTION)
            .await
            .map_err(|e| PipelineError::gateway("reasoning_construction", Some(ordinal), e))?;
        parse_reasoning(&completion)
            .map_err(|e| PipelineError::parse("reasoning_construction", Some(ordinal), e))
    }

    /// Builds the full reasoning memory: one example per interaction in
    /// history order, each with an eagerly computed feature embedding.
    pub async fn build_memory(
        &self,
        history: &UserHistory,
        stage_one: &StageOne,
        provenance: MemoryProvenance,
    ) -> Result<(ReasoningMemory, MemoryBuildReport), PipelineError> {
        if stage_one.feature_sets.len() != history.len() {
            return Err(PipelineError::Data(format!(
                "user {}: {} feature sets for {} interactions",
                history.user_id,
                stage_one.feature_sets.len(),
                history.len()
            )));
        }
        let reasoning_futures: Vec<_> = history
            .interactions
            .iter()
            .enumerate()
            .map(|(i, interaction)| {
                self.construct_reasoning(
                    interaction,
                    &stage_one.feature_sets[i],
                    &stage_one.factor_set,
                    i,
                )
            })
            .collect();
        let results = futures::future::join_all(reasoning_futures).await;
        let mut failures = Vec::new();
        let mut reasonings = Vec::with_capacity(results.len());
        for (i, result) in results.into_iter().enumerate() {
            match result {
                Ok(reasoning) => reasonings.push(reasoning),
                Err(e) => failures.push(format!("interaction {i}: {e}")),
            }
        }
        if !failures.is_empty() {
            return Err(PipelineError::Data(format!(
                "memory build for {} failed on {} of {} interactions: {}",
                history.user_id,
                failures.len(),
                history.len(),
                failures.join("; ")
            )));
        }

        let texts: Vec<String> = stage_one
            .feature_sets
            .iter()
            .map(FeatureSet::concatenated_text)
            .collect();
        let embeddings = self
            .gateway
            .embed(&texts, purpose::MEMORY_EMBEDDING)
            .await
            .map_err(|e| PipelineError::gateway("memory_embedding", None, e))?;

        let mut report = MemoryBuildReport::default();
        let examples: Vec<ReasoningExample> = history
            .interactions
            .iter()
            .zip(reasonings)
            .zip(embeddings.vectors)
            .enumerate()
            .map(|(i, ((interaction, reasoning), embedding))| {
                let gold = interaction.response.trim();
                if !gold.is_empty() && reasoning.contains(gold) {
                    report.leakage_flagged.push(i);
                }
                ReasoningExample {
                    query: interaction.query.clone(),
                    features: stage_one.feature_sets[i].clone(),
                    reasoning,
                    response: interaction.response.clone(),
                    embedding: Some(embedding),
                }
            })
            .collect();

        Ok((
            ReasoningMemory {
                user_id: history.user_id.clone(),
                examples,
                provenance,
            },
            report,
        ))
    }
}

fn memory_path(dir: &Path, user_id: &str) -> PathBuf {
    dir.join(format!("{user_id}.jsonl"))
}

fn meta_path(dir: &Path, user_id: &str) -> PathBuf {
    dir.join(format!("{user_id}.meta.json"))
}

#[derive(Debug, Serialize, Deserialize)]
struct MemoryMeta {
    user_id: String,
    example_count: usize,
    provenance: MemoryProvenance,
}

/// Rotates an existing snapshot to `<user>.v<n>.jsonl`.
fn rotate_existing(dir: &Path, user_id: &str) -> Result<(), PipelineError> {
    let current = memory_path(dir, user_id);
    if !current.exists() {
        return Ok(());
    }
    let mut version = 1;
    loop {
        let candidate = dir.join(format!("{user_id}.v{version}.jsonl"));
        if !candidate.exists() {
            std::fs::rename(&current, &candidate)
                .map_err(|e| PipelineError::io(candidate.display(), e))?;
            return Ok(());
        }
        version += 1;
    }
}

/// Writes the memory as one JSON example per line plus a provenance
/// sidecar, versioning away any previous snapshot.
pub fn save_memory(dir: &Path, memory: &ReasoningMemory) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir.display(), e))?;
    rotate_existing(dir, &memory.user_id)?;
    let path = memory_path(dir, &memory.user_id);
    let mut lines = String::new();
    for example in &memory.examples {
        let line =
            serde_json::to_string(example).map_err(|e| PipelineError::io(path.display(), e))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    std::fs::write(&path, lines).map_err(|e| PipelineError::io(path.display(), e))?;
    let meta = MemoryMeta {
        user_id: memory.user_id.clone(),
        example_count: memory.examples.len(),
        provenance: memory.provenance.clone(),
    };
    let meta_file = meta_path(dir, &memory.user_id);
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| PipelineError::io(meta_file.display(), e))?;
    std::fs::write(&meta_file, meta_json).map_err(|e| PipelineError::io(meta_file.display(), e))?;
    Ok(path)
}

/// Loads a memory snapshot; a corrupt line fails with its 1-based line
/// number. A missing meta sidecar is accepted (provenance unknown).
pub fn load_memory(dir: &Path, user_id: &str) -> Result<ReasoningMemory, PipelineError> {
    let path = memory_path(dir, user_id);
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(path.display(), e))?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let example: ReasoningExample = serde_json::from_str(line)
            .map_err(|e| PipelineError::io(path.display(), format!("line {}: {e}", i + 1)))?;
        examples.push(example);
    }
    let provenance = match std::fs::read_to_string(meta_path(dir, user_id)) {
        Ok(meta_json) => {
            let meta: MemoryMeta = serde_json::from_str(&meta_json)
                .map_err(|e| PipelineError::io(meta_path(dir, user_id).display(), e))?;
            meta.provenance
        }
        Err(_) => MemoryProvenance::default(),
    };
    Ok(ReasoningMemory {
        user_id: user_id.to_string(),
        examples,
        provenance,
    })
}
