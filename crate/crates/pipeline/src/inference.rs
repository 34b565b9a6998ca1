//! Stage 3: reasoning-aligned generation.
//!
//! The target query goes through factor-aware feature extraction (each
//! feature names the best-matching existing factor or stays
//! unassigned), the configured retrieval strategy selects reasoning
//! examples from the user's memory, and one generation call produces
//! the reasoning path and the final answer. For tasks with a class
//! space the answer is normalized: exact match, then the first
//! word-boundary occurrence of a class label, then the first in-range
//! integer for numeric spaces. An answer that survives none of these is
//! recorded as an answer error and scored as incorrect, never dropped.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rpm_core::domain::{
    CallLedgerEntry, FactorSet, Feature, FeatureSet, PredictionRecord, ReasoningMemory,
    RetrievalConfig, RetrievalStrategy, TaskProfile,
};
use rpm_core::prompt::{parse_features, parse_generation, TemplateId, TemplateStore};
use rpm_core::retrieval::{retrieve, MemoryIndex, TargetQuery};

use crate::error::PipelineError;
use crate::factors::StageOne;
use crate::gateway::{purpose, LlmGateway};
use crate::render;

/// Factor-aware extraction result for a target query.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeatures {
    pub features: FeatureSet,
    /// Factor labels named by the model that do not exist in the
    /// user's factor set; the features stay unassigned.
    pub unknown_factor_labels: Vec<String>,
}

/// Generation output before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Empty when target reasoning is disabled.
    pub reasoning: String,
    pub answer: String,
    /// True when a discrete answer could not be normalized into the
    /// class space.
    pub answer_error: bool,
}

/// Stage 1 + Stage 2 artifacts of one user, loaded for inference.
#[derive(Debug, Clone)]
pub struct UserState {
    pub stage_one: StageOne,
    pub memory: ReasoningMemory,
}

/// Normalizes a model answer into the class space: trimmed
/// case-insensitive exact match; else the earliest word-boundary
/// occurrence of any class label (longest label on position ties); else
/// the first integer appearing in the answer when the class space is
/// numeric. Idempotent: a normalized answer normalizes to itself.
pub fn normalize_answer(answer: &str, class_space: &[String]) -> Option<String> {
    let trimmed = answer.trim();
    for class in class_space {
        if trimmed.eq_ignore_ascii_case(class.trim()) {
            return Some(class.clone());
        }
    }

    let haystack = answer.to_lowercase();
    let haystack_chars: Vec<char> = haystack.chars().collect();
    let boundary_ok = |byte_pos: usize, len: usize| {
        let char_pos = haystack[..byte_pos].chars().count();
        let end_char_pos = char_pos + haystack[byte_pos..byte_pos + len].chars().count();
        let before_ok = char_pos == 0 || !haystack_chars[char_pos - 1].is_alphanumeric();
        let after_ok =
            end_char_pos >= haystack_chars.len() || !haystack_chars[end_char_pos].is_alphanumeric();
        before_ok && after_ok
    };
    let mut best: Option<(usize, usize, &String)> = None; // (position, len, class)
    for class in class_space {
        let needle = class.trim().to_lowercase();
        if needle.is_empty() {
            continue;
        }
        for (pos, m) in haystack.match_indices(&needle) {
            if !boundary_ok(pos, m.len()) {
                continue;
            }
            let better = match best {
                None => true,
                Some((best_pos, best_len, _)) => {
                    pos < best_pos || (pos == best_pos && m.len() > best_len)
                }
            };
            if better {
                best = Some((pos, m.len(), class));
            }
            break;
        }
    }
    if let Some((_, _, class)) = best {
        return Some(class.clone());
    }

    let numeric_space: Option<BTreeMap<i64, &String>> = class_space
        .iter()
        .map(|c| c.trim().parse::<i64>().ok().map(|n| (n, c)))
        .collect();
    if let Some(numeric_space) = numeric_space {
        let mut digits = String::new();
        for c in answer.chars() {
            if c.is_ascii_digit() {
                digits.push(c);
            } else if !digits.is_empty() {
                if let Some(class) = digits
                    .parse::<i64>()
                    .ok()
                    .and_then(|n| numeric_space.get(&n))
                {
                    return Some((*class).clone());
                }
                digits.clear();
            }
        }
        if let Some(class) = digits
            .parse::<i64>()
            .ok()
            .and_then(|n| numeric_space.get(&n))
        {
            return Some((*class).clone());
        }
    }
    None
}

pub struct InferenceEngine<'a> {
    pub gateway: &'a LlmGateway,
    pub templates: &'a TemplateStore,
    pub task: &'a TaskProfile,
}

impl<'a> InferenceEngine<'a> {
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

    /// Factor-aware feature extraction for the target query.
    pub async fn extract_target_features(
        &self,
        target_query: &str,
        factors: &FactorSet,
        ledger: &mut Vec<CallLedgerEntry>,
    ) -> Result<TargetFeatures, PipelineError> {
        let labels: Vec<&str> = factors.factors.iter().map(|f| f.label.as_str()).collect();
        let factor_context = format!(
            "\nKnown user preference factors: {}.\nFor each feature, additionally include a \"factor\" field naming the single best-matching factor from this list, or \"unassigned\" if none fits.\n",
            if labels.is_empty() { "(none)".to_string() } else { labels.join(", ") },
        );
        let bindings = BTreeMap::from([
            (self.task.input_key(), target_query.to_string()),
            ("factor_context", factor_context),
        ]);
        let prompt =
            self.templates
                .render(&self.task.task_id, TemplateId::FeatureExtraction, &bindings)?;
        let (completion, entry) = self
            .gateway
            .chat_complete(&prompt, purpose::TARGET_FEATURE_EXTRACTION)
            .await
            .map_err(|e| PipelineError::gateway("target_feature_extraction", None, e))?;
        ledger.push(entry);
        let parsed = parse_features(&completion)
            .map_err(|e| PipelineError::parse("target_feature_extraction", None, e))?;

        let mut unknown = Vec::new();
        let features = parsed
            .into_iter()
            .map(|p| {
                let mut feature = Feature::new(p.name, p.context);
                if let Some(label) = p.factor_label {
                    if label.eq_ignore_ascii_case("unassigned") {
                        // explicit skip
                    } else if let Some(factor) = factors.factor_by_label(&label) {
                        feature.factor_id = Some(factor.factor_id.clone());
                    } else {
                        unknown.push(label);
                    }
                }
                feature
            })
            .collect();
        Ok(TargetFeatures {
            features: FeatureSet::new(None, features),
            unknown_factor_labels: unknown,
        })
    }

    /// Reasoning-example-augmented generation. `retrieved` arrives in
    /// descending score order and is rendered best-last.
    pub async fn generate(
        &self,
        target_query: &str,
        target_features: &FeatureSet,
        factors: &FactorSet,
        retrieved: &[&rpm_core::domain::ReasoningExample],
        include_reasoning: bool,
        ledger: &mut Vec<CallLedgerEntry>,
    ) -> Result<Generated, PipelineError> {
        let ascending: Vec<&rpm_core::domain::ReasoningExample> =
            retrieved.iter().rev().copied().collect();
        let mut bindings = BTreeMap::from([
            (
                "reasoning_examples",
                render::exemplar_block(&ascending, self.task),
            ),
            ("factors", render::factor_block(factors)),
            (self.task.input_key(), target_query.to_string()),
            (
                "features",
                render::features_binding(target_features, Some(factors)),
            ),
            (
                "response_schema",
                render::response_schema(self.task, include_reasoning),
            ),
        ]);
        if let Some(class_space) = &self.task.class_space {
            bindings.insert("class_space", class_space.join(", "));
        }
        let prompt = self.templates.render(
            &self.task.task_id,
            TemplateId::ReasoningAlignedGeneration,
            &bindings,
        )?;
        let (completion, entry) = self
            .gateway
            .chat_complete(&prompt, purpose::GENERATION)
            .await
            .map_err(|e| PipelineError::gateway("generation", None, e))?;
        ledger.push(entry);
        let (reasoning, raw_answer) =
            parse_generation(&completion, self.task.answer_key(), include_reasoning)
                .map_err(|e| PipelineError::parse("generation", None, e))?;

        let (answer, answer_error) = match &self.task.class_space {
            Some(class_space) if self.task.is_discrete() => {
                match normalize_answer(&raw_answer, class_space) {
                    Some(normalized) => (normalized, false),
                    None => (raw_answer, true),
                }
            }
            _ => (raw_answer, false),
        };
        Ok(Generated {
            reasoning: reasoning.unwrap_or_default(),
            answer,
            answer_error,
        })
    }

    /// Embeds the target-side inputs the strategy needs and assembles
    /// the retrieval target.
    async fn build_target(
        &self,
        target_query: &str,
        target_features: &FeatureSet,
        strategy: RetrievalStrategy,
        ledger: &mut Vec<CallLedgerEntry>,
    ) -> Result<TargetQuery, PipelineError> {
        let mut target = TargetQuery {
            query_text: target_query.to_string(),
            factor_ids: target_features.factor_ids(),
            ..TargetQuery::default()
        };
        let needs_sample = matches!(
            strategy,
            RetrievalStrategy::FeatureCosine
                | RetrievalStrategy::FeatureLevel
                | RetrievalStrategy::TwoStage
        );
        if needs_sample {
            let outcome = self
                .gateway
                .embed(
                    &[target_features.concatenated_text()],
                    purpose::TARGET_EMBEDDING,
                )
                .await
                .map_err(|e| PipelineError::gateway("target_embedding", None, e))?;
            ledger.extend(outcome.entries);
            target.sample_embedding = outcome.vectors.into_iter().next();
        }
        if strategy == RetrievalStrategy::FeatureLevel {
            let texts = target_features.feature_texts();
            if texts.is_empty() {
                target.feature_embeddings = Some(Vec::new());
            } else {
                let outcome = self
                    .gateway
                    .embed(&texts, purpose::TARGET_EMBEDDING)
                    .await
                    .map_err(|e| PipelineError::gateway("target_embedding", None, e))?;
                ledger.extend(outcome.entries);
                target.feature_embeddings = Some(outcome.vectors);
            }
        }
        if strategy == RetrievalStrategy::QueryCosine {
            let outcome = self
                .gateway
                .embed(&[target_query.to_string()], purpose::TARGET_EMBEDDING)
                .await
                .map_err(|e| PipelineError::gateway("target_embedding", None, e))?;
            ledger.extend(outcome.entries);
            target.query_embedding = outcome.vectors.into_iter().next();
        }
        Ok(target)
    }

    /// The full Stage 3 pass for one target query: factor-aware
    /// extraction, retrieval, generation, audit record.
    pub async fn personalize(
        &self,
        state: &UserState,
        index: &MemoryIndex,
        target_query: &str,
        retrieval: &RetrievalConfig,
        include_reasoning: bool,
        seed: u64,
    ) -> Result<PredictionRecord, PipelineError> {
        let mut ledger = Vec::new();
        let target_features = self
            .extract_target_features(target_query, &state.stage_one.factor_set, &mut ledger)
            .await?;
        let target = self
            .build_target(
                target_query,
                &target_features.features,
                retrieval.strategy,
                &mut ledger,
            )
            .await?;
        let outcome = retrieve(index, retrieval, &target, seed)?;
        let retrieved_examples: Vec<&rpm_core::domain::ReasoningExample> = outcome
            .results
            .iter()
            .map(|s| &state.memory.examples[s.index])
            .collect();
        let generated = self
            .generate(
                target_query,
                &target_features.features,
                &state.stage_one.factor_set,
                &retrieved_examples,
                include_reasoning,
                &mut ledger,
            )
            .await?;
        Ok(PredictionRecord {
            target_query: target_query.to_string(),
            target_features: target_features.features,
            retrieved: outcome.results,
            reasoning: generated.reasoning,
            answer: generated.answer,
            answer_error: generated.answer_error,
            ledger,
        })
    }
}

/// Cached per-memory embeddings for the retrieval variants that need
/// more than the stored sample embeddings.
#[derive(Debug, Default, Serialize, Deserialize)]
struct IndexCache {
    query_embeddings: Option<Vec<Vec<f64>>>,
    feature_embeddings: Option<Vec<Vec<Vec<f64>>>>,
}

/// Builds the retrieval index for a memory, computing and caching
/// raw-query or per-feature embeddings when the strategy requires them.
/// The cache lives next to the memory file as `<user_id>.cache.json`.
pub async fn build_memory_index(
    gateway: &LlmGateway,
    memory: &ReasoningMemory,
    strategy: RetrievalStrategy,
    cache_dir: Option<&Path>,
) -> Result<MemoryIndex, PipelineError> {
    let mut index = MemoryIndex::build(memory).map_err(PipelineError::from)?;
    let needs_query = strategy == RetrievalStrategy::QueryCosine;
    let needs_features = strategy == RetrievalStrategy::FeatureLevel;
    if !needs_query && !needs_features {
        return Ok(index);
    }

    let cache_path = cache_dir.map(|d| d.join(format!("{}.cache.json", memory.user_id)));
    let mut cache: IndexCache = match &cache_path {
        Some(path) if path.exists() => {
            let text =
                std::fs::read_to_string(path).map_err(|e| PipelineError::io(path.display(), e))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::io(path.display(), e))?
        }
        _ => IndexCache::default(),
    };

    if needs_query && cache.query_embeddings.as_ref().map(Vec::len) != Some(memory.len()) {
        let texts: Vec<String> = memory.examples.iter().map(|e| e.query.clone()).collect();
        let outcome = gateway
            .embed(&texts, purpose::MEMORY_EMBEDDING)
            .await
            .map_err(|e| PipelineError::gateway("memory_query_embedding", None, e))?;
        cache.query_embeddings = Some(outcome.vectors);
    }
    if needs_features && cache.feature_embeddings.as_ref().map(Vec::len) != Some(memory.len()) {
        let mut per_example = Vec::with_capacity(memory.len());
        for example in &memory.examples {
            let texts = example.features.feature_texts();
            if texts.is_empty() {
                per_example.push(Vec::new());
            } else {
                let outcome = gateway
                    .embed(&texts, purpose::MEMORY_EMBEDDING)
                    .await
                    .map_err(|e| PipelineError::gateway("memory_feature_embedding", None, e))?;
                per_example.push(outcome.vectors);
            }
        }
        cache.feature_embeddings = Some(per_example);
    }

    if let Some(path) = &cache_path {
        let json =
            serde_json::to_string(&cache).map_err(|e| PipelineError::io(path.display(), e))?;
        std::fs::write(path, json).map_err(|e| PipelineError::io(path.display(), e))?;
    }
    if let Some(query_embeddings) = cache.query_embeddings.take() {
        index = index.with_query_embeddings(query_embeddings);
    }
    if let Some(feature_embeddings) = cache.feature_embeddings.take() {
        index = index.with_feature_embeddings(feature_embeddings);
    }
    Ok(index)
}
