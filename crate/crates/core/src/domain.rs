//! Shared domain types for the personalization pipeline.
//!
//! Everything here is plain immutable data: interactions, features,
//! factors with their statistics, reasoning memories, task profiles and
//! the configuration knobs of the factor-construction and retrieval
//! stages. All types serialize to JSON with snake_case keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Tolerance used when checking that fraction distributions sum to 1.
pub const DISTRIBUTION_SUM_TOLERANCE: f64 = 1e-9;

/// A value that can report violations of its own invariants.
///
/// An empty report means the value is valid. Messages are stable,
/// human-readable descriptions of the violated invariant.
pub trait Validate {
    fn validate(&self) -> Vec<String>;
}

/// One query/response pair from a user's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub query: String,
    pub response: String,
    /// Ordinal timestamp; only the order matters.
    pub timestamp: i64,
}

impl Validate for Interaction {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.query.trim().is_empty() {
            report.push("query non-empty".to_string());
        }
        if self.response.trim().is_empty() {
            report.push("response non-empty".to_string());
        }
        report
    }
}

/// A user's full interaction history, ordered chronologically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub interactions: Vec<Interaction>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

impl Validate for UserHistory {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.user_id.trim().is_empty() {
            report.push("user_id non-empty".to_string());
        }
        let ordered = self
            .interactions
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp);
        if !ordered {
            report.push("interactions ordered non-decreasing by timestamp".to_string());
        }
        for (i, interaction) in self.interactions.iter().enumerate() {
            for violation in interaction.validate() {
                report.push(format!("interaction {i}: {violation}"));
            }
        }
        report
    }
}

/// Positional identity of a feature: which interaction it came from and
/// its position within that interaction's feature set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub interaction: usize,
    pub feature: usize,
}

impl FeatureRef {
    pub fn new(interaction: usize, feature: usize) -> Self {
        Self {
            interaction,
            feature,
        }
    }
}

/// A response-influential element extracted from one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    /// Concise semantic label, e.g. "Taste".
    pub name: String,
    /// Disambiguating phrase grounding the feature in its query,
    /// e.g. "the flavor of the product".
    pub context: String,
    /// Identifier of the factor this feature was assigned to; absent
    /// before clustering and for features that were never assigned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_id: Option<String>,
}

impl Feature {
    pub fn new(name: impl Into<String>, context: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            context: context.into(),
            factor_id: None,
        }
    }

    /// Canonical one-line text form used for prompts and embeddings.
    pub fn text(&self) -> String {
        format!("{}: {}", self.name, self.context)
    }
}

impl Validate for Feature {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.name.trim().is_empty() {
            report.push("name non-empty".to_string());
        }
        if self.context.trim().is_empty() {
            report.push("context non-empty".to_string());
        }
        report
    }
}

/// Sentinel text embedded in place of an empty feature concatenation so
/// that cosine similarity stays defined.
pub const EMPTY_FEATURES_SENTINEL: &str = "(no features)";

/// The feature set extracted from one query.
///
/// `source_query_index` links back to the interaction the features were
/// extracted from; it is `None` for target queries, which are not part
/// of the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_query_index: Option<usize>,
    pub features: Vec<Feature>,
}

impl FeatureSet {
    pub fn new(source_query_index: Option<usize>, features: Vec<Feature>) -> Self {
        Self {
            source_query_index,
            features,
        }
    }

    /// "name: context" fragments joined with "; ", or the sentinel when
    /// the set is empty.
    pub fn concatenated_text(&self) -> String {
        if self.features.is_empty() {
            return EMPTY_FEATURES_SENTINEL.to_string();
        }
        self.features
            .iter()
            .map(Feature::text)
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Per-feature text fragments, in feature order.
    pub fn feature_texts(&self) -> Vec<String> {
        self.features.iter().map(Feature::text).collect()
    }

    /// Distinct factor ids present on this set's features.
    pub fn factor_ids(&self) -> std::collections::BTreeSet<String> {
        self.features
            .iter()
            .filter_map(|f| f.factor_id.clone())
            .collect()
    }
}

impl Validate for FeatureSet {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        for (j, feature) in self.features.iter().enumerate() {
            for violation in feature.validate() {
                report.push(format!("feature {j}: {violation}"));
            }
        }
        report
    }
}

/// Whether a factor's statistics describe a discrete class space or an
/// open-ended response space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsKind {
    Discrete,
    OpenEnded,
}

/// Polarity label of an influenced feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolarityLabel {
    Pos,
    Neu,
    Neg,
}

impl PolarityLabel {
    pub const ALL: [PolarityLabel; 3] =
        [PolarityLabel::Pos, PolarityLabel::Neu, PolarityLabel::Neg];
}

/// Fractional distribution over the three polarity labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarityDist {
    pub pos: f64,
    pub neu: f64,
    pub neg: f64,
}

impl PolarityDist {
    pub fn get(&self, label: PolarityLabel) -> f64 {
        match label {
            PolarityLabel::Pos => self.pos,
            PolarityLabel::Neu => self.neu,
            PolarityLabel::Neg => self.neg,
        }
    }

    pub fn sum(&self) -> f64 {
        self.pos + self.neu + self.neg
    }
}

/// Statistical summary attached to a factor.
///
/// Discrete tasks fill `propensity` (per-class response fractions);
/// open-ended tasks fill `influence` and `polarity`. `coverage` is the
/// number of history interactions containing at least one of the
/// factor's features and is meaningful for both kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorStats {
    pub kind: StatsKind,
    /// Per-class response fractions; absent when the factor covers no
    /// interaction. Discrete kind only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<BTreeMap<String, f64>>,
    pub coverage: usize,
    pub influence: usize,
    /// Absent when no feature of the factor was judged influenced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<PolarityDist>,
}

impl FactorStats {
    /// Zeroed open-ended stats, used as the placeholder before
    /// enrichment.
    pub fn empty_open_ended() -> Self {
        Self {
            kind: StatsKind::OpenEnded,
            propensity: None,
            coverage: 0,
            influence: 0,
            polarity: None,
        }
    }
}

impl Default for FactorStats {
    fn default() -> Self {
        Self::empty_open_ended()
    }
}

impl Validate for FactorStats {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if let Some(propensity) = &self.propensity {
            if self.kind != StatsKind::Discrete {
                report.push("propensity only for discrete kind".to_string());
            }
            if propensity.values().any(|v| !(0.0..=1.0).contains(v)) {
                report.push("propensity values in [0,1]".to_string());
            }
            if self.coverage > 0 {
                let sum: f64 = propensity.values().sum();
                if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
                    report.push(format!("propensity sums to 1 (got {sum})"));
                }
            }
        }
        if self.influence > self.coverage {
            report.push("influence ≤ coverage".to_string());
        }
        if let Some(polarity) = &self.polarity {
            if self.kind != StatsKind::OpenEnded {
                report.push("polarity only for open_ended kind".to_string());
            }
            if PolarityLabel::ALL
                .iter()
                .any(|&l| !(0.0..=1.0).contains(&polarity.get(l)))
            {
                report.push("polarity values in [0,1]".to_string());
            }
            let sum = polarity.sum();
            if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
                report.push(format!("polarity sums to 1 (got {sum})"));
            }
        }
        report
    }
}

/// A user-level semantic cluster of features, with statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub factor_id: String,
    /// Short natural-language name, e.g. "Methodology".
    pub label: String,
    pub member_feature_refs: Vec<FeatureRef>,
    pub stats: FactorStats,
}

impl Validate for Factor {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.member_feature_refs.is_empty() {
            report.push("member_feature_refs non-empty".to_string());
        }
        for violation in self.stats.validate() {
            report.push(format!("stats: {violation}"));
        }
        report
    }
}

/// The complete factor model of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    pub user_id: String,
    pub factors: Vec<Factor>,
    /// Feature refs that stayed unassigned after the residual pass.
    pub residual_feature_refs: Vec<FeatureRef>,
    /// assigned refs / all refs, recorded at construction for audit.
    pub coverage_fraction: f64,
}

impl FactorSet {
    pub fn factor_by_id(&self, factor_id: &str) -> Option<&Factor> {
        self.factors.iter().find(|f| f.factor_id == factor_id)
    }

    /// Case-insensitive label lookup.
    pub fn factor_by_label(&self, label: &str) -> Option<&Factor> {
        let needle = label.trim().to_lowercase();
        self.factors
            .iter()
            .find(|f| f.label.trim().to_lowercase() == needle)
    }

    pub fn total_assigned_refs(&self) -> usize {
        self.factors
            .iter()
            .map(|f| f.member_feature_refs.len())
            .sum()
    }
}

impl Validate for FactorSet {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for factor in &self.factors {
            for r in &factor.member_feature_refs {
                if !seen.insert(*r) {
                    report.push(format!(
                        "feature ref ({}, {}) appears in two factors",
                        r.interaction, r.feature
                    ));
                }
            }
            for violation in factor.validate() {
                report.push(format!("factor {}: {violation}", factor.factor_id));
            }
        }
        for r in &self.residual_feature_refs {
            if !seen.insert(*r) {
                report.push(format!(
                    "feature ref ({}, {}) appears in both a factor and the residual set",
                    r.interaction, r.feature
                ));
            }
        }
        let total = seen.len();
        if total > 0 {
            let assigned = self.total_assigned_refs();
            let expected = assigned as f64 / total as f64;
            if (self.coverage_fraction - expected).abs() > 1e-9 {
                report.push(format!(
                    "coverage fraction mismatch (recorded {}, recomputed {expected})",
                    self.coverage_fraction
                ));
            }
        }
        report
    }
}

/// Checks the partition property of a factor set against the full
/// extracted feature-ref universe: assigned refs plus residual refs must
/// equal it exactly, with no duplicates.
pub fn validate_partition(factor_set: &FactorSet, feature_sets: &[FeatureSet]) -> Vec<String> {
    let mut report = factor_set.validate();
    let mut universe = std::collections::BTreeSet::new();
    for fs in feature_sets {
        let Some(i) = fs.source_query_index else {
            report.push("feature set without source_query_index".to_string());
            continue;
        };
        for j in 0..fs.features.len() {
            universe.insert(FeatureRef::new(i, j));
        }
    }
    let mut partitioned = std::collections::BTreeSet::new();
    for factor in &factor_set.factors {
        partitioned.extend(factor.member_feature_refs.iter().copied());
    }
    partitioned.extend(factor_set.residual_feature_refs.iter().copied());
    for missing in universe.difference(&partitioned) {
        report.push(format!(
            "feature ref ({}, {}) neither assigned nor residual",
            missing.interaction, missing.feature
        ));
    }
    for extra in partitioned.difference(&universe) {
        report.push(format!(
            "feature ref ({}, {}) not in the extracted feature set",
            extra.interaction, extra.feature
        ));
    }
    report
}

/// Verdict of the influence-evaluation call for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceJudgment {
    pub influenced: bool,
    /// Polarity of the influence; present iff `influenced`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<PolarityLabel>,
}

impl InfluenceJudgment {
    pub fn influenced(evaluation: PolarityLabel) -> Self {
        Self {
            influenced: true,
            evaluation: Some(evaluation),
        }
    }

    pub fn not_influenced() -> Self {
        Self {
            influenced: false,
            evaluation: None,
        }
    }
}

impl Validate for InfluenceJudgment {
    fn validate(&self) -> Vec<String> {
        if self.influenced != self.evaluation.is_some() {
            vec!["evaluation present iff influenced".to_string()]
        } else {
            Vec::new()
        }
    }
}

/// One reasoning-augmented history entry: the original interaction plus
/// its features, a generated reasoning path, and the embedding of the
/// concatenated feature texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningExample {
    pub query: String,
    pub features: FeatureSet,
    pub reasoning: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Validate for ReasoningExample {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.reasoning.trim().is_empty() {
            report.push("reasoning non-empty".to_string());
        }
        report.extend(self.features.validate());
        report
    }
}

/// Identifiers of the backends a memory was built with.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryProvenance {
    pub backbone_model_id: String,
    pub embed_model_id: String,
    /// Unix seconds at build time.
    pub built_at: u64,
}

/// A user's reasoning-augmented memory, one example per history
/// interaction, in history order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningMemory {
    pub user_id: String,
    pub examples: Vec<ReasoningExample>,
    pub provenance: MemoryProvenance,
}

impl ReasoningMemory {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Validates that the example count matches the history it was
    /// built from.
    pub fn validate_against_history(&self, history_len: usize) -> Vec<String> {
        let mut report = self.validate();
        if self.len() != history_len {
            report.push(format!(
                "examples count equals history interactions count ({} vs {history_len})",
                self.len()
            ));
        }
        report
    }
}

impl Validate for ReasoningMemory {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        let mut dim: Option<usize> = None;
        for (i, example) in self.examples.iter().enumerate() {
            for violation in example.validate() {
                report.push(format!("example {i}: {violation}"));
            }
            if let Some(embedding) = &example.embedding {
                match dim {
                    None => dim = Some(embedding.len()),
                    Some(d) if d != embedding.len() => {
                        report.push(format!(
                            "example {i}: embedding dimensionality {} differs from {d}",
                            embedding.len()
                        ));
                    }
                    _ => {}
                }
            }
        }
        report
    }
}

/// How a task's answers are produced and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Classification,
    RegressionLabel,
    FreeText,
}

/// Declares a task's input/output semantics, class space, metrics and
/// prompt bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub task_id: String,
    pub description: String,
    /// Present iff `output_mode` is not free text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_space: Option<Vec<String>>,
    pub output_mode: OutputMode,
    pub metric_ids: Vec<String>,
    /// Placeholder names: [input, output, answer-json-key].
    pub prompt_binding_keys: Vec<String>,
}

impl TaskProfile {
    /// Placeholder name the raw query binds to (e.g. "abstract").
    pub fn input_key(&self) -> &str {
        self.prompt_binding_keys
            .first()
            .map(String::as_str)
            .unwrap_or("input")
    }

    /// Placeholder name the gold response binds to (e.g. "title").
    pub fn output_key(&self) -> &str {
        self.prompt_binding_keys
            .get(1)
            .map(String::as_str)
            .unwrap_or("output")
    }

    /// JSON key the model's final answer is returned under.
    pub fn answer_key(&self) -> &str {
        self.prompt_binding_keys
            .get(2)
            .map(String::as_str)
            .unwrap_or("answer")
    }

    pub fn is_discrete(&self) -> bool {
        self.output_mode != OutputMode::FreeText
    }
}

impl Validate for TaskProfile {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.task_id.trim().is_empty() {
            report.push("task_id non-empty".to_string());
        }
        let has_classes = self.class_space.as_ref().is_some_and(|c| !c.is_empty());
        if (self.output_mode != OutputMode::FreeText) != has_classes {
            report.push("class_space present iff output_mode ≠ free_text".to_string());
        }
        report
    }
}

/// Token and cost accounting for one backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallLedgerEntry {
    /// What the call was for, e.g. "feature_extraction".
    pub purpose: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub estimated_cost: f64,
}

impl Validate for CallLedgerEntry {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.estimated_cost < 0.0 {
            report.push("estimated_cost non-negative".to_string());
        }
        report
    }
}

/// A reference to a retrieved example together with its retrieval score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    /// Index into the user's reasoning memory.
    pub index: usize,
    pub score: f64,
}

impl Validate for ScoredExample {
    fn validate(&self) -> Vec<String> {
        if self.score.is_finite() {
            Vec::new()
        } else {
            vec!["score finite".to_string()]
        }
    }
}

/// Full audit record of one personalized prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub target_query: String,
    pub target_features: FeatureSet,
    pub retrieved: Vec<ScoredExample>,
    pub reasoning: String,
    pub answer: String,
    /// True when the answer could not be normalized into the task's
    /// class space; such predictions score as incorrect.
    #[serde(default)]
    pub answer_error: bool,
    pub ledger: Vec<CallLedgerEntry>,
}

impl PredictionRecord {
    /// Validates the record against the retrieval budget and memory it
    /// was produced from.
    pub fn validate_against(&self, k: usize, memory_len: usize) -> Vec<String> {
        let mut report = Vec::new();
        if self.retrieved.len() > k {
            report.push(format!(
                "retrieved length ≤ K ({} vs {k})",
                self.retrieved.len()
            ));
        }
        for s in &self.retrieved {
            if s.index >= memory_len {
                report.push(format!("retrieved ref {} outside memory", s.index));
            }
            report.extend(s.validate());
        }
        report
    }
}

fn default_candidates_per_round() -> usize {
    16
}
fn default_max_selected_per_round() -> usize {
    8
}
fn default_max_rounds() -> usize {
    3
}
fn default_propose_sample_fraction() -> f64 {
    0.30
}
fn default_round_coverage_threshold() -> f64 {
    0.95
}

/// Parameters of the propose-assign-select clustering loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasConfig {
    /// Candidate factors requested per round (L).
    #[serde(default = "default_candidates_per_round")]
    pub candidates_per_round: usize,
    /// Factors kept per round by the greedy selection (P_max).
    #[serde(default = "default_max_selected_per_round")]
    pub max_selected_per_round: usize,
    /// Upper bound on the number of rounds (R_max).
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Fraction of the uncovered pool sampled for each Propose call.
    #[serde(default = "default_propose_sample_fraction")]
    pub propose_sample_fraction: f64,
    /// Coverage at which the round loop stops early.
    #[serde(default = "default_round_coverage_threshold")]
    pub round_coverage_threshold: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for PasConfig {
    fn default() -> Self {
        Self {
            candidates_per_round: default_candidates_per_round(),
            max_selected_per_round: default_max_selected_per_round(),
            max_rounds: default_max_rounds(),
            propose_sample_fraction: default_propose_sample_fraction(),
            round_coverage_threshold: default_round_coverage_threshold(),
            rng_seed: 0,
        }
    }
}

impl Validate for PasConfig {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.candidates_per_round == 0 {
            report.push("candidates_per_round positive".to_string());
        }
        if self.max_selected_per_round == 0 {
            report.push("max_selected_per_round positive".to_string());
        }
        if self.max_rounds == 0 {
            report.push("max_rounds positive".to_string());
        }
        if !(self.propose_sample_fraction > 0.0 && self.propose_sample_fraction <= 1.0) {
            report.push("propose_sample_fraction in (0,1]".to_string());
        }
        report
    }
}

/// Example-selection strategy used at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStrategy {
    Random,
    Bm25,
    QueryCosine,
    FeatureCosine,
    FeatureLevel,
    TwoStage,
}

impl std::str::FromStr for RetrievalStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "bm25" => Ok(Self::Bm25),
            "query_cosine" => Ok(Self::QueryCosine),
            "feature_cosine" => Ok(Self::FeatureCosine),
            "feature_level" => Ok(Self::FeatureLevel),
            "two_stage" => Ok(Self::TwoStage),
            other => Err(format!("unknown retrieval strategy: {other}")),
        }
    }
}

fn default_retrieval_k() -> usize {
    3
}
fn default_pool_multiplier() -> usize {
    3
}
fn default_strategy() -> RetrievalStrategy {
    RetrievalStrategy::FeatureCosine
}

/// Retrieval strategy and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    #[serde(default = "default_strategy")]
    pub strategy: RetrievalStrategy,
    #[serde(default = "default_retrieval_k")]
    pub k: usize,
    /// Candidate-pool size multiplier for the two-stage strategy.
    #[serde(default = "default_pool_multiplier")]
    pub two_stage_pool_multiplier: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            k: default_retrieval_k(),
            two_stage_pool_multiplier: default_pool_multiplier(),
        }
    }
}

impl Validate for RetrievalConfig {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.k == 0 {
            report.push("k positive".to_string());
        }
        if self.two_stage_pool_multiplier == 0 {
            report.push("two_stage_pool_multiplier positive".to_string());
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_feature_has_empty_report() {
        let f = Feature::new("Taste", "the flavor of the product");
        assert!(f.validate().is_empty());
    }

    #[test]
    fn empty_name_is_reported() {
        let f = Feature::new("", "x");
        let report = f.validate();
        assert!(
            report.iter().any(|v| v.contains("name non-empty")),
            "{report:?}"
        );
    }

    #[test]
    fn polarity_sum_violation_is_reported() {
        let stats = FactorStats {
            polarity: Some(PolarityDist {
                pos: 0.5,
                neu: 0.5,
                neg: 0.1,
            }),
            ..FactorStats::empty_open_ended()
        };
        let report = stats.validate();
        assert!(
            report.iter().any(|v| v.contains("polarity sums to 1")),
            "{report:?}"
        );
    }

    #[test]
    fn influence_exceeding_coverage_is_reported() {
        let stats = FactorStats {
            coverage: 2,
            influence: 3,
            ..FactorStats::empty_open_ended()
        };
        assert!(stats.validate().iter().any(|v| v.contains("influence")));
    }

    #[test]
    fn discrete_propensity_sums_to_one() {
        let mut propensity = BTreeMap::new();
        propensity.insert("4".to_string(), 0.25);
        propensity.insert("5".to_string(), 0.75);
        let stats = FactorStats {
            kind: StatsKind::Discrete,
            propensity: Some(propensity),
            coverage: 4,
            influence: 0,
            polarity: None,
        };
        assert!(stats.validate().is_empty());
    }

    #[test]
    fn judgment_requires_evaluation_iff_influenced() {
        let bad = InfluenceJudgment {
            influenced: true,
            evaluation: None,
        };
        assert_eq!(bad.validate().len(), 1);
        assert!(InfluenceJudgment::influenced(PolarityLabel::Pos)
            .validate()
            .is_empty());
        assert!(InfluenceJudgment::not_influenced().validate().is_empty());
    }

    #[test]
    fn unsorted_history_is_reported() {
        let h = UserHistory {
            user_id: "u".into(),
            interactions: vec![
                Interaction {
                    query: "a".into(),
                    response: "b".into(),
                    timestamp: 2,
                },
                Interaction {
                    query: "c".into(),
                    response: "d".into(),
                    timestamp: 1,
                },
            ],
        };
        assert!(h.validate().iter().any(|v| v.contains("non-decreasing")));
    }

    #[test]
    fn factor_set_detects_duplicate_refs() {
        let factor = |id: &str, refs: Vec<FeatureRef>| Factor {
            factor_id: id.to_string(),
            label: id.to_string(),
            member_feature_refs: refs,
            stats: FactorStats::empty_open_ended(),
        };
        let fs = FactorSet {
            user_id: "u".into(),
            factors: vec![
                factor("f0", vec![FeatureRef::new(0, 0)]),
                factor("f1", vec![FeatureRef::new(0, 0)]),
            ],
            residual_feature_refs: vec![],
            coverage_fraction: 2.0,
        };
        assert!(fs
            .validate()
            .iter()
            .any(|v| v.contains("appears in two factors")));
    }

    #[test]
    fn partition_check_covers_universe() {
        let feature_sets = vec![FeatureSet::new(
            Some(0),
            vec![Feature::new("a", "b"), Feature::new("c", "d")],
        )];
        let fs = FactorSet {
            user_id: "u".into(),
            factors: vec![Factor {
                factor_id: "f0".into(),
                label: "X".into(),
                member_feature_refs: vec![FeatureRef::new(0, 0)],
                stats: FactorStats::empty_open_ended(),
            }],
            residual_feature_refs: vec![FeatureRef::new(0, 1)],
            coverage_fraction: 0.5,
        };
        assert!(validate_partition(&fs, &feature_sets).is_empty());

        let incomplete = FactorSet {
            residual_feature_refs: vec![],
            coverage_fraction: 1.0,
            ..fs
        };
        assert!(!validate_partition(&incomplete, &feature_sets).is_empty());
    }

    #[test]
    fn feature_concatenation_uses_sentinel_when_empty() {
        let empty = FeatureSet::new(Some(0), vec![]);
        assert_eq!(empty.concatenated_text(), EMPTY_FEATURES_SENTINEL);
        let set = FeatureSet::new(
            Some(0),
            vec![
                Feature::new("Taste", "the flavor"),
                Feature::new("Price", "cost"),
            ],
        );
        assert_eq!(set.concatenated_text(), "Taste: the flavor; Price: cost");
    }

    #[test]
    fn task_profile_class_space_invariant() {
        let mut task = TaskProfile {
            task_id: "t".into(),
            description: "d".into(),
            class_space: None,
            output_mode: OutputMode::Classification,
            metric_ids: vec![],
            prompt_binding_keys: vec!["in".into(), "out".into(), "ans".into()],
        };
        assert!(!task.validate().is_empty());
        task.class_space = Some(vec!["a".into()]);
        assert!(task.validate().is_empty());
        task.output_mode = OutputMode::FreeText;
        assert!(!task.validate().is_empty());
    }

    #[test]
    fn pas_config_defaults() {
        let cfg = PasConfig::default();
        assert_eq!(cfg.candidates_per_round, 16);
        assert_eq!(cfg.max_selected_per_round, 8);
        assert_eq!(cfg.max_rounds, 3);
        assert!((cfg.propose_sample_fraction - 0.30).abs() < 1e-12);
        assert!((cfg.round_coverage_threshold - 0.95).abs() < 1e-12);
    }

    #[test]
    fn retrieval_config_defaults() {
        let cfg = RetrievalConfig::default();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.strategy, RetrievalStrategy::FeatureCosine);
        assert_eq!(cfg.two_stage_pool_multiplier, 3);
    }

    #[test]
    fn serde_round_trip_reasoning_example() {
        let example = ReasoningExample {
            query: "q".into(),
            features: FeatureSet::new(Some(3), vec![Feature::new("a", "b")]),
            reasoning: "because".into(),
            response: "r".into(),
            embedding: Some(vec![0.25, -0.5]),
        };
        let json = serde_json::to_string(&example).unwrap();
        let back: ReasoningExample = serde_json::from_str(&json).unwrap();
        assert_eq!(example, back);
        assert!(json.contains("\"source_query_index\":3"));
    }

    #[test]
    fn serde_round_trip_factor_set_and_record() {
        let factor_set = FactorSet {
            user_id: "u1".into(),
            factors: vec![Factor {
                factor_id: "f0".into(),
                label: "Methodology".into(),
                member_feature_refs: vec![FeatureRef::new(0, 0), FeatureRef::new(2, 1)],
                stats: FactorStats {
                    kind: StatsKind::OpenEnded,
                    propensity: None,
                    coverage: 2,
                    influence: 1,
                    polarity: Some(PolarityDist {
                        pos: 1.0,
                        neu: 0.0,
                        neg: 0.0,
                    }),
                },
            }],
            residual_feature_refs: vec![FeatureRef::new(1, 0)],
            coverage_fraction: 2.0 / 3.0,
        };
        let json = serde_json::to_string(&factor_set).unwrap();
        assert_eq!(factor_set, serde_json::from_str(&json).unwrap());

        let record = PredictionRecord {
            target_query: "q".into(),
            target_features: FeatureSet::new(None, vec![Feature::new("a", "b")]),
            retrieved: vec![ScoredExample {
                index: 2,
                score: 0.75,
            }],
            reasoning: "r".into(),
            answer: "a".into(),
            answer_error: false,
            ledger: vec![CallLedgerEntry {
                purpose: "generation".into(),
                prompt_tokens: 10,
                completion_tokens: 3,
                latency_ms: 12,
                estimated_cost: 0.001,
            }],
        };
        let json = serde_json::to_string(&record).unwrap();
        assert_eq!(
            record,
            serde_json::from_str::<PredictionRecord>(&json).unwrap()
        );
    }

    proptest::proptest! {
        #[test]
        fn serde_round_trip_features(
            name in "[a-zA-Z ]{1,12}",
            context in "[a-zA-Z ]{1,24}",
            factor in proptest::option::of("[a-z]{1,6}"),
            index in proptest::option::of(0usize..100),
        ) {
            let feature = Feature {
                name,
                context,
                factor_id: factor,
            };
            let set = FeatureSet::new(index, vec![feature]);
            let json = serde_json::to_string(&set).unwrap();
            proptest::prop_assert_eq!(&set, &serde_json::from_str::<FeatureSet>(&json).unwrap());
        }

        #[test]
        fn serde_round_trip_stats(
            coverage in 0usize..50,
            influence_offset in 0usize..50,
            pos in 0u32..100,
            neu in 0u32..100,
        ) {
            let influence = coverage.saturating_sub(influence_offset);
            let total = (pos + neu).max(1) as f64;
            let stats = FactorStats {
                kind: StatsKind::OpenEnded,
                propensity: None,
                coverage,
                influence,
                polarity: Some(PolarityDist {
                    pos: pos as f64 / total,
                    neu: neu as f64 / total,
                    neg: 1.0 - (pos + neu) as f64 / total,
                }),
            };
            let json = serde_json::to_string(&stats).unwrap();
            proptest::prop_assert_eq!(&stats, &serde_json::from_str::<FactorStats>(&json).unwrap());
        }
    }

    #[test]
    fn serde_snake_case_enums() {
        assert_eq!(
            serde_json::to_string(&OutputMode::FreeText).unwrap(),
            "\"free_text\""
        );
        assert_eq!(
            serde_json::to_string(&RetrievalStrategy::FeatureCosine).unwrap(),
            "\"feature_cosine\""
        );
        assert_eq!(
            serde_json::to_string(&PolarityLabel::Pos).unwrap(),
            "\"pos\""
        );
        assert_eq!(
            serde_json::to_string(&StatsKind::OpenEnded).unwrap(),
            "\"open_ended\""
        );
    }
}
