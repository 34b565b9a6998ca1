//! Stage 1: personalized factor construction.
//!
//! Per interaction, the backend extracts response-influential features.
//! The pooled features are clustered into factors by the iterative
//! propose-assign-select loop: each round proposes candidate labels
//! from a seeded sample of the uncovered pool, assigns every uncovered
//! feature to at most one candidate, and greedily keeps the
//! highest-coverage candidates. Rounds stop at the coverage threshold
//! or the round cap; a residual pass then re-assigns leftovers to the
//! selected factors. Finally each factor is enriched with statistics:
//! per-class propensity for discrete tasks, or coverage / influence /
//! polarity from per-feature influence judgments for open-ended ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use rpm_core::domain::{
    Factor, FactorSet, FactorStats, Feature, FeatureRef, FeatureSet, InfluenceJudgment,
    Interaction, PasConfig, TaskProfile, UserHistory,
};
use rpm_core::factor::{
    compute_discrete_stats, compute_open_stats, select_factors_with_cover, AssignmentMatrix,
};
use rpm_core::prompt::{
    parse_assignment, parse_factor_labels, parse_features, parse_influences, ParsedAssignment,
    TemplateId, TemplateStore,
};

use crate::error::PipelineError;
use crate::gateway::{purpose, LlmGateway};
use crate::render;

/// Everything Stage 1 produces for a user: the factor set and the
/// extracted (factor-stamped) feature sets the later stages need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOne {
    pub factor_set: FactorSet,
    pub feature_sets: Vec<FeatureSet>,
}

/// Rounds and coverage trace of one clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasAudit {
    pub rounds_executed: usize,
    pub coverage_per_round: Vec<f64>,
    pub final_coverage: f64,
}

const RESIDUAL_NOTE: &str = "- This is a residual pass: the feature should fit one of the factors above, so pick the most semantically suitable one. Only answer \"-1\" if no factor could possibly apply.";

pub struct FactorBuilder<'a> {
    pub gateway: &'a LlmGateway,
    pub templates: &'a TemplateStore,
    pub task: &'a TaskProfile,
}

impl<'a> FactorBuilder<'a> {
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

    /// Extracts the feature set of one interaction.
    pub async fn extract_features(
        &self,
        interaction: &Interaction,
        ordinal: usize,
    ) -> Result<FeatureSet, PipelineError> {
        let bindings = BTreeMap::from([(self.task.input_key(), interaction.query.clone())]);
        let prompt =
            self.templates
                .render(&self.task.task_id, TemplateId::FeatureExtraction, &bindings)?;
        let (completion, _) = self
            .gateway
            .chat_complete(&prompt, purpose::FEATURE_EXTRACTION)
            .await
            .map_err(|e| PipelineError::gateway("feature_extraction", Some(ordinal), e))?;
        let parsed = parse_features(&completion)
            .map_err(|e| PipelineError::parse("feature_extraction", Some(ordinal), e))?;
        Ok(FeatureSet::new(
            Some(ordinal),
            parsed
                .into_iter()
                .map(|p| Feature::new(p.name, p.context))
                .collect(),
        ))
    }

    /// Asks for exactly `count` candidate factor labels from a sample
    /// of uncovered features. A wrong candidate count is retried once.
    pub async fn propose_factors(
        &self,
        sample: &[&Feature],
        prev_labels: &[String],
        count: usize,
    ) -> Result<Vec<String>, PipelineError> {
        let feature_examples = sample
            .iter()
            .map(|f| format!("- {}", f.text()))
            .collect::<Vec<_>>()
            .join("\n");
        let prev_factors = if prev_labels.is_empty() {
            "(none)".to_string()
        } else {
            prev_labels.join(", ")
        };
        let bindings = BTreeMap::from([
            ("num_factors", count.to_string()),
            ("feature_examples", feature_examples),
            ("prev_factors", prev_factors),
        ]);
        let prompt =
            self.templates
                .render(&self.task.task_id, TemplateId::FactorPropose, &bindings)?;
        let mut last_count = 0;
        for _ in 0..2 {
            let (completion, _) = self
                .gateway
                .chat_complete(&prompt, purpose::FACTOR_PROPOSE)
                .await
                .map_err(|e| PipelineError::gateway("factor_propose", None, e))?;
            let labels = parse_factor_labels(&completion)
                .map_err(|e| PipelineError::parse("factor_propose", None, e))?;
            if labels.len() == count {
                return Ok(labels);
            }
            last_count = labels.len();
        }
        Err(PipelineError::protocol(
            "factor_propose",
            format!("expected exactly {count} candidate factors, got {last_count}"),
        ))
    }

    /// Assigns one feature to a candidate index, or `None` when the
    /// model declines.
    pub async fn assign_feature(
        &self,
        feature: &Feature,
        candidates: &[String],
        residual_pass: bool,
    ) -> Result<Option<usize>, PipelineError> {
        let mut bindings = BTreeMap::from([
            ("feature", feature.text()),
            ("proposed_factors", render::numbered_labels(candidates)),
        ]);
        if residual_pass {
            bindings.insert("assignment_note", RESIDUAL_NOTE.to_string());
        }
        let prompt =
            self.templates
                .render(&self.task.task_id, TemplateId::FactorAssign, &bindings)?;
        let (completion, _) = self
            .gateway
            .chat_complete(&prompt, purpose::FACTOR_ASSIGN)
            .await
            .map_err(|e| PipelineError::gateway("factor_assign", None, e))?;
        match parse_assignment(&completion)
            .map_err(|e| PipelineError::parse("factor_assign", None, e))?
        {
            ParsedAssignment::Skip => Ok(None),
            ParsedAssignment::Index(i) if i < candidates.len() => Ok(Some(i)),
            ParsedAssignment::Index(i) => Err(PipelineError::protocol(
                "factor_assign",
                format!(
                    "assignment index {i} out of range for {} candidates",
                    candidates.len()
                ),
            )),
        }
    }

    /// Runs the full propose-assign-select loop over the user's feature
    /// pool and stamps the winning factor ids onto the feature sets.
    pub async fn run_pas(
        &self,
        user_id: &str,
        feature_sets: &mut [FeatureSet],
        cfg: &PasConfig,
    ) -> Result<(FactorSet, PasAudit), PipelineError> {
        let mut pool: BTreeMap<FeatureRef, Feature> = BTreeMap::new();
        for fs in feature_sets.iter() {
            let Some(i) = fs.source_query_index else {
                return Err(PipelineError::Data(
                    "feature set without source_query_index in the pool".to_string(),
                ));
            };
            for (j, feature) in fs.features.iter().enumerate() {
                pool.insert(FeatureRef::new(i, j), feature.clone());
            }
        }
        if pool.is_empty() {
            return Err(PipelineError::Data(format!(
                "user {user_id}: feature pool is empty"
            )));
        }
        let total = pool.len();
        let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.rng_seed);
        let mut uncovered: Vec<FeatureRef> = pool.keys().copied().collect();
        let mut selected: Vec<(String, Vec<FeatureRef>)> = Vec::new();
        let mut prev_labels: Vec<String> = Vec::new();
        let mut audit = PasAudit {
            rounds_executed: 0,
            coverage_per_round: Vec::new(),
            final_coverage: 0.0,
        };

        while audit.rounds_executed < cfg.max_rounds && !uncovered.is_empty() {
            audit.rounds_executed += 1;
            let round = audit.rounds_executed;

            // Propose from a seeded sample of the uncovered pool only.
            let sample_size = ((cfg.propose_sample_fraction * uncovered.len() as f64).ceil()
                as usize)
                .clamp(1, uncovered.len());
            let mut picked: Vec<usize> =
                rand::seq::index::sample(&mut rng, uncovered.len(), sample_size).into_vec();
            picked.sort_unstable();
            let sample: Vec<&Feature> = picked.iter().map(|&i| &pool[&uncovered[i]]).collect();
            let candidates = self
                .propose_factors(&sample, &prev_labels, cfg.candidates_per_round)
                .await
                .map_err(|e| match e {
                    PipelineError::Protocol { stage, message } => PipelineError::Protocol {
                        stage: format!("{stage} (round {round})"),
                        message,
                    },
                    other => other,
                })?;

            // Assign the entire uncovered pool against this round's candidates.
            let assignment_futures: Vec<_> = uncovered
                .iter()
                .map(|r| self.assign_feature(&pool[r], &candidates, false))
                .collect();
            let assignments: Vec<Option<usize>> =
                futures::future::try_join_all(assignment_futures).await?;

            let matrix = AssignmentMatrix::from_single_assignments(
                uncovered.clone(),
                candidates.clone(),
                &assignments,
            );
            let steps = select_factors_with_cover(&matrix, cfg.max_selected_per_round);
            let mut claimed: BTreeSet<FeatureRef> = BTreeSet::new();
            for step in steps {
                let label = candidates[step.candidate].clone();
                let members: Vec<FeatureRef> = step
                    .covered_rows
                    .iter()
                    .map(|&row| uncovered[row])
                    .collect();
                claimed.extend(members.iter().copied());
                prev_labels.push(label.clone());
                selected.push((label, members));
            }
            uncovered.retain(|r| !claimed.contains(r));

            let coverage = (total - uncovered.len()) as f64 / total as f64;
            audit.coverage_per_round.push(coverage);
            if coverage >= cfg.round_coverage_threshold {
                break;
            }
        }

        // Residual pass: re-assign leftovers to the selected factors;
        // features the model still declines stay residual.
        let mut residual: Vec<FeatureRef> = Vec::new();
        if !uncovered.is_empty() && !selected.is_empty() {
            let labels: Vec<String> = selected.iter().map(|(l, _)| l.clone()).collect();
            let futures: Vec<_> = uncovered
                .iter()
                .map(|r| self.assign_feature(&pool[r], &labels, true))
                .collect();
            let answers = futures::future::try_join_all(futures).await?;
            for (r, answer) in uncovered.iter().zip(answers) {
                match answer {
                    Some(i) => selected[i].1.push(*r),
                    None => residual.push(*r),
                }
            }
        } else {
            residual = uncovered;
        }

        let assigned: usize = selected.iter().map(|(_, members)| members.len()).sum();
        let coverage_fraction = assigned as f64 / total as f64;
        audit.final_coverage = coverage_fraction;

        let factors: Vec<Factor> = selected
            .into_iter()
            .enumerate()
            .map(|(index, (label, mut members))| {
                members.sort_unstable();
                Factor {
                    factor_id: format!("f{index}"),
                    label,
                    member_feature_refs: members,
                    stats: FactorStats::empty_open_ended(),
                }
            })
            .collect();

        for factor in &factors {
            for r in &factor.member_feature_refs {
                feature_sets[r.interaction].features[r.feature].factor_id =
                    Some(factor.factor_id.clone());
            }
        }
        residual.sort_unstable();

        Ok((
            FactorSet {
                user_id: user_id.to_string(),
                factors,
                residual_feature_refs: residual,
                coverage_fraction,
            },
            audit,
        ))
    }

    /// Evaluates, for each feature of one interaction, whether it
    /// influenced the response and with which polarity. The result is
    /// aligned with the feature order.
    pub async fn judge_influence(
        &self,
        interaction: &Interaction,
        features: &FeatureSet,
        ordinal: usize,
    ) -> Result<Vec<InfluenceJudgment>, PipelineError> {
        let bindings = BTreeMap::from([
            (self.task.output_key(), interaction.response.clone()),
            (
                "features",
                render::numbered_feature_lines(&features.features),
            ),
        ]);
        let prompt =
            self.templates
                .render(&self.task.task_id, TemplateId::FactorStatistics, &bindings)?;
        let (completion, _) = self
            .gateway
            .chat_complete(&prompt, purpose::INFLUENCE_JUDGMENT)
            .await
            .map_err(|e| PipelineError::gateway("influence_judgment", Some(ordinal), e))?;
        let parsed = parse_influences(&completion)
            .map_err(|e| PipelineError::parse("influence_judgment", Some(ordinal), e))?;

        let n = features.features.len();
        let mut judgments: Vec<Option<InfluenceJudgment>> = vec![None; n];
        for entry in parsed {
            if entry.feature_index >= n {
                return Err(PipelineError::protocol(
                    "influence_judgment",
                    format!(
                        "feature_index {} out of range for {n} features",
                        entry.feature_index
                    ),
                ));
            }
            if judgments[entry.feature_index].is_some() {
                return Err(PipelineError::protocol(
                    "influence_judgment",
                    format!("duplicate feature_index {}", entry.feature_index),
                ));
            }
            judgments[entry.feature_index] = Some(InfluenceJudgment {
                influenced: entry.influenced,
                evaluation: entry.evaluation,
            });
        }
        judgments
            .into_iter()
            .enumerate()
            .map(|(i, j)| {
                j.ok_or_else(|| {
                    PipelineError::protocol(
                        "influence_judgment",
                        format!("missing judgment for feature_index {i}"),
                    )
                })
            })
            .collect()
    }

    /// The full Stage 1 build: extract features, cluster them, enrich
    /// with statistics.
    pub async fn build_user_factors(
        &self,
        history: &UserHistory,
        cfg: &PasConfig,
    ) -> Result<StageOne, PipelineError> {
        let extraction: Vec<_> = history
            .interactions
            .iter()
            .enumerate()
            .map(|(i, interaction)| self.extract_features(interaction, i))
            .collect();
        let mut feature_sets = futures::future::try_join_all(extraction).await?;

        let (mut factor_set, _audit) = self
            .run_pas(&history.user_id, &mut feature_sets, cfg)
            .await?;

        if self.task.is_discrete() {
            let class_space = self.task.class_space.as_deref().ok_or_else(|| {
                PipelineError::Data(format!(
                    "task {} is discrete but has no class space",
                    self.task.task_id
                ))
            })?;
            for factor in &mut factor_set.factors {
                factor.stats = compute_discrete_stats(history, &feature_sets, factor, class_space)?;
            }
        } else {
            let judgment_futures: Vec<_> = history
                .interactions
                .iter()
                .enumerate()
                .map(|(i, interaction)| {
                    let features = &feature_sets[i];
                    async move {
                        if features.features.is_empty() {
                            Ok(Vec::new())
                        } else {
                            self.judge_influence(interaction, features, i).await
                        }
                    }
                })
                .collect();
            let judgments = futures::future::try_join_all(judgment_futures).await?;
            for factor in &mut factor_set.factors {
                factor.stats = compute_open_stats(&feature_sets, &judgments, factor)?;
            }
        }

        Ok(StageOne {
            factor_set,
            feature_sets,
        })
    }
}

/// Writes `factors/<user_id>.json` (the factor set) and
/// `factors/<user_id>.features.json` (the extracted feature sets).
pub fn save_stage_one(dir: &Path, stage: &StageOne) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir.display(), e))?;
    let user_id = &stage.factor_set.user_id;
    let factors_path = dir.join(format!("{user_id}.json"));
    let features_path = dir.join(format!("{user_id}.features.json"));
    let factors_json = serde_json::to_string_pretty(&stage.factor_set)
        .map_err(|e| PipelineError::io(factors_path.display(), e))?;
    std::fs::write(&factors_path, factors_json)
        .map_err(|e| PipelineError::io(factors_path.display(), e))?;
    let features_json = serde_json::to_string_pretty(&stage.feature_sets)
        .map_err(|e| PipelineError::io(features_path.display(), e))?;
    std::fs::write(&features_path, features_json)
        .map_err(|e| PipelineError::io(features_path.display(), e))?;
    Ok(())
}

pub fn load_stage_one(dir: &Path, user_id: &str) -> Result<StageOne, PipelineError> {
    let factors_path = dir.join(format!("{user_id}.json"));
    let features_path = dir.join(format!("{user_id}.features.json"));
    let factors_json = std::fs::read_to_string(&factors_path)
        .map_err(|e| PipelineError::io(factors_path.display(), e))?;
    let factor_set: FactorSet = serde_json::from_str(&factors_json)
        .map_err(|e| PipelineError::io(factors_path.display(), e))?;
    let features_json = std::fs::read_to_string(&features_path)
        .map_err(|e| PipelineError::io(features_path.display(), e))?;
    let feature_sets: Vec<FeatureSet> = serde_json::from_str(&features_json)
        .map_err(|e| PipelineError::io(features_path.display(), e))?;
    Ok(StageOne {
        factor_set,
        feature_sets,
    })
}
