//! Factor-side numerics: the assignment matrix with its greedy
//! max-coverage selection, and the per-factor statistics (propensity for
//! discrete tasks; coverage, influence and polarity for open-ended
//! ones).

use std::collections::{BTreeMap, BTreeSet};

use crate::domain::{
    Factor, FactorStats, FeatureRef, FeatureSet, InfluenceJudgment, PolarityDist, PolarityLabel,
    StatsKind, UserHistory, Validate,
};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("interaction {interaction}: response `{response}` outside the class space")]
    ResponseOutsideClassSpace {
        interaction: usize,
        response: String,
    },
    #[error("judgments misaligned with feature sets: {message}")]
    Misaligned { message: String },
    #[error("feature ref ({interaction}, {feature}) outside the extracted feature sets")]
    DanglingFeatureRef { interaction: usize, feature: usize },
}

/// Boolean membership of candidate factors over a set of feature rows.
///
/// Rows produced by the assignment stage carry at most one membership
/// each; the greedy selection below handles general overlap regardless.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub rows: Vec<FeatureRef>,
    pub candidates: Vec<String>,
    /// entries[row][col]: membership of row in candidate col.
    pub entries: Vec<Vec<bool>>,
}

impl AssignmentMatrix {
    /// Builds the matrix from per-row single assignments (the shape the
    /// assignment stage produces).
    pub fn from_single_assignments(
        rows: Vec<FeatureRef>,
        candidates: Vec<String>,
        assignments: &[Option<usize>],
    ) -> Self {
        assert_eq!(rows.len(), assignments.len());
        let entries = assignments
            .iter()
            .map(|a| {
                let mut row = vec![false; candidates.len()];
                if let Some(col) = a {
                    row[*col] = true;
                }
                row
            })
            .collect();
        Self {
            rows,
            candidates,
            entries,
        }
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }
}

impl Validate for AssignmentMatrix {
    fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.entries.len() != self.rows.len() {
            report.push("entries row count matches rows".to_string());
        }
        for (i, row) in self.entries.iter().enumerate() {
            if row.len() != self.candidates.len() {
                report.push(format!("row {i}: entry width matches candidate count"));
            }
            if row.iter().filter(|&&b| b).count() > 1 {
                report.push(format!("row {i}: at most one true entry per row"));
            }
        }
        report
    }
}

/// One step of the greedy selection: the chosen candidate column and
/// the row indices it claimed at that step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionStep {
    pub candidate: usize,
    pub covered_rows: Vec<usize>,
}

/// Greedy maximum-coverage selection: repeatedly picks the candidate
/// covering the most still-uncovered rows (ties go to the lowest
/// candidate index), claims those rows, and stops after `p_max` picks,
/// when every row is covered, or when no candidate covers anything.
pub fn select_factors_with_cover(matrix: &AssignmentMatrix, p_max: usize) -> Vec<SelectionStep> {
    let mut uncovered: Vec<bool> = vec![true; matrix.row_count()];
    let mut steps = Vec::new();
    while steps.len() < p_max {
        let mut best: Option<(usize, usize)> = None; // (count, col)
        for col in 0..matrix.candidates.len() {
            let count = matrix
                .entries
                .iter()
                .enumerate()
                .filter(|(row, entry)| uncovered[*row] && entry[col])
                .count();
            let better = match best {
                None => count > 0,
                Some((best_count, _)) => count > best_count,
            };
            if better {
                best = Some((count, col));
            }
        }
        let Some((_, col)) = best else { break };
        let covered_rows: Vec<usize> = matrix
            .entries
            .iter()
            .enumerate()
            .filter(|(row, entry)| uncovered[*row] && entry[col])
            .map(|(row, _)| row)
            .collect();
        for &row in &covered_rows {
            uncovered[row] = false;
        }
        steps.push(SelectionStep {
            candidate: col,
            covered_rows,
        });
        if uncovered.iter().all(|u| !u) {
            break;
        }
    }
    steps
}

/// Candidate indices in greedy pick order.
pub fn select_factors(matrix: &AssignmentMatrix, p_max: usize) -> Vec<usize> {
    select_factors_with_cover(matrix, p_max)
        .into_iter()
        .map(|s| s.candidate)
        .collect()
}

/// Interactions covered by a factor: those contributing at least one
/// member feature.
fn covered_interactions(factor: &Factor) -> BTreeSet<usize> {
    factor
        .member_feature_refs
        .iter()
        .map(|r| r.interaction)
        .collect()
}

fn check_refs(factor: &Factor, feature_sets: &[FeatureSet]) -> Result<(), StatsError> {
    for r in &factor.member_feature_refs {
        let in_range = feature_sets
            .get(r.interaction)
            .is_some_and(|fs| r.feature < fs.features.len());
        if !in_range {
            return Err(StatsError::DanglingFeatureRef {
                interaction: r.interaction,
                feature: r.feature,
            });
        }
    }
    Ok(())
}

/// Per-class fraction of responses among the interactions the factor
/// covers. Returns `None` when the factor covers no interaction; every
/// class of the space appears in the returned map.
pub fn compute_propensity(
    history: &UserHistory,
    feature_sets: &[FeatureSet],
    factor: &Factor,
    class_space: &[String],
) -> Result<Option<BTreeMap<String, f64>>, StatsError> {
    check_refs(factor, feature_sets)?;
    let covered = covered_interactions(factor);
    if covered.is_empty() {
        return Ok(None);
    }
    let mut counts: BTreeMap<&str, usize> = class_space.iter().map(|c| (c.as_str(), 0)).collect();
    for &i in &covered {
        let response = history.interactions[i].response.as_str();
        match counts.get_mut(response) {
            Some(count) => *count += 1,
            None => {
                return Err(StatsError::ResponseOutsideClassSpace {
                    interaction: i,
                    response: response.to_string(),
                })
            }
        }
    }
    let denominator = covered.len() as f64;
    Ok(Some(
        counts
            .into_iter()
            .map(|(class, count)| (class.to_string(), count as f64 / denominator))
            .collect(),
    ))
}

/// Discrete-kind stats for a factor: coverage plus the propensity map.
pub fn compute_discrete_stats(
    history: &UserHistory,
    feature_sets: &[FeatureSet],
    factor: &Factor,
    class_space: &[String],
) -> Result<FactorStats, StatsError> {
    let propensity = compute_propensity(history, feature_sets, factor, class_space)?;
    Ok(FactorStats {
        kind: StatsKind::Discrete,
        propensity,
        coverage: covered_interactions(factor).len(),
        influence: 0,
        polarity: None,
    })
}

/// Open-ended stats: coverage (interactions containing a member
/// feature), influence (covered interactions where a member feature was
/// judged influential), and the polarity distribution over all
/// influenced member features. Polarity is absent when nothing was
/// influenced.
pub fn compute_open_stats(
    feature_sets: &[FeatureSet],
    judgments: &[Vec<InfluenceJudgment>],
    factor: &Factor,
) -> Result<FactorStats, StatsError> {
    if judgments.len() != feature_sets.len() {
        return Err(StatsError::Misaligned {
            message: format!(
                "{} judgment lists for {} feature sets",
                judgments.len(),
                feature_sets.len()
            ),
        });
    }
    for (i, (fs, js)) in feature_sets.iter().zip(judgments).enumerate() {
        if fs.features.len() != js.len() {
            return Err(StatsError::Misaligned {
                message: format!(
                    "interaction {i}: {} judgments for {} features",
                    js.len(),
                    fs.features.len()
                ),
            });
        }
    }
    check_refs(factor, feature_sets)?;

    let covered = covered_interactions(factor);
    let mut influenced_interactions: BTreeSet<usize> = BTreeSet::new();
    let mut polarity_counts: BTreeMap<PolarityLabel, usize> = BTreeMap::new();
    let mut influenced_features = 0usize;
    for r in &factor.member_feature_refs {
        let judgment = judgments[r.interaction][r.feature];
        if judgment.influenced {
            influenced_interactions.insert(r.interaction);
            influenced_features += 1;
            if let Some(evaluation) = judgment.evaluation {
                *polarity_counts.entry(evaluation).or_default() += 1;
            }
        }
    }
    let polarity = if influenced_features == 0 {
        None
    } else {
        let frac =
            |label| *polarity_counts.get(&label).unwrap_or(&0) as f64 / influenced_features as f64;
        Some(PolarityDist {
            pos: frac(PolarityLabel::Pos),
            neu: frac(PolarityLabel::Neu),
            neg: frac(PolarityLabel::Neg),
        })
    };
    Ok(FactorStats {
        kind: StatsKind::OpenEnded,
        propensity: None,
        coverage: covered.len(),
        influence: influenced_interactions.len(),
        polarity,
    })
}
