//! Text renderers for prompt bindings: feature lists, the factor block
//! with statistics, exemplar blocks and the response schema literal.
//! All output is deterministic.

use rpm_core::domain::{
    FactorSet, FactorStats, Feature, FeatureSet, ReasoningExample, StatsKind, TaskProfile,
};

fn pct(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}

fn capitalize(key: &str) -> String {
    let mut chars = key.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// "- name: context" lines.
pub fn feature_lines(features: &[Feature]) -> String {
    if features.is_empty() {
        return "(no features)".to_string();
    }
    features
        .iter()
        .map(|f| format!("- {}", f.text()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// "0. name: context" lines, used where the model must answer with
/// feature indices.
pub fn numbered_feature_lines(features: &[Feature]) -> String {
    features
        .iter()
        .enumerate()
        .map(|(i, f)| format!("{i}. {}", f.text()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// "0. label" lines for candidate factors.
pub fn numbered_labels(labels: &[String]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}. {l}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Target features annotated with their assigned factor label (or
/// "unassigned").
pub fn feature_lines_with_factors(features: &[Feature], factors: &FactorSet) -> String {
    if features.is_empty() {
        return "(no features)".to_string();
    }
    features
        .iter()
        .map(|f| {
            let label = f
                .factor_id
                .as_deref()
                .and_then(|id| factors.factor_by_id(id))
                .map(|factor| factor.label.as_str())
                .unwrap_or("unassigned");
            format!("- {} (factor: {label})", f.text())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn stats_line(stats: &FactorStats) -> String {
    match stats.kind {
        StatsKind::Discrete => {
            let mut parts: Vec<(String, f64)> = stats
                .propensity
                .as_ref()
                .map(|p| {
                    p.iter()
                        .filter(|(_, v)| **v > 0.0)
                        .map(|(k, v)| (k.clone(), *v))
                        .collect()
                })
                .unwrap_or_default();
            parts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            if parts.is_empty() {
                format!(
                    "appears in {} interactions; no response distribution",
                    stats.coverage
                )
            } else {
                let dist = parts
                    .iter()
                    .map(|(k, v)| format!("{k} -> {}", pct(*v)))
                    .collect::<Vec<_>>()
                    .join(", ");
                format!(
                    "appears in {} interactions; response distribution: {dist}",
                    stats.coverage
                )
            }
        }
        StatsKind::OpenEnded => {
            let mut line = format!("appears in {} interactions", stats.coverage);
            if stats.coverage > 0 {
                let rate = stats.influence as f64 / stats.coverage as f64;
                line.push_str(&format!(
                    "; directly influenced the response in {}/{} ({})",
                    stats.influence,
                    stats.coverage,
                    pct(rate)
                ));
            }
            match &stats.polarity {
                Some(p) => line.push_str(&format!(
                    "; polarity: pos {}, neu {}, neg {}",
                    pct(p.pos),
                    pct(p.neu),
                    pct(p.neg)
                )),
                None => line.push_str("; no influenced features"),
            }
            line
        }
    }
}

/// The factor block bound to `{factors}`: one line per factor with its
/// statistics.
pub fn factor_block(factors: &FactorSet) -> String {
    if factors.factors.is_empty() {
        return "(no factors)".to_string();
    }
    factors
        .factors
        .iter()
        .map(|f| format!("- {}: {}", f.label, stats_line(&f.stats)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One exemplar block per retrieved example, in the given order. The
/// caller passes examples best-last so the strongest exemplar sits
/// nearest the target query.
pub fn exemplar_block(examples: &[&ReasoningExample], task: &TaskProfile) -> String {
    if examples.is_empty() {
        return "(no exemplars)".to_string();
    }
    let input_label = capitalize(task.input_key());
    let output_label = capitalize(task.output_key());
    examples
        .iter()
        .enumerate()
        .map(|(i, example)| {
            format!(
                "Example {n}:\n{input_label}: {query}\nFeatures: {features}\nReasoning: {reasoning}\n{output_label}: {response}",
                n = i + 1,
                query = example.query,
                features = example.features.concatenated_text(),
                reasoning = example.reasoning,
                response = example.response,
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The JSON schema literal bound to `{response_schema}`.
pub fn response_schema(task: &TaskProfile, include_reasoning: bool) -> String {
    if include_reasoning {
        format!("{{ \"reasoning\": \"\", \"{}\": \"\" }}", task.answer_key())
    } else {
        format!("{{ \"{}\": \"\" }}", task.answer_key())
    }
}

/// Renders a feature set for the `{features}` binding, optionally with
/// factor annotations.
pub fn features_binding(features: &FeatureSet, factors: Option<&FactorSet>) -> String {
    match factors {
        Some(factors) => feature_lines_with_factors(&features.features, factors),
        None => feature_lines(&features.features),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rpm_core::domain::{Factor, FeatureRef, PolarityDist};
    use std::collections::BTreeMap;

    fn open_factor(
        label: &str,
        coverage: usize,
        influence: usize,
        pos: f64,
        neu: f64,
        neg: f64,
    ) -> Factor {
        Factor {
            factor_id: format!("f_{label}"),
            label: label.to_string(),
            member_feature_refs: vec![FeatureRef::new(0, 0)],
            stats: FactorStats {
                kind: StatsKind::OpenEnded,
                propensity: None,
                coverage,
                influence,
                polarity: Some(PolarityDist { pos, neu, neg }),
            },
        }
    }

    #[test]
    fn open_factor_line_shows_influence_rate() {
        let factors = FactorSet {
            user_id: "u".into(),
            factors: vec![open_factor(
                "Methodology",
                86,
                83,
                176.0 / 183.0,
                7.0 / 183.0,
                0.0,
            )],
            residual_feature_refs: vec![],
            coverage_fraction: 1.0,
        };
        let block = factor_block(&factors);
        assert!(block.contains("Methodology"));
        assert!(block.contains("83/86 (96.5%)"), "{block}");
        assert!(block.contains("pos 96.2%"), "{block}");
    }

    #[test]
    fn discrete_factor_line_shows_distribution() {
        let mut propensity = BTreeMap::new();
        propensity.insert("5".to_string(), 0.75);
        propensity.insert("4".to_string(), 0.25);
        propensity.insert("1".to_string(), 0.0);
        let factors = FactorSet {
            user_id: "u".into(),
            factors: vec![Factor {
                factor_id: "f0".into(),
                label: "Quality".into(),
                member_feature_refs: vec![FeatureRef::new(0, 0)],
                stats: FactorStats {
                    kind: StatsKind::Discrete,
                    propensity: Some(propensity),
                    coverage: 4,
                    influence: 0,
                    polarity: None,
                },
            }],
            residual_feature_refs: vec![],
            coverage_fraction: 1.0,
        };
        let block = factor_block(&factors);
        assert!(block.contains("5 -> 75.0%"), "{block}");
        assert!(block.contains("4 -> 25.0%"), "{block}");
        assert!(!block.contains("1 ->"), "zero classes omitted: {block}");
    }

    #[test]
    fn unassigned_features_are_labelled() {
        let factors = FactorSet {
            user_id: "u".into(),
            factors: vec![],
            residual_feature_refs: vec![],
            coverage_fraction: 0.0,
        };
        let mut feature = Feature::new("Siamese CNN", "the architecture");
        feature.factor_id = Some("missing".into());
        let text = feature_lines_with_factors(&[feature], &factors);
        assert!(text.contains("(factor: unassigned)"));
    }

    #[test]
    fn schema_literal_matches_mode() {
        let task = crate::dataset::builtin_task("lamp5").unwrap();
        assert_eq!(
            response_schema(&task, true),
            "{ \"reasoning\": \"\", \"predicted_title\": \"\" }"
        );
        assert_eq!(
            response_schema(&task, false),
            "{ \"predicted_title\": \"\" }"
        );
    }
}
