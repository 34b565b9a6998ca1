//! Text-prediction metrics: accuracy, macro-F1, MAE, RMSE, ROUGE-1 and
//! ROUGE-L.
//!
//! Conventions are pinned here because scores are sensitive to them:
//! macro-F1 averages per-class F1 over the full class space, counting
//! classes that never occur as 0; ROUGE tokenization lowercases,
//! replaces non-alphanumeric runs with spaces and splits on whitespace;
//! both ROUGE variants report the balanced F-measure.

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("predictions and golds have different lengths ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("metric undefined on empty input")]
    Empty,
}

fn check_lengths<T, U>(preds: &[T], golds: &[U]) -> Result<(), MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[String], golds: &[String]) -> Result<f64, MetricError> {
    check_lengths(preds, golds)?;
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over `class_space`. A class with no
/// gold and no predicted instances contributes 0.
pub fn macro_f1(
    preds: &[String],
    golds: &[String],
    class_space: &[String],
) -> Result<f64, MetricError> {
    check_lengths(preds, golds)?;
    if class_space.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut f1_sum = 0.0;
    for class in class_space {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, g) in preds.iter().zip(golds) {
            match (p == class, g == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(f1_sum / class_space.len() as f64)
}

/// Mean absolute error.
pub fn mae(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    check_lengths(preds, golds)?;
    let sum: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / preds.len() as f64)
}

/// Root mean squared error.
pub fn rmse(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    check_lengths(preds, golds)?;
    let sum: f64 = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| (p - g) * (p - g))
        .sum();
    Ok((sum / preds.len() as f64).sqrt())
}

/// ROUGE tokenization: lowercase, non-alphanumeric runs become spaces,
/// whitespace split.
pub fn rouge_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn f_measure(matches: f64, pred_len: f64, gold_len: f64) -> f64 {
    if pred_len == 0.0 || gold_len == 0.0 || matches == 0.0 {
        return 0.0;
    }
    let precision = matches / pred_len;
    let recall = matches / gold_len;
    2.0 * precision * recall / (precision + recall)
}

/// ROUGE-1 F-measure: clipped unigram overlap.
pub fn rouge1(pred: &str, gold: &str) -> f64 {
    let pred_tokens = rouge_tokenize(pred);
    let gold_tokens = rouge_tokenize(gold);
    let mut gold_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &gold_tokens {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut matches = 0usize;
    for t in &pred_tokens {
        if let Some(count) = gold_counts.get_mut(t.as_str()) {
            if *count > 0 {
                *count -= 1;
                matches += 1;
            }
        }
    }
    f_measure(
        matches as f64,
        pred_tokens.len() as f64,
        gold_tokens.len() as f64,
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure via longest common subsequence of tokens.
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let pred_tokens = rouge_tokenize(pred);
    let gold_tokens = rouge_tokenize(gold);
    let lcs = lcs_len(&pred_tokens, &gold_tokens);
    f_measure(
        lcs as f64,
        pred_tokens.len() as f64,
        gold_tokens.len() as f64,
    )
}
