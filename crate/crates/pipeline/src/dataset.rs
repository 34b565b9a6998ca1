//! Dataset loading and chronological train/test splitting.
//!
//! Two input formats are supported:
//!
//! - A per-user profile format: a JSON array of `{"id": ..., "profile":
//!   [items]}` objects. Each task maps its own item fields onto
//!   (query, response); items carrying `query`/`response` directly are
//!   accepted for any task. An optional `date` string orders items.
//! - An opinion-survey format: a JSON array of `{"question", "options",
//!   "selections": {group: [probabilities]}}` objects. Each group
//!   becomes one user; only items whose top option exceeds the
//!   confidence threshold are kept, the options are lettered into the
//!   query text, and the gold response is the top option's letter.

use std::path::Path;

use rand::SeedableRng;
use serde_json::Value;

use rpm_core::domain::{Interaction, OutputMode, TaskProfile, UserHistory};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid JSON: {message}")]
    Json { path: String, message: String },
    #[error("record {index}: {message}")]
    MalformedRecord { index: usize, message: String },
    #[error("no loader for task `{task_id}`")]
    UnknownTask { task_id: String },
    #[error("user {user_id}: {message}")]
    User { user_id: String, message: String },
}

/// Per-user chronological split: the training history and the held-out
/// test interactions that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub train: UserHistory,
    pub test: Vec<Interaction>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub users: Vec<UserSplit>,
}

fn default_split_ratio() -> f64 {
    0.9
}
fn default_goqa_threshold() -> f64 {
    0.8
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetOptions {
    /// Fraction of each user's history that becomes training data.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    /// When set, subsample each user's items to this many (seeded).
    #[serde(default)]
    pub sample_per_user: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Minimum top-option selection rate for survey items.
    #[serde(default = "default_goqa_threshold")]
    pub confidence_threshold: f64,
    /// When set, keep only the first N users.
    #[serde(default)]
    pub max_users: Option<usize>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            split_ratio: default_split_ratio(),
            sample_per_user: None,
            seed: 0,
            confidence_threshold: default_goqa_threshold(),
            max_users: None,
        }
    }
}

/// The four tasks shipped with the pipeline.
pub fn builtin_task(task_id: &str) -> Option<TaskProfile> {
    let profile = match task_id {
        "lamp2" => TaskProfile {
            task_id: "lamp2".into(),
            description: "predict the tag a user assigns to a movie from its description".into(),
            class_space: Some(
                [
                    "sci-fi",
                    "based on a book",
                    "comedy",
                    "action",
                    "twist ending",
                    "dystopia",
                    "dark comedy",
                    "classic",
                    "psychology",
                    "fantasy",
                    "romance",
                    "thought-provoking",
                    "social commentary",
                    "violence",
                    "true story",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ),
            output_mode: OutputMode::Classification,
            metric_ids: vec!["accuracy".into(), "macro_f1".into()],
            prompt_binding_keys: vec!["description".into(), "tag".into(), "predicted_tag".into()],
        },
        "lamp3" => TaskProfile {
            task_id: "lamp3".into(),
            description: "predict the 1-5 star rating a user assigns from their review".into(),
            class_space: Some((1..=5).map(|c| c.to_string()).collect()),
            output_mode: OutputMode::RegressionLabel,
            metric_ids: vec!["mae".into(), "rmse".into()],
            prompt_binding_keys: vec!["review".into(), "rating".into(), "predicted_rating".into()],
        },
        "lamp5" => TaskProfile {
            task_id: "lamp5".into(),
            description: "generate a scholarly title for a paper abstract in the author's style"
                .into(),
            class_space: None,
            output_mode: OutputMode::FreeText,
            metric_ids: vec!["rouge1".into(), "rougeL".into()],
            prompt_binding_keys: vec!["abstract".into(), "title".into(), "predicted_title".into()],
        },
        "goqa" => TaskProfile {
            task_id: "goqa".into(),
            description: "predict the survey answer a demographic group selects".into(),
            class_space: Some((b'A'..=b'Z').map(|c| (c as char).to_string()).collect()),
            output_mode: OutputMode::Classification,
            metric_ids: vec!["accuracy".into()],
            prompt_binding_keys: vec![
                "question".into(),
                "answer".into(),
                "predicted_answer".into(),
            ],
        },
        _ => return None,
    };
    Some(profile)
}

/// JSON item fields holding (query, response) for each profile task.
fn profile_field_mapping(task_id: &str) -> Option<(&'static str, &'static str)> {
    match task_id {
        "lamp2" => Some(("description", "tag")),
        "lamp3" => Some(("text", "score")),
        "lamp5" => Some(("abstract", "title")),
        _ => None,
    }
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn value_to_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn split_interactions(
    user_id: &str,
    interactions: Vec<Interaction>,
    ratio: f64,
) -> Result<UserSplit, DatasetError> {
    if interactions.is_empty() {
        return Err(DatasetError::User {
            user_id: user_id.to_string(),
            message: "empty history".to_string(),
        });
    }
    let train_len = ((interactions.len() as f64) * ratio).floor() as usize;
    let train_len = train_len.min(interactions.len());
    let (train, test) = interactions.split_at(train_len);
    Ok(UserSplit {
        train: UserHistory {
            user_id: user_id.to_string(),
            interactions: train.to_vec(),
        },
        test: test.to_vec(),
    })
}

fn subsample<T>(items: Vec<T>, take: Option<usize>, seed: u64) -> Vec<T> {
    let Some(take) = take else { return items };
    if take >= items.len() {
        return items;
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, items.len(), take).into_vec();
    picked.sort_unstable();
    let mut keep: Vec<Option<T>> = items.into_iter().map(Some).collect();
    picked
        .into_iter()
        .map(|i| keep[i].take().expect("indices are distinct"))
        .collect()
}

fn load_profile_dataset(
    task: &TaskProfile,
    path: &Path,
    options: &DatasetOptions,
) -> Result<DatasetSplit, DatasetError> {
    let mapping = profile_field_mapping(&task.task_id);
    let root = read_json(path)?;
    let users = root.as_array().ok_or_else(|| DatasetError::Json {
        path: path.display().to_string(),
        message: "expected a top-level array of users".to_string(),
    })?;
    let mut splits = Vec::new();
    for (index, user) in users.iter().enumerate() {
        let user_id = user["id"]
            .as_str()
            .map(str::to_string)
            .or_else(|| user["id"].as_u64().map(|n| n.to_string()))
            .ok_or_else(|| DatasetError::MalformedRecord {
                index,
                message: "missing user `id`".to_string(),
            })?;
        let profile = user["profile"]
            .as_array()
            .ok_or_else(|| DatasetError::MalformedRecord {
                index,
                message: "missing `profile` array".to_string(),
            })?;
        let mut items: Vec<(Option<String>, String, String)> = Vec::with_capacity(profile.len());
        for (item_index, item) in profile.iter().enumerate() {
            let direct = item
                .get("query")
                .and_then(value_to_text)
                .zip(item.get("response").and_then(value_to_text));
            let (query, response) = match direct {
                Some(pair) => pair,
                None => {
                    let (query_field, response_field) =
                        mapping.ok_or_else(|| DatasetError::UnknownTask {
                            task_id: task.task_id.clone(),
                        })?;
                    let query = item
                        .get(query_field)
                        .and_then(value_to_text)
                        .ok_or_else(|| DatasetError::MalformedRecord {
                            index: item_index,
                            message: format!("user {user_id}: missing `{query_field}`"),
                        })?;
                    let response = item
                        .get(response_field)
                        .and_then(value_to_text)
                        .ok_or_else(|| DatasetError::MalformedRecord {
                            index: item_index,
                            message: format!("user {user_id}: missing `{response_field}`"),
                        })?;
                    (query, response)
                }
            };
            let date = item.get("date").and_then(Value::as_str).map(str::to_string);
            items.push((date, query, response));
        }
        // Order chronologically when dates are present (ISO strings sort
        // lexicographically); otherwise keep file order.
        if items.iter().all(|(d, _, _)| d.is_some()) {
            items.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let items = subsample(items, options.sample_per_user, options.seed ^ index as u64);
        let interactions: Vec<Interaction> = items
            .into_iter()
            .enumerate()
            .map(|(i, (_, query, response))| Interaction {
                query,
                response,
                timestamp: i as i64,
            })
            .collect();
        splits.push(split_interactions(
            &user_id,
            interactions,
            options.split_ratio,
        )?);
    }
    if let Some(max) = options.max_users {
        splits.truncate(max);
    }
    Ok(DatasetSplit { users: splits })
}

const OPTION_LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Renders a survey question with lettered options.
pub fn render_survey_query(question: &str, options: &[String]) -> String {
    let mut out = format!("{question}\nOptions:");
    for (i, option) in options.iter().enumerate() {
        let letter = OPTION_LETTERS[i] as char;
        out.push_str(&format!("\n{letter}. {option}"));
    }
    out
}

fn load_survey_dataset(
    path: &Path,
    options: &DatasetOptions,
) -> Result<DatasetSplit, DatasetError> {
    let root = read_json(path)?;
    let items = root.as_array().ok_or_else(|| DatasetError::Json {
        path: path.display().to_string(),
        message: "expected a top-level array of questions".to_string(),
    })?;
    let mut per_group: std::collections::BTreeMap<String, Vec<Interaction>> =
        std::collections::BTreeMap::new();
    for (index, item) in items.iter().enumerate() {
        let question = item["question"]
            .as_str()
            .ok_or_else(|| DatasetError::MalformedRecord {
                index,
                message: "missing `question`".to_string(),
            })?;
        let option_texts: Vec<String> = item["options"]
            .as_array()
            .ok_or_else(|| DatasetError::MalformedRecord {
                index,
                message: "missing `options`".to_string(),
            })?
            .iter()
            .map(|o| {
                value_to_text(o).ok_or_else(|| DatasetError::MalformedRecord {
                    index,
                    message: "option is not text".to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        if option_texts.len() > OPTION_LETTERS.len() {
            return Err(DatasetError::MalformedRecord {
                index,
                message: format!("too many options ({})", option_texts.len()),
            });
        }
        let selections =
            item["selections"]
                .as_object()
                .ok_or_else(|| DatasetError::MalformedRecord {
                    index,
                    message: "missing `selections`".to_string(),
                })?;
        for (group, probs) in selections {
            let probs: Vec<f64> = probs
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .ok_or_else(|| DatasetError::MalformedRecord {
                    index,
                    message: format!("selections for {group} are not numbers"),
                })?;
            if probs.len() != option_texts.len() {
                return Err(DatasetError::MalformedRecord {
                    index,
                    message: format!(
                        "selections for {group} have {} entries for {} options",
                        probs.len(),
                        option_texts.len()
                    ),
                });
            }
            let Some((top_index, top_prob)) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            else {
                continue;
            };
            // Keep only high-confidence items.
            if *top_prob <= options.confidence_threshold {
                continue;
            }
            per_group
                .entry(group.clone())
                .or_default()
                .push(Interaction {
                    query: render_survey_query(question, &option_texts),
                    response: (OPTION_LETTERS[top_index] as char).to_string(),
                    timestamp: index as i64,
                });
        }
    }
    let mut splits = Vec::new();
    for (group, interactions) in per_group {
        let interactions = subsample(interactions, options.sample_per_user, options.seed);
        if interactions.is_empty() {
            continue;
        }
        splits.push(split_interactions(
            &group,
            interactions,
            options.split_ratio,
        )?);
    }
    if let Some(max) = options.max_users {
        splits.truncate(max);
    }
    Ok(DatasetSplit { users: splits })
}

/// Loads and splits the dataset for a task.
pub fn load_dataset(
    task: &TaskProfile,
    path: &Path,
    options: &DatasetOptions,
) -> Result<DatasetSplit, DatasetError> {
    match task.task_id.as_str() {
        "goqa" => load_survey_dataset(path, options),
        _ => load_profile_dataset(task, path, options),
    }
}
