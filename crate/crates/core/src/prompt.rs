//! Prompt template rendering and structured-output parsing.
//!
//! Templates are plain UTF-8 files with `{placeholder}` markers; `{{`
//! and `}}` escape literal braces. One template file exists per
//! (task, stage) pair; adding a task means adding six files. Model
//! completions are expected to be JSON and go through a small repair
//! pipeline before parsing: strip code fences, extract the first
//! balanced object, drop trailing commas, then fail carrying the raw
//! text. Repairs only ever remove characters, so every parsed field is
//! present verbatim in the completion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde_json::Value;

use crate::domain::PolarityLabel;

/// The six pipeline stages that have a prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    FeatureExtraction,
    FactorPropose,
    FactorAssign,
    FactorStatistics,
    ReasoningConstruction,
    ReasoningAlignedGeneration,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::FeatureExtraction,
        TemplateId::FactorPropose,
        TemplateId::FactorAssign,
        TemplateId::FactorStatistics,
        TemplateId::ReasoningConstruction,
        TemplateId::ReasoningAlignedGeneration,
    ];

    /// File stem of the template within a task directory.
    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateId::FeatureExtraction => "feature_extraction",
            TemplateId::FactorPropose => "factor_propose",
            TemplateId::FactorAssign => "factor_assign",
            TemplateId::FactorStatistics => "factor_statistics",
            TemplateId::ReasoningConstruction => "reasoning_construction",
            TemplateId::ReasoningAlignedGeneration => "reasoning_aligned_generation",
        }
    }

    pub fn from_file_stem(stem: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.file_stem() == stem)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

/// Placeholders that may be left unbound; they render as the empty
/// string. Everything else found in a body is required.
const OPTIONAL_KEYS: &[&str] = &["factor_context", "assignment_note"];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing binding for key `{key}` in template {template}")]
    MissingBinding { template: TemplateId, key: String },
    #[error("invalid template {template}: {message}")]
    InvalidTemplate {
        template: TemplateId,
        message: String,
    },
    #[error("no template registered for task `{task}` stage {template}")]
    MissingTemplate { task: String, template: TemplateId },
    #[error("failed to read template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Error produced when a model completion cannot be parsed into the
/// expected structure; carries the raw text for audit.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{message}")]
pub struct ParseError {
    pub message: String,
    pub raw: String,
}

impl ParseError {
    fn new(message: impl Into<String>, raw: &str) -> Self {
        Self {
            message: message.into(),
            raw: raw.to_string(),
        }
    }
}

/// A template body with its derived required placeholder keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
    pub required_keys: Vec<String>,
}

#[derive(Debug)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

fn scan_segments(template: TemplateId, body: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' => {
                if chars.peek() == Some(&'{') {
                    chars.next();
                    literal.push('{');
                    continue;
                }
                let mut key = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(k) if k.is_ascii_lowercase() || k.is_ascii_digit() || k == '_' => {
                            key.push(k)
                        }
                        Some(k) => {
                            return Err(PromptError::InvalidTemplate {
                                template,
                                message: format!("invalid character `{k}` in placeholder"),
                            })
                        }
                        None => {
                            return Err(PromptError::InvalidTemplate {
                                template,
                                message: "unterminated placeholder".to_string(),
                            })
                        }
                    }
                }
                if key.is_empty() {
                    return Err(PromptError::InvalidTemplate {
                        template,
                        message: "empty placeholder".to_string(),
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(key));
            }
            '}' => {
                if chars.peek() == Some(&'}') {
                    chars.next();
                    literal.push('}');
                } else {
                    return Err(PromptError::InvalidTemplate {
                        template,
                        message: "unmatched `}` (use `}}` for a literal brace)".to_string(),
                    });
                }
            }
            other => literal.push(other),
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let segments = scan_segments(template_id, &body)?;
        let mut required_keys = Vec::new();
        for segment in &segments {
            if let Segment::Placeholder(key) = segment {
                if !OPTIONAL_KEYS.contains(&key.as_str()) && !required_keys.contains(key) {
                    required_keys.push(key.clone());
                }
            }
        }
        Ok(Self {
            template_id,
            body,
            required_keys,
        })
    }

    /// Substitutes bindings into the body. Required keys must all be
    /// bound; optional keys default to the empty string; bindings for
    /// keys not present in the body are ignored. Rendering is pure.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let segments =
            scan_segments(self.template_id, &self.body).expect("validated at construction");
        let mut out = String::with_capacity(self.body.len());
        for segment in segments {
            match segment {
                Segment::Literal(text) => out.push_str(&text),
                Segment::Placeholder(key) => match bindings.get(key.as_str()) {
                    Some(value) => out.push_str(value),
                    None if OPTIONAL_KEYS.contains(&key.as_str()) => {}
                    None => {
                        return Err(PromptError::MissingBinding {
                            template: self.template_id,
                            key,
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

macro_rules! builtin_templates {
    ($($task:literal),+) => {{
        let mut map = BTreeMap::new();
        $(
            for (id, body) in [
                (TemplateId::FeatureExtraction,
                 include_str!(concat!("../templates/", $task, "/feature_extraction.txt"))),
                (TemplateId::FactorPropose,
                 include_str!(concat!("../templates/", $task, "/factor_propose.txt"))),
                (TemplateId::FactorAssign,
                 include_str!(concat!("../templates/", $task, "/factor_assign.txt"))),
                (TemplateId::FactorStatistics,
                 include_str!(concat!("../templates/", $task, "/factor_statistics.txt"))),
                (TemplateId::ReasoningConstruction,
                 include_str!(concat!("../templates/", $task, "/reasoning_construction.txt"))),
                (TemplateId::ReasoningAlignedGeneration,
                 include_str!(concat!("../templates/", $task, "/reasoning_aligned_generation.txt"))),
            ] {
                let template = PromptTemplate::new(id, body)
                    .expect("builtin template must be well-formed");
                map.insert(($task.to_string(), id), template);
            }
        )+
        map
    }};
}

/// Registry of templates keyed by (task id, stage).
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<(String, TemplateId), PromptTemplate>,
}

impl TemplateStore {
    /// The embedded template family for the four built-in tasks.
    pub fn builtin() -> Self {
        Self {
            templates: builtin_templates!("lamp2", "lamp3", "lamp5", "goqa"),
        }
    }

    pub fn empty() -> Self {
        Self {
            templates: BTreeMap::new(),
        }
    }

    /// Loads `<dir>/<task>/<stage>.txt` files on top of the current
    /// registry, overriding any existing entries.
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), PromptError> {
        let read = |p: &Path| -> Result<_, PromptError> {
            std::fs::read_dir(p).map_err(|source| PromptError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        for task_entry in read(dir)? {
            let task_entry = task_entry.map_err(|source| PromptError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            if !task_entry.path().is_dir() {
                continue;
            }
            let task = task_entry.file_name().to_string_lossy().to_string();
            for file in read(&task_entry.path())? {
                let file = file.map_err(|source| PromptError::Io {
                    path: task_entry.path().display().to_string(),
                    source,
                })?;
                let path = file.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let Some(id) = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(TemplateId::from_file_stem)
                else {
                    continue;
                };
                let body = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                self.templates
                    .insert((task.clone(), id), PromptTemplate::new(id, body)?);
            }
        }
        Ok(())
    }

    pub fn get(&self, task: &str, template: TemplateId) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&(task.to_string(), template))
            .ok_or_else(|| PromptError::MissingTemplate {
                task: task.to_string(),
                template,
            })
    }

    /// Renders the template registered for (task, stage) with the given
    /// bindings.
    pub fn render(
        &self,
        task: &str,
        template: TemplateId,
        bindings: &BTreeMap<&str, String>,
    ) -> Result<String, PromptError> {
        self.get(task, template)?.render(bindings)
    }
}

// ---------------------------------------------------------------------------
// Structured-output parsing
// ---------------------------------------------------------------------------

/// A feature as emitted by the extraction stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFeature {
    pub name: String,
    pub context: String,
    /// Factor label named by the model (factor-aware extraction only).
    pub factor_label: Option<String>,
}

/// One entry of the influence-evaluation output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedInfluence {
    pub feature_index: usize,
    pub influenced: bool,
    pub evaluation: Option<PolarityLabel>,
}

/// Answer of the assignment stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParsedAssignment {
    /// The model declined to assign the feature.
    Skip,
    /// Candidate index chosen by the model (not yet range-checked).
    Index(usize),
}

fn strip_code_fences(text: &str) -> String {
    if !text.contains("```") {
        return text.to_string();
    }
    let lines: Vec<&str> = text.lines().collect();
    let open = lines.iter().position(|l| l.trim_start().starts_with("```"));
    let Some(open) = open else {
        return text.to_string();
    };
    let close = lines[open + 1..]
        .iter()
        .position(|l| l.trim_start().starts_with("```"))
        .map(|p| p + open + 1);
    match close {
        Some(close) => lines[open + 1..close].join("\n"),
        None => lines[open + 1..].join("\n"),
    }
}

fn extract_balanced_object(text: &str) -> Option<String> {
    let bytes: Vec<char> = text.chars().collect();
    let start = bytes.iter().position(|&c| c == '{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(bytes[start..=i].iter().collect());
                }
            }
            _ => {}
        }
    }
    None
}

fn remove_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

/// Runs the repair pipeline and returns the first JSON value that
/// parses: raw text, fence-stripped, first balanced object, then
/// trailing-comma-cleaned. Repairs only remove characters.
pub fn repair_and_parse(completion: &str) -> Result<Value, ParseError> {
    if let Ok(v) = serde_json::from_str::<Value>(completion.trim()) {
        return Ok(v);
    }
    let stripped = strip_code_fences(completion);
    if let Ok(v) = serde_json::from_str::<Value>(stripped.trim()) {
        return Ok(v);
    }
    let balanced = extract_balanced_object(&stripped);
    if let Some(balanced) = &balanced {
        if let Ok(v) = serde_json::from_str::<Value>(balanced) {
            return Ok(v);
        }
        let cleaned = remove_trailing_commas(balanced);
        if let Ok(v) = serde_json::from_str::<Value>(&cleaned) {
            return Ok(v);
        }
    }
    Err(ParseError::new(
        "completion is not parseable JSON after repair passes",
        completion,
    ))
}

fn object<'v>(
    value: &'v Value,
    raw: &str,
) -> Result<&'v serde_json::Map<String, Value>, ParseError> {
    value
        .as_object()
        .ok_or_else(|| ParseError::new("expected a JSON object", raw))
}

fn string_field(
    map: &serde_json::Map<String, Value>,
    key: &str,
    raw: &str,
) -> Result<String, ParseError> {
    map.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ParseError::new(format!("missing string field `{key}`"), raw))
}

/// Parses the feature-extraction output schema.
pub fn parse_features(completion: &str) -> Result<Vec<ParsedFeature>, ParseError> {
    let value = repair_and_parse(completion)?;
    let map = object(&value, completion)?;
    let items = map
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| ParseError::new("missing `features` array", completion))?;
    let mut features = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let item = item
            .as_object()
            .ok_or_else(|| ParseError::new(format!("feature {i} is not an object"), completion))?;
        let name = string_field(item, "feature_name", completion)
            .map_err(|e| ParseError::new(format!("feature {i}: {}", e.message), completion))?;
        let context = string_field(item, "context", completion)
            .map_err(|e| ParseError::new(format!("feature {i}: {}", e.message), completion))?;
        if name.trim().is_empty() {
            return Err(ParseError::new(
                format!("feature {i}: empty feature_name"),
                completion,
            ));
        }
        if context.trim().is_empty() {
            return Err(ParseError::new(
                format!("feature {i}: empty context"),
                completion,
            ));
        }
        let factor_label = item
            .get("factor")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        features.push(ParsedFeature {
            name,
            context,
            factor_label,
        });
    }
    Ok(features)
}

/// Parses the factor-proposal output schema.
pub fn parse_factor_labels(completion: &str) -> Result<Vec<String>, ParseError> {
    let value = repair_and_parse(completion)?;
    let map = object(&value, completion)?;
    let items = map
        .get("factors")
        .and_then(Value::as_array)
        .ok_or_else(|| ParseError::new("missing `factors` array", completion))?;
    let mut labels = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let label = item
            .as_str()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                ParseError::new(format!("factor {i} is not a non-empty string"), completion)
            })?;
        labels.push(label.to_string());
    }
    Ok(labels)
}

/// Parses the assignment output schema. `-1`, `none` or an empty answer
/// mean the model declined; the returned index is not range-checked.
pub fn parse_assignment(completion: &str) -> Result<ParsedAssignment, ParseError> {
    let value = repair_and_parse(completion)?;
    let map = object(&value, completion)?;
    let field = map
        .get("assignments")
        .ok_or_else(|| ParseError::new("missing `assignments` field", completion))?;
    match field {
        Value::Number(n) => match n.as_i64() {
            Some(-1) => Ok(ParsedAssignment::Skip),
            Some(i) if i >= 0 => Ok(ParsedAssignment::Index(i as usize)),
            _ => Err(ParseError::new(
                format!("invalid assignment number {n}"),
                completion,
            )),
        },
        Value::Null => Ok(ParsedAssignment::Skip),
        Value::String(s) => {
            let s = s.trim();
            if s.is_empty() || s.eq_ignore_ascii_case("none") || s == "-1" {
                return Ok(ParsedAssignment::Skip);
            }
            s.parse::<usize>()
                .map(ParsedAssignment::Index)
                .map_err(|_| ParseError::new(format!("invalid assignment value `{s}`"), completion))
        }
        other => Err(ParseError::new(
            format!("assignment must be a number or string, got {other}"),
            completion,
        )),
    }
}

fn polarity_from_str(s: &str, raw: &str) -> Result<PolarityLabel, ParseError> {
    match s {
        "pos" => Ok(PolarityLabel::Pos),
        "neu" => Ok(PolarityLabel::Neu),
        "neg" => Ok(PolarityLabel::Neg),
        other => Err(ParseError::new(
            format!("evaluation must be one of pos/neu/neg, got `{other}`"),
            raw,
        )),
    }
}

/// Parses the influence-evaluation output schema. Out-of-vocabulary
/// evaluation strings and evaluation-without-influence are errors
/// rather than defaults.
pub fn parse_influences(completion: &str) -> Result<Vec<ParsedInfluence>, ParseError> {
    let value = repair_and_parse(completion)?;
    let map = object(&value, completion)?;
    let items = map
        .get("influences")
        .and_then(Value::as_array)
        .ok_or_else(|| ParseError::new("missing `influences` array", completion))?;
    let mut influences = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let item = item.as_object().ok_or_else(|| {
            ParseError::new(format!("influence {i} is not an object"), completion)
        })?;
        let feature_index = item
            .get("feature_index")
            .and_then(Value::as_u64)
            .ok_or_else(|| {
                ParseError::new(format!("influence {i}: missing feature_index"), completion)
            })? as usize;
        let influenced = item
            .get("influenced")
            .and_then(Value::as_bool)
            .ok_or_else(|| {
                ParseError::new(format!("influence {i}: missing influenced"), completion)
            })?;
        let evaluation = match item.get("evaluation") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(polarity_from_str(s.trim(), completion)?),
            Some(other) => {
                return Err(ParseError::new(
                    format!("influence {i}: evaluation must be a string, got {other}"),
                    completion,
                ))
            }
        };
        if influenced && evaluation.is_none() {
            return Err(ParseError::new(
                format!("influence {i}: influenced without evaluation"),
                completion,
            ));
        }
        if !influenced && evaluation.is_some() {
            return Err(ParseError::new(
                format!("influence {i}: evaluation present without influence"),
                completion,
            ));
        }
        influences.push(ParsedInfluence {
            feature_index,
            influenced,
            evaluation,
        });
    }
    Ok(influences)
}

/// Parses the reasoning-construction output schema.
pub fn parse_reasoning(completion: &str) -> Result<String, ParseError> {
    let value = repair_and_parse(completion)?;
    let map = object(&value, completion)?;
    let reasoning = string_field(map, "reasoning", completion)?;
    if reasoning.trim().is_empty() {
        return Err(ParseError::new("empty reasoning", completion));
    }
    Ok(reasoning)
}

/// Parses the final generation output: the answer under `answer_key`
/// plus, when requested, the reasoning field.
pub fn parse_generation(
    completion: &str,
    answer_key: &str,
    expect_reasoning: bool,
) -> Result<(Option<String>, String), ParseError> {
    let value = repair_and_parse(completion)?;
    let map = object(&value, completion)?;
    let answer = string_field(map, answer_key, completion)?;
    if answer.trim().is_empty() {
        return Err(ParseError::new(format!("empty `{answer_key}`"), completion));
    }
    let reasoning = if expect_reasoning {
        let r = string_field(map, "reasoning", completion)?;
        if r.trim().is_empty() {
            return Err(ParseError::new("empty reasoning", completion));
        }
        Some(r)
    } else {
        None
    };
    Ok((reasoning, answer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> TemplateStore {
        TemplateStore::builtin()
    }

    #[test]
    fn builtin_covers_all_tasks_and_stages() {
        let store = store();
        for task in ["lamp2", "lamp3", "lamp5", "goqa"] {
            for id in TemplateId::ALL {
                assert!(store.get(task, id).is_ok(), "missing {task}/{id}");
            }
        }
    }

    #[test]
    fn feature_extraction_renders_with_input_only() {
        let store = store();
        let bindings = BTreeMap::from([("abstract", "A study of things.".to_string())]);
        let prompt = store
            .render("lamp5", TemplateId::FeatureExtraction, &bindings)
            .unwrap();
        assert!(prompt.contains("Extract all relevant features"));
        assert!(prompt.contains("A study of things."));
        assert!(!prompt.contains("{abstract}"));
        assert!(!prompt.contains("{factor_context}"));
    }

    #[test]
    fn generation_prompt_begins_with_exemplars() {
        let store = store();
        let bindings = BTreeMap::from([
            ("reasoning_examples", "EX1\nEX2\nEX3".to_string()),
            ("factors", "- Methodology".to_string()),
            ("abstract", "Some abstract.".to_string()),
            ("features", "- A: b".to_string()),
            (
                "response_schema",
                "{ \"reasoning\": \"\", \"predicted_title\": \"\" }".to_string(),
            ),
        ]);
        let prompt = store
            .render("lamp5", TemplateId::ReasoningAlignedGeneration, &bindings)
            .unwrap();
        assert!(
            prompt.starts_with("Exemplars:"),
            "got: {}",
            &prompt[..40.min(prompt.len())]
        );
    }

    #[test]
    fn missing_binding_names_the_key() {
        let store = store();
        let err = store
            .render("lamp5", TemplateId::FeatureExtraction, &BTreeMap::new())
            .unwrap_err();
        match err {
            PromptError::MissingBinding { key, .. } => assert_eq!(key, "abstract"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn render_is_pure() {
        let store = store();
        let bindings = BTreeMap::from([("abstract", "same input".to_string())]);
        let a = store
            .render("lamp5", TemplateId::FeatureExtraction, &bindings)
            .unwrap();
        let b = store
            .render("lamp5", TemplateId::FeatureExtraction, &bindings)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn escaped_braces_and_required_keys() {
        let t = PromptTemplate::new(
            TemplateId::ReasoningConstruction,
            "Schema: {{ \"x\": \"\" }} for {thing}",
        )
        .unwrap();
        assert_eq!(t.required_keys, vec!["thing".to_string()]);
        let out = t
            .render(&BTreeMap::from([("thing", "value".to_string())]))
            .unwrap();
        assert_eq!(out, "Schema: { \"x\": \"\" } for value");
    }

    #[test]
    fn template_dir_overrides_builtin() {
        let dir = tempfile::TempDir::new().unwrap();
        let task_dir = dir.path().join("lamp5");
        std::fs::create_dir_all(&task_dir).unwrap();
        std::fs::write(
            task_dir.join("feature_extraction.txt"),
            "Custom extraction for {abstract}",
        )
        .unwrap();
        // A new task is added just by adding files.
        let new_task_dir = dir.path().join("recipes");
        std::fs::create_dir_all(&new_task_dir).unwrap();
        std::fs::write(
            new_task_dir.join("feature_extraction.txt"),
            "Extract ingredients from {recipe}",
        )
        .unwrap();

        let mut store = TemplateStore::builtin();
        store.load_dir(dir.path()).unwrap();
        let overridden = store
            .render(
                "lamp5",
                TemplateId::FeatureExtraction,
                &BTreeMap::from([("abstract", "X".to_string())]),
            )
            .unwrap();
        assert_eq!(overridden, "Custom extraction for X");
        // Untouched stages keep the builtin body.
        assert!(store.get("lamp5", TemplateId::FactorPropose).is_ok());
        let added = store
            .render(
                "recipes",
                TemplateId::FeatureExtraction,
                &BTreeMap::from([("recipe", "soup".to_string())]),
            )
            .unwrap();
        assert_eq!(added, "Extract ingredients from soup");
    }

    #[test]
    fn parse_features_example() {
        let parsed = parse_features(
            r#"{"features":[{"feature_name":"Taste","context":"the flavor of the product"}]}"#,
        )
        .unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].name, "Taste");
        assert_eq!(parsed[0].context, "the flavor of the product");
        assert_eq!(parsed[0].factor_label, None);
    }

    #[test]
    fn fenced_completion_parses_identically() {
        let plain = r#"{"features":[{"feature_name":"A","context":"b"}]}"#;
        let fenced = format!("```json\n{plain}\n```");
        assert_eq!(
            parse_features(plain).unwrap(),
            parse_features(&fenced).unwrap()
        );
    }

    #[test]
    fn prose_around_json_is_tolerated() {
        let text = "Sure! Here is the result:\n{\"reasoning\": \"because of X\"}\nHope that helps.";
        assert_eq!(parse_reasoning(text).unwrap(), "because of X");
    }

    #[test]
    fn trailing_commas_are_repaired() {
        let text = r#"{"factors": ["A", "B", ],}"#;
        assert_eq!(parse_factor_labels(text).unwrap(), vec!["A", "B"]);
    }

    #[test]
    fn parse_influences_example() {
        let parsed = parse_influences(
            r#"{"influences":[{"feature_index":0,"influenced":true,"evaluation":"pos"}]}"#,
        )
        .unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].feature_index, 0);
        assert!(parsed[0].influenced);
        assert_eq!(parsed[0].evaluation, Some(PolarityLabel::Pos));
    }

    #[test]
    fn out_of_vocabulary_evaluation_is_an_error() {
        let err = parse_influences(
            r#"{"influences":[{"feature_index":0,"influenced":true,"evaluation":"great"}]}"#,
        )
        .unwrap_err();
        assert!(err.message.contains("pos/neu/neg"));
        assert!(err.raw.contains("great"));
    }

    #[test]
    fn missing_feature_index_is_an_error() {
        let err = parse_influences(r#"{"influences":[{"influenced":false}]}"#).unwrap_err();
        assert!(err.message.contains("feature_index"));
    }

    #[test]
    fn assignment_variants() {
        assert_eq!(
            parse_assignment(r#"{"assignments":"2"}"#).unwrap(),
            ParsedAssignment::Index(2)
        );
        assert_eq!(
            parse_assignment(r#"{"assignments": 7}"#).unwrap(),
            ParsedAssignment::Index(7)
        );
        assert_eq!(
            parse_assignment(r#"{"assignments":"-1"}"#).unwrap(),
            ParsedAssignment::Skip
        );
        assert_eq!(
            parse_assignment(r#"{"assignments":"none"}"#).unwrap(),
            ParsedAssignment::Skip
        );
        assert_eq!(
            parse_assignment(r#"{"assignments":""}"#).unwrap(),
            ParsedAssignment::Skip
        );
    }

    #[test]
    fn generation_parses_answer_and_reasoning() {
        let (reasoning, answer) = parse_generation(
            r#"{"reasoning":"R","predicted_title":"T"}"#,
            "predicted_title",
            true,
        )
        .unwrap();
        assert_eq!(reasoning.as_deref(), Some("R"));
        assert_eq!(answer, "T");

        let (reasoning, answer) =
            parse_generation(r#"{"predicted_title":"T"}"#, "predicted_title", false).unwrap();
        assert_eq!(reasoning, None);
        assert_eq!(answer, "T");
    }

    #[test]
    fn unparseable_carries_raw_text() {
        let err = parse_reasoning("this is not json at all").unwrap_err();
        assert_eq!(err.raw, "this is not json at all");
    }

    #[test]
    fn empty_features_array_is_not_an_error() {
        assert!(parse_features(r#"{"features":[]}"#).unwrap().is_empty());
    }

    #[test]
    fn repairs_never_invent_fields() {
        let raw = "```json\n{\"factors\": [\"Methodology\", \"Evaluation\",]}\n```";
        let labels = parse_factor_labels(raw).unwrap();
        for label in labels {
            assert!(raw.contains(&label));
        }
    }

    #[test]
    fn parse_serialize_round_trip() {
        // parse_structured ∘ serialize = identity on the schema's value space
        let features = vec![
            ParsedFeature {
                name: "Location privacy".into(),
                context: "a critical issue".into(),
                factor_label: Some("Challenges".into()),
            },
            ParsedFeature {
                name: "Paillier cryptosystem".into(),
                context: "technical foundation".into(),
                factor_label: None,
            },
        ];
        let json = serde_json::json!({
            "features": features.iter().map(|f| {
                let mut m = serde_json::Map::new();
                m.insert("feature_name".into(), f.name.clone().into());
                m.insert("context".into(), f.context.clone().into());
                if let Some(l) = &f.factor_label {
                    m.insert("factor".into(), l.clone().into());
                }
                Value::Object(m)
            }).collect::<Vec<_>>()
        });
        let parsed = parse_features(&json.to_string()).unwrap();
        assert_eq!(parsed, features);
    }
}
