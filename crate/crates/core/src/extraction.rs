//! Questionnaire extraction against a language-model backend.
//!
//! Every note is turned into a prompt, sent through a [`Backend`], and the
//! completion is parsed into an [`AnswerSet`]. Parsing is deliberately
//! forgiving: the first JSON array (or object) of `Question Number`/`Label`
//! pairs anywhere in the completion is used, labels are normalized against
//! the question's categories, and any categorical question left unanswered
//! becomes `Unknown`. Extraction quality is measured with
//! [`validate_extraction`] against human annotations.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::io::stable_hash;
use crate::questionnaire::{build_prompt, PromptBundle, Question, Questionnaire, QuestionnaireError};
use crate::stats::wilson_interval;

/// Environment variable holding the bearer token for [`HttpBackend`].
pub const API_KEY_ENV: &str = "SDOH_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub patient_id: String,
    pub note_id: String,
    pub note_date: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Llm,
    Mock,
    Human,
}

/// One note's answers: a category label per categorical question and free
/// text per open-ended question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub patient_id: String,
    pub note_id: String,
    pub provenance: Provenance,
    pub labels: BTreeMap<u32, String>,
    #[serde(default)]
    pub free_text: BTreeMap<u32, String>,
}

impl AnswerSet {
    pub fn key(&self) -> (&str, &str) {
        (&self.patient_id, &self.note_id)
    }

    pub fn validate(&self, q: &Questionnaire) -> Result<(), ExtractionError> {
        for question in q.categorical() {
            let label = self.labels.get(&question.id).ok_or_else(|| ExtractionError::InvalidAnswer {
                note_id: self.note_id.clone(),
                message: format!("no label for question {}", question.id),
            })?;
            if question.category_index(label).is_none() {
                return Err(ExtractionError::InvalidAnswer {
                    note_id: self.note_id.clone(),
                    message: format!("label {label:?} is not a category of question {}", question.id),
                });
            }
        }
        for id in self.labels.keys() {
            if !q.get(*id).is_some_and(Question::is_categorical) {
                return Err(ExtractionError::InvalidAnswer {
                    note_id: self.note_id.clone(),
                    message: format!("label given for non-categorical question {id}"),
                });
            }
        }
        for id in self.free_text.keys() {
            if q.get(*id).is_none_or(Question::is_categorical) {
                return Err(ExtractionError::InvalidAnswer {
                    note_id: self.note_id.clone(),
                    message: format!("free text given for question {id}, which is not open-ended"),
                });
            }
        }
        Ok(())
    }

    /// Label for a categorical question, `Unknown` when absent.
    pub fn label<'a>(&'a self, question: &'a Question) -> &'a str {
        self.labels
            .get(&question.id)
            .map(String::as_str)
            .or_else(|| question.unknown_label())
            .unwrap_or(crate::questionnaire::UNKNOWN_LABEL)
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failure: {0}")]
    Auth(String),
    #[error("backend has no answer for this note: {0}")]
    UnknownNote(String),
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("no parseable JSON answer list in completion")]
    Parse { raw: String },
    #[error("backend authentication failed, aborting: {0}")]
    Auth(String),
    #[error("invalid answer for note {note_id}: {message}")]
    InvalidAnswer { note_id: String, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Prompt(#[from] QuestionnaireError),
}

/// Anything that can answer a prompt with completion text.
pub trait Backend: Sync {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, BackendError>;

    /// Largest note (in characters) the backend accepts.
    fn context_limit(&self) -> Option<usize> {
        None
    }
}

/// Literal labels the model uses to decline an answer.
const NO_ANSWER_LABELS: [&str; 3] = ["no label", "na", "no evidence"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedLabel {
    pub label: String,
    pub warning: Option<String>,
}

/// Maps a raw model label onto one of the question's categories.
pub fn normalize_label(raw_label: &str, question: &Question) -> NormalizedLabel {
    let unknown = question
        .unknown_label()
        .unwrap_or(crate::questionnaire::UNKNOWN_LABEL)
        .to_string();
    let folded = raw_label.trim().to_lowercase();
    if NO_ANSWER_LABELS.contains(&folded.as_str()) {
        return NormalizedLabel {
            label: unknown,
            warning: None,
        };
    }
    match question.find_category(raw_label) {
        Some(category) => NormalizedLabel {
            label: category.to_string(),
            warning: None,
        },
        None => NormalizedLabel {
            label: unknown,
            warning: Some(format!(
                "question {}: label {raw_label:?} is not a category, mapped to Unknown",
                question.id
            )),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedCompletion {
    pub labels: BTreeMap<u32, String>,
    pub free_text: BTreeMap<u32, String>,
    pub warnings: Vec<String>,
}

impl ParsedCompletion {
    pub fn into_answer_set(self, patient_id: &str, note_id: &str, provenance: Provenance) -> AnswerSet {
        AnswerSet {
            patient_id: patient_id.to_string(),
            note_id: note_id.to_string(),
            provenance,
            labels: self.labels,
            free_text: self.free_text,
        }
    }
}

fn key_matches(key: &str, target: &str) -> bool {
    key.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .eq(target.chars())
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, target: &str) -> Option<&'a Value> {
    obj.iter().find(|(k, _)| key_matches(k, target)).map(|(_, v)| v)
}

fn as_question_number(v: &Value) -> Option<u32> {
    match v {
        Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
        Value::String(s) => s.trim().trim_start_matches(['Q', 'q']).parse().ok(),
        Value::Array(items) if items.len() == 1 => as_question_number(&items[0]),
        _ => None,
    }
}

fn as_label(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "Yes" } else { "No" }.to_string()),
        _ => None,
    }
}

/// Answer entries carried by a JSON value, if it looks like an answer list.
fn answer_entries(v: &Value) -> Option<Vec<(u32, String)>> {
    let entry = |item: &Value| -> Option<(u32, String)> {
        let obj = item.as_object()?;
        let number = as_question_number(field(obj, "questionnumber")?)?;
        let label = as_label(field(obj, "label")?)?;
        Some((number, label))
    };
    match v {
        Value::Array(items) => {
            let entries: Vec<_> = items.iter().filter_map(entry).collect();
            (!entries.is_empty()).then_some(entries)
        }
        Value::Object(obj) => {
            if let Some(single) = entry(v) {
                return Some(vec![single]);
            }
            obj.values().find_map(|inner| match inner {
                Value::Array(_) => answer_entries(inner),
                _ => None,
            })
        }
        _ => None,
    }
}

/// First JSON value in `raw` that carries answer entries, scanning every
/// `[`/`{` start so fences and prose around the payload are ignored.
fn find_answer_payload(raw: &str) -> Option<Vec<(u32, String)>> {
    for (start, ch) in raw.char_indices() {
        if ch != '[' && ch != '{' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            if let Some(entries) = answer_entries(&value) {
                return Some(entries);
            }
        }
    }
    None
}

pub fn parse_completion(raw: &str, q: &Questionnaire) -> Result<ParsedCompletion, ExtractionError> {
    let entries = find_answer_payload(raw).ok_or_else(|| ExtractionError::Parse { raw: raw.to_string() })?;
    let mut parsed = ParsedCompletion::default();
    for (number, label) in entries {
        let Some(question) = q.get(number) else {
            parsed
                .warnings
                .push(format!("answer for unknown question {number} ignored"));
            continue;
        };
        if parsed.labels.contains_key(&number) || parsed.free_text.contains_key(&number) {
            parsed
                .warnings
                .push(format!("duplicate answer for question {number}; first kept"));
            continue;
        }
        if question.is_categorical() {
            let normalized = normalize_label(&label, question);
            parsed.warnings.extend(normalized.warning);
            parsed.labels.insert(number, normalized.label);
        } else {
            parsed.free_text.insert(number, label);
        }
    }
    for question in q.categorical() {
        if !parsed.labels.contains_key(&question.id) {
            parsed
                .warnings
                .push(format!("question {} unanswered, set to Unknown", question.id));
            let unknown = question.unknown_label().unwrap_or(crate::questionnaire::UNKNOWN_LABEL);
            parsed.labels.insert(question.id, unknown.to_string());
        }
    }
    Ok(parsed)
}

/// Renders answers the way a well-behaved model would.
pub fn render_completion(answers: &AnswerSet) -> String {
    let mut items: Vec<(u32, &str)> = answers
        .labels
        .iter()
        .chain(answers.free_text.iter())
        .map(|(k, v)| (*k, v.as_str()))
        .collect();
    items.sort_by_key(|(k, _)| *k);
    let payload: Vec<Value> = items
        .into_iter()
        .map(|(k, v)| serde_json::json!({"Question Number": k, "Label": v}))
        .collect();
    format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(&payload).expect("answers serialize")
    )
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub parallelism: usize,
    pub retries: usize,
    pub provenance: Provenance,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            parallelism: 1,
            retries: 2,
            provenance: Provenance::Llm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteFailure {
    pub index: usize,
    pub patient_id: String,
    pub note_id: String,
    pub attempts: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteWarning {
    pub patient_id: String,
    pub note_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExtractionOutcome {
    /// Successful notes, in input order.
    pub answers: Vec<AnswerSet>,
    pub failures: Vec<NoteFailure>,
    pub warnings: Vec<NoteWarning>,
}

enum NoteResult {
    Done(AnswerSet, Vec<String>),
    Failed(NoteFailure, Vec<String>),
}

fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

fn extract_one(
    backend: &dyn Backend,
    q: &Questionnaire,
    note: &NoteRecord,
    index: usize,
    opts: &ExtractOptions,
    abort: &AtomicBool,
) -> Result<NoteResult, ExtractionError> {
    let mut warnings = Vec::new();
    let mut text = note.text.as_str();
    if let Some(limit) = backend.context_limit() {
        let truncated = truncate_chars(text, limit);
        if truncated.len() < text.len() {
            warnings.push(format!(
                "note truncated from {} to {limit} characters to fit the backend context",
                text.chars().count()
            ));
            text = truncated;
        }
    }
    let prompt = build_prompt(q, text)?;
    let attempts = opts.retries + 1;
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        if abort.load(Ordering::Relaxed) {
            break;
        }
        match backend.complete(&prompt) {
            Ok(raw) => match parse_completion(&raw, q) {
                Ok(parsed) => {
                    warnings.extend(parsed.warnings.iter().cloned());
                    let answers = parsed.into_answer_set(&note.patient_id, &note.note_id, opts.provenance);
                    return Ok(NoteResult::Done(answers, warnings));
                }
                Err(e) => last_error = format!("attempt {attempt}: {e}"),
            },
            Err(BackendError::Auth(msg)) => {
                abort.store(true, Ordering::Relaxed);
                return Err(ExtractionError::Auth(msg));
            }
            Err(e) => last_error = format!("attempt {attempt}: {e}"),
        }
    }
    Ok(NoteResult::Failed(
        NoteFailure {
            index,
            patient_id: note.patient_id.clone(),
            note_id: note.note_id.clone(),
            attempts,
            message: last_error,
        },
        warnings,
    ))
}

/// Runs the questionnaire over every note with up to `parallelism`
/// concurrent backend calls. Output order follows input order.
pub fn extract_answers(
    backend: &dyn Backend,
    q: &Questionnaire,
    notes: &[NoteRecord],
    opts: &ExtractOptions,
) -> Result<ExtractionOutcome, ExtractionError> {
    if opts.parallelism == 0 {
        return Err(ExtractionError::Input("parallelism must be at least 1".into()));
    }
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<NoteResult>>> = Mutex::new((0..notes.len()).map(|_| None).collect());
    let first_error: Mutex<Option<ExtractionError>> = Mutex::new(None);
    let workers = opts.parallelism.min(notes.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= notes.len() {
                    return;
                }
                match extract_one(backend, q, &notes[i], i, opts, &abort) {
                    Ok(result) => slots.lock().expect("slot lock")[i] = Some(result),
                    Err(e) => {
                        abort.store(true, Ordering::Relaxed);
                        first_error.lock().expect("error lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let mut outcome = ExtractionOutcome::default();
    for (note, slot) in notes.iter().zip(slots.into_inner().expect("slot lock")) {
        let (warnings, done) = match slot.expect("every note processed") {
            NoteResult::Done(answers, warnings) => (warnings, Some(answers)),
            NoteResult::Failed(failure, warnings) => {
                outcome.failures.push(failure);
                (warnings, None)
            }
        };
        outcome.answers.extend(done);
        outcome.warnings.extend(warnings.into_iter().map(|message| NoteWarning {
            patient_id: note.patient_id.clone(),
            note_id: note.note_id.clone(),
            message,
        }));
    }
    Ok(outcome)
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_note_chars: Option<usize>,
}

impl HttpBackend {
    /// Reads the bearer token from [`API_KEY_ENV`].
    pub fn from_env(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend {
            url: url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(120),
            max_note_chars: None,
        }
    }

    pub fn request_body(&self, prompt: &PromptBundle) -> Value {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.system_instructions},
                {"role": "user", "content": prompt.user_message()},
            ],
            "temperature": 0,
        })
    }
}

/// Pulls the assistant text out of a chat-completions response.
pub fn completion_text(response: &Value) -> Option<String> {
    response
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(self.request_body(prompt))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(format!("HTTP {status}"))),
            _ => return Err(BackendError::Transport(format!("HTTP {status}: {body}"))),
        }
        let json: Value = serde_json::from_str(&body).map_err(|e| BackendError::Transport(e.to_string()))?;
        completion_text(&json).ok_or_else(|| BackendError::Transport("response has no message content".into()))
    }

    fn context_limit(&self) -> Option<usize> {
        self.max_note_chars
    }
}

/// Per-question probability of replacing the true label with another
/// category; deterministic in (seed, note, question).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelNoise {
    pub default_rate: f64,
    pub per_question: BTreeMap<u32, f64>,
    pub seed: u64,
}

impl LabelNoise {
    pub fn none() -> Self {
        LabelNoise::default()
    }

    pub fn on_question(question: u32, rate: f64, seed: u64) -> Self {
        LabelNoise {
            default_rate: 0.0,
            per_question: BTreeMap::from([(question, rate)]),
            seed,
        }
    }

    fn rate(&self, question: u32) -> f64 {
        self.per_question.get(&question).copied().unwrap_or(self.default_rate)
    }

    /// Applies noise to a copy of `truth`.
    pub fn corrupt(&self, truth: &AnswerSet, q: &Questionnaire) -> AnswerSet {
        let mut out = truth.clone();
        for question in q.categorical() {
            let rate = self.rate(question.id);
            if rate <= 0.0 {
                continue;
            }
            let Some(current) = out.labels.get(&question.id).cloned() else {
                continue;
            };
            let seed = stable_hash(&[
                &self.seed.to_le_bytes(),
                truth.patient_id.as_bytes(),
                truth.note_id.as_bytes(),
                &question.id.to_le_bytes(),
            ]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if rng.random::<f64>() >= rate {
                continue;
            }
            let others: Vec<&String> = question.categories.iter().filter(|c| **c != current).collect();
            if others.is_empty() {
                continue;
            }
            let pick = others[rng.random_range(0..others.len())].clone();
            out.labels.insert(question.id, pick);
        }
        out
    }
}

/// Deterministic backend that replays known answers, keyed by note text.
pub struct ReplayBackend {
    questionnaire: Questionnaire,
    by_text: HashMap<String, AnswerSet>,
    noise: LabelNoise,
}

impl ReplayBackend {
    pub fn new(q: &Questionnaire, notes: &[NoteRecord], answers: &[AnswerSet], noise: LabelNoise) -> Result<Self, ExtractionError> {
        let by_key: HashMap<(&str, &str), &AnswerSet> = answers.iter().map(|a| (a.key(), a)).collect();
        let mut by_text = HashMap::with_capacity(notes.len());
        for note in notes {
            let planted = by_key
                .get(&(note.patient_id.as_str(), note.note_id.as_str()))
                .ok_or_else(|| ExtractionError::Input(format!("no planted answers for note {}", note.note_id)))?;
            by_text.insert(note.text.clone(), (*planted).clone());
        }
        Ok(ReplayBackend {
            questionnaire: q.clone(),
            by_text,
            noise,
        })
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let text = prompt.note_text();
        let truth = self
            .by_text
            .get(text)
            .ok_or_else(|| BackendError::UnknownNote(truncate_chars(text, 60).to_string()))?;
        Ok(render_completion(&self.noise.corrupt(truth, &self.questionnaire)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub correct: u64,
    pub n: u64,
}

impl AccuracyEstimate {
    fn from_counts(correct: u64, n: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(correct, n, crate::stats::Z_95);
        AccuracyEstimate {
            accuracy: correct as f64 / n as f64,
            ci_low,
            ci_high,
            correct,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionValidation {
    #[serde(flatten)]
    pub estimate: AccuracyEstimate,
    pub categories: Vec<String>,
    /// Rows are gold labels, columns predicted labels.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub per_question: BTreeMap<u32, QuestionValidation>,
    /// Pooled over every (note, categorical question) instance.
    pub overall: AccuracyEstimate,
    pub n_pairs: usize,
}

pub fn validate_extraction(
    predicted: &[AnswerSet],
    gold: &[AnswerSet],
    q: &Questionnaire,
) -> Result<ValidationReport, ExtractionError> {
    if let Some(bad) = gold.iter().find(|g| g.provenance != Provenance::Human) {
        return Err(ExtractionError::Input(format!(
            "gold answers for note {} are not human annotations",
            bad.note_id
        )));
    }
    let predicted_by_key: HashMap<(&str, &str), &AnswerSet> = predicted.iter().map(|a| (a.key(), a)).collect();
    let pairs: Vec<(&AnswerSet, &AnswerSet)> = gold
        .iter()
        .filter_map(|g| predicted_by_key.get(&g.key()).map(|p| (g, *p)))
        .collect();
    if pairs.is_empty() {
        return Err(ExtractionError::Input("predicted and gold answers share no notes".into()));
    }

    let mut per_question = BTreeMap::new();
    let (mut pooled_correct, mut pooled_n) = (0u64, 0u64);
    for question in q.categorical() {
        let k = question.categories.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (g, p) in &pairs {
            let index = |a: &AnswerSet| {
                let label = a.label(question);
                question.category_index(label).ok_or_else(|| ExtractionError::InvalidAnswer {
                    note_id: a.note_id.clone(),
                    message: format!("label {label:?} is not a category of question {}", question.id),
                })
            };
            confusion[index(g)?][index(p)?] += 1;
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let n = pairs.len() as u64;
        pooled_correct += correct;
        pooled_n += n;
        per_question.insert(
            question.id,
            QuestionValidation {
                estimate: AccuracyEstimate::from_counts(correct, n),
                categories: question.categories.clone(),
                confusion,
            },
        );
    }
    if pooled_n == 0 {
        return Err(ExtractionError::Input("questionnaire has no categorical questions".into()));
    }
    Ok(ValidationReport {
        per_question,
        overall: AccuracyEstimate::from_counts(pooled_correct, pooled_n),
        n_pairs: pairs.len(),
    })
}
