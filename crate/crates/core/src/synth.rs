//! Synthetic cohorts with planted prevalences and outcome models.
//!
//! A [`CohortSpec`] fixes group sizes, per-group factor prevalences (with an
//! optional linear drift over evaluation years), clamped-normal clinical
//! covariates and two logistic outcome models written over encoded column
//! names. [`generate`] samples a cohort, template-composed notes and the
//! planted answer sets; [`expected_stats`] computes the matching population
//! quantities without sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::encoding::{
    one_hot_name, race_column, sex_column, write_cohort_csv, EncodingError, PatientRecord, RaceEthnicity,
    Recommendation, Sex, CLINICAL_COLUMNS, LISTED_OUTCOME, REC_OUTCOME, YEAR_COLUMN,
};
use crate::extraction::{
    render_completion, AnswerSet, Backend, BackendError, ExtractionError, LabelNoise, NoteRecord, Provenance,
    ReplayBackend,
};
use crate::io::write_jsonl;
use crate::questionnaire::{PromptBundle, Question, Questionnaire, Role, UNKNOWN_LABEL};

/// Question whose answer carries the recommendation outcome.
const REC_QUESTION: u32 = 26;
/// Grid step on the logit scale used by [`expected_stats`].
const ETA_STEP: f64 = 0.002;
/// Probability mass below which distribution tails are dropped.
const TAIL_MASS: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn spec_err<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::Spec(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl YearRange {
    pub fn len(&self) -> usize {
        (self.end - self.start + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = i32> {
        self.start..=self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub size: usize,
    pub race: RaceEthnicity,
    pub sex: Sex,
    /// Added to the MELD mean before clamping.
    #[serde(default)]
    pub meld_shift: f64,
}

/// A planted binary factor on one categorical question. Each patient's
/// answer is `Unknown` with probability `unknown_rate`, otherwise `present`
/// with the group's probability for their evaluation year, else `absent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub question: u32,
    pub present: String,
    pub absent: String,
    pub base_prevalence: f64,
    /// Overrides `base_prevalence` for the named groups.
    #[serde(default)]
    pub group_prevalence: BTreeMap<String, f64>,
    /// Change in prevalence per year after the first study year.
    #[serde(default)]
    pub drift_per_year: f64,
    #[serde(default)]
    pub unknown_rate: f64,
}

impl FactorSpec {
    /// Probability of `present` among known answers for a group and year.
    pub fn prevalence(&self, group: &str, year: i32, start: i32) -> f64 {
        let base = self.group_prevalence.get(group).copied().unwrap_or(self.base_prevalence);
        base + self.drift_per_year * f64::from(year - start)
    }

    pub fn present_column(&self) -> String {
        one_hot_name(self.question, &self.present)
    }

    pub fn absent_column(&self) -> String {
        one_hot_name(self.question, &self.absent)
    }

    pub fn unknown_column(&self) -> String {
        one_hot_name(self.question, UNKNOWN_LABEL)
    }
}

/// Normal draw clamped into `[min, max]`; the clamped tails become point
/// masses at the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampedNormal {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl ClampedNormal {
    fn sample(&self, rng: &mut ChaCha8Rng, shift: f64) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mean + shift + self.sd * z).clamp(self.min, self.max)
    }

    fn cdf(&self, shift: f64, x: f64) -> f64 {
        if x < self.min {
            0.0
        } else if x >= self.max {
            1.0
        } else {
            Normal::new(self.mean + shift, self.sd).expect("sd validated").cdf(x)
        }
    }

    fn validate(&self, name: &str) -> Result<(), SynthError> {
        if !(self.sd > 0.0 && self.sd.is_finite()) || !self.mean.is_finite() {
            return spec_err(format!("{name}: sd must be positive and mean finite"));
        }
        if self.min >= self.max || !self.min.is_finite() || !self.max.is_finite() {
            return spec_err(format!("{name}: min must be below max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalSpec {
    pub meld: ClampedNormal,
    pub bmi: ClampedNormal,
    pub age: ClampedNormal,
    pub hcc_rate: f64,
}

/// `P(y=1) = sigmoid(intercept + Σ coef · column)` over raw encoded values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub rec: LogisticModel,
    pub listed: LogisticModel,
    /// Share of positive recommendations written as conditional on a care plan.
    #[serde(default)]
    pub provisional_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub name: String,
    pub years: YearRange,
    pub groups: Vec<GroupSpec>,
    pub factors: Vec<FactorSpec>,
    pub clinical: ClinicalSpec,
    pub outcomes: OutcomeSpec,
    /// Sentence per `q<id>=<category>` key; missing keys get a default
    /// built from the question text.
    #[serde(default)]
    pub note_templates: BTreeMap<String, String>,
}

impl CohortSpec {
    pub fn n_patients(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self, q: &Questionnaire) -> Result<(), SynthError> {
        resolve(self, q).map(|_| ())
    }
}

/// A term of a logistic model resolved against the generated columns.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Meld,
    Hcc,
    Bmi,
    Age,
    Race(RaceEthnicity),
    Sex(Sex),
    Year,
    Answer { factor: usize, state: FactorState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactorState {
    Present,
    Absent,
    Unknown,
}

const STATES: [FactorState; 3] = [FactorState::Present, FactorState::Absent, FactorState::Unknown];

#[derive(Debug, Clone)]
struct Resolved {
    rec: Vec<(Term, f64)>,
    listed: Vec<(Term, f64)>,
    /// Template sentence per (question, category).
    templates: BTreeMap<(u32, String), String>,
}

impl Resolved {
    fn model(&self, outcome: Outcome) -> &[(Term, f64)] {
        match outcome {
            Outcome::Rec => &self.rec,
            Outcome::Listed => &self.listed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Rec,
    Listed,
}

const OUTCOMES: [Outcome; 2] = [Outcome::Rec, Outcome::Listed];

impl Outcome {
    fn name(self) -> &'static str {
        match self {
            Outcome::Rec => REC_OUTCOME,
            Outcome::Listed => LISTED_OUTCOME,
        }
    }

    fn model(self, spec: &CohortSpec) -> &LogisticModel {
        match self {
            Outcome::Rec => &spec.outcomes.rec,
            Outcome::Listed => &spec.outcomes.listed,
        }
    }
}

fn default_template(question: &Question, category: &str) -> String {
    format!("{} {category}.", question.text)
}

fn resolve(spec: &CohortSpec, q: &Questionnaire) -> Result<Resolved, SynthError> {
    if spec.years.is_empty() {
        return spec_err("years.end is before years.start");
    }
    if spec.groups.is_empty() {
        return spec_err("no groups");
    }
    let mut labels = BTreeSet::new();
    for g in &spec.groups {
        if g.size == 0 {
            return spec_err(format!("group {} has size 0", g.label));
        }
        if !labels.insert(g.label.as_str()) {
            return spec_err(format!("duplicate group label {}", g.label));
        }
        if !g.meld_shift.is_finite() {
            return spec_err(format!("group {} meld_shift is not finite", g.label));
        }
    }
    let unit = |name: &str, p: f64| {
        if (0.0..=1.0).contains(&p) {
            Ok(())
        } else {
            spec_err(format!("{name} = {p} is not a probability"))
        }
    };

    let rec_question = q
        .get(REC_QUESTION)
        .filter(|x| x.is_categorical())
        .ok_or_else(|| SynthError::Spec(format!("questionnaire has no categorical question {REC_QUESTION}")))?;
    for label in ["Recommended", "Recommended Provided Compliance with Care Plan", "Not Recommended"] {
        if rec_question.category_index(label).is_none() {
            return spec_err(format!("question {REC_QUESTION} lacks category {label:?}"));
        }
    }

    let mut columns: HashMap<String, Term> = HashMap::new();
    columns.insert("meld".into(), Term::Meld);
    columns.insert("hcc".into(), Term::Hcc);
    columns.insert("bmi".into(), Term::Bmi);
    columns.insert("age".into(), Term::Age);
    columns.insert(YEAR_COLUMN.into(), Term::Year);
    for r in RaceEthnicity::ALL {
        columns.insert(race_column(r), Term::Race(r));
    }
    for s in Sex::ALL {
        columns.insert(sex_column(s), Term::Sex(s));
    }

    let mut seen = BTreeSet::new();
    for (i, f) in spec.factors.iter().enumerate() {
        let question = q
            .get(f.question)
            .ok_or_else(|| SynthError::Spec(format!("factor question {} is not in the questionnaire", f.question)))?;
        if !question.is_categorical() || question.role != Role::Sdoh {
            return spec_err(format!("factor question {} is not a categorical sdoh question", f.question));
        }
        if !seen.insert(f.question) {
            return spec_err(format!("question {} is planted twice", f.question));
        }
        if question.unknown_label() != Some(UNKNOWN_LABEL) {
            return spec_err(format!("question {} has no {UNKNOWN_LABEL} category", f.question));
        }
        for (name, cat) in [("present", &f.present), ("absent", &f.absent)] {
            if question.category_index(cat).is_none() || cat == UNKNOWN_LABEL {
                return spec_err(format!("question {}: {name} {cat:?} is not a known category", f.question));
            }
        }
        if f.present == f.absent {
            return spec_err(format!("question {}: present and absent coincide", f.question));
        }
        unit(&format!("q{} unknown_rate", f.question), f.unknown_rate)?;
        for key in f.group_prevalence.keys() {
            if !labels.contains(key.as_str()) {
                return spec_err(format!("question {}: unknown group {key}", f.question));
            }
        }
        if !f.drift_per_year.is_finite() {
            return spec_err(format!("question {}: drift is not finite", f.question));
        }
        for g in &spec.groups {
            for year in spec.years.iter() {
                unit(
                    &format!("q{} prevalence for {} in {year}", f.question, g.label),
                    f.prevalence(&g.label, year, spec.years.start),
                )?;
            }
        }
        columns.insert(f.present_column(), Term::Answer { factor: i, state: FactorState::Present });
        columns.insert(f.absent_column(), Term::Answer { factor: i, state: FactorState::Absent });
        columns.insert(f.unknown_column(), Term::Answer { factor: i, state: FactorState::Unknown });
    }

    spec.clinical.meld.validate("meld")?;
    spec.clinical.bmi.validate("bmi")?;
    spec.clinical.age.validate("age")?;
    if spec.clinical.meld.min < 6.0 || spec.clinical.meld.max > 40.0 {
        return spec_err("meld bounds must lie within 6-40");
    }
    if spec.clinical.age.min <= 17.0 {
        return spec_err("age minimum must be adult");
    }
    unit("hcc_rate", spec.clinical.hcc_rate)?;
    unit("provisional_fraction", spec.outcomes.provisional_fraction)?;

    let mut models = Vec::new();
    for outcome in OUTCOMES {
        let model = outcome.model(spec);
        if !model.intercept.is_finite() {
            return spec_err(format!("{} intercept is not finite", outcome.name()));
        }
        let mut terms = Vec::new();
        for (name, &coef) in &model.coefficients {
            let term = columns.get(name).ok_or_else(|| {
                SynthError::Spec(format!("{} coefficient on unknown column {name:?}", outcome.name()))
            })?;
            if !coef.is_finite() {
                return spec_err(format!("{} coefficient on {name} is not finite", outcome.name()));
            }
            if coef != 0.0 {
                terms.push((*term, coef));
            }
        }
        models.push(terms);
    }
    let listed = models.pop().expect("two models");
    let rec = models.pop().expect("two models");

    // every category of every templated question gets a sentence
    let mut templates = BTreeMap::new();
    let mut questions: Vec<&Question> = spec.factors.iter().filter_map(|f| q.get(f.question)).collect();
    questions.push(rec_question);
    let templated: BTreeSet<u32> = questions.iter().map(|x| x.id).collect();
    for key in spec.note_templates.keys() {
        let known = key
            .strip_prefix('q')
            .and_then(|rest| rest.split_once('='))
            .and_then(|(id, cat)| Some((id.parse::<u32>().ok()?, cat)))
            .filter(|(id, cat)| templated.contains(id) && q.get(*id).is_some_and(|x| x.category_index(cat).is_some()));
        if known.is_none() {
            return spec_err(format!("template key {key:?} does not name a planted question category"));
        }
    }
    let mut sentences = BTreeSet::new();
    for question in questions {
        for cat in &question.categories {
            if cat == UNKNOWN_LABEL {
                continue;
            }
            let sentence = spec
                .note_templates
                .get(&one_hot_name(question.id, cat))
                .cloned()
                .unwrap_or_else(|| default_template(question, cat));
            if sentence.trim().is_empty() || sentence.contains('\n') || sentence != sentence.trim() {
                return spec_err(format!("template for q{}={cat} must be one non-empty trimmed line", question.id));
            }
            if sentence.starts_with(NOTE_HEADER) {
                return spec_err(format!("template for q{}={cat} collides with the note header", question.id));
            }
            if !sentences.insert(sentence.clone()) {
                return spec_err(format!("template sentence {sentence:?} is used twice"));
            }
            templates.insert((question.id, cat.clone()), sentence);
        }
    }
    Ok(Resolved { rec, listed, templates })
}

const NOTE_HEADER: &str = "Psychosocial evaluation note";

/// Everything the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub answers: Vec<AnswerSet>,
    pub prevalences: Vec<PlantedPrevalence>,
    pub rec_model: LogisticModel,
    pub listed_model: LogisticModel,
    pub expectations: Expectations,
}

/// Planted probability of a factor's `present` category for one group,
/// after the unknown rate is applied, per study year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPrevalence {
    pub column: String,
    pub group: String,
    pub by_year: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub group: String,
    pub size: usize,
    pub expected_rec: f64,
    pub expected_listed: f64,
}

/// Expected outcome rate inside and outside a demographic column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnGap {
    pub outcome: String,
    pub column: String,
    pub mean_in: f64,
    pub mean_out: f64,
    pub gap: f64,
}

/// Expected prevalence of a factor column in a demographic column versus
/// the rest of the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCell {
    pub factor: String,
    pub group: String,
    pub group_prevalence: f64,
    pub complement_prevalence: f64,
    pub baseline: f64,
    /// Group minus overall prevalence, in percentage points.
    pub delta_pp: f64,
    /// True when the group and complement prevalences differ.
    pub planted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedTrend {
    pub factor: String,
    pub years: Vec<i32>,
    pub prevalence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    pub n: usize,
    pub rec_rate: f64,
    pub listed_rate: f64,
    /// Bayes-optimal AUROC per outcome; `None` when one class has no mass.
    pub bayes_auroc: BTreeMap<String, Option<f64>>,
    pub groups: Vec<GroupOutcome>,
    pub column_gaps: Vec<ColumnGap>,
    pub cells: Vec<ExpectedCell>,
    pub trends: Vec<ExpectedTrend>,
}

impl Expectations {
    pub fn column_gap(&self, outcome: &str, column: &str) -> Option<&ColumnGap> {
        self.column_gaps.iter().find(|g| g.outcome == outcome && g.column == column)
    }

    pub fn cell(&self, factor: &str, group: &str) -> Option<&ExpectedCell> {
        self.cells.iter().find(|c| c.factor == factor && c.group == group)
    }

    pub fn planted_cells(&self) -> impl Iterator<Item = &ExpectedCell> {
        self.cells.iter().filter(|c| c.planted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub cohort: Vec<PatientRecord>,
    pub notes: Vec<NoteRecord>,
    pub truth: GroundTruth,
}

pub const COHORT_FILE: &str = "cohort.csv";
pub const NOTES_FILE: &str = "notes.jsonl";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

impl SynthOutput {
    /// Writes cohort CSV, notes and planted answers as JSONL, and the ground
    /// truth as JSON. Returns the written paths.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>, SynthError> {
        std::fs::create_dir_all(dir)?;
        let path = |name: &str| dir.join(name);
        write_cohort_csv(BufWriter::new(File::create(path(COHORT_FILE))?), &self.cohort)?;
        let mut w = BufWriter::new(File::create(path(NOTES_FILE))?);
        write_jsonl(&mut w, &self.notes)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(path(ANSWERS_FILE))?);
        write_jsonl(&mut w, &self.truth.answers)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(path(TRUTH_FILE))?);
        serde_json::to_writer_pretty(&mut w, &self.truth)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok([COHORT_FILE, NOTES_FILE, ANSWERS_FILE, TRUTH_FILE].iter().map(|n| path(n)).collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Draw {
    meld: f64,
    hcc: bool,
    bmi: f64,
    age: f64,
    year: i32,
    race: RaceEthnicity,
    sex: Sex,
    states: Vec<FactorState>,
}

impl Draw {
    fn value(&self, term: Term) -> f64 {
        let flag = |b: bool| f64::from(u8::from(b));
        match term {
            Term::Meld => self.meld,
            Term::Hcc => flag(self.hcc),
            Term::Bmi => self.bmi,
            Term::Age => self.age,
            Term::Race(r) => flag(self.race == r),
            Term::Sex(s) => flag(self.sex == s),
            Term::Year => f64::from(self.year),
            Term::Answer { factor, state } => flag(self.states[factor] == state),
        }
    }

    fn eta(&self, model: &LogisticModel, terms: &[(Term, f64)]) -> f64 {
        model.intercept + terms.iter().map(|&(t, c)| c * self.value(t)).sum::<f64>()
    }
}

fn days_in_year(year: i32) -> u32 {
    NaiveDate::from_ymd_opt(year, 12, 31).expect("valid year").ordinal()
}

/// Samples a cohort. Patient `i` draws from its own ChaCha stream of `seed`,
/// so output does not depend on thread scheduling.
pub fn generate(spec: &CohortSpec, q: &Questionnaire, seed: u64) -> Result<SynthOutput, SynthError> {
    let resolved = resolve(spec, q)?;
    let slots: Vec<(usize, &GroupSpec)> = spec
        .groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(g, g.size))
        .enumerate()
        .collect();
    let rec_question = q.get(REC_QUESTION).expect("resolved");

    let rows: Vec<(PatientRecord, NoteRecord, AnswerSet)> = slots
        .par_iter()
        .map(|&(i, group)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let year = rng.random_range(spec.years.start..=spec.years.end);
            let day = rng.random_range(1..=days_in_year(year));
            let c = &spec.clinical;
            let meld = c.meld.sample(&mut rng, group.meld_shift);
            let bmi = c.bmi.sample(&mut rng, 0.0);
            let age = c.age.sample(&mut rng, 0.0);
            let hcc = rng.random::<f64>() < c.hcc_rate;
            let states = spec
                .factors
                .iter()
                .map(|f| {
                    let u: f64 = rng.random();
                    let v: f64 = rng.random();
                    if u < f.unknown_rate {
                        FactorState::Unknown
                    } else if v < f.prevalence(&group.label, year, spec.years.start) {
                        FactorState::Present
                    } else {
                        FactorState::Absent
                    }
                })
                .collect();
            let draw = Draw {
                meld,
                hcc,
                bmi,
                age,
                year,
                race: group.race,
                sex: group.sex,
                states,
            };
            let rec_u: f64 = rng.random();
            let provisional_u: f64 = rng.random();
            let listed_u: f64 = rng.random();
            let rec = rec_u < sigmoid(draw.eta(&spec.outcomes.rec, &resolved.rec));
            let listed = listed_u < sigmoid(draw.eta(&spec.outcomes.listed, &resolved.listed));
            let recommendation = match (rec, provisional_u < spec.outcomes.provisional_fraction) {
                (false, _) => Recommendation::NotRecommended,
                (true, true) => Recommendation::Provisional,
                (true, false) => Recommendation::Recommended,
            };

            let patient_id = format!("P{:05}", i + 1);
            let note_id = format!("N{:05}", i + 1);
            let mut labels: BTreeMap<u32, String> = q
                .categorical()
                .map(|x| (x.id, x.unknown_label().unwrap_or(UNKNOWN_LABEL).to_string()))
                .collect();
            for (f, state) in spec.factors.iter().zip(&draw.states) {
                let label = match state {
                    FactorState::Present => f.present.clone(),
                    FactorState::Absent => f.absent.clone(),
                    FactorState::Unknown => UNKNOWN_LABEL.to_string(),
                };
                labels.insert(f.question, label);
            }
            let rec_label = match recommendation {
                Recommendation::Recommended => "Recommended",
                Recommendation::Provisional => "Recommended Provided Compliance with Care Plan",
                _ => "Not Recommended",
            };
            labels.insert(rec_question.id, rec_label.to_string());

            let mut text = format!("{NOTE_HEADER} {note_id}.");
            for (id, label) in &labels {
                if let Some(sentence) = resolved.templates.get(&(*id, label.clone())) {
                    text.push('\n');
                    text.push_str(sentence);
                }
            }
            let record = PatientRecord {
                patient_id: patient_id.clone(),
                age: Some(age),
                sex: group.sex,
                race_ethnicity: group.race,
                meld: Some(meld),
                // exception points lift HCC candidates to a floor
                meld_with_exceptions: Some(if hcc { meld.max(28.0) } else { meld }),
                hcc: Some(hcc),
                bmi: Some(bmi),
                eval_year: year,
                recommended: Some(recommendation),
                listed: Some(listed),
            };
            let note = NoteRecord {
                patient_id: patient_id.clone(),
                note_id: note_id.clone(),
                note_date: NaiveDate::from_yo_opt(year, day).expect("day within year"),
                text,
            };
            let answers = AnswerSet {
                patient_id,
                note_id,
                provenance: Provenance::Human,
                labels,
                free_text: BTreeMap::new(),
            };
            (record, note, answers)
        })
        .collect();

    let mut cohort = Vec::with_capacity(rows.len());
    let mut notes = Vec::with_capacity(rows.len());
    let mut answers = Vec::with_capacity(rows.len());
    for (r, n, a) in rows {
        cohort.push(r);
        notes.push(n);
        answers.push(a);
    }
    let truth = GroundTruth {
        seed,
        answers,
        prevalences: planted_prevalences(spec),
        rec_model: spec.outcomes.rec.clone(),
        listed_model: spec.outcomes.listed.clone(),
        expectations: expectations(spec, &resolved),
    };
    Ok(SynthOutput { cohort, notes, truth })
}

fn planted_prevalences(spec: &CohortSpec) -> Vec<PlantedPrevalence> {
    let mut out = Vec::new();
    for f in &spec.factors {
        for g in &spec.groups {
            let by_year: Vec<f64> = spec
                .years
                .iter()
                .map(|y| (1.0 - f.unknown_rate) * f.prevalence(&g.label, y, spec.years.start))
                .collect();
            let mean = by_year.iter().sum::<f64>() / by_year.len() as f64;
            out.push(PlantedPrevalence {
                column: f.present_column(),
                group: g.label.clone(),
                by_year,
                mean,
            });
        }
    }
    out
}

/// Population quantities implied by a cohort spec, computed without sampling.
pub fn expected_stats(spec: &CohortSpec, q: &Questionnaire) -> Result<Expectations, SynthError> {
    let resolved = resolve(spec, q)?;
    Ok(expectations(spec, &resolved))
}

/// Probability mass on the grid `origin + (lo + j) * ETA_STEP`.
#[derive(Debug, Clone)]
struct GridDist {
    lo: i64,
    mass: Vec<f64>,
}

impl GridDist {
    fn zero() -> Self {
        GridDist { lo: 0, mass: Vec::new() }
    }

    /// Unit mass at `offset`, split between the two neighbouring grid
    /// points so the mean is exact.
    fn point(offset: f64) -> Self {
        let x = offset / ETA_STEP;
        let k = x.floor();
        let frac = x - k;
        let dist = GridDist {
            lo: k as i64,
            mass: vec![1.0 - frac, frac],
        };
        dist.trimmed()
    }

    fn atoms(atoms: &[(f64, f64)]) -> Self {
        let mut out = GridDist::zero();
        for &(offset, p) in atoms {
            if p > 0.0 {
                out.add_scaled(&GridDist::point(offset), p);
            }
        }
        out
    }

    /// `c * X` for a clamped normal `X`, binned by CDF differences.
    fn scaled_clamped_normal(c: f64, x: &ClampedNormal, shift: f64) -> Self {
        if c == 0.0 {
            return GridDist::point(0.0);
        }
        let (a, b) = (c * x.min / ETA_STEP, c * x.max / ETA_STEP);
        let lo = a.min(b).round() as i64 - 1;
        let hi = a.max(b).round() as i64 + 1;
        let mass = (lo..=hi)
            .map(|j| {
                let e0 = (j as f64 - 0.5) * ETA_STEP / c;
                let e1 = (j as f64 + 0.5) * ETA_STEP / c;
                let (x0, x1) = if c > 0.0 { (e0, e1) } else { (e1, e0) };
                (x.cdf(shift, x1) - x.cdf(shift, x0)).max(0.0)
            })
            .collect();
        GridDist { lo, mass }.trimmed()
    }

    fn trimmed(mut self) -> Self {
        let first = self.mass.iter().position(|&p| p > TAIL_MASS);
        let Some(first) = first else {
            return GridDist::zero();
        };
        let last = self.mass.iter().rposition(|&p| p > TAIL_MASS).expect("non-empty");
        self.mass.truncate(last + 1);
        self.mass.drain(..first);
        self.lo += first as i64;
        self
    }

    fn add_scaled(&mut self, other: &GridDist, weight: f64) {
        if other.mass.is_empty() {
            return;
        }
        if self.mass.is_empty() {
            self.lo = other.lo;
            self.mass = other.mass.iter().map(|p| p * weight).collect();
            return;
        }
        let lo = self.lo.min(other.lo);
        let hi = (self.lo + self.mass.len() as i64).max(other.lo + other.mass.len() as i64);
        let mut mass = vec![0.0; (hi - lo) as usize];
        for (j, p) in self.mass.iter().enumerate() {
            mass[(self.lo - lo) as usize + j] += p;
        }
        for (j, p) in other.mass.iter().enumerate() {
            mass[(other.lo - lo) as usize + j] += p * weight;
        }
        self.lo = lo;
        self.mass = mass;
    }

    fn convolve(&self, other: &GridDist) -> GridDist {
        if self.mass.is_empty() || other.mass.is_empty() {
            return GridDist::zero();
        }
        let mut mass = vec![0.0; self.mass.len() + other.mass.len() - 1];
        for (i, p) in self.mass.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            for (j, r) in other.mass.iter().enumerate() {
                mass[i + j] += p * r;
            }
        }
        GridDist {
            lo: self.lo + other.lo,
            mass,
        }
        .trimmed()
    }

    fn eta(&self, origin: f64, j: usize) -> f64 {
        origin + (self.lo + j as i64) as f64 * ETA_STEP
    }

    fn mean_probability(&self, origin: f64) -> f64 {
        let total: f64 = self.mass.iter().sum();
        let hit: f64 = self.mass.iter().enumerate().map(|(j, p)| p * sigmoid(self.eta(origin, j))).sum();
        hit / total
    }

    /// AUROC of the true-probability score; mass sharing a grid point counts
    /// as a tie.
    fn auroc(&self, origin: f64) -> Option<f64> {
        let (mut pos_total, mut neg_total, mut wins) = (0.0, 0.0, 0.0);
        for (j, p) in self.mass.iter().enumerate() {
            let s = sigmoid(self.eta(origin, j));
            let (pos, neg) = (p * s, p * (1.0 - s));
            wins += pos * (neg_total + 0.5 * neg);
            pos_total += pos;
            neg_total += neg;
        }
        (pos_total > 0.0 && neg_total > 0.0).then(|| wins / (pos_total * neg_total))
    }
}

fn coefficient(terms: &[(Term, f64)], term: Term) -> f64 {
    terms.iter().filter(|(t, _)| *t == term).map(|(_, c)| c).sum()
}

/// Distribution of the linear predictor (minus the intercept) within one group.
fn group_eta(spec: &CohortSpec, g: &GroupSpec, terms: &[(Term, f64)]) -> GridDist {
    let coef = |t| coefficient(terms, t);
    let demographic = coef(Term::Race(g.race)) + coef(Term::Sex(g.sex));
    let n_years = spec.years.len() as f64;
    let mut discrete = GridDist::zero();
    for year in spec.years.iter() {
        let mut d = GridDist::point(demographic + coef(Term::Year) * f64::from(year));
        for (i, f) in spec.factors.iter().enumerate() {
            let shifts: Vec<f64> = STATES.iter().map(|&state| coef(Term::Answer { factor: i, state })).collect();
            if shifts.iter().all(|&s| s == 0.0) {
                continue;
            }
            let p = f.prevalence(&g.label, year, spec.years.start);
            let u = f.unknown_rate;
            let probs = [(1.0 - u) * p, (1.0 - u) * (1.0 - p), u];
            let atoms: Vec<(f64, f64)> = shifts.into_iter().zip(probs).collect();
            d = d.convolve(&GridDist::atoms(&atoms));
        }
        discrete.add_scaled(&d, 1.0 / n_years);
    }
    let c = &spec.clinical;
    let hcc = GridDist::atoms(&[(coef(Term::Hcc), c.hcc_rate), (0.0, 1.0 - c.hcc_rate)]);
    let mut d = discrete.convolve(&hcc);
    for (term, x, shift) in [(Term::Meld, &c.meld, g.meld_shift), (Term::Bmi, &c.bmi, 0.0), (Term::Age, &c.age, 0.0)] {
        let k = coef(term);
        if k != 0.0 {
            d = d.convolve(&GridDist::scaled_clamped_normal(k, x, shift));
        }
    }
    d
}

fn demographic_columns(spec: &CohortSpec) -> Vec<(String, Box<dyn Fn(&GroupSpec) -> bool>)> {
    let mut out: Vec<(String, Box<dyn Fn(&GroupSpec) -> bool>)> = Vec::new();
    for r in RaceEthnicity::ALL {
        out.push((race_column(r), Box::new(move |g: &GroupSpec| g.race == r)));
    }
    for s in Sex::ALL {
        out.push((sex_column(s), Box::new(move |g: &GroupSpec| g.sex == s)));
    }
    // keep columns that split the cohort into two non-empty parts
    out.retain(|(_, inside)| {
        let n_in = spec.groups.iter().filter(|g| inside(g)).count();
        n_in > 0 && n_in < spec.groups.len()
    });
    out
}

fn weighted_mean(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (w, x) in pairs {
        num += w * x;
        den += w;
    }
    num / den
}

fn expectations(spec: &CohortSpec, resolved: &Resolved) -> Expectations {
    let n = spec.n_patients();
    let weights: Vec<f64> = spec.groups.iter().map(|g| g.size as f64 / n as f64).collect();

    let mut rates = BTreeMap::new();
    let mut bayes_auroc = BTreeMap::new();
    let mut per_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for outcome in OUTCOMES {
        let origin = outcome.model(spec).intercept;
        let dists: Vec<GridDist> = spec
            .groups
            .par_iter()
            .map(|g| group_eta(spec, g, resolved.model(outcome)))
            .collect();
        let means: Vec<f64> = dists.iter().map(|d| d.mean_probability(origin)).collect();
        let mut pooled = GridDist::zero();
        for (d, w) in dists.iter().zip(&weights) {
            pooled.add_scaled(d, *w);
        }
        rates.insert(outcome.name(), weighted_mean(weights.iter().copied().zip(means.iter().copied())));
        bayes_auroc.insert(outcome.name().to_string(), pooled.auroc(origin));
        per_group.insert(outcome.name(), means);
    }

    let groups = spec
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| GroupOutcome {
            group: g.label.clone(),
            size: g.size,
            expected_rec: per_group[REC_OUTCOME][i],
            expected_listed: per_group[LISTED_OUTCOME][i],
        })
        .collect();

    let demographics = demographic_columns(spec);
    let mean_over = |values: &[f64], keep: &dyn Fn(&GroupSpec) -> bool| {
        weighted_mean(
            spec.groups
                .iter()
                .zip(values)
                .filter(|(g, _)| keep(g))
                .map(|(g, v)| (g.size as f64, *v)),
        )
    };

    let mut column_gaps = Vec::new();
    for outcome in OUTCOMES {
        let values = &per_group[outcome.name()];
        for (column, inside) in &demographics {
            let mean_in = mean_over(values, &|g| inside(g));
            let mean_out = mean_over(values, &|g| !inside(g));
            column_gaps.push(ColumnGap {
                outcome: outcome.name().to_string(),
                column: column.clone(),
                mean_in,
                mean_out,
                gap: mean_in - mean_out,
            });
        }
    }

    let n_years = spec.years.len() as f64;
    let mut cells = Vec::new();
    let mut trends = Vec::new();
    for f in &spec.factors {
        let present: Vec<f64> = spec
            .groups
            .iter()
            .map(|g| spec.years.iter().map(|y| f.prevalence(&g.label, y, spec.years.start)).sum::<f64>() / n_years)
            .collect();
        let u = f.unknown_rate;
        let per_state = [
            (f.present_column(), present.iter().map(|p| (1.0 - u) * p).collect::<Vec<_>>()),
            (f.absent_column(), present.iter().map(|p| (1.0 - u) * (1.0 - p)).collect()),
            (f.unknown_column(), vec![u; present.len()]),
        ];
        for (factor, values) in &per_state {
            let baseline = mean_over(values, &|_| true);
            for (column, inside) in &demographics {
                let group_prevalence = mean_over(values, &|g| inside(g));
                let complement_prevalence = mean_over(values, &|g| !inside(g));
                cells.push(ExpectedCell {
                    factor: factor.clone(),
                    group: column.clone(),
                    group_prevalence,
                    complement_prevalence,
                    baseline,
                    delta_pp: 100.0 * (group_prevalence - baseline),
                    planted: (group_prevalence - complement_prevalence).abs() > 1e-12,
                });
            }
        }
        trends.push(ExpectedTrend {
            factor: f.present_column(),
            years: spec.years.iter().collect(),
            prevalence: spec
                .years
                .iter()
                .map(|y| {
                    (1.0 - u)
                        * weighted_mean(
                            spec.groups
                                .iter()
                                .map(|g| (g.size as f64, f.prevalence(&g.label, y, spec.years.start))),
                        )
                })
                .collect(),
        });
    }

    Expectations {
        n,
        rec_rate: rates[REC_OUTCOME],
        listed_rate: rates[LISTED_OUTCOME],
        bayes_auroc,
        groups,
        column_gaps,
        cells,
        trends,
    }
}

/// Backend that reads answers back out of template-composed notes by exact
/// line lookup. Lines that match no template are ignored.
pub struct TemplateBackend {
    questionnaire: Questionnaire,
    by_sentence: HashMap<String, (u32, String)>,
}

impl TemplateBackend {
    pub fn new(spec: &CohortSpec, q: &Questionnaire) -> Result<Self, SynthError> {
        let resolved = resolve(spec, q)?;
        let by_sentence = resolved
            .templates
            .into_iter()
            .map(|((id, cat), sentence)| (sentence, (id, cat)))
            .collect();
        Ok(TemplateBackend {
            questionnaire: q.clone(),
            by_sentence,
        })
    }
}

impl Backend for TemplateBackend {
    fn complete(&self, prompt: &PromptBundle) -> Result<String, BackendError> {
        let mut labels: BTreeMap<u32, String> = self
            .questionnaire
            .categorical()
            .map(|x| (x.id, x.unknown_label().unwrap_or(UNKNOWN_LABEL).to_string()))
            .collect();
        for line in prompt.note_text().lines() {
            if let Some((id, cat)) = self.by_sentence.get(line.trim()) {
                labels.insert(*id, cat.clone());
            }
        }
        let answers = AnswerSet {
            patient_id: String::new(),
            note_id: String::new(),
            provenance: Provenance::Mock,
            labels,
            free_text: BTreeMap::new(),
        };
        Ok(render_completion(&answers))
    }
}

/// Replays the planted answers, flipping labels per `noise`.
pub fn mock_backend(
    q: &Questionnaire,
    notes: &[NoteRecord],
    truth: &GroundTruth,
    noise: LabelNoise,
) -> Result<ReplayBackend, SynthError> {
    Ok(ReplayBackend::new(q, notes, &truth.answers, noise)?)
}

/// Default demo cohort: 5,000 evaluations over 2012-2023 across seven
/// race/ethnicity groups and two sexes, 23 planted factors, and outcome
/// rates near 93% (recommendation) and 81% (listing).
pub fn demo_spec() -> CohortSpec {
    use RaceEthnicity::*;
    let races: [(RaceEthnicity, usize, f64); 7] = [
        (NonHispanicWhite, 2250, 0.0),
        (Hispanic, 1100, 1.0),
        (Asian, 650, -1.5),
        (Black, 350, 0.5),
        (Other, 300, 0.0),
        (Unknown, 250, 0.0),
        (Indigenous, 100, 0.5),
    ];
    let mut groups = Vec::new();
    for (race, size, meld_shift) in races {
        let female = (size as f64 * 0.38).round() as usize;
        for (sex, n) in [(Sex::Female, female), (Sex::Male, size - female)] {
            groups.push(GroupSpec {
                label: format!("{}/{}", race.as_str(), sex.as_str()),
                size: n,
                race,
                sex,
                meld_shift,
            });
        }
    }

    // (question, present, absent, base, unknown rate, race shifts, female shift, drift)
    type Row = (u32, &'static str, &'static str, f64, f64, &'static [(RaceEthnicity, f64)], f64, f64);
    let rows: [Row; 23] = [
        (2, "Yes", "No", 0.08, 0.02, &[(Hispanic, 0.27), (Asian, 0.17)], 0.0, 0.0),
        (3, "Difficulty Paying for Housing", "Stable Housing", 0.10, 0.15, &[(Black, 0.08), (Hispanic, 0.04)], 0.0, 0.0),
        (4, "No", "Yes", 0.12, 0.05, &[], -0.03, 0.0),
        (5, "Yes", "No", 0.10, 0.20, &[], 0.0, 0.0),
        (6, "Health and Physical Capacity", "No Known Barriers", 0.12, 0.35, &[], 0.0, 0.0),
        (7, "No", "Yes", 0.30, 0.25, &[], 0.0, 0.0),
        (8, "Yes", "No", 0.28, 0.05, &[], 0.08, 0.0),
        (9, "Yes", "No", 0.25, 0.10, &[], 0.05, 0.0),
        (10, "Yes", "No", 0.15, 0.30, &[], 0.04, 0.0),
        (11, "Yes", "No", 0.42, 0.05, &[(Asian, -0.12)], -0.10, 0.0),
        (12, "Severe", "None", 0.20, 0.15, &[], -0.05, 0.0),
        (13, "Yes", "No", 0.18, 0.0, &[], 0.0, 0.10 / 11.0),
        (14, "Yes", "No", 0.25, 0.10, &[], 0.0, 0.0),
        (15, "Yes", "No", 0.30, 0.10, &[], 0.0, 0.0),
        (16, "Yes", "No", 0.22, 0.05, &[(Indigenous, 0.08)], -0.04, 0.0),
        (17, "No", "Yes", 0.15, 0.20, &[], 0.0, 0.0),
        (18, "No", "Yes", 0.08, 0.10, &[], 0.0, 0.0),
        (19, "No", "Yes", 0.10, 0.15, &[], 0.0, 0.0),
        (20, "Yes", "No", 0.12, 0.10, &[], 0.0, 0.0),
        (21, "Yes", "No", 0.04, 0.05, &[], 0.0, 0.0),
        (22, "No", "Yes", 0.05, 0.10, &[(Hispanic, 0.04), (Unknown, 0.03)], 0.0, 0.0),
        (23, "Lack of Personal or Public Transportation", "No Transportation Issues", 0.10, 0.20, &[], 0.0, 0.0),
        (24, "Not Motivated", "Highly Motivated", 0.05, 0.10, &[], 0.0, 0.0),
    ];
    let factors = rows
        .iter()
        .map(|&(question, present, absent, base, unknown_rate, race_shift, female_shift, drift)| {
            let mut group_prevalence = BTreeMap::new();
            for g in &groups {
                let shift = race_shift.iter().filter(|(r, _)| *r == g.race).map(|(_, s)| s).sum::<f64>()
                    + if g.sex == Sex::Female { female_shift } else { 0.0 };
                if shift != 0.0 {
                    group_prevalence.insert(g.label.clone(), base + shift);
                }
            }
            FactorSpec {
                question,
                present: present.into(),
                absent: absent.into(),
                base_prevalence: base,
                group_prevalence,
                drift_per_year: drift,
                unknown_rate,
            }
        })
        .collect();

    let coefficients = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    CohortSpec {
        name: "demo".into(),
        years: YearRange { start: 2012, end: 2023 },
        groups,
        factors,
        clinical: ClinicalSpec {
            meld: ClampedNormal { mean: 19.0, sd: 7.0, min: 6.0, max: 40.0 },
            bmi: ClampedNormal { mean: 28.5, sd: 5.5, min: 16.0, max: 50.0 },
            age: ClampedNormal { mean: 56.0, sd: 10.0, min: 18.0, max: 80.0 },
            hcc_rate: 0.25,
        },
        outcomes: OutcomeSpec {
            rec: LogisticModel {
                intercept: DEMO_REC_INTERCEPT,
                coefficients: coefficients(&[
                    ("q24=Not Motivated", -2.5),
                    ("q21=Yes", -2.0),
                    ("q13=Yes", -1.0),
                    ("q16=Yes", -1.0),
                    ("q17=No", -0.8),
                ]),
            },
            listed: LogisticModel {
                intercept: DEMO_LISTED_INTERCEPT,
                coefficients: coefficients(&DEMO_LISTED_COEFFICIENTS),
            },
            provisional_fraction: 0.15,
        },
        note_templates: BTreeMap::new(),
    }
}

const DEMO_REC_INTERCEPT: f64 = 3.70;
const DEMO_LISTED_INTERCEPT: f64 = 7.24;

/// Nonzero listing coefficients of [`demo_spec`]: the four clinical columns,
/// two race columns and seven factor columns.
pub const DEMO_LISTED_COEFFICIENTS: [(&str, f64); 13] = [
    ("meld", 0.10),
    ("hcc", 1.0),
    ("bmi", -0.10),
    ("age", -0.06),
    ("race=Black/African American", -0.4),
    ("race=Hispanic/Latino", -0.3),
    ("q3=Difficulty Paying for Housing", -0.8),
    ("q4=No", -1.0),
    ("q13=Yes", -1.5),
    ("q16=Yes", -1.2),
    ("q20=Yes", -1.2),
    ("q22=No", -1.2),
    ("q24=Not Motivated", -2.2),
];

/// The 20 columns the demo listing model is written over: clinical,
/// demographic, and the factor columns carrying listing coefficients.
pub fn demo_feature_columns() -> Vec<String> {
    let mut out: Vec<String> = CLINICAL_COLUMNS.iter().map(|s| s.to_string()).collect();
    out.extend(RaceEthnicity::ALL.iter().map(|&r| race_column(r)));
    out.extend(Sex::ALL.iter().map(|&s| sex_column(s)));
    out.extend(
        DEMO_LISTED_COEFFICIENTS
            .iter()
            .filter(|(name, _)| name.starts_with('q'))
            .map(|(name, _)| name.to_string()),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::questionnaire::builtin_questionnaire;
    use crate::stats::wilson_interval;

    fn tiny(n: usize) -> CohortSpec {
        CohortSpec {
            name: "tiny".into(),
            years: YearRange { start: 2012, end: 2023 },
            groups: vec![
                GroupSpec {
                    label: "a".into(),
                    size: n,
                    race: RaceEthnicity::NonHispanicWhite,
                    sex: Sex::Female,
                    meld_shift: 0.0,
                },
                GroupSpec {
                    label: "b".into(),
                    size: n,
                    race: RaceEthnicity::Black,
                    sex: Sex::Male,
                    meld_shift: 0.0,
                },
            ],
            factors: vec![FactorSpec {
                question: 8,
                present: "Yes".into(),
                absent: "No".into(),
                base_prevalence: 0.3,
                group_prevalence: BTreeMap::new(),
                drift_per_year: 0.0,
                unknown_rate: 0.0,
            }],
            clinical: ClinicalSpec {
                meld: ClampedNormal { mean: 18.0, sd: 6.0, min: 6.0, max: 40.0 },
                bmi: ClampedNormal { mean: 28.0, sd: 5.0, min: 16.0, max: 50.0 },
                age: ClampedNormal { mean: 55.0, sd: 10.0, min: 18.0, max: 80.0 },
                hcc_rate: 0.2,
            },
            outcomes: OutcomeSpec {
                rec: LogisticModel { intercept: 2.0, coefficients: BTreeMap::new() },
                listed: LogisticModel { intercept: 1.0, coefficients: BTreeMap::new() },
                provisional_fraction: 0.1,
            },
            note_templates: BTreeMap::new(),
        }
    }

    #[test]
    fn demo_spec_is_valid() {
        let spec = demo_spec();
        let q = builtin_questionnaire();
        spec.validate(&q).unwrap();
        assert_eq!(spec.n_patients(), 5000);
        assert_eq!(spec.factors.len(), 23);
        assert_eq!(demo_feature_columns().len(), 20);
    }

    #[test]
    fn demo_rates_match_targets() {
        let e = expected_stats(&demo_spec(), &builtin_questionnaire()).unwrap();
        eprintln!("rec {} listed {} auroc {:?}", e.rec_rate, e.listed_rate, e.bayes_auroc);
        assert!((e.rec_rate - 0.93).abs() < 0.01, "rec {}", e.rec_rate);
        assert!((e.listed_rate - 0.81).abs() < 0.01, "listed {}", e.listed_rate);
    }

    #[test]
    fn rejects_bad_specs() {
        let q = builtin_questionnaire();
        let mut s = tiny(10);
        s.factors[0].base_prevalence = 1.2;
        assert!(s.validate(&q).is_err());
        let mut s = tiny(10);
        s.groups[0].size = 0;
        assert!(s.validate(&q).is_err());
        let mut s = tiny(10);
        s.factors[0].drift_per_year = 0.1;
        assert!(s.validate(&q).is_err());
        let mut s = tiny(10);
        s.outcomes.listed.coefficients.insert("q9=Yes".into(), 1.0);
        assert!(s.validate(&q).is_err());
        let mut s = tiny(10);
        s.note_templates.insert("q8=Yes".into(), "Same.".into());
        s.note_templates.insert("q8=No".into(), "Same.".into());
        assert!(s.validate(&q).is_err());
        let mut s = tiny(10);
        s.factors[0].present = "Unknown".into();
        assert!(s.validate(&q).is_err());
    }

    #[test]
    fn prevalence_inside_binomial_interval() {
        let q = builtin_questionnaire();
        let out = generate(&tiny(2500), &q, 11).unwrap();
        let hits = out.truth.answers.iter().filter(|a| a.labels[&8] == "Yes").count() as u64;
        let (lo, hi) = wilson_interval((0.3 * 5000.0) as u64, 5000, 2.5758);
        let rate = hits as f64 / 5000.0;
        assert!(lo <= rate && rate <= hi, "{rate}");
    }

    #[test]
    fn same_seed_same_output() {
        let q = builtin_questionnaire();
        let a = generate(&tiny(50), &q, 3).unwrap();
        let b = generate(&tiny(50), &q, 3).unwrap();
        assert_eq!(a, b);
        let c = generate(&tiny(50), &q, 4).unwrap();
        assert_ne!(a.cohort, c.cohort);
    }

    #[test]
    fn templates_reconstruct_answers() {
        let q = builtin_questionnaire();
        let spec = demo_spec();
        let mut small = spec.clone();
        for g in &mut small.groups {
            g.size = g.size.div_ceil(25);
        }
        let out = generate(&small, &q, 5).unwrap();
        let backend = TemplateBackend::new(&small, &q).unwrap();
        for (note, truth) in out.notes.iter().zip(&out.truth.answers) {
            let prompt = crate::questionnaire::build_prompt(&q, &note.text).unwrap();
            let raw = backend.complete(&prompt).unwrap();
            let parsed = crate::extraction::parse_completion(&raw, &q).unwrap();
            let got = parsed.into_answer_set(&note.patient_id, &note.note_id, Provenance::Human);
            assert_eq!(got.labels, truth.labels);
        }
        for a in &out.truth.answers {
            a.validate(&q).unwrap();
        }
    }

    #[test]
    fn identical_groups_have_zero_expected_gap() {
        let q = builtin_questionnaire();
        let mut s = tiny(100);
        s.outcomes.listed.coefficients.insert("q8=Yes".into(), -1.0);
        s.outcomes.listed.coefficients.insert("meld".into(), 0.05);
        let e = expected_stats(&s, &q).unwrap();
        let gap = e.column_gap(LISTED_OUTCOME, "sex=female").unwrap();
        assert!(gap.gap.abs() < 1e-12);
        assert!(e.planted_cells().next().is_none());
    }

    #[test]
    fn prevalence_delta_is_arithmetic() {
        let q = builtin_questionnaire();
        let mut s = tiny(100);
        s.factors[0].group_prevalence.insert("a".into(), 0.5);
        let e = expected_stats(&s, &q).unwrap();
        let cell = e.cell("q8=Yes", "sex=female").unwrap();
        assert!((100.0 * (cell.group_prevalence - cell.complement_prevalence) - 20.0).abs() < 1e-9);
        assert!(cell.planted);
        assert!((cell.delta_pp - 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_coefficients_give_chance_auroc() {
        let e = expected_stats(&tiny(10), &builtin_questionnaire()).unwrap();
        assert_eq!(e.bayes_auroc[LISTED_OUTCOME], Some(0.5));
        assert!((e.listed_rate - sigmoid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn expected_rate_matches_monte_carlo() {
        // E[sigmoid(b * X)] for a standard-ish normal, against a fine quadrature
        let q = builtin_questionnaire();
        let mut s = tiny(10);
        s.outcomes.listed.coefficients.insert("meld".into(), 0.1);
        s.outcomes.listed.intercept = -1.8;
        let e = expected_stats(&s, &q).unwrap();
        let m = s.clinical.meld;
        let normal = Normal::new(m.mean, m.sd).unwrap();
        let steps = 200_000;
        let mut total = normal.cdf(m.min) * sigmoid(-1.8 + 0.1 * m.min) + normal.sf(m.max) * sigmoid(-1.8 + 0.1 * m.max);
        let h = (m.max - m.min) / steps as f64;
        for i in 0..steps {
            let x = m.min + (i as f64 + 0.5) * h;
            total += (normal.cdf(x + h / 2.0) - normal.cdf(x - h / 2.0)) * sigmoid(-1.8 + 0.1 * x);
        }
        assert!((e.listed_rate - total).abs() < 1e-5, "{} vs {total}", e.listed_rate);
    }

    #[test]
    fn drift_trend_is_linear() {
        let e = expected_stats(&demo_spec(), &builtin_questionnaire()).unwrap();
        let t = e.trends.iter().find(|t| t.factor == "q13=Yes").unwrap();
        assert!((t.prevalence[0] - 0.18).abs() < 1e-12);
        assert!((t.prevalence[11] - 0.28).abs() < 1e-12);
    }
}
