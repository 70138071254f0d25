//! Feature matrices from answer sets and structured cohort data.
//!
//! Snapshots are one-hot encoded per (question, category) pair, joined to the
//! cohort table by patient id, and tagged with a feature group so later
//! stages (decomposition shares, model feature sets) can select by group.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::extraction::{AnswerSet, NoteRecord};
use crate::questionnaire::{Questionnaire, Role};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("input error: {0}")]
    Input(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Female, Sex::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaceEthnicity {
    #[serde(rename = "Asian")]
    Asian,
    #[serde(rename = "Black/African American")]
    Black,
    #[serde(rename = "Hispanic/Latino")]
    Hispanic,
    #[serde(rename = "Indigenous/Pacific")]
    Indigenous,
    #[serde(rename = "Non-Hispanic White")]
    NonHispanicWhite,
    #[serde(rename = "Other")]
    Other,
    #[serde(rename = "Unknown/Declined")]
    Unknown,
}

impl RaceEthnicity {
    pub const ALL: [RaceEthnicity; 7] = [
        RaceEthnicity::Asian,
        RaceEthnicity::Black,
        RaceEthnicity::Hispanic,
        RaceEthnicity::Indigenous,
        RaceEthnicity::NonHispanicWhite,
        RaceEthnicity::Other,
        RaceEthnicity::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RaceEthnicity::Asian => "Asian",
            RaceEthnicity::Black => "Black/African American",
            RaceEthnicity::Hispanic => "Hispanic/Latino",
            RaceEthnicity::Indigenous => "Indigenous/Pacific",
            RaceEthnicity::NonHispanicWhite => "Non-Hispanic White",
            RaceEthnicity::Other => "Other",
            RaceEthnicity::Unknown => "Unknown/Declined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    Recommended,
    Provisional,
    NotRecommended,
    Unknown,
}

fn flex_bool<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
    let raw: Option<String> = Option::deserialize(d)?;
    match raw.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => match s.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "y" => Ok(Some(true)),
            "false" | "0" | "no" | "n" => Ok(Some(false)),
            other => Err(serde::de::Error::custom(format!("not a boolean: {other:?}"))),
        },
    }
}

fn blank_as_none<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Recommendation>, D::Error> {
    let raw: Option<String> = Option::deserialize(d)?;
    match raw.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map(Some)
            .map_err(serde::de::Error::custom),
    }
}

/// One row of the cohort table. Empty CSV cells load as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: Option<f64>,
    pub sex: Sex,
    pub race_ethnicity: RaceEthnicity,
    pub meld: Option<f64>,
    pub meld_with_exceptions: Option<f64>,
    #[serde(deserialize_with = "flex_bool")]
    pub hcc: Option<bool>,
    pub bmi: Option<f64>,
    pub eval_year: i32,
    #[serde(deserialize_with = "blank_as_none")]
    pub recommended: Option<Recommendation>,
    #[serde(deserialize_with = "flex_bool")]
    pub listed: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: i32,
    pub end: i32,
}

impl Default for StudyWindow {
    fn default() -> Self {
        StudyWindow { start: 2012, end: 2023 }
    }
}

impl PatientRecord {
    pub fn validate(&self, window: StudyWindow) -> Result<(), EncodingError> {
        let bad = |m: String| Err(EncodingError::Input(format!("patient {}: {m}", self.patient_id)));
        if let Some(age) = self.age {
            if age <= 17.0 {
                return bad(format!("age {age} is not adult"));
            }
        }
        for (name, value) in [("meld", self.meld), ("meld_with_exceptions", self.meld_with_exceptions)] {
            if let Some(v) = value {
                if !(6.0..=40.0).contains(&v) {
                    return bad(format!("{name} {v} outside 6-40"));
                }
            }
        }
        if self.eval_year < window.start || self.eval_year > window.end {
            return bad(format!(
                "eval_year {} outside study window {}-{}",
                self.eval_year, window.start, window.end
            ));
        }
        Ok(())
    }
}

pub fn read_cohort_csv<R: Read>(reader: R, window: StudyWindow) -> Result<Vec<PatientRecord>, EncodingError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let record: PatientRecord = row?;
        record.validate(window)?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_cohort_csv<W: Write>(writer: W, cohort: &[PatientRecord]) -> Result<(), EncodingError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "patient_id",
        "age",
        "sex",
        "race_ethnicity",
        "meld",
        "meld_with_exceptions",
        "hcc",
        "bmi",
        "eval_year",
        "recommended",
        "listed",
    ])?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let flag = |v: Option<bool>| v.map(|b| b.to_string()).unwrap_or_default();
    for r in cohort {
        let rec = match r.recommended {
            None => String::new(),
            Some(v) => serde_json::to_value(v)?.as_str().unwrap_or_default().to_string(),
        };
        wtr.write_record([
            r.patient_id.clone(),
            num(r.age),
            r.sex.as_str().to_string(),
            r.race_ethnicity.as_str().to_string(),
            num(r.meld),
            num(r.meld_with_exceptions),
            flag(r.hcc),
            num(r.bmi),
            r.eval_year.to_string(),
            rec,
            flag(r.listed),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Clinical,
    Demographic,
    Sdoh,
    Temporal,
}

impl FeatureGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureGroup::Clinical => "clinical",
            FeatureGroup::Demographic => "demographic",
            FeatureGroup::Sdoh => "sdoh",
            FeatureGroup::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Option<FeatureGroup> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clinical" => Some(FeatureGroup::Clinical),
            "demographic" | "demographics" => Some(FeatureGroup::Demographic),
            "sdoh" | "llm" => Some(FeatureGroup::Sdoh),
            "temporal" => Some(FeatureGroup::Temporal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub group: FeatureGroup,
    pub kind: ColumnKind,
}

impl FeatureColumn {
    pub fn binary(name: impl Into<String>, group: FeatureGroup) -> Self {
        FeatureColumn {
            name: name.into(),
            group,
            kind: ColumnKind::Binary,
        }
    }

    pub fn continuous(name: impl Into<String>, group: FeatureGroup) -> Self {
        FeatureColumn {
            name: name.into(),
            group,
            kind: ColumnKind::Continuous,
        }
    }
}

/// Column name for a one-hot (question, category) indicator.
pub fn one_hot_name(question: u32, category: &str) -> String {
    format!("q{question}={category}")
}

/// Dense row-major matrix with named, grouped columns. Missing cells hold
/// `NaN` and are flagged in the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    row_ids: Vec<String>,
    columns: Vec<FeatureColumn>,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl FeatureMatrix {
    pub fn new(row_ids: Vec<String>, columns: Vec<FeatureColumn>, values: Vec<f64>) -> Result<Self, EncodingError> {
        if values.len() != row_ids.len() * columns.len() {
            return Err(EncodingError::Schema(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                row_ids.len(),
                columns.len()
            )));
        }
        let mut names = HashSet::new();
        for c in &columns {
            if !names.insert(c.name.as_str()) {
                return Err(EncodingError::Schema(format!("duplicate column {}", c.name)));
            }
        }
        let ncol = columns.len();
        for (i, v) in values.iter().enumerate() {
            let col = &columns[i % ncol];
            if col.kind == ColumnKind::Binary && !v.is_nan() && *v != 0.0 && *v != 1.0 {
                return Err(EncodingError::Schema(format!(
                    "binary column {} holds {v} in row {}",
                    col.name,
                    i / ncol
                )));
            }
        }
        let missing = values.iter().map(|v| v.is_nan()).collect();
        Ok(FeatureMatrix {
            row_ids,
            columns,
            values,
            missing,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn columns(&self) -> &[FeatureColumn] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.columns.len() + col]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.columns.len() + col]
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.columns.len();
        &self.values[row * n..(row + 1) * n]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn require_column(&self, name: &str) -> Result<usize, EncodingError> {
        self.column_index(name)
            .ok_or_else(|| EncodingError::Input(format!("no column named {name}")))
    }

    pub fn columns_in_group(&self, group: FeatureGroup) -> Vec<usize> {
        (0..self.n_cols()).filter(|&c| self.columns[c].group == group).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let n = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            row_ids: rows.iter().map(|&r| self.row_ids[r].clone()).collect(),
            columns: self.columns.clone(),
            missing: values.iter().map(|v| v.is_nan()).collect(),
            values,
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(self.n_rows() * cols.len());
        for r in 0..self.n_rows() {
            values.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        FeatureMatrix {
            row_ids: self.row_ids.clone(),
            columns: cols.iter().map(|&c| self.columns[c].clone()).collect(),
            missing: values.iter().map(|v| v.is_nan()).collect(),
            values,
        }
    }

    pub fn select_groups(&self, groups: &[FeatureGroup]) -> FeatureMatrix {
        let cols: Vec<usize> = (0..self.n_cols())
            .filter(|&c| groups.contains(&self.columns[c].group))
            .collect();
        self.select_columns(&cols)
    }

    /// Row index for each id, first occurrence wins.
    pub fn row_index(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::with_capacity(self.n_rows());
        for (i, id) in self.row_ids.iter().enumerate() {
            map.entry(id.as_str()).or_insert(i);
        }
        map
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EncodingError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["patient_id".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        wtr.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![self.row_ids[r].clone()];
            rec.extend(self.row(r).iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn manifest(&self) -> MatrixManifest {
        MatrixManifest {
            n_rows: self.n_rows(),
            columns: self.columns.clone(),
        }
    }

    /// Reads a matrix written by [`FeatureMatrix::write_csv`] together with its manifest.
    pub fn read_csv<R: Read>(reader: R, manifest: &MatrixManifest) -> Result<FeatureMatrix, EncodingError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected: Vec<&str> = std::iter::once("patient_id")
            .chain(manifest.columns.iter().map(|c| c.name.as_str()))
            .collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(EncodingError::Schema("matrix CSV header does not match manifest".into()));
        }
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            row_ids.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                values.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse()
                        .map_err(|_| EncodingError::Input(format!("not a number: {cell:?}")))?
                });
            }
        }
        FeatureMatrix::new(row_ids, manifest.columns.clone(), values)
    }
}

/// Sidecar describing the columns of an exported matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub n_rows: usize,
    pub columns: Vec<FeatureColumn>,
}

/// Keeps the earliest note's answers for each patient (ties broken by note id).
pub fn earliest_snapshot_per_patient(answers: &[AnswerSet], notes: &[NoteRecord]) -> Vec<AnswerSet> {
    let dates: HashMap<(&str, &str), chrono::NaiveDate> = notes
        .iter()
        .map(|n| ((n.patient_id.as_str(), n.note_id.as_str()), n.note_date))
        .collect();
    let mut best: BTreeMap<&str, &AnswerSet> = BTreeMap::new();
    let mut order = Vec::new();
    for a in answers {
        let key = |x: &AnswerSet| (dates.get(&x.key()).copied(), x.note_id.clone());
        match best.get(a.patient_id.as_str()) {
            None => {
                order.push(a.patient_id.as_str());
                best.insert(&a.patient_id, a);
            }
            Some(current) => {
                let (cur_date, cur_id) = key(current);
                let (new_date, new_id) = key(a);
                // undated notes sort after dated ones
                let earlier = match (new_date, cur_date) {
                    (Some(n), Some(c)) => (n, &new_id) < (c, &cur_id),
                    (Some(_), None) => true,
                    (None, Some(_)) => false,
                    (None, None) => new_id < cur_id,
                };
                if earlier {
                    best.insert(&a.patient_id, a);
                }
            }
        }
    }
    order.into_iter().map(|p| best[p].clone()).collect()
}

/// One binary column per (categorical question, category) for questions
/// with a selected role. Each question's slice of a row sums to one.
pub fn one_hot_snapshots(answers: &[AnswerSet], q: &Questionnaire, roles: &[Role]) -> FeatureMatrix {
    let questions: Vec<_> = q
        .categorical()
        .filter(|question| roles.contains(&question.role))
        .collect();
    let columns: Vec<FeatureColumn> = questions
        .iter()
        .flat_map(|question| {
            question
                .categories
                .iter()
                .map(|c| FeatureColumn::binary(one_hot_name(question.id, c), FeatureGroup::Sdoh))
        })
        .collect();
    let mut values = Vec::with_capacity(answers.len() * columns.len());
    for a in answers {
        for question in &questions {
            let label = a.label(question);
            let hit = question
                .category_index(label)
                .or_else(|| question.unknown_label().and_then(|u| question.category_index(u)));
            values.extend((0..question.categories.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
        }
    }
    FeatureMatrix::new(answers.iter().map(|a| a.patient_id.clone()).collect(), columns, values)
        .expect("one-hot layout is consistent")
}

pub const CLINICAL_COLUMNS: [&str; 4] = ["meld", "hcc", "bmi", "age"];
pub const YEAR_COLUMN: &str = "eval_year";

pub fn race_column(race: RaceEthnicity) -> String {
    format!("race={}", race.as_str())
}

pub fn sex_column(sex: Sex) -> String {
    format!("sex={}", sex.as_str())
}

#[derive(Debug, Clone)]
pub struct AssembledMatrix {
    pub matrix: FeatureMatrix,
    /// Patients dropped for missing clinical values or a missing snapshot.
    pub excluded: Vec<String>,
}

/// Joins the cohort with the SDOH block. Column order is always clinical,
/// demographic, sdoh, temporal.
pub fn assemble_matrix(
    cohort: &[PatientRecord],
    sdoh_block: Option<&FeatureMatrix>,
    groups: &[FeatureGroup],
) -> Result<AssembledMatrix, EncodingError> {
    let mut seen = HashSet::new();
    for r in cohort {
        if !seen.insert(r.patient_id.as_str()) {
            return Err(EncodingError::Input(format!("duplicate patient_id {}", r.patient_id)));
        }
    }
    let want = |g| groups.contains(&g);
    let sdoh_rows = match (want(FeatureGroup::Sdoh), sdoh_block) {
        (true, None) => return Err(EncodingError::Input("sdoh group requested without a snapshot block".into())),
        (true, Some(block)) => {
            let mut ids = HashSet::new();
            for id in block.row_ids() {
                if !ids.insert(id.as_str()) {
                    return Err(EncodingError::Input(format!("patient {id} has more than one snapshot row")));
                }
            }
            Some((block, block.row_index()))
        }
        (false, _) => None,
    };

    let mut columns = Vec::new();
    if want(FeatureGroup::Clinical) {
        columns.push(FeatureColumn::continuous("meld", FeatureGroup::Clinical));
        columns.push(FeatureColumn::binary("hcc", FeatureGroup::Clinical));
        columns.push(FeatureColumn::continuous("bmi", FeatureGroup::Clinical));
        columns.push(FeatureColumn::continuous("age", FeatureGroup::Clinical));
    }
    if want(FeatureGroup::Demographic) {
        columns.extend(RaceEthnicity::ALL.iter().map(|&r| FeatureColumn::binary(race_column(r), FeatureGroup::Demographic)));
        columns.extend(Sex::ALL.iter().map(|&s| FeatureColumn::binary(sex_column(s), FeatureGroup::Demographic)));
    }
    if let Some((block, _)) = &sdoh_rows {
        columns.extend(block.columns().iter().cloned());
    }
    if want(FeatureGroup::Temporal) {
        columns.push(FeatureColumn::continuous(YEAR_COLUMN, FeatureGroup::Temporal));
    }

    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    let mut excluded = Vec::new();
    for r in cohort {
        let mut row = Vec::with_capacity(columns.len());
        if want(FeatureGroup::Clinical) {
            match (r.meld, r.hcc, r.bmi, r.age) {
                (Some(meld), Some(hcc), Some(bmi), Some(age)) => {
                    row.extend([meld, f64::from(u8::from(hcc)), bmi, age]);
                }
                _ => {
                    excluded.push(r.patient_id.clone());
                    continue;
                }
            }
        }
        if want(FeatureGroup::Demographic) {
            row.extend(RaceEthnicity::ALL.iter().map(|&x| f64::from(u8::from(x == r.race_ethnicity))));
            row.extend(Sex::ALL.iter().map(|&x| f64::from(u8::from(x == r.sex))));
        }
        if let Some((block, index)) = &sdoh_rows {
            match index.get(r.patient_id.as_str()) {
                Some(&i) => row.extend_from_slice(block.row(i)),
                None => {
                    excluded.push(r.patient_id.clone());
                    continue;
                }
            }
        }
        if want(FeatureGroup::Temporal) {
            row.push(f64::from(r.eval_year));
        }
        row_ids.push(r.patient_id.clone());
        values.extend(row);
    }
    Ok(AssembledMatrix {
        matrix: FeatureMatrix::new(row_ids, columns, values)?,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// False when the fitted column had zero variance and was passed through.
    pub scaled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub columns: Vec<ColumnScaler>,
}

impl ScalerParams {
    pub fn transform(&self, m: &FeatureMatrix) -> Result<FeatureMatrix, EncodingError> {
        self.apply(m, |v, s| (v - s.mean) / s.std)
    }

    pub fn inverse_transform(&self, m: &FeatureMatrix) -> Result<FeatureMatrix, EncodingError> {
        self.apply(m, |v, s| v * s.std + s.mean)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().filter(|c| !c.scaled).map(|c| c.name.as_str())
    }

    fn apply(&self, m: &FeatureMatrix, f: impl Fn(f64, &ColumnScaler) -> f64) -> Result<FeatureMatrix, EncodingError> {
        let mut out = m.clone();
        let n = m.n_cols();
        for s in self.columns.iter().filter(|s| s.scaled) {
            let c = m.require_column(&s.name)?;
            for r in 0..m.n_rows() {
                let v = &mut out.values[r * n + c];
                if !v.is_nan() {
                    *v = f(*v, s);
                }
            }
        }
        Ok(out)
    }
}

/// Z-scores continuous columns using statistics from `fit_rows` only
/// (population standard deviation). Binary columns are untouched.
pub fn standardize(m: &FeatureMatrix, fit_rows: &[usize]) -> Result<(FeatureMatrix, ScalerParams), EncodingError> {
    if fit_rows.is_empty() {
        return Err(EncodingError::Input("no rows to fit the scaler on".into()));
    }
    let mut columns = Vec::new();
    for (c, col) in m.columns().iter().enumerate() {
        if col.kind != ColumnKind::Continuous {
            continue;
        }
        let xs: Vec<f64> = fit_rows.iter().map(|&r| m.get(r, c)).filter(|v| !v.is_nan()).collect();
        let (mean, std) = if xs.is_empty() {
            (0.0, 0.0)
        } else {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            (mean, var.sqrt())
        };
        let scaled = std > 0.0 && std.is_finite();
        columns.push(ColumnScaler {
            name: col.name.clone(),
            mean,
            std: if scaled { std } else { 1.0 },
            scaled,
        });
    }
    let params = ScalerParams { columns };
    Ok((params.transform(m)?, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLabels {
    pub row_ids: Vec<String>,
    pub labels: Vec<bool>,
}

impl OutcomeLabels {
    /// Matrix rows that have a label, with the aligned labels.
    pub fn align(&self, m: &FeatureMatrix) -> (Vec<usize>, Vec<bool>) {
        let index = m.row_index();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (id, &y) in self.row_ids.iter().zip(&self.labels) {
            if let Some(&r) = index.get(id.as_str()) {
                rows.push(r);
                labels.push(y);
            }
        }
        (rows, labels)
    }
}

pub const REC_OUTCOME: &str = "rec_overall";
pub const LISTED_OUTCOME: &str = "listed";

fn recommendation_from_label(label: &str) -> Recommendation {
    match label {
        "Recommended" => Recommendation::Recommended,
        "Recommended Provided Compliance with Care Plan" => Recommendation::Provisional,
        "Not Recommended" => Recommendation::NotRecommended,
        _ => Recommendation::Unknown,
    }
}

/// Binary outcomes per patient. Recommendation comes from the structured
/// field, falling back to the extracted answer to question 26.
pub fn binarize_outcomes(cohort: &[PatientRecord], answers: &[AnswerSet]) -> BTreeMap<String, OutcomeLabels> {
    let mut extracted: HashMap<&str, Recommendation> = HashMap::new();
    for a in answers {
        if let Some(label) = a.labels.get(&26) {
            extracted
                .entry(a.patient_id.as_str())
                .or_insert_with(|| recommendation_from_label(label));
        }
    }
    let mut rec = OutcomeLabels {
        row_ids: Vec::new(),
        labels: Vec::new(),
    };
    let mut listed = rec.clone();
    for r in cohort {
        let status = r
            .recommended
            .filter(|s| *s != Recommendation::Unknown)
            .or_else(|| extracted.get(r.patient_id.as_str()).copied());
        let y = match status {
            Some(Recommendation::Recommended | Recommendation::Provisional) => Some(true),
            Some(Recommendation::NotRecommended) => Some(false),
            _ => None,
        };
        if let Some(y) = y {
            rec.row_ids.push(r.patient_id.clone());
            rec.labels.push(y);
        }
        if let Some(l) = r.listed {
            listed.row_ids.push(r.patient_id.clone());
            listed.labels.push(l);
        }
    }
    BTreeMap::from([(REC_OUTCOME.to_string(), rec), (LISTED_OUTCOME.to_string(), listed)])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn class_indices(labels: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let pos = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg = (0..labels.len()).filter(|&i| !labels[i]).collect();
    (pos, neg)
}

/// Per class, `round(count * test_fraction)` rows go to the test partition.
pub fn stratified_split(labels: &[bool], test_fraction: f64, seed: u64) -> Result<Split, EncodingError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EncodingError::Input(format!("test fraction {test_fraction} not in (0,1)")));
    }
    let (pos, neg) = class_indices(labels);
    if pos.is_empty() || neg.is_empty() {
        return Err(EncodingError::Stratification("labels contain a single class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut class in [neg, pos] {
        let k = (class.len() as f64 * test_fraction).round() as usize;
        class.shuffle(&mut rng);
        test.extend_from_slice(&class[..k]);
        train.extend_from_slice(&class[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// All minority rows plus an equally sized uniform sample of the majority.
/// Returned indices are sorted.
pub fn downsample_majority(labels: &[bool], seed: u64) -> Vec<usize> {
    let (pos, neg) = class_indices(labels);
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    if minority.is_empty() {
        return (0..labels.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, majority.len(), minority.len());
    let mut out: Vec<usize> = minority;
    out.extend(picked.iter().map(|i| majority[i]));
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::Provenance;
    use crate::questionnaire::builtin_questionnaire;

    fn patient(id: &str, meld: Option<f64>) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            age: Some(50.0),
            sex: Sex::Female,
            race_ethnicity: RaceEthnicity::Asian,
            meld,
            meld_with_exceptions: None,
            hcc: Some(true),
            bmi: Some(27.5),
            eval_year: 2015,
            recommended: Some(Recommendation::Recommended),
            listed: Some(true),
        }
    }

    fn answers(id: &str, q13: &str) -> AnswerSet {
        let q = builtin_questionnaire();
        let mut labels: BTreeMap<u32, String> = q.categorical().map(|x| (x.id, "Unknown".to_string())).collect();
        labels.insert(13, q13.into());
        AnswerSet {
            patient_id: id.into(),
            note_id: format!("{id}-n"),
            provenance: Provenance::Human,
            labels,
            free_text: BTreeMap::new(),
        }
    }

    #[test]
    fn one_hot_slice() {
        let q = builtin_questionnaire();
        let m = one_hot_snapshots(&[answers("a", "No")], &q, &[Role::Sdoh]);
        let slice: Vec<f64> = ["q13=Yes", "q13=No", "q13=Unknown"]
            .iter()
            .map(|n| m.get(0, m.column_index(n).unwrap()))
            .collect();
        assert_eq!(slice, vec![0.0, 1.0, 0.0]);
        let ids: HashSet<&str> = m
            .columns()
            .iter()
            .map(|c| c.name.split('=').next().unwrap())
            .collect();
        assert_eq!(ids.len(), 23);
        let total: usize = q.with_role(Role::Sdoh).map(|x| x.categories.len()).sum();
        assert_eq!(m.n_cols(), total);
    }

    #[test]
    fn one_hot_identical_rows() {
        let q = builtin_questionnaire();
        let m = one_hot_snapshots(&[answers("a", "Yes"), answers("a", "Yes")], &q, &[Role::Sdoh]);
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn clinical_block_shape_and_exclusion() {
        let cohort: Vec<_> = (0..5).map(|i| patient(&format!("p{i}"), Some(20.0))).collect();
        let a = assemble_matrix(&cohort, None, &[FeatureGroup::Clinical]).unwrap();
        assert_eq!((a.matrix.n_rows(), a.matrix.n_cols()), (5, 4));

        let mut cohort = cohort;
        cohort[2].meld = None;
        let a = assemble_matrix(&cohort, None, &[FeatureGroup::Clinical, FeatureGroup::Demographic]).unwrap();
        assert_eq!(a.matrix.n_rows(), 4);
        assert_eq!(a.excluded, vec!["p2".to_string()]);
    }

    #[test]
    fn demographic_columns() {
        let a = assemble_matrix(&[patient("p", Some(10.0))], None, &[FeatureGroup::Demographic]).unwrap();
        assert_eq!(a.matrix.n_cols(), 9);
        assert!(a.matrix.columns().iter().all(|c| c.kind == ColumnKind::Binary));
        assert_eq!(a.matrix.row(0).iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn duplicate_patient_rejected() {
        let cohort = vec![patient("p", Some(10.0)), patient("p", Some(11.0))];
        assert!(matches!(
            assemble_matrix(&cohort, None, &[FeatureGroup::Clinical]),
            Err(EncodingError::Input(_))
        ));
    }

    #[test]
    fn sdoh_join_excludes_patients_without_snapshot() {
        let q = builtin_questionnaire();
        let block = one_hot_snapshots(&[answers("p1", "Yes")], &q, &[Role::Sdoh]);
        let cohort = vec![patient("p0", Some(10.0)), patient("p1", Some(12.0))];
        let a = assemble_matrix(&cohort, Some(&block), &[FeatureGroup::Sdoh, FeatureGroup::Temporal]).unwrap();
        assert_eq!(a.matrix.row_ids(), &["p1".to_string()]);
        assert_eq!(a.excluded, vec!["p0".to_string()]);
        assert_eq!(a.matrix.columns().last().unwrap().name, YEAR_COLUMN);
    }

    #[test]
    fn standardize_examples() {
        let cols = vec![FeatureColumn::continuous("x", FeatureGroup::Clinical), FeatureColumn::continuous("c", FeatureGroup::Clinical)];
        let m = FeatureMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            cols,
            vec![2.0, 5.0, 4.0, 5.0, 6.0, 5.0],
        )
        .unwrap();
        let (z, params) = standardize(&m, &[0, 1, 2]).unwrap();
        let x = z.column(0);
        let mean = x.iter().sum::<f64>() / 3.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(z.column(1), vec![5.0, 5.0, 5.0]);
        assert_eq!(params.flagged().collect::<Vec<_>>(), vec!["c"]);

        let (z, _) = standardize(&m, &[0, 1]).unwrap();
        let test_mean = z.get(2, 0);
        assert!(test_mean.abs() > 0.5);
    }

    #[test]
    fn outcomes() {
        let mut cohort = vec![patient("a", None), patient("b", None), patient("c", None), patient("d", None)];
        cohort[0].recommended = Some(Recommendation::Provisional);
        cohort[1].recommended = Some(Recommendation::NotRecommended);
        cohort[2].recommended = None;
        cohort[3].recommended = None;
        cohort[3].listed = None;
        let mut from_note = answers("c", "No");
        from_note.labels.insert(26, "Not Recommended".into());
        let out = binarize_outcomes(&cohort, &[from_note]);
        let rec = &out[REC_OUTCOME];
        assert_eq!(rec.row_ids, vec!["a", "b", "c"]);
        assert_eq!(rec.labels, vec![true, false, false]);
        assert_eq!(out[LISTED_OUTCOME].labels, vec![true, true, true]);
    }

    #[test]
    fn split_counts() {
        let labels: Vec<bool> = (0..100).map(|i| i < 30).collect();
        let s = stratified_split(&labels, 0.2, 7).unwrap();
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.test.iter().filter(|&&i| labels[i]).count(), 6);
        assert_eq!(s, stratified_split(&labels, 0.2, 7).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_cohort_scale() {
        // 81% positive cohort of 3,704 patients
        let labels: Vec<bool> = (0..3704).map(|i| i < 3000).collect();
        let s = stratified_split(&labels, 0.2, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (2963, 741));
    }

    #[test]
    fn split_single_class() {
        assert!(matches!(
            stratified_split(&[true, true], 0.5, 0),
            Err(EncodingError::Stratification(_))
        ));
    }

    #[test]
    fn downsampling() {
        let labels: Vec<bool> = (0..100).map(|i| i < 90).collect();
        let idx = downsample_majority(&labels, 3);
        assert_eq!(idx.len(), 20);
        assert_eq!(idx.iter().filter(|&&i| !labels[i]).count(), 10);
        assert_eq!(idx, downsample_majority(&labels, 3));

        let balanced: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        assert_eq!(downsample_majority(&balanced, 3), (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn cohort_csv_round_trip_with_blanks() {
        let mut cohort = vec![patient("p1", Some(22.0)), patient("p2", None)];
        cohort[1].hcc = None;
        cohort[1].recommended = None;
        cohort[1].race_ethnicity = RaceEthnicity::Black;
        let mut buf = Vec::new();
        write_cohort_csv(&mut buf, &cohort).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("patient_id,age,sex,race_ethnicity,meld,meld_with_exceptions,hcc,bmi,eval_year,recommended,listed"));
        let back = read_cohort_csv(buf.as_slice(), StudyWindow::default()).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn cohort_validation() {
        let mut p = patient("x", Some(41.0));
        assert!(p.validate(StudyWindow::default()).is_err());
        p.meld = Some(30.0);
        p.age = Some(17.0);
        assert!(p.validate(StudyWindow::default()).is_err());
        p.age = Some(18.0);
        p.eval_year = 2030;
        assert!(p.validate(StudyWindow::default()).is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let cohort = vec![patient("p1", Some(22.0)), patient("p2", Some(9.0))];
        let m = assemble_matrix(&cohort, None, &[FeatureGroup::Clinical, FeatureGroup::Temporal]).unwrap().matrix;
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = FeatureMatrix::read_csv(buf.as_slice(), &m.manifest()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn earliest_note_wins() {
        let a1 = answers("p", "Yes");
        let mut a2 = answers("p", "No");
        a2.note_id = "p-early".into();
        let date = |d| chrono::NaiveDate::from_ymd_opt(2020, 1, d).unwrap();
        let notes = vec![
            NoteRecord {
                patient_id: "p".into(),
                note_id: a1.note_id.clone(),
                note_date: date(5),
                text: "x".into(),
            },
            NoteRecord {
                patient_id: "p".into(),
                note_id: "p-early".into(),
                note_date: date(2),
                text: "y".into(),
            },
        ];
        let picked = earliest_snapshot_per_patient(&[a1, a2], &notes);
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].note_id, "p-early");
    }

    #[test]
    fn binary_column_rejects_other_values() {
        let r = FeatureMatrix::new(vec!["a".into()], vec![FeatureColumn::binary("b", FeatureGroup::Sdoh)], vec![0.5]);
        assert!(matches!(r, Err(EncodingError::Schema(_))));
    }
}
