use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use sdoh_core::encoding::{
    ColumnKind, FeatureGroup, FeatureMatrix, MatrixManifest, OutcomeLabels, LISTED_OUTCOME, REC_OUTCOME,
};
use sdoh_core::io::read_jsonl;
use sdoh_core::questionnaire::{builtin_questionnaire, is_unknown_label, load_questionnaire, Questionnaire};
use serde::de::DeserializeOwned;

use crate::error::{config, data, CliResult};
use crate::run::Run;

pub mod analyze;
pub mod encode;
pub mod extract;
pub mod linear;
pub mod model;
pub mod questionnaire;
pub mod report;
pub mod synth;
pub mod text;

/// Listing restricted to patients with a positive recommendation.
pub const LISTED_GIVEN_REC: &str = "listed_given_rec";

pub const MATRIX_CSV: &str = "features.csv";
pub const MATRIX_MANIFEST: &str = "features.json";
pub const OUTCOMES_FILE: &str = "outcomes.json";

pub fn questionnaire(run: &mut Run, path: Option<&Path>) -> CliResult<Questionnaire> {
    match path {
        Some(p) => Ok(load_questionnaire(&run.read_string(p)?)?),
        None => Ok(builtin_questionnaire()),
    }
}

pub fn read_json<T: DeserializeOwned>(run: &mut Run, path: &Path) -> CliResult<T> {
    let bytes = run.read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_jsonl_file<T: DeserializeOwned>(run: &mut Run, path: &Path) -> CliResult<Vec<T>> {
    let bytes = run.read(path)?;
    Ok(read_jsonl(Cursor::new(bytes))?)
}

/// An `encode` output directory.
pub struct Encoded {
    pub matrix: FeatureMatrix,
    pub outcomes: BTreeMap<String, OutcomeLabels>,
}

impl Encoded {
    pub fn load(run: &mut Run, dir: &Path) -> CliResult<Encoded> {
        let manifest: MatrixManifest = read_json(run, &dir.join(MATRIX_MANIFEST))?;
        let csv = run.read(&dir.join(MATRIX_CSV))?;
        let matrix = FeatureMatrix::read_csv(Cursor::new(csv), &manifest)?;
        let outcomes = read_json(run, &dir.join(OUTCOMES_FILE))?;
        Ok(Encoded { matrix, outcomes })
    }

    /// Labels for an outcome name, including the derived
    /// [`LISTED_GIVEN_REC`].
    pub fn outcome(&self, name: &str) -> CliResult<OutcomeLabels> {
        if name == LISTED_GIVEN_REC {
            let rec = self.outcome(REC_OUTCOME)?;
            let listed = self.outcome(LISTED_OUTCOME)?;
            let recommended: std::collections::HashSet<&str> = rec
                .row_ids
                .iter()
                .zip(&rec.labels)
                .filter(|(_, &y)| y)
                .map(|(id, _)| id.as_str())
                .collect();
            let (row_ids, labels) = listed
                .row_ids
                .iter()
                .zip(&listed.labels)
                .filter(|(id, _)| recommended.contains(id.as_str()))
                .map(|(id, &y)| (id.clone(), y))
                .unzip();
            return Ok(OutcomeLabels { row_ids, labels });
        }
        match self.outcomes.get(name) {
            Some(o) => Ok(o.clone()),
            None => config(format!(
                "unknown outcome {name:?}; expected {LISTED_OUTCOME}, {REC_OUTCOME} or {LISTED_GIVEN_REC}"
            )),
        }
    }

    /// Matrix rows with a label for `outcome`, and those labels.
    pub fn labelled(&self, outcome: &str) -> CliResult<(FeatureMatrix, Vec<bool>)> {
        let (rows, labels) = self.outcome(outcome)?.align(&self.matrix);
        if rows.is_empty() {
            return data(format!("no encoded rows carry the {outcome} outcome"));
        }
        Ok((self.matrix.select_rows(&rows), labels))
    }

    /// Demographic indicator columns.
    pub fn demographic_columns(&self) -> Vec<String> {
        self.matrix
            .columns()
            .iter()
            .filter(|c| c.group == FeatureGroup::Demographic)
            .map(|c| c.name.clone())
            .collect()
    }

    /// SDOH indicators for every known (non-Unknown) category.
    pub fn factor_columns(&self) -> Vec<String> {
        self.matrix
            .columns()
            .iter()
            .filter(|c| c.group == FeatureGroup::Sdoh && c.kind == ColumnKind::Binary)
            .filter(|c| !c.name.split_once('=').is_some_and(|(_, cat)| is_unknown_label(cat)))
            .map(|c| c.name.clone())
            .collect()
    }
}

pub fn parse_groups(list: &str) -> CliResult<Vec<FeatureGroup>> {
    let mut groups = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        match FeatureGroup::parse(part) {
            Some(g) if !groups.contains(&g) => groups.push(g),
            Some(_) => {}
            None => return config(format!("unknown feature group {part:?}")),
        }
    }
    if groups.is_empty() {
        return config("empty feature group list");
    }
    groups.sort();
    Ok(groups)
}

/// Display name of a feature-set combination, e.g. `clinical+sdoh`.
pub fn combo_name(groups: &[FeatureGroup]) -> String {
    groups.iter().map(|g| g.as_str()).collect::<Vec<_>>().join("+")
}

/// Column indices of `m` belonging to any of `groups`, in matrix order.
pub fn group_columns(m: &FeatureMatrix, groups: &[FeatureGroup]) -> CliResult<Vec<usize>> {
    let cols: Vec<usize> = (0..m.n_cols()).filter(|&c| groups.contains(&m.columns()[c].group)).collect();
    if cols.is_empty() {
        return data(format!("matrix has no columns in {}", combo_name(groups)));
    }
    Ok(cols)
}

pub fn column_groups(m: &FeatureMatrix) -> BTreeMap<String, String> {
    m.columns().iter().map(|c| (c.name.clone(), c.group.as_str().to_string())).collect()
}

pub fn check_alpha(alpha: f64) -> CliResult<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        config(format!("alpha {alpha} not in (0,1)"))
    }
}
