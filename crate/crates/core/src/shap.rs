//! Path-dependent TreeSHAP for [`Ensemble`] models, a brute-force Shapley
//! reference, and ranked importance summaries.
//!
//! Attributions are in margin (log-odds) units. Conditioning follows node
//! covers, so no background dataset is involved.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::FeatureMatrix;
use crate::gbm::{Ensemble, Node, Tree};

/// Subset enumeration in [`brute_shapley`] is capped at this many features.
pub const BRUTE_FORCE_LIMIT: usize = 12;

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("input error: {0}")]
    Input(String),
    #[error("brute force refused: {0} features exceeds the limit of {BRUTE_FORCE_LIMIT}")]
    TooManyFeatures(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub prediction_margin: f64,
}

impl ShapExplanation {
    /// `base_value + Σφ - prediction_margin`.
    pub fn local_accuracy_error(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>() - self.prediction_margin
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

const NO_FEATURE: usize = usize::MAX;

fn extend(path: &mut [PathElement], depth: usize, zero_fraction: f64, one_fraction: f64, feature: usize) {
    path[depth] = PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    };
    let d = depth as f64;
    for i in (0..depth).rev() {
        let fi = i as f64;
        path[i + 1].weight += one_fraction * path[i].weight * (fi + 1.0) / (d + 1.0);
        path[i].weight = zero_fraction * path[i].weight * (d - fi) / (d + 1.0);
    }
}

fn unwind(path: &mut [PathElement], depth: usize, index: usize) {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d = depth as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * (d + 1.0) / ((fi + 1.0) * one);
            next = tmp - path[i].weight * zero * (d - fi) / (d + 1.0);
        } else {
            path[i].weight = path[i].weight * (d + 1.0) / (zero * (d - fi));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

/// Total path weight with element `index` removed, without mutating.
fn unwound_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d = depth as f64;
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        let fi = i as f64;
        if one != 0.0 {
            let tmp = next * (d + 1.0) / ((fi + 1.0) * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - fi) / (d + 1.0);
        } else {
            total += path[i].weight / zero * (d + 1.0) / (d - fi);
        }
    }
    total
}

fn child_fractions(tree: &Tree, node_cover: f64, left: usize, right: usize) -> (f64, f64) {
    if node_cover > 0.0 {
        (tree.nodes[left].cover() / node_cover, tree.nodes[right].cover() / node_cover)
    } else {
        (0.5, 0.5)
    }
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    node: usize,
    row: &[f64],
    phi: &mut [f64],
    parent_path: &[PathElement],
    depth: usize,
    zero_fraction: f64,
    one_fraction: f64,
    feature: usize,
) {
    let mut path = parent_path[..depth].to_vec();
    path.resize(depth + 1, PathElement::default());
    extend(&mut path, depth, zero_fraction, one_fraction, feature);
    match tree.nodes[node] {
        Node::Leaf { value, .. } => {
            for i in 1..=depth {
                let w = unwound_sum(&path, depth, i);
                let el = path[i];
                phi[el.feature] += w * (el.one_fraction - el.zero_fraction) * value;
            }
        }
        Node::Split {
            feature: split,
            threshold,
            default_left,
            left,
            right,
            cover,
        } => {
            let v = row[split];
            let go_left = if v.is_nan() { default_left } else { v < threshold };
            let (hot, cold) = if go_left { (left, right) } else { (right, left) };
            let (fl, fr) = child_fractions(tree, cover, left, right);
            let (hot_frac, cold_frac) = if go_left { (fl, fr) } else { (fr, fl) };

            let mut depth = depth;
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            if let Some(k) = (1..=depth).find(|&k| path[k].feature == split) {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind(&mut path, depth, k);
                depth -= 1;
            }
            recurse(tree, hot, row, phi, &path, depth + 1, hot_frac * incoming_zero, incoming_one, split);
            recurse(tree, cold, row, phi, &path, depth + 1, cold_frac * incoming_zero, 0.0, split);
        }
    }
}

/// Shapley values of a single tree's output at `row`, with `n_features`
/// slots. Sums to `tree.predict(row) - tree.expected_value()`.
pub fn tree_shap_single(tree: &Tree, row: &[f64], n_features: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n_features];
    recurse(tree, 0, row, &mut phi, &[], 0, 1.0, 1.0, NO_FEATURE);
    phi
}

/// Attributions for one row of an ensemble: per-tree values scaled by the
/// learning rate and summed.
pub fn tree_shap(e: &Ensemble, row: &[f64]) -> Result<ShapExplanation, ShapError> {
    let d = e.feature_names.len();
    if row.len() != d {
        return Err(ShapError::Input(format!("row has {} values, model expects {d}", row.len())));
    }
    let mut phi = vec![0.0; d];
    let mut expected = 0.0;
    for tree in &e.trees {
        for (p, t) in phi.iter_mut().zip(tree_shap_single(tree, row, d)) {
            *p += e.learning_rate * t;
        }
        expected += tree.expected_value();
    }
    Ok(ShapExplanation {
        base_value: e.base_score + e.learning_rate * expected,
        phi,
        prediction_margin: e.predict_margin_row(row),
    })
}

/// Explanations for every row of `m`, in row order.
pub fn explain_matrix(e: &Ensemble, m: &FeatureMatrix) -> Result<Vec<ShapExplanation>, ShapError> {
    e.check_schema(m).map_err(|err| ShapError::Input(err.to_string()))?;
    (0..m.n_rows()).into_par_iter().map(|r| tree_shap(e, m.row(r))).collect()
}

/// Cover-weighted expectation of the tree output when the features in
/// `known` take their values from `row` and the rest are averaged out.
fn conditional_expectation(tree: &Tree, node: usize, row: &[f64], known: &[bool]) -> f64 {
    match tree.nodes[node] {
        Node::Leaf { value, .. } => value,
        Node::Split {
            feature,
            threshold,
            default_left,
            left,
            right,
            cover,
        } => {
            if known[feature] {
                let v = row[feature];
                let go_left = if v.is_nan() { default_left } else { v < threshold };
                conditional_expectation(tree, if go_left { left } else { right }, row, known)
            } else {
                let (fl, fr) = child_fractions(tree, cover, left, right);
                fl * conditional_expectation(tree, left, row, known)
                    + fr * conditional_expectation(tree, right, row, known)
            }
        }
    }
}

/// Shapley values by enumerating every feature subset. Exponential; meant
/// as a reference for small trees.
pub fn brute_shapley(tree: &Tree, row: &[f64], n_features: usize) -> Result<Vec<f64>, ShapError> {
    if n_features > BRUTE_FORCE_LIMIT {
        return Err(ShapError::TooManyFeatures(n_features));
    }
    if row.len() != n_features {
        return Err(ShapError::Input(format!("row has {} values, expected {n_features}", row.len())));
    }
    let m = n_features;
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let value = |mask: usize| {
        let known: Vec<bool> = (0..m).map(|j| mask >> j & 1 == 1).collect();
        conditional_expectation(tree, 0, row, &known)
    };
    let values: Vec<f64> = (0..1usize << m).map(value).collect();
    let mut phi = vec![0.0; m];
    for (j, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << m {
            if mask >> j & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[m - s - 1] / fact[m];
            *p += weight * (values[mask | 1 << j] - values[mask]);
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs_phi: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub row_id: String,
    pub feature: String,
    pub value: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    /// Always "margin": attributions are in log-odds units.
    pub space: String,
    pub base_value: f64,
    /// All features, sorted by mean |φ| descending (ties by column order).
    pub ranking: Vec<FeatureImportance>,
    pub top_k: Vec<String>,
    /// Signed per-row attributions for the top features.
    pub samples: Vec<SampleRecord>,
}

impl ShapSummary {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ShapError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["feature", "mean_abs_phi", "rank"])?;
        for f in &self.ranking {
            wtr.write_record([f.feature.clone(), f.mean_abs_phi.to_string(), f.rank.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub const DEFAULT_TOP_K: usize = 15;

pub fn summarize(e: &Ensemble, m: &FeatureMatrix, top_k: usize) -> Result<ShapSummary, ShapError> {
    if m.n_rows() == 0 {
        return Err(ShapError::Input("cannot summarize an empty matrix".into()));
    }
    let explanations = explain_matrix(e, m)?;
    let d = e.feature_names.len();
    let mut mean_abs = vec![0.0; d];
    for ex in &explanations {
        for (acc, p) in mean_abs.iter_mut().zip(&ex.phi) {
            *acc += p.abs();
        }
    }
    for v in &mut mean_abs {
        *v /= explanations.len() as f64;
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
    let ranking: Vec<FeatureImportance> = order
        .iter()
        .enumerate()
        .map(|(rank, &j)| FeatureImportance {
            feature: e.feature_names[j].clone(),
            mean_abs_phi: mean_abs[j],
            rank: rank + 1,
        })
        .collect();
    let top: Vec<usize> = order.iter().take(top_k).copied().collect();
    let mut samples = Vec::with_capacity(top.len() * m.n_rows());
    for &j in &top {
        for (r, ex) in explanations.iter().enumerate() {
            samples.push(SampleRecord {
                row_id: m.row_ids()[r].clone(),
                feature: e.feature_names[j].clone(),
                value: m.get(r, j),
                phi: ex.phi[j],
            });
        }
    }
    Ok(ShapSummary {
        space: "margin".into(),
        base_value: explanations[0].base_value,
        ranking,
        top_k: top.iter().map(|&j| e.feature_names[j].clone()).collect(),
        samples,
    })
}
