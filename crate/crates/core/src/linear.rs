//! Least squares with HC3 robust errors, linear probability models, and the
//! twofold Blinder-Oaxaca decomposition.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::encoding::FeatureMatrix;

pub const INTERCEPT: &str = "const";

/// Decomposition shares are left undefined below this absolute gap.
pub const GAP_TOLERANCE: f64 = 1e-8;

const DEPENDENCE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("design matrix is rank deficient; dependent columns: {}", columns.join(", "))]
    Singular { columns: Vec<String> },
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn input<T>(msg: impl Into<String>) -> Result<T, LinearError> {
    Err(LinearError::Input(msg.into()))
}

/// Significance markers for a p-value.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Indices of columns that are linear combinations of earlier columns, by
/// modified Gram-Schmidt in column order.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let original = x.column(j).into_owned();
        let scale = original.norm();
        let mut v = original;
        // two passes keep the projection accurate for nearly parallel columns
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if scale == 0.0 || norm <= DEPENDENCE_TOL * scale.max(1.0) {
            dependent.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub stars: Vec<String>,
    pub r_squared: f64,
    pub n: usize,
    pub df_resid: usize,
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Regression table with one row per coefficient. `groups` labels each
    /// column; unlisted columns get an empty group.
    pub fn write_csv<W: Write>(&self, writer: W, groups: &BTreeMap<String, String>) -> Result<(), LinearError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["feature", "group", "coefficient", "robust_se", "t", "p", "stars"])?;
        for i in 0..self.names.len() {
            wtr.write_record([
                self.names[i].clone(),
                groups.get(&self.names[i]).cloned().unwrap_or_default(),
                self.coefficients[i].to_string(),
                self.robust_se[i].to_string(),
                self.t_stats[i].to_string(),
                self.p_values[i].to_string(),
                self.stars[i].clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Ordinary least squares via QR. `x` must already contain any intercept
/// column. Standard errors are HC3 and p-values use a t reference with
/// `n - k` degrees of freedom.
pub fn ols_fit(x: &DMatrix<f64>, y: &[f64], names: &[String]) -> Result<OlsFit, LinearError> {
    let (n, k) = x.shape();
    if names.len() != k {
        return input(format!("{} names for {k} columns", names.len()));
    }
    if y.len() != n {
        return input(format!("{} responses for {n} rows", y.len()));
    }
    if n <= k {
        return input(format!("need more rows than columns, got {n}x{k}"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return input("design and response must be finite");
    }
    let dependent = dependent_columns(x);
    if !dependent.is_empty() {
        return Err(LinearError::Singular {
            columns: dependent.into_iter().map(|j| names[j].clone()).collect(),
        });
    }

    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let yv = DVector::from_column_slice(y);
    let beta = r
        .solve_upper_triangular(&(q.transpose() * &yv))
        .ok_or_else(|| LinearError::Singular { columns: names.to_vec() })?;
    let fitted = x * &beta;
    let resid = &yv - &fitted;

    // (X'X)^-1 X' = R^-1 Q', so the sandwich reduces to R^-1 (Q' W Q) R^-T
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| LinearError::Singular { columns: names.to_vec() })?;
    let mut weighted_q = q.clone();
    for i in 0..n {
        let h = q.row(i).norm_squared();
        let w = resid[i] / (1.0 - h);
        weighted_q.row_mut(i).scale_mut(w);
    }
    let meat = weighted_q.transpose() * &weighted_q;
    let cov = &r_inv * meat * r_inv.transpose();

    let df_resid = n - k;
    let t_dist = StudentsT::new(0.0, 1.0, df_resid as f64).expect("positive degrees of freedom");
    let mut robust_se = Vec::with_capacity(k);
    let mut t_stats = Vec::with_capacity(k);
    let mut p_values = Vec::with_capacity(k);
    for j in 0..k {
        let se = cov[(j, j)].max(0.0).sqrt();
        let t = beta[j] / se;
        let p = if t.is_nan() { 1.0 } else { (2.0 * t_dist.sf(t.abs())).min(1.0) };
        robust_se.push(se);
        t_stats.push(t);
        p_values.push(p);
    }

    let mean_y = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let ssr = resid.norm_squared();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN };

    Ok(OlsFit {
        names: names.to_vec(),
        coefficients: beta.iter().copied().collect(),
        robust_se,
        stars: p_values.iter().map(|&p| stars(p).to_string()).collect(),
        t_stats,
        p_values,
        r_squared,
        n,
        df_resid,
        residuals: resid.iter().copied().collect(),
    })
}

/// Design matrix for the given rows of `m` with a leading intercept column.
pub fn design_with_intercept(m: &FeatureMatrix, rows: &[usize]) -> Result<(DMatrix<f64>, Vec<String>), LinearError> {
    let k = m.n_cols() + 1;
    let mut x = DMatrix::zeros(rows.len(), k);
    for (i, &r) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for c in 0..m.n_cols() {
            let v = m.get(r, c);
            if v.is_nan() {
                return input(format!("missing value in row {} column {}", m.row_ids()[r], m.columns()[c].name));
            }
            x[(i, c + 1)] = v;
        }
    }
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(m.column_names());
    Ok((x, names))
}

/// Linear probability model: OLS of a 0/1 outcome on the matrix columns
/// plus an intercept. `labels` align with the matrix rows.
pub fn lpm(m: &FeatureMatrix, labels: &[bool]) -> Result<OlsFit, LinearError> {
    if labels.len() != m.n_rows() {
        return input(format!("{} labels for {} rows", labels.len(), m.n_rows()));
    }
    let rows: Vec<usize> = (0..m.n_rows()).collect();
    let (x, names) = design_with_intercept(m, &rows)?;
    let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
    ols_fit(&x, &y, &names)
}

/// Column indices of `m` that stay linearly independent (together with an
/// intercept) within every row subset in `row_sets`. Needed before fitting
/// one-hot blocks, where each question's indicators sum to one.
pub fn independent_columns(m: &FeatureMatrix, row_sets: &[&[usize]]) -> Result<Vec<usize>, LinearError> {
    let mut kept: Vec<usize> = (0..m.n_cols()).collect();
    for rows in row_sets {
        let sub = m.select_columns(&kept);
        let (x, _) = design_with_intercept(&sub, rows)?;
        let dependent = dependent_columns(&x);
        if dependent.first() == Some(&0) {
            return input("empty row subset");
        }
        let drop: Vec<usize> = dependent.iter().map(|j| kept[j - 1]).collect();
        kept.retain(|c| !drop.contains(c));
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// Pooled regression over both groups with a group indicator.
    #[default]
    PooledWithIndicator,
    GroupARef,
    GroupBRef,
}

/// One side of a decomposition. `x` holds the covariates without an
/// intercept column.
#[derive(Debug, Clone, Copy)]
pub struct GroupData<'a> {
    pub label: &'a str,
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub group_a: String,
    pub group_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub gap: f64,
    pub explained_total: f64,
    pub unexplained_total: f64,
    pub per_feature_explained: BTreeMap<String, f64>,
    pub reference_policy: ReferencePolicy,
    pub reference_coefficients: BTreeMap<String, f64>,
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()))
}

/// Twofold decomposition of `mean(y_a) - mean(y_b)` into the part explained
/// by covariate means under reference coefficients and the remainder.
pub fn oaxaca(names: &[String], a: GroupData<'_>, b: GroupData<'_>, policy: ReferencePolicy) -> Result<DecompositionResult, LinearError> {
    let k = names.len();
    if a.x.ncols() != k || b.x.ncols() != k {
        return input(format!(
            "schema mismatch: {} names, group widths {} and {}",
            k,
            a.x.ncols(),
            b.x.ncols()
        ));
    }
    let mut full_names = vec![INTERCEPT.to_string()];
    full_names.extend(names.iter().cloned());
    let xa = with_intercept(a.x);
    let xb = with_intercept(b.x);
    let fit_a = ols_fit(&xa, a.y, &full_names)?;
    let fit_b = ols_fit(&xb, b.y, &full_names)?;
    let beta_a = DVector::from_vec(fit_a.coefficients);
    let beta_b = DVector::from_vec(fit_b.coefficients);

    let beta_ref = match policy {
        ReferencePolicy::GroupARef => beta_a.clone(),
        ReferencePolicy::GroupBRef => beta_b.clone(),
        ReferencePolicy::PooledWithIndicator => {
            let (na, nb) = (xa.nrows(), xb.nrows());
            let mut pooled = DMatrix::zeros(na + nb, k + 2);
            pooled.view_mut((0, 0), (na, k + 1)).copy_from(&xa);
            pooled.view_mut((na, 0), (nb, k + 1)).copy_from(&xb);
            for i in 0..na {
                pooled[(i, k + 1)] = 1.0;
            }
            let mut pooled_names = full_names.clone();
            pooled_names.push(format!("group={}", a.label));
            let y: Vec<f64> = a.y.iter().chain(b.y).copied().collect();
            let fit = ols_fit(&pooled, &y, &pooled_names)?;
            DVector::from_column_slice(&fit.coefficients[..k + 1])
        }
    };

    let mean_xa = column_means(&xa);
    let mean_xb = column_means(&xb);
    let mean_a = a.y.iter().sum::<f64>() / a.y.len() as f64;
    let mean_b = b.y.iter().sum::<f64>() / b.y.len() as f64;
    let diff = &mean_xa - &mean_xb;
    let contributions = diff.component_mul(&beta_ref);
    let explained_total = contributions.sum();
    let unexplained_total = mean_xa.dot(&(&beta_a - &beta_ref)) + mean_xb.dot(&(&beta_ref - &beta_b));

    Ok(DecompositionResult {
        group_a: a.label.to_string(),
        group_b: b.label.to_string(),
        n_a: a.y.len(),
        n_b: b.y.len(),
        mean_a,
        mean_b,
        gap: mean_a - mean_b,
        explained_total,
        unexplained_total,
        per_feature_explained: names
            .iter()
            .enumerate()
            .map(|(j, name)| (name.clone(), contributions[j + 1]))
            .collect(),
        reference_policy: policy,
        reference_coefficients: full_names.iter().cloned().zip(beta_ref.iter().copied()).collect(),
    })
}

/// Percent of the gap explained by each feature group. `None` when the gap
/// is too small to divide by.
pub fn group_shares(
    d: &DecompositionResult,
    column_groups: &BTreeMap<String, String>,
) -> Result<Option<BTreeMap<String, f64>>, LinearError> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (name, value) in &d.per_feature_explained {
        let group = column_groups
            .get(name)
            .ok_or_else(|| LinearError::Input(format!("column {name} has no feature group")))?;
        *sums.entry(group.clone()).or_default() += value;
    }
    if d.gap.abs() < GAP_TOLERANCE {
        return Ok(None);
    }
    Ok(Some(sums.into_iter().map(|(g, v)| (g, 100.0 * v / d.gap)).collect()))
}

/// Decomposition export: totals, per-feature contributions, group shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    #[serde(flatten)]
    pub result: DecompositionResult,
    pub group_shares: Option<BTreeMap<String, f64>>,
}

/// Splits the matrix rows by a binary indicator column and decomposes the
/// outcome gap between indicator = 1 (group A) and indicator = 0 (group B).
/// `features` select the covariates; columns that are collinear within
/// either group are dropped and returned.
pub fn oaxaca_by_indicator(
    m: &FeatureMatrix,
    y: &[f64],
    indicator: &str,
    features: &[usize],
    policy: ReferencePolicy,
) -> Result<(DecompositionResult, Vec<String>), LinearError> {
    if y.len() != m.n_rows() {
        return input(format!("{} responses for {} rows", y.len(), m.n_rows()));
    }
    let ind = m
        .column_index(indicator)
        .ok_or_else(|| LinearError::Input(format!("no column named {indicator}")))?;
    let rows_a: Vec<usize> = (0..m.n_rows()).filter(|&r| m.get(r, ind) == 1.0).collect();
    let rows_b: Vec<usize> = (0..m.n_rows()).filter(|&r| m.get(r, ind) == 0.0).collect();
    if rows_a.is_empty() || rows_b.is_empty() {
        return input(format!("indicator {indicator} does not split the rows into two groups"));
    }
    let sub = m.select_columns(features);
    let kept = independent_columns(&sub, &[&rows_a, &rows_b])?;
    let dropped: Vec<String> = (0..sub.n_cols())
        .filter(|c| !kept.contains(c))
        .map(|c| sub.columns()[c].name.clone())
        .collect();
    let sub = sub.select_columns(&kept);
    let names = sub.column_names();
    let gather = |rows: &[usize]| -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(rows.len(), sub.n_cols(), |i, j| sub.get(rows[i], j));
        (x, rows.iter().map(|&r| y[r]).collect())
    };
    let (xa, ya) = gather(&rows_a);
    let (xb, yb) = gather(&rows_b);
    let label_a = indicator.to_string();
    let label_b = format!("not {indicator}");
    let d = oaxaca(
        &names,
        GroupData {
            label: &label_a,
            x: &xa,
            y: &ya,
        },
        GroupData {
            label: &label_b,
            x: &xb,
            y: &yb,
        },
        policy,
    )?;
    Ok((d, dropped))
}
