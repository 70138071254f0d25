//! Hypothesis tests, false discovery rate control, and the descriptive
//! panels built on them (prevalence deltas, co-occurrence, yearly trends).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_factorial;
use thiserror::Error;

use crate::encoding::FeatureMatrix;
use crate::questionnaire::Questionnaire;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn input<T>(msg: impl Into<String>) -> Result<T, StatsError> {
    Err(StatsError::Input(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    TwoPropZ,
    Chi2,
    FisherExact,
    KruskalWallis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub p_value: f64,
    pub df: Option<usize>,
    pub ci: Option<(f64, f64)>,
}

/// Wilson score interval for `successes / n`. With `n == 0` the interval is
/// the whole unit range.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Pooled two-proportion z test of `x1/n1` against `x2/n2`. The interval is
/// the unpooled normal approximation for `p1 - p2`.
pub fn two_prop_ztest(x1: usize, n1: usize, x2: usize, n2: usize) -> Result<TestResult, StatsError> {
    if n1 == 0 || n2 == 0 {
        return input("two_prop_ztest needs nonempty samples");
    }
    if x1 > n1 || x2 > n2 {
        return input(format!("counts exceed sample sizes: {x1}/{n1}, {x2}/{n2}"));
    }
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let (p1, p2) = (x1 as f64 / n1f, x2 as f64 / n2f);
    let pooled = (x1 + x2) as f64 / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    let (z, p) = if se > 0.0 {
        let z = (p1 - p2) / se;
        (z, normal_two_sided_p(z))
    } else {
        (0.0, 1.0)
    };
    let diff = p1 - p2;
    let half = Z_95 * (p1 * (1.0 - p1) / n1f + p2 * (1.0 - p2) / n2f).sqrt();
    Ok(TestResult {
        method: TestMethod::TwoPropZ,
        statistic: z,
        p_value: p,
        df: None,
        ci: Some((diff - half, diff + half)),
    })
}

/// Pearson chi-square test of independence, no continuity correction.
pub fn chi2_contingency(table: &[Vec<u64>]) -> Result<TestResult, StatsError> {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    if rows < 2 || cols < 2 || table.iter().any(|r| r.len() != cols) {
        return input("contingency table must be a rectangular grid of at least 2x2");
    }
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_sums: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    if row_sums.iter().chain(&col_sums).any(|&s| s == 0.0) {
        return input("contingency table has an empty row or column");
    }
    let total: f64 = row_sums.iter().sum();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_sums[i] * col_sums[j] / total;
            stat += (obs as f64 - expected).powi(2) / expected;
        }
    }
    let df = (rows - 1) * (cols - 1);
    let p = ChiSquared::new(df as f64).expect("df is positive").sf(stat);
    Ok(TestResult {
        method: TestMethod::Chi2,
        statistic: stat,
        p_value: p.clamp(0.0, 1.0),
        df: Some(df),
        ci: None,
    })
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`. The statistic is the
/// sample odds ratio `ad / bc`, which is infinite or NaN on zero cells.
pub fn fisher_exact(table: [[u64; 2]; 2]) -> TestResult {
    let [[a, b], [c, d]] = table;
    let r1 = a + b;
    let c1 = a + c;
    let n = a + b + c + d;
    let ln_choose = |n: u64, k: u64| ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k);
    let ln_denom = ln_choose(n, c1);
    let prob = |x: u64| (ln_choose(r1, x) + ln_choose(n - r1, c1 - x) - ln_denom).exp();
    let lo = c1.saturating_sub(n - r1);
    let hi = r1.min(c1);
    let observed = prob(a);
    // relative slack so tables tied with the observed one are not lost to rounding
    let cutoff = observed * (1.0 + 1e-7);
    let p: f64 = (lo..=hi).map(prob).filter(|&q| q <= cutoff).sum();
    TestResult {
        method: TestMethod::FisherExact,
        statistic: (a * d) as f64 / (b * c) as f64,
        p_value: p.min(1.0),
        df: None,
        ci: None,
    }
}

/// Midranks (1-based) of `values`, with tied values sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Kruskal-Wallis H with midranks and the usual tie correction.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return input("kruskal_wallis needs at least two groups");
    }
    if groups.iter().any(Vec::is_empty) {
        return input("kruskal_wallis groups must be nonempty");
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return input("kruskal_wallis values must be finite");
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let ranks = midranks(&pooled);
    let df = groups.len() - 1;

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_sum += t * t * t - t;
        i = j;
    }
    let correction = 1.0 - tie_sum / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(TestResult {
            method: TestMethod::KruskalWallis,
            statistic: 0.0,
            p_value: 1.0,
            df: Some(df),
            ci: None,
        });
    }

    let mut offset = 0;
    let mut h = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        h += r * r / g.len() as f64;
        offset += g.len();
    }
    h = (12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    let p = ChiSquared::new(df as f64).expect("df is positive").sf(h);
    Ok(TestResult {
        method: TestMethod::KruskalWallis,
        statistic: h,
        p_value: p.clamp(0.0, 1.0),
        df: Some(df),
        ci: None,
    })
}

/// Benjamini-Hochberg step-up adjustment. Adjusted values are monotone in
/// the raw p order and capped at 1; a hypothesis is rejected when its
/// adjusted p is strictly below `alpha`. Output order matches input order.
pub fn bh_adjust(p_values: &[f64], alpha: f64) -> (Vec<f64>, Vec<bool>) {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0_f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        let candidate = p_values[i] * m as f64 / (rank + 1) as f64;
        running = running.min(candidate);
        adjusted[i] = running.min(1.0);
    }
    let reject = adjusted.iter().map(|&q| q < alpha).collect();
    (adjusted, reject)
}

/// Theme label for a one-hot column named `q<id>=<category>`.
pub fn factor_theme(column: &str, q: &Questionnaire) -> Option<String> {
    let id = column.strip_prefix('q')?.split('=').next()?.parse().ok()?;
    q.get(id).map(|question| question.theme.as_str().to_string())
}

fn binary_column(m: &FeatureMatrix, name: &str) -> Result<Vec<bool>, StatsError> {
    let c = m
        .column_index(name)
        .ok_or_else(|| StatsError::Input(format!("no column named {name}")))?;
    (0..m.n_rows())
        .map(|r| match m.get(r, c) {
            v if v == 1.0 => Ok(true),
            v if v == 0.0 => Ok(false),
            v => input(format!("column {name} is not binary (row {r} holds {v})")),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorInfo {
    pub name: String,
    pub theme: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelCell {
    pub factor: String,
    pub group: String,
    pub n_group: usize,
    pub count: usize,
    /// False when the group or its complement is empty; the statistical
    /// fields are then `None`.
    pub computable: bool,
    pub prevalence: Option<f64>,
    pub prevalence_ci: Option<(f64, f64)>,
    pub delta_pp: Option<f64>,
    pub delta_rel: Option<f64>,
    pub z: Option<f64>,
    pub raw_p: Option<f64>,
    pub adj_p: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalencePanel {
    pub alpha: f64,
    pub n: usize,
    pub factors: Vec<FactorInfo>,
    pub groups: Vec<String>,
    pub baseline: BTreeMap<String, f64>,
    pub cells: Vec<PanelCell>,
}

/// One record of the plot-ready export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPoint {
    pub factor: String,
    pub theme: Option<String>,
    pub group: String,
    pub delta_pp: Option<f64>,
    pub delta_rel: Option<f64>,
    pub adj_p: Option<f64>,
    pub significant: bool,
}

impl PrevalencePanel {
    pub fn cell(&self, factor: &str, group: &str) -> Option<&PanelCell> {
        self.cells.iter().find(|c| c.factor == factor && c.group == group)
    }

    pub fn significant_cells(&self) -> impl Iterator<Item = &PanelCell> {
        self.cells.iter().filter(|c| c.significant)
    }

    pub fn set_themes(&mut self, q: &Questionnaire) {
        for f in &mut self.factors {
            f.theme = factor_theme(&f.name, q);
        }
    }

    pub fn plot_points(&self) -> Vec<PanelPoint> {
        let themes: BTreeMap<&str, Option<String>> =
            self.factors.iter().map(|f| (f.name.as_str(), f.theme.clone())).collect();
        self.cells
            .iter()
            .map(|c| PanelPoint {
                factor: c.factor.clone(),
                theme: themes.get(c.factor.as_str()).cloned().flatten(),
                group: c.group.clone(),
                delta_pp: c.delta_pp,
                delta_rel: c.delta_rel,
                adj_p: c.adj_p,
                significant: c.significant,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), StatsError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "factor",
            "group",
            "n_group",
            "count",
            "prevalence",
            "ci_low",
            "ci_high",
            "baseline",
            "delta_pp",
            "delta_rel",
            "z",
            "raw_p",
            "adj_p",
            "significant",
        ])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            wtr.write_record([
                c.factor.clone(),
                c.group.clone(),
                c.n_group.to_string(),
                c.count.to_string(),
                f(c.prevalence),
                f(c.prevalence_ci.map(|x| x.0)),
                f(c.prevalence_ci.map(|x| x.1)),
                f(self.baseline.get(&c.factor).copied()),
                f(c.delta_pp),
                f(c.delta_rel),
                f(c.z),
                f(c.raw_p),
                f(c.adj_p),
                c.significant.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Tests each (factor, group) cell as group against complement, then applies
/// BH across every computable cell of the panel. Deltas are reported against
/// the whole-cohort prevalence.
pub fn prevalence_panel(
    m: &FeatureMatrix,
    groups: &[&str],
    factors: &[&str],
    alpha: f64,
) -> Result<PrevalencePanel, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return input(format!("alpha {alpha} not in (0,1)"));
    }
    let n = m.n_rows();
    let group_cols: Vec<Vec<bool>> = groups.iter().map(|g| binary_column(m, g)).collect::<Result<_, _>>()?;
    let factor_cols: Vec<Vec<bool>> = factors.iter().map(|f| binary_column(m, f)).collect::<Result<_, _>>()?;

    let mut baseline = BTreeMap::new();
    let mut cells = Vec::with_capacity(groups.len() * factors.len());
    for (fname, fcol) in factors.iter().zip(&factor_cols) {
        let total_hits = fcol.iter().filter(|&&x| x).count();
        let base = if n > 0 { total_hits as f64 / n as f64 } else { f64::NAN };
        baseline.insert(fname.to_string(), base);
        for (gname, gcol) in groups.iter().zip(&group_cols) {
            let n_group = gcol.iter().filter(|&&x| x).count();
            let count = gcol.iter().zip(fcol).filter(|(&g, &f)| g && f).count();
            let mut cell = PanelCell {
                factor: fname.to_string(),
                group: gname.to_string(),
                n_group,
                count,
                computable: false,
                prevalence: None,
                prevalence_ci: None,
                delta_pp: None,
                delta_rel: None,
                z: None,
                raw_p: None,
                adj_p: None,
                significant: false,
            };
            let n_rest = n - n_group;
            if n_group > 0 && n_rest > 0 {
                let prevalence = count as f64 / n_group as f64;
                let test = two_prop_ztest(count, n_group, total_hits - count, n_rest)?;
                let delta_pp = 100.0 * (prevalence - base);
                cell.computable = true;
                cell.prevalence = Some(prevalence);
                cell.prevalence_ci = Some(wilson_interval(count as u64, n_group as u64, Z_95));
                cell.delta_pp = Some(delta_pp);
                cell.delta_rel = (base > 0.0).then(|| 100.0 * (prevalence - base) / base);
                cell.z = Some(test.statistic);
                cell.raw_p = Some(test.p_value);
            }
            cells.push(cell);
        }
    }

    let tested: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].computable).collect();
    let raw: Vec<f64> = tested.iter().map(|&i| cells[i].raw_p.unwrap_or(1.0)).collect();
    let (adjusted, reject) = bh_adjust(&raw, alpha);
    for ((&i, adj), rej) in tested.iter().zip(adjusted).zip(reject) {
        cells[i].adj_p = Some(adj);
        cells[i].significant = rej;
    }

    Ok(PrevalencePanel {
        alpha,
        n,
        factors: factors
            .iter()
            .map(|f| FactorInfo {
                name: f.to_string(),
                theme: None,
            })
            .collect(),
        groups: groups.iter().map(|g| g.to_string()).collect(),
        baseline,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    pub factors: Vec<String>,
    pub n_i: Vec<usize>,
    /// `cells[i][j]` is the percent of factor-i patients who also have
    /// factor j, or `None` when factor i never occurs.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl CooccurrenceMatrix {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), StatsError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["factor".to_string(), "n_i".to_string()];
        header.extend(self.factors.iter().cloned());
        wtr.write_record(&header)?;
        for (i, row) in self.cells.iter().enumerate() {
            let mut rec = vec![self.factors[i].clone(), self.n_i[i].to_string()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Conditional co-occurrence percentages `100 * n_ij / n_i`.
pub fn cooccurrence(m: &FeatureMatrix, factors: &[&str]) -> Result<CooccurrenceMatrix, StatsError> {
    let cols: Vec<Vec<bool>> = factors.iter().map(|f| binary_column(m, f)).collect::<Result<_, _>>()?;
    let k = cols.len();
    // per-row lists of present factors keep the pair counting sparse
    let mut present: Vec<Vec<usize>> = vec![Vec::new(); m.n_rows()];
    for (j, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            if x {
                present[r].push(j);
            }
        }
    }
    let mut joint = vec![vec![0usize; k]; k];
    for row in &present {
        for &i in row {
            for &j in row {
                joint[i][j] += 1;
            }
        }
    }
    let n_i: Vec<usize> = (0..k).map(|i| joint[i][i]).collect();
    let cells = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| match n_i[i] {
                    0 => None,
                    _ if i == j => Some(100.0),
                    ni => Some(100.0 * joint[i][j] as f64 / ni as f64),
                })
                .collect()
        })
        .collect();
    Ok(CooccurrenceMatrix {
        factors: factors.iter().map(|f| f.to_string()).collect(),
        n_i,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub year: i32,
    pub numerator: usize,
    pub denominator: usize,
    /// `None` for a year with no patients.
    pub prevalence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSeries {
    pub factor: String,
    pub points: Vec<TrendPoint>,
}

impl TrendSeries {
    /// Least-squares slope of prevalence on year over years with patients.
    pub fn slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter_map(|p| p.prevalence.map(|v| (f64::from(p.year), v)))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

pub fn write_trends_csv<W: Write>(writer: W, series: &[TrendSeries]) -> Result<(), StatsError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["factor", "year", "numerator", "denominator", "prevalence"])?;
    for s in series {
        for p in &s.points {
            wtr.write_record([
                s.factor.clone(),
                p.year.to_string(),
                p.numerator.to_string(),
                p.denominator.to_string(),
                p.prevalence.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Per-year prevalence of a binary factor. Years run contiguously over
/// `window` when given, otherwise over the observed range; years without
/// patients appear with a zero denominator.
pub fn temporal_trends(
    m: &FeatureMatrix,
    factor: &str,
    year_col: &str,
    window: Option<(i32, i32)>,
) -> Result<TrendSeries, StatsError> {
    let f = binary_column(m, factor)?;
    let yc = m
        .column_index(year_col)
        .ok_or_else(|| StatsError::Input(format!("no column named {year_col}")))?;
    let mut years = Vec::with_capacity(m.n_rows());
    for r in 0..m.n_rows() {
        let v = m.get(r, yc);
        if !v.is_finite() || v.fract() != 0.0 {
            return input(format!("row {r}: year {v} is not a whole number"));
        }
        years.push(v as i32);
    }
    let (start, end) = match window {
        Some(w) => w,
        None => match (years.iter().min(), years.iter().max()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                return Ok(TrendSeries {
                    factor: factor.to_string(),
                    points: Vec::new(),
                })
            }
        },
    };
    if start > end {
        return input(format!("empty year window {start}-{end}"));
    }
    let mut counts: BTreeMap<i32, (usize, usize)> = (start..=end).map(|y| (y, (0, 0))).collect();
    for (y, hit) in years.iter().zip(&f) {
        if let Some(entry) = counts.get_mut(y) {
            entry.1 += 1;
            entry.0 += usize::from(*hit);
        }
    }
    Ok(TrendSeries {
        factor: factor.to_string(),
        points: counts
            .into_iter()
            .map(|(year, (numerator, denominator))| TrendPoint {
                year,
                numerator,
                denominator,
                prevalence: (denominator > 0).then(|| numerator as f64 / denominator as f64),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{FeatureColumn, FeatureGroup};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ztest_examples() {
        let t = two_prop_ztest(5, 10, 5, 10).unwrap();
        assert_eq!((t.statistic, t.p_value), (0.0, 1.0));

        let t = two_prop_ztest(40, 100, 20, 100).unwrap();
        let z = 0.2 / (0.3f64 * 0.7 * 0.02).sqrt();
        assert!(close(t.statistic, z, 1e-12));
        assert!(close(t.statistic, 3.086, 1e-3));
        assert!(close(t.p_value, 0.0020, 1e-4));
        let (lo, hi) = t.ci.unwrap();
        assert!(lo < 0.2 && 0.2 < hi);

        let t = two_prop_ztest(0, 10, 10, 10).unwrap();
        assert!(t.statistic < 0.0 && t.p_value < 0.001);

        assert!(two_prop_ztest(1, 0, 1, 2).is_err());
        assert_eq!(two_prop_ztest(0, 4, 0, 9).unwrap().p_value, 1.0);
    }

    #[test]
    fn chi2_examples() {
        let t = chi2_contingency(&[vec![10, 10], vec![10, 10]]).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        let t = chi2_contingency(&[vec![20, 5], vec![5, 20]]).unwrap();
        assert!(close(t.statistic, 18.0, 1e-12));
        assert_eq!(chi2_contingency(&[vec![4, 4, 4], vec![4, 4, 4]]).unwrap().df, Some(2));
        assert!(chi2_contingency(&[vec![0, 0], vec![3, 4]]).is_err());
    }

    #[test]
    fn fisher_examples() {
        assert!(close(fisher_exact([[1, 1], [1, 1]]).p_value, 1.0, 1e-12));
        let p = fisher_exact([[0, 5], [5, 0]]).p_value;
        assert!(close(p, 2.0 / 252.0, 1e-12));
        assert_eq!(p, fisher_exact([[5, 0], [0, 5]]).p_value);
        let a = fisher_exact([[3, 7], [9, 2]]).p_value;
        assert!(close(a, fisher_exact([[3, 9], [7, 2]]).p_value, 1e-12));
        assert!(close(a, fisher_exact([[2, 9], [7, 3]]).p_value, 1e-12));
    }

    #[test]
    fn kruskal_examples() {
        let t = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(close(t.statistic, 0.0, 1e-12));
        assert!(close(t.p_value, 1.0, 1e-12));

        // ranks 1..6, rank sums 6 and 15
        let t = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![10.0, 11.0, 12.0]]).unwrap();
        let h = 12.0 / 42.0 * (36.0 / 3.0 + 225.0 / 3.0) - 21.0;
        assert!(close(t.statistic, h, 1e-12));

        let t = kruskal_wallis(&[vec![2.0], vec![2.0], vec![2.0]]).unwrap();
        assert_eq!((t.statistic, t.p_value), (0.0, 1.0));
        assert!(kruskal_wallis(&[vec![1.0]]).is_err());
    }

    #[test]
    fn bh_examples() {
        let (adj, rej) = bh_adjust(&[0.01, 0.04, 0.03, 0.005], 0.05);
        let want = [0.02, 0.04, 0.04, 0.02];
        for (a, w) in adj.iter().zip(want) {
            assert!(close(*a, w, 1e-15));
        }
        assert!(rej.iter().all(|&r| r));
        assert_eq!(bh_adjust(&[0.5], 0.05).0, vec![0.5]);
        assert_eq!(bh_adjust(&[], 0.05).0, Vec::<f64>::new());
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(90, 100, Z_95);
        assert!(lo < 0.9 && 0.9 < hi);
        assert!(close(lo, 0.8256, 1e-4));
        assert_eq!(wilson_interval(0, 0, Z_95), (0.0, 1.0));
        let (lo, hi) = wilson_interval(10, 10, Z_95);
        assert!(close(hi, 1.0, 1e-12) && lo < 1.0);
    }

    fn matrix(cols: &[(&str, Vec<f64>)]) -> FeatureMatrix {
        let n = cols[0].1.len();
        let columns = cols
            .iter()
            .map(|(name, _)| {
                if *name == "year" {
                    FeatureColumn::continuous(*name, FeatureGroup::Temporal)
                } else {
                    FeatureColumn::binary(*name, FeatureGroup::Sdoh)
                }
            })
            .collect();
        let mut values = Vec::new();
        for r in 0..n {
            values.extend(cols.iter().map(|c| c.1[r]));
        }
        FeatureMatrix::new((0..n).map(|i| format!("p{i}")).collect(), columns, values).unwrap()
    }

    #[test]
    fn cooccurrence_toy() {
        let m = matrix(&[("A", vec![1.0, 1.0]), ("B", vec![0.0, 1.0]), ("C", vec![0.0, 0.0])]);
        let c = cooccurrence(&m, &["A", "B", "C"]).unwrap();
        assert_eq!(c.cells[0][1], Some(50.0));
        assert_eq!(c.cells[1][0], Some(100.0));
        assert_eq!(c.cells[0][0], Some(100.0));
        assert_eq!(c.cells[2], vec![None, None, None]);
        assert_eq!(c.cells[0][2], Some(0.0));
    }

    #[test]
    fn panel_null_and_single_cell() {
        let m = matrix(&[("g", vec![1.0, 1.0, 0.0, 0.0]), ("f", vec![1.0, 0.0, 1.0, 0.0])]);
        let p = prevalence_panel(&m, &["g"], &["f"], 0.05).unwrap();
        let cell = p.cell("f", "g").unwrap();
        assert_eq!(cell.delta_pp, Some(0.0));
        assert!(!cell.significant);
        assert_eq!(cell.adj_p, cell.raw_p);
    }

    #[test]
    fn panel_empty_group_not_computable() {
        let m = matrix(&[("g", vec![0.0, 0.0]), ("f", vec![1.0, 0.0])]);
        let p = prevalence_panel(&m, &["g"], &["f"], 0.05).unwrap();
        let cell = p.cell("f", "g").unwrap();
        assert!(!cell.computable && !cell.significant && cell.adj_p.is_none());
    }

    #[test]
    fn trends_with_empty_numerator_and_gap() {
        let m = matrix(&[
            ("f", vec![1.0, 0.0, 0.0, 1.0]),
            ("year", vec![2012.0, 2013.0, 2013.0, 2015.0]),
        ]);
        let t = temporal_trends(&m, "f", "year", None).unwrap();
        let years: Vec<i32> = t.points.iter().map(|p| p.year).collect();
        assert_eq!(years, vec![2012, 2013, 2014, 2015]);
        assert_eq!(t.points[1].prevalence, Some(0.0));
        assert_eq!(t.points[1].denominator, 2);
        assert_eq!(t.points[2].prevalence, None);
        assert_eq!(t.points[2].denominator, 0);
    }

    #[test]
    fn non_binary_factor_rejected() {
        let m = FeatureMatrix::new(
            vec!["a".into()],
            vec![FeatureColumn::continuous("x", FeatureGroup::Clinical)],
            vec![0.5],
        )
        .unwrap();
        assert!(cooccurrence(&m, &["x"]).is_err());
    }
}
