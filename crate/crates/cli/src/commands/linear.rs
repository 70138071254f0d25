use sdoh_core::encoding::FeatureGroup;
use sdoh_core::linear::{
    group_shares, independent_columns, lpm, oaxaca_by_indicator, DecompositionReport, OlsFit, ReferencePolicy,
};
use serde::Serialize;

use super::{column_groups, group_columns, parse_groups, Encoded};
use crate::error::{config, CliResult};
use crate::run::Run;
use crate::{DecomposeArgs, PolicyArg, RegressArgs};

#[derive(Serialize)]
struct RegressionExport<'a> {
    outcome: &'a str,
    dropped_collinear: Vec<String>,
    fit: &'a OlsFit,
}

/// Fits the LPM after dropping columns that are collinear with the
/// intercept or each other (one category per one-hot question at least).
pub fn write_regression(
    run: &mut Run,
    prefix: &str,
    enc: &Encoded,
    outcome: &str,
    groups: &[FeatureGroup],
) -> CliResult<OlsFit> {
    let (m, labels) = enc.labelled(outcome)?;
    let sub = m.select_columns(&group_columns(&m, groups)?);
    let all: Vec<usize> = (0..sub.n_rows()).collect();
    let kept = independent_columns(&sub, &[&all])?;
    let dropped_collinear = (0..sub.n_cols())
        .filter(|c| !kept.contains(c))
        .map(|c| sub.columns()[c].name.clone())
        .collect();
    let sub = sub.select_columns(&kept);
    let fit = lpm(&sub, &labels)?;
    let export = RegressionExport {
        outcome,
        dropped_collinear,
        fit: &fit,
    };
    let names = column_groups(&sub);
    run.write_table(&format!("{prefix}regression"), &export, |w| fit.write_csv(w, &names))?;
    Ok(fit)
}

#[derive(Serialize)]
struct DecompositionExport<'a> {
    outcome: &'a str,
    indicator: &'a str,
    dropped_collinear: &'a [String],
    #[serde(flatten)]
    report: &'a DecompositionReport,
}

pub fn write_decomposition(
    run: &mut Run,
    stem: &str,
    enc: &Encoded,
    outcome: &str,
    indicator: &str,
    groups: &[FeatureGroup],
    policy: ReferencePolicy,
) -> CliResult<DecompositionReport> {
    let (m, labels) = enc.labelled(outcome)?;
    let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
    let features: Vec<usize> = group_columns(&m, groups)?
        .into_iter()
        .filter(|&c| m.columns()[c].name != indicator)
        .collect();
    let (result, dropped) = oaxaca_by_indicator(&m, &y, indicator, &features, policy)?;
    let column_groups = column_groups(&m);
    let shares = group_shares(&result, &column_groups)?;
    let report = DecompositionReport {
        result,
        group_shares: shares,
    };
    let export = DecompositionExport {
        outcome,
        indicator,
        dropped_collinear: &dropped,
        report: &report,
    };
    run.write_table(stem, &export, |w| -> CliResult<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["feature", "group", "explained"])?;
        for (name, v) in &report.result.per_feature_explained {
            wtr.write_record([name.as_str(), column_groups[name].as_str(), &v.to_string()])?;
        }
        wtr.write_record(["explained_total", "", &report.result.explained_total.to_string()])?;
        wtr.write_record(["unexplained_total", "", &report.result.unexplained_total.to_string()])?;
        wtr.write_record(["gap", "", &report.result.gap.to_string()])?;
        wtr.flush()?;
        Ok(())
    })?;
    Ok(report)
}

pub fn regress(args: &RegressArgs) -> CliResult<String> {
    let groups = parse_groups(&args.features)?;
    let mut run = Run::new("regress", args, &args.out)?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let fit = write_regression(&mut run, "", &enc, &args.outcome, &groups)?;
    let manifest = run.finish()?;
    Ok(format!(
        "LPM on {} rows, {} coefficients, R^2 {:.4} ({manifest})",
        fit.n,
        fit.names.len(),
        fit.r_squared
    ))
}

pub fn decompose(args: &DecomposeArgs) -> CliResult<String> {
    let groups = parse_groups(&args.features)?;
    let policy = match args.policy {
        PolicyArg::Pooled => ReferencePolicy::PooledWithIndicator,
        PolicyArg::GroupA => ReferencePolicy::GroupARef,
        PolicyArg::GroupB => ReferencePolicy::GroupBRef,
    };
    let mut run = Run::new("decompose", args, &args.out)?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    if enc.matrix.column_index(&args.indicator).is_none() {
        return config(format!("no column named {}", args.indicator));
    }
    let report = write_decomposition(&mut run, "decomposition", &enc, &args.outcome, &args.indicator, &groups, policy)?;
    let manifest = run.finish()?;
    let r = &report.result;
    Ok(format!(
        "gap {:.4} = explained {:.4} + unexplained {:.4} ({manifest})",
        r.gap, r.explained_total, r.unexplained_total
    ))
}
