use sdoh_core::encoding::YEAR_COLUMN;
use sdoh_core::questionnaire::Questionnaire;
use sdoh_core::stats::{cooccurrence, prevalence_panel, temporal_trends, write_trends_csv, TrendSeries};
use serde::Serialize;

use super::{check_alpha, Encoded};
use crate::error::{config, CliResult};
use crate::run::Run;
use crate::{CooccurArgs, PrevalenceArgs, TrendsArgs};

fn or_default(given: &[String], default: impl FnOnce() -> Vec<String>) -> Vec<String> {
    if given.is_empty() {
        default()
    } else {
        given.to_vec()
    }
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Writes `prevalence.{csv,json}` and `prevalence_points.json`. Returns the
/// number of significant cells.
pub fn write_prevalence(
    run: &mut Run,
    prefix: &str,
    enc: &Encoded,
    q: &Questionnaire,
    alpha: f64,
    groups: &[String],
    factors: &[String],
) -> CliResult<usize> {
    let mut panel = prevalence_panel(&enc.matrix, &refs(groups), &refs(factors), alpha)?;
    panel.set_themes(q);
    run.write_table(&format!("{prefix}prevalence"), &panel, |w| panel.write_csv(w))?;
    run.write_json(&format!("{prefix}prevalence_points.json"), &panel.plot_points())?;
    Ok(panel.significant_cells().count())
}

#[derive(Serialize)]
struct TrendExport<'a> {
    series: &'a [TrendSeries],
    slopes: Vec<(String, Option<f64>)>,
}

pub fn write_trends(
    run: &mut Run,
    prefix: &str,
    enc: &Encoded,
    factors: &[String],
    window: Option<(i32, i32)>,
) -> CliResult<usize> {
    let series: Vec<TrendSeries> = factors
        .iter()
        .map(|f| temporal_trends(&enc.matrix, f, YEAR_COLUMN, window))
        .collect::<Result<_, _>>()?;
    let export = TrendExport {
        slopes: series.iter().map(|s| (s.factor.clone(), s.slope())).collect(),
        series: &series,
    };
    run.write_table(&format!("{prefix}trends"), &export, |w| write_trends_csv(w, &series))?;
    Ok(series.len())
}

pub fn write_cooccurrence(run: &mut Run, prefix: &str, enc: &Encoded, factors: &[String]) -> CliResult<usize> {
    let c = cooccurrence(&enc.matrix, &refs(factors))?;
    run.write_table(&format!("{prefix}cooccurrence"), &c, |w| c.write_csv(w))?;
    Ok(c.factors.len())
}

pub fn prevalence(args: &PrevalenceArgs) -> CliResult<String> {
    check_alpha(args.alpha)?;
    let mut run = Run::new("analyze prevalence", args, &args.out)?;
    let q = super::questionnaire(&mut run, args.questionnaire.as_deref())?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let groups = or_default(&args.groups, || enc.demographic_columns());
    let factors = or_default(&args.factors, || enc.factor_columns());
    let hits = write_prevalence(&mut run, "", &enc, &q, args.alpha, &groups, &factors)?;
    let manifest = run.finish()?;
    Ok(format!(
        "{} factors x {} groups, {hits} significant at FDR {} ({manifest})",
        factors.len(),
        groups.len(),
        args.alpha
    ))
}

pub fn trends(args: &TrendsArgs) -> CliResult<String> {
    let window = match args.window.as_deref() {
        None => None,
        Some(&[a, b]) if a <= b => Some((a, b)),
        Some(w) => return config(format!("window {w:?} must be two ascending years")),
    };
    let mut run = Run::new("analyze trends", args, &args.out)?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let factors = or_default(&args.factors, || enc.factor_columns());
    let n = write_trends(&mut run, "", &enc, &factors, window)?;
    let manifest = run.finish()?;
    Ok(format!("{n} trend series ({manifest})"))
}

pub fn cooccur(args: &CooccurArgs) -> CliResult<String> {
    let mut run = Run::new("analyze cooccur", args, &args.out)?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let factors = or_default(&args.factors, || enc.factor_columns());
    let n = write_cooccurrence(&mut run, "", &enc, &factors)?;
    let manifest = run.finish()?;
    Ok(format!("{n}x{n} co-occurrence matrix ({manifest})"))
}
