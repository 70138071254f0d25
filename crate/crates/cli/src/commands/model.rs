use sdoh_core::encoding::{downsample_majority, stratified_split, FeatureGroup, FeatureMatrix};
use sdoh_core::gbm::{grid_search_cv, report, train as fit, write_reports_csv, Ensemble, ParamGrid, ReportRow, TrainParams};
use sdoh_core::shap::{summarize, ShapSummary};

use super::{combo_name, group_columns, parse_groups, Encoded};
use crate::error::{config, CliResult};
use crate::run::Run;
use crate::{ExplainArgs, GridArg, ModelArgs, TrainArgs};

/// The six combinations of clinical, demographic and SDOH features.
pub fn default_combos() -> Vec<Vec<FeatureGroup>> {
    use FeatureGroup::{Clinical, Demographic, Sdoh};
    vec![
        vec![Clinical],
        vec![Demographic],
        vec![Sdoh],
        vec![Clinical, Demographic],
        vec![Clinical, Sdoh],
        vec![Clinical, Demographic, Sdoh],
    ]
}

pub fn param_grid(arg: GridArg) -> ParamGrid {
    match arg {
        GridArg::Single => ParamGrid::single(&TrainParams::default()),
        GridArg::Default => ParamGrid {
            max_depth: vec![3, 6],
            learning_rate: vec![0.05, 0.1],
            n_estimators: vec![100, 300, 500],
            ..ParamGrid::single(&TrainParams::default())
        },
        GridArg::Full => ParamGrid::full(),
    }
}

pub fn check_model_args(a: &ModelArgs) -> CliResult<()> {
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return config(format!("test fraction {} not in (0,1)", a.test_fraction));
    }
    if a.folds < 2 {
        return config(format!("need at least 2 folds, got {}", a.folds));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return config(format!("threshold {} not in [0,1]", a.threshold));
    }
    Ok(())
}

pub struct Trained {
    pub row: ReportRow,
    pub model: Ensemble,
    pub test: FeatureMatrix,
}

/// Split, optional class balancing of the training part, grid search,
/// refit on the whole training part, then held-out metrics. Writes
/// `models/<combo>.json` and `grids/<combo>.json` under `prefix`.
pub fn train_combo(
    run: &mut Run,
    prefix: &str,
    enc: &Encoded,
    outcome: &str,
    groups: &[FeatureGroup],
    a: &ModelArgs,
) -> CliResult<Trained> {
    let name = combo_name(groups);
    let (m, labels) = enc.labelled(outcome)?;
    let m = m.select_columns(&group_columns(&m, groups)?);
    let split = stratified_split(&labels, a.test_fraction, a.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let mut train_rows = split.train.clone();
    if !a.no_downsample {
        let keep = downsample_majority(&pick(&train_rows), a.seed);
        train_rows = keep.iter().map(|&i| train_rows[i]).collect();
    }
    let train_m = m.select_rows(&train_rows);
    let train_y = pick(&train_rows);
    let base = TrainParams {
        seed: a.seed,
        ..TrainParams::default()
    };
    let grid = grid_search_cv(&train_m, &train_y, &param_grid(a.grid), &base, a.folds, a.seed)?;
    let model = fit(&train_m, &train_y, &grid.best)?;
    let test = m.select_rows(&split.test);
    let scores = model.predict_proba(&test)?;
    let metrics = report(&scores, &pick(&split.test), a.threshold, a.bootstrap, a.seed)?;
    run.write(&format!("{prefix}models/{name}.json"), format!("{}\n", model.to_json()?).as_bytes())?;
    run.write_json(&format!("{prefix}grids/{name}.json"), &grid)?;
    Ok(Trained {
        row: ReportRow {
            outcome: outcome.to_string(),
            model: name,
            report: metrics,
        },
        model,
        test,
    })
}

pub fn write_report_rows(run: &mut Run, prefix: &str, rows: &[ReportRow]) -> CliResult<()> {
    run.write_table(&format!("{prefix}report"), &rows, |w| write_reports_csv(w, rows))
}

pub fn write_shap(run: &mut Run, prefix: &str, model: &Ensemble, m: &FeatureMatrix, top_k: usize) -> CliResult<ShapSummary> {
    let cols: Vec<usize> = model
        .feature_names
        .iter()
        .map(|name| m.require_column(name))
        .collect::<Result<_, _>>()?;
    let summary = summarize(model, &m.select_columns(&cols), top_k)?;
    run.write_table(&format!("{prefix}shap"), &summary, |w| summary.write_csv(w))?;
    Ok(summary)
}

pub fn train(args: &TrainArgs) -> CliResult<String> {
    check_model_args(&args.model)?;
    let combos = if args.features.is_empty() {
        default_combos()
    } else {
        args.features.iter().map(|f| parse_groups(f)).collect::<CliResult<_>>()?
    };
    let mut run = Run::new("train", args, &args.out)?;
    run.seed("seed", args.model.seed);
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let mut rows = Vec::new();
    for groups in &combos {
        rows.push(train_combo(&mut run, "", &enc, &args.outcome, groups, &args.model)?.row);
    }
    write_report_rows(&mut run, "", &rows)?;
    let manifest = run.finish()?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {}: AUROC {:.4}", r.outcome, r.model, r.report.auroc))
        .collect();
    Ok(format!("{} ({manifest})", lines.join("; ")))
}

pub fn explain(args: &ExplainArgs) -> CliResult<String> {
    if args.top_k == 0 {
        return config("top-k must be at least 1");
    }
    let mut run = Run::new("explain", args, &args.out)?;
    let model = Ensemble::from_json(&run.read_string(&args.model)?)?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let summary = write_shap(&mut run, "", &model, &enc.matrix, args.top_k)?;
    let manifest = run.finish()?;
    Ok(format!("top features: {} ({manifest})", summary.top_k.join(", ")))
}
