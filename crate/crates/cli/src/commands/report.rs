use std::collections::BTreeMap;

use sdoh_core::encoding::{FeatureGroup, LISTED_OUTCOME, REC_OUTCOME};
use sdoh_core::extraction::NoteRecord;
use sdoh_core::linear::ReferencePolicy;
use serde::Serialize;

use super::model::{check_model_args, default_combos, train_combo, write_report_rows, write_shap};
use super::{analyze, check_alpha, linear, text, Encoded, LISTED_GIVEN_REC};
use crate::error::{config, CliResult};
use crate::run::Run;
use crate::ReportArgs;

pub const INVENTORY_FILE: &str = "inventory.json";

#[derive(Serialize, Default)]
struct Inventory {
    sections: BTreeMap<String, Vec<String>>,
    /// Analyses that could not run on this cohort, with the reason.
    skipped: Vec<(String, String)>,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Runs `f` and files every artifact it writes under `section`.
fn section(run: &mut Run, inv: &mut Inventory, name: &str, f: impl FnOnce(&mut Run) -> CliResult<()>) -> CliResult<()> {
    let before = run.output_names().len();
    f(run)?;
    let files = run.output_names().split_off(before);
    inv.sections.entry(name.to_string()).or_default().extend(files);
    Ok(())
}

pub fn run(args: &ReportArgs) -> CliResult<String> {
    check_alpha(args.alpha)?;
    check_model_args(&args.model)?;
    if args.top_k == 0 {
        return config("top-k must be at least 1");
    }
    let mut run = Run::new("report", args, &args.out)?;
    run.seed("seed", args.model.seed);
    let q = super::questionnaire(&mut run, args.questionnaire.as_deref())?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let notes: Option<Vec<NoteRecord>> = match &args.notes {
        Some(p) => Some(super::read_jsonl_file(&mut run, p)?),
        None => None,
    };
    let groups = enc.demographic_columns();
    let factors = enc.factor_columns();
    let mut inv = Inventory::default();

    section(&mut run, &mut inv, "prevalence", |run| {
        analyze::write_prevalence(run, "prevalence/", &enc, &q, args.alpha, &groups, &factors).map(drop)
    })?;
    section(&mut run, &mut inv, "trends", |run| {
        analyze::write_trends(run, "trends/", &enc, &factors, None).map(drop)
    })?;
    section(&mut run, &mut inv, "cooccurrence", |run| {
        analyze::write_cooccurrence(run, "cooccurrence/", &enc, &factors).map(drop)
    })?;
    let all = [FeatureGroup::Clinical, FeatureGroup::Demographic, FeatureGroup::Sdoh];
    section(&mut run, &mut inv, "regression", |run| {
        linear::write_regression(run, "regression/", &enc, LISTED_OUTCOME, &all).map(drop)
    })?;

    // one decomposition of the listing gap per race/ethnicity indicator
    for column in groups.iter().filter(|c| c.starts_with("race=")) {
        let stem = format!("decomposition/{}", slug(column));
        let mut err = None;
        section(&mut run, &mut inv, "decomposition", |run| {
            let result = linear::write_decomposition(
                run,
                &stem,
                &enc,
                LISTED_OUTCOME,
                column,
                &[FeatureGroup::Clinical, FeatureGroup::Sdoh],
                ReferencePolicy::PooledWithIndicator,
            );
            if let Err(e) = result {
                err = Some(e.to_string());
            }
            Ok(())
        })?;
        if let Some(e) = err {
            inv.skipped.push((stem, e));
        }
    }

    for outcome in [REC_OUTCOME, LISTED_OUTCOME, LISTED_GIVEN_REC] {
        let prefix = format!("models/{outcome}/");
        let mut rows = Vec::new();
        let mut full = None;
        section(&mut run, &mut inv, "models", |run| {
            for combo in default_combos() {
                let trained = train_combo(run, &prefix, &enc, outcome, &combo, &args.model)?;
                rows.push(trained.row.clone());
                full = Some(trained);
            }
            write_report_rows(run, &prefix, &rows)
        })?;
        // the last combination uses every feature set
        let full = full.expect("six combinations");
        section(&mut run, &mut inv, "shap", |run| {
            write_shap(run, &format!("shap/{outcome}/"), &full.model, &full.test, args.top_k).map(drop)
        })?;
    }

    match &notes {
        Some(notes) => section(&mut run, &mut inv, "textfeat", |run| {
            text::write_textfeat(run, "textfeat/", notes, &enc, LISTED_OUTCOME, 100, 10_000).map(drop)
        })?,
        None => inv.skipped.push(("textfeat".into(), "no notes given".into())),
    }

    run.write_json(INVENTORY_FILE, &inv)?;
    let manifest = run.finish()?;
    Ok(format!(
        "report with {} sections, {} skipped ({manifest})",
        inv.sections.len(),
        inv.skipped.len()
    ))
}
