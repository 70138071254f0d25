use std::io::Cursor;

use sdoh_core::encoding::{
    assemble_matrix, binarize_outcomes, earliest_snapshot_per_patient, one_hot_snapshots, read_cohort_csv,
    FeatureGroup, StudyWindow,
};
use sdoh_core::extraction::{AnswerSet, NoteRecord};
use sdoh_core::io::write_jsonl;
use sdoh_core::questionnaire::Role;
use serde::Serialize;

use super::{MATRIX_CSV, MATRIX_MANIFEST, OUTCOMES_FILE};
use crate::error::{config, CliResult};
use crate::run::Run;
use crate::EncodeArgs;

#[derive(Serialize)]
struct Exclusions<'a> {
    count: usize,
    patient_ids: &'a [String],
}

pub fn run(args: &EncodeArgs) -> CliResult<String> {
    let mut run = Run::new("encode", args, &args.out)?;
    if args.window_start > args.window_end {
        return config(format!("window {}..{} is empty", args.window_start, args.window_end));
    }
    let window = StudyWindow {
        start: args.window_start,
        end: args.window_end,
    };
    let q = super::questionnaire(&mut run, args.questionnaire.as_deref())?;
    let cohort = read_cohort_csv(Cursor::new(run.read(&args.cohort)?), window)?;
    let answers: Vec<AnswerSet> = super::read_jsonl_file(&mut run, &args.answers)?;
    let notes: Vec<NoteRecord> = super::read_jsonl_file(&mut run, &args.notes)?;
    for a in &answers {
        a.validate(&q)?;
    }

    let snapshots = earliest_snapshot_per_patient(&answers, &notes);
    let block = one_hot_snapshots(&snapshots, &q, &[Role::Sdoh]);
    let assembled = assemble_matrix(
        &cohort,
        Some(&block),
        &[
            FeatureGroup::Clinical,
            FeatureGroup::Demographic,
            FeatureGroup::Sdoh,
            FeatureGroup::Temporal,
        ],
    )?;
    let outcomes = binarize_outcomes(&cohort, &snapshots);
    let m = &assembled.matrix;

    let mut csv = Vec::new();
    m.write_csv(&mut csv)?;
    run.write(MATRIX_CSV, &csv)?;
    run.write_json(MATRIX_MANIFEST, &m.manifest())?;
    run.write_json(OUTCOMES_FILE, &outcomes)?;
    run.write_json(
        "excluded.json",
        &Exclusions {
            count: assembled.excluded.len(),
            patient_ids: &assembled.excluded,
        },
    )?;
    let mut snap = Vec::new();
    write_jsonl(&mut snap, &snapshots)?;
    run.write("snapshots.jsonl", &snap)?;
    let manifest = run.finish()?;
    Ok(format!(
        "encoded {} rows x {} columns, {} excluded ({manifest})",
        m.n_rows(),
        m.n_cols(),
        assembled.excluded.len()
    ))
}
