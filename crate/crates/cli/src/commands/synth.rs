use sdoh_core::encoding::write_cohort_csv;
use sdoh_core::io::write_jsonl;
use sdoh_core::synth::{demo_spec, generate, CohortSpec, ANSWERS_FILE, COHORT_FILE, NOTES_FILE, TRUTH_FILE};

use crate::error::CliResult;
use crate::run::Run;
use crate::SynthArgs;

pub const SPEC_FILE: &str = "spec.json";

pub fn run(args: &SynthArgs) -> CliResult<String> {
    let mut run = Run::new("synth", args, &args.out)?;
    run.seed("seed", args.seed);
    let q = super::questionnaire(&mut run, args.questionnaire.as_deref())?;
    let spec = match &args.spec {
        Some(path) => CohortSpec::from_json(&run.read_string(path)?)?,
        None => demo_spec(),
    };
    let out = generate(&spec, &q, args.seed)?;

    let mut cohort = Vec::new();
    write_cohort_csv(&mut cohort, &out.cohort)?;
    run.write(COHORT_FILE, &cohort)?;
    let mut notes = Vec::new();
    write_jsonl(&mut notes, &out.notes)?;
    run.write(NOTES_FILE, &notes)?;
    let mut answers = Vec::new();
    write_jsonl(&mut answers, &out.truth.answers)?;
    run.write(ANSWERS_FILE, &answers)?;
    run.write_json(TRUTH_FILE, &out.truth)?;
    run.write(SPEC_FILE, format!("{}\n", spec.to_json()).as_bytes())?;
    let manifest = run.finish()?;
    Ok(format!(
        "synth {}: {} patients, {} notes ({manifest})",
        spec.name,
        out.cohort.len(),
        out.notes.len()
    ))
}
