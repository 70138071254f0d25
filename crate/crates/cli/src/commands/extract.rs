use sdoh_core::extraction::{
    extract_answers, validate_extraction, AnswerSet, Backend, ExtractOptions, HttpBackend, LabelNoise, NoteRecord,
    ReplayBackend,
};
use sdoh_core::io::write_jsonl;
use sdoh_core::synth::{CohortSpec, TemplateBackend};
use serde::Serialize;

use crate::error::{config, CliError, CliResult};
use crate::run::Run;
use crate::{BackendKind, ExtractArgs, ValidateArgs};

pub const EXTRACTED_FILE: &str = "extracted.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const WARNINGS_FILE: &str = "warnings.jsonl";

fn jsonl<T: Serialize>(items: &[T]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items)?;
    Ok(buf)
}

pub fn run(args: &ExtractArgs) -> CliResult<String> {
    let mut run = Run::new("extract", args, &args.out)?;
    let q = super::questionnaire(&mut run, args.questionnaire.as_deref())?;
    let notes: Vec<NoteRecord> = super::read_jsonl_file(&mut run, &args.notes)?;
    if !(0.0..=1.0).contains(&args.noise_rate) {
        return config(format!("noise rate {} not in [0,1]", args.noise_rate));
    }
    if args.noise_rate > 0.0 && args.backend != BackendKind::Mock {
        return config("label noise applies only to the mock backend");
    }

    let backend: Box<dyn Backend> = match args.backend {
        BackendKind::Mock => {
            let Some(path) = &args.answers else {
                return config("the mock backend needs --answers");
            };
            let answers: Vec<AnswerSet> = super::read_jsonl_file(&mut run, path)?;
            let noise = match args.noise_question {
                Some(question) => {
                    run.seed("noise_seed", args.noise_seed);
                    LabelNoise::on_question(question, args.noise_rate, args.noise_seed)
                }
                None if args.noise_rate > 0.0 => return config("--noise-rate needs --noise-question"),
                None => LabelNoise::none(),
            };
            Box::new(ReplayBackend::new(&q, &notes, &answers, noise)?)
        }
        BackendKind::Template => {
            let Some(path) = &args.spec else {
                return config("the template backend needs --spec");
            };
            let spec = CohortSpec::from_json(&run.read_string(path)?)?;
            Box::new(TemplateBackend::new(&spec, &q)?)
        }
        BackendKind::Http => {
            let (Some(endpoint), Some(model)) = (&args.endpoint, &args.model) else {
                return config("the http backend needs --endpoint and --model");
            };
            Box::new(HttpBackend::from_env(endpoint.clone(), model.clone()))
        }
    };
    let opts = ExtractOptions {
        parallelism: args.parallelism,
        retries: args.retries,
        ..ExtractOptions::default()
    };
    if opts.parallelism == 0 {
        return config("parallelism must be at least 1");
    }
    let outcome = extract_answers(backend.as_ref(), &q, &notes, &opts)?;

    run.write(EXTRACTED_FILE, &jsonl(&outcome.answers)?)?;
    run.write(FAILURES_FILE, &jsonl(&outcome.failures)?)?;
    run.write(WARNINGS_FILE, &jsonl(&outcome.warnings)?)?;
    let manifest = run.finish()?;
    let summary = format!(
        "extracted {} of {} notes, {} warnings ({manifest})",
        outcome.answers.len(),
        notes.len(),
        outcome.warnings.len()
    );
    match outcome.failures.len() {
        0 => Ok(summary),
        n if outcome.answers.is_empty() => Err(CliError::Backend(format!(
            "all {n} notes failed; see {FAILURES_FILE} ({summary})"
        ))),
        n => Err(CliError::Data(format!("{n} notes failed; see {FAILURES_FILE} ({summary})"))),
    }
}

pub fn validate(args: &ValidateArgs) -> CliResult<String> {
    let mut run = Run::new("validate-extraction", args, &args.out)?;
    let q = super::questionnaire(&mut run, args.questionnaire.as_deref())?;
    let predicted: Vec<AnswerSet> = super::read_jsonl_file(&mut run, &args.predicted)?;
    let gold: Vec<AnswerSet> = super::read_jsonl_file(&mut run, &args.gold)?;
    let report = validate_extraction(&predicted, &gold, &q)?;
    run.write_table("validation", &report, |w| -> CliResult<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["question", "accuracy", "ci_low", "ci_high", "correct", "n"])?;
        let rows = report
            .per_question
            .iter()
            .map(|(id, v)| (id.to_string(), &v.estimate))
            .chain(std::iter::once(("overall".to_string(), &report.overall)));
        for (name, e) in rows {
            wtr.write_record([
                name,
                e.accuracy.to_string(),
                e.ci_low.to_string(),
                e.ci_high.to_string(),
                e.correct.to_string(),
                e.n.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    let manifest = run.finish()?;
    Ok(format!(
        "overall accuracy {:.4} [{:.4}, {:.4}] over {} notes ({manifest})",
        report.overall.accuracy, report.overall.ci_low, report.overall.ci_high, report.n_pairs
    ))
}
