use std::collections::HashMap;

use sdoh_core::extraction::NoteRecord;
use sdoh_core::textfeat::{build_vocab, chi2_select, vectorize, SelectionResult, VocabConfig};

use super::Encoded;
use crate::error::{config, data, CliResult};
use crate::run::Run;
use crate::TextfeatArgs;

/// One document per labelled patient: their earliest note (ties broken by
/// note id), matching the snapshot rule used for encoding.
fn documents(notes: &[NoteRecord], enc: &Encoded, outcome: &str) -> CliResult<(Vec<String>, Vec<bool>)> {
    let mut earliest: HashMap<&str, &NoteRecord> = HashMap::new();
    for n in notes {
        let e = earliest.entry(n.patient_id.as_str()).or_insert(n);
        if (n.note_date, &n.note_id) < (e.note_date, &e.note_id) {
            *e = n;
        }
    }
    let labels = enc.outcome(outcome)?;
    let mut corpus = Vec::new();
    let mut y = Vec::new();
    for (id, &label) in labels.row_ids.iter().zip(&labels.labels) {
        if let Some(n) = earliest.get(id.as_str()) {
            corpus.push(n.text.clone());
            y.push(label);
        }
    }
    if corpus.is_empty() {
        return data(format!("no notes belong to patients with the {outcome} outcome"));
    }
    Ok((corpus, y))
}

pub fn write_textfeat(
    run: &mut Run,
    prefix: &str,
    notes: &[NoteRecord],
    enc: &Encoded,
    outcome: &str,
    k: usize,
    max_vocab: usize,
) -> CliResult<SelectionResult> {
    let (corpus, labels) = documents(notes, enc, outcome)?;
    let config = VocabConfig {
        max_size: max_vocab,
        ..VocabConfig::default()
    };
    let vocab = build_vocab(&corpus, &config)?;
    let counts = vectorize(&corpus, &vocab);
    let selection = chi2_select(&counts, &vocab, &labels, k)?;
    run.write_json(&format!("{prefix}vocabulary.json"), &vocab)?;
    run.write_table(&format!("{prefix}terms"), &selection, |w| selection.write_csv(w))?;
    Ok(selection)
}

pub fn run(args: &TextfeatArgs) -> CliResult<String> {
    if args.k == 0 || args.max_vocab == 0 {
        return config("k and max-vocab must be positive");
    }
    let mut run = Run::new("textfeat", args, &args.out)?;
    let notes: Vec<NoteRecord> = super::read_jsonl_file(&mut run, &args.notes)?;
    let enc = Encoded::load(&mut run, &args.encoded)?;
    let selection = write_textfeat(&mut run, "", &notes, &enc, &args.outcome, args.k, args.max_vocab)?;
    let manifest = run.finish()?;
    Ok(format!("selected {} terms ({manifest})", selection.selected.len()))
}
