use std::collections::BTreeMap;

use sdoh_core::questionnaire::{build_prompt, Role, SYSTEM_PROMPT};
use serde::Serialize;

use crate::error::CliResult;
use crate::run::Run;
use crate::QuestionnaireArgs;

#[derive(Serialize)]
struct Summary {
    version: String,
    questions: usize,
    categorical: usize,
    by_role: BTreeMap<String, Vec<u32>>,
}

pub fn validate(args: &QuestionnaireArgs) -> CliResult<String> {
    let mut run = Run::new("questionnaire validate", args, &args.out)?;
    let q = super::questionnaire(&mut run, args.questionnaire.as_deref())?;
    let mut by_role: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for question in &q.questions {
        let role = match question.role {
            Role::Sdoh => "sdoh",
            Role::Outcome => "outcome",
            Role::Meta => "meta",
        };
        by_role.entry(role.to_string()).or_default().push(question.id);
    }
    let summary = Summary {
        version: q.version.clone(),
        questions: q.questions.len(),
        categorical: q.categorical().count(),
        by_role,
    };
    run.write("questionnaire.json", format!("{}\n", q.to_json()).as_bytes())?;
    run.write_json("summary.json", &summary)?;
    let prompt = build_prompt(&q, "<note text>")?;
    run.write("prompt.txt", format!("{SYSTEM_PROMPT}\n\n{}\n", prompt.user_message()).as_bytes())?;
    let manifest = run.finish()?;
    Ok(format!(
        "questionnaire {} ok: {} questions, {} categorical ({manifest})",
        summary.version, summary.questions, summary.categorical
    ))
}
