//! Expert questionnaire schema and extraction prompt assembly.
//!
//! A [`Questionnaire`] is the ordered list of questions put to the language
//! model for every note. Categorical questions carry a closed label set that
//! always contains an `Unknown` label; open-ended questions collect short free
//! text. The builtin instance holds the 30 transplant psychosocial questions,
//! 23 of which describe social determinants of health.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label every categorical question must offer.
pub const UNKNOWN_LABEL: &str = "Unknown";

#[derive(Debug, Error)]
pub enum QuestionnaireError {
    #[error("questionnaire format error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("input error: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Categorical,
    OpenEnded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    SubstanceUse,
    SocialSupport,
    Access,
    Psychological,
    Meta,
}

impl Theme {
    pub fn as_str(self) -> &'static str {
        match self {
            Theme::SubstanceUse => "substance_use",
            Theme::SocialSupport => "social_support",
            Theme::Access => "access",
            Theme::Psychological => "psychological",
            Theme::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sdoh,
    Meta,
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    pub text: String,
    pub kind: QuestionKind,
    #[serde(default)]
    pub categories: Vec<String>,
    pub theme: Theme,
    pub role: Role,
}

impl Question {
    pub fn is_categorical(&self) -> bool {
        self.kind == QuestionKind::Categorical
    }

    /// The question's own spelling of the unknown label.
    pub fn unknown_label(&self) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| is_unknown_label(c))
            .map(String::as_str)
    }

    /// Case-insensitive lookup returning the category as declared.
    pub fn find_category(&self, label: &str) -> Option<&str> {
        let needle = label.trim();
        self.categories
            .iter()
            .find(|c| c.eq_ignore_ascii_case(needle))
            .map(String::as_str)
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    fn validate(&self) -> Result<(), QuestionnaireError> {
        let schema = |msg: String| Err(QuestionnaireError::Schema(format!("question {}: {msg}", self.id)));
        match self.kind {
            QuestionKind::Categorical => {
                if self.categories.len() < 2 {
                    return schema("categorical question needs at least two categories".into());
                }
                let unknowns = self.categories.iter().filter(|c| is_unknown_label(c)).count();
                if unknowns != 1 {
                    return schema(format!("expected exactly one Unknown category, found {unknowns}"));
                }
                let mut seen = HashSet::new();
                for c in &self.categories {
                    if !seen.insert(c.as_str()) {
                        return schema(format!("duplicate category {c:?}"));
                    }
                }
            }
            QuestionKind::OpenEnded => {
                if !self.categories.is_empty() {
                    return schema("open-ended question must not list categories".into());
                }
            }
        }
        if self.text.trim().is_empty() {
            return schema("empty question text".into());
        }
        Ok(())
    }
}

pub fn is_unknown_label(label: &str) -> bool {
    label.trim().eq_ignore_ascii_case(UNKNOWN_LABEL)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub version: String,
    pub questions: Vec<Question>,
}

impl Questionnaire {
    /// Builds a questionnaire and checks every schema invariant.
    pub fn new(version: impl Into<String>, questions: Vec<Question>) -> Result<Self, QuestionnaireError> {
        let q = Questionnaire {
            version: version.into(),
            questions,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), QuestionnaireError> {
        if self.questions.is_empty() {
            return Err(QuestionnaireError::Schema("questionnaire has no questions".into()));
        }
        let mut ids = HashSet::new();
        for q in &self.questions {
            if !ids.insert(q.id) {
                return Err(QuestionnaireError::Schema(format!("duplicate question id {}", q.id)));
            }
        }
        for (pos, q) in self.questions.iter().enumerate() {
            if q.id as usize != pos + 1 {
                return Err(QuestionnaireError::Schema(format!(
                    "question ids must be contiguous from 1; position {} has id {}",
                    pos + 1,
                    q.id
                )));
            }
            q.validate()?;
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn categorical(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| q.is_categorical())
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(move |q| q.role == role)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("questionnaire serializes")
    }
}

/// Parses and validates a questionnaire document.
pub fn load_questionnaire(source: &str) -> Result<Questionnaire, QuestionnaireError> {
    let q: Questionnaire = serde_json::from_str(source)?;
    q.validate()?;
    Ok(q)
}

/// Instructions sent ahead of every note.
pub const SYSTEM_PROMPT: &str = "Assume the role of an expert medical professional. Your task is to extract and interpret vital information from clinical notes accurately. You will be provided with a clinical note, enclosed by triple backticks, and a set of questions. For each question related to the notes, choose the most accurate category (label) based on the evidence in the note. Format your analysis as JSON with 'Question Number' and 'Label'. If no evidence supports a category, return {\"Question Number\": [number], \"Label\": \"No evidence\"}. Ensure precision in label identification and documentation. If multiple categories apply, select the most relevant one and justify your choice briefly. For the last two questions where no category choices are specified, answer each question in 50 words or less based on the note content and return that answer as the \"Label\".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instructions: String,
    pub note_block: String,
    pub question_block: String,
}

impl PromptBundle {
    /// User-turn content: the delimited note followed by the questions.
    pub fn user_message(&self) -> String {
        format!("{}\n\n{}", self.note_block, self.question_block)
    }

    /// Recovers the note body from the backtick-delimited block.
    pub fn note_text(&self) -> &str {
        self.note_block
            .strip_prefix("```")
            .and_then(|s| s.strip_suffix("```"))
            .unwrap_or(&self.note_block)
    }
}

pub fn build_prompt(q: &Questionnaire, note_text: &str) -> Result<PromptBundle, QuestionnaireError> {
    if note_text.trim().is_empty() {
        return Err(QuestionnaireError::Input("note text is empty".into()));
    }
    let mut question_block = String::new();
    for (i, question) in q.questions.iter().enumerate() {
        if i > 0 {
            question_block.push('\n');
        }
        let _ = write!(question_block, "{}. {}", question.id, question.text);
        if question.is_categorical() {
            let _ = write!(question_block, " [{}]", question.categories.join(", "));
        }
    }
    Ok(PromptBundle {
        system_instructions: SYSTEM_PROMPT.to_string(),
        note_block: format!("```{note_text}```"),
        question_block,
    })
}

const YES_NO: &[&str] = &["Yes", "No", "Unknown"];

/// The 30-question transplant psychosocial questionnaire.
pub fn builtin_questionnaire() -> Questionnaire {
    use Role::{Outcome, Sdoh};
    use Theme::{Access, Psychological, SocialSupport, SubstanceUse};
    let rows: [(&str, Option<&[&str]>, Theme, Role); 30] = [
        (
            "Does the note specifically provide a psychosocial evaluation addressing the patient's suitability for a liver transplant?",
            Some(YES_NO),
            Theme::Meta,
            Role::Meta,
        ),
        (
            "Does the patient require an English-language interpreter or translator?",
            Some(YES_NO),
            Access,
            Sdoh,
        ),
        (
            "What is the patient's housing situation?",
            Some(&["Stable Housing", "Difficulty Paying for Housing", "Without Housing (Undomiciled)", "Unknown"]),
            Access,
            Sdoh,
        ),
        ("Does the patient have a designated caregiver?", Some(YES_NO), SocialSupport, Sdoh),
        (
            "Are there documented concerns about the caregiver's ability to provide the necessary care and support?",
            Some(YES_NO),
            SocialSupport,
            Sdoh,
        ),
        (
            "What possible barriers exist regarding the caregiver's ability to provide the necessary care and support?",
            Some(&[
                "Health and Physical Capacity",
                "Emotional and Mental Wellbeing",
                "Employment or other Time or Financial Constraints",
                "No Known Barriers",
                "Unknown",
            ]),
            SocialSupport,
            Sdoh,
        ),
        (
            "Does the patient have a designated backup caregiver, also referred to as a secondary caregiver, or is there more than one caregiver identified who can take over if the primary caregiver is unable to fulfill their responsibilities?",
            Some(YES_NO),
            SocialSupport,
            Sdoh,
        ),
        (
            "Does the patient have any mental health issues that are actively affecting their daily functioning?",
            Some(YES_NO),
            Psychological,
            Sdoh,
        ),
        (
            "Is the patient actively receiving treatment, such as medications or therapy, for mental health issues?",
            Some(YES_NO),
            Psychological,
            Sdoh,
        ),
        (
            "Does the patient report any past trauma or abuse that remains unresolved, affecting their current well-being?",
            Some(YES_NO),
            Psychological,
            Sdoh,
        ),
        (
            "Does the patient's note show any documented evidence of past alcohol abuse or dependency that qualifies as addiction?",
            Some(YES_NO),
            SubstanceUse,
            Sdoh,
        ),
        (
            "What was the severity of the patient's past alcohol use based on the documentation in the note?",
            Some(&["None", "Mild", "Moderate", "Severe", "Unknown"]),
            SubstanceUse,
            Sdoh,
        ),
        ("Is the patient currently using alcohol?", Some(YES_NO), SubstanceUse, Sdoh),
        ("Has the patient used alcohol in the past 6 months?", Some(YES_NO), SubstanceUse, Sdoh),
        ("Has the patient used alcohol in the past year?", Some(YES_NO), SubstanceUse, Sdoh),
        (
            "Has the patient used any substances such as tobacco, marijuana, illicit drugs, or opioids in the past 6 months that raises health or treatment concerns?",
            Some(YES_NO),
            SubstanceUse,
            Sdoh,
        ),
        (
            "Does the patient have healthy coping strategies to manage stress and challenges related to their medical condition?",
            Some(YES_NO),
            Psychological,
            Sdoh,
        ),
        (
            "Does the patient demonstrate a clear understanding of the requirements, procedures, and expected outcomes of the transplantation process?",
            Some(YES_NO),
            Psychological,
            Sdoh,
        ),
        (
            "Does the patient have insight into the causes of their liver disease and the reasons why they need a liver transplant?",
            Some(YES_NO),
            Psychological,
            Sdoh,
        ),
        (
            "Does the patient have a history of medical non-compliance (including failure to take medications as prescribed)?",
            Some(YES_NO),
            Psychological,
            Sdoh,
        ),
        (
            "According to the evidence in the note, was the patient dishonest or misleading during the evaluation?",
            Some(&["Yes", "Suspected", "No", "Unknown"]),
            Psychological,
            Sdoh,
        ),
        (
            "Does the patient have adequate health insurance coverage?",
            Some(&["Yes", "No", "Pending Confirmation", "Unknown"]),
            Access,
            Sdoh,
        ),
        (
            "Is the patient facing a transportation issue that would make it difficult to attend appointments?",
            Some(&[
                "Distance/Travel Time",
                "Lack of Personal or Public Transportation",
                "Financial Constraints",
                "No Transportation Issues",
                "Unknown",
            ]),
            Access,
            Sdoh,
        ),
        (
            "What is the patient's motivation for transplant?",
            Some(&["Highly Motivated", "Somewhat Motivated", "Not Motivated", "Unknown"]),
            Psychological,
            Sdoh,
        ),
        (
            "What is the overall psychosocial risk assigned to this candidate?",
            Some(&[
                "Low",
                "Moderate",
                "High (Transplant Recommended)",
                "High (Transplant Not Recommended)",
                "Unknown",
            ]),
            Theme::Meta,
            Outcome,
        ),
        (
            "From a psychosocial perspective, is the patient recommended or considered a suitable candidate (e.g., reasonable, good, excellent) for a liver transplant?",
            Some(&[
                "Recommended",
                "Recommended Provided Compliance with Care Plan",
                "Not Recommended",
                "Unknown",
            ]),
            Theme::Meta,
            Outcome,
        ),
        (
            "Is there an addendum in the note with the listing decision?",
            Some(YES_NO),
            Theme::Meta,
            Role::Meta,
        ),
        (
            "What is the patient's transplant listing status, if it is mentioned in the note?",
            Some(&[
                "Listed",
                "Deferred",
                "Declined/Denied",
                "Status 1A",
                "Temporarily Unfit",
                "Unclear",
                "Unknown",
            ]),
            Theme::Meta,
            Outcome,
        ),
        (
            "What specific risk factors or concerns have been reported that could impact the patient's suitability and fitness for a liver transplant?",
            None,
            Theme::Meta,
            Role::Meta,
        ),
        (
            "What specific protective factors have been reported that enhance the patient's suitability and fitness for a liver transplant?",
            None,
            Theme::Meta,
            Role::Meta,
        ),
    ];
    let questions = rows
        .into_iter()
        .enumerate()
        .map(|(i, (text, cats, theme, role))| Question {
            id: i as u32 + 1,
            text: text.to_string(),
            kind: if cats.is_some() {
                QuestionKind::Categorical
            } else {
                QuestionKind::OpenEnded
            },
            categories: cats.unwrap_or_default().iter().map(|s| s.to_string()).collect(),
            theme,
            role,
        })
        .collect();
    Questionnaire::new("transplant-psychosocial-v1", questions).expect("builtin questionnaire is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(ids: &[u32]) -> Questionnaire {
        Questionnaire {
            version: "t".into(),
            questions: ids
                .iter()
                .map(|&id| Question {
                    id,
                    text: format!("Question {id}?"),
                    kind: QuestionKind::Categorical,
                    categories: vec!["Yes".into(), "No".into(), "Unknown".into()],
                    theme: Theme::Access,
                    role: Role::Sdoh,
                })
                .collect(),
        }
    }

    #[test]
    fn builtin_shape() {
        let q = builtin_questionnaire();
        assert_eq!(q.questions.len(), 30);
        assert_eq!(q.categorical().count(), 28);
        assert_eq!(q.with_role(Role::Sdoh).count(), 23);
        for id in [29, 30] {
            let open = q.get(id).unwrap();
            assert_eq!(open.kind, QuestionKind::OpenEnded);
            assert!(open.categories.is_empty());
        }
        assert_eq!(
            q.get(12).unwrap().categories,
            vec!["None", "Mild", "Moderate", "Severe", "Unknown"]
        );
        let sdoh_ids: Vec<u32> = q.with_role(Role::Sdoh).map(|x| x.id).collect();
        assert_eq!(sdoh_ids, (2..=24).collect::<Vec<_>>());
    }

    #[test]
    fn load_valid_and_duplicate() {
        let q = small(&[1, 2, 3]);
        let loaded = load_questionnaire(&q.to_json()).unwrap();
        assert_eq!(loaded.questions.len(), 3);

        let dup = small(&[1, 1, 2]);
        let err = load_questionnaire(&serde_json::to_string(&dup).unwrap()).unwrap_err();
        assert!(matches!(err, QuestionnaireError::Schema(ref m) if m.contains("duplicate")), "{err}");
    }

    #[test]
    fn load_rejects_missing_unknown_and_garbage() {
        let mut q = small(&[1]);
        q.questions[0].categories = vec!["Yes".into(), "No".into()];
        let err = load_questionnaire(&serde_json::to_string(&q).unwrap()).unwrap_err();
        assert!(matches!(err, QuestionnaireError::Schema(_)));

        assert!(matches!(
            load_questionnaire("{not json").unwrap_err(),
            QuestionnaireError::Format(_)
        ));
    }

    #[test]
    fn gap_in_ids_is_schema_error() {
        let q = small(&[1, 3]);
        assert!(matches!(q.validate(), Err(QuestionnaireError::Schema(_))));
    }

    #[test]
    fn builtin_round_trips() {
        let q = builtin_questionnaire();
        assert_eq!(load_questionnaire(&q.to_json()).unwrap(), q);
    }

    #[test]
    fn prompt_layout() {
        let q = builtin_questionnaire();
        let p = build_prompt(&q, "Patient lives alone.").unwrap();
        assert!(p.note_block.contains("```Patient lives alone.```"));
        assert!(p.system_instructions.contains("Format your analysis as JSON"));
        assert_eq!(p.system_instructions, SYSTEM_PROMPT);
        let lines: Vec<&str> = p.question_block.lines().collect();
        assert_eq!(lines.len(), 30);
        assert_eq!(lines[12], "13. Is the patient currently using alcohol? [Yes, No, Unknown]");
        assert!(!lines[29].contains('['));
        assert_eq!(p.note_text(), "Patient lives alone.");

        let one = small(&[1]);
        let p1 = build_prompt(&one, "x").unwrap();
        assert_eq!(p1.question_block.lines().count(), 1);
        assert!(p1.question_block.starts_with("1. "));
    }

    #[test]
    fn empty_note_rejected() {
        let q = builtin_questionnaire();
        assert!(matches!(build_prompt(&q, "  \n"), Err(QuestionnaireError::Input(_))));
    }

    #[test]
    fn unknown_match_is_case_insensitive() {
        let mut q = small(&[1]);
        q.questions[0].categories = vec!["Yes".into(), "UNKNOWN".into()];
        assert!(q.validate().is_ok());
        assert_eq!(q.questions[0].unknown_label(), Some("UNKNOWN"));
    }
}
