use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod error;
mod run;

use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "sdoh", version, about = "SDOH snapshot extraction and disparity analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Questionnaire utilities.
    #[command(subcommand)]
    Questionnaire(QuestionnaireCommand),
    /// Generate a synthetic cohort with planted ground truth.
    Synth(SynthArgs),
    /// Answer the questionnaire for every note.
    Extract(ExtractArgs),
    /// Score extracted answers against human annotations.
    ValidateExtraction(ValidateArgs),
    /// Build the feature matrix and outcome labels.
    Encode(EncodeArgs),
    /// Descriptive statistics over an encoded cohort.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Linear probability model of an outcome.
    Regress(RegressArgs),
    /// Two-fold decomposition of an outcome gap between groups.
    Decompose(DecomposeArgs),
    /// Grid-searched boosted models for each feature-set combination.
    Train(TrainArgs),
    /// SHAP attributions for a trained model.
    Explain(ExplainArgs),
    /// Bag-of-words terms most associated with an outcome.
    Textfeat(TextfeatArgs),
    /// Every analysis with default settings, bundled into one directory.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum QuestionnaireCommand {
    /// Check a questionnaire file and write its normalized form.
    Validate(QuestionnaireArgs),
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Factor prevalence per demographic group, FDR-controlled.
    Prevalence(PrevalenceArgs),
    /// Per-year factor prevalence.
    Trends(TrendsArgs),
    /// Conditional co-occurrence of factor pairs.
    Cooccur(CooccurArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct QuestionnaireArgs {
    /// Questionnaire JSON; the built-in one when omitted.
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Cohort spec JSON; the demo cohort when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Replays stored answers, optionally with label noise.
    Mock,
    /// Reads labels back out of synthetic note templates.
    Template,
    /// OpenAI-compatible chat-completions endpoint.
    Http,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub notes: PathBuf,
    #[arg(long, value_enum)]
    pub backend: BackendKind,
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    /// Answers replayed by the mock backend.
    #[arg(long)]
    pub answers: Option<PathBuf>,
    /// Cohort spec whose templates the template backend inverts.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Question whose labels the mock backend corrupts.
    #[arg(long)]
    pub noise_question: Option<u32>,
    #[arg(long, default_value_t = 0.0)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    #[arg(long, default_value_t = 2)]
    pub retries: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub predicted: PathBuf,
    /// Human annotations.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Extracted answers; the earliest note per patient is used.
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long)]
    pub notes: PathBuf,
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    #[arg(long, default_value_t = 2012)]
    pub window_start: i32,
    #[arg(long, default_value_t = 2023)]
    pub window_end: i32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PrevalenceArgs {
    /// Directory written by `encode`.
    #[arg(long)]
    pub encoded: PathBuf,
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Group columns; every demographic column when omitted.
    #[arg(long, value_delimiter = ',')]
    pub groups: Vec<String>,
    /// Factor columns; every known SDOH category when omitted.
    #[arg(long, value_delimiter = ',')]
    pub factors: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrendsArgs {
    #[arg(long)]
    pub encoded: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub factors: Vec<String>,
    /// First and last year, e.g. `2012,2023`.
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<i32>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CooccurArgs {
    #[arg(long)]
    pub encoded: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub factors: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RegressArgs {
    #[arg(long)]
    pub encoded: PathBuf,
    #[arg(long, default_value = "listed")]
    pub outcome: String,
    /// Feature groups as a comma list.
    #[arg(long, default_value = "clinical,demographic,sdoh")]
    pub features: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArg {
    Pooled,
    GroupA,
    GroupB,
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub encoded: PathBuf,
    #[arg(long, default_value = "listed")]
    pub outcome: String,
    /// Binary column; rows with 1 form group A.
    #[arg(long)]
    pub indicator: String,
    #[arg(long, default_value = "clinical,sdoh")]
    pub features: String,
    #[arg(long, value_enum, default_value_t = PolicyArg::Pooled)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridArg {
    /// Training defaults only.
    Single,
    /// A 12-cell grid over depth, learning rate and ensemble size.
    Default,
    /// The full 729-cell lattice.
    Full,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = GridArg::Default)]
    pub grid: GridArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Bootstrap resamples for the AUROC interval.
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    /// Train on the full training split instead of a class-balanced sample.
    #[arg(long)]
    pub no_downsample: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub encoded: PathBuf,
    /// `listed`, `rec_overall`, or `listed_given_rec`.
    #[arg(long, default_value = "listed")]
    pub outcome: String,
    /// One feature-set combination per flag, groups joined by commas.
    /// Defaults to the six combinations of clinical, demographic and sdoh.
    #[arg(long)]
    pub features: Vec<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub encoded: PathBuf,
    /// Model JSON written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TextfeatArgs {
    #[arg(long)]
    pub notes: PathBuf,
    #[arg(long)]
    pub encoded: PathBuf,
    #[arg(long, default_value = "listed")]
    pub outcome: String,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub encoded: PathBuf,
    /// Notes for the bag-of-words section; skipped when omitted.
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 15)]
    pub top_k: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn dispatch(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Questionnaire(QuestionnaireCommand::Validate(a)) => commands::questionnaire::validate(&a),
        Command::Synth(a) => commands::synth::run(&a),
        Command::Extract(a) => commands::extract::run(&a),
        Command::ValidateExtraction(a) => commands::extract::validate(&a),
        Command::Encode(a) => commands::encode::run(&a),
        Command::Analyze(AnalyzeCommand::Prevalence(a)) => commands::analyze::prevalence(&a),
        Command::Analyze(AnalyzeCommand::Trends(a)) => commands::analyze::trends(&a),
        Command::Analyze(AnalyzeCommand::Cooccur(a)) => commands::analyze::cooccur(&a),
        Command::Regress(a) => commands::linear::regress(&a),
        Command::Decompose(a) => commands::linear::decompose(&a),
        Command::Train(a) => commands::model::train(&a),
        Command::Explain(a) => commands::model::explain(&a),
        Command::Textfeat(a) => commands::text::run(&a),
        Command::Report(a) => commands::report::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sdoh: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
