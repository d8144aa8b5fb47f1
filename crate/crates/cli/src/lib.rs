//! Command-line front end for the claimcheck toolkit.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{BackendKind, EntityStrategy, Mode, RunConfig, Subset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "claimcheck", version, about = "Reference-free hallucination detection for long-form LLM output")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Mock backend script (JSON Lines); implies --backend mock.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split responses into atomized, relevance-filtered claims.
    Decompose(DecomposeArgs),
    /// Score claims with detectors and/or the token-level estimator panel.
    Score(ScoreArgs),
    /// Train the hidden-state probe on the train split.
    TrainProbe(TrainProbeArgs),
    /// Build an instruction-tuning dataset for a detector model.
    BuildFtData(BuildArgs),
    /// Fit a single threshold or an abstention band on one score.
    Calibrate(CalibrateArgs),
    /// Apply thresholds and write metric, strata and histogram files.
    Evaluate(EvaluateArgs),
    /// Collect several evaluation reports into one summary table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Prompt/response records (JSON Lines: prompt_id, prompt, response).
    #[arg(long)]
    pub input: PathBuf,
    /// Gold labels (JSON Lines: claim_text, label) joined by claim text.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub claims: PathBuf,
    /// Prompt/response records; needed by selfcheck and for panel context.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Comma-separated detector names.
    #[arg(long, value_delimiter = ',')]
    pub detector: Vec<String>,
    /// Run all 32 token-level estimators.
    #[arg(long)]
    pub panel: bool,
    /// Trained probe file; adds the `probe` detector.
    #[arg(long)]
    pub probe_model: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum)]
    pub entity: Option<EntityStrategy>,
    /// Mock script for the fine-tuned detector model.
    #[arg(long)]
    pub finetuned_mock_script: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub claims: PathBuf,
    /// type1 | type2 | type3 | type4
    #[arg(long)]
    pub embedding: Option<String>,
    /// Train on all four embedding types and keep the best on validation.
    #[arg(long)]
    pub search_embedding: bool,
    /// Compare backpropagation with finite differences on the trained model.
    #[arg(long)]
    pub grad_check: bool,
    /// Include the pre-transformer layer in type3.
    #[arg(long)]
    pub include_embedding_layer: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Precomputed split (JSON: train, validation, test id lists).
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub claims: PathBuf,
    /// Search evidence per claim (JSON Lines: claim_id, evidence).
    #[arg(long)]
    pub evidence: Option<PathBuf>,
    #[arg(long)]
    pub no_aux: bool,
    #[arg(long)]
    pub no_rationale: bool,
    #[arg(long)]
    pub paraphrase: bool,
    #[arg(long)]
    pub half: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreSelection {
    /// Score file written by `score` (scores.jsonl or panel.jsonl).
    #[arg(long)]
    pub scores: PathBuf,
    /// Detector id or estimator key to use, e.g. prompt_tf or probability/all/arithmetic.
    /// `calibrate --score-id all` fits every id in the file and writes bacc_table.csv.
    #[arg(long)]
    pub score_id: String,
    /// Labeled claims.
    #[arg(long)]
    pub claims: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub subset: Option<Subset>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub selection: ScoreSelection,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub min_bacc: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub selection: ScoreSelection,
    /// Thresholds written by `calibrate`.
    #[arg(long)]
    pub thresholds: PathBuf,
    /// Prompt/response records; needed for length strata.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub stratify_length: bool,
    #[arg(long)]
    pub histogram: bool,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Reports written by `evaluate`.
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
}

impl GlobalArgs {
    /// Config file (or defaults) with global flags applied.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(b) = self.backend {
            cfg.backend.kind = b;
        }
        if let Some(p) = &self.mock_script {
            cfg.backend.kind = BackendKind::Mock;
            cfg.backend.mock_script = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        Ok(cfg)
    }
}

/// Exit code for an error chain: backend failures 3, infeasible constraints
/// 4, everything else (usage, input, parse) 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use claimcheck::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Infeasible { .. } => EXIT_INFEASIBLE,
                Error::Detector { .. } | Error::Decomposition { .. } => EXIT_BACKEND,
                e if e.is_backend() => EXIT_BACKEND,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.global.resolve()?;
    match cli.command {
        Command::Decompose(a) => commands::decompose(cfg, a),
        Command::Score(a) => commands::score(cfg, a),
        Command::TrainProbe(a) => commands::train_probe(cfg, a),
        Command::BuildFtData(a) => commands::build_ft_data(cfg, a),
        Command::Calibrate(a) => commands::calibrate(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Report(a) => commands::report(cfg, a),
    }
}
