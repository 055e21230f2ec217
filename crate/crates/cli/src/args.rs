use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forkscope_core::dataset::Task;
use forkscope_core::gateway::DEFAULT_MAX_IN_FLIGHT;
use forkscope_core::rftd::EntropyMode;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "forkscope", version, about = "Forking-token detection and rationale tooling")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// Settings file (JSON, or TOML by extension) for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for every sampled request.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// OpenAI-compatible server root.
    #[arg(long, global = true, env = "FORKSCOPE_BASE_URL")]
    pub base_url: Option<String>,
    /// Model name sent to the server.
    #[arg(long, global = true, default_value = "default")]
    pub model: String,
    /// Use the chat completions endpoint instead of completions.
    #[arg(long, global = true)]
    pub chat: bool,
    /// Mock model spec (JSON); takes precedence over --base-url.
    #[arg(long, global = true)]
    pub mock: Option<PathBuf>,
    /// Run directory for outputs and the manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Maximum concurrent model requests.
    #[arg(long, global = true, default_value_t = DEFAULT_MAX_IN_FLIGHT)]
    pub parallel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Nsm,
    Tpc,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Nsm => Task::Nsm,
            TaskArg::Tpc => Task::Tpc,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TaskArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Nsm)]
    pub task: TaskArg,
    /// Label list, one per line; required for tpc extraction.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyArg {
    Renormalized,
    ResidualBucket,
}

impl From<EntropyArg> for EntropyMode {
    fn from(e: EntropyArg) -> Self {
        match e {
            EntropyArg::Renormalized => EntropyMode::Renormalized,
            EntropyArg::ResidualBucket => EntropyMode::ResidualBucket,
        }
    }
}

/// Overrides applied on top of the detection settings file.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct RftdOverrides {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub entropy_mode: Option<EntropyArg>,
    /// Rollout sampling temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Token budget for originals and rollouts.
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Deterministic,
    Llm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Greedy original responses for a corpus.
    Generate {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        rftd: RftdOverrides,
    },
    /// Forking-token detection over generated responses.
    Detect {
        #[arg(long)]
        responses: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        rftd: RftdOverrides,
    },
    /// Forking-token frequencies as csv/json/svg.
    Report {
        /// Detection files (JSONL); all must share one configuration.
        #[arg(long, required = true, num_args = 1..)]
        detections: Vec<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FormatArg::Csv, FormatArg::Json, FormatArg::Svg])]
        formats: Vec<FormatArg>,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
        /// Corpus label stored in the table.
        #[arg(long)]
        corpus_id: Option<String>,
    },
    /// Accuracy, precision, recall and F1 of predictions against gold.
    Evaluate {
        /// JSONL of {"id", "output"}.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Rationale synthesis with a pattern prior.
    Annotate {
        /// Question/answer records to annotate.
        #[arg(long)]
        corpus: PathBuf,
        /// Rationale records supplying the two exemplars.
        #[arg(long)]
        exemplars: PathBuf,
        /// Prior file {"task","steps","exemplar_ids","instruction"}; built-in prior when absent.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        retries: Option<u32>,
        #[arg(long)]
        keep_on_mismatch: bool,
    },
    /// Rewrite a seeded share of rationales so their conclusion is wrong.
    Corrupt {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Deterministic)]
        mode: ModeArg,
    },
    /// Hint prompts pairing each question with its rationale.
    Hint {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Keep only this leading share of each rationale.
        #[arg(long)]
        truncate: Option<f64>,
    },
    /// Corpus size and length histograms.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Exact divergence probabilities for responses on a mock model.
    MockOracle {
        #[arg(long)]
        responses: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        rftd: RftdOverrides,
        #[arg(long, default_value_t = forkscope_core::rftd::oracle::DEFAULT_NODE_BUDGET)]
        node_budget: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Detect { .. } => "detect",
            Command::Report { .. } => "report",
            Command::Evaluate { .. } => "evaluate",
            Command::Annotate { .. } => "annotate",
            Command::Corrupt { .. } => "corrupt",
            Command::Hint { .. } => "hint",
            Command::Stats { .. } => "stats",
            Command::MockOracle { .. } => "mock-oracle",
        }
    }
}
