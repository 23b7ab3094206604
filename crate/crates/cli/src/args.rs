use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "gccn", version, about = "Global-context CNN features with few-shot heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic glyph dataset as an IDX pair.
    GenData(GenDataArgs),
    /// Train the fully connected classifier.
    TrainClassify(TrainArgs),
    /// Train a few-shot head episodically, then evaluate on held-out classes.
    TrainFewshot(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write fused feature vectors of every image.
    ExtractFeatures(ExtractArgs),
    /// Convert directories of raw grayscale bytes into an IDX pair.
    ImportRaw(ImportRawArgs),
    /// Run the gradient, oracle and invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 25)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub jitter: f64,
    /// Output prefix; writes PREFIX-images.idx and PREFIX-labels.idx.
    #[arg(long, default_value = "glyphs")]
    pub out: PathBuf,
}

/// Flags mirroring the config file keys. Flags override file values.
#[derive(Debug, Args, Default)]
pub struct ConfigFlags {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long)]
    pub filters: Option<String>,
    #[arg(long)]
    pub grid_rows: Option<String>,
    #[arg(long)]
    pub grid_cols: Option<String>,
    /// Square patch grid, sets both grid dimensions.
    #[arg(long)]
    pub grid: Option<String>,
    /// max or mean.
    #[arg(long)]
    pub collapse: Option<String>,
    /// Number of deepest encoder maps feeding the GC vector (1-3).
    #[arg(long)]
    pub layers: Option<String>,
    /// plain, aug, norm or augnorm.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub holdout_fraction: Option<String>,
    /// proto or matching.
    #[arg(long)]
    pub head: Option<String>,
    /// euclid or cosine.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub ways: Option<String>,
    #[arg(long)]
    pub shots: Option<String>,
    #[arg(long)]
    pub queries: Option<String>,
    #[arg(long)]
    pub train_episodes: Option<String>,
    #[arg(long)]
    pub episodes_per_epoch: Option<String>,
    #[arg(long)]
    pub eval_episodes: Option<String>,
    #[arg(long)]
    pub train_fraction: Option<String>,
}

impl ConfigFlags {
    /// `(config key, value)` for every flag given.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(g) = &self.grid {
            out.push(("grid_rows", g.clone()));
            out.push(("grid_cols", g.clone()));
        }
        let fields: [(&'static str, &Option<String>); 23] = [
            ("seed", &self.seed),
            ("precision", &self.precision),
            ("blocks", &self.blocks),
            ("filters", &self.filters),
            ("grid_rows", &self.grid_rows),
            ("grid_cols", &self.grid_cols),
            ("collapse", &self.collapse),
            ("layers", &self.layers),
            ("mode", &self.mode),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("optimizer", &self.optimizer),
            ("learning_rate", &self.learning_rate),
            ("holdout_fraction", &self.holdout_fraction),
            ("head", &self.head),
            ("metric", &self.metric),
            ("ways", &self.ways),
            ("shots", &self.shots),
            ("queries", &self.queries),
            ("train_episodes", &self.train_episodes),
            ("episodes_per_epoch", &self.episodes_per_epoch),
            ("eval_episodes", &self.eval_episodes),
            ("train_fraction", &self.train_fraction),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        }
        out
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset prefix (PREFIX-images.idx, PREFIX-labels.idx).
    #[arg(long)]
    pub data: Option<String>,
    /// Output directory for the checkpoint and CSV metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: String,
    /// Episodes to evaluate (few-shot checkpoints); defaults to the
    /// checkpoint's eval_episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Config the checkpoint must have been trained with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-episode CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportRawArgs {
    /// Root directory with one subdirectory per class.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the backward pass of this op, to confirm the checks notice.
    #[arg(long)]
    pub inject_fault: Option<String>,
    #[arg(long, default_value_t = 1.01)]
    pub fault_factor: f64,
}
