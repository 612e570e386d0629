//! Command-line flags, the TOML config file and their merge
//! (flags > file > defaults).

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use permubias::data::{load_dataset, McqInstance, PromptTemplate, Tokenizer};
use permubias::debias::{AdapterSet, DebiasConfig};
use permubias::engine::{Precision, ScoringMode};
use permubias::model::{Model, ModelConfig};
use permubias::permute::DEFAULT_PERM_CAP;

/// Marks failures that exit with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "permubias", version, about = "Option-order bias metrics, cached scoring and adapter debiasing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every instance under its permutations and write the bias report.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write every option-probability matrix to matrices.jsonl.
        #[arg(long)]
        dump_matrices: bool,
    },
    /// Majority-vote predictions with their zero-bias certificate.
    Vote {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train low-rank adapters with the unsupervised debias objective.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Token ledger of shared-prefix scoring against full passes.
    Savings {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Per-position attention variability across permutations.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Naive,
    Baqckv,
}

impl From<ModeArg> for ScoringMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Naive => ScoringMode::Naive,
            ModeArg::Baqckv => ScoringMode::Baqckv,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON Lines dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Template TOML file or preset name (instruct, context-repeat).
    #[arg(long)]
    pub template: Option<String>,
    /// Model checkpoint; without it a model is built from `[architecture]`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Adapter checkpoint to attach.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub perm_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic width: 32 or 64.
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Held-out split for per-epoch metrics; defaults to the training set.
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Entropy weight of the loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

/// Deterministic output-head shift that favours one label.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBias {
    pub label: String,
    pub shift: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub template: Option<String>,
    pub model: Option<PathBuf>,
    pub adapters: Option<PathBuf>,
    pub mode: Option<ModeArg>,
    pub perm_cap: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<u32>,
    pub out: Option<PathBuf>,
    pub dump_matrices: Option<bool>,
    pub architecture: Option<ModelConfig>,
    pub label_bias: Option<LabelBias>,
    pub train: Option<DebiasConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_err(format!("reading config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("config {}: {e}", path.display())))
    }
}

/// Everything a command needs, resolved and loaded.
pub struct RunConfig {
    pub dataset: Vec<McqInstance>,
    pub template: PromptTemplate,
    pub tokenizer: Tokenizer,
    pub model: Model,
    /// True when the model was built here rather than loaded.
    pub model_built: bool,
    pub adapters: Option<AdapterSet>,
    pub mode: ScoringMode,
    pub precision: Precision,
    pub perm_cap: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub dump_matrices: bool,
    pub file: FileConfig,
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", path.display())))
    }
}

fn load_template(spec: &str) -> Result<PromptTemplate> {
    match spec {
        "instruct" => Ok(PromptTemplate::instruct()),
        "context-repeat" | "context_repeat" => Ok(PromptTemplate::context_repeat()),
        path => {
            existing(Path::new(path), "template")?;
            Ok(PromptTemplate::load(path)?)
        }
    }
}

pub fn load_instances(path: &Path) -> Result<Vec<McqInstance>> {
    existing(path, "dataset")?;
    let data = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    if data.is_empty() {
        return Err(config_err(format!("dataset {} has no instances", path.display())));
    }
    Ok(data)
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs, dump_flag: bool) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let dataset_path = args
            .dataset
            .clone()
            .or_else(|| file.dataset.clone())
            .ok_or_else(|| config_err("no dataset given (--dataset or `dataset` in the config file)"))?;
        let template = load_template(args.template.as_deref().or(file.template.as_deref()).unwrap_or("instruct"))?;
        let tokenizer = Tokenizer::new();
        let (model, model_built) = match args.model.clone().or_else(|| file.model.clone()) {
            Some(path) => {
                existing(&path, "model checkpoint")?;
                (Model::load(&path).with_context(|| format!("loading {}", path.display()))?, false)
            }
            None => {
                let arch = file.architecture.clone().unwrap_or_default();
                let mut model = Model::build(arch)?;
                if let Some(bias) = &file.label_bias {
                    let token = tokenizer
                        .single_token(&bias.label)
                        .ok_or_else(|| config_err(format!("label {:?} is not a single token", bias.label)))?;
                    model = model.with_logit_shift(token, bias.shift)?;
                }
                (model, true)
            }
        };
        let adapters = match args.adapters.clone().or_else(|| file.adapters.clone()) {
            Some(path) => {
                existing(&path, "adapter checkpoint")?;
                let text = std::fs::read_to_string(&path)?;
                let set = AdapterSet::from_json(&text).with_context(|| format!("loading {}", path.display()))?;
                set.validate(model.config()).map_err(|e| config_err(format!("adapters do not fit the model: {e}")))?;
                Some(set)
            }
            None => None,
        };
        let precision = match args.precision.as_deref().map(str::parse).transpose()?.or(file.precision) {
            None | Some(64) => Precision::F64,
            Some(32) => Precision::F32,
            Some(other) => return Err(config_err(format!("precision must be 32 or 64, got {other}"))),
        };
        let perm_cap = args.perm_cap.or(file.perm_cap).unwrap_or(DEFAULT_PERM_CAP);
        if perm_cap == 0 {
            return Err(config_err("perm_cap must be at least 1"));
        }
        Ok(Self {
            dataset: load_instances(&dataset_path)?,
            template,
            tokenizer,
            model,
            model_built,
            adapters,
            mode: args.mode.or(file.mode).map_or(ScoringMode::Baqckv, Into::into),
            precision,
            perm_cap,
            seed: args.seed.or(file.seed).unwrap_or(0),
            out: args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
            dump_matrices: dump_flag || file.dump_matrices.unwrap_or(false),
            file,
        })
    }

    /// Metrics that compare orderings need at least two of them.
    pub fn require_pairs(&self) -> Result<()> {
        if self.perm_cap < 2 {
            return Err(config_err("perm_cap must be at least 2 for fluctuation-based metrics"));
        }
        Ok(())
    }

    pub fn view(&self) -> permubias::model::ModelView<'_> {
        match &self.adapters {
            Some(a) => self.model.attach(a).expect("validated at load"),
            None => self.model.view(),
        }
    }

    /// `[train]` from the file, then flags and shared settings on top.
    pub fn debias_config(&self, args: &TrainArgs) -> Result<DebiasConfig> {
        let mut cfg = self.file.train.clone().unwrap_or_default();
        cfg.seed = self.seed;
        cfg.perm_cap = self.perm_cap;
        cfg.mode = self.mode;
        if let Some(v) = args.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = args.max_steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = args.learning_rate {
            cfg.optimizer.learning_rate = v;
        }
        if let Some(v) = args.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = args.samples_per_epoch {
            cfg.samples_per_epoch = v;
        }
        if let Some(v) = args.batch_size {
            cfg.batch_size = v;
        }
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn eval_dataset(&self, args: &TrainArgs) -> Result<Option<Vec<McqInstance>>> {
        args.eval_dataset.clone().or_else(|| self.file.eval_dataset.clone()).map(|p| load_instances(&p)).transpose()
    }
}

/// Caps the global thread pool from `PERMUBIAS_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PERMUBIAS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("PERMUBIAS_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    Ok(())
}
