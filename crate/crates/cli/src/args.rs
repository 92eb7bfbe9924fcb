use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcfa::convergence::FusionMode;
use dcfa::data::{Dataset, Side, TestNegatives};
use dcfa::trainer::{OptimizerKind, TrainConfig};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "dcfa", version, about = "Drug-microbe association prediction with divergent and convergent views")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a warm split and save a checkpoint, loss log and test metrics.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Check the architecture's gradients on a 10-node instance first.
        #[arg(long)]
        gradcheck: bool,
    },
    /// Score a saved checkpoint on its test split, or train and score fresh runs.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Withhold whole drugs or microbes and score their associations.
    Coldstart {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SideArg::Both)]
        side: SideArg,
        #[arg(long, value_delimiter = ',', default_values_t = [0.02, 0.04])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Train structural variants and compare their test metrics.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Rank candidate partners of the named nodes with a trained checkpoint.
    Rank {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated node names, all drugs or all microbes.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        #[arg(long, default_value_t = 0.25)]
        top_fraction: f64,
    },
    /// Compare analytic and finite-difference gradients of the total loss.
    Gradcheck {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a planted block-model dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        n_drugs: usize,
        #[arg(long, default_value_t = 30)]
        n_microbes: usize,
        #[arg(long, default_value_t = 3)]
        communities: usize,
        #[arg(long, default_value_t = 0.6)]
        p_in: f64,
        #[arg(long, default_value_t = 0.02)]
        p_out: f64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Drug,
    Microbe,
    Both,
}

impl SideArg {
    pub fn sides(self) -> Vec<Side> {
        match self {
            SideArg::Drug => vec![Side::Drug],
            SideArg::Microbe => vec![Side::Microbe],
            SideArg::Both => vec![Side::Drug, Side::Microbe],
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data_assoc: Option<PathBuf>,
    /// Omit to use Gaussian interaction-profile similarity of the training associations.
    #[arg(long)]
    pub data_drug_sim: Option<PathBuf>,
    /// Omit to use Gaussian interaction-profile similarity of the training associations.
    #[arg(long)]
    pub data_microbe_sim: Option<PathBuf>,
}

impl DataArgs {
    /// The supplied input files by manifest role.
    pub fn paths(&self) -> Result<Vec<(&'static str, &Path)>, CliError> {
        let assoc = self.data_assoc.as_deref().ok_or_else(|| CliError::Config("missing --data-assoc".into()))?;
        let mut out = vec![("associations", assoc)];
        out.extend(self.data_drug_sim.as_deref().map(|p| ("drug_similarity", p)));
        out.extend(self.data_microbe_sim.as_deref().map(|p| ("microbe_similarity", p)));
        Ok(out)
    }

    pub fn load(&self) -> Result<Dataset, CliError> {
        for (_, p) in self.paths()? {
            if !p.is_file() {
                return Err(CliError::Data(format!("file not found: {}", p.display())));
            }
        }
        let assoc = self.data_assoc.as_deref().expect("checked by paths");
        let ds = Dataset::load_with_fallback(assoc, self.data_drug_sim.as_deref(), self.data_microbe_sim.as_deref())?;
        for side in [Side::Drug, Side::Microbe] {
            if ds.uses_profile_similarity(side) {
                log::info!("no {side} similarity file given; using interaction-profile similarity of each split's training associations");
            }
        }
        Ok(ds)
    }
}

/// Training settings; each flag overrides the same key in `--config`.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with flat `key = value` training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// bsam, add, multiply, concatDim or cross.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Structural variant applied on top of the other settings; repeatable.
    /// `ablate` runs each one separately and defaults to all of them.
    #[arg(long, allow_hyphen_values = true)]
    pub scenario: Vec<String>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// balanced or all.
    #[arg(long)]
    pub test_negatives: Option<String>,
    #[arg(long)]
    pub sum_reduction: bool,
    #[arg(long)]
    pub no_residual: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut c = self.resolve_base()?;
        for s in &self.scenario {
            c = dcfa::evaluation::apply_scenario(&c, s)?;
        }
        Ok(c)
    }

    /// The configuration before any `--scenario` is applied.
    pub fn resolve_base(&self) -> Result<TrainConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        set!(seed, epochs, lr, dropout, beta1, beta2, gamma, knn, dim, heads, blocks, sample_size, test_fraction);
        if let Some(f) = &self.fusion {
            c.fusion = f.parse::<FusionMode>()?;
        }
        if let Some(o) = &self.optimizer {
            c.optimizer = o.parse::<OptimizerKind>()?;
        }
        if let Some(n) = &self.test_negatives {
            c.test_negatives = n.parse::<TestNegatives>()?;
        }
        c.sum_reduction |= self.sum_reduction;
        if self.no_residual {
            c.residual = false;
        }
        c.validate()?;
        Ok(c)
    }
}
