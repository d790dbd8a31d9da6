use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use synthbalance::config::{DataSource, RunConfig};

#[derive(Parser)]
#[command(name = "synthbalance", version, about = "Balance small image datasets with per-class CVAEs and train a CNN detector")]
pub struct Cli {
    /// Root for default output directories. Overrides the config file.
    #[arg(long, global = true, env = "SYNTHBALANCE_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Summarize a `<root>/<class>/*` image directory.
    Ingest {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a procedural blob dataset.
    Synth(SynthArgs),
    /// Train one generator per class on the training split.
    TrainGen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top every class of the training split up to the target with generated images.
    Balance {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of generator checkpoints [default: <root>/train-gen].
        #[arg(long)]
        generators: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the classifier on a dataset directory.
    TrainClf {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training images [default: <root>/balance/train].
        #[arg(long)]
        train_dir: Option<PathBuf>,
        /// Images scored after every epoch for the validation curves.
        #[arg(long)]
        validation_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a classifier checkpoint on a dataset directory.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// [default: <root>/train-clf/classifier.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// [default: <root>/balance/test]
        #[arg(long)]
        test_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired baseline and framework runs for every seed, plus the sample-count sweep.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub positive: usize,
    #[arg(long)]
    pub negative: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub disk_level: Option<f64>,
    #[arg(long)]
    pub disk_radius_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Full-length schedules at 256 px.
    Full,
    /// 64 px blobs with shortened schedules.
    Desk,
}

/// Run settings: a preset or config file, then individual overrides.
#[derive(Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Dataset directory to split; replaces the configured data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub gen_epochs: Option<usize>,
    #[arg(long)]
    pub gen_lr: Option<f64>,
    #[arg(long)]
    pub gen_batch_size: Option<usize>,
    #[arg(long)]
    pub gen_dropout: Option<f64>,
    #[arg(long)]
    pub clf_epochs: Option<usize>,
    #[arg(long)]
    pub clf_lr: Option<f64>,
    #[arg(long)]
    pub clf_batch_size: Option<usize>,
    #[arg(long)]
    pub clf_dropout: Option<f64>,
    /// Images per class after balancing.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Comma-separated run seeds; single-run commands use the first.
    #[arg(long = "seeds", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub positive_class: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_targets: Vec<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ConfigArgs {
    pub fn resolve(&self, output_root: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            (None, Some(Preset::Desk)) => RunConfig::desk(),
            (None, _) => RunConfig::default(),
        };
        if let Some(path) = &self.data {
            cfg.data = DataSource::Directory { path: path.clone() };
        }
        set(&mut cfg.resolution, self.resolution);
        if self.latent_dim.is_some() {
            cfg.latent_dim = self.latent_dim;
        }
        set(&mut cfg.generator.epochs, self.gen_epochs);
        set(&mut cfg.generator.learning_rate, self.gen_lr);
        set(&mut cfg.generator.batch_size, self.gen_batch_size);
        set(&mut cfg.generator.dropout_rate, self.gen_dropout);
        set(&mut cfg.classifier.epochs, self.clf_epochs);
        set(&mut cfg.classifier.learning_rate, self.clf_lr);
        set(&mut cfg.classifier.batch_size, self.clf_batch_size);
        set(&mut cfg.classifier.dropout_rate, self.clf_dropout);
        set(&mut cfg.target_per_class, self.target);
        set(&mut cfg.train_fraction, self.train_fraction);
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if self.positive_class.is_some() {
            cfg.positive_class = self.positive_class.clone();
        }
        if !self.sweep_targets.is_empty() {
            cfg.sweep_targets = self.sweep_targets.clone();
        }
        if let Some(root) = output_root {
            cfg.output_dir = root.to_path_buf();
        }
        if cfg.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
