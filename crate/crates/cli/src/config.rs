//! Experiment configuration files and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use ider::data::{load_dir, standardize, DatasetFormat, LabeledDataset, Split};
use ider::losses::LossConfig;
use ider::nn::Architecture;
use ider::streams::{make_cil_stream, make_gcil_stream, GcilMode, Protocol, TaskStream};
use ider::trainer::{Method, TrainConfig};

/// Environment variable that anchors relative dataset paths.
pub const DATA_ROOT_ENV: &str = "IDER_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Idx,
    Cifar,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    pub kind: DatasetKind,
    /// Directory holding the raw files; unused for synthetic data.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub n_classes: usize,
    /// Average-pooling factor applied to every image after loading.
    #[serde(default = "one")]
    pub downsample: usize,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Synthetic data: samples per class in the train and test splits.
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    #[serde(default)]
    pub shape: Option<[usize; 3]>,
    #[serde(default)]
    pub spread: Option<f64>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub protocol: Protocol,
    pub n_tasks: usize,
    #[serde(default)]
    pub class_count_range: Option<(usize, usize)>,
    #[serde(default)]
    pub samples_per_task: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Desk,
    Resnet18,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub width: usize,
    /// Number of weighted layers before the label injection.
    #[serde(default)]
    pub partition_after: Option<usize>,
    #[serde(default = "yes")]
    pub label_embed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    AccuracyCurve,
    Reliability,
    IdempotenceHist,
    TaskMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub plots: Vec<PlotKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub stream: StreamSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub output: OutputSection,
}

/// Command-line replacements for individual config fields.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// finetune, er, er-ice, er-id, bfp-id or naive-id.
    #[arg(long)]
    pub method: Option<Method>,
    /// Replay buffer capacity.
    #[arg(long)]
    pub buffer: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "p-empty")]
    pub p_empty: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads, overrides and validates a config file. Relative dataset paths
    /// resolve against `$IDER_DATA_ROOT` when set, else the config's folder;
    /// a relative output directory resolves against the config's folder.
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let config_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.output.dir.is_relative() {
            cfg.output.dir = config_dir.join(&cfg.output.dir);
        }
        let base = match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root),
            None => config_dir,
        };
        if let Some(p) = cfg.dataset.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.output.seeds = vec![s];
        }
        if let Some(m) = o.method {
            self.train.method = m;
        }
        if let Some(b) = o.buffer {
            self.train.buffer_capacity = b;
        }
        let loss: &mut LossConfig = &mut self.train.loss;
        if let Some(a) = o.alpha {
            loss.alpha = a;
        }
        if let Some(b) = o.beta {
            loss.beta = b;
        }
        if let Some(p) = o.p_empty {
            loss.p_empty = p;
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.output.seeds.is_empty() {
            bail!("output.seeds must list at least one seed");
        }
        let mut seeds = self.output.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.output.seeds.len() {
            bail!("output.seeds contains duplicates");
        }
        self.train.validate()?;
        match self.dataset.kind {
            DatasetKind::Blobs => {
                if self.dataset.train_per_class.is_none() || self.dataset.shape.is_none() {
                    bail!("synthetic datasets need train_per_class and shape");
                }
            }
            _ => {
                let p = self
                    .dataset
                    .path
                    .as_ref()
                    .context("dataset.path is required for file-backed datasets")?;
                if !p.is_dir() {
                    bail!("dataset directory {} does not exist", p.display());
                }
            }
        }
        if self.stream.protocol != Protocol::Cil
            && (self.stream.class_count_range.is_none() || self.stream.samples_per_task.is_none())
        {
            bail!("generalized streams need class_count_range and samples_per_task");
        }
        Ok(())
    }

    /// Loads both splits (synthetic data is regenerated from the first seed).
    pub fn load_data(&self) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.dataset;
        let (mut train, mut test) = match d.kind {
            DatasetKind::Blobs => {
                let shape = d.shape.context("shape")?;
                let per = d.train_per_class.context("train_per_class")?;
                let spread = d.spread.unwrap_or(0.5);
                let seed = 0;
                (
                    LabeledDataset::gaussian_blobs(
                        d.n_classes,
                        per,
                        shape,
                        spread,
                        seed,
                        Split::Train,
                    )?,
                    LabeledDataset::gaussian_blobs(
                        d.n_classes,
                        d.test_per_class.unwrap_or(per),
                        shape,
                        spread,
                        seed,
                        Split::Test,
                    )?,
                )
            }
            DatasetKind::Idx | DatasetKind::Cifar => {
                let format = if d.kind == DatasetKind::Idx {
                    DatasetFormat::Idx
                } else {
                    DatasetFormat::Cifar
                };
                let path = d.path.as_ref().context("dataset.path")?;
                load_dir(path, &d.name, format, d.n_classes)?
            }
        };
        if d.downsample > 1 {
            train = train.downsample(d.downsample)?;
            test = test.downsample(d.downsample)?;
        }
        if d.standardize {
            standardize(&mut train, &mut test);
        }
        Ok((train, test))
    }

    pub fn stream(&self, train: &LabeledDataset, seed: u64) -> anyhow::Result<TaskStream> {
        let s = &self.stream;
        Ok(match s.protocol {
            Protocol::Cil => make_cil_stream(train, s.n_tasks, seed)?,
            Protocol::GcilUniform | Protocol::GcilLongtail => {
                let mode = if s.protocol == Protocol::GcilUniform {
                    GcilMode::Uniform
                } else {
                    GcilMode::Longtail
                };
                make_gcil_stream(
                    train,
                    s.n_tasks,
                    mode,
                    s.class_count_range.context("class_count_range")?,
                    s.samples_per_task.context("samples_per_task")?,
                    seed,
                )?
            }
        })
    }

    pub fn architecture(&self, input_shape: [usize; 3]) -> anyhow::Result<Architecture> {
        let m = &self.model;
        let mut arch = match m.backbone {
            Backbone::Desk => {
                Architecture::desk_resnet(input_shape, self.dataset.n_classes, m.width)
            }
            Backbone::Resnet18 => {
                Architecture::resnet18(input_shape, self.dataset.n_classes, m.width)
            }
        };
        if let Some(k) = m.partition_after {
            let p = arch.partition_after_weighted(k).with_context(|| {
                format!("cannot place the label injection after {k} weighted layers")
            })?;
            arch = arch.with_partition(p);
        }
        if !m.label_embed {
            arch = arch.without_label_embed();
        }
        arch.shapes()?;
        Ok(arch)
    }
}
