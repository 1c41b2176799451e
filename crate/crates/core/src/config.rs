//! Run configuration as flat `key = value` text with dotted namespaces.
//!
//! ```text
//! # comments start with '#'
//! data.source = mnist
//! model.latent_dim = 32
//! balancing.policy = computed
//! ```
//!
//! Every key can also be overridden from the command line. [`RunConfig::echo`]
//! prints the complete resolved configuration in the same format, so an echo
//! file reproduces the run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, LoadOptions, ResizeMode, Split, SyntheticKind, SyntheticOptions};
use crate::error::{Error, Result};
use crate::evaluate::ExtractorSpec;
use crate::exec::Exec;
use crate::loss::{BalancingPolicy, BalancingState, GammaTarget};
use crate::models::{ModelConfig, Variant};
use crate::second_stage::{ExtractMode, SecondStageConfig};
use crate::train::TrainSchedule;

/// Where training images come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    /// `mnist`, `cifar10`, a directory, or `synthetic:<kind>`.
    pub source: String,
    pub root: Option<PathBuf>,
    pub limit: Option<usize>,
    pub resize: Option<(usize, usize)>,
    pub resize_mode: ResizeMode,
    /// Sample count and options for synthetic sources.
    pub synthetic_n: usize,
    pub synthetic_seed: u64,
    pub synthetic: SyntheticOptions,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: "synthetic:low-rank-images".into(),
            root: None,
            limit: None,
            resize: None,
            resize_mode: ResizeMode::Bilinear,
            synthetic_n: 2000,
            synthetic_seed: 0,
            synthetic: SyntheticOptions::default(),
        }
    }
}

impl DataSpec {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        if let Some(kind) = self.source.strip_prefix("synthetic:") {
            let kind: SyntheticKind = kind.parse()?;
            // The test split uses disjoint draws.
            let seed = match split {
                Split::Train => self.synthetic_seed,
                Split::Test => self.synthetic_seed ^ 0x7e57,
            };
            let n = match split {
                Split::Train => self.synthetic_n,
                Split::Test => (self.synthetic_n / 4).max(2),
            };
            let mut ds = data::make_synthetic_with(kind, n, seed, &self.synthetic)?;
            ds.split = split;
            if let Some((h, w)) = self.resize {
                ds = ds.resized(h, w, self.resize_mode)?;
            }
            return Ok(ds);
        }
        let opts = LoadOptions {
            root: self.root.clone(),
            resize: self.resize,
            mode: self.resize_mode,
            limit: self.limit,
        };
        data::load_dataset(&self.source, split, &opts)
    }
}

/// Everything a command needs, resolved from defaults, a config file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub policy: BalancingPolicy,
    pub beta: f64,
    pub kl_scale: f64,
    pub gamma_target: GammaTarget,
    pub second: SecondStageConfig,
    /// `None` means twice the first-stage epochs.
    pub second_epochs: Option<usize>,
    pub second_lr: Option<f64>,
    pub extract: ExtractMode,
    pub data: DataSpec,
    pub extractor: ExtractorSpec,
    pub n_gen: usize,
    pub normalize: bool,
    pub output_dir: PathBuf,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                input_shape: (16, 16, 1),
                latent_dim: 16,
                variant: Variant::Mlp,
                ..ModelConfig::default()
            },
            train: TrainSchedule::default(),
            policy: BalancingPolicy::ComputedGamma,
            beta: 1.0,
            kl_scale: 1.0,
            gamma_target: GammaTarget::default(),
            second: SecondStageConfig::default(),
            second_epochs: None,
            second_lr: None,
            extract: ExtractMode::default(),
            data: DataSpec::default(),
            extractor: ExtractorSpec::default(),
            n_gen: 1000,
            normalize: true,
            output_dir: PathBuf::from("runs"),
            exec: Exec::default(),
        }
    }
}

/// Command-line shorthands for common keys.
pub const ALIASES: &[(&str, &str)] = &[
    ("policy", "balancing.policy"),
    ("beta", "balancing.beta"),
    ("kl-scale", "balancing.kl_scale"),
    ("seed", "train.seed"),
    ("epochs", "train.epochs"),
    ("lr", "train.lr"),
    ("batch-size", "train.batch_size"),
    ("data", "data.source"),
    ("out", "output.dir"),
    ("extractor", "eval.extractor"),
    ("exec", "exec"),
];

/// Maps an alias or a dashed key spelling to its canonical key.
pub fn canonical_key(key: &str) -> String {
    let key = key.trim().trim_start_matches("--");
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, k)| k.to_string())
        .unwrap_or_else(|| key.replace('-', "_"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    f(value).map_err(|e| Error::config(key, e.to_string()))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "auto" | "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .trim()
        .split(['x', 'X', ','])
        .map(|p| parse::<usize>(key, p))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got `{value}`"))),
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".into(), |v| v.to_string())
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values name the key in the error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        let k = key.as_str();
        let v = value.trim();
        match k {
            "model.variant" => self.model.variant = parse_with(k, v, str::parse::<Variant>)?,
            "model.input_shape" => {
                let d = parse_dims(k, v)?;
                if d.len() != 3 {
                    return Err(Error::config(k, "expected HxWxC"));
                }
                self.model.input_shape = (d[0], d[1], d[2]);
            }
            "model.latent_dim" => self.model.latent_dim = parse(k, v)?,
            "model.scale_blocks" => self.model.scale_blocks = parse(k, v)?,
            "model.base_channels" => self.model.base_channels = parse(k, v)?,
            "model.blocks_per_scale" => self.model.blocks_per_scale = parse(k, v)?,
            "model.dense_width" => self.model.dense_width = parse(k, v)?,
            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.lr" => self.train.lr_initial = parse(k, v)?,
            "train.lr_halve_every" => self.train.lr_halve_every = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(k, v)?,
            "diagnostics.every" => self.train.diagnostics_every = parse(k, v)?,
            "diagnostics.samples" => self.train.diagnostics_samples = parse(k, v)?,
            "diagnostics.threshold" => self.train.inactive_threshold = parse(k, v)?,
            "balancing.policy" => self.policy = parse_with(k, v, str::parse::<BalancingPolicy>)?,
            "balancing.beta" => self.beta = parse(k, v)?,
            "balancing.kl_scale" => self.kl_scale = parse(k, v)?,
            "balancing.gamma_target" => self.gamma_target = parse_with(k, v, str::parse::<GammaTarget>)?,
            "second.inner_width" => self.second.inner_width = parse(k, v)?,
            "second.latent_dim" => self.second.second_latent_dim = parse_opt(k, v)?,
            "second.blocks" => self.second.blocks = parse(k, v)?,
            "second.epochs" => self.second_epochs = parse_opt(k, v)?,
            "second.lr" => self.second_lr = parse_opt(k, v)?,
            "second.lr_halve_every" => self.second.schedule.lr_halve_every = parse(k, v)?,
            "second.extract" => self.extract = parse_with(k, v, str::parse::<ExtractMode>)?,
            "data.source" => self.data.source = v.to_string(),
            "data.root" => self.data.root = (!matches!(v, "" | "auto" | "none")).then(|| PathBuf::from(v)),
            "data.limit" => self.data.limit = parse_opt(k, v)?,
            "data.resize" => {
                self.data.resize = match v {
                    "" | "none" | "auto" => None,
                    _ => {
                        let d = parse_dims(k, v)?;
                        if d.len() != 2 {
                            return Err(Error::config(k, "expected HxW"));
                        }
                        Some((d[0], d[1]))
                    }
                }
            }
            "data.resize_mode" => self.data.resize_mode = parse_with(k, v, str::parse::<ResizeMode>)?,
            "data.synthetic_n" => self.data.synthetic_n = parse(k, v)?,
            "data.synthetic_seed" => self.data.synthetic_seed = parse(k, v)?,
            "data.synthetic_size" => self.data.synthetic.size = parse(k, v)?,
            "data.synthetic_rank" => self.data.synthetic.rank = parse(k, v)?,
            "data.synthetic_centers" => self.data.synthetic.centers = parse(k, v)?,
            "eval.extractor" => self.extractor = parse_with(k, v, str::parse::<ExtractorSpec>)?,
            "eval.n_gen" => self.n_gen = parse(k, v)?,
            "eval.normalize" => self.normalize = parse_bool(k, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "exec" => {
                self.exec = match v {
                    "parallel" => Exec::Parallel,
                    "sequential" => Exec::Sequential,
                    _ => return Err(Error::config(k, "expected parallel or sequential")),
                }
            }
            _ => return Err(Error::config(k, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_text(&text)
    }

    /// The complete configuration, one `key = value` per line, in a fixed order.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let (h, w, c) = m.input_shape;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("data.source", self.data.source.clone());
        kv("data.root", self.data.root.as_ref().map_or("auto".into(), |p| p.display().to_string()));
        kv("data.limit", fmt_opt(&self.data.limit));
        kv("data.resize", self.data.resize.map_or("none".into(), |(h, w)| format!("{h}x{w}")));
        kv("data.resize_mode", format!("{:?}", self.data.resize_mode).to_lowercase());
        kv("data.synthetic_n", self.data.synthetic_n.to_string());
        kv("data.synthetic_seed", self.data.synthetic_seed.to_string());
        kv("data.synthetic_size", self.data.synthetic.size.to_string());
        kv("data.synthetic_rank", self.data.synthetic.rank.to_string());
        kv("data.synthetic_centers", self.data.synthetic.centers.to_string());
        kv("model.variant", m.variant.to_string());
        kv("model.input_shape", format!("{h}x{w}x{c}"));
        kv("model.latent_dim", m.latent_dim.to_string());
        kv("model.scale_blocks", m.scale_blocks.to_string());
        kv("model.base_channels", m.base_channels.to_string());
        kv("model.blocks_per_scale", m.blocks_per_scale.to_string());
        kv("model.dense_width", m.dense_width.to_string());
        kv("balancing.policy", self.policy.to_string());
        kv("balancing.beta", self.beta.to_string());
        kv("balancing.kl_scale", self.kl_scale.to_string());
        kv("balancing.gamma_target", self.gamma_target.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr_initial.to_string());
        kv("train.lr_halve_every", t.lr_halve_every.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("diagnostics.every", t.diagnostics_every.to_string());
        kv("diagnostics.samples", t.diagnostics_samples.to_string());
        kv("diagnostics.threshold", t.inactive_threshold.to_string());
        kv("second.inner_width", self.second.inner_width.to_string());
        kv("second.latent_dim", fmt_opt(&self.second.second_latent_dim));
        kv("second.blocks", self.second.blocks.to_string());
        kv("second.epochs", fmt_opt(&self.second_epochs));
        kv("second.lr", fmt_opt(&self.second_lr));
        kv("second.lr_halve_every", self.second.schedule.lr_halve_every.to_string());
        kv("second.extract", self.extract.to_string());
        kv("eval.extractor", self.extractor.to_string());
        kv("eval.n_gen", self.n_gen.to_string());
        kv("eval.normalize", self.normalize.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        kv(
            "exec",
            if self.exec.is_parallel() { "parallel" } else { "sequential" }.into(),
        );
        out
    }

    /// Short hash of the echo, used in run directory names.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        data::hex(&digest[..4])
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        self.train.validate()?;
        self.initial_state()
            .validate()
            .map_err(|e| Error::config("balancing", e.to_string()))?;
        self.second.model_config(self.model.latent_dim)?;
        if self.n_gen < 2 {
            return Err(Error::config("eval.n_gen", "must be >= 2"));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> BalancingState {
        let s = match self.policy {
            BalancingPolicy::FixedBeta => BalancingState::fixed_beta(self.beta),
            p => BalancingState::new(p),
        };
        s.with_kl_scale(self.kl_scale).with_gamma_target(self.gamma_target)
    }

    pub fn second_stage(&self) -> SecondStageConfig {
        let mut c = SecondStageConfig::following(&self.train);
        c.inner_width = self.second.inner_width;
        c.second_latent_dim = self.second.second_latent_dim;
        c.blocks = self.second.blocks;
        c.schedule.lr_halve_every = self.second.schedule.lr_halve_every;
        if let Some(e) = self.second_epochs {
            c.schedule.epochs = e;
        }
        if let Some(lr) = self.second_lr {
            c.schedule.lr_initial = lr;
        }
        c
    }

    pub fn load_data(&self, split: Split) -> Result<Dataset> {
        self.data.load(split)
    }
}
