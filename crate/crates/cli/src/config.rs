//! Plain-text run configuration: `key = value` lines, `#` comments.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ffs_core::datakit::{DatasetSpec, Generator};
use ffs_core::flow::FlowVariant;
use ffs_core::heads::RegVariant;
use ffs_core::synthesis::SynthesisMode;
use ffs_core::trainer::{DeltaMode, OptimizerKind, OutlierSource, TrainConfig};

/// A configuration problem; the CLI exits with status 2 for these.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "generator",
    "classes",
    "dim",
    "n_per_class",
    "n_background",
    "n_ood",
    "radius",
    "ring_radius",
    "width",
    "background_width",
    "centers",
    "ood_center",
    "ood_spread",
    "train_fraction",
    "data_seed",
    "total_iters",
    "warmup_iters",
    "batch_size",
    "lr_flow",
    "lr_heads",
    "flow_nll_weight",
    "optimizer",
    "seed",
    "flow",
    "coupling_layers",
    "hidden_layers",
    "hidden_width",
    "source",
    "delta_mode",
    "vos_ridge",
    "mode",
    "k",
    "s",
    "tau",
    "max_steps",
    "noise_scale",
    "alpha",
    "beta",
    "reg",
    "margin_in",
    "margin_out",
    "temperature",
    "output_dir",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse '{value}': {e}"))
}

fn parse_vec(key: &str, value: &str) -> Result<Vec<f64>, String> {
    value.split(',').map(|v| parse::<f64>(key, v.trim())).collect()
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Parses a configuration file. Keys not given keep their defaults;
    /// `warmup_iters` follows `total_iters` unless set explicitly.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut warmup_set = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!("line {}: expected 'key = value'", idx + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| ConfigError(format!("line {}: {e}", idx + 1)))?;
            warmup_set |= key == "warmup_iters";
        }
        if !warmup_set {
            cfg.train.warmup_iters = ffs_core::trainer::default_warmup(cfg.train.total_iters);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "generator" => d.generator = parse::<Generator>(key, value)?,
            "classes" => d.classes = parse(key, value)?,
            "dim" => d.dim = parse(key, value)?,
            "n_per_class" => d.n_per_class = parse(key, value)?,
            "n_background" => d.n_background = parse(key, value)?,
            "n_ood" => d.n_ood = parse(key, value)?,
            "radius" => d.radius = parse(key, value)?,
            "ring_radius" => d.ring_radius = parse(key, value)?,
            "width" => d.width = parse(key, value)?,
            "background_width" => d.background_width = parse(key, value)?,
            "centers" => {
                d.centers = if value == "none" {
                    None
                } else {
                    Some(value.split(';').map(|c| parse_vec(key, c)).collect::<Result<_, _>>()?)
                }
            }
            "ood_center" => d.ood_center = parse_vec(key, value)?,
            "ood_spread" => d.ood_spread = parse(key, value)?,
            "train_fraction" => d.train_fraction = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            "total_iters" => t.total_iters = parse(key, value)?,
            "warmup_iters" => t.warmup_iters = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_flow" => t.lr_flow = parse(key, value)?,
            "lr_heads" => t.lr_heads = parse(key, value)?,
            "flow_nll_weight" => t.flow_nll_weight = parse(key, value)?,
            "optimizer" => t.optimizer = parse::<OptimizerKind>(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "flow" => t.flow_variant = parse::<FlowVariant>(key, value)?,
            "coupling_layers" | "M" => t.arch.coupling_layers = parse(key, value)?,
            "hidden_layers" | "H" => t.arch.hidden_layers = parse(key, value)?,
            "hidden_width" | "W" => t.arch.hidden_width = parse(key, value)?,
            "source" => t.source = parse::<OutlierSource>(key, value)?,
            "delta_mode" => t.delta_mode = parse::<DeltaMode>(key, value)?,
            "vos_ridge" => t.vos_ridge = parse(key, value)?,
            "mode" => t.synthesis.mode = parse::<SynthesisMode>(key, value)?,
            "k" => t.synthesis.k = parse(key, value)?,
            "s" => t.synthesis.s = parse(key, value)?,
            "tau" => t.synthesis.tau = parse(key, value)?,
            "max_steps" => t.synthesis.max_steps = parse(key, value)?,
            "noise_scale" => t.synthesis.noise_scale = parse(key, value)?,
            "alpha" => t.weights.alpha = parse(key, value)?,
            "beta" => t.weights.beta = parse(key, value)?,
            "reg" => t.weights.reg = parse::<RegVariant>(key, value)?,
            "margin_in" => t.weights.margin_in = parse(key, value)?,
            "margin_out" => t.weights.margin_out = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let d = &self.data;
        let t = &self.train;
        match key {
            "generator" => d.generator.name().into(),
            "classes" => d.classes.to_string(),
            "dim" => d.dim.to_string(),
            "n_per_class" => d.n_per_class.to_string(),
            "n_background" => d.n_background.to_string(),
            "n_ood" => d.n_ood.to_string(),
            "radius" => format!("{:?}", d.radius),
            "ring_radius" => format!("{:?}", d.ring_radius),
            "width" => format!("{:?}", d.width),
            "background_width" => format!("{:?}", d.background_width),
            "centers" => match &d.centers {
                None => "none".into(),
                Some(c) => c.iter().map(|v| fmt_vec(v)).collect::<Vec<_>>().join("; "),
            },
            "ood_center" => fmt_vec(&d.ood_center),
            "ood_spread" => format!("{:?}", d.ood_spread),
            "train_fraction" => format!("{:?}", d.train_fraction),
            "data_seed" => d.seed.to_string(),
            "total_iters" => t.total_iters.to_string(),
            "warmup_iters" => t.warmup_iters.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_flow" => format!("{:?}", t.lr_flow),
            "lr_heads" => format!("{:?}", t.lr_heads),
            "flow_nll_weight" => format!("{:?}", t.flow_nll_weight),
            "optimizer" => t.optimizer.name().into(),
            "seed" => t.seed.to_string(),
            "flow" => t.flow_variant.name().into(),
            "coupling_layers" => t.arch.coupling_layers.to_string(),
            "hidden_layers" => t.arch.hidden_layers.to_string(),
            "hidden_width" => t.arch.hidden_width.to_string(),
            "source" => t.source.name().into(),
            "delta_mode" => t.delta_mode.name().into(),
            "vos_ridge" => format!("{:?}", t.vos_ridge),
            "mode" => t.synthesis.mode.name().into(),
            "k" => t.synthesis.k.to_string(),
            "s" => t.synthesis.s.to_string(),
            "tau" => format!("{:?}", t.synthesis.tau),
            "max_steps" => t.synthesis.max_steps.to_string(),
            "noise_scale" => format!("{:?}", t.synthesis.noise_scale),
            "alpha" => format!("{:?}", t.weights.alpha),
            "beta" => format!("{:?}", t.weights.beta),
            "reg" => t.weights.reg.name().into(),
            "margin_in" => format!("{:?}", t.weights.margin_in),
            "margin_out" => format!("{:?}", t.weights.margin_out),
            "temperature" => format!("{:?}", t.temperature),
            "output_dir" => self.output_dir.as_ref().map_or("none".into(), |p| p.display().to_string()),
            _ => unreachable!("key table and echo disagree on '{key}'"),
        }
    }

    /// Checks both the dataset and the trainer settings.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError(e.to_string()))
    }

    /// Every key with its resolved value. Parsing the result gives back an
    /// equal configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.value_of(key);
            if *key == "output_dir" && value == "none" {
                continue;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}
