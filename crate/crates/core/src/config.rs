//! Run configuration: a flat `key = value` text with optional `[section]`
//! headers and `#` comments. Keys are `section.name`; under a header the
//! section prefix may be omitted. Any key can be overridden from the
//! environment as `SPACTE_<SECTION>_<NAME>` (upper case).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::certify::CertifyConfig;
use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::model::spec::{layers_from_text, preset_layers, render_layers};
use crate::model::{ArchitectureSpec, InputNorm, InputShape, LayerSpec};
use crate::schedule::LrSchedule;
use crate::trainer::TrainConfig;

pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeyDoc {
    KeyDoc { key, default, help }
}

/// Every accepted key, its default and meaning. `noise.sigma` has no default.
pub const KEYS: &[KeyDoc] = &[
    key(
        "model.layers",
        "resnet110",
        "preset (resnet110, desk-resnet, desk-mlp, linear) or list of conv:O:K:S, res:O:B:S, dense:O, avgpool",
    ),
    key("model.split", "3", "number of leading layers shared by all heads"),
    key("model.heads", "5", "number of heads L"),
    key("model.classes", "10", "number of classes K"),
    key("model.input", "3x32x32", "input shape CxHxW"),
    key(
        "model.norm_mean",
        "0.4914,0.4822,0.4465",
        "per-channel input mean, or none",
    ),
    key(
        "model.norm_std",
        "0.2023,0.1994,0.201",
        "per-channel input std, or none",
    ),
    key(
        "noise.sigma",
        "",
        "Gaussian noise level for training and certification (required)",
    ),
    key("train.epochs", "150", "training epochs E"),
    key("train.batch_size", "256", "batch size N"),
    key("train.m", "2", "noise draws per sample"),
    key(
        "train.epsilon",
        "0.8",
        "head weighting: the best head gets 1 - epsilon, in (0, 1)",
    ),
    key("train.variant", "gaussian", "gaussian, consistency or smoothmix"),
    key("train.c1", "10", "consistency: weight of the KL to the mean prediction"),
    key(
        "train.c2",
        "0.5",
        "consistency: weight of the mean prediction's entropy",
    ),
    key("train.c3", "5", "smoothmix: weight of the mix-up KL"),
    key("train.attack_steps", "4", "smoothmix: adversarial ascent steps"),
    key(
        "train.attack_step_size",
        "0.5",
        "smoothmix: L2 length of each ascent step",
    ),
    key(
        "train.lambda_ini",
        "auto",
        "self-paced threshold at epoch 1; auto is ln K",
    ),
    key("train.lambda_lst", "1", "self-paced threshold at the last epoch"),
    key("train.self_paced", "true", "weight samples by their smoothed loss"),
    key(
        "train.circular",
        "true",
        "pass each head's sample weights to the next head",
    ),
    key("train.cosine", "true", "add the pairwise head-parameter cosine penalty"),
    key(
        "train.cosine_normalized",
        "false",
        "divide the penalty by squared norms (scale free)",
    ),
    key("train.lr", "0.1", "initial learning rate"),
    key(
        "train.lr_decay",
        "0.1",
        "learning-rate factor applied every lr_period epochs",
    ),
    key("train.lr_period", "50", "epochs between learning-rate decays"),
    key("train.momentum", "0.9", "SGD momentum"),
    key("train.nesterov", "true", "Nesterov momentum"),
    key(
        "train.weight_decay",
        "0.0001",
        "L2 weight decay (not applied to batch-norm scale and shift)",
    ),
    key("train.augment", "false", "random 4-pixel crop and horizontal flip"),
    key(
        "train.checkpoint_every",
        "10",
        "epochs between checkpoints (0: only the final one)",
    ),
    key("certify.n0", "100", "selection draws"),
    key("certify.n", "100000", "estimation draws"),
    key("certify.alpha", "0.001", "failure probability, in (0, 1)"),
    key("certify.batch", "1000", "noisy inputs per forward pass"),
    key("certify.stride", "20", "certify every stride-th test example"),
    key("data.kind", "cifar10", "cifar10 or blobs"),
    key("data.path", "data/cifar-10-batches-bin", "CIFAR-10 binary directory"),
    key("data.blobs_dim", "16", "blobs: input dimension"),
    key(
        "data.blobs_separation",
        "0.8",
        "blobs: distance between the two cluster centers",
    ),
    key("data.blobs_spread", "0.1", "blobs: per-coordinate standard deviation"),
    key("data.blobs_train", "1000", "blobs: training examples"),
    key("data.blobs_test", "2000", "blobs: test examples"),
    key("run.seed", "0", "global seed"),
    key(
        "run.output_dir",
        "runs/default",
        "directory for checkpoints, logs and results",
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Cifar10,
    Blobs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: PathBuf,
    pub blobs_dim: usize,
    pub blobs_separation: f64,
    pub blobs_spread: f64,
    pub blobs_train: usize,
    pub blobs_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ArchitectureSpec,
    /// `None` feeds inputs unnormalized.
    pub norm: Option<InputNorm>,
    pub train: TrainConfig,
    pub certify: CertifyConfig,
    pub stride: usize,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn sigma(&self) -> f64 {
        self.train.sigma
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn input_norm(&self) -> InputNorm {
        self.norm
            .clone()
            .unwrap_or_else(|| InputNorm::identity(self.spec.input_shape.channels))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |_| None)
    }

    /// Parses `text`, letting `env(name)` override any key.
    pub fn parse_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut values = read_pairs(text)?;
        for doc in KEYS {
            if let Some(v) = env(&env_name(doc.key)) {
                values.insert(doc.key.to_string(), v);
            }
        }
        from_values(&values)
    }

    pub fn from_env(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |name| std::env::var(name).ok())
    }

    /// Full text with every key, readable by [`RunConfig::parse`].
    pub fn render(&self) -> String {
        let mut values = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            values.insert(k.to_string(), v);
        };
        let s = &self.spec;
        put("model.layers", render_layer_choice(&s.layers));
        put("model.split", s.split_index.to_string());
        put("model.heads", s.num_heads.to_string());
        put("model.classes", s.num_classes.to_string());
        put("model.input", s.input_shape.to_string());
        let (mean, std) = match &self.norm {
            Some(n) => (join(&n.mean), join(&n.std)),
            None => ("none".into(), "none".into()),
        };
        put("model.norm_mean", mean);
        put("model.norm_std", std);
        let t = &self.train;
        put("noise.sigma", t.sigma.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.m", t.draws.to_string());
        put("train.epsilon", t.epsilon.to_string());
        let defaults = default_variant_params();
        let (c1, c2, c3, steps, step) = match t.variant {
            Variant::Gaussian => defaults,
            Variant::Consistency { c1, c2 } => (c1, c2, defaults.2, defaults.3, defaults.4),
            Variant::SmoothMix { c3, steps, step_size } => (defaults.0, defaults.1, c3, steps, step_size),
        };
        put("train.variant", t.variant.name().into());
        put("train.c1", c1.to_string());
        put("train.c2", c2.to_string());
        put("train.c3", c3.to_string());
        put("train.attack_steps", steps.to_string());
        put("train.attack_step_size", step.to_string());
        let auto = (s.num_classes as f64).ln();
        put(
            "train.lambda_ini",
            if t.lambda_ini == auto {
                "auto".into()
            } else {
                t.lambda_ini.to_string()
            },
        );
        put("train.lambda_lst", t.lambda_lst.to_string());
        put("train.self_paced", t.self_paced.to_string());
        put("train.circular", t.circular.to_string());
        put("train.cosine", t.cosine.to_string());
        put("train.cosine_normalized", t.cosine_normalized.to_string());
        put("train.lr", t.lr.initial.to_string());
        put("train.lr_decay", t.lr.factor.to_string());
        put("train.lr_period", t.lr.period.to_string());
        put("train.momentum", t.lr.momentum.to_string());
        put("train.nesterov", t.nesterov.to_string());
        put("train.weight_decay", t.lr.weight_decay.to_string());
        put("train.augment", t.augment.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        let c = &self.certify;
        put("certify.n0", c.n0.to_string());
        put("certify.n", c.n.to_string());
        put("certify.alpha", c.alpha.to_string());
        put("certify.batch", c.batch.to_string());
        put("certify.stride", self.stride.to_string());
        let d = &self.data;
        put(
            "data.kind",
            match d.kind {
                DataKind::Cifar10 => "cifar10",
                DataKind::Blobs => "blobs",
            }
            .into(),
        );
        put("data.path", d.path.display().to_string());
        put("data.blobs_dim", d.blobs_dim.to_string());
        put("data.blobs_separation", d.blobs_separation.to_string());
        put("data.blobs_spread", d.blobs_spread.to_string());
        put("data.blobs_train", d.blobs_train.to_string());
        put("data.blobs_test", d.blobs_test.to_string());
        put("run.seed", t.seed.to_string());
        put("run.output_dir", self.output_dir.display().to_string());
        render_sections(&values)
    }
}

fn default_variant_params() -> (f64, f64, f64, usize, f64) {
    (10.0, 0.5, 5.0, 4, 0.5)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn render_layer_choice(layers: &[LayerSpec]) -> String {
    for name in ["resnet110", "desk-resnet", "desk-mlp", "linear"] {
        if preset_layers(name).as_deref() == Some(layers) {
            return name.to_string();
        }
    }
    render_layers(layers)
}

fn render_sections(values: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    let mut current = "";
    for doc in KEYS {
        let (section, name) = doc.key.split_once('.').unwrap();
        if section != current {
            if !current.is_empty() {
                out.push('\n');
            }
            writeln!(out, "[{section}]").unwrap();
            current = section;
        }
        writeln!(out, "{name} = {}", values[doc.key]).unwrap();
    }
    out
}

/// Text with every key at its default; `noise.sigma` is left commented out.
pub fn defaults_text() -> String {
    let mut out = String::new();
    let mut current = "";
    for doc in KEYS {
        let (section, name) = doc.key.split_once('.').unwrap();
        if section != current {
            if !current.is_empty() {
                out.push('\n');
            }
            writeln!(out, "[{section}]").unwrap();
            current = section;
        }
        writeln!(out, "# {}", doc.help).unwrap();
        if doc.default.is_empty() {
            writeln!(out, "# {name} = <required>").unwrap();
        } else {
            writeln!(out, "{name} = {}", doc.default).unwrap();
        }
    }
    out
}

/// `key  default  help` lines for command-line help.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (default in brackets):\n");
    for doc in KEYS {
        let default = if doc.default.is_empty() {
            "required"
        } else {
            doc.default
        };
        writeln!(out, "  {} [{}]\n      {}", doc.key, default, doc.help).unwrap();
    }
    write!(
        out,
        "Any key can be set from the environment as SPACTE_<SECTION>_<NAME>, e.g. SPACTE_NOISE_SIGMA."
    )
    .unwrap();
    out
}

pub fn env_name(key: &str) -> String {
    format!("SPACTE_{}", key.replace('.', "_").to_uppercase())
}

fn read_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        let full = if k.contains('.') || section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        if !KEYS.iter().any(|d| d.key == full) {
            return Err(Error::config(format!("line {}: unknown key {full}", i + 1)));
        }
        if out.insert(full.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: {full} set twice", i + 1)));
        }
    }
    Ok(out)
}

struct Values<'a>(&'a BTreeMap<String, String>);

impl Values<'_> {
    fn raw(&self, key: &str) -> &str {
        match self.0.get(key) {
            Some(v) => v,
            None => KEYS.iter().find(|d| d.key == key).expect("known key").default,
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::config(format!("{key}: expected {what}, got `{v}`")))
    }

    fn count(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    fn real(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key, "a number")?;
        if !v.is_finite() {
            return Err(Error::config(format!("{key}: must be finite")));
        }
        Ok(v)
    }

    fn flag(&self, key: &str) -> Result<bool> {
        self.parse(key, "true or false")
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v = self.count(key)?;
        if v == 0 {
            return Err(Error::config(format!("{key}: must be at least 1")));
        }
        Ok(v)
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let v = self.raw(key);
        if v == "none" {
            return Ok(None);
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("{key}: expected numbers separated by commas, got `{v}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn range_err(key: &str, value: impl std::fmt::Display, range: &str) -> Error {
    Error::config(format!("{key}: {value} outside {range}"))
}

fn from_values(map: &BTreeMap<String, String>) -> Result<RunConfig> {
    let v = Values(map);
    if !map.contains_key("noise.sigma") {
        return Err(Error::config("noise.sigma required"));
    }
    let layers = layers_from_text(v.raw("model.layers")).map_err(|e| Error::config(format!("model.layers: {e}")))?;
    let input = InputShape::parse(v.raw("model.input")).map_err(|e| Error::config(format!("model.input: {e}")))?;
    let spec = ArchitectureSpec::new(
        layers,
        v.count("model.split")?,
        v.positive("model.heads")?,
        v.count("model.classes")?,
        input,
    )
    .map_err(|e| Error::config(format!("model: {e}")))?;
    let norm = match (v.list("model.norm_mean")?, v.list("model.norm_std")?) {
        (None, None) => None,
        (Some(mean), Some(std)) => {
            if mean.len() != input.channels {
                return Err(Error::config(format!(
                    "model.norm_mean: {} values for {} channels",
                    mean.len(),
                    input.channels
                )));
            }
            Some(InputNorm::new(mean, std).map_err(|e| Error::config(format!("model.norm_std: {e}")))?)
        }
        _ => {
            return Err(Error::config(
                "model.norm_std: set both norm_mean and norm_std, or neither",
            ))
        }
    };

    let sigma = v.real("noise.sigma")?;
    if sigma < 0.0 {
        return Err(range_err("noise.sigma", sigma, "[0, inf)"));
    }
    let epsilon = v.real("train.epsilon")?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(range_err("train.epsilon", epsilon, "(0, 1)"));
    }
    let variant = match v.raw("train.variant") {
        "gaussian" => Variant::Gaussian,
        "consistency" => Variant::Consistency {
            c1: v.real("train.c1")?,
            c2: v.real("train.c2")?,
        },
        "smoothmix" => Variant::SmoothMix {
            c3: v.real("train.c3")?,
            steps: v.count("train.attack_steps")?,
            step_size: v.real("train.attack_step_size")?,
        },
        other => {
            return Err(Error::config(format!(
                "train.variant: expected gaussian, consistency or smoothmix, got `{other}`"
            )))
        }
    };
    for k in ["train.c1", "train.c2", "train.c3", "train.attack_step_size"] {
        let x = v.real(k)?;
        if x < 0.0 {
            return Err(range_err(k, x, "[0, inf)"));
        }
    }
    v.count("train.attack_steps")?;
    let lambda_ini = match v.raw("train.lambda_ini") {
        "auto" => (spec.num_classes as f64).ln(),
        _ => v.real("train.lambda_ini")?,
    };
    let lr = LrSchedule {
        initial: v.real("train.lr")?,
        factor: v.real("train.lr_decay")?,
        period: v.positive("train.lr_period")?,
        momentum: v.real("train.momentum")?,
        weight_decay: v.real("train.weight_decay")?,
    };
    if !(lr.initial > 0.0) {
        return Err(range_err("train.lr", lr.initial, "(0, inf)"));
    }
    if !(lr.factor > 0.0 && lr.factor <= 1.0) {
        return Err(range_err("train.lr_decay", lr.factor, "(0, 1]"));
    }
    if !(0.0..1.0).contains(&lr.momentum) {
        return Err(range_err("train.momentum", lr.momentum, "[0, 1)"));
    }
    if lr.weight_decay < 0.0 {
        return Err(range_err("train.weight_decay", lr.weight_decay, "[0, inf)"));
    }
    let draws = v.positive("train.m")?;
    if matches!(variant, Variant::Consistency { .. }) && draws < 2 {
        return Err(range_err("train.m", draws, "[2, inf) for the consistency variant"));
    }
    let seed: u64 = v.parse("run.seed", "a non-negative integer")?;
    let train = TrainConfig {
        epochs: v.count("train.epochs")?,
        batch_size: v.positive("train.batch_size")?,
        sigma,
        draws,
        epsilon,
        variant,
        lambda_ini,
        lambda_lst: v.real("train.lambda_lst")?,
        self_paced: v.flag("train.self_paced")?,
        circular: v.flag("train.circular")?,
        cosine: v.flag("train.cosine")?,
        cosine_normalized: v.flag("train.cosine_normalized")?,
        lr,
        nesterov: v.flag("train.nesterov")?,
        seed,
        checkpoint_every: v.count("train.checkpoint_every")?,
        augment: v.flag("train.augment")?,
    };

    let alpha = v.real("certify.alpha")?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(range_err("certify.alpha", alpha, "(0, 1)"));
    }
    let certify = CertifyConfig {
        n0: v.parse("certify.n0", "a positive integer")?,
        n: v.parse("certify.n", "a positive integer")?,
        alpha,
        sigma,
        batch: v.positive("certify.batch")?,
        seed,
    };
    if certify.n0 == 0 {
        return Err(range_err("certify.n0", 0, "[1, inf)"));
    }
    if certify.n == 0 {
        return Err(range_err("certify.n", 0, "[1, inf)"));
    }

    let kind = match v.raw("data.kind") {
        "cifar10" => DataKind::Cifar10,
        "blobs" => DataKind::Blobs,
        other => {
            return Err(Error::config(format!(
                "data.kind: expected cifar10 or blobs, got `{other}`"
            )))
        }
    };
    let data = DataConfig {
        kind,
        path: PathBuf::from(v.raw("data.path")),
        blobs_dim: v.positive("data.blobs_dim")?,
        blobs_separation: v.real("data.blobs_separation")?,
        blobs_spread: v.real("data.blobs_spread")?,
        blobs_train: v.count("data.blobs_train")?,
        blobs_test: v.count("data.blobs_test")?,
    };
    if !(data.blobs_separation > 0.0) {
        return Err(range_err("data.blobs_separation", data.blobs_separation, "(0, inf)"));
    }
    if data.blobs_spread < 0.0 {
        return Err(range_err("data.blobs_spread", data.blobs_spread, "[0, inf)"));
    }
    match kind {
        DataKind::Blobs => {
            let want = InputShape::new(1, 1, data.blobs_dim);
            if input != want {
                return Err(Error::config(format!("model.input: blobs need {want}, got {input}")));
            }
            if spec.num_classes != 2 {
                return Err(Error::config("model.classes: blobs have 2 classes"));
            }
        }
        DataKind::Cifar10 => {
            if input != InputShape::new(3, 32, 32) || spec.num_classes != 10 {
                return Err(Error::config(
                    "model.input: CIFAR-10 needs 3x32x32 inputs and 10 classes",
                ));
            }
        }
    }

    Ok(RunConfig {
        spec,
        norm,
        train,
        certify,
        stride: v.positive("certify.stride")?,
        data,
        output_dir: PathBuf::from(v.raw("run.output_dir")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_requires_sigma() {
        let err = RunConfig::parse("").unwrap_err().to_string();
        assert!(err.contains("noise.sigma required"), "{err}");
    }

    #[test]
    fn only_sigma_gives_defaults() {
        let c = RunConfig::parse("[noise]\nsigma = 0.25\n").unwrap();
        assert_eq!(c.sigma(), 0.25);
        assert_eq!(c.spec, ArchitectureSpec::resnet110(5));
        let t = &c.train;
        assert_eq!((t.epochs, t.batch_size, t.draws), (150, 256, 2));
        assert_eq!(t.epsilon, 0.8);
        assert_eq!(t.lambda_ini, 10f64.ln());
        assert_eq!(
            t.lr,
            LrSchedule {
                initial: 0.1,
                factor: 0.1,
                period: 50,
                momentum: 0.9,
                weight_decay: 1e-4
            }
        );
        assert!(t.nesterov);
        assert_eq!(t.variant, Variant::Gaussian);
        assert_eq!((c.certify.n0, c.certify.n, c.certify.alpha), (100, 100_000, 0.001));
        assert_eq!(c.stride, 20);
        let mut expected = TrainConfig::new(0.25, 10);
        expected.seed = 0;
        assert_eq!(c.train, expected);
    }

    #[test]
    fn range_errors_name_the_key() {
        let err = RunConfig::parse("noise.sigma = 0.25\ntrain.epsilon = 1.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.epsilon") && err.contains("(0, 1)"), "{err}");
        let err = RunConfig::parse("noise.sigma = 0.25\ncertify.alpha = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("certify.alpha"), "{err}");
        let err = RunConfig::parse("noise.sigma = 0.25\n[train]\nepochs = many\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.epochs"), "{err}");
        let err = RunConfig::parse("noise.sigma = 0.25\ntrain.warmup = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown key train.warmup"), "{err}");
        assert!(RunConfig::parse("noise.sigma = 0.25\nnoise.sigma = 0.5\n").is_err());
    }

    #[test]
    fn render_round_trip() {
        let text = "noise.sigma = 0.5\n[train]\nvariant = consistency\nc1 = 20\nlambda_ini = 1.7\n[model]\nlayers = dense:8, dense:4\nsplit = 1\nheads = 3\ninput = 1x1x16\nclasses = 2\nnorm_mean = none\nnorm_std = none\n[data]\nkind = blobs\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.train.variant, Variant::Consistency { c1: 20.0, c2: 0.5 });
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        let d = RunConfig::parse("noise.sigma = 1\n").unwrap();
        assert_eq!(RunConfig::parse(&d.render()).unwrap(), d);
    }

    #[test]
    fn defaults_text_lists_every_key() {
        let text = defaults_text();
        for doc in KEYS {
            let name = doc.key.split_once('.').unwrap().1;
            assert!(text.contains(&format!("{name} = ")), "{}", doc.key);
        }
        let with_sigma = format!("{text}\n[noise]\nsigma = 0.25\n");
        assert!(RunConfig::parse(&with_sigma).is_ok());
    }

    #[test]
    fn environment_overrides() {
        let c = RunConfig::parse_with_env("noise.sigma = 0.25\n", |name| match name {
            "SPACTE_TRAIN_EPOCHS" => Some("7".into()),
            "SPACTE_NOISE_SIGMA" => Some("0.5".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.sigma(), 0.5);
        assert_eq!(env_name("data.blobs_dim"), "SPACTE_DATA_BLOBS_DIM");
    }
}
