//! Flat `key = value` experiment configuration with `--key value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use acs_core::decoder::Vocab;
use acs_core::encoder::EncoderConfig;
use acs_core::lm::{LmConfig, LmTrainConfig};
use acs_core::model::ModelConfig;
use acs_core::search::BeamConfig;
use acs_core::tasks::TaskConfig;
use acs_core::training::{MismatchPolicy, TrainConfig};
use anyhow::{anyhow, bail, Context, Result};

/// Name of the effective-config echo written into every output directory.
pub const ECHO_FILE: &str = "config.txt";

/// Namespaces accepted as `--<namespace>.<key> value` overrides.
pub const NAMESPACES: &[&str] = &["task", "model", "lm", "train", "beam", "paths"];

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool, String);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("{e}"))
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
}

impl ConfigValue for Vec<bool> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(bool::to_string).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for MismatchPolicy {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "rank" => Ok(MismatchPolicy::Rank),
            "rescale" => Ok(MismatchPolicy::Rescale),
            _ => Err(format!("expected rank or rescale, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            MismatchPolicy::Rank => "rank".into(),
            MismatchPolicy::Rescale => "rescale".into(),
        }
    }
}

/// Model sizes; input and vocab sizes come from the task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub encoder_layers: usize,
    pub encoder_units: usize,
    pub downsample: Vec<bool>,
    pub bidirectional: bool,
    pub epsilon: f64,
    pub halting_kernel_width: usize,
    pub halting_channels: usize,
    pub decoder_embed_dim: usize,
    pub decoder_units: usize,
    pub window: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::online(1, 1);
        Self {
            encoder_layers: m.encoder.layers,
            encoder_units: m.encoder.units,
            downsample: m.encoder.downsample,
            bidirectional: m.encoder.bidirectional,
            epsilon: m.halting.epsilon,
            halting_kernel_width: m.halting.kernel_width,
            halting_channels: m.halting.channels,
            decoder_embed_dim: m.decoder.embed_dim,
            decoder_units: m.decoder.units,
            window: m.decoder.window,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSection {
    /// Corpus splits and vocab.
    pub data_dir: PathBuf,
    /// Acoustic model checkpoint, report, and config echo.
    pub out_dir: PathBuf,
    /// Language model checkpoint and config echo.
    pub lm_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs/model".into(),
            lm_dir: "runs/lm".into(),
        }
    }
}

/// Every knob of an experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelSection,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub paths: PathsSection,
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl ExperimentConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)?;
                        Ok(())
                    })*
                    _ => Err("unknown key".into()),
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_keys! {
    "task.num_labels" => task.num_labels;
    "task.input_dim" => task.input_dim;
    "task.min_frames_per_label" => task.min_frames_per_label;
    "task.max_frames_per_label" => task.max_frames_per_label;
    "task.noise_std" => task.noise_std;
    "task.min_labels" => task.min_labels;
    "task.max_labels" => task.max_labels;
    "task.train_size" => task.train_size;
    "task.dev_size" => task.dev_size;
    "task.test_size" => task.test_size;
    "task.bigram" => task.bigram;
    "task.max_frames" => task.max_frames;
    "task.seed" => task.seed;
    "model.encoder_layers" => model.encoder_layers;
    "model.encoder_units" => model.encoder_units;
    "model.downsample" => model.downsample;
    "model.bidirectional" => model.bidirectional;
    "model.epsilon" => model.epsilon;
    "model.halting_kernel_width" => model.halting_kernel_width;
    "model.halting_channels" => model.halting_channels;
    "model.decoder_embed_dim" => model.decoder_embed_dim;
    "model.decoder_units" => model.decoder_units;
    "model.window" => model.window;
    "model.init_seed" => model.init_seed;
    "lm.embed_dim" => lm.embed_dim;
    "lm.units" => lm.units;
    "lm.epochs" => lm_train.epochs;
    "lm.learning_rate" => lm_train.learning_rate;
    "lm.clip_norm" => lm_train.clip_norm;
    "lm.seed" => lm_train.seed;
    "train.epochs" => train.epochs;
    "train.learning_rate" => train.learning_rate;
    "train.lr_decay" => train.lr_decay;
    "train.weight_decay" => train.weight_decay;
    "train.clip_norm" => train.clip_norm;
    "train.late_clip_norm" => train.late_clip_norm;
    "train.clip_switch_epoch" => train.clip_switch_epoch;
    "train.batch_size" => train.batch_size;
    "train.patience" => train.patience;
    "train.window" => train.window;
    "train.scale_activations" => train.scale_activations;
    "train.mismatch" => train.mismatch;
    "train.alignment_loss_weight" => train.alignment_loss_weight;
    "train.binarization_weight" => train.binarization_weight;
    "train.seed" => train.seed;
    "beam.width" => beam.width;
    "beam.gamma" => beam.gamma;
    "beam.window" => beam.window;
    "beam.nbest" => beam.nbest;
    "paths.data_dir" => paths.data_dir;
    "paths.out_dir" => paths.out_dir;
    "paths.lm_dir" => paths.lm_dir;
}

/// A `(key, value)` setting.
pub type Pair = (String, String);

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    let mut seen = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        if let Some(first) = seen.insert(k.to_string(), n + 1) {
            bail!("line {}: key {k} already set on line {first}", n + 1);
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Applies `pairs` in order on top of the current values, then validates.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v).map_err(|e| anyhow!("config key {k} = {v:?}: {e}"))?;
        }
        self.validate()
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let pairs = parse_pairs(&text).with_context(|| format!("parsing config {}", p.display()))?;
            cfg.apply(&pairs)?;
        }
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        self.beam.validate()?;
        self.model_config().encoder.validate()?;
        if self.lm_train.epochs == 0 {
            bail!("lm.epochs must be at least 1");
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Writes the effective config into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::with_labels(self.task.num_labels)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut cfg = ModelConfig::online(self.task.input_dim, self.vocab().len());
        cfg.encoder = EncoderConfig {
            layers: m.encoder_layers,
            units: m.encoder_units,
            downsample: m.downsample.clone(),
            bidirectional: m.bidirectional,
        };
        cfg.halting.epsilon = m.epsilon;
        cfg.halting.kernel_width = m.halting_kernel_width;
        cfg.halting.channels = m.halting_channels;
        cfg.decoder.embed_dim = m.decoder_embed_dim;
        cfg.decoder.units = m.decoder_units;
        cfg.decoder.window = m.window;
        cfg
    }
}

/// Splits `--<namespace>.<key> value` pairs out of `args`, returning the rest.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Pair>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .filter(|k| NAMESPACES.iter().any(|ns| k.strip_prefix(ns).is_some_and(|r| r.starts_with('.'))));
        match key {
            Some(k) => {
                let (k, v) = match k.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| anyhow!("override --{k} needs a value"))?;
                        (k.to_string(), v)
                    }
                };
                pairs.push((k, v));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let text = "# experiment\n\ntask.noise_std = 0.5  # hard\n train.epochs=3\n";
        let p = parse_pairs(text).unwrap();
        assert_eq!(p, pairs(&[("task.noise_std", "0.5"), ("train.epochs", "3")]));
        assert!(parse_pairs("task.seed 3").is_err());
        assert!(parse_pairs("a = 1\na = 2").is_err());
        assert!(parse_pairs(" = 2").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&pairs(&[
            ("task.noise_std", "0.25"),
            ("task.bigram", "true"),
            ("train.window", "0"),
            ("train.mismatch", "rescale"),
            ("model.downsample", "false,false,true"),
            ("paths.out_dir", "elsewhere/run"),
        ]))
        .unwrap();
        let mut back = ExperimentConfig::default();
        back.apply(&parse_pairs(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.window, Some(0));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply(&pairs(&[("task.colour", "red")])).is_err());
        assert!(cfg.apply(&pairs(&[("train.epochs", "many")])).is_err());
        assert!(cfg.apply(&pairs(&[("train.epochs", "0")])).is_err());
        assert!(cfg.apply(&pairs(&[("model.downsample", "true")])).is_err());
    }

    #[test]
    fn overrides_are_split_from_other_arguments() {
        let args: Vec<String> = ["--config", "x.cfg", "--train.epochs", "4", "--resume", "--task.seed=9"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, p) = extract_overrides(args).unwrap();
        assert_eq!(rest, vec!["--config", "x.cfg", "--resume"]);
        assert_eq!(p, pairs(&[("train.epochs", "4"), ("task.seed", "9")]));
        assert!(extract_overrides(vec!["--train.epochs".into()]).is_err());
    }

    #[test]
    fn model_config_follows_task_dimensions() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&pairs(&[("task.num_labels", "5"), ("task.input_dim", "7"), ("model.bidirectional", "true")]))
            .unwrap();
        let m = cfg.model_config();
        assert_eq!(m.input_dim, 7);
        assert_eq!(m.vocab_size, 9);
        assert!(m.encoder.bidirectional);
    }
}
