//! Flat `key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys, repeated keys and unparsable values are errors. Lists are
//! comma separated; `#` starts a comment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evalkit::GeneratorParams;
use crate::model::ModelConfig;
use crate::tracker::DEFAULT_TAU;
use crate::trainkit::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tau: f64,
    pub train: TrainConfig,
    pub bench: GeneratorParams,
    pub train_sequences: usize,
    pub eval_sequences: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            tau: DEFAULT_TAU,
            train: TrainConfig::default(),
            bench: GeneratorParams::default(),
            train_sequences: 50,
            eval_sequences: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected on/off, got {other:?}"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "patch_size",
    "embed_dim",
    "num_heads",
    "num_blocks",
    "mlp_ratio",
    "template_resolution",
    "search_resolution",
    "scales",
    "dynamic_templates",
    "keep_ratio",
    "prune_stages",
    "search_scale",
];

/// Applies one model key; returns false when `key` is not a model key.
fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    let e = &mut m.encoder;
    match key {
        "patch_size" => e.patch_size = parse(key, v)?,
        "embed_dim" => e.embed_dim = parse(key, v)?,
        "num_heads" => e.num_heads = parse(key, v)?,
        "num_blocks" => e.num_blocks = parse(key, v)?,
        "mlp_ratio" => e.mlp_ratio = parse(key, v)?,
        "template_resolution" => e.template_resolution = parse(key, v)?,
        "search_resolution" => e.search_resolution = parse(key, v)?,
        "scales" => {
            m.scales = parse_list(key, v)?;
            m.encoder.num_scales = m.scales.len();
        }
        "dynamic_templates" => e.dynamic_templates = parse_switch(key, v)?,
        "keep_ratio" => m.prune.keep_ratio = parse(key, v)?,
        "prune_stages" => m.prune.stages = parse_list(key, v)?,
        "search_scale" => m.search_scale = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_to_pairs(m: &ModelConfig) -> Vec<(String, String)> {
    let e = &m.encoder;
    [
        ("patch_size", e.patch_size.to_string()),
        ("embed_dim", e.embed_dim.to_string()),
        ("num_heads", e.num_heads.to_string()),
        ("num_blocks", e.num_blocks.to_string()),
        ("mlp_ratio", e.mlp_ratio.to_string()),
        ("template_resolution", e.template_resolution.to_string()),
        ("search_resolution", e.search_resolution.to_string()),
        ("scales", join(&m.scales)),
        ("dynamic_templates", on_off(e.dynamic_templates).to_string()),
        ("keep_ratio", m.prune.keep_ratio.to_string()),
        ("prune_stages", join(&m.prune.stages)),
        ("search_scale", m.search_scale.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Inverse of [`model_to_pairs`]; every model key must be present.
pub fn model_from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut m = ModelConfig::desk();
    let mut seen = BTreeSet::new();
    for (k, v) in pairs {
        if !set_model(&mut m, k, v)? {
            return Err(Error::Checkpoint(format!("unknown config key {k:?} in checkpoint")));
        }
        seen.insert(k.as_str());
    }
    if let Some(missing) = MODEL_KEYS.iter().find(|k| !seen.contains(*k)) {
        return Err(Error::Checkpoint(format!("checkpoint config lacks {missing}")));
    }
    m.validate()?;
    Ok(m)
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_model(&mut self.model, key, v)? {
            return Ok(());
        }
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "tau" => self.tau = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "samples_per_sequence" => t.samples_per_sequence = parse(key, v)?,
            "lr" => t.optimizer.lr = parse(key, v)?,
            "beta1" => t.optimizer.beta1 = parse(key, v)?,
            "beta2" => t.optimizer.beta2 = parse(key, v)?,
            "adam_eps" => t.optimizer.eps = parse(key, v)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "loss_giou" => t.loss.giou = parse(key, v)?,
            "loss_l1" => t.loss.l1 = parse(key, v)?,
            "max_gap" => t.sampler.max_gap = parse(key, v)?,
            "flip_prob" => t.sampler.flip_prob = parse(key, v)?,
            "template_scale_jitter" => t.sampler.template_scale_jitter = parse(key, v)?,
            "template_center_jitter" => t.sampler.template_center_jitter = parse(key, v)?,
            "search_center_jitter" => t.sampler.search_center_jitter = parse(key, v)?,
            "search_scale_jitter" => t.sampler.search_scale_jitter = parse(key, v)?,
            "train_sequences" => self.train_sequences = parse(key, v)?,
            "eval_sequences" => self.eval_sequences = parse(key, v)?,
            "frame_size" => b.frame_size = parse(key, v)?,
            "num_frames" => b.num_frames = parse(key, v)?,
            "target_size" => b.target_size = parse(key, v)?,
            "target_sides" => b.target_sides = parse(key, v)?,
            "hue_drift" => b.hue_drift = parse(key, v)?,
            "scale_drift" => b.scale_drift = parse(key, v)?,
            "distractors" => b.distractors = parse(key, v)?,
            "distractor_hue_jitter" => b.distractor_hue_jitter = parse(key, v)?,
            "motion_step" => b.motion_step = parse(key, v)?,
            "momentum" => b.momentum = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: {k} given twice", n + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        self.train.validate()?;
        self.bench.validate()
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in model_to_pairs(&self.model) {
            let _ = writeln!(s, "{k} = {v}");
        }
        let t = &self.train;
        let b = &self.bench;
        let rows: Vec<(&str, String)> = vec![
            ("tau", self.tau.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("samples_per_sequence", t.samples_per_sequence.to_string()),
            ("lr", t.optimizer.lr.to_string()),
            ("beta1", t.optimizer.beta1.to_string()),
            ("beta2", t.optimizer.beta2.to_string()),
            ("adam_eps", t.optimizer.eps.to_string()),
            ("weight_decay", t.optimizer.weight_decay.to_string()),
            ("loss_giou", t.loss.giou.to_string()),
            ("loss_l1", t.loss.l1.to_string()),
            ("max_gap", t.sampler.max_gap.to_string()),
            ("flip_prob", t.sampler.flip_prob.to_string()),
            ("template_scale_jitter", t.sampler.template_scale_jitter.to_string()),
            ("template_center_jitter", t.sampler.template_center_jitter.to_string()),
            ("search_center_jitter", t.sampler.search_center_jitter.to_string()),
            ("search_scale_jitter", t.sampler.search_scale_jitter.to_string()),
            ("train_sequences", self.train_sequences.to_string()),
            ("eval_sequences", self.eval_sequences.to_string()),
            ("frame_size", b.frame_size.to_string()),
            ("num_frames", b.num_frames.to_string()),
            ("target_size", b.target_size.to_string()),
            ("target_sides", b.target_sides.to_string()),
            ("hue_drift", b.hue_drift.to_string()),
            ("scale_drift", b.scale_drift.to_string()),
            ("distractors", b.distractors.to_string()),
            ("distractor_hue_jitter", b.distractor_hue_jitter.to_string()),
            ("motion_step", b.motion_step.to_string()),
            ("momentum", b.momentum.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.model = c.model.with_scales(vec![2.0, 3.0, 4.0]);
        c.model.prune.stages = vec![];
        c.tau = 0.55;
        c.train.optimizer.lr = 3e-4;
        assert_eq!(RunConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        assert!(RunConfig::parse_str("colour = red").is_err());
        assert!(RunConfig::parse_str("tau = 0.5\ntau = 0.6").is_err());
        assert!(RunConfig::parse_str("tau = high").is_err());
        assert!(RunConfig::parse_str("tau 0.5").is_err());
        assert!(RunConfig::parse_str("embed_dim = 60").is_err());
        assert!(RunConfig::parse_str("prune_stages = 0,2").is_err());
    }

    #[test]
    fn comments_and_switches() {
        let c = RunConfig::parse_str("# desk\ndynamic_templates = off # ablation\nscales = 2.0\n").unwrap();
        assert!(!c.model.encoder.dynamic_templates);
        assert_eq!(c.model.encoder.num_scales, 1);
    }

    #[test]
    fn model_pairs_round_trip() {
        let m = ModelConfig::full_size();
        assert_eq!(model_from_pairs(&model_to_pairs(&m)).unwrap(), m);
        let mut pairs = model_to_pairs(&m);
        pairs.pop();
        assert!(model_from_pairs(&pairs).is_err());
    }
}
