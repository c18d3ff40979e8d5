//! Flat `key = value` run configuration.
//!
//! Layering, lowest to highest precedence: built-in defaults, config file,
//! the `CARTOONFORGE_BACKEND` environment variable (for `backend.kind`),
//! explicit overrides. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackendConfig, BackendKind};
use crate::domain::LossWeights;
use crate::error::{Error, Result};
use crate::losses::LandmarkNorm;
use crate::mapper::MapperConfig;

pub const BACKEND_ENV: &str = "CARTOONFORGE_BACKEND";

/// What the reconstruction term compares the output against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecTarget {
    #[default]
    CartoonisedInput,
    RawInput,
}

impl std::str::FromStr for RecTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartoonised_input" => Ok(RecTarget::CartoonisedInput),
            "raw_input" => Ok(RecTarget::RawInput),
            other => Err(Error::Config(format!(
                "rec_target must be cartoonised_input or raw_input, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for RecTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RecTarget::CartoonisedInput => "cartoonised_input",
            RecTarget::RawInput => "raw_input",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Pose-tail learning rate relative to the mapper's.
    pub pose_lr_multiplier: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub recon_period: u64,
    pub seed: u64,
    pub adversarial: bool,
    /// `L_lnd` gets weight 0 on iterations after this one.
    pub lnd_dropout_after: Option<u64>,
    /// 0 writes only the initial and final checkpoints.
    pub checkpoint_every: u64,
    pub rec_target: RecTarget,
    pub landmark_norm: LandmarkNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            pose_lr_multiplier: 1.0,
            weights: LossWeights::default(),
            batch_size: 8,
            max_iterations: 1000,
            recon_period: 3,
            seed: 0,
            adversarial: false,
            lnd_dropout_after: None,
            checkpoint_every: 100,
            rec_target: RecTarget::default(),
            landmark_norm: LandmarkNorm::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.pose_lr_multiplier.is_finite() && self.pose_lr_multiplier >= 0.0) {
            return Err(Error::Config(format!(
                "pose_lr_multiplier must be >= 0, got {}",
                self.pose_lr_multiplier
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.recon_period == 0 {
            return Err(Error::Config("recon_period must be >= 1".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Loss weights in effect at iteration `i`.
    pub fn weights_at(&self, i: u64) -> LossWeights {
        let mut w = self.weights;
        if self.lnd_dropout_after.is_some_and(|d| i > d) {
            w.lambda_lnd = 0.0;
        }
        if !self.adversarial {
            w.lambda_adv = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperOptions {
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub normalize_inputs: bool,
}

impl Default for MapperOptions {
    fn default() -> Self {
        Self {
            hidden: MapperConfig::DEFAULT_HIDDEN.to_vec(),
            slope: 0.2,
            normalize_inputs: false,
        }
    }
}

impl MapperOptions {
    pub fn config(&self, pose_dim: usize, identity_dim: usize) -> MapperConfig {
        MapperConfig {
            pose_dim,
            identity_dim,
            hidden: self.hidden.clone(),
            slope: self.slope,
            normalize_inputs: self.normalize_inputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub mapper: MapperOptions,
    pub backend: BackendConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    if v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn fmt_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub const KEYS: [&'static str; 30] = [
        "learning_rate",
        "pose_lr_multiplier",
        "batch_size",
        "max_iterations",
        "recon_period",
        "seed",
        "adversarial",
        "lnd_dropout_after",
        "checkpoint_every",
        "lambda_id",
        "lambda_lnd",
        "lambda_rec",
        "alpha",
        "lambda_adv",
        "gamma_r1",
        "rec_target",
        "landmark_norm",
        "mapper.hidden",
        "mapper.slope",
        "mapper.normalize_inputs",
        "backend.kind",
        "backend.identity.path",
        "backend.pose.path",
        "backend.landmark.path",
        "backend.generator.path",
        "backend.cartooniser.path",
        "backend.toy_seed",
        "backend.precision",
        "backend.resize",
        "backend.source",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let b = &mut self.backend;
        match key {
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "pose_lr_multiplier" => t.pose_lr_multiplier = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_iterations" => t.max_iterations = parse(key, v)?,
            "recon_period" => t.recon_period = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "adversarial" => t.adversarial = parse_bool(key, v)?,
            "lnd_dropout_after" => t.lnd_dropout_after = parse_opt(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "lambda_id" => t.weights.lambda_id = parse(key, v)?,
            "lambda_lnd" => t.weights.lambda_lnd = parse(key, v)?,
            "lambda_rec" => t.weights.lambda_rec = parse(key, v)?,
            "alpha" => t.weights.alpha = parse(key, v)?,
            "lambda_adv" => t.weights.lambda_adv = parse(key, v)?,
            "gamma_r1" => t.weights.gamma_r1 = parse(key, v)?,
            "rec_target" => t.rec_target = v.parse()?,
            "landmark_norm" => t.landmark_norm = v.parse()?,
            "mapper.hidden" => {
                self.mapper.hidden = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "mapper.slope" => self.mapper.slope = parse(key, v)?,
            "mapper.normalize_inputs" => self.mapper.normalize_inputs = parse_bool(key, v)?,
            "backend.kind" => b.kind = v.parse()?,
            "backend.identity.path" => b.identity_path = parse_path(v),
            "backend.pose.path" => b.pose_path = parse_path(v),
            "backend.landmark.path" => b.landmark_path = parse_path(v),
            "backend.generator.path" => b.generator_path = parse_path(v),
            "backend.cartooniser.path" => b.cartooniser_path = parse_path(v),
            "backend.toy_seed" => b.toy_seed = parse(key, v)?,
            "backend.precision" => b.precision = v.parse()?,
            "backend.resize" => b.resize = v.parse()?,
            // A directory of exported weights; fills every path at once.
            "backend.source" => {
                let dir = PathBuf::from(v);
                b.identity_path = Some(dir.join("identity.safetensors"));
                b.pose_path = Some(dir.join("pose.safetensors"));
                b.landmark_path = Some(dir.join("landmark.safetensors"));
                b.generator_path = Some(dir.join("generator.safetensors"));
                b.cartooniser_path = Some(dir.join("cartooniser.safetensors"));
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => at(other.to_string()),
            })?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `env_backend`, then `overrides`.
    pub fn layered(file: Option<&Path>, env_backend: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        // An explicit override wins, so a bad environment value is moot then.
        let overridden = overrides.iter().any(|(k, _)| k == "backend.kind");
        if let Some(kind) = env_backend.filter(|_| !overridden) {
            cfg.backend.kind = kind.parse::<BackendKind>().map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{BACKEND_ENV}: {m}")),
                other => other,
            })?;
        }
        for (k, v) in overrides {
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("--param {k}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`layered`](Self::layered) with the environment read from the
    /// process.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let env = std::env::var(BACKEND_ENV).ok();
        Self::layered(file, env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.mapper.hidden.contains(&0) {
            return Err(Error::Config("mapper.hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, one per line, parseable by
    /// [`apply_text`](Self::apply_text).
    pub fn echo(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let b = &self.backend;
        let hidden: Vec<String> = self.mapper.hidden.iter().map(|h| h.to_string()).collect();
        let rows: Vec<(&str, String)> = vec![
            ("learning_rate", t.learning_rate.to_string()),
            ("pose_lr_multiplier", t.pose_lr_multiplier.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_iterations", t.max_iterations.to_string()),
            ("recon_period", t.recon_period.to_string()),
            ("seed", t.seed.to_string()),
            ("adversarial", t.adversarial.to_string()),
            ("lnd_dropout_after", fmt_opt(&t.lnd_dropout_after)),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("lambda_id", w.lambda_id.to_string()),
            ("lambda_lnd", w.lambda_lnd.to_string()),
            ("lambda_rec", w.lambda_rec.to_string()),
            ("alpha", w.alpha.to_string()),
            ("lambda_adv", w.lambda_adv.to_string()),
            ("gamma_r1", w.gamma_r1.to_string()),
            ("rec_target", t.rec_target.to_string()),
            ("landmark_norm", t.landmark_norm.to_string()),
            ("mapper.hidden", hidden.join(",")),
            ("mapper.slope", self.mapper.slope.to_string()),
            ("mapper.normalize_inputs", self.mapper.normalize_inputs.to_string()),
            ("backend.kind", b.kind.to_string()),
            ("backend.identity.path", fmt_path(&b.identity_path)),
            ("backend.pose.path", fmt_path(&b.pose_path)),
            ("backend.landmark.path", fmt_path(&b.landmark_path)),
            ("backend.generator.path", fmt_path(&b.generator_path)),
            ("backend.cartooniser.path", fmt_path(&b.cartooniser_path)),
            ("backend.toy_seed", b.toy_seed.to_string()),
            ("backend.precision", format!("{:?}", b.precision).to_lowercase()),
            ("backend.resize", format!("{:?}", b.resize).to_lowercase()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("", "empty").unwrap();
        let w = cfg.train.weights;
        assert_eq!((w.lambda_id, w.lambda_lnd, w.lambda_rec, w.alpha), (1.0, 1.0, 0.001, 0.84));
        assert_eq!(cfg.train.learning_rate, 5e-5);
        assert_eq!(cfg.train.recon_period, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert!(!cfg.train.adversarial);
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nlearning_rate = 0.001\nbackend.kind = pretrained\nseed = 4 # trailing\n").unwrap();
        let cfg = RunConfig::layered(Some(&p), None, &[]).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.backend.kind, BackendKind::Pretrained);
        let cfg = RunConfig::layered(Some(&p), Some("toy"), &[("learning_rate".into(), "0.5".into())]).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert_eq!(cfg.backend.kind, BackendKind::Toy);
        let cfg = RunConfig::layered(Some(&p), Some("toy"), &[("backend.kind".into(), "pretrained".into())]).unwrap();
        assert_eq!(cfg.backend.kind, BackendKind::Pretrained);
        let err = RunConfig::layered(None, Some("imaginary"), &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)) && err.to_string().contains(BACKEND_ENV), "{err}");
        let cfg = RunConfig::layered(None, Some("imaginary"), &[("backend.kind".into(), "toy".into())]).unwrap();
        assert_eq!(cfg.backend.kind, BackendKind::Toy);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("seed = 1\nlambda_4 = 2\n", "f.cfg").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("lambda_4") && msg.contains("f.cfg:2"), "{msg}");
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_text("batch_size = many", "x"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("novalue", "x"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::layered(None, Some("gpu"), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::layered(None, None, &[("recon_period".into(), "0".into())]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "lnd_dropout_after = 60\nmapper.hidden = 64,32\nbackend.pose.path = /tmp/p.safetensors\nrec_target = raw_input",
            "x",
        )
        .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.echo(), "echo").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.echo().lines().count(), RunConfig::KEYS.len() - 1);
    }

    #[test]
    fn dropout_and_adversarial_weights() {
        let t = TrainConfig {
            lnd_dropout_after: Some(60),
            ..Default::default()
        };
        assert_eq!(t.weights_at(60).lambda_lnd, 1.0);
        assert_eq!(t.weights_at(61).lambda_lnd, 0.0);
        assert_eq!(t.weights_at(1).lambda_adv, 0.0);
    }
}
