//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binio::read_file;
use crate::data::{SynthConfig, VisualMap, DEFAULT_VISUAL_GAIN};
use crate::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_HIDDEN, DEFAULT_STEPS, DEFAULT_TIME_DIM};
use crate::ema::{DEFAULT_SHARED_DIM, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, DEFAULT_HM_EPS};
use crate::optim::AdamConfig;
use crate::par::ExecMode;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Embedding file; synthetic data is generated when absent.
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Generation seed; derived from `seed` when absent.
    pub data_seed: Option<u64>,
    pub train_fraction: f64,
    pub out: PathBuf,

    pub shared_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,

    pub epochs_baseline: usize,
    pub epochs_ema: usize,
    pub epochs_mlp: usize,
    pub epochs_cdr: usize,
    pub epochs_fusion: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,

    pub alpha1: f64,
    pub beta: f64,
    pub alpha2: f64,
    pub gamma: f64,
    pub tau: f64,
    pub train_temp: bool,

    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub fusion: FusionStrategy,
    pub hm_eps: f64,
    pub num_samples: usize,
    pub exec: ExecMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: None,
            synth: SynthConfig::default(),
            data_seed: None,
            train_fraction: 0.8,
            out: PathBuf::from("runs/default"),
            shared_dim: DEFAULT_SHARED_DIM,
            hidden: DEFAULT_HIDDEN,
            time_dim: DEFAULT_TIME_DIM,
            epochs_baseline: 20,
            epochs_ema: 20,
            epochs_mlp: 20,
            epochs_cdr: 30,
            epochs_fusion: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
            alpha1: 1.0,
            beta: 1.0,
            alpha2: 1.0,
            gamma: 1.0,
            tau: DEFAULT_TAU,
            train_temp: false,
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            fusion: FusionStrategy::Concat,
            hm_eps: DEFAULT_HM_EPS,
            num_samples: 1,
            exec: ExecMode::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

/// Every key accepted by [`RunConfig::set`], in dump order.
pub const KEYS: &[&str] = &[
    "seed",
    "data",
    "data_seed",
    "classes",
    "per_class",
    "visual_dim",
    "semantic_dim",
    "semantic_noise",
    "visual_noise",
    "distractors",
    "distractor_strength",
    "visual_map",
    "visual_gain",
    "train_fraction",
    "out",
    "shared_dim",
    "hidden",
    "time_dim",
    "epochs",
    "epochs_baseline",
    "epochs_ema",
    "epochs_mlp",
    "epochs_cdr",
    "epochs_fusion",
    "batch_size",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "alpha1",
    "beta",
    "alpha2",
    "gamma",
    "tau",
    "train_temp",
    "steps",
    "beta_start",
    "beta_end",
    "fusion",
    "hm_eps",
    "num_samples",
    "exec",
];

impl RunConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "data" => self.data = (!v.is_empty() && v != "synthetic").then(|| PathBuf::from(v)),
            "data_seed" => self.data_seed = if v == "auto" { None } else { Some(parse(key, v)?) },
            "classes" => self.synth.classes = parse(key, v)?,
            "per_class" => self.synth.per_class = parse(key, v)?,
            "visual_dim" => self.synth.visual_dim = parse(key, v)?,
            "semantic_dim" => self.synth.semantic_dim = parse(key, v)?,
            "semantic_noise" => self.synth.semantic_noise = parse(key, v)?,
            "visual_noise" => self.synth.visual_noise = parse(key, v)?,
            "distractors" => self.synth.distractors = parse(key, v)?,
            "distractor_strength" => self.synth.distractor_strength = parse(key, v)?,
            "visual_map" => {
                self.synth.visual_map = match v {
                    "identity" => VisualMap::Identity,
                    "random" => VisualMap::Random {
                        gain: match self.synth.visual_map {
                            VisualMap::Random { gain } => gain,
                            VisualMap::Identity => DEFAULT_VISUAL_GAIN,
                        },
                    },
                    _ => return Err(Error::Config(format!("visual_map must be random or identity, got {v:?}"))),
                }
            }
            "visual_gain" => self.synth.visual_map = VisualMap::Random { gain: parse(key, v)? },
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "shared_dim" => self.shared_dim = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "time_dim" => self.time_dim = parse(key, v)?,
            "epochs" => {
                let e = parse(key, v)?;
                self.epochs_baseline = e;
                self.epochs_ema = e;
                self.epochs_mlp = e;
                self.epochs_cdr = e;
                self.epochs_fusion = e;
            }
            "epochs_baseline" => self.epochs_baseline = parse(key, v)?,
            "epochs_ema" => self.epochs_ema = parse(key, v)?,
            "epochs_mlp" => self.epochs_mlp = parse(key, v)?,
            "epochs_cdr" => self.epochs_cdr = parse(key, v)?,
            "epochs_fusion" => self.epochs_fusion = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "alpha1" => self.alpha1 = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "alpha2" => self.alpha2 = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "train_temp" => self.train_temp = parse_bool(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "hm_eps" => self.hm_eps = parse(key, v)?,
            "num_samples" => self.num_samples = parse(key, v)?,
            "exec" => {
                self.exec = match v {
                    "parallel" => ExecMode::Parallel,
                    "sequential" => ExecMode::Sequential,
                    _ => return Err(Error::Config(format!("exec must be parallel or sequential, got {v:?}"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            if key.trim() == "format_version" {
                let v: u32 = parse("format_version", value.trim())?;
                if v != CONFIG_FORMAT_VERSION {
                    return Err(Error::UnsupportedVersion(v));
                }
                continue;
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.root())))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config("config is not UTF-8".into()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Full text form; `apply_text` on a default config restores `self`.
    pub fn to_text(&self) -> String {
        let mut s = format!("format_version = {CONFIG_FORMAT_VERSION}\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv(
            "data",
            self.data
                .as_ref()
                .map_or("synthetic".to_string(), |p| p.display().to_string()),
        );
        kv("data_seed", self.data_seed.map_or("auto".to_string(), |s| s.to_string()));
        kv("classes", self.synth.classes.to_string());
        kv("per_class", self.synth.per_class.to_string());
        kv("visual_dim", self.synth.visual_dim.to_string());
        kv("semantic_dim", self.synth.semantic_dim.to_string());
        kv("semantic_noise", self.synth.semantic_noise.to_string());
        kv("visual_noise", self.synth.visual_noise.to_string());
        kv("distractors", self.synth.distractors.to_string());
        kv("distractor_strength", self.synth.distractor_strength.to_string());
        match self.synth.visual_map {
            VisualMap::Identity => kv("visual_map", "identity".into()),
            VisualMap::Random { gain } => {
                kv("visual_map", "random".into());
                kv("visual_gain", gain.to_string());
            }
        }
        kv("train_fraction", self.train_fraction.to_string());
        kv("out", self.out.display().to_string());
        kv("shared_dim", self.shared_dim.to_string());
        kv("hidden", self.hidden.to_string());
        kv("time_dim", self.time_dim.to_string());
        kv("epochs_baseline", self.epochs_baseline.to_string());
        kv("epochs_ema", self.epochs_ema.to_string());
        kv("epochs_mlp", self.epochs_mlp.to_string());
        kv("epochs_cdr", self.epochs_cdr.to_string());
        kv("epochs_fusion", self.epochs_fusion.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.adam.lr.to_string());
        kv("adam_beta1", self.adam.beta1.to_string());
        kv("adam_beta2", self.adam.beta2.to_string());
        kv("adam_eps", self.adam.eps.to_string());
        kv("alpha1", self.alpha1.to_string());
        kv("beta", self.beta.to_string());
        kv("alpha2", self.alpha2.to_string());
        kv("gamma", self.gamma.to_string());
        kv("tau", self.tau.to_string());
        kv("train_temp", self.train_temp.to_string());
        kv("steps", self.steps.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("fusion", self.fusion.to_string());
        kv("hm_eps", self.hm_eps.to_string());
        kv("num_samples", self.num_samples.to_string());
        kv(
            "exec",
            match self.exec {
                ExecMode::Parallel => "parallel".into(),
                ExecMode::Sequential => "sequential".into(),
            },
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_none() {
            self.synth.validate()?;
        }
        let positive = [
            ("shared_dim", self.shared_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("num_samples", self.num_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and >= 2".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("beta", self.beta),
            ("alpha2", self.alpha2),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config("need 0 < beta_start <= beta_end < 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(self.hm_eps >= 0.0) {
            return Err(Error::Config("hm_eps must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.fusion = FusionStrategy::Hm;
        cfg.data = Some(PathBuf::from("x/y.mreb"));
        cfg.train_temp = true;
        cfg.exec = ExecMode::Sequential;
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_dumped_or_an_alias() {
        let text = RunConfig::default().to_text();
        for k in KEYS {
            if *k != "epochs" {
                assert!(text.contains(&format!("\n{k} = ")), "{k} missing");
            }
        }
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\nseed = 7  # trailing\nepochs=3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs_cdr, 3);
        assert!(matches!(cfg.apply_text("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("seed 1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("seed = x"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("format_version = 9"), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.time_dim = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.beta_end = 1.0;
        assert!(c.validate().is_err());
    }
}
