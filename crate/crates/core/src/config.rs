//! Training configuration: flat `key = value` files, overrides and presets.
//!
//! Schema (one `key = value` per line, `#` starts a comment):
//!
//! | key | values | default |
//! |-----|--------|---------|
//! | `env` | `mountaincar`, `pendulum` | `pendulum` |
//! | `variant` | `dense`, `sparse` | `dense` |
//! | `episode_horizon` | positive integer or `auto` (500 sparse, 1000 dense) | `auto` |
//! | `mode` | `actionnoise`, `nadpex`, `bootstrap`, `paramnoise` | `nadpex` |
//! | `dropout_kind` | `gaussian`, `bernoulli` | `gaussian` |
//! | `dropout_rate` | initial drop rate in `[0.005, 0.5]` | `0.1` |
//! | `param_noise_sigma` | `>= 0` | `0.01` |
//! | `param_noise_adapt` | `true`, `false` | `true` |
//! | `param_noise_capacity` | bytes per batch, or `none` | `none` |
//! | `surrogate` | `clip`, `kl` | `clip` |
//! | `beta` | `>= 0` | `0.0005` |
//! | `clip_epsilon` | `(0, 1)` | `0.2` |
//! | `batch_steps` | steps per update | `2048` |
//! | `num_envs` | parallel slots | `2` |
//! | `gamma`, `lambda` | `[0, 1]` | `0.99`, `0.95` |
//! | `epochs`, `minibatches` | positive integers | `10`, `1` |
//! | `stepsize` | Adam stepsize for both networks | `0.0003` |
//! | `dropout_stepsize` | Adam stepsize for the dropout parameters | `0.0003` |
//! | `hidden` | comma-separated widths | `64,64` |
//! | `seeds` | comma-separated integers | `1,2,3,4,5` |
//! | `total_steps` | environment steps per seed | `300000` |
//! | `normalize_obs`, `normalize_advantages` | booleans | `true`, `true` |
//! | `value_coef`, `value_clip` | `>= 0` | `0.5`, `0.2` |
//! | `record_wallclock` | write real timings into metrics | `false` |
//! | `parallel_seeds` | train seeds on a thread pool | `false` |
//! | `dump_trajectories` | write per-step trajectory CSVs | `false` |
//! | `output_dir` | path | `runs/default` |

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dropoutdist::{DropoutKind, RATE_MAX, RATE_MIN};
use crate::envs::{EnvKind, Variant};
use crate::error::{Error, Result};
use crate::estimators::Surrogate;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExplorationMode {
    ActionNoiseOnly,
    Nadpex(DropoutKind),
    Bootstrap(DropoutKind),
    ParameterNoise,
}

impl ExplorationMode {
    pub fn dropout_kind(self) -> Option<DropoutKind> {
        match self {
            ExplorationMode::Nadpex(k) | ExplorationMode::Bootstrap(k) => Some(k),
            _ => None,
        }
    }

    /// Whether the dropout parameters stay at their initial values.
    pub fn phi_frozen(self) -> bool {
        !matches!(self, ExplorationMode::Nadpex(_))
    }

    pub fn name(self) -> &'static str {
        match self {
            ExplorationMode::ActionNoiseOnly => "actionnoise",
            ExplorationMode::Nadpex(_) => "nadpex",
            ExplorationMode::Bootstrap(_) => "bootstrap",
            ExplorationMode::ParameterNoise => "paramnoise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateKind {
    Clip,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub variant: Variant,
    pub episode_horizon: Option<usize>,
    pub mode: ExplorationMode,
    pub dropout_rate: f64,
    pub param_noise_sigma: f64,
    pub param_noise_adapt: bool,
    pub param_noise_capacity: Option<usize>,
    pub surrogate: SurrogateKind,
    pub beta: f64,
    pub clip_epsilon: f64,
    pub batch_steps: usize,
    pub num_envs: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub stepsize: f64,
    pub dropout_stepsize: f64,
    pub hidden: Vec<usize>,
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub normalize_obs: bool,
    pub normalize_advantages: bool,
    pub value_coef: f64,
    pub value_clip: f64,
    pub record_wallclock: bool,
    pub parallel_seeds: bool,
    pub dump_trajectories: bool,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: EnvKind::Pendulum,
            variant: Variant::Dense,
            episode_horizon: None,
            mode: ExplorationMode::Nadpex(DropoutKind::Gaussian),
            dropout_rate: 0.1,
            param_noise_sigma: 0.01,
            param_noise_adapt: true,
            param_noise_capacity: None,
            surrogate: SurrogateKind::Clip,
            beta: 0.0005,
            clip_epsilon: 0.2,
            batch_steps: 2048,
            num_envs: 2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 10,
            minibatches: 1,
            stepsize: 3e-4,
            dropout_stepsize: 3e-4,
            hidden: vec![64, 64],
            seeds: vec![1, 2, 3, 4, 5],
            total_steps: 300_000,
            normalize_obs: true,
            normalize_advantages: true,
            value_coef: 0.5,
            value_clip: 0.2,
            record_wallclock: false,
            parallel_seeds: false,
            dump_trajectories: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "env",
    "variant",
    "episode_horizon",
    "mode",
    "dropout_kind",
    "dropout_rate",
    "param_noise_sigma",
    "param_noise_adapt",
    "param_noise_capacity",
    "surrogate",
    "beta",
    "clip_epsilon",
    "batch_steps",
    "num_envs",
    "gamma",
    "lambda",
    "epochs",
    "minibatches",
    "stepsize",
    "dropout_stepsize",
    "hidden",
    "seeds",
    "total_steps",
    "normalize_obs",
    "normalize_advantages",
    "value_coef",
    "value_clip",
    "record_wallclock",
    "parallel_seeds",
    "dump_trajectories",
    "output_dir",
];

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::config(key, v, "expected a finite number"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::config(key, v, "expected a non-negative integer"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, v, "expected true or false")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|_| Error::config(key, v, "expected a comma-separated list of integers"))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn horizon(&self) -> usize {
        self.episode_horizon.unwrap_or_else(|| self.variant.default_horizon())
    }

    pub fn surrogate_spec(&self) -> Surrogate {
        match self.surrogate {
            SurrogateKind::Clip => Surrogate::Clip {
                epsilon: self.clip_epsilon,
            },
            SurrogateKind::Kl => Surrogate::Kl { beta: self.beta },
        }
    }

    /// Number of collect/update iterations implied by `total_steps`.
    pub fn iterations(&self) -> usize {
        self.total_steps / self.batch_steps.max(1)
    }

    /// Set one key from its textual value. Dropout kind is carried by
    /// `mode`, so `dropout_kind` may be set before or after it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "env" => {
                self.env = EnvKind::parse(v).ok_or_else(|| Error::config(key, v, "expected mountaincar or pendulum"))?
            }
            "variant" => {
                self.variant = Variant::parse(v).ok_or_else(|| Error::config(key, v, "expected dense or sparse"))?
            }
            "episode_horizon" => {
                self.episode_horizon = if v == "auto" { None } else { Some(parse_usize(key, v)?) }
            }
            "mode" => {
                let kind = self.mode.dropout_kind().unwrap_or(DropoutKind::Gaussian);
                self.mode = match v {
                    "actionnoise" => ExplorationMode::ActionNoiseOnly,
                    "nadpex" => ExplorationMode::Nadpex(kind),
                    "bootstrap" => ExplorationMode::Bootstrap(kind),
                    "paramnoise" => ExplorationMode::ParameterNoise,
                    _ => {
                        return Err(Error::config(
                            key,
                            v,
                            "expected actionnoise, nadpex, bootstrap or paramnoise",
                        ))
                    }
                }
            }
            "dropout_kind" => {
                let kind = match v {
                    "gaussian" => DropoutKind::Gaussian,
                    "bernoulli" => DropoutKind::Bernoulli,
                    _ => return Err(Error::config(key, v, "expected gaussian or bernoulli")),
                };
                self.mode = match self.mode {
                    ExplorationMode::Nadpex(_) => ExplorationMode::Nadpex(kind),
                    ExplorationMode::Bootstrap(_) => ExplorationMode::Bootstrap(kind),
                    other => other,
                };
            }
            "dropout_rate" => self.dropout_rate = parse_f64(key, v)?,
            "param_noise_sigma" => self.param_noise_sigma = parse_f64(key, v)?,
            "param_noise_adapt" => self.param_noise_adapt = parse_bool(key, v)?,
            "param_noise_capacity" => {
                self.param_noise_capacity = if v == "none" { None } else { Some(parse_usize(key, v)?) }
            }
            "surrogate" => {
                self.surrogate = match v {
                    "clip" => SurrogateKind::Clip,
                    "kl" => SurrogateKind::Kl,
                    _ => return Err(Error::config(key, v, "expected clip or kl")),
                }
            }
            "beta" => self.beta = parse_f64(key, v)?,
            "clip_epsilon" => self.clip_epsilon = parse_f64(key, v)?,
            "batch_steps" => self.batch_steps = parse_usize(key, v)?,
            "num_envs" => self.num_envs = parse_usize(key, v)?,
            "gamma" => self.gamma = parse_f64(key, v)?,
            "lambda" => self.lambda = parse_f64(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "minibatches" => self.minibatches = parse_usize(key, v)?,
            "stepsize" => self.stepsize = parse_f64(key, v)?,
            "dropout_stepsize" => self.dropout_stepsize = parse_f64(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "total_steps" => self.total_steps = parse_usize(key, v)?,
            "normalize_obs" => self.normalize_obs = parse_bool(key, v)?,
            "normalize_advantages" => self.normalize_advantages = parse_bool(key, v)?,
            "value_coef" => self.value_coef = parse_f64(key, v)?,
            "value_clip" => self.value_clip = parse_f64(key, v)?,
            "record_wallclock" => self.record_wallclock = parse_bool(key, v)?,
            "parallel_seeds" => self.parallel_seeds = parse_bool(key, v)?,
            "dump_trajectories" => self.dump_trajectories = parse_bool(key, v)?,
            "output_dir" => {
                if v.is_empty() {
                    return Err(Error::config(key, v, "expected a path"));
                }
                self.output_dir = PathBuf::from(v)
            }
            _ => return Err(Error::config(key, v, format!("unknown key; valid keys: {}", KEYS.join(", ")))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, x: f64, lo: f64, hi: f64, what: &str| -> Result<()> {
            if x < lo || x > hi {
                Err(Error::config(key, format!("{x}"), format!("must lie in {what}")))
            } else {
                Ok(())
            }
        };
        range("dropout_rate", self.dropout_rate, RATE_MIN, RATE_MAX, "[0.005, 0.5]")?;
        range("param_noise_sigma", self.param_noise_sigma, 0.0, f64::INFINITY, "[0, inf)")?;
        range("beta", self.beta, 0.0, f64::INFINITY, "[0, inf)")?;
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("clip_epsilon", format!("{}", self.clip_epsilon), "must lie in (0, 1)"));
        }
        range("gamma", self.gamma, 0.0, 1.0, "[0, 1]")?;
        range("lambda", self.lambda, 0.0, 1.0, "[0, 1]")?;
        if !(self.stepsize > 0.0) {
            return Err(Error::config("stepsize", format!("{}", self.stepsize), "must be positive"));
        }
        if !(self.dropout_stepsize >= 0.0) {
            return Err(Error::config(
                "dropout_stepsize",
                format!("{}", self.dropout_stepsize),
                "must be non-negative",
            ));
        }
        range("value_coef", self.value_coef, 0.0, f64::INFINITY, "[0, inf)")?;
        range("value_clip", self.value_clip, 0.0, f64::INFINITY, "[0, inf)")?;
        let positive = [
            ("batch_steps", self.batch_steps),
            ("num_envs", self.num_envs),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
        ];
        for (key, x) in positive {
            if x == 0 {
                return Err(Error::config(key, "0", "must be at least 1"));
            }
        }
        if self.minibatches > self.batch_steps {
            return Err(Error::config(
                "minibatches",
                self.minibatches.to_string(),
                format!("must not exceed batch_steps ({})", self.batch_steps),
            ));
        }
        if self.episode_horizon == Some(0) {
            return Err(Error::config("episode_horizon", "0", "must be at least 1 or auto"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", join(&self.hidden), "need at least one positive width"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "", "need at least one seed"));
        }
        Ok(())
    }

    /// Resolved config in the file format; parses back to `self`.
    pub fn echo(&self) -> String {
        let kind = self.mode.dropout_kind().unwrap_or(DropoutKind::Gaussian);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("env", self.env.name().into());
        kv("variant", self.variant.name().into());
        kv(
            "episode_horizon",
            self.episode_horizon.map_or("auto".into(), |h| h.to_string()),
        );
        kv("mode", self.mode.name().into());
        kv("dropout_kind", kind.name().into());
        kv("dropout_rate", format!("{:?}", self.dropout_rate));
        kv("param_noise_sigma", format!("{:?}", self.param_noise_sigma));
        kv("param_noise_adapt", self.param_noise_adapt.to_string());
        kv(
            "param_noise_capacity",
            self.param_noise_capacity.map_or("none".into(), |c| c.to_string()),
        );
        kv(
            "surrogate",
            match self.surrogate {
                SurrogateKind::Clip => "clip",
                SurrogateKind::Kl => "kl",
            }
            .into(),
        );
        kv("beta", format!("{:?}", self.beta));
        kv("clip_epsilon", format!("{:?}", self.clip_epsilon));
        kv("batch_steps", self.batch_steps.to_string());
        kv("num_envs", self.num_envs.to_string());
        kv("gamma", format!("{:?}", self.gamma));
        kv("lambda", format!("{:?}", self.lambda));
        kv("epochs", self.epochs.to_string());
        kv("minibatches", self.minibatches.to_string());
        kv("stepsize", format!("{:?}", self.stepsize));
        kv("dropout_stepsize", format!("{:?}", self.dropout_stepsize));
        kv("hidden", join(&self.hidden));
        kv("seeds", join(&self.seeds));
        kv("total_steps", self.total_steps.to_string());
        kv("normalize_obs", self.normalize_obs.to_string());
        kv("normalize_advantages", self.normalize_advantages.to_string());
        kv("value_coef", format!("{:?}", self.value_coef));
        kv("value_clip", format!("{:?}", self.value_clip));
        kv("record_wallclock", self.record_wallclock.to_string());
        kv("parallel_seeds", self.parallel_seeds.to_string());
        kv("dump_trajectories", self.dump_trajectories.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        s
    }
}

/// Parse `key = value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", lineno + 1), line, "expected key = value"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Apply a config document and then `key=value` overrides on top of `base`.
pub fn parse_config(base: TrainConfig, text: &str, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = base;
    let pairs = parse_pairs(text)?;
    // `dropout_kind` may precede `mode`; apply it after the mode is known.
    let apply = |cfg: &mut TrainConfig, pairs: &[(String, String)]| -> Result<()> {
        let mut kind = None;
        for (k, v) in pairs {
            if k == "dropout_kind" {
                kind = Some(v.clone());
            } else {
                cfg.set(k, v)?;
            }
        }
        if let Some(v) = kind {
            cfg.set("dropout_kind", &v)?;
        }
        Ok(())
    };
    apply(&mut cfg, &pairs)?;
    apply(&mut cfg, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Every named preset.
pub const PRESETS: &[&str] = &[
    "standard-a",
    "standard-b",
    "standard-c",
    "sparse-a",
    "sparse-b",
    "sparse-c",
    "paramnoise-a",
    "paramnoise-b",
    "paramnoise-c",
    "bootstrap",
    "actionnoise",
];

/// Configuration of one experimental arm, five seeds.
pub fn preset(name: &str) -> Result<TrainConfig> {
    let rate = |c: char| match c {
        'a' => 0.01,
        'b' => 0.1,
        _ => 0.3,
    };
    let sigma = |c: char| match c {
        'a' => 0.001,
        'b' => 0.01,
        _ => 0.05,
    };
    let mut cfg = TrainConfig::default();
    match name {
        "standard-a" | "standard-b" | "standard-c" => {
            cfg.mode = ExplorationMode::Nadpex(DropoutKind::Gaussian);
            cfg.dropout_rate = rate(name.chars().last().unwrap_or('a'));
        }
        "sparse-a" | "sparse-b" | "sparse-c" => {
            cfg.env = EnvKind::MountainCar;
            cfg.variant = Variant::Sparse;
            cfg.episode_horizon = Some(500);
            cfg.mode = ExplorationMode::Nadpex(DropoutKind::Gaussian);
            cfg.dropout_rate = rate(name.chars().last().unwrap_or('a'));
        }
        "paramnoise-a" | "paramnoise-b" | "paramnoise-c" => {
            cfg.mode = ExplorationMode::ParameterNoise;
            cfg.param_noise_sigma = sigma(name.chars().last().unwrap_or('a'));
        }
        "bootstrap" => {
            cfg.mode = ExplorationMode::Bootstrap(DropoutKind::Gaussian);
        }
        "actionnoise" => {
            cfg.mode = ExplorationMode::ActionNoiseOnly;
        }
        _ => {
            return Err(Error::config(
                "preset",
                name,
                format!("unknown preset; valid presets: {}", PRESETS.join(", ")),
            ))
        }
    }
    cfg.output_dir = PathBuf::from(format!("runs/{name}"));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let cfg = parse_config(TrainConfig::default(), "", &[]).unwrap();
        assert_eq!(cfg.batch_steps, 2048);
        assert_eq!(cfg.stepsize, 3e-4);
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.minibatches, 1);
        assert_eq!(cfg.gamma, 0.99);
        assert_eq!(cfg.lambda, 0.95);
        assert_eq!(cfg.clip_epsilon, 0.2);
        assert_eq!(cfg.hidden, vec![64, 64]);
        assert_eq!(cfg.beta, 0.0005);
    }

    #[test]
    fn rejects_out_of_range_rate() {
        let err = parse_config(TrainConfig::default(), "dropout_rate = 0.7", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dropout_rate") && msg.contains("0.7") && msg.contains("[0.005, 0.5]"), "{msg}");
    }

    #[test]
    fn rejects_unknown_key() {
        assert!(parse_config(TrainConfig::default(), "learning_rate = 1", &[]).is_err());
    }

    #[test]
    fn override_reflected_in_echo() {
        let cfg = parse_config(
            TrainConfig::default(),
            "# comment\nseeds = 1,2\n",
            &[("seeds".into(), "7,8,9".into())],
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![7, 8, 9]);
        assert!(cfg.echo().contains("seeds = 7,8,9"));
    }

    #[test]
    fn kind_before_mode() {
        let cfg = parse_config(TrainConfig::default(), "dropout_kind = bernoulli\nmode = bootstrap", &[]).unwrap();
        assert_eq!(cfg.mode, ExplorationMode::Bootstrap(DropoutKind::Bernoulli));
    }

    #[test]
    fn presets() {
        let s = preset("sparse-b").unwrap();
        assert_eq!(s.env, EnvKind::MountainCar);
        assert_eq!(s.variant, Variant::Sparse);
        assert_eq!(s.mode, ExplorationMode::Nadpex(DropoutKind::Gaussian));
        assert_eq!(s.dropout_rate, 0.1);
        assert_eq!(s.horizon(), 500);
        assert_eq!(preset("paramnoise-b").unwrap().param_noise_sigma, 0.01);
        assert!(preset("bootstrap").unwrap().mode.phi_frozen());
        assert!(preset("nope").is_err());
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            assert_eq!(cfg.seeds.len(), 5);
            cfg.validate().unwrap();
        }
    }
}
