//! Run configuration: flat `section.key = value` text.
//!
//! Relative paths are resolved against the directory holding the config file.
//! The resolved configuration is rendered back in the same format so every
//! output directory records exactly what produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;

use crate::attention::Mode;
use crate::error::{Error, Result};
use crate::ingest::{default_onset, Biomarker, Normalizer};
use crate::model::{Ablation, ModelConfig};
use crate::synth::GeneratorConfig;
use crate::train::TrainConfig;
use crate::uncertainty::{DEFAULT_SAMPLES, DEFAULT_Z};

pub const SEED_ENV: &str = "BAYESMTR_SEED";
pub const RESOLVED_NAME: &str = "resolved_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Cohort CSV: written by `generate`, read by `ingest` and `train`.
    pub data: PathBuf,
    /// Ground-truth sidecar written by `generate`.
    pub truth: PathBuf,
    /// Directory for training, evaluation and prediction outputs.
    pub out: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub onset: NaiveDate,
    pub paths: Paths,
    pub synth: GeneratorConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub samples: usize,
    pub z: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            onset: default_onset(),
            paths: Paths {
                data: PathBuf::from("cohort.csv"),
                truth: PathBuf::from("ground_truth.csv"),
                out: PathBuf::from("out"),
                checkpoint: PathBuf::from("checkpoint.json"),
            },
            synth: GeneratorConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            normalizer: Normalizer::default(),
            samples: DEFAULT_SAMPLES,
            z: DEFAULT_Z,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into().map_err(|v: Vec<f64>| Error::Config(format!("`{key}`: expected {N} values, got {}", v.len())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Parses config text. `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for p in [&mut cfg.paths.data, &mut cfg.paths.truth, &mut cfg.paths.out, &mut cfg.paths.checkpoint] {
            *p = base.join(&*p);
        }
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)));
            }
            cfg.set(key, value, base).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let (s, m, t) = (&mut self.synth, &mut self.model, &mut self.train);
        match key {
            "seed" => self.seed = Some(parse(key, v)?),
            "onset" => self.onset = parse(key, v)?,
            "paths.data" => self.paths.data = path(v),
            "paths.truth" => self.paths.truth = path(v),
            "paths.out" => self.paths.out = path(v),
            "paths.checkpoint" => self.paths.checkpoint = path(v),

            "synth.n_patients" => s.n_patients = parse(key, v)?,
            "synth.visits_min" => s.visits_min = parse(key, v)?,
            "synth.visits_max" => s.visits_max = parse(key, v)?,
            "synth.visit_p" => s.visit_p = parse(key, v)?,
            "synth.post_fraction" => s.post_fraction = parse(key, v)?,
            "synth.population_mean" => s.population_mean = parse_array(key, v)?,
            "synth.intercept_std" => s.intercept_std = parse(key, v)?,
            "synth.drift_std" => s.drift_std = parse(key, v)?,
            "synth.base_std" => s.base_std = parse(key, v)?,
            "synth.hetero_slope" => s.hetero_slope = parse(key, v)?,
            "synth.shift" => s.shift = parse_array(key, v)?,
            "synth.correlation" => {
                let flat: [f64; 16] = parse_array(key, v)?;
                s.correlation = std::array::from_fn(|r| std::array::from_fn(|c| flat[4 * r + c]));
            }

            "model.n_heads" => m.attention.n_heads = parse(key, v)?,
            "model.d_model" => m.attention.d_model = parse(key, v)?,
            "model.d_k" => m.attention.d_k = parse(key, v)?,
            "model.d_v" => m.attention.d_v = parse(key, v)?,
            "model.mode" => {
                m.attention.mode = match v {
                    "stochastic" => Mode::Stochastic,
                    "deterministic" => Mode::Deterministic,
                    _ => return Err(Error::Config(format!("`{key}`: expected stochastic or deterministic"))),
                }
            }
            "model.variational_qv" => m.attention.variational_qv = parse_bool(key, v)?,
            "model.n_layers" => m.n_layers = parse(key, v)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, v)?,
            "model.d_latent" => m.d_latent = parse(key, v)?,
            "model.max_visits" => m.max_visits = parse(key, v)?,
            "model.trunk" => m.trunk = parse_list(key, v)?,
            "model.init_log_sigma" => m.init_log_sigma = parse(key, v)?,

            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.lambda_kl" => t.lambda_kl = parse(key, v)?,
            "train.mc_samples" => t.mc_samples = parse(key, v)?,
            "train.ablation" => t.ablation = parse::<Ablation>(key, v)?,
            "train.aleatoric_head" => t.aleatoric_head = parse_bool(key, v)?,

            "ingest.log_transform" => {
                let mut flags = [false; 4];
                for name in v.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                    let b: Biomarker = parse(key, name)?;
                    flags[b.index()] = true;
                }
                self.normalizer.log_transform = flags;
            }
            "uncertainty.samples" => self.samples = parse(key, v)?,
            "uncertainty.z" => self.z = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.samples < 2 {
            return Err(Error::Config("uncertainty.samples must be at least 2".into()));
        }
        if !(self.z > 0.0) {
            return Err(Error::Config("uncertainty.z must be positive".into()));
        }
        Ok(())
    }

    /// `--seed` beats the config file, which beats the environment.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        let seed = match (flag, self.seed, env) {
            (Some(s), _, _) | (None, Some(s), _) => s,
            (None, None, Some(e)) => e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse `{e}`")))?,
            (None, None, None) => {
                return Err(Error::Config(format!("no seed: pass --seed, set `seed` in the config or {SEED_ENV}")))
            }
        };
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.train.seed = seed;
        Ok(seed)
    }

    /// Every setting, including defaults, in parseable form.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let (s, m, t, a) = (&self.synth, &self.model, &self.train, &self.model.attention);
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        if let Some(seed) = self.seed {
            kv("seed", seed.to_string());
        }
        kv("onset", self.onset.to_string());
        kv("paths.data", self.paths.data.display().to_string());
        kv("paths.truth", self.paths.truth.display().to_string());
        kv("paths.out", self.paths.out.display().to_string());
        kv("paths.checkpoint", self.paths.checkpoint.display().to_string());
        kv("synth.n_patients", s.n_patients.to_string());
        kv("synth.visits_min", s.visits_min.to_string());
        kv("synth.visits_max", s.visits_max.to_string());
        kv("synth.visit_p", s.visit_p.to_string());
        kv("synth.post_fraction", s.post_fraction.to_string());
        kv("synth.population_mean", join(&s.population_mean));
        kv("synth.intercept_std", s.intercept_std.to_string());
        kv("synth.drift_std", s.drift_std.to_string());
        kv("synth.base_std", s.base_std.to_string());
        kv("synth.hetero_slope", s.hetero_slope.to_string());
        kv("synth.shift", join(&s.shift));
        kv("synth.correlation", join(&s.correlation.concat()));
        kv("model.n_heads", a.n_heads.to_string());
        kv("model.d_model", a.d_model.to_string());
        kv("model.d_k", a.d_k.to_string());
        kv("model.d_v", a.d_v.to_string());
        kv(
            "model.mode",
            match a.mode {
                Mode::Stochastic => "stochastic",
                Mode::Deterministic => "deterministic",
            }
            .into(),
        );
        kv("model.variational_qv", a.variational_qv.to_string());
        kv("model.n_layers", m.n_layers.to_string());
        kv("model.ffn_mult", m.ffn_mult.to_string());
        kv("model.d_latent", m.d_latent.to_string());
        kv("model.max_visits", m.max_visits.to_string());
        kv("model.trunk", join(&m.trunk));
        kv("model.init_log_sigma", m.init_log_sigma.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.lambda_kl", t.lambda_kl.to_string());
        kv("train.mc_samples", t.mc_samples.to_string());
        kv("train.ablation", t.ablation.as_str().into());
        kv("train.aleatoric_head", t.aleatoric_head.to_string());
        let logs: Vec<&str> = Biomarker::ALL
            .iter()
            .filter(|b| self.normalizer.log_transform[b.index()])
            .map(|b| b.column())
            .collect();
        kv("ingest.log_transform", logs.join(", "));
        kv("uncertainty.samples", self.samples.to_string());
        kv("uncertainty.z", self.z.to_string());
        o
    }
}
