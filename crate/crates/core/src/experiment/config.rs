//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_params, DataParams, FeatureBasis};
use crate::error::{Error, Result};
use crate::net::TrainConfig;
use crate::rng::{substream, Stream};

/// Every accepted key, in canonical order.
pub const KEYS: [&str; 22] = [
    "name",
    "d",
    "P",
    "P0",
    "alpha1",
    "alpha2",
    "sigma",
    "basis",
    "N",
    "m",
    "eta",
    "etaE",
    "steps",
    "head",
    "seed",
    "log_every",
    "repeats",
    "eval_samples",
    "corr_samples",
    "emit_population",
    "output_dir",
    "threads",
];

const REQUIRED: [&str; 11] = ["d", "P", "P0", "alpha1", "alpha2", "sigma", "N", "m", "eta", "etaE", "steps"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Canonical,
    Random,
}

impl From<Basis> for FeatureBasis {
    fn from(b: Basis) -> Self {
        match b {
            Basis::Canonical => FeatureBasis::Canonical,
            Basis::Random => FeatureBasis::Random,
        }
    }
}

impl FromStr for Basis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "canonical" => Ok(Basis::Canonical),
            "random" => Ok(Basis::Random),
            other => Err(format!("expected `canonical` or `random`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub d: usize,
    pub patches: usize,
    pub feature_patches: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub sigma: f64,
    pub basis: Basis,
    pub batch_size: usize,
    pub m: usize,
    pub eta: f64,
    pub eta_head: f64,
    pub steps: usize,
    pub train_head: bool,
    /// First seed; repeat `r` uses `seed + r`.
    pub seed: u64,
    pub log_every: usize,
    pub repeats: usize,
    /// Pairs in the held-out batch used for final losses.
    pub eval_samples: usize,
    /// Unaugmented samples for the final correlation matrix.
    pub corr_samples: usize,
    /// Log population quantities next to the trajectory (m = 2 only).
    pub emit_population: bool,
    pub output_dir: PathBuf,
    /// Worker threads for seeds; 0 defers to `NCSSL_THREADS` or rayon's default.
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.eval_samples < 2 || self.corr_samples < 2 {
            return Err(Error::Config("eval_samples and corr_samples must be at least 2".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("name `{}` must be a plain file stem", self.name)));
        }
        let mut warnings = self.train_config(self.seed).validate().map_err(to_config)?;
        // Data constraints only; the basis draw itself is cheap.
        self.data_params(self.seed).map_err(to_config)?;
        if self.emit_population && self.m != 2 {
            warnings.push(format!("emit_population ignored for m = {}", self.m));
        }
        Ok(warnings)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            eta_head: self.eta_head,
            batch_size: self.batch_size,
            steps: self.steps,
            train_head: self.train_head,
            m: self.m,
            seed,
            log_every: self.log_every,
        }
    }

    /// Data parameters for one run. A random basis is drawn from the run's
    /// misc substream.
    pub fn data_params(&self, seed: u64) -> Result<DataParams> {
        let mut rng = substream(seed, Stream::Misc);
        make_params(
            self.d,
            self.patches,
            self.feature_patches,
            self.alpha1,
            self.alpha2,
            self.sigma,
            self.basis.into(),
            &mut rng,
        )
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeats as u64).map(move |r| self.seed + r)
    }

    /// Canonical `key=value` lines for every key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "name" => self.name.clone(),
            "d" => self.d.to_string(),
            "P" => self.patches.to_string(),
            "P0" => self.feature_patches.to_string(),
            "alpha1" => self.alpha1.to_string(),
            "alpha2" => self.alpha2.to_string(),
            "sigma" => self.sigma.to_string(),
            "basis" => match self.basis {
                Basis::Canonical => "canonical".into(),
                Basis::Random => "random".into(),
            },
            "N" => self.batch_size.to_string(),
            "m" => self.m.to_string(),
            "eta" => self.eta.to_string(),
            "etaE" => self.eta_head.to_string(),
            "steps" => self.steps.to_string(),
            "head" => self.train_head.to_string(),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "repeats" => self.repeats.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "corr_samples" => self.corr_samples.to_string(),
            "emit_population" => self.emit_population.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "threads" => self.threads.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// SHA-256 over every key that can change run outputs. The name, seed,
    /// output directory, thread count and repeat count are left out so one
    /// hash covers every seed of an experiment.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for key in KEYS {
            if matches!(key, "seed" | "output_dir" | "threads" | "repeats" | "name") {
                continue;
            }
            h.update(format!("{key}={}\n", self.value_of(key)).as_bytes());
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidParameter(msg) => Error::Config(msg),
        other => other,
    }
}

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    Line(PathBuf, usize),
    Flag,
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
}

/// Raw key/value layer. File values are loaded first and flags override.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {lineno}: {message}"),
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(parse_err(format!("unknown key `{key}`")));
            }
            if raw.entries.contains_key(key) {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
            raw.entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    origin: Origin::Line(path.to_path_buf(), lineno),
                },
            );
        }
        Ok(raw)
    }

    /// Applies a `--key value` override.
    pub fn set_flag(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown flag --{key}")));
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.into(),
                origin: Origin::Flag,
            },
        );
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str, default: Option<T>) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let Some(entry) = self.entries.get(key) else {
            return default.ok_or_else(|| Error::Config(format!("missing required key `{key}`")));
        };
        entry.value.parse::<T>().map_err(|e| {
            let message = format!("key `{key}`: cannot parse `{}`: {e}", entry.value);
            match &entry.origin {
                Origin::Line(path, n) => Error::Parse {
                    path: path.clone(),
                    message: format!("line {n}: {message}"),
                },
                Origin::Flag => Error::Config(format!("flag --{key}: cannot parse `{}`: {e}", entry.value)),
            }
        })
    }

    /// Resolves defaults and validates. Returns the config and any warnings.
    pub fn build(&self) -> Result<(ExperimentConfig, Vec<String>)> {
        for key in REQUIRED {
            if !self.entries.contains_key(key) {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }
        let config = ExperimentConfig {
            name: self.get("name", Some("run".to_string()))?,
            d: self.get("d", None)?,
            patches: self.get("P", None)?,
            feature_patches: self.get("P0", None)?,
            alpha1: self.get("alpha1", None)?,
            alpha2: self.get("alpha2", None)?,
            sigma: self.get("sigma", None)?,
            basis: self.get("basis", Some(Basis::Canonical))?,
            batch_size: self.get("N", None)?,
            m: self.get("m", None)?,
            eta: self.get("eta", None)?,
            eta_head: self.get("etaE", None)?,
            steps: self.get("steps", None)?,
            train_head: self.get("head", Some(true))?,
            seed: self.get("seed", Some(0))?,
            log_every: self.get("log_every", Some(50))?,
            repeats: self.get("repeats", Some(1))?,
            eval_samples: self.get("eval_samples", Some(4096))?,
            corr_samples: self.get("corr_samples", Some(4096))?,
            emit_population: self.get("emit_population", Some(false))?,
            output_dir: self.get("output_dir", Some(PathBuf::from("out")))?,
            threads: self.get("threads", Some(0))?,
        };
        let warnings = config.validate()?;
        Ok((config, warnings))
    }
}

/// Loads an optional file, applies flag overrides and validates.
pub fn parse_config(path: Option<&Path>, flags: &[(String, String)]) -> Result<(ExperimentConfig, Vec<String>)> {
    let mut raw = match path {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    for (k, v) in flags {
        raw.set_flag(k, v.clone())?;
    }
    raw.build()
}
