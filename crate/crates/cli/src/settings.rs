//! Resolves a `TrainConfig` from defaults, a preset, a `key = value` file and
//! command-line flags, in increasing order of precedence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rkdea::objectives::TemperatureMode;
use rkdea::trainer::{Phase, Preset, TrainConfig};
use rkdea::{Error, Result};

/// Values read from a config file, keyed by flag name without dashes.
#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            let key = key.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(parse_err(format!("unknown key `{key}`")));
            }
            if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value `{v}` for `{key}`: {e}"))),
        }
    }
}

const KEYS: &[&str] = &[
    "preset",
    "epochs",
    "lr",
    "gamma1",
    "gamma2",
    "k1",
    "k2",
    "refresh",
    "dim",
    "layers",
    "distill",
    "fixed_beta",
    "kd_batch",
    "rng",
    "precision",
    "train_features",
    "normalize_entities",
    "init_from_teacher",
    "eval_every",
];

/// Every tunable as an optional override. Boolean switches are `Some` only
/// when explicitly set.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub refresh: Option<usize>,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub distill: Option<bool>,
    pub fixed_beta: Option<f64>,
    pub kd_batch: Option<usize>,
    pub rng: Option<u64>,
    pub precision: Option<rkdea::trainer::Precision>,
    pub train_features: Option<bool>,
    pub normalize_entities: Option<bool>,
    pub init_from_teacher: Option<bool>,
    pub eval_every: Option<usize>,
}

impl Overrides {
    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        Ok(Overrides {
            preset: file.get::<String>("preset")?.map(|s| s.parse()).transpose()?,
            epochs: file.get("epochs")?,
            lr: file.get("lr")?,
            gamma1: file.get("gamma1")?,
            gamma2: file.get("gamma2")?,
            k1: file.get("k1")?,
            k2: file.get("k2")?,
            refresh: file.get("refresh")?,
            dim: file.get("dim")?,
            layers: file.get("layers")?,
            distill: file.get("distill")?,
            fixed_beta: file.get("fixed_beta")?,
            kd_batch: file.get("kd_batch")?,
            rng: file.get("rng")?,
            precision: file.get::<String>("precision")?.map(|s| s.parse()).transpose()?,
            train_features: file.get("train_features")?,
            normalize_entities: file.get("normalize_entities")?,
            init_from_teacher: file.get("init_from_teacher")?,
            eval_every: file.get("eval_every")?,
        })
    }

    /// Fields set in `self` win over those in `lower`.
    pub fn over(self, lower: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => { Overrides { $($f: self.$f.or(lower.$f)),* } };
        }
        pick!(
            preset, epochs, lr, gamma1, gamma2, k1, k2, refresh, dim, layers, distill, fixed_beta, kd_batch, rng,
            precision, train_features, normalize_entities, init_from_teacher, eval_every
        )
    }

    pub fn resolve(&self, phase: Phase) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::for_phase(phase);
        if let Some(p) = self.preset {
            cfg.apply_preset(p);
        }
        macro_rules! set {
            ($($src:ident => $dst:ident),*) => { $(if let Some(v) = self.$src { cfg.$dst = v; })* };
        }
        set!(
            epochs => epochs, lr => lr, gamma1 => gamma1, gamma2 => gamma2, k1 => k1, k2 => k2,
            refresh => refresh_interval, dim => dim, layers => layers, distill => distill, rng => rng_seed,
            precision => precision, train_features => train_features,
            normalize_entities => normalize_entities, init_from_teacher => init_from_teacher
        );
        if let Some(b) = self.fixed_beta {
            cfg.temperature = TemperatureMode::Fixed(b);
        }
        if self.kd_batch.is_some() {
            cfg.kd_batch = self.kd_batch;
        }
        if self.eval_every.is_some() {
            cfg.eval_every = self.eval_every;
        }
        if phase == Phase::Teacher && (self.fixed_beta.is_some() || self.distill == Some(false)) {
            return Err(Error::Config("distillation settings apply to the student phase only".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
