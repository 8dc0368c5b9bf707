//! Plain-text `key = value` experiment configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::files;
use crate::model::ModelConfig;
use crate::synth::WorldConfig;
use crate::trainer::{Mode, TrainConfig};

pub const SEED_ENV: &str = "GEEP_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub pronoun_skew: f64,
    pub activity_skew: f64,
    pub base_sentences: usize,
    pub phase_sentences: usize,
    pub general_sentences: usize,
    pub probe_sentences: usize,

    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub min_freq: usize,

    pub batch_size: usize,
    pub mask_prob: f64,
    pub base_steps: usize,
    pub base_lr: f64,
    pub steps: usize,
    pub geep_lr: f64,
    pub sppa_lr: f64,
    pub prompt_std: f64,
    pub log_every: usize,
    /// Second-phase runs of the full pipeline, by run name.
    pub runs: Vec<String>,

    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub professions: Option<PathBuf>,
    pub swaps: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            pronoun_skew: 0.9,
            activity_skew: 0.7,
            base_sentences: 50_000,
            phase_sentences: 20_000,
            general_sentences: 200,
            probe_sentences: 100,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            min_freq: 1,
            batch_size: 32,
            mask_prob: 0.15,
            base_steps: 5000,
            base_lr: Mode::Base.default_lr(),
            steps: 2000,
            geep_lr: Mode::Geep.default_lr(),
            sppa_lr: Mode::Sppa.default_lr(),
            prompt_std: crate::model::DEFAULT_PROMPT_STD,
            log_every: 100,
            runs: ["sppa", "geep", "sppa-npe", "sppa-no-gn", "geep-no-gn"]
                .map(String::from)
                .to_vec(),
            corpus: None,
            dataset: None,
            professions: None,
            swaps: None,
            templates: None,
        }
    }
}

const KEYS: [&str; 30] = [
    "seed",
    "pronoun_skew",
    "activity_skew",
    "base_sentences",
    "phase_sentences",
    "general_sentences",
    "probe_sentences",
    "d_model",
    "layers",
    "heads",
    "d_ff",
    "max_seq_len",
    "min_freq",
    "batch_size",
    "mask_prob",
    "base_steps",
    "base_lr",
    "steps",
    "geep_lr",
    "sppa_lr",
    "prompt_std",
    "log_every",
    "runs",
    "corpus",
    "dataset",
    "professions",
    "swaps",
    "templates",
    "vocab_size",
    "prompt_rows",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "pronoun_skew" => self.pronoun_skew = num(key, v)?,
            "activity_skew" => self.activity_skew = num(key, v)?,
            "base_sentences" => self.base_sentences = num(key, v)?,
            "phase_sentences" => self.phase_sentences = num(key, v)?,
            "general_sentences" => self.general_sentences = num(key, v)?,
            "probe_sentences" => self.probe_sentences = num(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "d_ff" => self.d_ff = num(key, v)?,
            "max_seq_len" => self.max_seq_len = num(key, v)?,
            "min_freq" => self.min_freq = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "mask_prob" => self.mask_prob = num(key, v)?,
            "base_steps" => self.base_steps = num(key, v)?,
            "base_lr" => self.base_lr = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "geep_lr" => self.geep_lr = num(key, v)?,
            "sppa_lr" => self.sppa_lr = num(key, v)?,
            "prompt_std" => self.prompt_std = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "runs" => {
                self.runs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "corpus" => self.corpus = path(v),
            "dataset" => self.dataset = path(v),
            "professions" => self.professions = path(v),
            "swaps" => self.swaps = path(v),
            "templates" => self.templates = path(v),
            // Derived from data; accepted so a resolved config reads back.
            "vocab_size" | "prompt_rows" => {}
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&files::read_text(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world().validate()?;
        self.model_config(10).validate()?;
        for mode in Mode::ALL {
            self.train_config(mode, true).validate()?;
        }
        for run in &self.runs {
            parse_run_name(run)?;
        }
        if self.base_sentences == 0 || self.phase_sentences == 0 || self.general_sentences == 0 || self.probe_sentences == 0 {
            return Err(Error::Config("sentence counts must be positive".into()));
        }
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            pronoun_skew: self.pronoun_skew,
            activity_skew: self.activity_skew,
            ..WorldConfig::default()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            prompt_rows: 0,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn train_config(&self, mode: Mode, neutralized: bool) -> TrainConfig {
        let (lr, steps) = match mode {
            Mode::Base => (self.base_lr, self.base_steps),
            Mode::Geep => (self.geep_lr, self.steps),
            Mode::Sppa | Mode::SppaNpe => (self.sppa_lr, self.steps),
        };
        TrainConfig {
            mode,
            neutralized,
            lr,
            steps,
            batch_size: self.batch_size,
            max_seq_len: self.max_seq_len,
            mask_prob: self.mask_prob,
            seed: self.seed,
            log_every: self.log_every,
            prompt_std: self.prompt_std,
            reset_prompts: false,
        }
    }

    /// Every key, one per line, in a fixed order. Parsing the output gives
    /// back the same configuration.
    pub fn resolved(&self, vocab_size: Option<usize>, prompt_rows: Option<usize>) -> String {
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        for key in KEYS {
            let value = match key {
                "seed" => self.seed.to_string(),
                "pronoun_skew" => self.pronoun_skew.to_string(),
                "activity_skew" => self.activity_skew.to_string(),
                "base_sentences" => self.base_sentences.to_string(),
                "phase_sentences" => self.phase_sentences.to_string(),
                "general_sentences" => self.general_sentences.to_string(),
                "probe_sentences" => self.probe_sentences.to_string(),
                "d_model" => self.d_model.to_string(),
                "layers" => self.layers.to_string(),
                "heads" => self.heads.to_string(),
                "d_ff" => self.d_ff.to_string(),
                "max_seq_len" => self.max_seq_len.to_string(),
                "min_freq" => self.min_freq.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "mask_prob" => self.mask_prob.to_string(),
                "base_steps" => self.base_steps.to_string(),
                "base_lr" => self.base_lr.to_string(),
                "steps" => self.steps.to_string(),
                "geep_lr" => self.geep_lr.to_string(),
                "sppa_lr" => self.sppa_lr.to_string(),
                "prompt_std" => self.prompt_std.to_string(),
                "log_every" => self.log_every.to_string(),
                "runs" => self.runs.join(","),
                "corpus" => p(&self.corpus),
                "dataset" => p(&self.dataset),
                "professions" => p(&self.professions),
                "swaps" => p(&self.swaps),
                "templates" => p(&self.templates),
                "vocab_size" => match vocab_size {
                    Some(v) => v.to_string(),
                    None => continue,
                },
                "prompt_rows" => match prompt_rows {
                    Some(v) => v.to_string(),
                    None => continue,
                },
                _ => unreachable!("every key is listed"),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

/// `geep-no-gn` → (Geep, false).
pub fn parse_run_name(name: &str) -> Result<(Mode, bool)> {
    let (mode, neutralized) = match name.strip_suffix("-no-gn") {
        Some(m) => (m, false),
        None => (name, true),
    };
    let mode: Mode = mode.parse().map_err(|_| Error::Config(format!("unknown run {name:?}")))?;
    if mode == Mode::Base {
        return Err(Error::Config("base is always run; list only second-phase runs".into()));
    }
    Ok((mode, neutralized))
}
