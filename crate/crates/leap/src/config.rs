//! Flat key-value run configuration.
//!
//! A config file is a TOML table of scalar (or integer-array) values, one
//! key per setting. `--set key=value` overrides apply on top; values are
//! parsed as TOML and fall back to plain strings. Unknown keys and keys
//! that do not apply to the selected mode are errors.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use leap_core::model::{FeatureFlags, LeapConfig};
use leap_core::train::{ScheduleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::analysis::{RenderFormat, DEFAULT_MIN_APPEAR};
use crate::bench::MIN_REPETITIONS;
use crate::error::{LeapError, Result};
use crate::text::DEFAULT_MIN_FREQ;
use crate::trainer::InferenceRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Leap,
    PlainLstm,
    PlainLstmSchedule,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Leap => "leap",
            Mode::PlainLstm => "plain_lstm",
            Mode::PlainLstmSchedule => "plain_lstm_schedule",
        }
    }

    pub fn skipping(self) -> bool {
        self == Mode::Leap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Csv,
    Synthetic,
}

/// Settings of the planted-keyword task used when `data = "synthetic"`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSettings {
    pub vocab: usize,
    pub length: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub data: DataSource,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub classes: usize,
    pub min_freq: usize,
    /// Share of the training file held out as dev set when no dev file is
    /// given.
    pub dev_fraction: f64,
    pub synthetic: SyntheticSettings,
    pub model: LeapConfig,
    pub train: TrainConfig,
    pub inference: InferenceRule,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub repetitions: usize,
    pub bench_docs: Option<usize>,
    pub top_n: usize,
    pub min_appear: usize,
    pub cases: usize,
    pub render_format: RenderFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = LeapConfig::standard(2, 2);
        model.vocab_size = 0;
        RunConfig {
            mode: Mode::Leap,
            data: DataSource::Csv,
            train_path: None,
            dev_path: None,
            test_path: None,
            embeddings_path: None,
            classes: 2,
            min_freq: DEFAULT_MIN_FREQ,
            dev_fraction: 0.1,
            synthetic: SyntheticSettings {
                vocab: 200,
                length: 100,
                train: 5000,
                dev: 500,
                test: 1000,
            },
            model,
            train: TrainConfig::default(),
            inference: InferenceRule::Sample { seed: 0 },
            seed: 0,
            threads: 1,
            out_dir: PathBuf::from("out"),
            repetitions: 5,
            bench_docs: None,
            top_n: 5,
            min_appear: DEFAULT_MIN_APPEAR,
            cases: 5,
            render_format: RenderFormat::Html,
        }
    }
}

/// Keys that only make sense with the skip pathway.
const LEAP_ONLY: &[&str] = &[
    "lambda",
    "r_target",
    "tau",
    "skip_hidden",
    "reverse_hidden",
    "kernel_widths",
    "filters_per_width",
    "use_cnn",
    "use_rnn_r",
    "use_follow",
    "use_preceding",
    "use_current",
    "inference_rule",
    "inference_seed",
];
/// Keys that only make sense with schedule training.
const SCHEDULE_ONLY: &[&str] = &["r_m", "beta", "index_base"];
/// Keys that only make sense with the CSV data source.
const CSV_ONLY: &[&str] = &["train_path", "dev_path", "test_path", "embeddings_path", "min_freq", "dev_fraction"];
const SYNTHETIC_ONLY: &[&str] = &["synthetic_vocab", "synthetic_length", "synthetic_train", "synthetic_dev", "synthetic_test"];

fn key_err(key: &str, message: impl Into<String>) -> LeapError {
    LeapError::config(key, message)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(key_err(key, format!("expected a number, got {v}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(key_err(key, format!("expected a non-negative integer, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| key_err(key, format!("expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| key_err(key, format!("expected a string, got {v}")))
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    let arr = v.as_array().ok_or_else(|| key_err(key, format!("expected an array, got {v}")))?;
    arr.iter().map(|x| as_usize(key, x)).collect()
}

/// Parses `key=value` with the value read as TOML, or as a bare string
/// when it is not valid TOML.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| LeapError::config(s, "override must look like key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Reads an optional file, applies overrides in order, and validates.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| LeapError::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| LeapError::config(p.display().to_string(), e.to_string()))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        Self::from_table(&table)
    }

    pub fn from_table(table: &Table) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // Mode and data source decide which other keys are allowed.
        if let Some(v) = table.get("mode") {
            cfg.set("mode", v)?;
        }
        if let Some(v) = table.get("data") {
            cfg.set("data", v)?;
        }
        let keys: BTreeSet<&str> = table.keys().map(String::as_str).collect();
        for key in &keys {
            cfg.check_applicable(key)?;
        }
        for (k, v) in table {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn check_applicable(&self, key: &str) -> Result<()> {
        let reject = |why: &str| Err(key_err(key, why.to_string()));
        if LEAP_ONLY.contains(&key) && !self.mode.skipping() {
            return reject(&format!("not used in mode {}", self.mode.as_str()));
        }
        if SCHEDULE_ONLY.contains(&key) && self.mode != Mode::PlainLstmSchedule {
            return reject(&format!("not used in mode {}", self.mode.as_str()));
        }
        if CSV_ONLY.contains(&key) && self.data != DataSource::Csv {
            return reject("not used with synthetic data");
        }
        if SYNTHETIC_ONLY.contains(&key) && self.data != DataSource::Synthetic {
            return reject("only used with data = \"synthetic\"");
        }
        if key == "classes" && self.data == DataSource::Synthetic {
            return reject("the synthetic task has 2 classes");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let path = |v: &Value| as_str(key, v).map(|s| Some(PathBuf::from(s)));
        match key {
            "mode" => {
                self.mode = match as_str(key, v)? {
                    "leap" => Mode::Leap,
                    "plain_lstm" => Mode::PlainLstm,
                    "plain_lstm_schedule" => Mode::PlainLstmSchedule,
                    other => return Err(key_err(key, format!("unknown mode {other:?}"))),
                };
                t.schedule.enabled = self.mode == Mode::PlainLstmSchedule;
            }
            "data" => {
                self.data = match as_str(key, v)? {
                    "csv" => DataSource::Csv,
                    "synthetic" => DataSource::Synthetic,
                    other => return Err(key_err(key, format!("unknown data source {other:?}"))),
                };
                if self.data == DataSource::Synthetic {
                    self.classes = 2;
                }
            }
            "train_path" => self.train_path = path(v)?,
            "dev_path" => self.dev_path = path(v)?,
            "test_path" => self.test_path = path(v)?,
            "embeddings_path" => self.embeddings_path = path(v)?,
            "classes" => self.classes = as_usize(key, v)?,
            "min_freq" => self.min_freq = as_usize(key, v)?,
            "dev_fraction" => self.dev_fraction = as_f64(key, v)?,
            "synthetic_vocab" => self.synthetic.vocab = as_usize(key, v)?,
            "synthetic_length" => self.synthetic.length = as_usize(key, v)?,
            "synthetic_train" => self.synthetic.train = as_usize(key, v)?,
            "synthetic_dev" => self.synthetic.dev = as_usize(key, v)?,
            "synthetic_test" => self.synthetic.test = as_usize(key, v)?,
            "embed_dim" => m.embed_dim = as_usize(key, v)?,
            "hidden" => m.hidden = as_usize(key, v)?,
            "reverse_hidden" => m.reverse_hidden = as_usize(key, v)?,
            "skip_hidden" => m.skip_hidden = as_usize(key, v)?,
            "kernel_widths" => m.kernel_widths = as_usize_list(key, v)?,
            "filters_per_width" => m.filters_per_width = as_usize(key, v)?,
            "use_cnn" => m.features.use_cnn = as_bool(key, v)?,
            "use_rnn_r" => m.features.use_rnn_r = as_bool(key, v)?,
            "use_follow" => m.features.use_follow = as_bool(key, v)?,
            "use_preceding" => m.features.use_preceding = as_bool(key, v)?,
            "use_current" => m.features.use_current = as_bool(key, v)?,
            "lambda" => t.lambda = as_f64(key, v)?,
            "r_target" => t.r_target = as_f64(key, v)?,
            "tau" => t.tau = as_f64(key, v)?,
            "lr" => t.lr = as_f64(key, v)?,
            "batch_size" => t.batch_size = as_usize(key, v)?,
            "max_epochs" => t.max_epochs = as_usize(key, v)?,
            "patience" => t.patience = as_usize(key, v)?,
            "clip_norm" => {
                let c = as_f64(key, v)?;
                t.clip_norm = (c > 0.0).then_some(c);
            }
            "r_m" => t.schedule.r_m = as_f64(key, v)?,
            "beta" => t.schedule.beta = as_f64(key, v)?,
            "index_base" => t.schedule.index_base = as_usize(key, v)?,
            "inference_rule" => {
                let seed = match self.inference {
                    InferenceRule::Sample { seed } => seed,
                    InferenceRule::Argmax => 0,
                };
                self.inference = match as_str(key, v)? {
                    "argmax" => InferenceRule::Argmax,
                    "sample" => InferenceRule::Sample { seed },
                    other => return Err(key_err(key, format!("unknown rule {other:?}"))),
                };
            }
            "inference_seed" => {
                let s = as_u64(key, v)?;
                if let InferenceRule::Sample { seed } = &mut self.inference {
                    *seed = s;
                }
            }
            "seed" => {
                self.seed = as_u64(key, v)?;
                t.seed = self.seed;
            }
            "threads" => self.threads = as_usize(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(as_str(key, v)?),
            "repetitions" => self.repetitions = as_usize(key, v)?,
            "bench_docs" => self.bench_docs = Some(as_usize(key, v)?),
            "top_n" => self.top_n = as_usize(key, v)?,
            "min_appear" => self.min_appear = as_usize(key, v)?,
            "cases" => self.cases = as_usize(key, v)?,
            "render_format" => self.render_format = as_str(key, v)?.parse()?,
            _ => return Err(key_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data == DataSource::Csv {
            let Some(train) = &self.train_path else {
                return Err(key_err("train_path", "required with data = \"csv\""));
            };
            let paths = [
                ("train_path", Some(train)),
                ("dev_path", self.dev_path.as_ref()),
                ("test_path", self.test_path.as_ref()),
                ("embeddings_path", self.embeddings_path.as_ref()),
            ];
            for (key, p) in paths {
                if let Some(p) = p {
                    if !p.is_file() {
                        return Err(key_err(key, format!("{} does not exist", p.display())));
                    }
                }
            }
            if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
                return Err(key_err("dev_fraction", "must lie strictly between 0 and 1"));
            }
            if self.min_freq == 0 {
                return Err(key_err("min_freq", "must be at least 1"));
            }
        } else {
            let s = &self.synthetic;
            if s.vocab < 20 {
                return Err(key_err("synthetic_vocab", "must be at least 20"));
            }
            for (key, n) in [
                ("synthetic_length", s.length),
                ("synthetic_train", s.train),
                ("synthetic_dev", s.dev),
                ("synthetic_test", s.test),
            ] {
                if n == 0 {
                    return Err(key_err(key, "must be positive"));
                }
            }
        }
        if self.classes < 2 {
            return Err(key_err("classes", "must be at least 2"));
        }
        if self.threads == 0 {
            return Err(key_err("threads", "must be at least 1"));
        }
        if self.repetitions < MIN_REPETITIONS {
            return Err(key_err("repetitions", format!("must be at least {MIN_REPETITIONS}")));
        }
        if self.min_appear == 0 {
            return Err(key_err("min_appear", "must be at least 1"));
        }
        self.train.validate().map_err(|e| match e {
            leap_core::Error::Parameter { name, .. } => key_err(name, e.to_string()),
            other => other.into(),
        })?;
        // Vocabulary size is only known after loading; check the rest now.
        self.leap_config(2)
            .validate().map_err(|e| match e {
            leap_core::Error::Parameter { name, .. } => key_err(name, e.to_string()),
            other => other.into(),
        })?;
        Ok(())
    }

    /// The model configuration for a vocabulary of `vocab_size` entries.
    /// Plain modes never run the skip pathway and get a minimal one.
    pub fn leap_config(&self, vocab_size: usize) -> LeapConfig {
        let mut m = self.model.clone();
        m.vocab_size = vocab_size;
        m.classes = self.classes;
        if !self.mode.skipping() {
            m.reverse_hidden = 1;
            m.skip_hidden = 1;
            m.kernel_widths = vec![1];
            m.filters_per_width = 1;
            m.features = FeatureFlags::default();
        }
        m
    }

    /// Every setting that applies to this mode and data source, as a table
    /// that [`RunConfig::from_table`] reads back into an equal config.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        let int = |n: usize| Value::Integer(n as i64);
        let path = |p: &Path| Value::String(p.display().to_string());
        put("mode", Value::String(self.mode.as_str().into()));
        match self.data {
            DataSource::Csv => {
                put("data", Value::String("csv".into()));
                for (k, p) in [
                    ("train_path", &self.train_path),
                    ("dev_path", &self.dev_path),
                    ("test_path", &self.test_path),
                    ("embeddings_path", &self.embeddings_path),
                ] {
                    if let Some(p) = p {
                        put(k, path(p));
                    }
                }
                put("classes", int(self.classes));
                put("min_freq", int(self.min_freq));
                put("dev_fraction", Value::Float(self.dev_fraction));
            }
            DataSource::Synthetic => {
                let s = &self.synthetic;
                put("data", Value::String("synthetic".into()));
                put("synthetic_vocab", int(s.vocab));
                put("synthetic_length", int(s.length));
                put("synthetic_train", int(s.train));
                put("synthetic_dev", int(s.dev));
                put("synthetic_test", int(s.test));
            }
        }
        let m = &self.model;
        put("embed_dim", int(m.embed_dim));
        put("hidden", int(m.hidden));
        let tr = &self.train;
        put("lr", Value::Float(tr.lr));
        put("batch_size", int(tr.batch_size));
        put("max_epochs", int(tr.max_epochs));
        put("patience", int(tr.patience));
        put("clip_norm", Value::Float(tr.clip_norm.unwrap_or(0.0)));
        if self.mode.skipping() {
            put("reverse_hidden", int(m.reverse_hidden));
            put("skip_hidden", int(m.skip_hidden));
            put("kernel_widths", Value::Array(m.kernel_widths.iter().map(|&w| int(w)).collect()));
            put("filters_per_width", int(m.filters_per_width));
            let FeatureFlags {
                use_cnn,
                use_rnn_r,
                use_follow,
                use_preceding,
                use_current,
            } = m.features;
            put("use_cnn", Value::Boolean(use_cnn));
            put("use_rnn_r", Value::Boolean(use_rnn_r));
            put("use_follow", Value::Boolean(use_follow));
            put("use_preceding", Value::Boolean(use_preceding));
            put("use_current", Value::Boolean(use_current));
            put("lambda", Value::Float(tr.lambda));
            put("r_target", Value::Float(tr.r_target));
            put("tau", Value::Float(tr.tau));
            match self.inference {
                InferenceRule::Argmax => put("inference_rule", Value::String("argmax".into())),
                InferenceRule::Sample { seed } => {
                    put("inference_rule", Value::String("sample".into()));
                    put("inference_seed", Value::Integer(seed as i64));
                }
            }
        }
        if self.mode == Mode::PlainLstmSchedule {
            let ScheduleConfig {
                r_m,
                beta,
                index_base,
                ..
            } = tr.schedule;
            put("r_m", Value::Float(r_m));
            put("beta", Value::Float(beta));
            put("index_base", int(index_base));
        }
        put("seed", Value::Integer(self.seed as i64));
        put("threads", int(self.threads));
        put("out_dir", path(&self.out_dir));
        put("repetitions", int(self.repetitions));
        if let Some(n) = self.bench_docs {
            put("bench_docs", int(n));
        }
        put("top_n", int(self.top_n));
        put("min_appear", int(self.min_appear));
        put("cases", int(self.cases));
        let fmt = match self.render_format {
            RenderFormat::Ansi => "ansi",
            RenderFormat::Html => "html",
            RenderFormat::Text => "text",
        };
        put("render_format", Value::String(fmt.into()));
        t
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(&self.to_table())
            .map_err(|e| LeapError::Invalid(format!("cannot serialize config: {e}")))?;
        fs::write(path, text).map_err(|e| LeapError::io(path, e))
    }
}
