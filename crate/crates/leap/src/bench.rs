//! Wall-clock inference benchmarks against a plain-LSTM baseline.

use std::fs;
use std::path::Path;
use std::time::Instant;

use leap_core::data::Document;
use leap_core::model::{Inference, LeapModel};
use serde::{Deserialize, Serialize};

use crate::error::{LeapError, Result};
use crate::trainer::{infer_document, InferenceRule};

pub const BENCH_VERSION: u32 = 1;
pub const MIN_REPETITIONS: usize = 3;

/// Timings and compute accounting for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub skip_rate: f64,
    /// Seconds per repetition, in run order.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub docs_per_sec: f64,
    pub mean_latency_ms: f64,
    /// Baseline median time over this configuration's median time.
    pub speedup: f64,
    pub updates: usize,
    pub tokens: usize,
    pub update_ratio: f64,
}

impl BenchEntry {
    pub fn speedup_label(&self) -> String {
        format!("{:.1}x", self.speedup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub repetitions: usize,
    pub documents: usize,
    /// The first entry is the baseline.
    pub entries: Vec<BenchEntry>,
}

/// A named way of reading one document; the argument is the document's
/// index in the set.
pub type Runner<'a> = Box<dyn Fn(usize, &[u32]) -> Result<Inference> + 'a>;

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times each runner over all documents. One untimed warm-up pass precedes
/// the measurements; repetitions rotate through the runners so drift hits
/// all of them alike. Speedups are relative to the first runner.
pub fn benchmark(docs: &[Document], repetitions: usize, runners: &[(&str, Runner<'_>)]) -> Result<BenchReport> {
    if docs.is_empty() {
        return Err(LeapError::Invalid("benchmark needs at least one document".into()));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(LeapError::config(
            "repetitions",
            format!("must be at least {MIN_REPETITIONS}, got {repetitions}"),
        ));
    }
    if runners.is_empty() {
        return Err(LeapError::Invalid("nothing to benchmark".into()));
    }
    let mut accounts = Vec::with_capacity(runners.len());
    for (_, run) in runners {
        let (mut updates, mut skipped, mut tokens) = (0, 0, 0);
        for (i, d) in docs.iter().enumerate() {
            let inf = run(i, &d.tokens)?;
            updates += inf.updates;
            skipped += inf.trace.skipped();
            tokens += d.len();
        }
        accounts.push((updates, skipped, tokens));
    }
    let mut seconds = vec![Vec::with_capacity(repetitions); runners.len()];
    for _ in 0..repetitions {
        for (k, (_, run)) in runners.iter().enumerate() {
            let start = Instant::now();
            for (i, d) in docs.iter().enumerate() {
                std::hint::black_box(run(i, &d.tokens)?);
            }
            seconds[k].push(start.elapsed().as_secs_f64());
        }
    }
    let base = median(&seconds[0]);
    let entries = runners
        .iter()
        .zip(seconds)
        .zip(accounts)
        .map(|(((name, _), secs), (updates, skipped, tokens))| {
            let med = median(&secs);
            BenchEntry {
                name: name.to_string(),
                skip_rate: skipped as f64 / tokens as f64,
                median_seconds: med,
                docs_per_sec: docs.len() as f64 / med,
                mean_latency_ms: med * 1e3 / docs.len() as f64,
                speedup: base / med,
                updates,
                tokens,
                update_ratio: updates as f64 / tokens as f64,
                seconds: secs,
            }
        })
        .collect();
    Ok(BenchReport {
        format_version: BENCH_VERSION,
        repetitions,
        documents: docs.len(),
        entries,
    })
}

/// Compares `model` under `rule` with the plain LSTM sharing its weights.
pub fn benchmark_inference(
    model: &LeapModel,
    docs: &[Document],
    repetitions: usize,
    rule: InferenceRule,
) -> Result<BenchReport> {
    let mut plain = model.clone();
    plain.skipping = false;
    let runners: Vec<(&str, Runner<'_>)> = vec![
        ("plain_lstm", Box::new(move |i, t| infer_document(&plain, t, i, rule))),
        ("leap_lstm", Box::new(move |i, t| infer_document(model, t, i, rule))),
    ];
    benchmark(docs, repetitions, &runners)
}

impl BenchReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| LeapError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LeapError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Columns: name, skip_rate, median_seconds, docs_per_sec,
    /// mean_latency_ms, speedup, updates, tokens, update_ratio.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| LeapError::Invalid(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| LeapError::Invalid(format!("{}: {e}", path.display()));
        w.write_record([
            "name",
            "skip_rate",
            "median_seconds",
            "docs_per_sec",
            "mean_latency_ms",
            "speedup",
            "updates",
            "tokens",
            "update_ratio",
        ])
        .map_err(io)?;
        for e in &self.entries {
            w.write_record([
                e.name.clone(),
                format!("{:.6}", e.skip_rate),
                format!("{:.6}", e.median_seconds),
                format!("{:.3}", e.docs_per_sec),
                format!("{:.6}", e.mean_latency_ms),
                format!("{:.3}", e.speedup),
                e.updates.to_string(),
                e.tokens.to_string(),
                format!("{:.6}", e.update_ratio),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| LeapError::io(path, e))
    }
}
