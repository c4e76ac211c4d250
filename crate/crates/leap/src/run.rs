//! The four subcommands as library functions over a [`RunConfig`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use leap_core::data::Document;
use leap_core::model::{Decision, LeapModel, LeapParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{keep_rate_table, render_case, KeepRateTable, RenderFormat};
use crate::bench::{benchmark_inference, BenchReport};
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::error::{LeapError, Result};
use crate::synthetic::KeywordTask;
use crate::text::{build_vocab, load_corpus, load_embeddings, Vocabulary};
use crate::trainer::{evaluate, fit, infer_all, EpochRecord};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TIMINGS_FILE: &str = "timings.tsv";
pub const METRICS_FILE: &str = "metrics.json";

/// Streams derived from the run seed so that data, initialization, and
/// training never share random numbers.
const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Encoded data sets plus the vocabulary that produced them.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocabulary: Vocabulary,
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
}

fn synthetic_task(cfg: &RunConfig) -> KeywordTask {
    KeywordTask {
        vocab_size: cfg.synthetic.vocab,
        length: cfg.synthetic.length,
        ..KeywordTask::default()
    }
}

/// Synthetic sets are generated from fixed seeds so that train, eval, and
/// analyze runs agree on them whatever the run seed is.
const SYNTHETIC_SEEDS: [u64; 3] = [1, 2, 3];

/// Loads (or generates) training and dev data. Without a dev file a
/// `dev_fraction` share of the shuffled training file is held out.
pub fn load_training_data(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.data == DataSource::Synthetic {
        let task = synthetic_task(cfg);
        return Ok(Corpus {
            vocabulary: task.vocabulary(),
            train: task.generate(cfg.synthetic.train, SYNTHETIC_SEEDS[0]),
            dev: task.generate(cfg.synthetic.dev, SYNTHETIC_SEEDS[1]),
        });
    }
    let train_path = cfg.train_path.as_deref().ok_or_else(|| LeapError::config("train_path", "required"))?;
    let mut train = load_corpus(train_path, cfg.classes)?;
    if train.is_empty() {
        return Err(LeapError::config("train_path", format!("{} has no documents", train_path.display())));
    }
    let dev = match &cfg.dev_path {
        Some(p) => load_corpus(p, cfg.classes)?,
        None => {
            train.shuffle(&mut stream_rng(cfg.seed, DATA_STREAM));
            let n_dev = ((train.len() as f64 * cfg.dev_fraction).round() as usize).clamp(1, train.len().max(2) - 1);
            train.split_off(train.len() - n_dev)
        }
    };
    if train.is_empty() || dev.is_empty() {
        return Err(LeapError::config("dev_fraction", "leaves an empty training or dev set"));
    }
    let vocabulary = build_vocab(train.iter().map(|d| d.tokens.as_slice()), cfg.min_freq)?;
    let encode = |docs: &[crate::text::RawDocument]| docs.iter().map(|d| vocabulary.encode_document(d)).collect();
    Ok(Corpus {
        train: encode(&train),
        dev: encode(&dev),
        vocabulary,
    })
}

/// Loads the test set, encoded with `vocabulary`.
pub fn load_test_data(cfg: &RunConfig, vocabulary: &Vocabulary) -> Result<Vec<Document>> {
    let docs = if cfg.data == DataSource::Synthetic {
        synthetic_task(cfg).generate(cfg.synthetic.test, SYNTHETIC_SEEDS[2])
    } else {
        let path = cfg
            .test_path
            .as_deref()
            .ok_or_else(|| LeapError::config("test_path", "required for this command"))?;
        load_corpus(path, cfg.classes)?
            .iter()
            .map(|d| vocabulary.encode_document(d))
            .collect()
    };
    if docs.is_empty() {
        return Err(LeapError::config("test_path", "test set has no documents"));
    }
    Ok(docs)
}

/// Fresh model for the configured mode, with pretrained embeddings when a
/// file is configured.
pub fn init_model(cfg: &RunConfig, vocabulary: &Vocabulary) -> Result<LeapModel> {
    let lc = cfg.leap_config(vocabulary.len());
    let mut rng = stream_rng(cfg.seed, INIT_STREAM);
    let mut params = LeapParams::init(&lc, &mut rng)?;
    if let Some(path) = &cfg.embeddings_path {
        params.embedding = load_embeddings(path, vocabulary, lc.embed_dim, &mut rng)?;
    }
    Ok(LeapModel::new(lc, params, cfg.mode.skipping())?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LeapError::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| LeapError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Trains and writes the best checkpoint (rewritten at every best-dev
/// epoch), the JSON-lines history, wall-clock timings, and the resolved
/// config. Timings live in their own file so the others are reproducible.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    create_dir(&cfg.out_dir)?;
    cfg.write_snapshot(&cfg.out_dir.join("train_config.toml"))?;
    let corpus = load_training_data(cfg)?;
    let model = init_model(cfg, &corpus.vocabulary)?;

    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let hist_path = cfg.out_dir.join(HISTORY_FILE);
    let time_path = cfg.out_dir.join(TIMINGS_FILE);
    let mut history = create(&hist_path)?;
    let mut timings = create(&time_path)?;
    writeln!(timings, "epoch\ttrain_seconds\tdev_seconds").map_err(|e| LeapError::io(&time_path, e))?;
    let mut failure: Option<LeapError> = None;
    let mut on_epoch = |rec: &EpochRecord, model: &LeapModel| {
        if failure.is_some() {
            return;
        }
        let mut step = || -> Result<()> {
            let line = serde_json::to_string(rec)?;
            writeln!(history, "{line}").map_err(|e| LeapError::io(&hist_path, e))?;
            history.flush().map_err(|e| LeapError::io(&hist_path, e))?;
            writeln!(timings, "{}\t{:.6}\t{:.6}", rec.epoch, rec.train.seconds, rec.dev.seconds)
                .map_err(|e| LeapError::io(&time_path, e))?;
            if rec.best_so_far {
                Checkpoint::new(model.clone(), Some(corpus.vocabulary.clone()), rec.epoch, rec.dev.accuracy)
                    .save(&ckpt_path)?;
            }
            Ok(())
        };
        failure = step().err();
    };
    let outcome = fit(model, &corpus.train, &corpus.dev, &cfg.train, cfg.threads, cfg.inference, &mut on_epoch)?;
    if let Some(e) = failure {
        return Err(e);
    }
    timings.flush().map_err(|e| LeapError::io(&time_path, e))?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        best_dev_accuracy: outcome.best_dev_accuracy,
        epochs_run: outcome.history.len(),
        checkpoint: ckpt_path,
        history: outcome.history,
    })
}

/// Loads a checkpoint and checks it against the configured mode and model
/// dimensions.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.skipping != cfg.mode.skipping() {
        return Err(LeapError::Checkpoint {
            path: path.to_path_buf(),
            message: format!("stored model does not match mode {}", cfg.mode.as_str()),
        });
    }
    ckpt.check_config(&cfg.leap_config(ckpt.model.config.vocab_size), path)?;
    if ckpt.vocabulary.is_none() {
        return Err(LeapError::Checkpoint {
            path: path.to_path_buf(),
            message: "no vocabulary stored".into(),
        });
    }
    Ok(ckpt)
}

fn vocabulary_of(ckpt: &Checkpoint) -> &Vocabulary {
    ckpt.vocabulary.as_ref().expect("checked by load_checkpoint")
}

/// Written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub documents: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub skip_rate: f64,
    pub updates: usize,
    pub tokens: usize,
    pub update_ratio: f64,
    pub seconds: f64,
}

impl EvalMetrics {
    /// Percentages with two decimals, e.g. `accuracy 93.64  skip rate 57.08`.
    pub fn summary_line(&self) -> String {
        format!(
            "accuracy {:.2}  skip rate {:.2}  update ratio {:.4}  ({} documents, {:.2}s)",
            100.0 * self.accuracy,
            100.0 * self.skip_rate,
            self.update_ratio,
            self.documents,
            self.seconds
        )
    }
}

pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalMetrics> {
    create_dir(&cfg.out_dir)?;
    cfg.write_snapshot(&cfg.out_dir.join("eval_config.toml"))?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let test = load_test_data(cfg, vocabulary_of(&ckpt))?;
    let ev = evaluate(&ckpt.model, &test, cfg.threads, cfg.inference)?;
    let metrics = EvalMetrics {
        documents: test.len(),
        accuracy: ev.metrics.accuracy,
        loss: ev.metrics.loss,
        skip_rate: ev.metrics.skip_rate,
        updates: ev.updates,
        tokens: ev.tokens,
        update_ratio: ev.update_ratio(),
        seconds: ev.metrics.seconds,
    };
    let path = cfg.out_dir.join(METRICS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&metrics)?).map_err(|e| LeapError::io(&path, e))?;
    Ok(metrics)
}

pub fn run_bench(cfg: &RunConfig, checkpoint: &Path) -> Result<BenchReport> {
    create_dir(&cfg.out_dir)?;
    cfg.write_snapshot(&cfg.out_dir.join("bench_config.toml"))?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let mut test = load_test_data(cfg, vocabulary_of(&ckpt))?;
    if let Some(n) = cfg.bench_docs {
        test.truncate(n.max(1));
    }
    let report = benchmark_inference(&ckpt.model, &test, cfg.repetitions, cfg.inference)?;
    report.write_json(&cfg.out_dir.join("bench.json"))?;
    report.write_tsv(&cfg.out_dir.join("bench.tsv"))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutput {
    pub table: KeepRateTable,
    pub cases: Vec<String>,
}

/// Keep-rate tables over the test set plus `cases` rendered documents
/// picked with the run seed.
pub fn run_analyze(cfg: &RunConfig, checkpoint: &Path) -> Result<AnalyzeOutput> {
    create_dir(&cfg.out_dir)?;
    cfg.write_snapshot(&cfg.out_dir.join("analyze_config.toml"))?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let vocab = vocabulary_of(&ckpt);
    let test = load_test_data(cfg, vocab)?;
    let traces: Vec<Vec<Decision>> = infer_all(&ckpt.model, &test, cfg.threads, cfg.inference)?
        .into_iter()
        .map(|inf| inf.trace.decisions)
        .collect();
    let word = |id: u32| vocab.token(id).unwrap_or(crate::text::UNK_TOKEN).to_string();
    let table = keep_rate_table(&test, &traces, cfg.classes, &word, cfg.top_n, cfg.min_appear)?;
    table.write_json(&cfg.out_dir.join("keep_rates.json"))?;
    table.write_tsv(&cfg.out_dir.join("keep_rates.tsv"))?;

    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, DATA_STREAM));
    let mut cases = Vec::new();
    for &i in order.iter().take(cfg.cases) {
        let words = vocab.decode(&test[i].tokens);
        cases.push(render_case(&words, &traces[i], cfg.render_format)?);
    }
    let (name, sep) = match cfg.render_format {
        RenderFormat::Html => ("cases.html", "\n"),
        RenderFormat::Text => ("cases.txt", "\n\n"),
        RenderFormat::Ansi => ("cases.ansi", "\n\n"),
    };
    let path = cfg.out_dir.join(name);
    fs::write(&path, cases.join(sep) + "\n").map_err(|e| LeapError::io(&path, e))?;
    Ok(AnalyzeOutput { table, cases })
}
