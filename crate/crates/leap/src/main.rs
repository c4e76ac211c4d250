use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leap_lstm::config::{parse_override, RunConfig};
use leap_lstm::error::{LeapError, Result};
use leap_lstm::run::{run_analyze, run_bench, run_eval, run_train};
use toml::Value;

/// Word-skipping LSTM text classifier.
#[derive(Parser)]
#[command(name = "leap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history, and config snapshot.
    Train(Common),
    /// Evaluate a checkpoint on the test set.
    Eval(Common),
    /// Time a checkpoint against the plain LSTM with the same weights.
    Bench(Common),
    /// Write per-word keep-rate tables and rendered example documents.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML file of settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to read (eval, bench, analyze).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), Value::Integer(seed as i64)));
        }
        if let Some(t) = self.threads {
            overrides.push(("threads".into(), Value::Integer(t as i64)));
        }
        if let Some(out) = &self.out {
            overrides.push(("out_dir".into(), Value::String(out.display().to_string())));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }

    fn checkpoint(&self, cfg: &RunConfig) -> Result<PathBuf> {
        let path = self
            .checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join(leap_lstm::run::CHECKPOINT_FILE));
        if !path.is_file() {
            return Err(LeapError::Checkpoint {
                path,
                message: "not found".into(),
            });
        }
        Ok(path)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let s = run_train(&cfg)?;
            for r in &s.history {
                println!(
                    "epoch {:>3}  train acc {:.4} loss {:.4} skip {:.2}  dev acc {:.4} skip {:.2}{}",
                    r.epoch,
                    r.train.accuracy,
                    r.train.loss,
                    100.0 * r.train.skip_rate,
                    r.dev.accuracy,
                    100.0 * r.dev.skip_rate,
                    if r.best_so_far { "  *" } else { "" }
                );
            }
            println!(
                "best dev accuracy {:.2} at epoch {}; checkpoint {}",
                100.0 * s.best_dev_accuracy,
                s.best_epoch,
                s.checkpoint.display()
            );
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let m = run_eval(&cfg, &c.checkpoint(&cfg)?)?;
            println!("{}", m.summary_line());
        }
        Command::Bench(c) => {
            let cfg = c.resolve()?;
            let report = run_bench(&cfg, &c.checkpoint(&cfg)?)?;
            for e in &report.entries {
                println!(
                    "{:<12} skip {:>6.2}  {:>10.1} docs/s  {:>8.3} ms/doc  speedup {}  update ratio {:.4}",
                    e.name,
                    100.0 * e.skip_rate,
                    e.docs_per_sec,
                    e.mean_latency_ms,
                    e.speedup_label(),
                    e.update_ratio
                );
            }
        }
        Command::Analyze(c) => {
            let cfg = c.resolve()?;
            let out = run_analyze(&cfg, &c.checkpoint(&cfg)?)?;
            for (class, rows) in out.table.classes.iter().enumerate() {
                let words: Vec<String> = rows.iter().map(|r| format!("{} ({:.2})", r.word, r.keep_rate)).collect();
                println!("class {class}: {}", words.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
