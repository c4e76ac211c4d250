//! Trains the skipping model on the planted-keyword task for a few target
//! skip rates and reports test skip rate, accuracy, and keep rates.
//!
//! `cargo run --release -p leap-lstm --example synthetic_sweep -- 0.25 0.6 0.9`

use leap_core::model::{Decision, LeapConfig, LeapModel, LeapParams};
use leap_core::train::TrainConfig;
use leap_lstm::synthetic::KeywordTask;
use leap_lstm::trainer::{fit, infer_all, InferenceRule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let targets: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let env = |k: &str, d: usize| std::env::var(k).ok().map_or(d, |v| v.parse().unwrap());
    let task = KeywordTask::default();
    let train = task.generate(env("N_TRAIN", 5000), 1);
    let dev = task.generate(500, 2);
    let test = task.generate(1000, 3);
    for rt in targets {
        let mut cfg = LeapConfig::standard(200, 2);
        cfg.embed_dim = env("D", 16);
        cfg.hidden = env("H", 24);
        cfg.reverse_hidden = env("HR", 8);
        cfg.skip_hidden = env("S", 8);
        cfg.filters_per_width = env("F", 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = LeapParams::init(&cfg, &mut rng).unwrap();
        let model = LeapModel::new(cfg, params, true).unwrap();
        let tc = TrainConfig {
            r_target: rt,
            max_epochs: env("EPOCHS", 6),
            patience: 0,
            lr: std::env::var("LR").ok().map_or(0.003, |v| v.parse().unwrap()),
            batch_size: env("BATCH", 32),
            tau: std::env::var("TAU").ok().map_or(0.1, |v| v.parse().unwrap()),
            ..TrainConfig::default()
        };
        let rule = if std::env::var("RULE").is_ok_and(|r| r == "argmax") {
            InferenceRule::Argmax
        } else {
            InferenceRule::Sample { seed: 11 }
        };
        let start = std::time::Instant::now();
        let out = fit(model, &train, &dev, &tc, 1, rule, &mut |r, _| {
            println!(
                "  epoch {} train acc {:.3} r {:.3} | dev acc {:.3} r {:.3} ({:.1}s)",
                r.epoch, r.train.accuracy, r.train.skip_rate, r.dev.accuracy, r.dev.skip_rate, r.train.seconds
            )
        })
        .unwrap();
        let results = infer_all(&out.best, &test, 1, rule).unwrap();
        let (mut kw, mut kw_kept, mut nz, mut nz_kept, mut correct, mut skipped, mut total) =
            (0, 0, 0, 0, 0, 0, 0);
        for (doc, inf) in test.iter().zip(&results) {
            correct += (inf.predicted() == doc.label) as usize;
            for (&tok, d) in doc.tokens.iter().zip(&inf.trace.decisions) {
                let kept = (*d == Decision::Keep) as usize;
                total += 1;
                skipped += 1 - kept;
                if task.is_keyword(tok) {
                    kw += 1;
                    kw_kept += kept;
                } else {
                    nz += 1;
                    nz_kept += kept;
                }
            }
        }
        println!(
            "r_t {rt}: test r {:.3} acc {:.3} kw keep {:.3} noise keep {:.3} best epoch {} in {:.0}s",
            skipped as f64 / total as f64,
            correct as f64 / test.len() as f64,
            kw_kept as f64 / kw as f64,
            nz_kept as f64 / nz as f64,
            out.best_epoch,
            start.elapsed().as_secs_f64()
        );
    }
}
