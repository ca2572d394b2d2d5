//! Trains on the synthetic sinusoid corpus and sweeps epsilon on held-out
//! traces.
//!
//! Environment overrides: `EPOCHS`, `TRACES`, `TAU`, `STEP`, `SEED`, `MAX_WINDOW`.

use std::env;
use std::time::Instant;

use rae_core::codec::{compress_batch, metrics, CodecConfig};
use rae_core::rae::RaeDims;
use rae_core::rae::RaeParams;
use rae_core::synth::{sinusoid_corpus, SynthConfig};
use rae_core::trainer::{build_dataset, train_with, TrainConfig};

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> rae_core::Result<()> {
    let dims = RaeDims::default();
    let traces = var("TRACES", 12usize);
    let corpus = sinusoid_corpus(&SynthConfig {
        n_traces: traces,
        len: 2000,
        seed: var("SEED", 1u64),
        ..SynthConfig::default()
    })?;
    let normalized: Vec<_> = corpus.iter().map(|t| t.normalize()).collect();
    let cfg = TrainConfig {
        dims,
        tau: var("TAU", 0.4),
        epochs: var("EPOCHS", 40usize),
        step_size: var("STEP", 1e-3),
        seed: var("SEED", 1u64),
        ..TrainConfig::default()
    };
    let dataset = build_dataset(&normalized, &cfg)?;
    let windows: usize = dataset.iter().map(|s| s.len()).sum();
    println!("{} sequences, {windows} windows", dataset.len());

    let t0 = Instant::now();
    let (params, log) = train_with(&cfg, &dataset, RaeParams::init(dims, cfg.seed)?, |r| {
        println!(
            "epoch {:>3} train {:.6} val {:.6} ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.validation_loss.unwrap_or(f64::NAN),
            r.elapsed.as_secs_f64()
        )
    })?;
    println!(
        "trained in {:.1}s, best epoch {}",
        t0.elapsed().as_secs_f64(),
        log.best_epoch
    );

    let held_out: Vec<_> = sinusoid_corpus(&SynthConfig {
        n_traces: 6,
        len: 2000,
        seed: 9_999,
        ..SynthConfig::default()
    })?
    .iter()
    .map(|t| t.normalize())
    .collect();
    for eps in [0.05, 0.1, 0.15, 0.2] {
        let mut codec = CodecConfig::new(eps, dims.rae_len());
        codec.max_window = var("MAX_WINDOW", codec.max_window);
        let results = compress_batch(&params, &held_out, &codec);
        let (mut bytes, mut total, mut sq, mut linf, mut raw, mut blocks) =
            (0usize, 0usize, 0.0, 0.0f64, 0, 0);
        for (r, s) in results.into_iter().zip(&held_out) {
            let r = r?;
            let m = metrics(s.samples(), r.reconstruction.samples())?;
            bytes += r.stream.encoded_len();
            total += s.len() * s.channels();
            sq += m.rmse * m.rmse * (s.len() * s.channels()) as f64;
            linf = linf.max(m.linf);
            raw += r.stream.n_raw_blocks();
            blocks += r.stream.blocks.len();
        }
        println!(
            "eps {eps:.2}: ratio {:.4} rmse {:.4} linf {:.4} blocks {blocks} raw {raw} mean window {:.1}",
            bytes as f64 / (4 * total) as f64,
            (sq / total as f64).sqrt(),
            linf,
            total as f64 / blocks as f64
        );
    }
    Ok(())
}
