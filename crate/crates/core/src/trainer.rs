//! Training-set construction and the BPTT training loop.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::nn::{mse_loss, Adam, AdamConfig, ParamSet};
use crate::par;
use crate::preprocess::{
    resample_channels_concat_unchecked, segment_by_tv, total_variation, SegmenterConfig, TimeSeries,
};
use crate::rae::{backward_sequence, forward_sequence, RaeDims, RaeParams};

/// A run of consecutive model-width vectors from one trace.
pub type Sequence = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dims: RaeDims,
    pub tau: f64,
    pub max_segment_len: usize,
    pub epochs: usize,
    /// Windows per BPTT unroll.
    pub sequence_len: usize,
    pub step_size: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = RaeDims::default();
        TrainConfig {
            dims,
            tau: 0.4,
            max_segment_len: 8 * dims.rae_len(),
            epochs: 30,
            sequence_len: 8,
            step_size: AdamConfig::default().step_size,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.sequence_len == 0 {
            return Err(Error::Config("sequence_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        self.segmenter().validate()
    }

    pub fn segmenter(&self) -> SegmenterConfig {
        SegmenterConfig {
            tau: self.tau,
            max_segment_len: self.max_segment_len,
        }
    }
}

/// Segments one normalized trace by total variation and resamples each
/// segment to the model width. Single-sample segments cannot be resampled and
/// are dropped.
pub fn trace_vectors(trace: &TimeSeries, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    check_len("trace channels", cfg.dims.n_channels, trace.channels())?;
    let rae_len = cfg.dims.rae_len();
    let segments = segment_by_tv(trace, &cfg.segmenter())?;
    Ok(segments
        .into_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| resample_channels_concat_unchecked(trace.rows(s), trace.channels(), rae_len))
        .collect())
}

/// Builds training sequences of `sequence_len` consecutive segment vectors per
/// trace. Traces are processed independently (in parallel when enabled) and
/// concatenated in input order.
pub fn build_dataset(traces: &[TimeSeries], cfg: &TrainConfig) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    let per_trace = par::map_collect(traces, |t| trace_vectors(t, cfg));
    let mut out = Vec::new();
    for (trace, vectors) in traces.iter().zip(per_trace) {
        let vectors = vectors?;
        if vectors.is_empty() {
            log::warn!(
                "trace {:?} produced no usable segments; skipped",
                trace.name
            );
            continue;
        }
        out.extend(vectors.chunks(cfg.sequence_len).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Drops traces whose total variation per sample is strictly above the 99th
/// percentile (nearest rank) of the corpus. Returns the kept traces.
pub fn evict_outliers(traces: Vec<TimeSeries>) -> Vec<TimeSeries> {
    if traces.len() < 2 {
        return traces;
    }
    let density: Vec<f64> = traces
        .iter()
        .map(|t| total_variation(t, 0..t.len()).unwrap_or(0.0) / t.len() as f64)
        .collect();
    let mut sorted = density.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let cutoff = sorted[rank - 1];
    traces
        .into_iter()
        .zip(density)
        .filter_map(|(t, d)| {
            if d > cutoff {
                log::info!(
                    "evicting outlier trace {:?} (tv/sample {d:.4} > {cutoff:.4})",
                    t.name
                );
                None
            } else {
                Some(t)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub train_sequences: usize,
    pub validation_sequences: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,validation_loss,elapsed_ms\n");
        for r in &self.epochs {
            let v = r.validation_loss.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                v,
                r.elapsed.as_millis()
            ));
        }
        s
    }
}

fn check_dataset(dims: &RaeDims, dataset: &[Sequence]) -> Result<()> {
    if dataset.is_empty() || dataset.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument(
            "dataset is empty or holds an empty sequence".into(),
        ));
    }
    for v in dataset.iter().flatten() {
        check_len("dataset vector", dims.d_in, v.len())?;
    }
    Ok(())
}

/// Seeded, single-threaded training with one sequence per update. Returns the
/// parameters from the epoch with the lowest validation loss (training loss
/// when there is no validation split).
pub fn train(cfg: &TrainConfig, dataset: &[Sequence]) -> Result<(RaeParams, TrainingLog)> {
    train_with(cfg, dataset, RaeParams::init(cfg.dims, cfg.seed)?, |_| {})
}

/// [`train`] starting from `init`, calling `on_epoch` after every epoch.
pub fn train_with<F: FnMut(&EpochRecord)>(
    cfg: &TrainConfig,
    dataset: &[Sequence],
    init: RaeParams,
    mut on_epoch: F,
) -> Result<(RaeParams, TrainingLog)> {
    cfg.validate()?;
    check_len("initial model d_in", cfg.dims.d_in, init.dims.d_in)?;
    check_dataset(&cfg.dims, dataset)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val =
        ((dataset.len() as f64 * cfg.validation_fraction).floor() as usize).min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let validation: Vec<Sequence> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();

    let mut params = init;
    let mut opt = Adam::new(
        AdamConfig {
            step_size: cfg.step_size,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut log = TrainingLog {
        train_sequences: train_idx.len(),
        validation_sequences: validation.len(),
        ..TrainingLog::default()
    };
    let mut best: Option<(f64, RaeParams)> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &train_idx {
            let seq = &dataset[i];
            let fwd = forward_sequence(&params, seq)?;
            let loss = fwd.total_loss(seq)? / seq.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} (loss {loss}); lower the step size"
                )));
            }
            epoch_loss += loss;
            let mut grads = backward_sequence(&params, &fwd.caches, seq, &fwd.reconstructions)?;
            let scale = 1.0 / seq.len() as f64;
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= scale);
            }
            opt.step(&mut params, &grads)?;
        }
        let train_loss = epoch_loss / train_idx.len() as f64;

        let validation_loss = if validation.is_empty() {
            None
        } else {
            let l = evaluate(&params, &validation)?.mean_mse;
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "validation loss diverged at epoch {epoch}"
                )));
            }
            Some(l)
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            elapsed: start.elapsed(),
        };
        log::debug!("epoch {epoch}: train {train_loss:.6} val {validation_loss:?}");
        on_epoch(&record);
        log.epochs.push(record);

        let score = validation_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, params.clone()));
            log.best_epoch = epoch;
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok((best, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Mean over all windows of the per-window MSE.
    pub mean_mse: f64,
    pub max_linf: f64,
    /// L∞ of every window, in dataset order.
    pub window_linf: Vec<f64>,
}

/// Forward-only metrics; every sequence starts from the zero state.
pub fn evaluate(params: &RaeParams, dataset: &[Sequence]) -> Result<EvalMetrics> {
    check_dataset(&params.dims, dataset)?;
    let per_seq = par::map_collect(dataset, |seq| -> Result<Vec<(f64, f64)>> {
        let fwd = forward_sequence(params, seq)?;
        fwd.reconstructions
            .iter()
            .zip(seq)
            .map(|(xh, x)| {
                let mse = mse_loss(xh, x)?.0;
                let linf = xh
                    .iter()
                    .zip(x)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                Ok((mse, linf))
            })
            .collect()
    });
    let mut total = 0.0;
    let mut window_linf = Vec::new();
    for r in per_seq {
        for (mse, linf) in r? {
            total += mse;
            window_linf.push(linf);
        }
    }
    let max_linf = window_linf.iter().copied().fold(0.0, f64::max);
    Ok(EvalMetrics {
        mean_mse: total / window_linf.len() as f64,
        max_linf,
        window_linf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg(dims: RaeDims) -> TrainConfig {
        TrainConfig {
            dims,
            max_segment_len: 8 * dims.rae_len(),
            epochs: 1,
            sequence_len: 2,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_trace_yields_one_flat_vector() {
        let trace = TimeSeries::from_channel("c", vec![0.25; 64]).unwrap();
        let cfg = small_cfg(RaeDims::default());
        let ds = build_dataset(&[trace], &cfg).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0], vec![vec![0.25; 32]]);
    }

    #[test]
    fn sequences_group_consecutive_segments() {
        // Steps of 1.0 with tau 1 → every segment is two samples long.
        let v: Vec<f64> = (0..10).map(|t| (t % 2) as f64).collect();
        let trace = TimeSeries::from_channel("s", v).unwrap();
        let mut cfg = small_cfg(RaeDims::for_window(4, 1, 2, 2, 2));
        cfg.tau = 1.0;
        let ds = build_dataset(&[trace], &cfg).unwrap();
        let sizes: Vec<usize> = ds.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn dataset_rejects_channel_mismatch() {
        let trace = TimeSeries::new("m", 2, vec![0.0; 8]).unwrap();
        assert!(build_dataset(&[trace], &small_cfg(RaeDims::default())).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg.epochs = 1;
        cfg.validation_fraction = 1.0;
        assert!(cfg.validate().is_err());
        cfg.validation_fraction = 0.0;
        cfg.sequence_len = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn learns_the_zero_map() {
        let dims = RaeDims::for_window(8, 1, 4, 2, 4);
        let cfg = TrainConfig {
            epochs: 50,
            step_size: 1e-2,
            ..small_cfg(dims)
        };
        let ds = vec![vec![vec![0.0; 8]]];
        let (params, log) = train(&cfg, &ds).unwrap();
        let m = evaluate(&params, &ds).unwrap();
        assert!(m.mean_mse < 1e-4, "mse {}", m.mean_mse);
        assert_eq!(log.epochs.len(), 50);
    }

    fn tiny_dataset(seed: u64) -> Vec<Sequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4)
            .map(|_| {
                (0..3)
                    .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn loss_trends_down_and_is_deterministic() {
        let dims = RaeDims::for_window(8, 1, 4, 2, 4);
        let cfg = TrainConfig {
            epochs: 200,
            step_size: 1e-2,
            ..small_cfg(dims)
        };
        let ds = tiny_dataset(1);
        let (p1, log) = train(&cfg, &ds).unwrap();
        let first: f64 = log.epochs[..10].iter().map(|r| r.train_loss).sum();
        let last: f64 = log.epochs[190..].iter().map(|r| r.train_loss).sum();
        assert!(last < 0.5 * first, "first {first} last {last}");
        let (p2, _) = train(&cfg, &ds).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn tiny_overfit_benchmark() {
        let dims = RaeDims::for_window(8, 1, 4, 2, 4);
        let cfg = TrainConfig {
            epochs: 500,
            step_size: 1e-2,
            ..small_cfg(dims)
        };
        let ds = tiny_dataset(2);
        let (_, log) = train(&cfg, &ds).unwrap();
        let best = log
            .epochs
            .iter()
            .map(|r| r.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-3, "best loss {best}");
    }

    #[test]
    fn validation_split_is_disjoint() {
        let dims = RaeDims::for_window(8, 1, 4, 2, 4);
        let cfg = TrainConfig {
            epochs: 2,
            validation_fraction: 0.5,
            ..small_cfg(dims)
        };
        let (_, log) = train(&cfg, &tiny_dataset(3)).unwrap();
        assert_eq!((log.train_sequences, log.validation_sequences), (2, 2));
        assert!(log.epochs.iter().all(|r| r.validation_loss.is_some()));
    }

    #[test]
    fn divergence_is_reported() {
        let dims = RaeDims::for_window(8, 1, 4, 2, 4);
        let cfg = small_cfg(dims);
        let mut ds = tiny_dataset(4);
        ds[0][0][0] = f64::INFINITY;
        let mut cfg = cfg;
        cfg.validation_fraction = 0.0;
        assert!(matches!(train(&cfg, &ds), Err(Error::Numeric(_))));
    }

    #[test]
    fn evaluate_validation_and_symmetry() {
        let p = RaeParams::init(RaeDims::for_window(8, 1, 4, 2, 4), 0).unwrap();
        assert!(evaluate(&p, &[]).is_err());
        assert!(evaluate(&p, &[vec![vec![0.0; 7]]]).is_err());
        let ds = tiny_dataset(5);
        let a = evaluate(&p, &ds).unwrap();
        let rev: Vec<Sequence> = ds.iter().rev().cloned().collect();
        let b = evaluate(&p, &rev).unwrap();
        assert!((a.mean_mse - b.mean_mse).abs() < 1e-12);
        assert_eq!(a.max_linf, b.max_linf);
    }

    #[test]
    fn eviction_drops_only_extreme_traces() {
        let mut traces: Vec<TimeSeries> = (0..200)
            .map(|i| {
                TimeSeries::from_channel(format!("q{i}"), vec![0.0, 0.01 * (i % 3) as f64, 0.0])
                    .unwrap()
            })
            .collect();
        traces.push(TimeSeries::from_channel("wild", vec![-1.0, 1.0, -1.0]).unwrap());
        let kept = evict_outliers(traces);
        assert_eq!(kept.len(), 200);
        assert!(kept.iter().all(|t| t.name != "wild"));
    }
}
