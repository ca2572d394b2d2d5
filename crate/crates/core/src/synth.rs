//! Seeded synthetic corpus: each channel is a sum of 2–5 sinusoids plus
//! low-amplitude uniform noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::par;
use crate::preprocess::TimeSeries;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_traces: usize,
    pub len: usize,
    pub channels: usize,
    pub seed: u64,
    pub min_period: f64,
    pub max_period: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_traces: 16,
            len: 2000,
            channels: 1,
            seed: 0,
            min_period: 40.0,
            max_period: 400.0,
            noise: 0.01,
        }
    }
}

/// Raw (un-normalized) trace number `index` of the corpus described by `cfg`.
pub fn sinusoid_trace(cfg: &SynthConfig, index: usize) -> Result<TimeSeries> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let c = cfg.channels;
    let mut samples = vec![0.0; cfg.len * c];
    for ch in 0..c {
        let k = rng.gen_range(2..=5);
        let waves: Vec<(f64, f64, f64)> = (0..k)
            .map(|_| {
                let period = rng.gen_range(cfg.min_period..=cfg.max_period);
                (
                    rng.gen_range(0.2..1.0),
                    TAU / period,
                    rng.gen_range(0.0..TAU),
                )
            })
            .collect();
        for t in 0..cfg.len {
            let clean: f64 = waves
                .iter()
                .map(|(a, w, p)| a * (w * t as f64 + p).sin())
                .sum();
            samples[t * c + ch] = clean + cfg.noise * rng.gen_range(-1.0..1.0);
        }
    }
    TimeSeries::new(format!("synth-{index}"), c, samples)
}

pub fn sinusoid_corpus(cfg: &SynthConfig) -> Result<Vec<TimeSeries>> {
    let idx: Vec<usize> = (0..cfg.n_traces).collect();
    par::map_collect(&idx, |&i| sinusoid_trace(cfg, i))
        .into_iter()
        .collect()
}
