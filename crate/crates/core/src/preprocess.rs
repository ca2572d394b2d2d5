//! Ingestion, normalization, total-variation segmentation and resampling.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{check_len, Error, Result};

/// `n × C` samples stored row-major, with the affine normalization that maps
/// raw values to the stored ones (`raw = stored · scale + offset`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub name: String,
    n: usize,
    channels: usize,
    samples: Vec<f64>,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    /// Channels whose raw values were constant when normalized.
    pub constant_channels: Vec<bool>,
}

impl TimeSeries {
    /// A raw (un-normalized) series: scale 1, offset 0.
    pub fn new(name: impl Into<String>, channels: usize, samples: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "series needs at least one channel".into(),
            ));
        }
        if !samples.len().is_multiple_of(channels) {
            return Err(Error::InvalidArgument(format!(
                "{} samples do not divide into {channels} channels",
                samples.len()
            )));
        }
        let n = samples.len() / channels;
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "series needs at least 2 timesteps, got {n}"
            )));
        }
        Ok(TimeSeries {
            name: name.into(),
            n,
            channels,
            samples,
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            constant_channels: vec![false; channels],
        })
    }

    pub fn from_channel(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        TimeSeries::new(name, 1, values)
    }

    /// A series whose samples are already in normalized units.
    pub fn with_normalization(
        name: impl Into<String>,
        channels: usize,
        samples: Vec<f64>,
        scale: Vec<f64>,
        offset: Vec<f64>,
    ) -> Result<Self> {
        let mut s = TimeSeries::new(name, channels, samples)?;
        check_len("scale", channels, scale.len())?;
        check_len("offset", channels, offset.len())?;
        s.scale = scale;
        s.offset = offset;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.samples[t * self.channels + c]
    }

    /// Row-major samples of timesteps `range`.
    pub fn rows(&self, range: Range<usize>) -> &[f64] {
        &self.samples[range.start * self.channels..range.end * self.channels]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Per-channel affine map onto `[-1, 1]`.
    ///
    /// A constant channel gets scale 1 and offset equal to the constant, so it
    /// maps to all zeros; it is flagged in `constant_channels`.
    pub fn normalize(&self) -> TimeSeries {
        let c = self.channels;
        let mut scale = vec![1.0; c];
        let mut offset = vec![0.0; c];
        let mut constant = vec![false; c];
        for ch in 0..c {
            let (lo, hi) = self
                .samples
                .iter()
                .skip(ch)
                .step_by(c)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if hi > lo {
                scale[ch] = (hi - lo) / 2.0;
                offset[ch] = (hi + lo) / 2.0;
            } else {
                offset[ch] = lo;
                constant[ch] = true;
            }
        }
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                ((v - offset[ch]) / scale[ch]).clamp(-1.0, 1.0)
            })
            .collect();
        TimeSeries {
            name: self.name.clone(),
            n: self.n,
            channels: c,
            samples,
            scale,
            offset,
            constant_channels: constant,
        }
    }

    /// Raw-unit values, row-major.
    pub fn denormalize(&self) -> Vec<f64> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % self.channels;
                v * self.scale[ch] + self.offset[ch]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmenterConfig {
    pub tau: f64,
    pub max_segment_len: usize,
}

impl SegmenterConfig {
    /// `max_segment_len` defaults to eight model windows.
    pub fn new(tau: f64, rae_len: usize) -> Self {
        SegmenterConfig {
            tau,
            max_segment_len: 8 * rae_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "tau must be a positive number, got {}",
                self.tau
            )));
        }
        if self.max_segment_len == 0 {
            return Err(Error::Config("max_segment_len must be positive".into()));
        }
        Ok(())
    }
}

/// Half-open range of timesteps.
pub type Segment = Range<usize>;

/// l1 norm across channels of the difference between timesteps `t - 1` and `t`.
#[inline]
fn step_variation(series: &TimeSeries, t: usize) -> f64 {
    let c = series.channels;
    let prev = &series.samples[(t - 1) * c..t * c];
    let cur = &series.samples[t * c..(t + 1) * c];
    prev.iter().zip(cur).map(|(a, b)| (b - a).abs()).sum()
}

/// Sum of absolute consecutive differences inside `range`.
pub fn total_variation(series: &TimeSeries, range: Range<usize>) -> Result<f64> {
    if range.start >= range.end || range.end > series.n {
        return Err(Error::InvalidArgument(format!(
            "range {range:?} is empty or exceeds series length {}",
            series.n
        )));
    }
    Ok(compensated_sum(
        (range.start + 1..range.end).map(|t| step_variation(series, t)),
    ))
}

/// Neumaier summation, so that totals over adjacent ranges agree with the
/// total over their union to within a few ulps.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Greedy left-to-right partition: a segment is closed as soon as its total
/// variation reaches `tau` or its length reaches `max_segment_len`.
pub fn segment_by_tv(series: &TimeSeries, cfg: &SegmenterConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let n = series.n;
    let mut segments = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        let mut tv = 0.0;
        while end < n && tv < cfg.tau && end - start < cfg.max_segment_len {
            tv += step_variation(series, end);
            end += 1;
        }
        segments.push(start..end);
        start = end;
    }
    Ok(segments)
}

/// Linear interpolation of `v` onto `m` evenly spaced points spanning the same
/// index range. Endpoints are preserved exactly.
pub fn resample(v: &[f64], m: usize) -> Result<Vec<f64>> {
    let n = v.len();
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!(
            "resampling needs at least 2 points on both sides (from {n} to {m})"
        )));
    }
    Ok(resample_unchecked(v, m))
}

pub(crate) fn resample_unchecked(v: &[f64], m: usize) -> Vec<f64> {
    let n = v.len();
    if m == n {
        return v.to_vec();
    }
    let span = (n - 1) as f64;
    let denom = (m - 1) as f64;
    (0..m)
        .map(|k| {
            if k == m - 1 {
                return v[n - 1];
            }
            let t = (k * (n - 1)) as f64 / denom;
            let i = (t.floor() as usize).min(n - 2);
            let frac = t - i as f64;
            debug_assert!(t <= span);
            if frac == 0.0 {
                v[i]
            } else {
                v[i] + (v[i + 1] - v[i]) * frac
            }
        })
        .collect()
}

/// Resamples each channel of a row-major `n × channels` block to `m` rows and
/// concatenates the channels (`[ch0; ch1; …]`, each of length `m`).
pub fn resample_channels_concat(rows: &[f64], channels: usize, m: usize) -> Result<Vec<f64>> {
    if channels == 0 || !rows.len().is_multiple_of(channels) {
        return Err(Error::InvalidArgument(
            "rows do not divide into channels".into(),
        ));
    }
    let n = rows.len() / channels;
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!(
            "resampling needs at least 2 points on both sides (from {n} to {m})"
        )));
    }
    Ok(resample_channels_concat_unchecked(rows, channels, m))
}

pub(crate) fn resample_channels_concat_unchecked(
    rows: &[f64],
    channels: usize,
    m: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * channels);
    for c in 0..channels {
        let ch: Vec<f64> = rows.iter().skip(c).step_by(channels).copied().collect();
        out.extend(resample_unchecked(&ch, m));
    }
    out
}

/// Inverse layout of [`resample_channels_concat`]: takes channel-concatenated
/// vectors of length `from` each and returns `to` row-major rows.
pub(crate) fn resample_concat_to_rows(concat: &[f64], channels: usize, to: usize) -> Vec<f64> {
    let from = concat.len() / channels;
    let mut out = vec![0.0; to * channels];
    for (c, ch) in concat.chunks_exact(from).enumerate() {
        for (t, v) in resample_unchecked(ch, to).into_iter().enumerate() {
            out[t * channels + c] = v;
        }
    }
    out
}

/// Parses a numeric CSV: one row per timestep, one column per channel. A first
/// row in which no cell is numeric is treated as a header.
pub fn load_csv<R: Read>(name: impl Into<String>, source: R) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut samples = Vec::new();
    let mut channels = 0;
    let mut first = true;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.iter().all(|cell| cell.parse::<f64>().is_err()) {
                continue;
            }
        }
        if channels == 0 {
            channels = record.len();
        } else if record.len() != channels {
            return Err(Error::Parse {
                row,
                column: record.len().min(channels) + 1,
                message: format!("expected {channels} columns, found {}", record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: col + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: col + 1,
                    message: format!("non-finite value: {cell:?}"),
                });
            }
            samples.push(v);
        }
    }
    if channels == 0 {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "no numeric data".into(),
        });
    }
    TimeSeries::new(name, channels, samples)
}

pub fn load_csv_path(path: &Path) -> Result<TimeSeries> {
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_csv(name, std::io::BufReader::new(file))
}

/// Writes row-major values, one row per timestep.
pub fn write_csv<W: Write>(mut out: W, channels: usize, values: &[f64]) -> Result<()> {
    for row in values.chunks(channels) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}
