//! Adaptive-window compression with a hard maximum-deviation bound, the
//! `RAEC` bitstream, and standalone decompression.
//!
//! At each cursor position a stride-halving search picks the longest window
//! whose reconstruction stays within `epsilon` of the input (in L∞, measured
//! at the window's original resolution). The window is resampled to the
//! model width, encoded, and its code is rounded to `f32` before the decoder
//! is simulated, so the compressor and the decompressor see identical codes.
//! When no window passes, `min_window` samples are stored verbatim and the
//! recurrent state is left untouched.

use crate::error::{check_len, Error, Result};
use crate::lstm::LstmState;
use crate::par;
use crate::preprocess::{resample_channels_concat_unchecked, resample_concat_to_rows, TimeSeries};
use crate::rae::{decode_step, encode_step, ByteReader, RaeParams, RaeState};

pub const STREAM_MAGIC: &[u8; 4] = b"RAEC";
pub const STREAM_VERSION: u16 = 1;
/// Bytes per original sample per channel in the ratio denominator.
pub const BASELINE_BYTES_PER_SAMPLE: usize = 4;

const KIND_CODED: u8 = 0;
const KIND_RAW: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    /// Maximum tolerated absolute deviation, in normalized units.
    pub epsilon: f64,
    pub rae_len: usize,
    pub min_window: usize,
    pub max_window: usize,
}

impl CodecConfig {
    /// Defaults: `min_window = max(2, rae_len / 4)`, `max_window = 8 · rae_len`.
    pub fn new(epsilon: f64, rae_len: usize) -> Self {
        CodecConfig {
            epsilon,
            rae_len,
            min_window: (rae_len / 4).max(2),
            max_window: 8 * rae_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.rae_len < 2 || self.rae_len > u16::MAX as usize {
            return Err(Error::Config(format!(
                "rae_len {} out of range [2, 65535]",
                self.rae_len
            )));
        }
        if self.min_window < 2 {
            return Err(Error::Config("min_window must be at least 2".into()));
        }
        if self.min_window > self.max_window {
            return Err(Error::Config(format!(
                "min_window {} exceeds max_window {}",
                self.min_window, self.max_window
            )));
        }
        if self.max_window > u16::MAX as usize {
            return Err(Error::Config(format!(
                "max_window {} does not fit the 16-bit window length field",
                self.max_window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Coded { window_len: u16, codes: Vec<f32> },
    Raw { window_len: u16, samples: Vec<f32> },
}

impl Block {
    pub fn window_len(&self) -> usize {
        match self {
            Block::Coded { window_len, .. } | Block::Raw { window_len, .. } => *window_len as usize,
        }
    }

    pub fn is_raw(&self) -> bool {
        matches!(self, Block::Raw { .. })
    }

    pub fn encoded_len(&self) -> usize {
        let payload = match self {
            Block::Coded { codes, .. } => codes.len(),
            Block::Raw { samples, .. } => samples.len(),
        };
        1 + 2 + 4 * payload
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub version: u16,
    pub flags: u16,
    pub n_samples: u64,
    pub n_channels: u16,
    pub rae_len: u16,
    pub d_h: u16,
    pub epsilon: f32,
    pub scale: Vec<f32>,
    pub offset: Vec<f32>,
    pub fingerprint: u32,
}

impl StreamHeader {
    pub fn encoded_len(&self) -> usize {
        4 + 2 + 2 + 8 + 2 + 2 + 2 + 4 + 8 * self.n_channels as usize + 4 + 4
    }
}

/// Header flag: at least one channel was constant when normalized.
pub const FLAG_CONSTANT_CHANNEL: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedStream {
    pub header: StreamHeader,
    pub blocks: Vec<Block>,
}

impl CompressedStream {
    /// Serialized size including the trailing checksum.
    pub fn encoded_len(&self) -> usize {
        self.header.encoded_len() + self.blocks.iter().map(Block::encoded_len).sum::<usize>() + 4
    }

    pub fn n_raw_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_raw()).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.flags.to_le_bytes());
        out.extend_from_slice(&h.n_samples.to_le_bytes());
        out.extend_from_slice(&h.n_channels.to_le_bytes());
        out.extend_from_slice(&h.rae_len.to_le_bytes());
        out.extend_from_slice(&h.d_h.to_le_bytes());
        out.extend_from_slice(&h.epsilon.to_le_bytes());
        for (s, o) in h.scale.iter().zip(&h.offset) {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&h.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            let (kind, len, payload) = match b {
                Block::Coded { window_len, codes } => (KIND_CODED, window_len, codes),
                Block::Raw {
                    window_len,
                    samples,
                } => (KIND_RAW, window_len, samples),
            };
            out.push(kind);
            out.extend_from_slice(&len.to_le_bytes());
            for v in payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len(), "stream too short"));
        }
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != STREAM_MAGIC {
            return Err(Error::format(0, "bad stream magic"));
        }
        let version = r.u16()?;
        if version != STREAM_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported stream version {version}"),
            ));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let body = &bytes[..body_end];
        let mut r = ByteReader::at(body, r.pos);

        let flags = r.u16()?;
        let n_samples = r.u64()?;
        let n_channels = r.u16()?;
        let rae_len = r.u16()?;
        let d_h = r.u16()?;
        let epsilon = r.f32()?;
        if n_channels == 0 {
            return Err(Error::format(16, "stream declares zero channels"));
        }
        let mut scale = Vec::with_capacity(n_channels as usize);
        let mut offset = Vec::with_capacity(n_channels as usize);
        for _ in 0..n_channels {
            scale.push(r.f32()?);
            offset.push(r.f32()?);
        }
        let fingerprint = r.u32()?;
        let n_blocks = r.u32()? as usize;

        let c = n_channels as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(r.remaining() / 3 + 1));
        let mut covered: u64 = 0;
        for i in 0..n_blocks {
            let at = r.pos;
            let kind = r.u8()?;
            let window_len = r.u16()?;
            if window_len == 0 {
                return Err(Error::format(at, format!("block {i} has zero length")));
            }
            covered += window_len as u64;
            if covered > n_samples {
                return Err(Error::format(
                    at,
                    format!("block {i} overruns the declared {n_samples} samples"),
                ));
            }
            let count = match kind {
                KIND_CODED => d_h as usize,
                KIND_RAW => window_len as usize * c,
                other => return Err(Error::format(at, format!("unknown block kind {other}"))),
            };
            if count * 4 > r.remaining() {
                return Err(Error::format(r.pos, format!("block {i} payload truncated")));
            }
            let payload: Vec<f32> = (0..count).map(|_| r.f32()).collect::<Result<_>>()?;
            blocks.push(if kind == KIND_CODED {
                Block::Coded {
                    window_len,
                    codes: payload,
                }
            } else {
                Block::Raw {
                    window_len,
                    samples: payload,
                }
            });
        }
        if covered != n_samples {
            return Err(Error::format(
                r.pos,
                format!("blocks cover {covered} samples, header declares {n_samples}"),
            ));
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos, "trailing bytes after last block"));
        }
        Ok(CompressedStream {
            header: StreamHeader {
                version,
                flags,
                n_samples,
                n_channels,
                rae_len,
                d_h,
                epsilon,
                scale,
                offset,
                fingerprint,
            },
            blocks,
        })
    }
}

/// Result of evaluating one candidate window.
#[derive(Debug, Clone)]
pub struct WindowProbe {
    pub codes: Vec<f32>,
    /// Row-major reconstruction at the window's own length.
    pub reconstruction: Vec<f64>,
    pub linf: f64,
    /// State after committing this window.
    pub next: RaeState,
}

/// Encodes `series[st .. st + len]` from `state` and decodes it back exactly
/// as the decompressor would.
pub fn probe_window(
    params: &RaeParams,
    state: &RaeState,
    series: &TimeSeries,
    st: usize,
    len: usize,
) -> Result<WindowProbe> {
    let c = series.channels();
    let rae_len = params.dims.rae_len();
    if len < 2 || st + len > series.len() {
        return Err(Error::InvalidArgument(format!(
            "window {st}..{} invalid for series of length {}",
            st + len,
            series.len()
        )));
    }
    check_len("series channels", params.dims.n_channels, c)?;
    let original = series.rows(st..st + len);
    let x = resample_channels_concat_unchecked(original, c, rae_len);
    let (h, enc_next) = encode_step(params, state, &x)?;
    let codes: Vec<f32> = h.iter().map(|&v| v as f32).collect();
    let (reconstruction, dec_next) = decode_window(params, &state.dec, &codes, len, c)?;
    let linf = reconstruction
        .iter()
        .zip(original)
        .map(|(a, b)| (a - b).abs())
        .fold(
            0.0,
            |m: f64, d| if d.is_nan() { f64::NAN } else { m.max(d) },
        );
    Ok(WindowProbe {
        codes,
        reconstruction,
        linf,
        next: RaeState {
            enc: enc_next.enc,
            dec: dec_next,
        },
    })
}

/// Decoder half shared by the compressor and the decompressor.
fn decode_window(
    params: &RaeParams,
    dec: &LstmState,
    codes: &[f32],
    len: usize,
    channels: usize,
) -> Result<(Vec<f64>, LstmState)> {
    let h: Vec<f64> = codes.iter().map(|&v| v as f64).collect();
    // decode_step never reads the encoder half
    let state = RaeState {
        enc: LstmState::zeros(params.dims.d_m),
        dec: dec.clone(),
    };
    let (x_hat, next) = decode_step(params, &state, &h)?;
    Ok((resample_concat_to_rows(&x_hat, channels, len), next.dec))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOutcome<T> {
    /// Longest passing length recorded by the search, with its probe output.
    pub best: Option<(usize, T)>,
    /// Number of distinct lengths evaluated.
    pub probes: usize,
    pub initial_len: usize,
}

/// Stride-halving window search over `[min_window, min(max_window, remaining)]`.
///
/// Starts at the upper bound with stride `len / 2`; a passing probe is
/// recorded and the length grows by the stride, a failing one shrinks it; the
/// stride halves after every probe until it reaches zero. A length that was
/// already evaluated is not evaluated again. `probe` returns whether the
/// window passes plus an arbitrary payload kept for the best length.
pub fn search_window_with<T, F>(
    remaining: usize,
    cfg: &CodecConfig,
    mut probe: F,
) -> Result<SearchOutcome<T>>
where
    F: FnMut(usize) -> Result<(bool, T)>,
{
    let upper = remaining.min(cfg.max_window);
    let lower = cfg.min_window.min(upper);
    let mut len = upper;
    let mut stride = len / 2;
    let mut seen: Vec<(usize, bool)> = Vec::new();
    let mut best: Option<(usize, T)> = None;
    let mut probes = 0;
    while stride >= 1 {
        let pass = match seen.iter().find(|(l, _)| *l == len) {
            Some(&(_, pass)) => pass,
            None => {
                probes += 1;
                let (pass, payload) = probe(len)?;
                seen.push((len, pass));
                if pass {
                    best = Some((len, payload));
                }
                pass
            }
        };
        len = if pass {
            len + stride
        } else {
            len.saturating_sub(stride)
        };
        len = len.clamp(lower, upper);
        stride /= 2;
    }
    Ok(SearchOutcome {
        best,
        probes,
        initial_len: upper,
    })
}

/// Longest window starting at `st` that the search accepts, probing from
/// copies of the committed `state`.
pub fn search_window(
    params: &RaeParams,
    state: &RaeState,
    series: &TimeSeries,
    st: usize,
    cfg: &CodecConfig,
) -> Result<Option<usize>> {
    Ok(search(params, state, series, st, cfg)?
        .best
        .map(|(len, _)| len))
}

fn search(
    params: &RaeParams,
    state: &RaeState,
    series: &TimeSeries,
    st: usize,
    cfg: &CodecConfig,
) -> Result<SearchOutcome<WindowProbe>> {
    if st >= series.len() {
        return Err(Error::InvalidArgument(format!(
            "cursor {st} past series end {}",
            series.len()
        )));
    }
    search_window_with(series.len() - st, cfg, |len| {
        let p = probe_window(params, state, series, st, len)?;
        Ok((p.linf <= cfg.epsilon, p))
    })
}

/// Per-window search bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchRecord {
    pub start: usize,
    pub initial_len: usize,
    pub probes: usize,
    pub chosen: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub stream: CompressedStream,
    /// Exactly what [`decompress`] will return for `stream`.
    pub reconstruction: TimeSeries,
    pub searches: Vec<SearchRecord>,
}

impl Compressed {
    pub fn ratio(&self) -> f64 {
        stream_ratio(
            &self.stream,
            self.reconstruction.len(),
            self.reconstruction.channels(),
        )
    }
}

fn check_model(params: &RaeParams, channels: usize, rae_len: usize, d_h: usize) -> Result<()> {
    let dims = &params.dims;
    if dims.n_channels != channels {
        return Err(Error::InvalidArgument(format!(
            "model expects {} channels, series has {channels}",
            dims.n_channels
        )));
    }
    check_len("model window length", dims.rae_len(), rae_len)?;
    check_len("model code width", dims.d_h, d_h)
}

/// Compresses a normalized series. Whole-series L∞ between `series` and the
/// returned reconstruction never exceeds `cfg.epsilon`.
pub fn compress(params: &RaeParams, series: &TimeSeries, cfg: &CodecConfig) -> Result<Compressed> {
    cfg.validate()?;
    let c = series.channels();
    check_model(params, c, cfg.rae_len, params.dims.d_h)?;
    if c > u16::MAX as usize {
        return Err(Error::Config(format!(
            "{c} channels do not fit the stream header"
        )));
    }

    let n = series.len();
    let mut state = RaeState::zeros(&params.dims);
    let mut blocks = Vec::new();
    let mut searches = Vec::new();
    let mut recon: Vec<f64> = Vec::with_capacity(n * c);
    let mut st = 0;

    let push_raw = |blocks: &mut Vec<Block>, recon: &mut Vec<f64>, st: usize, len: usize| {
        let samples: Vec<f32> = series
            .rows(st..st + len)
            .iter()
            .map(|&v| v as f32)
            .collect();
        recon.extend(samples.iter().map(|&v| v as f64));
        blocks.push(Block::Raw {
            window_len: len as u16,
            samples,
        });
    };

    while st < n {
        let remaining = n - st;
        if remaining < cfg.min_window {
            push_raw(&mut blocks, &mut recon, st, remaining);
            break;
        }
        let outcome = search(params, &state, series, st, cfg)?;
        searches.push(SearchRecord {
            start: st,
            initial_len: outcome.initial_len,
            probes: outcome.probes,
            chosen: outcome.best.as_ref().map(|(l, _)| *l),
        });
        match outcome.best {
            Some((len, probe)) => {
                recon.extend_from_slice(&probe.reconstruction);
                blocks.push(Block::Coded {
                    window_len: len as u16,
                    codes: probe.codes,
                });
                state = probe.next;
                st += len;
            }
            None => {
                push_raw(&mut blocks, &mut recon, st, cfg.min_window);
                st += cfg.min_window;
            }
        }
    }

    let scale: Vec<f32> = series.scale.iter().map(|&v| v as f32).collect();
    let offset: Vec<f32> = series.offset.iter().map(|&v| v as f32).collect();
    let flags = if series.constant_channels.iter().any(|&b| b) {
        FLAG_CONSTANT_CHANNEL
    } else {
        0
    };
    let stream = CompressedStream {
        header: StreamHeader {
            version: STREAM_VERSION,
            flags,
            n_samples: n as u64,
            n_channels: c as u16,
            rae_len: cfg.rae_len as u16,
            d_h: params.dims.d_h as u16,
            epsilon: cfg.epsilon as f32,
            scale: scale.clone(),
            offset: offset.clone(),
            fingerprint: params.fingerprint(),
        },
        blocks,
    };
    let reconstruction = TimeSeries::with_normalization(
        series.name.clone(),
        c,
        recon,
        scale.iter().map(|&v| v as f64).collect(),
        offset.iter().map(|&v| v as f64).collect(),
    )?;
    Ok(Compressed {
        stream,
        reconstruction,
        searches,
    })
}

/// Compresses independent series, in parallel when the feature is enabled.
pub fn compress_batch(
    params: &RaeParams,
    series: &[TimeSeries],
    cfg: &CodecConfig,
) -> Vec<Result<Compressed>> {
    par::map_collect(series, |s| compress(params, s, cfg))
}

pub fn compress_batch_sequential(
    params: &RaeParams,
    series: &[TimeSeries],
    cfg: &CodecConfig,
) -> Vec<Result<Compressed>> {
    par::map_collect_sequential(series, |s| compress(params, s, cfg))
}

/// Rebuilds the normalized series from `stream`; use
/// [`TimeSeries::denormalize`] for raw units.
pub fn decompress(params: &RaeParams, stream: &CompressedStream) -> Result<TimeSeries> {
    let h = &stream.header;
    let actual = params.fingerprint();
    if h.fingerprint != actual {
        return Err(Error::Fingerprint {
            expected: h.fingerprint,
            actual,
        });
    }
    let c = h.n_channels as usize;
    check_model(params, c, h.rae_len as usize, h.d_h as usize)?;
    let n = h.n_samples as usize;
    let mut dec = LstmState::zeros(params.dims.d_m);
    let mut out = Vec::with_capacity(n * c);
    let mut covered = 0usize;
    for (i, b) in stream.blocks.iter().enumerate() {
        let len = b.window_len();
        covered += len;
        if len == 0 || covered > n {
            return Err(Error::format(
                i,
                format!("block {i} overruns the declared {n} samples"),
            ));
        }
        match b {
            Block::Coded { codes, .. } => {
                check_len("block codes", params.dims.d_h, codes.len())?;
                if len < 2 {
                    return Err(Error::format(
                        i,
                        format!("coded block {i} shorter than 2 samples"),
                    ));
                }
                let (rows, next) = decode_window(params, &dec, codes, len, c)?;
                out.extend(rows);
                dec = next;
            }
            Block::Raw { samples, .. } => {
                check_len("raw block samples", len * c, samples.len())?;
                out.extend(samples.iter().map(|&v| v as f64));
            }
        }
    }
    if covered != n {
        return Err(Error::format(
            stream.blocks.len(),
            format!("blocks cover {covered} samples, header declares {n}"),
        ));
    }
    TimeSeries::with_normalization(
        "decompressed",
        c,
        out,
        h.scale.iter().map(|&v| v as f64).collect(),
        h.offset.iter().map(|&v| v as f64).collect(),
    )
}

pub fn decompress_bytes(params: &RaeParams, bytes: &[u8]) -> Result<TimeSeries> {
    decompress(params, &CompressedStream::from_bytes(bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub linf: f64,
    pub rmse: f64,
}

pub fn metrics(x: &[f64], x_hat: &[f64]) -> Result<Metrics> {
    check_len("metrics", x.len(), x_hat.len())?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("metrics of empty series".into()));
    }
    let mut linf: f64 = 0.0;
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(x_hat) {
        let d = (a - b).abs();
        linf = linf.max(d);
        sq += d * d;
    }
    Ok(Metrics {
        linf,
        rmse: (sq / x.len() as f64).sqrt(),
    })
}

/// Serialized stream bytes over `n_samples · channels · 4`.
pub fn stream_ratio(stream: &CompressedStream, n_samples: usize, channels: usize) -> f64 {
    stream.encoded_len() as f64 / (n_samples * channels * BASELINE_BYTES_PER_SAMPLE) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rae::RaeDims;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_model() -> RaeParams {
        RaeParams::zeros(RaeDims::default()).unwrap()
    }

    fn noise_series(n: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::from_channel("noise", (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .normalize()
    }

    #[test]
    fn config_validation() {
        let ok = CodecConfig::new(0.1, 32);
        assert_eq!((ok.min_window, ok.max_window), (8, 256));
        assert!(ok.validate().is_ok());
        assert!(CodecConfig { epsilon: 0.0, ..ok }.validate().is_err());
        assert!(CodecConfig {
            epsilon: -1.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(CodecConfig {
            max_window: 70_000,
            ..ok
        }
        .validate()
        .is_err());
        assert!(CodecConfig {
            min_window: 300,
            ..ok
        }
        .validate()
        .is_err());
        assert_eq!(CodecConfig::new(0.1, 4).min_window, 2);
    }

    #[test]
    fn zero_model_codes_flat_series_at_max_window() {
        let series = TimeSeries::from_channel("z", vec![0.0; 1024])
            .unwrap()
            .normalize();
        let out = compress(&zero_model(), &series, &CodecConfig::new(0.1, 32)).unwrap();
        assert_eq!(out.stream.blocks.len(), 4);
        assert!(out
            .stream
            .blocks
            .iter()
            .all(|b| !b.is_raw() && b.window_len() == 256));
        // header 34 + 8, four blocks of 1 + 2 + 4·4, checksum 4
        assert_eq!(out.stream.encoded_len(), 42 + 4 * 19 + 4);
        assert_eq!(out.stream.to_bytes().len(), out.stream.encoded_len());
        assert_eq!(out.ratio(), 122.0 / 4096.0);
        assert_eq!(out.stream.header.flags, FLAG_CONSTANT_CHANNEL);
    }

    #[test]
    fn single_block_ratio_arithmetic() {
        let series = TimeSeries::from_channel("z", vec![0.0; 64]).unwrap();
        let out = compress(&zero_model(), &series, &CodecConfig::new(0.1, 32)).unwrap();
        assert_eq!(out.stream.blocks.len(), 1);
        assert_eq!(out.stream.blocks[0].encoded_len(), 19);
        assert_eq!(out.ratio(), 65.0 / 256.0);
    }

    #[test]
    fn white_noise_falls_back_to_raw() {
        let series = noise_series(500, 1);
        let params = RaeParams::init(RaeDims::default(), 3).unwrap();
        for p in [&zero_model(), &params] {
            let out = compress(p, &series, &CodecConfig::new(0.01, 32)).unwrap();
            assert_eq!(out.stream.n_raw_blocks(), out.stream.blocks.len());
            let back = decompress(p, &out.stream).unwrap();
            assert_eq!(back.samples(), out.reconstruction.samples());
            let m = metrics(series.samples(), back.samples()).unwrap();
            assert!(m.linf < 1e-7);
            assert!(out.ratio() > 1.0);
        }
    }

    #[test]
    fn raw_blocks_are_exact_for_f32_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut v: Vec<f64> = (0..300)
            .map(|_| rng.gen_range(-1.0f32..1.0) as f64)
            .collect();
        v[0] = -1.0;
        v[1] = 1.0;
        let series = TimeSeries::from_channel("n", v).unwrap().normalize();
        let out = compress(&zero_model(), &series, &CodecConfig::new(0.01, 32)).unwrap();
        assert_eq!(out.reconstruction.samples(), series.samples());
    }

    /// Literal transcription of the stride-halving schedule without memoing.
    fn reference_search(
        remaining: usize,
        cfg: &CodecConfig,
        pass: impl Fn(usize) -> bool,
    ) -> (Option<usize>, Vec<usize>) {
        let upper = remaining.min(cfg.max_window);
        let lower = cfg.min_window.min(upper);
        let mut input_len = upper;
        let mut stride = input_len / 2;
        let mut recorded = None;
        let mut probed = Vec::new();
        while stride >= 1 {
            probed.push(input_len);
            if pass(input_len) {
                recorded = Some(input_len);
                input_len += stride;
            } else {
                input_len = input_len.saturating_sub(stride);
            }
            input_len = input_len.max(lower).min(upper);
            stride /= 2;
        }
        (recorded, probed)
    }

    fn budget(initial: usize) -> usize {
        (initial as f64).log2().ceil() as usize + 2
    }

    #[test]
    fn search_always_pass() {
        let cfg = CodecConfig {
            max_window: 256,
            ..CodecConfig::new(0.1, 32)
        };
        let out = search_window_with(100, &cfg, |len| Ok((true, len))).unwrap();
        assert_eq!(out.best, Some((100, 100)));
        assert_eq!(out.probes, 1);
    }

    #[test]
    fn search_always_fail() {
        let cfg = CodecConfig::new(0.1, 32);
        for remaining in [8, 9, 33, 100, 256, 1000] {
            let out = search_window_with(remaining, &cfg, |_| Ok((false, ()))).unwrap();
            assert!(out.best.is_none());
            let initial = remaining.min(cfg.max_window);
            assert!(
                out.probes <= (initial as f64).log2().ceil() as usize + 1,
                "{remaining}: {}",
                out.probes
            );
        }
    }

    #[test]
    fn search_monotone_threshold_37() {
        let cfg = CodecConfig::new(0.1, 32);
        let pass = |len: usize| len <= 37;
        let out = search_window_with(100, &cfg, |len| Ok((pass(len), ()))).unwrap();
        let (reference, probed) = reference_search(100, &cfg, pass);
        let best = out.best.map(|(l, _)| l);
        assert_eq!(best, reference);
        let largest_reachable = probed.iter().copied().filter(|&l| l <= 37).max();
        assert_eq!(best, largest_reachable);
        assert!(best.unwrap() <= 37);
        assert_eq!(best, Some(37));
    }

    #[test]
    fn search_matches_reference_for_all_thresholds() {
        let cfg = CodecConfig::new(0.1, 32);
        for remaining in [8usize, 20, 64, 100, 255, 256, 3000] {
            for threshold in 0..=remaining.min(cfg.max_window) + 1 {
                let pass = |len: usize| len <= threshold;
                let out = search_window_with(remaining, &cfg, |len| Ok((pass(len), ()))).unwrap();
                let (reference, probed) = reference_search(remaining, &cfg, pass);
                assert_eq!(out.best.map(|(l, _)| l), reference);
                let distinct = {
                    let mut p = probed.clone();
                    p.sort_unstable();
                    p.dedup();
                    p.len()
                };
                assert_eq!(out.probes, distinct);
                assert!(out.probes <= budget(out.initial_len));
                if let Some(r) = reference {
                    assert!(r <= threshold);
                }
            }
        }
    }

    #[test]
    fn search_window_uses_model() {
        let series = TimeSeries::from_channel("z", vec![0.0; 300]).unwrap();
        let p = zero_model();
        let s = RaeState::zeros(&p.dims);
        let cfg = CodecConfig::new(0.1, 32);
        assert_eq!(search_window(&p, &s, &series, 0, &cfg).unwrap(), Some(256));
        assert_eq!(
            search_window(&p, &s, &series, 100, &cfg).unwrap(),
            Some(200)
        );
        assert!(search_window(&p, &s, &series, 300, &cfg).is_err());
    }

    #[test]
    fn decompress_rejects_wrong_model() {
        let series = noise_series(200, 4);
        let a = RaeParams::init(RaeDims::default(), 1).unwrap();
        let b = RaeParams::init(RaeDims::default(), 2).unwrap();
        let out = compress(&a, &series, &CodecConfig::new(0.2, 32)).unwrap();
        assert!(matches!(
            decompress(&b, &out.stream),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn compress_rejects_channel_mismatch() {
        let series = TimeSeries::new("two", 2, vec![0.0; 40]).unwrap();
        assert!(compress(&zero_model(), &series, &CodecConfig::new(0.1, 32)).is_err());
        let series = TimeSeries::from_channel("one", vec![0.0; 40]).unwrap();
        assert!(compress(&zero_model(), &series, &CodecConfig::new(0.1, 16)).is_err());
    }

    #[test]
    fn stream_parse_errors() {
        let series = noise_series(120, 5);
        let p = RaeParams::init(RaeDims::default(), 1).unwrap();
        let bytes = compress(&p, &series, &CodecConfig::new(0.3, 32))
            .unwrap()
            .stream
            .to_bytes();
        assert!(CompressedStream::from_bytes(&bytes).is_ok());

        assert!(matches!(
            CompressedStream::from_bytes(&[]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            CompressedStream::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(
            CompressedStream::from_bytes(&bad),
            Err(Error::Checksum { .. })
        ));
        assert!(CompressedStream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn stream_overrun_is_a_format_error() {
        let stream = CompressedStream {
            header: StreamHeader {
                version: STREAM_VERSION,
                flags: 0,
                n_samples: 3,
                n_channels: 1,
                rae_len: 32,
                d_h: 4,
                epsilon: 0.1,
                scale: vec![1.0],
                offset: vec![0.0],
                fingerprint: 0,
            },
            blocks: vec![Block::Raw {
                window_len: 4,
                samples: vec![0.0; 4],
            }],
        };
        assert!(matches!(
            CompressedStream::from_bytes(&stream.to_bytes()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn metrics_examples() {
        let m = metrics(&[0.3, 0.2], &[0.3, 0.2]).unwrap();
        assert_eq!((m.linf, m.rmse), (0.0, 0.0));
        let m = metrics(&[0.0; 4], &[0.1, -0.1, 0.0, 0.0]).unwrap();
        assert_eq!(m.linf, 0.1);
        assert!((m.rmse - (0.02f64 / 4.0).sqrt()).abs() < 1e-15);
        assert!((m.rmse - 0.070_710_678_118_654_75).abs() < 1e-15);
        assert!(metrics(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn batch_matches_sequential() {
        let p = RaeParams::init(RaeDims::default(), 9).unwrap();
        let series: Vec<TimeSeries> = (0..4).map(|s| noise_series(150, s)).collect();
        let cfg = CodecConfig::new(0.5, 32);
        let a = compress_batch(&p, &series, &cfg);
        let b = compress_batch_sequential(&p, &series, &cfg);
        for (x, y) in a.into_iter().zip(b) {
            assert_eq!(x.unwrap().stream, y.unwrap().stream);
        }
    }

    fn arb_stream() -> impl Strategy<Value = CompressedStream> {
        (1u16..4, 1u16..6, any::<u16>(), any::<u32>()).prop_flat_map(|(c, d_h, flags, fp)| {
            let block = prop_oneof![
                (
                    1u16..40,
                    proptest::collection::vec(-1e3f32..1e3, d_h as usize)
                )
                    .prop_map(|(window_len, codes)| Block::Coded { window_len, codes }),
                (1u16..20).prop_flat_map(move |len| {
                    proptest::collection::vec(-1e3f32..1e3, len as usize * c as usize).prop_map(
                        move |samples| Block::Raw {
                            window_len: len,
                            samples,
                        },
                    )
                }),
            ];
            (
                proptest::collection::vec(block, 0..12),
                proptest::collection::vec(0.001f32..100.0, c as usize),
                proptest::collection::vec(-100f32..100.0, c as usize),
                0.001f32..1.0,
            )
                .prop_map(move |(blocks, scale, offset, epsilon)| {
                    let n: u64 = blocks.iter().map(|b| b.window_len() as u64).sum();
                    CompressedStream {
                        header: StreamHeader {
                            version: STREAM_VERSION,
                            flags,
                            n_samples: n,
                            n_channels: c,
                            rae_len: 32,
                            d_h,
                            epsilon,
                            scale,
                            offset,
                            fingerprint: fp,
                        },
                        blocks,
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn stream_serialization_round_trips(stream in arb_stream()) {
            let bytes = stream.to_bytes();
            prop_assert_eq!(bytes.len(), stream.encoded_len());
            let back = CompressedStream::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &stream);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn deviation_bound_holds(
            n in 20usize..600,
            channels in 1usize..=2,
            eps in 0.05f64..0.3,
            model_seed in 0u64..1000,
            data_seed in 0u64..1000,
        ) {
            let dims = RaeDims::for_window(8, channels, 6, 3, 6);
            let params = RaeParams::init(dims, model_seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
            let mut level = 0.0;
            let raw: Vec<f64> = (0..n * channels)
                .map(|_| {
                    level += rng.gen_range(-0.1..0.1);
                    level
                })
                .collect();
            let series = TimeSeries::new("rw", channels, raw).unwrap().normalize();
            let out = compress(&params, &series, &CodecConfig::new(eps, 8)).unwrap();
            let tiled: usize = out.stream.blocks.iter().map(Block::window_len).sum();
            prop_assert_eq!(tiled, n);
            let back = decompress_bytes(&params, &out.stream.to_bytes()).unwrap();
            prop_assert_eq!(back.samples(), out.reconstruction.samples());
            let m = metrics(series.samples(), back.samples()).unwrap();
            prop_assert!(m.linf <= eps);
            for s in &out.searches {
                prop_assert!(s.probes <= budget(s.initial_len));
            }
        }
    }
}
