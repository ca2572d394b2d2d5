//! Recurrent autoencoder: an LSTM encoder and an LSTM decoder joined by a
//! low-dimensional code.
//!
//! Per step the encoder extracts `z = φx(x)`, emits the code
//! `h = g_enc(z ‖ m_enc)` from its hidden state *before* consuming `z`, and
//! only then advances its LSTM with `z`. The decoder recovers `ẑ = g_dec(h)`,
//! reconstructs `x̂ = o(φz(ẑ) ‖ c_dec ‖ m_dec)` from its pre-step state, then
//! advances its LSTM with `ẑ`. The two sides never read each other's state,
//! so the decoded sequence is a function of the codes alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::lstm::{
    lstm_step_backward_unchecked, lstm_step_unchecked, LstmCache, LstmParams, LstmState,
};
use crate::nn::{mse_loss, Activation, DenseLayer, ParamSet};

pub const MODEL_MAGIC: &[u8; 4] = b"RAEM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaeDims {
    /// Model input width, `rae_len × n_channels`.
    pub d_in: usize,
    pub d_z: usize,
    /// Code width.
    pub d_h: usize,
    /// LSTM hidden width, shared by encoder and decoder.
    pub d_m: usize,
    pub n_channels: usize,
}

impl RaeDims {
    pub fn for_window(
        rae_len: usize,
        n_channels: usize,
        d_z: usize,
        d_h: usize,
        d_m: usize,
    ) -> Self {
        RaeDims {
            d_in: rae_len * n_channels,
            d_z,
            d_h,
            d_m,
            n_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_z == 0 || self.d_h == 0 || self.d_m == 0 || self.n_channels == 0
        {
            return Err(Error::InvalidArgument(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        if self.d_h >= self.d_in {
            return Err(Error::InvalidArgument(format!(
                "code width d_h = {} must be smaller than d_in = {}",
                self.d_h, self.d_in
            )));
        }
        if !self.d_in.is_multiple_of(self.n_channels) {
            return Err(Error::InvalidArgument(format!(
                "d_in = {} is not a multiple of n_channels = {}",
                self.d_in, self.n_channels
            )));
        }
        Ok(())
    }

    /// Per-channel window resolution.
    pub fn rae_len(&self) -> usize {
        self.d_in / self.n_channels
    }

    /// Hidden width of the two-layer maps.
    pub fn hidden(&self) -> usize {
        self.d_in.max(2 * self.d_h)
    }
}

impl Default for RaeDims {
    fn default() -> Self {
        RaeDims::for_window(32, 1, 16, 4, 16)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaeParams {
    pub dims: RaeDims,
    pub phi_x: DenseLayer,
    pub g_enc: [DenseLayer; 2],
    pub f_enc: LstmParams,
    pub g_dec: [DenseLayer; 2],
    pub f_dec: LstmParams,
    pub phi_z: DenseLayer,
    pub o: [DenseLayer; 2],
}

impl RaeParams {
    /// All-zero network with the right shapes.
    pub fn zeros(dims: RaeDims) -> Result<Self> {
        dims.validate()?;
        let RaeDims {
            d_in,
            d_z,
            d_h,
            d_m,
            ..
        } = dims;
        let hid = dims.hidden();
        Ok(RaeParams {
            dims,
            phi_x: DenseLayer::zeros(d_in, d_z, Activation::Tanh),
            g_enc: [
                DenseLayer::zeros(d_z + d_m, hid, Activation::Tanh),
                DenseLayer::zeros(hid, d_h, Activation::Identity),
            ],
            f_enc: LstmParams::zeros(d_z, d_m),
            g_dec: [
                DenseLayer::zeros(d_h, hid, Activation::Tanh),
                DenseLayer::zeros(hid, d_z, Activation::Identity),
            ],
            f_dec: LstmParams::zeros(d_z, d_m),
            phi_z: DenseLayer::zeros(d_z, d_in, Activation::Tanh),
            o: [
                DenseLayer::zeros(d_in + 2 * d_m, hid, Activation::Tanh),
                DenseLayer::zeros(hid, d_in, Activation::Identity),
            ],
        })
    }

    /// Seeded Glorot-uniform initialization with forget-gate biases at +1.
    pub fn init(dims: RaeDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let RaeDims {
            d_in,
            d_z,
            d_h,
            d_m,
            ..
        } = dims;
        let hid = dims.hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        Ok(RaeParams {
            dims,
            phi_x: DenseLayer::glorot(d_in, d_z, Activation::Tanh, rng),
            g_enc: [
                DenseLayer::glorot(d_z + d_m, hid, Activation::Tanh, rng),
                DenseLayer::glorot(hid, d_h, Activation::Identity, rng),
            ],
            f_enc: LstmParams::glorot(d_z, d_m, 1.0, rng),
            g_dec: [
                DenseLayer::glorot(d_h, hid, Activation::Tanh, rng),
                DenseLayer::glorot(hid, d_z, Activation::Identity, rng),
            ],
            f_dec: LstmParams::glorot(d_z, d_m, 1.0, rng),
            phi_z: DenseLayer::glorot(d_z, d_in, Activation::Tanh, rng),
            o: [
                DenseLayer::glorot(d_in + 2 * d_m, hid, Activation::Tanh, rng),
                DenseLayer::glorot(hid, d_in, Activation::Identity, rng),
            ],
        })
    }

    pub fn zeros_like(&self) -> Self {
        RaeParams::zeros(self.dims).expect("dims were validated at construction")
    }

    /// Section names in file and tensor order.
    pub fn tensor_names() -> Vec<String> {
        let mut names = Vec::new();
        let dense = |names: &mut Vec<String>, prefix: &str| {
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        };
        let lstm = |names: &mut Vec<String>, prefix: &str| {
            for gate in ["i", "o", "f", "c"] {
                names.push(format!("{prefix}.w_{gate}"));
                names.push(format!("{prefix}.u_{gate}"));
                names.push(format!("{prefix}.b_{gate}"));
            }
        };
        dense(&mut names, "phi_x");
        dense(&mut names, "g_enc.0");
        dense(&mut names, "g_enc.1");
        lstm(&mut names, "f_enc");
        dense(&mut names, "g_dec.0");
        dense(&mut names, "g_dec.1");
        lstm(&mut names, "f_dec");
        dense(&mut names, "phi_z");
        dense(&mut names, "o.0");
        dense(&mut names, "o.1");
        names
    }

    /// CRC-32 of the serialized model; identifies the model inside streams.
    pub fn fingerprint(&self) -> u32 {
        let bytes = self.save();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
    }

    /// Serializes into the `RAEM` model format.
    pub fn save(&self) -> Vec<u8> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(64 + self.num_params() * 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for v in [d.d_in, d.d_z, d.d_h, d.d_m, d.n_channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (name, t) in RaeParams::tensor_names().iter().zip(self.tensors()) {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if bytes.len() < 4 + 2 + 20 + 4 {
            return Err(Error::format(bytes.len(), "model file truncated"));
        }
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::format(0, "bad model magic"));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported model version {version}"),
            ));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let dims = RaeDims {
            d_in: dims[0],
            d_z: dims[1],
            d_h: dims[2],
            d_m: dims[3],
            n_channels: dims[4],
        };
        dims.validate()
            .map_err(|e| Error::format(6, format!("invalid dims: {e}")))?;

        let mut params = RaeParams::zeros(dims)?;
        let names = RaeParams::tensor_names();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let at = r.pos;
            let len = r.u8()? as usize;
            let found = r.take(len)?;
            if found != name.as_bytes() {
                return Err(Error::format(
                    at,
                    format!(
                        "expected section {name}, found {:?}",
                        String::from_utf8_lossy(found)
                    ),
                ));
            }
            let at = r.pos;
            let count = r.u32()? as usize;
            if count != t.len() {
                return Err(Error::format(
                    at,
                    format!(
                        "section {name} holds {count} values, dims require {}",
                        t.len()
                    ),
                ));
            }
            for v in t.iter_mut() {
                *v = r.f64()?;
            }
        }
        if r.pos != body_end {
            return Err(Error::format(r.pos, "trailing bytes after last section"));
        }
        Ok(params)
    }
}

impl ParamSet for RaeParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.phi_x.tensors();
        t.extend(self.g_enc.iter().flat_map(|l| l.tensors()));
        t.extend(self.f_enc.tensors());
        t.extend(self.g_dec.iter().flat_map(|l| l.tensors()));
        t.extend(self.f_dec.tensors());
        t.extend(self.phi_z.tensors());
        t.extend(self.o.iter().flat_map(|l| l.tensors()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.phi_x.tensors_mut();
        t.extend(self.g_enc.iter_mut().flat_map(|l| l.tensors_mut()));
        t.extend(self.f_enc.tensors_mut());
        t.extend(self.g_dec.iter_mut().flat_map(|l| l.tensors_mut()));
        t.extend(self.f_dec.tensors_mut());
        t.extend(self.phi_z.tensors_mut());
        t.extend(self.o.iter_mut().flat_map(|l| l.tensors_mut()));
        t
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn at(bytes: &'a [u8], pos: usize) -> Self {
        ByteReader { bytes, pos }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos,
                format!("unexpected end of data (need {n} bytes)"),
            )),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Encoder and decoder LSTM states.
#[derive(Debug, Clone, PartialEq)]
pub struct RaeState {
    pub enc: LstmState,
    pub dec: LstmState,
}

impl RaeState {
    pub fn zeros(dims: &RaeDims) -> Self {
        RaeState {
            enc: LstmState::zeros(dims.d_m),
            dec: LstmState::zeros(dims.d_m),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub g_in: Vec<f64>,
    pub g_hidden: Vec<f64>,
    pub h: Vec<f64>,
    pub lstm: LstmCache,
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    pub h: Vec<f64>,
    pub g_hidden: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub p: Vec<f64>,
    pub o_in: Vec<f64>,
    pub o_hidden: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub lstm: LstmCache,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    pub enc: EncodeCache,
    pub dec: DecodeCache,
}

fn check_state(params: &RaeParams, s: &RaeState) -> Result<()> {
    let dm = params.dims.d_m;
    check_len("encoder cell state", dm, s.enc.c.len())?;
    check_len("encoder hidden state", dm, s.enc.m.len())?;
    check_len("decoder cell state", dm, s.dec.c.len())?;
    check_len("decoder hidden state", dm, s.dec.m.len())
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

pub fn encode_step(
    params: &RaeParams,
    state: &RaeState,
    x: &[f64],
) -> Result<(Vec<f64>, RaeState)> {
    check_len("encoder input", params.dims.d_in, x.len())?;
    check_state(params, state)?;
    let (cache, enc) = encode_cached(params, &state.enc, x);
    Ok((
        cache.h,
        RaeState {
            enc,
            dec: state.dec.clone(),
        },
    ))
}

pub fn decode_step(
    params: &RaeParams,
    state: &RaeState,
    h: &[f64],
) -> Result<(Vec<f64>, RaeState)> {
    check_len("decoder code", params.dims.d_h, h.len())?;
    check_state(params, state)?;
    let (cache, dec) = decode_cached(params, &state.dec, h);
    Ok((
        cache.x_hat,
        RaeState {
            enc: state.enc.clone(),
            dec,
        },
    ))
}

pub(crate) fn encode_cached(
    params: &RaeParams,
    enc: &LstmState,
    x: &[f64],
) -> (EncodeCache, LstmState) {
    let z = params.phi_x.forward_unchecked(x);
    let g_in = concat(&[&z, &enc.m]);
    let g_hidden = params.g_enc[0].forward_unchecked(&g_in);
    let h = params.g_enc[1].forward_unchecked(&g_hidden);
    let (next, lstm) = lstm_step_unchecked(&params.f_enc, &z, enc);
    (
        EncodeCache {
            x: x.to_vec(),
            z,
            g_in,
            g_hidden,
            h,
            lstm,
        },
        next,
    )
}

pub(crate) fn decode_cached(
    params: &RaeParams,
    dec: &LstmState,
    h: &[f64],
) -> (DecodeCache, LstmState) {
    let g_hidden = params.g_dec[0].forward_unchecked(h);
    let z_hat = params.g_dec[1].forward_unchecked(&g_hidden);
    let p = params.phi_z.forward_unchecked(&z_hat);
    let o_in = concat(&[&p, &dec.c, &dec.m]);
    let o_hidden = params.o[0].forward_unchecked(&o_in);
    let x_hat = params.o[1].forward_unchecked(&o_hidden);
    let (next, lstm) = lstm_step_unchecked(&params.f_dec, &z_hat, dec);
    (
        DecodeCache {
            h: h.to_vec(),
            g_hidden,
            z_hat,
            p,
            o_in,
            o_hidden,
            x_hat,
            lstm,
        },
        next,
    )
}

#[derive(Debug, Clone)]
pub struct SequenceForward {
    pub reconstructions: Vec<Vec<f64>>,
    pub codes: Vec<Vec<f64>>,
    pub caches: Vec<StepCache>,
}

impl SequenceForward {
    /// Σ_t mse(x̂_t, x_t).
    pub fn total_loss(&self, xs: &[Vec<f64>]) -> Result<f64> {
        check_len("sequence length", self.reconstructions.len(), xs.len())?;
        let mut total = 0.0;
        for (xh, x) in self.reconstructions.iter().zip(xs) {
            total += mse_loss(xh, x)?.0;
        }
        Ok(total)
    }
}

/// Unrolls encode → decode per timestep from the zero state.
pub fn forward_sequence(params: &RaeParams, xs: &[Vec<f64>]) -> Result<SequenceForward> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    for x in xs {
        check_len("sequence element", params.dims.d_in, x.len())?;
    }
    let mut state = RaeState::zeros(&params.dims);
    let mut out = SequenceForward {
        reconstructions: Vec::with_capacity(xs.len()),
        codes: Vec::with_capacity(xs.len()),
        caches: Vec::with_capacity(xs.len()),
    };
    for x in xs {
        let (enc, enc_next) = encode_cached(params, &state.enc, x);
        let (dec, dec_next) = decode_cached(params, &state.dec, &enc.h);
        state = RaeState {
            enc: enc_next,
            dec: dec_next,
        };
        out.reconstructions.push(dec.x_hat.clone());
        out.codes.push(enc.h.clone());
        out.caches.push(StepCache { enc, dec });
    }
    Ok(out)
}

/// Backpropagation through time for `Σ_t mse(x̂_t, x_t)`.
pub fn backward_sequence(
    params: &RaeParams,
    caches: &[StepCache],
    xs: &[Vec<f64>],
    reconstructions: &[Vec<f64>],
) -> Result<RaeParams> {
    check_len("cache count", xs.len(), caches.len())?;
    check_len("reconstruction count", xs.len(), reconstructions.len())?;
    let dims = params.dims;
    for ((c, x), xh) in caches.iter().zip(xs).zip(reconstructions) {
        check_len("cached input", dims.d_in, c.enc.x.len())?;
        check_len("target", dims.d_in, x.len())?;
        check_len("reconstruction", dims.d_in, xh.len())?;
        check_len("cached code", dims.d_h, c.dec.h.len())?;
        check_len("cached encoder state", dims.d_m, c.enc.lstm.prev.width())?;
        check_len("cached decoder state", dims.d_m, c.dec.lstm.prev.width())?;
    }

    let (d_z, d_m) = (dims.d_z, dims.d_m);
    let mut grads = params.zeros_like();
    let mut d_enc = LstmState::zeros(d_m);
    let mut d_dec = LstmState::zeros(d_m);

    for t in (0..caches.len()).rev() {
        let StepCache { enc, dec } = &caches[t];
        let (_, dx_hat) = mse_loss(&reconstructions[t], &xs[t])?;

        // decoder output map o
        let d_o_hidden =
            params.o[1].backward_unchecked(&dec.o_hidden, &dec.x_hat, &dx_hat, &mut grads.o[1]);
        let d_o_in =
            params.o[0].backward_unchecked(&dec.o_in, &dec.o_hidden, &d_o_hidden, &mut grads.o[0]);
        let d_in = dims.d_in;
        let dp = &d_o_in[..d_in];

        // decoder LSTM
        let step = lstm_step_backward_unchecked(&params.f_dec, &dec.lstm, &d_dec, &mut grads.f_dec);
        let mut d_dec_prev = step.dprev;
        for k in 0..d_m {
            d_dec_prev.c[k] += d_o_in[d_in + k];
            d_dec_prev.m[k] += d_o_in[d_in + d_m + k];
        }
        let mut dz_hat = step.dx;
        let from_phi = params
            .phi_z
            .backward_unchecked(&dec.z_hat, &dec.p, dp, &mut grads.phi_z);
        for (a, b) in dz_hat.iter_mut().zip(&from_phi) {
            *a += b;
        }

        // decoder code map
        let d_g_hidden = params.g_dec[1].backward_unchecked(
            &dec.g_hidden,
            &dec.z_hat,
            &dz_hat,
            &mut grads.g_dec[1],
        );
        let dh = params.g_dec[0].backward_unchecked(
            &dec.h,
            &dec.g_hidden,
            &d_g_hidden,
            &mut grads.g_dec[0],
        );

        // encoder code map
        let d_g_hidden =
            params.g_enc[1].backward_unchecked(&enc.g_hidden, &enc.h, &dh, &mut grads.g_enc[1]);
        let d_g_in = params.g_enc[0].backward_unchecked(
            &enc.g_in,
            &enc.g_hidden,
            &d_g_hidden,
            &mut grads.g_enc[0],
        );

        // encoder LSTM
        let step = lstm_step_backward_unchecked(&params.f_enc, &enc.lstm, &d_enc, &mut grads.f_enc);
        let mut d_enc_prev = step.dprev;
        for k in 0..d_m {
            d_enc_prev.m[k] += d_g_in[d_z + k];
        }
        let mut dz = step.dx;
        for (a, b) in dz.iter_mut().zip(&d_g_in[..d_z]) {
            *a += b;
        }
        params
            .phi_x
            .backward_unchecked(&enc.x, &enc.z, &dz, &mut grads.phi_x);

        d_enc = d_enc_prev;
        d_dec = d_dec_prev;
    }
    Ok(grads)
}
