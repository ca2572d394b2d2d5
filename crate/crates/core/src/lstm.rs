//! LSTM memory cell without peephole connections.
//!
//! ```text
//! i = σ(W_i x + U_i m + b_i)      o = σ(W_o x + U_o m + b_o)
//! f = σ(W_f x + U_f m + b_f)      g = tanh(W_c x + U_c m + b_c)
//! c' = f∘c + i∘g                  m' = o∘tanh(c')
//! ```

use rand::Rng;

use crate::error::{check_len, Result};
use crate::nn::{sigmoid, Matrix, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Matrix,
    pub u_i: Matrix,
    pub b_i: Vec<f64>,
    pub w_o: Matrix,
    pub u_o: Matrix,
    pub b_o: Vec<f64>,
    pub w_f: Matrix,
    pub u_f: Matrix,
    pub b_f: Vec<f64>,
    pub w_c: Matrix,
    pub u_c: Matrix,
    pub b_c: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_i: Matrix::zeros(hidden, input),
            u_i: Matrix::zeros(hidden, hidden),
            b_i: vec![0.0; hidden],
            w_o: Matrix::zeros(hidden, input),
            u_o: Matrix::zeros(hidden, hidden),
            b_o: vec![0.0; hidden],
            w_f: Matrix::zeros(hidden, input),
            u_f: Matrix::zeros(hidden, hidden),
            b_f: vec![0.0; hidden],
            w_c: Matrix::zeros(hidden, input),
            u_c: Matrix::zeros(hidden, hidden),
            b_c: vec![0.0; hidden],
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate at `forget_bias`.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = LstmParams::zeros(input, hidden);
        p.w_i = Matrix::glorot_uniform(hidden, input, rng);
        p.u_i = Matrix::glorot_uniform(hidden, hidden, rng);
        p.w_o = Matrix::glorot_uniform(hidden, input, rng);
        p.u_o = Matrix::glorot_uniform(hidden, hidden, rng);
        p.w_f = Matrix::glorot_uniform(hidden, input, rng);
        p.u_f = Matrix::glorot_uniform(hidden, hidden, rng);
        p.w_c = Matrix::glorot_uniform(hidden, input, rng);
        p.u_c = Matrix::glorot_uniform(hidden, hidden, rng);
        p.b_f = vec![forget_bias; hidden];
        p
    }

    pub fn input_width(&self) -> usize {
        self.w_i.cols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w_i.rows()
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.input_width(), self.hidden_width())
    }

    /// Checks every tensor against the declared widths.
    pub fn validate(&self) -> Result<()> {
        let (dz, dm) = (self.input_width(), self.hidden_width());
        for w in [&self.w_i, &self.w_o, &self.w_f, &self.w_c] {
            check_len("lstm W rows", dm, w.rows())?;
            check_len("lstm W cols", dz, w.cols())?;
        }
        for u in [&self.u_i, &self.u_o, &self.u_f, &self.u_c] {
            check_len("lstm U rows", dm, u.rows())?;
            check_len("lstm U cols", dm, u.cols())?;
        }
        for b in [&self.b_i, &self.b_o, &self.b_f, &self.b_c] {
            check_len("lstm bias", dm, b.len())?;
        }
        Ok(())
    }

    fn gate(&self, w: &Matrix, u: &Matrix, b: &[f64], x: &[f64], m: &[f64]) -> Vec<f64> {
        let mut a = b.to_vec();
        w.matvec_acc(x, &mut a);
        u.matvec_acc(m, &mut a);
        a
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w_i.as_slice(),
            self.u_i.as_slice(),
            &self.b_i,
            self.w_o.as_slice(),
            self.u_o.as_slice(),
            &self.b_o,
            self.w_f.as_slice(),
            self.u_f.as_slice(),
            &self.b_f,
            self.w_c.as_slice(),
            self.u_c.as_slice(),
            &self.b_c,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_i.as_mut_slice(),
            self.u_i.as_mut_slice(),
            &mut self.b_i,
            self.w_o.as_mut_slice(),
            self.u_o.as_mut_slice(),
            &mut self.b_o,
            self.w_f.as_mut_slice(),
            self.u_f.as_mut_slice(),
            &mut self.b_f,
            self.w_c.as_mut_slice(),
            self.u_c.as_mut_slice(),
            &mut self.b_c,
        ]
    }
}

/// Cell state `c` and hidden state `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Vec<f64>,
    pub m: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            c: vec![0.0; hidden],
            m: vec![0.0; hidden],
        }
    }

    pub fn width(&self) -> usize {
        self.c.len()
    }
}

/// Activations of one forward step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub prev: LstmState,
    pub input_gate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub next: LstmState,
    pub tanh_c: Vec<f64>,
}

/// Gradients flowing out of one backward step.
#[derive(Debug, Clone)]
pub struct LstmStepGrads {
    pub dx: Vec<f64>,
    pub dprev: LstmState,
}

pub fn lstm_step(
    params: &LstmParams,
    x: &[f64],
    state: &LstmState,
) -> Result<(LstmState, LstmCache)> {
    check_len("lstm input", params.input_width(), x.len())?;
    check_len("lstm cell state", params.hidden_width(), state.c.len())?;
    check_len("lstm hidden state", params.hidden_width(), state.m.len())?;
    Ok(lstm_step_unchecked(params, x, state))
}

pub(crate) fn lstm_step_unchecked(
    params: &LstmParams,
    x: &[f64],
    state: &LstmState,
) -> (LstmState, LstmCache) {
    let p = params;
    let m = &state.m;
    let mut i = p.gate(&p.w_i, &p.u_i, &p.b_i, x, m);
    let mut o = p.gate(&p.w_o, &p.u_o, &p.b_o, x, m);
    let mut f = p.gate(&p.w_f, &p.u_f, &p.b_f, x, m);
    let mut g = p.gate(&p.w_c, &p.u_c, &p.b_c, x, m);
    for k in 0..i.len() {
        i[k] = sigmoid(i[k]);
        o[k] = sigmoid(o[k]);
        f[k] = sigmoid(f[k]);
        g[k] = g[k].tanh();
    }
    let c_next: Vec<f64> = (0..i.len())
        .map(|k| f[k] * state.c[k] + i[k] * g[k])
        .collect();
    let tanh_c: Vec<f64> = c_next.iter().map(|v| v.tanh()).collect();
    let m_next: Vec<f64> = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    let next = LstmState {
        c: c_next,
        m: m_next,
    };
    let cache = LstmCache {
        x: x.to_vec(),
        prev: state.clone(),
        input_gate: i,
        output_gate: o,
        forget_gate: f,
        candidate: g,
        next: next.clone(),
        tanh_c,
    };
    (next, cache)
}

/// Back-propagates gradients of the step outputs `(c', m')` through one cell
/// step. Parameter gradients are accumulated into `grads`.
pub fn lstm_step_backward(
    params: &LstmParams,
    cache: &LstmCache,
    dnext: &LstmState,
    grads: &mut LstmParams,
) -> Result<LstmStepGrads> {
    let dm = params.hidden_width();
    check_len("lstm cache input", params.input_width(), cache.x.len())?;
    check_len("lstm cache state", dm, cache.prev.width())?;
    check_len("lstm cache gates", dm, cache.input_gate.len())?;
    check_len("lstm upstream c", dm, dnext.c.len())?;
    check_len("lstm upstream m", dm, dnext.m.len())?;
    check_len("lstm grad input", params.input_width(), grads.input_width())?;
    check_len("lstm grad hidden", dm, grads.hidden_width())?;
    Ok(lstm_step_backward_unchecked(params, cache, dnext, grads))
}

pub(crate) fn lstm_step_backward_unchecked(
    params: &LstmParams,
    cache: &LstmCache,
    dnext: &LstmState,
    grads: &mut LstmParams,
) -> LstmStepGrads {
    let n = params.hidden_width();
    let mut da_i = vec![0.0; n];
    let mut da_o = vec![0.0; n];
    let mut da_f = vec![0.0; n];
    let mut da_g = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let (i, o, f, g) = (
            cache.input_gate[k],
            cache.output_gate[k],
            cache.forget_gate[k],
            cache.candidate[k],
        );
        let tc = cache.tanh_c[k];
        let d_o = dnext.m[k] * tc;
        let dc = dnext.c[k] + dnext.m[k] * o * (1.0 - tc * tc);
        da_i[k] = dc * g * i * (1.0 - i);
        da_f[k] = dc * cache.prev.c[k] * f * (1.0 - f);
        da_g[k] = dc * i * (1.0 - g * g);
        da_o[k] = d_o * o * (1.0 - o);
        dc_prev[k] = dc * f;
    }

    let x = &cache.x;
    let m = &cache.prev.m;
    let mut dx = vec![0.0; params.input_width()];
    let mut dm_prev = vec![0.0; n];
    let paths = [
        (
            &params.w_i,
            &params.u_i,
            &mut grads.w_i,
            &mut grads.u_i,
            &mut grads.b_i,
            &da_i,
        ),
        (
            &params.w_o,
            &params.u_o,
            &mut grads.w_o,
            &mut grads.u_o,
            &mut grads.b_o,
            &da_o,
        ),
        (
            &params.w_f,
            &params.u_f,
            &mut grads.w_f,
            &mut grads.u_f,
            &mut grads.b_f,
            &da_f,
        ),
        (
            &params.w_c,
            &params.u_c,
            &mut grads.w_c,
            &mut grads.u_c,
            &mut grads.b_c,
            &da_g,
        ),
    ];
    for (w, u, gw, gu, gb, da) in paths {
        gw.add_outer(da, x);
        gu.add_outer(da, m);
        for (b, d) in gb.iter_mut().zip(da.iter()) {
            *b += d;
        }
        w.matvec_t_acc(da, &mut dx);
        u.matvec_t_acc(da, &mut dm_prev);
    }
    LstmStepGrads {
        dx,
        dprev: LstmState {
            c: dc_prev,
            m: dm_prev,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(dz: usize, dm: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        let mut p = LstmParams::glorot(dz, dm, 0.0, rng);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_params_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let (s, _) = lstm_step(&p, &[0.4, -1.0, 2.0], &LstmState::zeros(2)).unwrap();
        assert_eq!(s, LstmState::zeros(2));
    }

    #[test]
    fn zero_params_halve_cell_state() {
        let p = LstmParams::zeros(1, 2);
        let s = LstmState {
            c: vec![0.8, -2.0],
            m: vec![0.3, -0.9],
        };
        let (next, cache) = lstm_step(&p, &[1.0], &s).unwrap();
        assert_eq!(next.c, vec![0.4, -1.0]);
        assert_eq!(next.m, vec![0.5 * 0.4f64.tanh(), 0.5 * (-1.0f64).tanh()]);
        assert!(cache.input_gate.iter().all(|&g| g == 0.5));
        // caller's state is untouched
        assert_eq!(s.c, vec![0.8, -2.0]);
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut p = LstmParams::zeros(1, 1);
        p.b_f = vec![20.0];
        let s = LstmState {
            c: vec![1.0],
            m: vec![0.0],
        };
        let (next, _) = lstm_step(&p, &[0.7], &s).unwrap();
        assert!((next.c[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_input_width() {
        let p = LstmParams::zeros(3, 2);
        assert!(lstm_step(&p, &[1.0], &LstmState::zeros(2)).is_err());
        assert!(lstm_step(&p, &[1.0, 2.0, 3.0], &LstmState::zeros(3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(2, 3, &mut rng);
        let s = LstmState {
            c: random_vec(3, &mut rng),
            m: random_vec(3, &mut rng),
        };
        let (_, cache) = lstm_step(&p, &random_vec(2, &mut rng), &s).unwrap();
        let mut grads = p.zeros_like();
        let out = lstm_step_backward(&p, &cache, &LstmState::zeros(3), &mut grads).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
        assert!(out
            .dx
            .iter()
            .chain(&out.dprev.c)
            .chain(&out.dprev.m)
            .all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_mismatched_cache() {
        let p = LstmParams::zeros(2, 3);
        let other = LstmParams::zeros(1, 3);
        let (_, cache) = lstm_step(&other, &[0.1], &LstmState::zeros(3)).unwrap();
        let mut grads = p.zeros_like();
        assert!(lstm_step_backward(&p, &cache, &LstmState::zeros(3), &mut grads).is_err());
    }

    #[test]
    fn forget_path_gradient_with_zero_candidate() {
        // With the candidate path zeroed, c' = f∘c, so ∂c'/∂c = f.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_params(2, 2, &mut rng);
        p.w_c = Matrix::zeros(2, 2);
        p.u_c = Matrix::zeros(2, 2);
        p.b_c = vec![0.0; 2];
        let s = LstmState {
            c: random_vec(2, &mut rng),
            m: random_vec(2, &mut rng),
        };
        let (_, cache) = lstm_step(&p, &random_vec(2, &mut rng), &s).unwrap();
        let upstream = LstmState {
            c: vec![0.7, -1.3],
            m: vec![0.0, 0.0],
        };
        let mut grads = p.zeros_like();
        let out = lstm_step_backward(&p, &cache, &upstream, &mut grads).unwrap();
        for k in 0..2 {
            assert_eq!(out.dprev.c[k], upstream.c[k] * cache.forget_gate[k]);
        }
    }

    /// Scalar objective mixing both outputs so every path is exercised.
    fn objective(p: &LstmParams, x: &[f64], s: &LstmState, wc: &[f64], wm: &[f64]) -> f64 {
        let (n, _) = lstm_step(p, x, s).unwrap();
        n.c.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()
            + n.m.iter().zip(wm).map(|(a, b)| a * b).sum::<f64>()
    }

    fn check_trial(dz: usize, dm: usize, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(dz, dm, &mut rng);
        let x = random_vec(dz, &mut rng);
        let s = LstmState {
            c: random_vec(dm, &mut rng),
            m: random_vec(dm, &mut rng),
        };
        let wc = random_vec(dm, &mut rng);
        let wm = random_vec(dm, &mut rng);

        let (_, cache) = lstm_step(&p, &x, &s).unwrap();
        let mut grads = p.zeros_like();
        let out = lstm_step_backward(
            &p,
            &cache,
            &LstmState {
                c: wc.clone(),
                m: wm.clone(),
            },
            &mut grads,
        )
        .unwrap();

        let err = grad_check(
            |flat| {
                let mut q = p.clone();
                q.assign(flat).unwrap();
                objective(&q, &x, &s, &wc, &wm)
            },
            &p.flatten(),
            &grads.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(err < tol, "params: {err}");

        let err = grad_check(|xv| objective(&p, xv, &s, &wc, &wm), &x, &out.dx, 1e-5).unwrap();
        assert!(err < tol, "input: {err}");

        let mut sflat = s.c.clone();
        sflat.extend(&s.m);
        let mut dflat = out.dprev.c.clone();
        dflat.extend(&out.dprev.m);
        let err = grad_check(
            |v| {
                let st = LstmState {
                    c: v[..dm].to_vec(),
                    m: v[dm..].to_vec(),
                };
                objective(&p, &x, &st, &wc, &wm)
            },
            &sflat,
            &dflat,
            1e-5,
        )
        .unwrap();
        assert!(err < tol, "state: {err}");
    }

    #[test]
    fn backward_matches_finite_differences_scalar_cell() {
        check_trial(1, 1, 42, 1e-6);
    }

    #[test]
    fn backward_matches_finite_differences_random_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..50 {
            let dz = rng.gen_range(1..=4);
            let dm = rng.gen_range(1..=4);
            check_trial(dz, dm, 1000 + trial, 1e-4);
        }
    }

    #[test]
    fn outputs_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = random_params(3, 4, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s = LstmState {
                c: (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                m: random_vec(4, &mut rng),
            };
            let (a, cache) = lstm_step(&p, &x, &s).unwrap();
            let (b, _) = lstm_step(&p, &x, &s).unwrap();
            assert_eq!(a, b);
            assert!(a.m.iter().all(|v| v.abs() < 1.0));
            for g in cache
                .input_gate
                .iter()
                .chain(&cache.output_gate)
                .chain(&cache.forget_gate)
            {
                assert!(*g > 0.0 && *g < 1.0);
            }
        }
    }
}
