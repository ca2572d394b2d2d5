//! Dense linear algebra, activations, loss, the adaptive-moment optimizer and
//! a finite-difference gradient checker.
//!
//! Everything here works on `f64`. Shapes are checked on every public entry
//! point; the `*_into` helpers used on hot paths assume the caller already did.

use rand::Rng;

use crate::error::{check_len, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("matrix row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec input", self.cols, x.len())?;
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(x, &mut out);
        Ok(out)
    }

    /// `out += self · x`
    pub(crate) fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (row, o) in self.data.chunks_exact(self.cols).zip(out.iter_mut()) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · v`
    pub(crate) fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &vi) in self.data.chunks_exact(self.cols).zip(v) {
            if vi != 0.0 {
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += w * vi;
                }
            }
        }
    }

    /// `self += a · bᵀ`
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &ai) in self.data.chunks_exact_mut(self.cols).zip(a) {
            if ai != 0.0 {
                for (w, &bj) in row.iter_mut().zip(b) {
                    *w += ai * bj;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn apply_vec(self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.apply(x)).collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fully connected layer computing `activation(W·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_len("dense bias", weights.rows(), bias.len())?;
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        DenseLayer {
            weights: Matrix::glorot_uniform(output, input, rng),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("dense input", self.input_width(), x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.weights.matvec_acc(x, &mut out);
        for v in &mut out {
            *v = self.activation.apply(*v);
        }
        out
    }

    /// Back-propagates `dy` (gradient w.r.t. this layer's output `y`, which was
    /// produced from `x`). Parameter gradients are accumulated into `grads`;
    /// the gradient w.r.t. `x` is returned.
    pub fn backward(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        grads: &mut DenseLayer,
    ) -> Result<Vec<f64>> {
        check_len("dense backward input", self.input_width(), x.len())?;
        check_len("dense backward output", self.output_width(), y.len())?;
        check_len("dense backward upstream", self.output_width(), dy.len())?;
        check_len("dense grad rows", self.output_width(), grads.output_width())?;
        check_len("dense grad cols", self.input_width(), grads.input_width())?;
        Ok(self.backward_unchecked(x, y, dy, grads))
    }

    pub(crate) fn backward_unchecked(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        grads: &mut DenseLayer,
    ) -> Vec<f64> {
        let da: Vec<f64> = dy
            .iter()
            .zip(y)
            .map(|(&g, &o)| g * self.activation.derivative_from_output(o))
            .collect();
        grads.weights.add_outer(&da, x);
        for (b, d) in grads.bias.iter_mut().zip(&da) {
            *b += d;
        }
        let mut dx = vec![0.0; self.input_width()];
        self.weights.matvec_t_acc(&da, &mut dx);
        dx
    }

    pub fn zeros_like(&self) -> Self {
        DenseLayer::zeros(self.input_width(), self.output_width(), self.activation)
    }
}

/// Mean squared error and its gradient with respect to `y`.
pub fn mse_loss(y: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("mse", x.len(), y.len())?;
    if y.is_empty() {
        return Err(Error::InvalidArgument("mse of empty vectors".into()));
    }
    let n = y.len() as f64;
    let mut loss = 0.0;
    let grad = y
        .iter()
        .zip(x)
        .map(|(&a, &b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// A fixed, ordered collection of parameter tensors.
///
/// Gradients are represented with the same type, so the tensor order is what
/// ties a parameter to its gradient and to its optimizer moments.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", self.num_params(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }
}

impl ParamSet for DenseLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weights.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.as_mut_slice(), &mut self.bias]
    }
}

impl ParamSet for Vec<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state: one pair of moment accumulators per tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamSet + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Adam {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update of `params` against `grads`.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gs = grads.tensors();
        let ps = params.tensors_mut();
        check_len("optimizer tensor count", self.first.len(), ps.len())?;
        check_len("optimizer gradient count", self.first.len(), gs.len())?;
        for ((p, g), m) in ps.iter().zip(&gs).zip(&self.first) {
            check_len("optimizer tensor", m.len(), p.len())?;
            check_len("optimizer gradient", m.len(), g.len())?;
        }

        self.step += 1;
        let AdamConfig {
            step_size,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in ps
            .into_iter()
            .zip(gs)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] -= step_size * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Central finite-difference check.
///
/// Returns `max_i |fd_i − g_i| / max(1e−8, |fd_i| + |g_i|)`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    check_len("grad_check gradient", params.len(), analytic.len())?;
    if step <= 0.0 || step.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = f(&probe);
        probe[i] = params[i] - step;
        let down = f(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective at coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
