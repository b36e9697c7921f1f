//! Minimal dense-math layer: 1-D/2-D float64 arrays, affine maps, activation
//! functions with derivatives, seeded initialization, and the Adam update.
//!
//! Everything here is a pure function over its inputs except [`adam_step`],
//! which mutates the state passed to it. Values are plain owned buffers and
//! can be moved freely across threads.

use crate::error::{AieError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log
/// so saturated predictions cannot produce an infinite loss.
pub const PROB_FLOOR: f64 = 1e-15;

/// Contiguous row-major float64 array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || expect != values.len() {
            return Err(AieError::ShapeMismatch {
                op: "DenseArray::new",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(DenseArray { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &DenseArray) -> Self {
        DenseArray::zeros(&other.shape)
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        DenseArray {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Number of rows of a 2-D array.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Number of columns of a 2-D array.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Row slice of a 2-D array.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `out[i] = sum_j w[i,j] * x[j] + b[i]`.
pub fn affine_forward(w: &DenseArray, x: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    if w.shape().len() != 2 || w.cols() != x.len() {
        return Err(AieError::ShapeMismatch {
            op: "affine_forward(w, x)",
            left: w.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    if b.len() != w.rows() {
        return Err(AieError::ShapeMismatch {
            op: "affine_forward(w, b)",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = b.values().to_vec();
    affine_into(w.values(), x.values(), &mut out);
    Ok(DenseArray::from_vec(out))
}

/// In-place affine kernel used by the batched model code: `out += W x`
/// (`out` must already hold the bias).
pub(crate) fn affine_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let in_dim = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * in_dim..(i + 1) * in_dim];
        let mut acc = *o;
        for (wij, xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        *o = acc;
    }
}

/// Gradients of an affine map given upstream `dz`:
/// `dw[i,j] = dz[i] x[j]`, `db = dz`, `dx[j] = sum_i w[i,j] dz[i]`.
pub fn affine_backward(
    w: &DenseArray,
    x: &DenseArray,
    dz: &DenseArray,
) -> (DenseArray, DenseArray, DenseArray) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), dz.len());
    let mut dw = DenseArray::zeros(w.shape());
    let mut dx = DenseArray::zeros(x.shape());
    let db = dz.clone();
    let in_dim = x.len();
    for i in 0..w.rows() {
        let g = dz.values()[i];
        let wrow = &w.values()[i * in_dim..(i + 1) * in_dim];
        let dwrow = &mut dw.values_mut()[i * in_dim..(i + 1) * in_dim];
        for j in 0..in_dim {
            dwrow[j] = g * x.values()[j];
        }
        for (dxj, wij) in dx.values_mut().iter_mut().zip(wrow) {
            *dxj += wij * g;
        }
    }
    (dw, db, dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply_scalar(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn apply(self, x: &DenseArray) -> DenseArray {
        let values = x.values().iter().map(|&z| self.apply_scalar(z)).collect();
        DenseArray {
            shape: x.shape().to_vec(),
            values,
        }
    }
}

/// Logistic function clamped away from 0 and 1 (see [`PROB_FLOOR`]).
pub fn sigmoid(z: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    UniformGlorot,
    Zeros,
}

/// Deterministic initialization: identical `(shape, scheme, seed)` always
/// produces bit-identical arrays.
pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: u64) -> DenseArray {
    match scheme {
        InitScheme::Zeros => DenseArray::zeros(shape),
        InitScheme::UniformGlorot => {
            let (fan_in, fan_out) = match shape {
                [n] => (*n, *n),
                [out, inp] => (*inp, *out),
                other => {
                    let n: usize = other.iter().product();
                    (n, n)
                }
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let values = (0..n)
                .map(|_| (2.0 * rng.random::<f64>() - 1.0) * limit)
                .collect();
            DenseArray {
                shape: shape.to_vec(),
                values,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam accumulators. `t` counts completed updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: DenseArray,
    pub v: DenseArray,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(shape: &[usize], hyper: AdamHyper) -> Self {
        AdamState {
            m: DenseArray::zeros(shape),
            v: DenseArray::zeros(shape),
            t: 0,
            hyper,
        }
    }
}

/// Bias-corrected Adam update. Rejects non-finite gradients without touching
/// the parameter or the step counter.
pub fn adam_step(param: &mut DenseArray, grad: &DenseArray, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(AieError::ShapeMismatch {
            op: "adam_step",
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    if !grad.all_finite() {
        return Err(AieError::Divergence {
            step: state.t,
            what: "non-finite gradient".to_string(),
        });
    }
    state.t += 1;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in param
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(state.m.values_mut().iter_mut().zip(state.v.values_mut()))
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
