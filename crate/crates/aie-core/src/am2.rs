//! Adaptive market-price auxiliary tower.
//!
//! A small regression MLP estimates the market price from the backbone's
//! last-layer representation, but its weights and biases are not free
//! parameters: a hypernetwork projects a per-scenario embedding to a flat
//! parameter vector which is split and reshaped into the tower's layers.
//! Training the tower therefore shapes the scenario embeddings and, through
//! the shared representation, the backbone itself. Serving never evaluates
//! any of this.

use crate::error::{AieError, Result};
use crate::tensor::{seeded_init, DenseArray, InitScheme};
use crate::util::derive_seed_str;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Am2Config {
    pub enabled: bool,
    /// Weight of the price loss in the joint objective.
    #[serde(default = "default_w")]
    pub w: f64,
    /// Hidden widths of the generated tower (input width comes from the
    /// backbone, output width is always 1).
    #[serde(default = "default_tower")]
    pub tower_widths: Vec<usize>,
    /// Scenario embedding width fed to the hypernetwork.
    #[serde(default = "default_scen_dim")]
    pub scen_dim: usize,
}

fn default_w() -> f64 {
    1e-4
}
fn default_tower() -> Vec<usize> {
    vec![16]
}
fn default_scen_dim() -> usize {
    8
}

impl Default for Am2Config {
    fn default() -> Self {
        Am2Config {
            enabled: false,
            w: default_w(),
            tower_widths: default_tower(),
            scen_dim: default_scen_dim(),
        }
    }
}

/// Layer geometry of the generated tower: `layer_widths = [d0, ..., dN]`
/// with `d0` the backbone representation width and `dN = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicTowerSpec {
    layer_widths: Vec<usize>,
}

impl DynamicTowerSpec {
    pub fn new(input_width: usize, hidden: &[usize]) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input_width);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(1);
        DynamicTowerSpec { layer_widths }
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    /// Number of affine layers.
    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total length of the flat parameter vector the hypernetwork must emit.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// Cumulative split offsets after each W / b block, in the fixed order
    /// `W1 (row-major), b1, W2, b2, ...`.
    pub fn split_boundaries(&self) -> Vec<usize> {
        let mut bounds = Vec::new();
        let mut off = 0;
        for w in self.layer_widths.windows(2) {
            off += w[1] * w[0];
            bounds.push(off);
            off += w[1];
            bounds.push(off);
        }
        bounds
    }
}

/// Splits a flat parameter vector into per-layer `(W, b)` pairs.
pub fn split_theta(spec: &DynamicTowerSpec, theta: &[f64]) -> Result<Vec<(DenseArray, DenseArray)>> {
    if theta.len() != spec.param_count() {
        return Err(AieError::invalid(format!(
            "tower parameter vector has {} values but the spec needs {}",
            theta.len(),
            spec.param_count()
        )));
    }
    let mut layers = Vec::with_capacity(spec.n_layers());
    let mut off = 0;
    for w in spec.layer_widths.windows(2) {
        let (d_in, d_out) = (w[0], w[1]);
        let wmat = DenseArray::new(
            vec![d_out, d_in],
            theta[off..off + d_out * d_in].to_vec(),
        )?;
        off += d_out * d_in;
        let bvec = DenseArray::from_vec(theta[off..off + d_out].to_vec());
        off += d_out;
        layers.push((wmat, bvec));
    }
    Ok(layers)
}

/// Scenario embedding table plus the affine projection that turns one
/// embedding into a full tower parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioHypernet {
    pub spec: DynamicTowerSpec,
    /// `n_scenarios x scen_dim`.
    pub scen_embed: DenseArray,
    /// `param_count x scen_dim`.
    pub proj_w: DenseArray,
    /// `param_count`.
    pub proj_b: DenseArray,
}

impl ScenarioHypernet {
    pub fn init(n_scenarios: usize, scen_dim: usize, spec: DynamicTowerSpec, seed: u64) -> Self {
        let pc = spec.param_count();
        ScenarioHypernet {
            spec,
            scen_embed: seeded_init(
                &[n_scenarios, scen_dim],
                InitScheme::UniformGlorot,
                derive_seed_str(seed, "am2.scen_embed"),
            ),
            proj_w: seeded_init(
                &[pc, scen_dim],
                InitScheme::UniformGlorot,
                derive_seed_str(seed, "am2.proj.w"),
            ),
            proj_b: seeded_init(&[pc], InitScheme::Zeros, 0),
        }
    }

    pub fn n_scenarios(&self) -> usize {
        self.scen_embed.rows()
    }

    /// Flat tower parameters for one scenario: `proj_w e_s + proj_b`.
    pub fn generate_theta(&self, scenario: usize) -> Result<Vec<f64>> {
        if scenario >= self.n_scenarios() {
            return Err(AieError::IndexOutOfRange {
                what: "hypernet scenario".to_string(),
                index: scenario,
                limit: self.n_scenarios(),
            });
        }
        let e = self.scen_embed.row(scenario);
        let dim = e.len();
        let mut theta = self.proj_b.values().to_vec();
        for (i, t) in theta.iter_mut().enumerate() {
            let row = &self.proj_w.values()[i * dim..(i + 1) * dim];
            let mut acc = *t;
            for (wj, ej) in row.iter().zip(e) {
                acc += wj * ej;
            }
            *t = acc;
        }
        Ok(theta)
    }
}

/// Materializes the generated tower for one scenario.
pub fn generate_tower(
    hyper: &ScenarioHypernet,
    scenario: usize,
) -> Result<Vec<(DenseArray, DenseArray)>> {
    let theta = hyper.generate_theta(scenario)?;
    split_theta(&hyper.spec, &theta)
}

/// Post-activation values per tower layer; slot 0 holds the input.
#[derive(Debug, Clone)]
pub struct TowerActs {
    pub acts: Vec<Vec<f64>>,
}

/// Runs the tower on a representation: relu on hidden layers, identity on
/// the output layer (the price target is unbounded in log space).
pub fn price_forward(layers: &[(DenseArray, DenseArray)], h0: &[f64]) -> Result<f64> {
    Ok(price_forward_cached(layers, h0)?.0)
}

pub fn price_forward_cached(
    layers: &[(DenseArray, DenseArray)],
    h0: &[f64],
) -> Result<(f64, TowerActs)> {
    if layers.is_empty() || layers[0].0.cols() != h0.len() {
        return Err(AieError::ShapeMismatch {
            op: "price_forward",
            left: layers.first().map(|(w, _)| w.shape().to_vec()).unwrap_or_default(),
            right: vec![h0.len()],
        });
    }
    let n = layers.len();
    let mut acts = Vec::with_capacity(n + 1);
    acts.push(h0.to_vec());
    for (k, (w, b)) in layers.iter().enumerate() {
        let prev = &acts[k];
        let mut z = b.values().to_vec();
        crate::tensor::affine_into(w.values(), prev, &mut z);
        if k + 1 < n {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(z);
    }
    let yhat = acts[n][0];
    Ok((yhat, TowerActs { acts }))
}

/// Backpropagates one sample through the tower. Gradients with respect to
/// the flat parameter vector are accumulated into `dtheta` (same split
/// order as [`split_theta`]); the gradient reaching the input is written to
/// `dh0`.
pub fn price_backward(
    layers: &[(DenseArray, DenseArray)],
    acts: &TowerActs,
    dyhat: f64,
    dtheta: &mut [f64],
    dh0: &mut [f64],
) {
    let n = layers.len();
    debug_assert_eq!(acts.acts.len(), n + 1);
    // Offsets of each layer's W block inside theta.
    let mut offsets = Vec::with_capacity(n);
    let mut off = 0;
    for (w, b) in layers {
        offsets.push(off);
        off += w.len() + b.len();
    }
    debug_assert_eq!(off, dtheta.len());

    let mut da = vec![dyhat];
    for k in (0..n).rev() {
        let (w, _) = &layers[k];
        let (d_out, d_in) = (w.rows(), w.cols());
        let prev = &acts.acts[k];
        let out = &acts.acts[k + 1];
        // dz = da * act'(out); the last layer is identity.
        let mut dz = da;
        if k + 1 < n {
            for (g, &y) in dz.iter_mut().zip(out) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let base = offsets[k];
        let mut dprev = vec![0.0; d_in];
        for i in 0..d_out {
            let g = dz[i];
            let wrow = &w.values()[i * d_in..(i + 1) * d_in];
            let dwrow = &mut dtheta[base + i * d_in..base + (i + 1) * d_in];
            for j in 0..d_in {
                dwrow[j] += g * prev[j];
                dprev[j] += wrow[j] * g;
            }
            dtheta[base + d_out * d_in + i] += g;
        }
        da = dprev;
    }
    dh0.copy_from_slice(&da);
}

/// Chains a flat tower gradient back into the hypernetwork parameters.
pub fn hypernet_backward(
    hyper: &ScenarioHypernet,
    scenario: usize,
    dtheta: &[f64],
    d_scen_embed: &mut DenseArray,
    d_proj_w: &mut DenseArray,
    d_proj_b: &mut DenseArray,
) {
    let e = hyper.scen_embed.row(scenario);
    let dim = e.len();
    let de = d_scen_embed.row_mut(scenario);
    for (i, &g) in dtheta.iter().enumerate() {
        d_proj_b.values_mut()[i] += g;
        let wrow = &hyper.proj_w.values()[i * dim..(i + 1) * dim];
        let dwrow = &mut d_proj_w.values_mut()[i * dim..(i + 1) * dim];
        for j in 0..dim {
            dwrow[j] += g * e[j];
            de[j] += wrow[j] * g;
        }
    }
}

/// Mean absolute error. The subgradient at a perfect prediction is 0.
pub fn mae_loss(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// d(mae)/d(pred): sign(pred - target) / n, 0 at the kink.
pub fn mae_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            if p > t {
                1.0 / n
            } else if p < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Joint objective: `l_ctr + w * l_price`.
pub fn joint_loss(l_ctr: f64, l_price: f64, w: f64) -> f64 {
    debug_assert!(w >= 0.0);
    l_ctr + w * l_price
}
