//! Backbone CTR predictors: a shared embedding table feeding either a plain
//! MLP (dnn) or a cross-layer stack followed by an MLP (crossnet), a small
//! prediction head, and the optional scenario-conditioned price tower.
//!
//! Forward, backward, and the training loop are written out by hand so every
//! gradient can be checked against central finite differences. Training is
//! single-threaded and fully determined by its seed.

use crate::am2::{
    self, generate_tower, mae_grad, mae_loss, Am2Config, DynamicTowerSpec, ScenarioHypernet,
    TowerActs,
};
use crate::data::{Dataset, Encoders, FeatureSchema};
use crate::error::{AieError, Result};
use crate::tensor::{
    adam_step, affine_into, seeded_init, sigmoid, AdamHyper, AdamState, DenseArray, InitScheme,
};
use crate::util::{derive_seed, derive_seed_str};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Dnn,
    Crossnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    /// Number of cross layers; only meaningful for `crossnet`. A crossnet
    /// with 0 cross layers reduces exactly to the dnn.
    #[serde(default)]
    pub n_cross_layers: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}
fn default_embed_dim() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Hidden widths of the CTR head; the final width-1 layer is implied.
    #[serde(default = "default_head")]
    pub head_hidden: Vec<usize>,
    #[serde(default)]
    pub am2: Am2Config,
}

fn default_head() -> Vec<usize> {
    vec![16]
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.backbone.embed_dim == 0 {
            issues.push("embed_dim must be >= 1".to_string());
        }
        if self.backbone.hidden_layers.iter().any(|&w| w == 0) {
            issues.push("hidden layer widths must be >= 1".to_string());
        }
        if self.head_hidden.iter().any(|&w| w == 0) {
            issues.push("head widths must be >= 1".to_string());
        }
        if self.am2.enabled {
            if self.am2.scen_dim == 0 {
                issues.push("am2.scen_dim must be >= 1".to_string());
            }
            if self.am2.w < 0.0 {
                issues.push("am2.w must be >= 0".to_string());
            }
            if self.am2.tower_widths.iter().any(|&w| w == 0) {
                issues.push("am2.tower_widths must be >= 1".to_string());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(AieError::InvalidConfig { issues })
        }
    }
}

/// All trainable arrays of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub field_names: Vec<String>,
    pub field_cards: Vec<usize>,
    pub scenario_field: usize,
    pub embeddings: Vec<DenseArray>,
    /// Cross layers: per layer a weight vector and bias of width `x0`.
    pub cross: Vec<(DenseArray, DenseArray)>,
    pub hidden: Vec<(DenseArray, DenseArray)>,
    pub head: Vec<(DenseArray, DenseArray)>,
    pub hypernet: Option<ScenarioHypernet>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, schema: &FeatureSchema, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        schema.validate()?;
        let n_fields = schema.n_fields();
        let d = config.backbone.embed_dim;
        let x0_dim = n_fields * d;

        let mut field_names = Vec::with_capacity(n_fields);
        let mut field_cards = Vec::with_capacity(n_fields);
        let mut embeddings = Vec::with_capacity(n_fields);
        for (f, (name, _)) in schema.categorical_fields.iter().enumerate() {
            let card = schema.cardinality(f);
            field_names.push(name.clone());
            field_cards.push(card);
            embeddings.push(seeded_init(
                &[card, d],
                InitScheme::UniformGlorot,
                derive_seed_str(seed, &format!("embed.{name}")),
            ));
        }

        let mut cross = Vec::new();
        if config.backbone.kind == BackboneKind::Crossnet {
            for k in 0..config.backbone.n_cross_layers {
                cross.push((
                    seeded_init(
                        &[x0_dim],
                        InitScheme::UniformGlorot,
                        derive_seed_str(seed, &format!("cross.{k}.w")),
                    ),
                    seeded_init(&[x0_dim], InitScheme::Zeros, 0),
                ));
            }
        }

        let mut hidden = Vec::new();
        let mut w_in = x0_dim;
        for (k, &w_out) in config.backbone.hidden_layers.iter().enumerate() {
            hidden.push((
                seeded_init(
                    &[w_out, w_in],
                    InitScheme::UniformGlorot,
                    derive_seed_str(seed, &format!("mlp.{k}.w")),
                ),
                seeded_init(&[w_out], InitScheme::Zeros, 0),
            ));
            w_in = w_out;
        }
        let h0_dim = w_in;

        let mut head = Vec::new();
        let mut widths = config.head_hidden.clone();
        widths.push(1);
        let mut w_in = h0_dim;
        for (k, &w_out) in widths.iter().enumerate() {
            head.push((
                seeded_init(
                    &[w_out, w_in],
                    InitScheme::UniformGlorot,
                    derive_seed_str(seed, &format!("head.{k}.w")),
                ),
                seeded_init(&[w_out], InitScheme::Zeros, 0),
            ));
            w_in = w_out;
        }

        let hypernet = if config.am2.enabled {
            let spec = DynamicTowerSpec::new(h0_dim, &config.am2.tower_widths);
            let n_scen = schema.cardinality(schema.scenario_index());
            Some(ScenarioHypernet::init(n_scen, config.am2.scen_dim, spec, seed))
        } else {
            None
        };

        Ok(ModelParams {
            config: config.clone(),
            field_names,
            field_cards,
            scenario_field: schema.scenario_index(),
            embeddings,
            cross,
            hidden,
            head,
            hypernet,
        })
    }

    pub fn x0_dim(&self) -> usize {
        self.field_names.len() * self.config.backbone.embed_dim
    }

    pub fn h0_dim(&self) -> usize {
        self.config
            .backbone
            .hidden_layers
            .last()
            .copied()
            .unwrap_or_else(|| self.x0_dim())
    }

    /// Same structure with every array zeroed; used as a gradient holder.
    pub fn zeros_like(&self) -> ModelParams {
        let mut g = self.clone();
        for (_, arr) in g.named_arrays_mut() {
            for v in arr.values_mut() {
                *v = 0.0;
            }
        }
        g
    }

    /// Stable (name, array) listing of every trainable group.
    pub fn named_arrays(&self) -> Vec<(String, &DenseArray)> {
        let mut out = Vec::new();
        for (name, e) in self.field_names.iter().zip(&self.embeddings) {
            out.push((format!("embed.{name}"), e));
        }
        for (k, (w, b)) in self.cross.iter().enumerate() {
            out.push((format!("cross.{k}.w"), w));
            out.push((format!("cross.{k}.b"), b));
        }
        for (k, (w, b)) in self.hidden.iter().enumerate() {
            out.push((format!("mlp.{k}.w"), w));
            out.push((format!("mlp.{k}.b"), b));
        }
        for (k, (w, b)) in self.head.iter().enumerate() {
            out.push((format!("head.{k}.w"), w));
            out.push((format!("head.{k}.b"), b));
        }
        if let Some(h) = &self.hypernet {
            out.push(("am2.scen_embed".to_string(), &h.scen_embed));
            out.push(("am2.proj.w".to_string(), &h.proj_w));
            out.push(("am2.proj.b".to_string(), &h.proj_b));
        }
        out
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut out: Vec<(String, &mut DenseArray)> = Vec::new();
        for (name, e) in self.field_names.iter().zip(self.embeddings.iter_mut()) {
            out.push((format!("embed.{name}"), e));
        }
        for (k, (w, b)) in self.cross.iter_mut().enumerate() {
            out.push((format!("cross.{k}.w"), w));
            out.push((format!("cross.{k}.b"), b));
        }
        for (k, (w, b)) in self.hidden.iter_mut().enumerate() {
            out.push((format!("mlp.{k}.w"), w));
            out.push((format!("mlp.{k}.b"), b));
        }
        for (k, (w, b)) in self.head.iter_mut().enumerate() {
            out.push((format!("head.{k}.w"), w));
            out.push((format!("head.{k}.b"), b));
        }
        if let Some(h) = &mut self.hypernet {
            out.push(("am2.scen_embed".to_string(), &mut h.scen_embed));
            out.push(("am2.proj.w".to_string(), &mut h.proj_w));
            out.push(("am2.proj.b".to_string(), &mut h.proj_b));
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }
}

/// Everything backward needs from one training forward pass.
pub struct ForwardCache {
    pub idx: Vec<usize>,
    x0: Vec<f64>,
    /// Per cross layer: the layer's output buffer (batch x x0_dim).
    cross_out: Vec<Vec<f64>>,
    /// Per cross layer: the scalar `w_k . x_k` per sample.
    cross_s: Vec<Vec<f64>>,
    hidden_acts: Vec<Vec<f64>>,
    head_acts: Vec<Vec<f64>>,
    pub h0: Vec<f64>,
    pub logits: Vec<f64>,
    pub pctr: Vec<f64>,
    price: Option<PriceCache>,
}

struct PriceCache {
    scenarios: Vec<u32>,
    towers: BTreeMap<u32, Vec<(DenseArray, DenseArray)>>,
    acts: Vec<TowerActs>,
    yhat: Vec<f64>,
    targets: Vec<f64>,
}

impl ForwardCache {
    pub fn price_predictions(&self) -> Option<&[f64]> {
        self.price.as_ref().map(|p| p.yhat.as_slice())
    }
}

fn check_indices(params: &ModelParams, dataset: &Dataset, idx: &[usize]) -> Result<()> {
    for &i in idx {
        let s = &dataset.samples[i];
        for (f, &xi) in s.x.iter().enumerate() {
            if (xi as usize) >= params.field_cards[f] {
                return Err(AieError::IndexOutOfRange {
                    what: format!("field {:?}", params.field_names[f]),
                    index: xi as usize,
                    limit: params.field_cards[f],
                });
            }
        }
    }
    Ok(())
}

/// Training-time forward pass. `with_price` controls whether the generated
/// price tower runs; the serving path never sets it.
pub fn forward_train(
    params: &ModelParams,
    dataset: &Dataset,
    idx: &[usize],
    with_price: bool,
) -> Result<ForwardCache> {
    if idx.is_empty() {
        return Err(AieError::invalid("empty batch"));
    }
    check_indices(params, dataset, idx)?;
    let b = idx.len();
    let d = params.config.backbone.embed_dim;
    let x0_dim = params.x0_dim();
    let h0_dim = params.h0_dim();

    let mut x0 = vec![0.0; b * x0_dim];
    for (r, &i) in idx.iter().enumerate() {
        let s = &dataset.samples[i];
        let row = &mut x0[r * x0_dim..(r + 1) * x0_dim];
        for (f, &xi) in s.x.iter().enumerate() {
            let e = params.embeddings[f].row(xi as usize);
            row[f * d..(f + 1) * d].copy_from_slice(e);
        }
    }

    // Cross stack (crossnet only): x_{k+1} = x0 * (w_k . x_k) + b_k + x_k.
    let n_cross = params.cross.len();
    let mut cross_out: Vec<Vec<f64>> = Vec::with_capacity(n_cross);
    let mut cross_s: Vec<Vec<f64>> = Vec::with_capacity(n_cross);
    for (w, bias) in &params.cross {
        let prev: &[f64] = cross_out.last().map(|v| v.as_slice()).unwrap_or(&x0);
        let mut out = vec![0.0; b * x0_dim];
        let mut scal = vec![0.0; b];
        for r in 0..b {
            let xk = &prev[r * x0_dim..(r + 1) * x0_dim];
            let x0r = &x0[r * x0_dim..(r + 1) * x0_dim];
            let mut s = 0.0;
            for (wj, xj) in w.values().iter().zip(xk) {
                s += wj * xj;
            }
            scal[r] = s;
            let o = &mut out[r * x0_dim..(r + 1) * x0_dim];
            for j in 0..x0_dim {
                o[j] = x0r[j] * s + bias.values()[j] + xk[j];
            }
        }
        cross_out.push(out);
        cross_s.push(scal);
    }

    // Hidden MLP with relu.
    let mut hidden_acts: Vec<Vec<f64>> = Vec::with_capacity(params.hidden.len());
    for (k, (w, bias)) in params.hidden.iter().enumerate() {
        let w_out = w.rows();
        let w_in = w.cols();
        let prev: &[f64] = if k == 0 {
            cross_out.last().map(|v| v.as_slice()).unwrap_or(&x0)
        } else {
            &hidden_acts[k - 1]
        };
        let mut out = vec![0.0; b * w_out];
        for r in 0..b {
            let z = &mut out[r * w_out..(r + 1) * w_out];
            z.copy_from_slice(bias.values());
            affine_into(w.values(), &prev[r * w_in..(r + 1) * w_in], z);
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        hidden_acts.push(out);
    }

    let h0: Vec<f64> = match hidden_acts.last() {
        Some(a) => a.clone(),
        None => cross_out.last().cloned().unwrap_or_else(|| x0.clone()),
    };

    // CTR head: relu on hidden layers, identity on the final width-1 layer.
    let n_head = params.head.len();
    let mut head_acts: Vec<Vec<f64>> = Vec::with_capacity(n_head);
    for (k, (w, bias)) in params.head.iter().enumerate() {
        let w_out = w.rows();
        let w_in = w.cols();
        let prev: &[f64] = if k == 0 { &h0 } else { &head_acts[k - 1] };
        let mut out = vec![0.0; b * w_out];
        for r in 0..b {
            let z = &mut out[r * w_out..(r + 1) * w_out];
            z.copy_from_slice(bias.values());
            affine_into(w.values(), &prev[r * w_in..(r + 1) * w_in], z);
            if k + 1 < n_head {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        head_acts.push(out);
    }
    let logits: Vec<f64> = head_acts.last().unwrap().clone();
    let pctr: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();

    let price = if with_price {
        let hyper = params
            .hypernet
            .as_ref()
            .ok_or_else(|| AieError::invalid("price forward requested without a hypernet"))?;
        let mut scenarios = Vec::with_capacity(b);
        let mut towers: BTreeMap<u32, Vec<(DenseArray, DenseArray)>> = BTreeMap::new();
        for &i in idx {
            let scen = dataset.samples[i].scenario;
            scenarios.push(scen);
            if !towers.contains_key(&scen) {
                towers.insert(scen, generate_tower(hyper, scen as usize)?);
            }
        }
        let mut acts = Vec::with_capacity(b);
        let mut yhat = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for (r, &i) in idx.iter().enumerate() {
            let layers = &towers[&scenarios[r]];
            let (y, a) = am2::price_forward_cached(layers, &h0[r * h0_dim..(r + 1) * h0_dim])?;
            yhat.push(y);
            acts.push(a);
            // Market price regressed in log1p space.
            targets.push((1.0 + dataset.samples[i].payprice).ln());
        }
        Some(PriceCache {
            scenarios,
            towers,
            acts,
            yhat,
            targets,
        })
    } else {
        None
    };

    Ok(ForwardCache {
        idx: idx.to_vec(),
        x0,
        cross_out,
        cross_s,
        hidden_acts,
        head_acts,
        h0,
        logits,
        pctr,
        price,
    })
}

/// Serving path: probabilities only, consuming nothing but the categorical
/// features. Output is a pure function of (params, x).
pub fn predict(params: &ModelParams, dataset: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    Ok(forward_train(params, dataset, idx, false)?.pctr)
}

pub fn predict_all(params: &ModelParams, dataset: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(4096) {
        out.extend(predict(params, dataset, chunk)?);
    }
    Ok(out)
}

/// Weighted binary cross-entropy with mean reduction. Weights scale only the
/// positive term; probabilities are already clamped by the forward pass.
pub fn bce_loss(pctr: &[f64], labels: &[u8], weights: &[f64]) -> f64 {
    debug_assert_eq!(pctr.len(), labels.len());
    debug_assert_eq!(pctr.len(), weights.len());
    let mut acc = 0.0;
    for ((&p, &y), &w) in pctr.iter().zip(labels).zip(weights) {
        if y == 1 {
            acc -= w * p.ln();
        } else {
            acc -= (1.0 - p).ln();
        }
    }
    acc / pctr.len() as f64
}

/// Per-sample pieces of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ctr: f64,
    pub price: f64,
}

/// What the trainer feeds into the loss besides the model itself.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    /// Per-dataset-sample weights (1.0 everywhere when BCM is off).
    pub weights: Option<&'a [f64]>,
    /// Weight of the auxiliary price loss. A weight of exactly 0 skips the
    /// price path entirely so the trajectory is bit-identical to a bare
    /// backbone.
    pub price_weight: f64,
}

impl LossSpec<'static> {
    pub fn ctr_only() -> Self {
        LossSpec {
            weights: None,
            price_weight: 0.0,
        }
    }
}

fn batch_weights(spec: &LossSpec, idx: &[usize]) -> Vec<f64> {
    match spec.weights {
        Some(w) => idx.iter().map(|&i| w[i]).collect(),
        None => vec![1.0; idx.len()],
    }
}

pub fn batch_loss(
    params: &ModelParams,
    dataset: &Dataset,
    idx: &[usize],
    spec: &LossSpec,
) -> Result<LossParts> {
    let with_price = spec.price_weight > 0.0 && params.hypernet.is_some();
    let cache = forward_train(params, dataset, idx, with_price)?;
    loss_from_cache(&cache, dataset, spec)
}

fn loss_from_cache(cache: &ForwardCache, dataset: &Dataset, spec: &LossSpec) -> Result<LossParts> {
    let labels: Vec<u8> = cache.idx.iter().map(|&i| dataset.samples[i].y).collect();
    let weights = batch_weights(spec, &cache.idx);
    let ctr = bce_loss(&cache.pctr, &labels, &weights);
    let price = match &cache.price {
        Some(p) => mae_loss(&p.yhat, &p.targets),
        None => 0.0,
    };
    Ok(LossParts {
        total: am2::joint_loss(ctr, price, spec.price_weight),
        ctr,
        price,
    })
}

/// Full backward pass; returns the loss parts and a gradient holder shaped
/// like the parameters.
pub fn batch_grads(
    params: &ModelParams,
    dataset: &Dataset,
    idx: &[usize],
    spec: &LossSpec,
) -> Result<(LossParts, ModelParams)> {
    let with_price = spec.price_weight > 0.0 && params.hypernet.is_some();
    let cache = forward_train(params, dataset, idx, with_price)?;
    let parts = loss_from_cache(&cache, dataset, spec)?;
    let mut grads = params.zeros_like();

    let b = idx.len();
    let bf = b as f64;
    let d = params.config.backbone.embed_dim;
    let x0_dim = params.x0_dim();
    let h0_dim = params.h0_dim();
    let weights = batch_weights(spec, idx);

    // d loss / d logit, mean reduction folded in.
    let mut dlogit = vec![0.0; b];
    for (r, &i) in idx.iter().enumerate() {
        let p = cache.pctr[r];
        dlogit[r] = if dataset.samples[i].y == 1 {
            weights[r] * (p - 1.0) / bf
        } else {
            p / bf
        };
    }

    // Head backward (last layer identity, hidden layers relu).
    let n_head = params.head.len();
    let mut da: Vec<f64> = dlogit;
    let mut dh0 = vec![0.0; b * h0_dim];
    for k in (0..n_head).rev() {
        let (w, _) = &params.head[k];
        let (d_out, d_in) = (w.rows(), w.cols());
        let (gw, gb) = &mut grads.head[k];
        let prev_all: &[f64] = if k == 0 { &cache.h0 } else { &cache.head_acts[k - 1] };
        let out_all = &cache.head_acts[k];
        let mut dprev = vec![0.0; b * d_in];
        for r in 0..b {
            let prev = &prev_all[r * d_in..(r + 1) * d_in];
            let out = &out_all[r * d_out..(r + 1) * d_out];
            for i in 0..d_out {
                let mut g = da[r * d_out + i];
                if k + 1 < n_head && out[i] <= 0.0 {
                    g = 0.0;
                }
                if g == 0.0 {
                    continue;
                }
                gb.values_mut()[i] += g;
                let wrow = &w.values()[i * d_in..(i + 1) * d_in];
                let gwrow = &mut gw.values_mut()[i * d_in..(i + 1) * d_in];
                let dp = &mut dprev[r * d_in..(r + 1) * d_in];
                for j in 0..d_in {
                    gwrow[j] += g * prev[j];
                    dp[j] += wrow[j] * g;
                }
            }
        }
        if k == 0 {
            dh0.copy_from_slice(&dprev);
        } else {
            da = dprev;
        }
    }

    // Price tower backward: gradients flow into the generated parameters
    // (then the hypernetwork) and into h0 alongside the head's gradient.
    if with_price {
        let pc = cache.price.as_ref().unwrap();
        let dmae = mae_grad(&pc.yhat, &pc.targets);
        let hyper = params.hypernet.as_ref().unwrap();
        let pcount = hyper.spec.param_count();
        let mut dtheta_by_scen: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut dh0_local = vec![0.0; h0_dim];
        for r in 0..b {
            let dy = spec.price_weight * dmae[r];
            if dy == 0.0 {
                continue;
            }
            let layers = &pc.towers[&pc.scenarios[r]];
            let dtheta = dtheta_by_scen
                .entry(pc.scenarios[r])
                .or_insert_with(|| vec![0.0; pcount]);
            dh0_local.iter_mut().for_each(|v| *v = 0.0);
            am2::price_backward(layers, &pc.acts[r], dy, dtheta, &mut dh0_local);
            let dst = &mut dh0[r * h0_dim..(r + 1) * h0_dim];
            for (t, s) in dst.iter_mut().zip(&dh0_local) {
                *t += s;
            }
        }
        let gh = grads.hypernet.as_mut().unwrap();
        for (scen, dtheta) in &dtheta_by_scen {
            am2::hypernet_backward(
                hyper,
                *scen as usize,
                dtheta,
                &mut gh.scen_embed,
                &mut gh.proj_w,
                &mut gh.proj_b,
            );
        }
    }

    // Hidden MLP backward.
    let n_hidden = params.hidden.len();
    let mut da = dh0;
    for k in (0..n_hidden).rev() {
        let (w, _) = &params.hidden[k];
        let (d_out, d_in) = (w.rows(), w.cols());
        let (gw, gb) = &mut grads.hidden[k];
        let prev_all: &[f64] = if k == 0 {
            cache.cross_out.last().map(|v| v.as_slice()).unwrap_or(&cache.x0)
        } else {
            &cache.hidden_acts[k - 1]
        };
        let out_all = &cache.hidden_acts[k];
        let mut dprev = vec![0.0; b * d_in];
        for r in 0..b {
            let prev = &prev_all[r * d_in..(r + 1) * d_in];
            let out = &out_all[r * d_out..(r + 1) * d_out];
            for i in 0..d_out {
                let mut g = da[r * d_out + i];
                if out[i] <= 0.0 {
                    g = 0.0;
                }
                if g == 0.0 {
                    continue;
                }
                gb.values_mut()[i] += g;
                let wrow = &w.values()[i * d_in..(i + 1) * d_in];
                let gwrow = &mut gw.values_mut()[i * d_in..(i + 1) * d_in];
                let dp = &mut dprev[r * d_in..(r + 1) * d_in];
                for j in 0..d_in {
                    gwrow[j] += g * prev[j];
                    dp[j] += wrow[j] * g;
                }
            }
        }
        da = dprev;
    }

    // Cross-stack backward. x_{k+1} = x0 * s_k + b_k + x_k with
    // s_k = w_k . x_k, so x0 receives a direct term from every layer.
    let n_cross = params.cross.len();
    let mut dx0_extra = vec![0.0; b * x0_dim];
    for k in (0..n_cross).rev() {
        let (w, _) = &params.cross[k];
        let (gw, gb) = &mut grads.cross[k];
        let prev_all: &[f64] = if k == 0 {
            &cache.x0
        } else {
            &cache.cross_out[k - 1]
        };
        let mut dprev = vec![0.0; b * x0_dim];
        for r in 0..b {
            let g = &da[r * x0_dim..(r + 1) * x0_dim];
            let xk = &prev_all[r * x0_dim..(r + 1) * x0_dim];
            let x0r = &cache.x0[r * x0_dim..(r + 1) * x0_dim];
            let s = cache.cross_s[k][r];
            let mut gs = 0.0;
            for j in 0..x0_dim {
                gb.values_mut()[j] += g[j];
                gs += g[j] * x0r[j];
                dx0_extra[r * x0_dim + j] += g[j] * s;
            }
            let dp = &mut dprev[r * x0_dim..(r + 1) * x0_dim];
            for j in 0..x0_dim {
                gw.values_mut()[j] += gs * xk[j];
                dp[j] = g[j] + gs * w.values()[j];
            }
        }
        da = dprev;
    }
    let mut dx0 = da;
    for (t, s) in dx0.iter_mut().zip(&dx0_extra) {
        *t += s;
    }

    // Scatter into embedding rows; rows absent from the batch stay zero.
    for (r, &i) in idx.iter().enumerate() {
        let s = &dataset.samples[i];
        let row = &dx0[r * x0_dim..(r + 1) * x0_dim];
        for (f, &xi) in s.x.iter().enumerate() {
            let dst = grads.embeddings[f].row_mut(xi as usize);
            for (t, v) in dst.iter_mut().zip(&row[f * d..(f + 1) * d]) {
                *t += v;
            }
        }
    }

    Ok((parts, grads))
}

/// Adam state for every parameter group, in `named_arrays` order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub hyper: AdamHyper,
    /// Decoupled L2 added to gradients as `l2 * param`.
    pub l2: f64,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(params: &ModelParams, hyper: AdamHyper, l2: f64) -> Optimizer {
        let states = params
            .named_arrays()
            .iter()
            .map(|(_, a)| AdamState::new(a.shape(), hyper))
            .collect();
        Optimizer { hyper, l2, states }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        let gs = grads.named_arrays();
        let mut ps = params.named_arrays_mut();
        debug_assert_eq!(gs.len(), ps.len());
        for (((pname, p), (gname, g)), st) in ps.iter_mut().zip(&gs).zip(&mut self.states) {
            debug_assert_eq!(pname, gname);
            if self.l2 > 0.0 {
                let mut g2 = (*g).clone();
                for (gv, pv) in g2.values_mut().iter_mut().zip(p.values()) {
                    *gv += self.l2 * *pv;
                }
                adam_step(p, &g2, st)?;
            } else {
                adam_step(p, g, st)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_total: f64,
    pub mean_ctr: f64,
    pub mean_price: f64,
    pub n_batches: usize,
}

/// One pass over the dataset in seeded-shuffle order. Aborts on the first
/// non-finite loss, reporting the last good step.
pub fn train_epoch(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    dataset: &Dataset,
    spec: &LossSpec,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(AieError::invalid("cannot train on an empty dataset"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
    order.shuffle(&mut rng);

    let mut sum_total = 0.0;
    let mut sum_ctr = 0.0;
    let mut sum_price = 0.0;
    let mut n_batches = 0usize;
    for (step, batch) in order.chunks(batch_size.max(1)).enumerate() {
        let (parts, grads) = batch_grads(params, dataset, batch, spec)?;
        if !parts.total.is_finite() {
            return Err(AieError::Divergence {
                step: step as u64,
                what: format!("loss became {}", parts.total),
            });
        }
        optimizer.step(params, &grads)?;
        sum_total += parts.total;
        sum_ctr += parts.ctr;
        sum_price += parts.price;
        n_batches += 1;
    }
    Ok(EpochStats {
        mean_total: sum_total / n_batches as f64,
        mean_ctr: sum_ctr / n_batches as f64,
        mean_price: sum_price / n_batches as f64,
        n_batches,
    })
}

/// Serializable snapshot of a trained model: config, schema, dictionaries,
/// and every parameter array. JSON floats round-trip exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub schema: FeatureSchema,
    pub encoders: Encoders,
    pub seed: u64,
    pub selected_epoch: usize,
    pub params: Vec<(String, DenseArray)>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn capture(
        params: &ModelParams,
        schema: &FeatureSchema,
        encoders: &Encoders,
        seed: u64,
        selected_epoch: usize,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: params.config.clone(),
            schema: schema.clone(),
            encoders: encoders.clone(),
            seed,
            selected_epoch,
            params: params
                .named_arrays()
                .into_iter()
                .map(|(n, a)| (n, a.clone()))
                .collect(),
        }
    }

    pub fn restore(&self) -> Result<(ModelParams, Encoders)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(AieError::invalid(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut params = ModelParams::init(&self.model, &self.schema, self.seed)?;
        let stored: BTreeMap<&str, &DenseArray> =
            self.params.iter().map(|(n, a)| (n.as_str(), a)).collect();
        for (name, arr) in params.named_arrays_mut() {
            let src = stored.get(name.as_str()).ok_or_else(|| {
                AieError::invalid(format!("checkpoint is missing parameter {name:?}"))
            })?;
            if src.shape() != arr.shape() {
                return Err(AieError::ShapeMismatch {
                    op: "checkpoint restore",
                    left: arr.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            arr.values_mut().copy_from_slice(src.values());
        }
        let mut encoders = self.encoders.clone();
        encoders.rebuild();
        Ok((params, encoders))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string(self).map_err(|e| AieError::Json {
            context: "serialize checkpoint".to_string(),
            msg: e.to_string(),
        })?;
        std::fs::write(path, body).map_err(|e| AieError::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path)
            .map_err(|e| AieError::io(path.display().to_string(), e))?;
        serde_json::from_str(&body).map_err(|e| AieError::Json {
            context: format!("parse checkpoint {}", path.display()),
            msg: e.to_string(),
        })
    }
}
