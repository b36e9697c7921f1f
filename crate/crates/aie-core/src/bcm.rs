//! Bid calibration: turns CPC bids into positive-sample weights.
//!
//! Per scene, positive-sample bids are clipped to empirical quantile bounds
//! and min-max scaled into `[a, b]`; the weights are then renormalized so
//! the mean positive weight per scene stays exactly 1, keeping the overall
//! positive ratio unchanged. Negatives always weigh 1.

use crate::data::Dataset;
use crate::error::{AieError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Scene key used when `per_scene` is off.
const GLOBAL_SCENE: u32 = u32::MAX;

/// Scenes with fewer positives than this fall back to weight 1.
pub const MIN_POSITIVES_PER_SCENE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcmConfig {
    pub enabled: bool,
    /// Lower bound of the scaled weight interval.
    #[serde(default = "default_a")]
    pub a: f64,
    /// Upper bound of the scaled weight interval.
    #[serde(default = "default_b")]
    pub b: f64,
    /// Outlier-removal quantiles applied to positive bids before scaling.
    #[serde(default = "default_quantiles")]
    pub quantiles: (f64, f64),
    /// Fit separate statistics per scene (scenario); off fits one global set.
    #[serde(default = "default_true")]
    pub per_scene: bool,
}

fn default_a() -> f64 {
    0.8
}
fn default_b() -> f64 {
    1.2
}
fn default_quantiles() -> (f64, f64) {
    (0.01, 0.99)
}
fn default_true() -> bool {
    true
}

impl Default for BcmConfig {
    fn default() -> Self {
        BcmConfig {
            enabled: false,
            a: default_a(),
            b: default_b(),
            quantiles: default_quantiles(),
            per_scene: default_true(),
        }
    }
}

impl BcmConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.a <= self.b) {
            issues.push(format!("bcm bounds must satisfy a <= b (a={}, b={})", self.a, self.b));
        }
        if self.a < 0.0 {
            issues.push("bcm lower bound a must be >= 0".to_string());
        }
        let (lo, hi) = self.quantiles;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            issues.push(format!("bcm quantiles must satisfy 0 <= lo < hi <= 1 (got {lo}, {hi})"));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(AieError::InvalidConfig { issues })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub min: f64,
    pub max: f64,
    /// 1 / mean pre-normalization weight over the scene's fit positives.
    pub normalizer: f64,
    pub degenerate: bool,
    pub n_positives: usize,
}

/// Fitted clip bounds and renormalization factors, dumpable to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcmStats {
    pub a: f64,
    pub b: f64,
    pub per_scene: bool,
    pub scenes: BTreeMap<u32, SceneStats>,
}

/// One weight per training sample plus bookkeeping about fallback scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    /// Positives whose scene was unseen at fit time (weighted 1).
    pub unseen_scene_positives: usize,
}

/// Empirical quantile by nearest order statistic on the sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn pre_weight(bid: f64, a: f64, b: f64, min: f64, max: f64) -> f64 {
    if a == b {
        return a;
    }
    let clipped = bid.clamp(min, max);
    // Lerp form of min-max scaling: hits a at the floor and b at the
    // ceiling exactly (x/x is exactly 1 in IEEE arithmetic).
    let t = (clipped - min) / (max - min);
    a * (1.0 - t) + b * t
}

/// Fits per-scene (or global) clip bounds from positive-sample bids.
pub fn fit_stats(dataset: &Dataset, config: &BcmConfig) -> Result<BcmStats> {
    config.validate()?;
    let mut by_scene: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for s in &dataset.samples {
        if s.y == 1 {
            let key = if config.per_scene { s.scenario } else { GLOBAL_SCENE };
            by_scene.entry(key).or_default().push(s.bid);
        }
    }
    if by_scene.is_empty() {
        return Err(AieError::invalid(
            "bid calibration needs at least one positive sample",
        ));
    }
    let (q_lo, q_hi) = config.quantiles;
    let mut scenes = BTreeMap::new();
    for (scene, mut bids) in by_scene {
        bids.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = bids.len();
        let min = quantile(&bids, q_lo);
        let max = quantile(&bids, q_hi);
        let degenerate = n < MIN_POSITIVES_PER_SCENE || min >= max;
        let normalizer = if degenerate {
            1.0
        } else {
            let mean: f64 = bids
                .iter()
                .map(|&bid| pre_weight(bid, config.a, config.b, min, max))
                .sum::<f64>()
                / n as f64;
            1.0 / mean
        };
        scenes.insert(
            scene,
            SceneStats {
                min,
                max,
                normalizer,
                degenerate,
                n_positives: n,
            },
        );
    }
    Ok(BcmStats {
        a: config.a,
        b: config.b,
        per_scene: config.per_scene,
        scenes,
    })
}

/// Weight of a single sample under fitted statistics. Negatives and samples
/// from degenerate or unseen scenes weigh 1.
pub fn weight_for(y: u8, bid: f64, scenario: u32, stats: &BcmStats) -> f64 {
    if y != 1 {
        return 1.0;
    }
    let key = if stats.per_scene { scenario } else { GLOBAL_SCENE };
    match stats.scenes.get(&key) {
        None => 1.0,
        Some(sc) if sc.degenerate => 1.0,
        Some(sc) => sc.normalizer * pre_weight(bid, stats.a, stats.b, sc.min, sc.max),
    }
}

/// Pre-normalization weight (the pure clip + min-max map); used by tests and
/// audits to check the endpoint contract bid=min -> a, bid=max -> b.
pub fn pre_normalization_weight(bid: f64, scenario: u32, stats: &BcmStats) -> Option<f64> {
    let key = if stats.per_scene { scenario } else { GLOBAL_SCENE };
    stats
        .scenes
        .get(&key)
        .filter(|sc| !sc.degenerate)
        .map(|sc| pre_weight(bid, stats.a, stats.b, sc.min, sc.max))
}

/// Materializes the weight vector for a training dataset.
pub fn apply(dataset: &Dataset, stats: &BcmStats) -> WeightVector {
    let mut weights = Vec::with_capacity(dataset.len());
    let mut unseen = 0usize;
    for s in &dataset.samples {
        if s.y == 1 {
            let key = if stats.per_scene { s.scenario } else { GLOBAL_SCENE };
            if !stats.scenes.contains_key(&key) {
                unseen += 1;
            }
        }
        weights.push(weight_for(s.y, s.bid, s.scenario, stats));
    }
    WeightVector {
        weights,
        unseen_scene_positives: unseen,
    }
}

/// Inverse-propensity reading of the weights: `p_i = 1 / alpha_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct IpsView {
    /// `(sample_index, propensity)` for every sample with a positive weight.
    pub propensities: Vec<(usize, f64)>,
    pub excluded_zero_weights: usize,
}

pub fn ips_view(weights: &WeightVector) -> IpsView {
    let mut propensities = Vec::with_capacity(weights.weights.len());
    let mut excluded = 0usize;
    for (i, &w) in weights.weights.iter().enumerate() {
        if w > 0.0 {
            propensities.push((i, 1.0 / w));
        } else {
            excluded += 1;
        }
    }
    IpsView {
        propensities,
        excluded_zero_weights: excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetBuilder, EncodingPolicy, FeatureSchema, SplitTag};

    fn schema() -> FeatureSchema {
        FeatureSchema {
            categorical_fields: vec![("scene".to_string(), 8), ("ad".to_string(), 2048)],
            scenario_field: "scene".to_string(),
            label_field: "click".to_string(),
            bid_field: "bid".to_string(),
            payprice_field: "pay".to_string(),
            group_fields: vec![],
            encoding: EncodingPolicy::Dictionary,
        }
    }

    fn build(rows: &[(u8, f64, &str)]) -> Dataset {
        let mut b = DatasetBuilder::new(schema()).unwrap();
        for (i, (y, bid, scene)) in rows.iter().enumerate() {
            b.push_row(
                *y,
                *bid,
                0.0,
                &[],
                &[scene.to_string(), format!("ad{i}")],
            )
            .unwrap();
        }
        b.finish(SplitTag::Train)
    }

    #[test]
    fn uniform_bids_are_degenerate_and_weigh_one() {
        let rows: Vec<(u8, f64, &str)> = (0..20).map(|_| (1u8, 5.0, "s0")).collect();
        let ds = build(&rows);
        let cfg = BcmConfig {
            enabled: true,
            a: 0.5,
            b: 1.5,
            ..BcmConfig::default()
        };
        let stats = fit_stats(&ds, &cfg).unwrap();
        assert!(stats.scenes.values().all(|s| s.degenerate));
        let wv = apply(&ds, &stats);
        assert!(wv.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn quantile_bounds_land_on_order_statistics()  {
        let rows: Vec<(u8, f64, &str)> = (1..=100).map(|i| (1u8, i as f64, "s0")).collect();
        let ds = build(&rows);
        let cfg = BcmConfig {
            enabled: true,
            a: 0.5,
            b: 1.5,
            quantiles: (0.01, 0.99),
            ..BcmConfig::default()
        };
        let stats = fit_stats(&ds, &cfg).unwrap();
        let sc = stats.scenes.values().next().unwrap();
        assert!((sc.min - 1.0).abs() <= 1.0, "min {}", sc.min);
        assert!((sc.max - 100.0).abs() <= 1.0, "max {}", sc.max);
    }

    #[test]
    fn disjoint_scenes_get_independent_stats() {
        let mut rows: Vec<(u8, f64, &str)> = (0..20).map(|i| (1u8, 1.0 + i as f64, "s0")).collect();
        rows.extend((0..20).map(|i| (1u8, 1000.0 + i as f64, "s1")));
        let ds = build(&rows);
        let cfg = BcmConfig {
            enabled: true,
            a: 0.5,
            b: 1.5,
            quantiles: (0.0, 1.0),
            ..BcmConfig::default()
        };
        let stats = fit_stats(&ds, &cfg).unwrap();
        let scenes: Vec<&SceneStats> = stats.scenes.values().collect();
        assert_eq!(scenes.len(), 2);
        assert!(scenes[0].max < scenes[1].min);
    }

    #[test]
    fn endpoint_mapping_and_normalization_by_hand() {
        // Scene positives at {min, mid, max} with a=0.5, b=1.5: pre-norm
        // weights {0.5, 1.0, 1.5}, mean 1, so the normalizer is exactly 1.
        let mut rows: Vec<(u8, f64, &str)> = Vec::new();
        for _ in 0..4 {
            rows.push((1, 10.0, "s0"));
            rows.push((1, 20.0, "s0"));
            rows.push((1, 30.0, "s0"));
        }
        rows.push((0, 999.0, "s0"));
        let ds = build(&rows);
        let cfg = BcmConfig {
            enabled: true,
            a: 0.5,
            b: 1.5,
            quantiles: (0.0, 1.0),
            ..BcmConfig::default()
        };
        let stats = fit_stats(&ds, &cfg).unwrap();
        assert_eq!(pre_normalization_weight(10.0, 1, &stats), Some(0.5));
        assert_eq!(pre_normalization_weight(30.0, 1, &stats), Some(1.5));
        assert_eq!(pre_normalization_weight(20.0, 1, &stats), Some(1.0));
        // Clipping below / above the bounds.
        assert_eq!(pre_normalization_weight(1.0, 1, &stats), Some(0.5));
        assert_eq!(pre_normalization_weight(500.0, 1, &stats), Some(1.5));

        let sc = stats.scenes.values().next().unwrap();
        assert!((sc.normalizer - 1.0).abs() < 1e-12);
        let wv = apply(&ds, &stats);
        let pos_sum: f64 = ds
            .samples
            .iter()
            .zip(&wv.weights)
            .filter(|(s, _)| s.y == 1)
            .map(|(_, &w)| w)
            .sum();
        assert!((pos_sum - 12.0).abs() < 1e-9, "sum {pos_sum}");
        // Negatives stay at 1.
        assert_eq!(wv.weights.last().copied(), Some(1.0));
    }

    #[test]
    fn per_scene_mean_positive_weight_is_one() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let scenes = ["s0", "s1", "s2"];
        let rows: Vec<(u8, f64, String)> = (0..600)
            .map(|_| {
                let scene = scenes[rng.random_range(0..3)];
                let y = (rng.random::<f64>() < 0.4) as u8;
                let bid = (rng.random::<f64>() * 3.0).exp() * 10.0;
                (y, bid, scene.to_string())
            })
            .collect();
        let borrowed: Vec<(u8, f64, &str)> =
            rows.iter().map(|(y, b, s)| (*y, *b, s.as_str())).collect();
        let ds = build(&borrowed);
        let cfg = BcmConfig {
            enabled: true,
            a: 0.5,
            b: 2.0,
            ..BcmConfig::default()
        };
        let stats = fit_stats(&ds, &cfg).unwrap();
        let wv = apply(&ds, &stats);
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (s, &w) in ds.samples.iter().zip(&wv.weights) {
            if s.y == 1 {
                let e = sums.entry(s.scenario).or_insert((0.0, 0));
                e.0 += w;
                e.1 += 1;
            }
        }
        for (scene, (sum, n)) in sums {
            assert!(
                (sum - n as f64).abs() < 1e-9,
                "scene {scene}: sum {sum} vs count {n}"
            );
        }
        // Monotonicity within a scene.
        for scene in 0..3u32 {
            let mut pos: Vec<(f64, f64)> = ds
                .samples
                .iter()
                .zip(&wv.weights)
                .filter(|(s, _)| s.y == 1 && s.scenario == scene + 1)
                .map(|(s, &w)| (s.bid, w))
                .collect();
            pos.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for pair in pos.windows(2) {
                assert!(pair[1].1 >= pair[0].1 - 1e-12);
            }
        }
    }

    #[test]
    fn neutral_bounds_give_exactly_one() {
        let rows: Vec<(u8, f64, &str)> = (0..40)
            .map(|i| ((i % 2) as u8, 1.0 + i as f64, "s0"))
            .collect();
        let ds = build(&rows);
        let cfg = BcmConfig {
            enabled: true,
            a: 1.0,
            b: 1.0,
            ..BcmConfig::default()
        };
        let stats = fit_stats(&ds, &cfg).unwrap();
        let wv = apply(&ds, &stats);
        assert!(wv.weights.iter().all(|&w| w == 1.0), "{:?}", wv.weights);
    }

    #[test]
    fn unseen_scene_falls_back_to_one_with_counter() {
        let fit_rows: Vec<(u8, f64, &str)> = (0..20).map(|i| (1u8, i as f64, "s0")).collect();
        let fit_ds = build(&fit_rows);
        let cfg = BcmConfig {
            enabled: true,
            a: 0.5,
            b: 1.5,
            ..BcmConfig::default()
        };
        let stats = fit_stats(&fit_ds, &cfg).unwrap();
        let mut eval_rows: Vec<(u8, f64, &str)> = vec![(1, 5.0, "s9"), (0, 5.0, "s9")];
        eval_rows.extend_from_slice(&fit_rows[..2]);
        // Encode the eval rows under the fit dictionaries so scene "s9"
        // really is an unseen index rather than a recycled one.
        let mut b = DatasetBuilder::with_encoders(schema(), fit_ds.encoders.clone()).unwrap();
        for (i, (y, bid, scene)) in eval_rows.iter().enumerate() {
            b.push_row(*y, *bid, 0.0, &[], &[scene.to_string(), format!("e{i}")])
                .unwrap();
        }
        let eval_ds = b.finish(SplitTag::Test);
        let wv = apply(&eval_ds, &stats);
        assert_eq!(wv.unseen_scene_positives, 1);
        assert_eq!(wv.weights[0], 1.0);
    }

    #[test]
    fn no_positives_is_an_error() {
        let rows: Vec<(u8, f64, &str)> = (0..10).map(|i| (0u8, i as f64, "s0")).collect();
        let ds = build(&rows);
        assert!(fit_stats(&ds, &BcmConfig::default()).is_err());
    }

    #[test]
    fn ips_view_inverts_weights_and_reproduces_the_loss() {
        use rand::Rng;
        use rand::SeedableRng;
        let wv = WeightVector {
            weights: vec![1.0, 2.0, 0.5, 0.0, 1.25],
            unseen_scene_positives: 0,
        };
        let view = ips_view(&wv);
        assert_eq!(view.excluded_zero_weights, 1);
        assert_eq!(view.propensities[0], (0, 1.0));
        assert_eq!(view.propensities[1], (1, 0.5));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let losses: Vec<f64> = (0..wv.weights.len()).map(|_| rng.random::<f64>()).collect();
        let weighted: f64 = wv
            .weights
            .iter()
            .zip(&losses)
            .map(|(&w, &l)| w * l)
            .sum();
        let ips: f64 = view
            .propensities
            .iter()
            .map(|&(i, p)| losses[i] / p)
            .sum();
        assert!(
            (weighted - ips).abs() <= 1e-12 * weighted.abs().max(1.0),
            "{weighted} vs {ips}"
        );
    }
}
