//! Generative second-price auction simulator.
//!
//! A seeded world holds a ground-truth CTR process over (user, ad, context)
//! triples, per-ad CPC bids (a fraction of ads carry inflated bids), and
//! per-scenario competing-DSP eCPM distributions. Ads are exposed only when
//! their eCPM clears the competing bar, so the resulting log over-represents
//! high-bid ads in low-relevance contexts while an unbiased holdout samples
//! the grid uniformly. Everything is a pure function of (config, seed).

use crate::data::{Dataset, DatasetBuilder, EncodingPolicy, FeatureSchema, Sample, SplitTag};
use crate::error::{AieError, Result};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const FIELD_USER: usize = 0;
pub const FIELD_AD: usize = 1;
pub const FIELD_CONTEXT: usize = 2;
pub const FIELD_SCENARIO: usize = 3;

// Ground-truth logit scales. The model is logit = base + user + ad + context
// + <ad_vec, ctx_vec>, with each term drawn once per world from a seeded
// normal at the scale below. Context quality carries most of the variance:
// it is what both the competing market prices and the click propensity hang
// on, which is also what makes market price informative about CTR.
const LOGIT_BASE: f64 = -2.2;
const USER_SCALE: f64 = 0.2;
const AD_SCALE: f64 = 0.35;
const CONTEXT_SCALE: f64 = 1.3;
const INTERACTION_SCALE: f64 = 0.12;
const INTERACTION_DIM: usize = 4;
// The platform shades its charge-side CTR estimate down by this logit
// margin, so a sizable share of charges hit the bid cap.
const CHARGE_SHADE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_ads: usize,
    pub n_users: usize,
    pub n_contexts: usize,
    pub n_scenarios: usize,
    pub true_model_seed: u64,
    /// Location of the lognormal per-ad base bid.
    pub bid_mu: f64,
    pub bid_sigma: f64,
    /// Fraction of ads whose bid is multiplied by `bid_inflation_factor`.
    pub high_bid_fraction: f64,
    pub bid_inflation_factor: f64,
    /// Base location of the lognormal competing-DSP eCPM; each scenario gets
    /// its own location offset scaled by `scenario_spread`.
    pub competitor_mu: f64,
    pub competitor_sigma: f64,
    pub scenario_spread: f64,
    /// Correlation coefficient tilting the competing eCPM with context
    /// quality, reproducing the positive price-CTR relationship.
    pub price_ctr_correlation: f64,
    pub n_auctions: usize,
    /// Candidate ads evaluated per auction (a retrieval stage); 0 means
    /// every ad competes in every auction.
    #[serde(default)]
    pub n_candidates: usize,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        for (name, v) in [
            ("n_ads", self.n_ads),
            ("n_users", self.n_users),
            ("n_contexts", self.n_contexts),
            ("n_scenarios", self.n_scenarios),
            ("n_auctions", self.n_auctions),
        ] {
            if v < 1 {
                issues.push(format!("{name} must be >= 1"));
            }
        }
        if self.bid_sigma <= 0.0 {
            issues.push("bid_sigma must be > 0".to_string());
        }
        if self.competitor_sigma <= 0.0 {
            issues.push("competitor_sigma must be > 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.high_bid_fraction) {
            issues.push("high_bid_fraction must be in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.price_ctr_correlation) {
            issues.push("price_ctr_correlation must be in [0, 1]".to_string());
        }
        if self.bid_inflation_factor <= 0.0 {
            issues.push("bid_inflation_factor must be > 0".to_string());
        }
        if self.scenario_spread < 0.0 {
            issues.push("scenario_spread must be >= 0".to_string());
        }
        if self.n_candidates > self.n_ads {
            issues.push("n_candidates must not exceed n_ads".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(AieError::InvalidConfig { issues })
        }
    }
}

/// A fully materialized world: ground-truth parameters, bids, and market
/// structure, all derived from `config.true_model_seed`.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    user_eff: Vec<f64>,
    ad_eff: Vec<f64>,
    ctx_eff: Vec<f64>,
    ad_vec: Vec<f64>,
    ctx_vec: Vec<f64>,
    scenario_mu: Vec<f64>,
    /// Standardized context quality, used to tilt the competing eCPM.
    ctx_quality: Vec<f64>,
    ad_bid: Vec<f64>,
    inflated: Vec<bool>,
}

impl World {
    pub fn new(config: &WorldConfig) -> Result<World> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.true_model_seed);
        let mut normals = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * scale
                })
                .collect()
        };
        let user_eff = normals(config.n_users, USER_SCALE);
        let ad_eff = normals(config.n_ads, AD_SCALE);
        let ctx_eff = normals(config.n_contexts, CONTEXT_SCALE);
        let ad_vec = normals(config.n_ads * INTERACTION_DIM, INTERACTION_SCALE);
        let ctx_vec = normals(config.n_contexts * INTERACTION_DIM, 1.0);
        let scenario_mu: Vec<f64> = (0..config.n_scenarios)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                config.competitor_mu + config.scenario_spread * z
            })
            .collect();

        let base_bids: Vec<f64> = (0..config.n_ads)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (config.bid_mu + config.bid_sigma * z).exp()
            })
            .collect();
        let mut order: Vec<usize> = (0..config.n_ads).collect();
        order.shuffle(&mut rng);
        let n_high = (config.high_bid_fraction * config.n_ads as f64).round() as usize;
        let mut inflated = vec![false; config.n_ads];
        for &ad in order.iter().take(n_high) {
            inflated[ad] = true;
        }
        let ad_bid = base_bids
            .iter()
            .zip(&inflated)
            .map(|(&b, &hi)| if hi { b * config.bid_inflation_factor } else { b })
            .collect();

        let mean = ctx_eff.iter().sum::<f64>() / config.n_contexts as f64;
        let var = ctx_eff.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / config.n_contexts as f64;
        let sd = var.sqrt().max(1e-9);
        let ctx_quality = ctx_eff.iter().map(|v| (v - mean) / sd).collect();

        Ok(World {
            config: config.clone(),
            user_eff,
            ad_eff,
            ctx_eff,
            ad_vec,
            ctx_vec,
            scenario_mu,
            ctx_quality,
            ad_bid,
            inflated,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn ad_bid(&self, ad: usize) -> f64 {
        self.ad_bid[ad]
    }

    pub fn is_inflated(&self, ad: usize) -> bool {
        self.inflated[ad]
    }

    /// The platform's coarse CTR estimate used for charging: context quality
    /// only, no user or ad-affinity resolution. Keeping the charge model
    /// coarser than the truth means the expected revenue of an auction
    /// depends on which impression wins it (picking winners whose true CTR
    /// beats the context base rate earns more), which is what lets revenue
    /// reward better rankers at all.
    pub fn platform_ctr(&self, context: usize) -> f64 {
        let logit = LOGIT_BASE + self.ctx_eff[context] - CHARGE_SHADE;
        1.0 / (1.0 + (-logit).exp())
    }

    /// Deterministic ground-truth click probability, strictly inside (0, 1).
    pub fn true_ctr(&self, user: usize, ad: usize, context: usize) -> Result<f64> {
        let check = |what: &str, idx: usize, limit: usize| -> Result<()> {
            if idx >= limit {
                Err(AieError::IndexOutOfRange {
                    what: format!("true_ctr {what}"),
                    index: idx,
                    limit,
                })
            } else {
                Ok(())
            }
        };
        check("user", user, self.config.n_users)?;
        check("ad", ad, self.config.n_ads)?;
        check("context", context, self.config.n_contexts)?;
        let mut logit = LOGIT_BASE + self.user_eff[user] + self.ad_eff[ad] + self.ctx_eff[context];
        let av = &self.ad_vec[ad * INTERACTION_DIM..(ad + 1) * INTERACTION_DIM];
        let cv = &self.ctx_vec[context * INTERACTION_DIM..(context + 1) * INTERACTION_DIM];
        for (a, c) in av.iter().zip(cv) {
            logit += a * c;
        }
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    /// Exact average true CTR over the full (user, ad, context) grid.
    pub fn mean_true_ctr(&self) -> f64 {
        let mut sum = 0.0;
        for u in 0..self.config.n_users {
            for a in 0..self.config.n_ads {
                for c in 0..self.config.n_contexts {
                    sum += self.true_ctr(u, a, c).unwrap();
                }
            }
        }
        sum / (self.config.n_users * self.config.n_ads * self.config.n_contexts) as f64
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            categorical_fields: vec![
                ("user".to_string(), self.config.n_users + 1),
                ("ad".to_string(), self.config.n_ads + 1),
                ("context".to_string(), self.config.n_contexts + 1),
                ("scenario".to_string(), self.config.n_scenarios + 1),
            ],
            scenario_field: "scenario".to_string(),
            label_field: "click".to_string(),
            bid_field: "bidprice".to_string(),
            payprice_field: "payprice".to_string(),
            group_fields: vec![
                "weekday".to_string(),
                "hour".to_string(),
                "slotid".to_string(),
            ],
            encoding: EncodingPolicy::Dictionary,
        }
    }

    /// Simulates `n_auctions` auctions. In each auction every candidate ad is
    /// exposed iff its eCPM (true CTR x bid) clears the max competing-DSP
    /// eCPM drawn for that auction; exposed impressions are charged the
    /// second-price CPC `bar / platform_ctr`, clipped to the bid.
    pub fn generate_biased_log(&self, seed: u64) -> Result<Dataset> {
        let cfg = &self.config;
        let mut builder = DatasetBuilder::new(self.schema())?;
        let rho = cfg.price_ctr_correlation;
        let resid = (1.0 - rho * rho).sqrt();
        let all_ads: Vec<usize> = (0..cfg.n_ads).collect();
        for auction in 0..cfg.n_auctions {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, auction as u64));
            let user = rng.random_range(0..cfg.n_users);
            let context = rng.random_range(0..cfg.n_contexts);
            let scenario = rng.random_range(0..cfg.n_scenarios);
            let eps: f64 = rng.sample(StandardNormal);
            let ln_bar = self.scenario_mu[scenario]
                + cfg.competitor_sigma * (rho * self.ctx_quality[context] + resid * eps);
            let bar = ln_bar.exp();
            let group = [
                (auction % 7).to_string(),
                (auction % 24).to_string(),
                auction.to_string(),
            ];
            let candidates: Vec<usize> = if cfg.n_candidates == 0 {
                all_ads.clone()
            } else {
                let mut picked =
                    rand::seq::index::sample(&mut rng, cfg.n_ads, cfg.n_candidates).into_vec();
                picked.sort_unstable();
                picked
            };
            let charge_ctr = self.platform_ctr(context);
            for ad in candidates {
                let ctr = self.true_ctr(user, ad, context)?;
                let bid = self.ad_bid[ad];
                if ctr * bid < bar {
                    continue;
                }
                let click = rng.random::<f64>() < ctr;
                // Second-price CPC charge at the platform's (coarse) CTR
                // estimate, never above the bid.
                let payprice = (bar / charge_ctr).clamp(0.0, bid);
                let features = [
                    user.to_string(),
                    ad.to_string(),
                    context.to_string(),
                    scenario.to_string(),
                ];
                builder
                    .push_row(click as u8, bid, payprice, &group, &features)
                    .map_err(AieError::invalid)?;
            }
        }
        let dataset = builder.finish(SplitTag::Train);
        if dataset.is_empty() {
            return Err(AieError::NoExposures {
                auctions: cfg.n_auctions,
            });
        }
        Ok(dataset)
    }

    /// Uniform draws over the (user, ad, context, scenario) grid with no
    /// auction gate; payprice is 0 because no auction was run.
    pub fn generate_unbiased_log(&self, n: usize, seed: u64) -> Result<Dataset> {
        let cfg = &self.config;
        let mut builder = DatasetBuilder::new(self.schema())?;
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let user = rng.random_range(0..cfg.n_users);
            let ad = rng.random_range(0..cfg.n_ads);
            let context = rng.random_range(0..cfg.n_contexts);
            let scenario = rng.random_range(0..cfg.n_scenarios);
            let ctr = self.true_ctr(user, ad, context)?;
            let click = rng.random::<f64>() < ctr;
            let group = [
                (i % 7).to_string(),
                (i % 24).to_string(),
                i.to_string(),
            ];
            let features = [
                user.to_string(),
                ad.to_string(),
                context.to_string(),
                scenario.to_string(),
            ];
            builder
                .push_row(click as u8, self.ad_bid[ad], 0.0, &group, &features)
                .map_err(AieError::invalid)?;
        }
        Ok(builder.finish(SplitTag::UnbiasedTest))
    }

    /// Recovers the world-grid indices of a generated sample by decoding its
    /// feature tokens.
    pub fn sample_indices(&self, dataset: &Dataset, sample: &Sample) -> (usize, usize, usize) {
        let tok = |field: usize| -> usize {
            dataset
                .encoders
                .token(field, sample.x[field])
                .parse()
                .expect("synth tokens are indices")
        };
        (tok(FIELD_USER), tok(FIELD_AD), tok(FIELD_CONTEXT))
    }

    /// Ground-truth CTR of a generated sample.
    pub fn sample_true_ctr(&self, dataset: &Dataset, sample: &Sample) -> f64 {
        let (u, a, c) = self.sample_indices(dataset, sample);
        self.true_ctr(u, a, c).unwrap()
    }
}
