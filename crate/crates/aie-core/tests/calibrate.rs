//! Temporary calibration harness (deleted before release).

use aie_core::am2::Am2Config;
use aie_core::bcm::BcmConfig;
use aie_core::metrics::{self, MetricsToggles, ScoredSample};
use aie_core::model::{BackboneConfig, BackboneKind};
use aie_core::runner::{
    prepare_data, score_dataset, train_seed, DataConfig, ModelSection, OptimizerConfig, RunConfig,
};
use aie_core::synth::{World, WorldConfig, FIELD_AD};
use std::time::Instant;

fn world(n_auctions: usize) -> WorldConfig {
    WorldConfig {
        n_ads: 80,
        n_users: 2000,
        n_contexts: 50,
        n_scenarios: 6,
        true_model_seed: 7_240_101,
        bid_mu: 4.0,
        bid_sigma: 0.25,
        high_bid_fraction: 0.2,
        bid_inflation_factor: 10.0,
        competitor_mu: 2.4,
        competitor_sigma: 2.0,
        scenario_spread: 0.6,
        price_ctr_correlation: 0.9,
        n_auctions,
        n_candidates: 8,
    }
}

fn config(n_auctions: usize, am2: bool, w: f64, bcm: bool, a: f64, b: f64, epochs: usize) -> RunConfig {
    RunConfig {
        version: 1,
        data: DataConfig::Synth {
            world: world(n_auctions),
            n_unbiased: 50_000,
            split: vec![0.75, 0.125, 0.125],
        },
        model: ModelSection {
            backbone: BackboneConfig {
                kind: BackboneKind::Dnn,
                hidden_layers: vec![64, 32],
                n_cross_layers: 0,
                embed_dim: 8,
            },
            head_hidden: vec![16],
        },
        am2: Am2Config {
            enabled: am2,
            w,
            tower_widths: vec![16],
            scen_dim: 8,
        },
        bcm: BcmConfig {
            enabled: bcm,
            a,
            b,
            quantiles: (0.01, 0.99),
            per_scene: true,
        },
        optimizer: OptimizerConfig {
            lr: 1e-3,
            l2: 1e-6,
            batch_size: 2000,
            epochs,
        },
        seeds: vec![101],
        metrics: MetricsToggles::default(),
        sweep: None,
        run_root: None,
    }
}

struct Out {
    unbiased_auc: f64,
    test_auc: f64,
    rev: f64,
    exp_rev: f64,
    tercile_high: f64,
    seg_bias: f64,
    all_bias: f64,
}

fn run_one(cfg: &RunConfig, seed: u64) -> Out {
    let DataConfig::Synth { world: wc, .. } = &cfg.data else { unreachable!() };
    let w = World::new(wc).unwrap();
    let data = prepare_data(cfg, seed).unwrap();
    let trained = train_seed(cfg, &data, seed).unwrap();
    let test = data.test.as_ref().unwrap();
    let unb = data.unbiased.as_ref().unwrap();
    let test_scored = score_dataset(&trained.params, test).unwrap();
    let unb_scored = score_dataset(&trained.params, unb).unwrap();
    let seg: Vec<ScoredSample> = unb
        .samples
        .iter()
        .zip(&unb_scored)
        .filter_map(|(s, sc)| {
            let tok = unb.encoders.token(FIELD_AD, s.x[FIELD_AD]);
            tok.parse::<usize>()
                .ok()
                .filter(|&a| w.is_inflated(a))
                .map(|_| sc.clone())
        })
        .collect();
    // Expected revenue over the click distribution: winner payprice times the
    // winner's true CTR, summed over groups.
    let winners = metrics::rev(&test_scored).unwrap().winners;
    let exp_rev: f64 = winners
        .iter()
        .map(|&i| test_scored[i].payprice * w.sample_true_ctr(test, &test.samples[i]))
        .sum::<f64>()
        / 1000.0;
    Out {
        exp_rev,
        unbiased_auc: metrics::auc(&unb_scored).unwrap(),
        test_auc: metrics::auc(&test_scored).unwrap(),
        rev: metrics::rev(&test_scored).unwrap().scaled,
        tercile_high: metrics::bid_tercile_distribution(&test_scored).unwrap().high,
        seg_bias: metrics::predicted_bias(&seg).unwrap(),
        all_bias: metrics::predicted_bias(&unb_scored).unwrap(),
    }
}

#[test]
fn volume_probe() {
    for mu in [2.0f64, 2.4, 2.8, 3.2] {
        let n = 40000usize;
        let mut wc = world(n);
        wc.competitor_mu = mu;
        let w = World::new(&wc).unwrap();
        let t0 = Instant::now();
        let log = w.generate_biased_log(1).unwrap();
        let n_inflated = log
            .samples
            .iter()
            .filter(|s| {
                let tok = log.encoders.token(FIELD_AD, s.x[FIELD_AD]);
                w.is_inflated(tok.parse::<usize>().unwrap())
            })
            .count();
        println!(
            "mu={mu} auctions={n}: rows={} ({:.1}/auction), inflated_share={:.2}, ctr={:.4}, gen={:?}",
            log.len(),
            log.len() as f64 / n as f64,
            n_inflated as f64 / log.len() as f64,
            log.ctr(),
            t0.elapsed()
        );
    }
}

fn patched(n: usize, factor: f64, contexts: usize, am2: bool, w: f64, bcm: bool, a: f64, b: f64, epochs: usize) -> RunConfig {
    let mut cfg = config(n, am2, w, bcm, a, b, epochs);
    if let DataConfig::Synth { world, .. } = &mut cfg.data {
        world.bid_inflation_factor = factor;
        world.n_contexts = contexts;
        
    }
    cfg
}

#[test]
fn multi_seed_probe() {
    let (factor, contexts, n) = (2.0f64, 250usize, 72000usize);
    for seed in [101u64, 102, 103, 104, 105] {
        let base = run_one(&patched(n, factor, contexts, false, 0.0, false, 1.0, 1.0, 6), seed);
        let aie = run_one(&patched(n, factor, contexts, true, 0.2, true, 0.8, 1.2, 6), seed);
        println!(
            "seed {seed}: d_auc={:+.4} d_rev={:+.3} ({:+.2}%) d_exp_rev={:+.3} ({:+.2}%) d_high={:+.4} seg: {:+.1}% -> {:+.1}%",
            aie.unbiased_auc - base.unbiased_auc,
            aie.rev - base.rev,
            (aie.rev / base.rev - 1.0) * 100.0,
            aie.exp_rev - base.exp_rev,
            (aie.exp_rev / base.exp_rev - 1.0) * 100.0,
            aie.tercile_high - base.tercile_high,
            base.seg_bias,
            aie.seg_bias,
        );
    }
}

#[test]
fn single_seed_probe() {
    for (factor, contexts, n) in [(2.0f64, 250usize, 72000usize)] {
        let t0 = Instant::now();
        let base = run_one(&patched(n, factor, contexts, false, 0.0, false, 1.0, 1.0, 6), 101);
        println!("--- factor={factor} contexts={contexts} n={n} (baseline in {:?})", t0.elapsed());
        println!(
            "base             : unb_auc={:.4} test_auc={:.4} rev={:.3} high={:.3} seg_bias={:+.1}% all={:+.1}%",
            base.unbiased_auc, base.test_auc, base.rev, base.tercile_high, base.seg_bias, base.all_bias
        );
        for (name, am2, w, bcm, a, b) in [
            ("aie w=.1  .5/1.5", true, 0.1, true, 0.5, 1.5),
            ("aie w=.1  .5/2.0", true, 0.1, true, 0.5, 2.0),
            ("aie w=.1  .6/1.6", true, 0.1, true, 0.6, 1.6),
            ("aie w=.05 .5/1.5", true, 0.05, true, 0.5, 1.5),
            ("aie w=.2  .5/1.5", true, 0.2, true, 0.5, 1.5),
            ("aie w=.2  .5/2.0", true, 0.2, true, 0.5, 2.0),
        ] {
            let cfg = patched(n, factor, contexts, am2, w, bcm, a, b, 6);
            let data = prepare_data(&cfg, 101).unwrap();
            let trained = train_seed(&cfg, &data, 101).unwrap();
            for row in &trained.log {
                println!("  {name} epoch {}: ctr={:.4} price={:.4} valid_auc={:?}", row.epoch, row.stats.mean_ctr, row.stats.mean_price, row.valid_auc);
            }
            let aie = run_one(&cfg, 101);
            println!(
                "{name}: unb_auc={:.4} (d={:+.4}) rev={:.3} (d={:+.3}) high={:.3} seg_bias={:+.1}% all={:+.1}%",
                aie.unbiased_auc, aie.unbiased_auc - base.unbiased_auc,
                aie.rev, aie.rev - base.rev, aie.tercile_high, aie.seg_bias, aie.all_bias
            );
        }
    }
}
