//! Auction-aware evaluation: AUC, CPM-sensitive AUC, simulated single-slot
//! auction revenue, revenue NDCG, predicted bias, relative improvement, and
//! the bid-tercile recommendation distribution.
//!
//! The CPM-sensitive AUC ships with two routes: an O(n^2) pair enumeration
//! and an O(n log n) sweep over a Fenwick tree. They are required to agree
//! and the test suite holds them to exact equality on integer-valued bids
//! (currency units in ad logs are integers, and integer arithmetic below
//! 2^53 is exact in f64).

use crate::error::{AieError, Result};
use serde::{Deserialize, Serialize};

/// One scored test impression. `group` identifies the simulated auction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub pctr: f64,
    pub y: u8,
    pub bid: f64,
    pub payprice: f64,
    pub group: u32,
}

impl ScoredSample {
    pub fn ecpm(&self) -> f64 {
        self.pctr * self.bid
    }

    /// Pair level: negatives are level 0, positives their bid.
    fn level(&self) -> f64 {
        if self.y == 1 {
            self.bid
        } else {
            0.0
        }
    }
}

/// Rank-statistic AUC with 0.5 credit for ties.
pub fn auc(scored: &[ScoredSample]) -> Result<f64> {
    let n_pos = scored.iter().filter(|s| s.y == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AieError::UndefinedMetric {
            metric: "auc",
            reason: format!("needs both classes (pos={n_pos}, neg={n_neg})"),
        });
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].pctr.partial_cmp(&scored[b].pctr).unwrap());
    let mut sum_pos_ranks = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scored[order[j]].pctr == scored[order[i]].pctr {
            j += 1;
        }
        // Average 1-based rank of the tie block [i, j); halves are exact.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if scored[k].y == 1 {
                sum_pos_ranks += avg_rank;
            }
        }
        i = j;
    }
    let num = sum_pos_ranks - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(num / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsAuc {
    pub value: f64,
    pub n_pairs: u64,
}

/// O(n^2) enumeration of the CPM-sensitive AUC. A pair is any (high, low)
/// with level_high > level_low; the high side earns its bid when its eCPM is
/// at least the low side's (ties win in full), otherwise the low side's
/// level is earned.
pub fn cs_auc_bruteforce(scored: &[ScoredSample]) -> Result<CsAuc> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    let mut pairs = 0u64;
    for h in scored {
        let lvl_h = h.level();
        let ecpm_h = h.ecpm();
        for l in scored {
            if lvl_h > l.level() {
                pairs += 1;
                den += h.bid;
                num += if ecpm_h >= l.ecpm() { h.bid } else { l.level() };
            }
        }
    }
    if pairs == 0 {
        return Err(AieError::UndefinedMetric {
            metric: "cs_auc",
            reason: "no (high, low) level pairs".to_string(),
        });
    }
    Ok(CsAuc {
        value: num / den,
        n_pairs: pairs,
    })
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Fenwick {
        Fenwick {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize) {
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    fn prefix(&self, mut i: usize) -> u64 {
        let mut acc = 0;
        while i > 0 {
            acc += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        acc
    }
}

/// Sort-based CPM-sensitive AUC. Two sweeps over level order with a Fenwick
/// tree on eCPM ranks split every pair into "high side wins" (counted
/// against inserted lower levels with eCPM <= its own) and "high side
/// loses" (counted from the low side against higher levels with strictly
/// larger eCPM).
pub fn cs_auc(scored: &[ScoredSample]) -> Result<CsAuc> {
    let n = scored.len();
    let levels: Vec<f64> = scored.iter().map(|s| s.level()).collect();
    let ecpms: Vec<f64> = scored.iter().map(|s| s.ecpm()).collect();

    let mut rank_values = ecpms.clone();
    rank_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rank_values.dedup();
    let rank = |e: f64| -> usize {
        rank_values.partition_point(|&v| v < e) + 1
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| levels[a].partial_cmp(&levels[b]).unwrap());

    let mut num = 0.0f64;
    let mut den = 0.0f64;
    let mut pairs = 0u64;

    // Pass A: ascending levels; every inserted sample has a strictly lower
    // level than the current block.
    let mut bit = Fenwick::new(rank_values.len());
    let mut inserted = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && levels[order[j]] == levels[order[i]] {
            j += 1;
        }
        for &h in &order[i..j] {
            let cnt_le = bit.prefix(rank(ecpms[h]));
            num += scored[h].bid * cnt_le as f64;
            den += scored[h].bid * inserted as f64;
            pairs += inserted;
        }
        for &h in &order[i..j] {
            bit.add(rank(ecpms[h]));
        }
        inserted += (j - i) as u64;
        i = j;
    }

    // Pass B: descending levels; count higher-level samples whose eCPM is
    // strictly below the low side's.
    let mut bit = Fenwick::new(rank_values.len());
    let mut i = n;
    while i > 0 {
        let mut j = i;
        while j > 0 && levels[order[j - 1]] == levels[order[i - 1]] {
            j -= 1;
        }
        for &l in &order[j..i] {
            let r = rank(ecpms[l]);
            if r > 1 && levels[l] > 0.0 {
                let cnt_lt = bit.prefix(r - 1);
                num += levels[l] * cnt_lt as f64;
            }
        }
        for &h in &order[j..i] {
            bit.add(rank(ecpms[h]));
        }
        i = j;
    }

    if pairs == 0 {
        return Err(AieError::UndefinedMetric {
            metric: "cs_auc",
            reason: "no (high, low) level pairs".to_string(),
        });
    }
    Ok(CsAuc {
        value: num / den,
        n_pairs: pairs,
    })
}

/// Outcome of the simulated single-slot auctions.
#[derive(Debug, Clone, PartialEq)]
pub struct RevOutcome {
    /// Revenue in raw currency units.
    pub total: f64,
    /// Revenue divided by 1000, the conventional reporting scale.
    pub scaled: f64,
    pub n_groups: usize,
    /// Winning sample index per group, ordered by group id.
    pub winners: Vec<usize>,
}

/// Per group the highest-eCPM impression wins (ties go to the lowest log
/// index) and earns its payprice if it was clicked.
pub fn rev(scored: &[ScoredSample]) -> Result<RevOutcome> {
    if scored.is_empty() {
        return Err(AieError::UndefinedMetric {
            metric: "rev",
            reason: "no samples".to_string(),
        });
    }
    let max_group = scored.iter().map(|s| s.group).max().unwrap() as usize;
    let mut best: Vec<Option<usize>> = vec![None; max_group + 1];
    for (i, s) in scored.iter().enumerate() {
        let slot = &mut best[s.group as usize];
        match slot {
            None => *slot = Some(i),
            Some(w) => {
                if s.ecpm() > scored[*w].ecpm() {
                    *slot = Some(i);
                }
            }
        }
    }
    let winners: Vec<usize> = best.into_iter().flatten().collect();
    let mut total = 0.0;
    for &w in &winners {
        if scored[w].y == 1 {
            total += scored[w].payprice;
        }
    }
    Ok(RevOutcome {
        total,
        scaled: total / 1000.0,
        n_groups: winners.len(),
        winners,
    })
}

/// Revenue divided by the maximum revenue attainable: per group the highest
/// payprice among clicked impressions. Groups without a click contribute to
/// neither side.
pub fn rev_ndcg(scored: &[ScoredSample]) -> Result<f64> {
    let outcome = rev(scored)?;
    let max_group = scored.iter().map(|s| s.group).max().unwrap() as usize;
    let mut best_clicked: Vec<f64> = vec![0.0; max_group + 1];
    for s in scored {
        if s.y == 1 && s.payprice > best_clicked[s.group as usize] {
            best_clicked[s.group as usize] = s.payprice;
        }
    }
    let rev_max: f64 = best_clicked.iter().sum();
    if rev_max == 0.0 {
        return Err(AieError::UndefinedMetric {
            metric: "rev_ndcg",
            reason: "no clicked impression with a positive payprice".to_string(),
        });
    }
    Ok(outcome.total / rev_max)
}

/// `(mean pCTR - empirical CTR) / empirical CTR * 100`.
pub fn predicted_bias(scored: &[ScoredSample]) -> Result<f64> {
    let n = scored.len();
    let clicks = scored.iter().filter(|s| s.y == 1).count();
    if clicks == 0 {
        return Err(AieError::UndefinedMetric {
            metric: "predicted_bias",
            reason: "no clicks".to_string(),
        });
    }
    let ctr = clicks as f64 / n as f64;
    let mean_p = scored.iter().map(|s| s.pctr).sum::<f64>() / n as f64;
    Ok((mean_p - ctr) / ctr * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaImprKind {
    /// Improvement over the 0.5 random-ranking floor.
    AucLike,
    /// Plain ratio improvement.
    RevenueLike,
}

/// Relative improvement of `measured` over `base`, in percent.
pub fn relaimpr(measured: f64, base: f64, kind: RelaImprKind) -> Result<f64> {
    match kind {
        RelaImprKind::AucLike => {
            if base <= 0.5 {
                return Err(AieError::UndefinedMetric {
                    metric: "relaimpr",
                    reason: format!("auc-like base must exceed 0.5 (got {base})"),
                });
            }
            Ok(((measured - 0.5) / (base - 0.5) - 1.0) * 100.0)
        }
        RelaImprKind::RevenueLike => {
            if base <= 0.0 {
                return Err(AieError::UndefinedMetric {
                    metric: "relaimpr",
                    reason: format!("revenue-like base must be positive (got {base})"),
                });
            }
            Ok((measured / base - 1.0) * 100.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TercileShares {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

/// Bins each auction winner by bid tercile. Thresholds are taken over the
/// distinct bid levels in the test set (bids are per-ad quantities, so the
/// levels stand in for the advertisements being ranked). Degenerate
/// thresholds collapse everything into the high bin.
pub fn bid_tercile_distribution(scored: &[ScoredSample]) -> Result<TercileShares> {
    let outcome = rev(scored)?;
    let mut bids: Vec<f64> = scored.iter().map(|s| s.bid).collect();
    bids.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bids.dedup();
    let q = |f: f64| -> f64 {
        let idx = (f * (bids.len() - 1) as f64).round() as usize;
        bids[idx.min(bids.len() - 1)]
    };
    let t_lo = q(1.0 / 3.0);
    let t_hi = q(2.0 / 3.0);
    let mut counts = [0usize; 3];
    for &w in &outcome.winners {
        let bid = scored[w].bid;
        let bin = if bid >= t_hi {
            2
        } else if bid >= t_lo {
            1
        } else {
            0
        };
        counts[bin] += 1;
    }
    let n = outcome.winners.len() as f64;
    Ok(TercileShares {
        low: counts[0] as f64 / n,
        medium: counts[1] as f64 / n,
        high: counts[2] as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsToggles {
    pub auc: bool,
    pub cs_auc: bool,
    pub rev: bool,
    pub rev_ndcg: bool,
    pub predicted_bias: bool,
    pub tercile: bool,
}

impl Default for MetricsToggles {
    fn default() -> Self {
        MetricsToggles {
            auc: true,
            cs_auc: true,
            rev: true,
            rev_ndcg: true,
            predicted_bias: true,
            tercile: true,
        }
    }
}

/// Everything one evaluation produces. Metrics that are toggled off or
/// undefined on the input are `null` in the JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub cs_auc: Option<f64>,
    /// Raw currency units.
    pub rev: Option<f64>,
    /// Divided by 1000 for presentation.
    pub rev_scaled: Option<f64>,
    pub rev_ndcg: Option<f64>,
    pub predicted_bias: Option<f64>,
    pub n_groups: usize,
    pub n_pairs: u64,
    pub tercile: Option<TercileShares>,
}

pub fn compute_report(scored: &[ScoredSample], toggles: &MetricsToggles) -> MetricsReport {
    let mut report = MetricsReport::default();
    if toggles.auc {
        report.auc = auc(scored).ok();
    }
    if toggles.cs_auc {
        if let Ok(cs) = cs_auc(scored) {
            report.cs_auc = Some(cs.value);
            report.n_pairs = cs.n_pairs;
        }
    }
    if toggles.rev {
        if let Ok(out) = rev(scored) {
            report.rev = Some(out.total);
            report.rev_scaled = Some(out.scaled);
            report.n_groups = out.n_groups;
        }
    }
    if toggles.rev_ndcg {
        report.rev_ndcg = rev_ndcg(scored).ok();
    }
    if toggles.predicted_bias {
        report.predicted_bias = predicted_bias(scored).ok();
    }
    if toggles.tercile {
        report.tercile = bid_tercile_distribution(scored).ok();
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(pctr: f64, y: u8, bid: f64, payprice: f64, group: u32) -> ScoredSample {
        ScoredSample {
            pctr,
            y,
            bid,
            payprice,
            group,
        }
    }

    #[test]
    fn auc_perfect_and_tied() {
        let perfect = vec![s(0.9, 1, 1.0, 0.0, 0), s(0.8, 1, 1.0, 0.0, 0), s(0.1, 0, 1.0, 0.0, 0)];
        assert_eq!(auc(&perfect).unwrap(), 1.0);
        let tied = vec![s(0.5, 1, 1.0, 0.0, 0), s(0.5, 0, 1.0, 0.0, 0), s(0.5, 1, 1.0, 0.0, 0)];
        assert_eq!(auc(&tied).unwrap(), 0.5);
        let single = vec![s(0.5, 1, 1.0, 0.0, 0)];
        assert!(auc(&single).is_err());
    }

    /// Brute-force pair counting with half credit for ties.
    fn auc_oracle(scored: &[ScoredSample]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for p in scored.iter().filter(|x| x.y == 1) {
            for n in scored.iter().filter(|x| x.y == 0) {
                pairs += 1.0;
                if p.pctr > n.pctr {
                    wins += 1.0;
                } else if p.pctr == n.pctr {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let n = rng.random_range(10..200);
            let scored: Vec<ScoredSample> = (0..n)
                .map(|_| {
                    s(
                        // Coarse grid of scores provokes plenty of ties.
                        (rng.random_range(0..20) as f64) / 20.0 + 0.01,
                        rng.random_range(0..2) as u8,
                        1.0,
                        0.0,
                        0,
                    )
                })
                .collect();
            if scored.iter().all(|x| x.y == 1) || scored.iter().all(|x| x.y == 0) {
                continue;
            }
            let fast = auc(&scored).unwrap();
            let slow = auc_oracle(&scored);
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn cs_auc_hand_enumeration() {
        // Pairs (high level > low level); the perfect ranker earns every bid.
        let scored = vec![
            s(0.9, 1, 2.0, 0.0, 0),
            s(0.8, 1, 1.0, 0.0, 0),
            s(0.1, 0, 5.0, 0.0, 0),
            s(0.7, 0, 1.0, 0.0, 0),
        ];
        let fast = cs_auc(&scored).unwrap();
        let brute = cs_auc_bruteforce(&scored).unwrap();
        assert_eq!(fast, brute);
        assert_eq!(fast.n_pairs, 5);
        assert_eq!(fast.value, 1.0);

        // Raising the low negative's pCTR makes the 1-bid positive lose its
        // pair against it: numerator 7 of 8.
        let scored = vec![
            s(0.9, 1, 2.0, 0.0, 0),
            s(0.8, 1, 1.0, 0.0, 0),
            s(0.1, 0, 5.0, 0.0, 0),
            s(0.9, 0, 1.0, 0.0, 0),
        ];
        let fast = cs_auc(&scored).unwrap();
        assert_eq!(fast, cs_auc_bruteforce(&scored).unwrap());
        assert!((fast.value - 7.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn cs_auc_with_equal_bids_reduces_to_pairwise_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scored: Vec<ScoredSample> = (0..60)
            .map(|_| {
                s(
                    rng.random_range(1..100) as f64 / 100.0,
                    rng.random_range(0..2) as u8,
                    7.0,
                    0.0,
                    0,
                )
            })
            .collect();
        let cs = cs_auc(&scored).unwrap();
        // With all bids equal, a (pos, neg) pair earns its bid iff
        // pctr_pos >= pctr_neg, so csAUC is that fraction.
        let mut ge = 0u64;
        let mut pairs = 0u64;
        for p in scored.iter().filter(|x| x.y == 1) {
            for n in scored.iter().filter(|x| x.y == 0) {
                pairs += 1;
                if p.pctr >= n.pctr {
                    ge += 1;
                }
            }
        }
        assert_eq!(cs.n_pairs, pairs);
        assert!((cs.value - ge as f64 / pairs as f64).abs() < 1e-15);
    }

    #[test]
    fn cs_auc_fast_equals_bruteforce_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..60 {
            let n = rng.random_range(2..200);
            let scored: Vec<ScoredSample> = (0..n)
                .map(|_| {
                    s(
                        rng.random_range(1..1000) as f64 / 1000.0,
                        rng.random_range(0..2) as u8,
                        rng.random_range(1..300) as f64,
                        0.0,
                        0,
                    )
                })
                .collect();
            match (cs_auc(&scored), cs_auc_bruteforce(&scored)) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a, b, "case {case}");
                }
                (Err(_), Err(_)) => {}
                (a, b) => panic!("case {case}: routes disagree ({a:?} vs {b:?})"),
            }
        }
    }

    #[test]
    fn cs_auc_without_pairs_is_undefined() {
        let scored = vec![s(0.2, 0, 5.0, 0.0, 0), s(0.4, 0, 3.0, 0.0, 0)];
        assert!(cs_auc(&scored).is_err());
        assert!(cs_auc_bruteforce(&scored).is_err());
    }

    #[test]
    fn rev_basics() {
        let scored = vec![
            s(0.9, 1, 10.0, 77.0, 0),
            s(0.2, 0, 10.0, 5.0, 0),
        ];
        let out = rev(&scored).unwrap();
        assert_eq!(out.total, 77.0);
        assert_eq!(out.scaled, 0.077);
        let scored = vec![
            s(0.9, 0, 10.0, 77.0, 0),
            s(0.2, 1, 10.0, 5.0, 0),
        ];
        assert_eq!(rev(&scored).unwrap().total, 0.0);
    }

    #[test]
    fn rev_ties_go_to_the_lowest_index() {
        let scored = vec![
            s(0.5, 1, 10.0, 30.0, 0),
            s(0.5, 1, 10.0, 60.0, 0),
        ];
        let out = rev(&scored).unwrap();
        assert_eq!(out.winners, vec![0]);
        assert_eq!(out.total, 30.0);
    }

    #[test]
    fn rev_matches_per_group_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut scored = Vec::new();
        for g in 0..100u32 {
            for _ in 0..rng.random_range(1..8) {
                scored.push(s(
                    rng.random::<f64>().max(1e-3),
                    rng.random_range(0..2) as u8,
                    rng.random_range(1..200) as f64,
                    rng.random_range(0..150) as f64,
                    g,
                ));
            }
        }
        let fast = rev(&scored).unwrap();
        // Oracle: independent max scan per group.
        let mut expect = 0.0;
        for g in 0..100u32 {
            let mut best: Option<usize> = None;
            for (i, x) in scored.iter().enumerate() {
                if x.group != g {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        if x.ecpm() > scored[b].ecpm() {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            let b = best.unwrap();
            if scored[b].y == 1 {
                expect += scored[b].payprice;
            }
        }
        assert_eq!(fast.total, expect);
    }

    #[test]
    fn rev_ndcg_bounds_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut scored = Vec::new();
        for g in 0..50u32 {
            for _ in 0..rng.random_range(1..6) {
                scored.push(s(
                    rng.random::<f64>().max(1e-3),
                    rng.random_range(0..2) as u8,
                    rng.random_range(1..100) as f64,
                    rng.random_range(0..80) as f64,
                    g,
                ));
            }
        }
        let value = rev_ndcg(&scored).unwrap();
        assert!(value >= 0.0 && value <= 1.0);
        let total = rev(&scored).unwrap().total;
        let mut rev_max = 0.0;
        for g in 0..50u32 {
            let best = scored
                .iter()
                .filter(|x| x.group == g && x.y == 1)
                .map(|x| x.payprice)
                .fold(0.0f64, f64::max);
            rev_max += best;
        }
        assert_eq!(value, total / rev_max);
    }

    #[test]
    fn rev_ndcg_reaches_one_for_the_ideal_picker_and_zero_for_the_worst() {
        // pctr ordered so the winner is always the highest-payprice click.
        let ideal = vec![
            s(0.9, 1, 10.0, 50.0, 0),
            s(0.1, 1, 10.0, 20.0, 0),
            s(0.9, 1, 10.0, 30.0, 1),
            s(0.1, 0, 10.0, 99.0, 1),
        ];
        assert_eq!(rev_ndcg(&ideal).unwrap(), 1.0);
        let worst = vec![
            s(0.1, 1, 10.0, 50.0, 0),
            s(0.9, 0, 10.0, 20.0, 0),
        ];
        assert_eq!(rev_ndcg(&worst).unwrap(), 0.0);
    }

    #[test]
    fn predicted_bias_examples() {
        let scored = vec![
            s(0.5, 1, 1.0, 0.0, 0),
            s(0.5, 0, 1.0, 0.0, 0),
        ];
        assert!(predicted_bias(&scored).unwrap().abs() < 1e-12);
        let doubled = vec![
            s(1.0, 1, 1.0, 0.0, 0),
            s(1.0, 0, 1.0, 0.0, 0),
        ];
        assert!((predicted_bias(&doubled).unwrap() - 100.0).abs() < 1e-12);
        let no_clicks = vec![s(0.5, 0, 1.0, 0.0, 0)];
        assert!(predicted_bias(&no_clicks).is_err());
    }

    #[test]
    fn relaimpr_matches_published_arithmetic() {
        assert_eq!(relaimpr(0.7, 0.7, RelaImprKind::AucLike).unwrap(), 0.0);
        let auc_impr = relaimpr(0.7792, 0.7755, RelaImprKind::AucLike).unwrap();
        assert!((auc_impr - 1.34).abs() < 0.005, "{auc_impr}");
        let rev_impr = relaimpr(28.428, 26.489, RelaImprKind::RevenueLike).unwrap();
        assert!((rev_impr - 7.32).abs() < 0.005, "{rev_impr}");
        assert!(relaimpr(0.6, 0.5, RelaImprKind::AucLike).is_err());
        assert!(relaimpr(1.0, 0.0, RelaImprKind::RevenueLike).is_err());
    }

    #[test]
    fn tercile_shares_sum_to_one_and_degenerate_bids_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut scored = Vec::new();
        for g in 0..40u32 {
            for _ in 0..4 {
                scored.push(s(
                    rng.random::<f64>().max(1e-3),
                    rng.random_range(0..2) as u8,
                    rng.random_range(1..50) as f64,
                    1.0,
                    g,
                ));
            }
        }
        let t = bid_tercile_distribution(&scored).unwrap();
        assert!((t.low + t.medium + t.high - 1.0).abs() < 1e-12);

        let flat: Vec<ScoredSample> = (0..9)
            .map(|i| s(0.1 + 0.05 * i as f64, 1, 3.0, 1.0, i / 3))
            .collect();
        let t = bid_tercile_distribution(&flat).unwrap();
        assert_eq!((t.low, t.medium, t.high), (0.0, 0.0, 1.0));
    }

    #[test]
    fn scaling_pctr_by_a_power_of_two_changes_nothing() {
        // 0.5 is exact in binary floating point, so every eCPM comparison is
        // preserved bit-for-bit.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let scored: Vec<ScoredSample> = (0..300)
            .map(|i| {
                s(
                    rng.random::<f64>().max(1e-3),
                    rng.random_range(0..2) as u8,
                    rng.random_range(1..100) as f64,
                    rng.random_range(0..90) as f64,
                    i / 3,
                )
            })
            .collect();
        let scaled: Vec<ScoredSample> = scored
            .iter()
            .map(|x| ScoredSample {
                pctr: x.pctr * 0.5,
                ..x.clone()
            })
            .collect();
        assert_eq!(rev(&scored).unwrap().winners, rev(&scaled).unwrap().winners);
        match (cs_auc(&scored), cs_auc(&scaled)) {
            (Ok(a), Ok(b)) => assert_eq!(a.value, b.value),
            _ => panic!("cs_auc should be defined here"),
        }
        let ta = bid_tercile_distribution(&scored).unwrap();
        let tb = bid_tercile_distribution(&scaled).unwrap();
        assert_eq!(ta, tb);
    }
}
