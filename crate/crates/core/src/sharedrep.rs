//! Shared reputation for the Chord overlay.
//!
//! Nodes holding the same finger ("joint knuckles") exchange their
//! first-hand scores for it once per epoch. The receiver aggregates the
//! reports by average, median or Drop-off: each report enters a scoring bin
//! with probability `1 - |report - own|`, and the bin's median is the shared
//! score.

use rand::Rng;
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::halonet::HaloNetwork;
use crate::idspace::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SharedRepError {
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Average,
    Median,
    DropOff,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "average" | "mean" => Ok(Aggregation::Average),
            "median" => Ok(Aggregation::Median),
            "dropoff" | "drop-off" => Ok(Aggregation::DropOff),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Drop-off admission weight of a report given the receiver's own score.
pub fn admission(own: f64, report: f64) -> f64 {
    1.0 - (report - own).abs()
}

/// Aggregates received reports. Reports are clamped to `[0, 1]`; with no
/// report (or an empty Drop-off bin) the own score is returned.
pub fn aggregate<R: Rng + ?Sized>(method: Aggregation, own: f64, received: &[f64], rng: &mut R) -> f64 {
    let clamped: Vec<f64> = received.iter().map(|r| r.clamp(0.0, 1.0)).collect();
    let value = match method {
        Aggregation::Average if !clamped.is_empty() => Some(clamped.iter().sum::<f64>() / clamped.len() as f64),
        Aggregation::Average => None,
        Aggregation::Median => median(&clamped),
        Aggregation::DropOff => {
            let bin: Vec<f64> = clamped
                .into_iter()
                .filter(|r| rng.gen::<f64>() < admission(own, *r))
                .collect();
            median(&bin)
        }
    };
    value.unwrap_or(own)
}

/// Closed-form Drop-off expectation for homogeneous honest and malicious
/// reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropOffExpectation {
    /// Honest reports outnumber malicious ones in the bin (at least one honest).
    pub p: f64,
    /// Equal, non-zero counts of both.
    pub q: f64,
    pub expected: f64,
    pub honest_in_bin: f64,
    pub malicious_in_bin: f64,
}

fn binom_pmf(n: u32, k: u32, p: f64) -> f64 {
    let mut c = 1.0f64;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

pub fn expected_dropoff(
    n_honest: u32,
    n_malicious: u32,
    r_honest: f64,
    r_malicious: f64,
    r_own: f64,
) -> Result<DropOffExpectation, SharedRepError> {
    for r in [r_honest, r_malicious, r_own] {
        if !(0.0..=1.0).contains(&r) {
            return Err(SharedRepError::ScoreOutOfRange(r));
        }
    }
    let wh = admission(r_own, r_honest);
    let wm = admission(r_own, r_malicious);
    let h: Vec<f64> = (0..=n_honest).map(|i| binom_pmf(n_honest, i, wh)).collect();
    let m: Vec<f64> = (0..=n_malicious).map(|j| binom_pmf(n_malicious, j, wm)).collect();
    let mut p = 0.0;
    for (i, hi) in h.iter().enumerate().skip(1) {
        let below: f64 = m.iter().take(i).sum();
        p += hi * below;
    }
    let q: f64 = (1..=n_honest.min(n_malicious) as usize).map(|i| h[i] * m[i]).sum();
    let expected = p * r_honest + q * (r_honest + r_malicious) / 2.0 + (1.0 - p - q) * r_malicious;
    Ok(DropOffExpectation {
        p,
        q,
        expected,
        honest_in_bin: n_honest as f64 * wh,
        malicious_in_bin: n_malicious as f64 * wm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportGoal {
    /// Raise a colluding finger's score.
    Promote,
    /// Lower an honest finger's score.
    Slander,
}

/// What a reporting colluder knows about the victim's bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportContext {
    pub n_honest: u32,
    pub n_malicious: u32,
    pub honest_score: f64,
}

const REPORT_GRID: usize = 100;

/// Score a colluder reports to pull the victim's aggregate toward its goal.
pub fn adversarial_report(method: Aggregation, goal: ReportGoal, own: f64, ctx: ReportContext) -> f64 {
    let extreme = match goal {
        ReportGoal::Promote => 1.0,
        ReportGoal::Slander => 0.0,
    };
    if method != Aggregation::DropOff || ctx.n_malicious == 0 {
        return extreme;
    }
    let honest = ctx.honest_score.clamp(0.0, 1.0);
    let own = own.clamp(0.0, 1.0);
    let mut best = (f64::NEG_INFINITY, extreme);
    for g in 0..=REPORT_GRID {
        let x = g as f64 / REPORT_GRID as f64;
        let e = expected_dropoff(ctx.n_honest, ctx.n_malicious, honest, x, own)
            .map(|d| d.expected)
            .unwrap_or(own);
        let gain = match goal {
            ReportGoal::Promote => e,
            ReportGoal::Slander => -e,
        };
        if gain > best.0 + 1e-12 {
            best = (gain, x);
        }
    }
    best.1
}

/// Joint knuckles of `k` for finger `f`: every other node whose finger
/// table contains `f`.
pub fn joint_knuckles(net: &HaloNetwork, k: NodeId, f: NodeId) -> Vec<NodeId> {
    net.knuckles(f).into_iter().filter(|j| *j != k && *j != f).collect()
}

/// Shared scores in force for the current epoch.
#[derive(Debug, Clone)]
pub struct SharedScores {
    method: Aggregation,
    table: FxHashMap<NodeId, FxHashMap<NodeId, f64>>,
    memo: FxHashMap<(u32, u32, u32, u32, ReportGoal), f64>,
    epoch: u64,
}

impl SharedScores {
    pub fn new(method: Aggregation) -> Self {
        Self {
            method,
            table: FxHashMap::default(),
            memo: FxHashMap::default(),
            epoch: 0,
        }
    }

    pub fn method(&self) -> Aggregation {
        self.method
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn get(&self, by: NodeId, finger: NodeId) -> Option<f64> {
        self.table.get(&by)?.get(&finger).copied()
    }

    pub(crate) fn forget(&mut self, id: NodeId) {
        self.table.remove(&id);
        for row in self.table.values_mut() {
            row.remove(&id);
        }
    }

    fn report(&mut self, goal: ReportGoal, own: f64, ctx: ReportContext) -> f64 {
        let q = |x: f64| (x * 20.0).round() as u32;
        let key = (ctx.n_honest, ctx.n_malicious, q(ctx.honest_score), q(own), goal);
        let method = self.method;
        *self
            .memo
            .entry(key)
            .or_insert_with(|| adversarial_report(method, goal, own, ctx))
    }
}

/// One exchange round: every honest node rebuilds the shared score of each
/// of its bucket members from the reports of the member's joint knuckles.
///
/// Honest knuckles report their current first-hand score if they have one;
/// colluders promote colluding fingers and slander honest ones.
pub fn exchange_epoch<R: Rng + ?Sized>(net: &mut HaloNetwork, rng: &mut R) {
    let Some(mut shared) = net.shared().cloned() else {
        return;
    };
    let bits = net.space().bits();
    let mut knuckle_cache: FxHashMap<NodeId, Vec<NodeId>> = FxHashMap::default();
    let mut table: FxHashMap<NodeId, FxHashMap<NodeId, f64>> = FxHashMap::default();
    for k in net.honest_ids() {
        let mut members: Vec<NodeId> = (0..bits).flat_map(|i| net.finger_bucket(k, i)).collect();
        members.sort_unstable();
        members.dedup();
        let own_store = net.store(k).expect("honest node has a store");
        let mut row = FxHashMap::default();
        for f in members {
            let knuckles = knuckle_cache.entry(f).or_insert_with(|| net.knuckles(f));
            let own = own_store.score(f);
            let mut honest_reports = Vec::new();
            let mut colluders = 0u32;
            for j in knuckles.iter().filter(|j| **j != k && **j != f) {
                let node = net.node(*j).expect("knuckle is live");
                if node.malicious {
                    colluders += 1;
                } else if node.store.knows(f) {
                    honest_reports.push(node.store.score(f));
                }
            }
            let mut reports = honest_reports.clone();
            if colluders > 0 {
                let goal = if net.is_malicious(f) {
                    ReportGoal::Promote
                } else {
                    ReportGoal::Slander
                };
                let ctx = ReportContext {
                    n_honest: honest_reports.len() as u32,
                    n_malicious: colluders,
                    honest_score: median(&honest_reports).unwrap_or(own),
                };
                let x = shared.report(goal, own, ctx);
                reports.extend(std::iter::repeat_n(x, colluders as usize));
            }
            if !reports.is_empty() {
                row.insert(f, aggregate(shared.method, own, &reports, rng));
            }
        }
        table.insert(k, row);
    }
    shared.table = table;
    shared.epoch += 1;
    net.set_shared(Some(shared));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halonet::HaloParams;
    use crate::idspace::IdSpace;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_reports() -> Vec<f64> {
        let mut v = vec![0.1; 5];
        v.extend(vec![1.0; 6]);
        v
    }

    #[test]
    fn average_and_median_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = example_reports();
        let avg = aggregate(Aggregation::Average, 0.3, &r, &mut rng);
        assert!((avg - 6.5 / 11.0).abs() < 1e-12);
        assert!((avg - 0.59).abs() < 0.005);
        assert_eq!(aggregate(Aggregation::Median, 0.3, &r, &mut rng), 1.0);
    }

    #[test]
    fn equal_reports_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in [Aggregation::Average, Aggregation::Median, Aggregation::DropOff] {
            assert!((aggregate(m, 0.4, &[0.4; 7], &mut rng) - 0.4).abs() < 1e-12);
            assert_eq!(aggregate(m, 0.4, &[], &mut rng), 0.4);
        }
    }

    #[test]
    fn closed_form_example() {
        let d = expected_dropoff(5, 6, 0.1, 1.0, 0.3).unwrap();
        // independent values from a direct binomial summation
        assert!((d.p - 0.8795329).abs() < 1e-6, "{}", d.p);
        assert!((d.q - 0.0841948).abs() < 1e-6, "{}", d.q);
        assert!((d.expected - 0.1705327).abs() < 1e-6, "{}", d.expected);
        assert!((d.honest_in_bin - 4.0).abs() < 1e-12);
        assert!((d.malicious_in_bin - 1.8).abs() < 1e-12);
    }

    #[test]
    fn closed_form_limits() {
        let d = expected_dropoff(4, 0, 0.5, 1.0, 0.5).unwrap();
        assert!((d.p - 1.0).abs() < 1e-12);
        assert!((d.expected - 0.5).abs() < 1e-12);
        let d = expected_dropoff(3, 0, 0.2, 0.9, 0.0).unwrap();
        assert!((d.p - (1.0 - 0.2f64.powi(3))).abs() < 1e-12);
        assert!(expected_dropoff(1, 1, 1.2, 0.0, 0.0).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r = example_reports();
        let trials = 100_000;
        let samples: Vec<f64> = (0..trials)
            .map(|_| aggregate(Aggregation::DropOff, 0.3, &r, &mut rng))
            .collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        let e = expected_dropoff(5, 6, 0.1, 1.0, 0.3).unwrap().expected;
        assert!((mean - e).abs() < 3.0 * se, "mean={mean} e={e} se={se}");
    }

    #[test]
    fn own_score_excluded_from_bin() {
        // own 0.5, three 0.8 and one 0.2
        let e = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let r = [0.8, 0.8, 0.8, 0.2];
            (0..200_000)
                .map(|_| aggregate(Aggregation::DropOff, 0.5, &r, &mut rng))
                .sum::<f64>()
                / 200_000.0
        };
        assert!((e - 0.7465).abs() < 0.005, "{e}");
    }

    #[test]
    fn adversarial_reports() {
        let ctx = ReportContext {
            n_honest: 5,
            n_malicious: 6,
            honest_score: 0.1,
        };
        assert_eq!(adversarial_report(Aggregation::Median, ReportGoal::Promote, 0.3, ctx), 1.0);
        assert_eq!(adversarial_report(Aggregation::Average, ReportGoal::Slander, 0.3, ctx), 0.0);
        let x = adversarial_report(Aggregation::DropOff, ReportGoal::Promote, 0.3, ctx);
        assert!(x > 0.3 && x < 1.0, "{x}");
        let e_opt = expected_dropoff(5, 6, 0.1, x, 0.3).unwrap().expected;
        for g in 0..=100 {
            let y = g as f64 / 100.0;
            assert!(expected_dropoff(5, 6, 0.1, y, 0.3).unwrap().expected <= e_opt + 1e-12);
        }
        let mirrored = ReportContext {
            honest_score: 0.9,
            ..ctx
        };
        let s = adversarial_report(Aggregation::DropOff, ReportGoal::Slander, 0.7, mirrored);
        assert!((s - (1.0 - x)).abs() < 1e-9, "{s} vs {x}");
    }

    #[test]
    fn joint_knuckles_exclude_self() {
        let net = HaloNetwork::build(IdSpace::default(), 400, 0.0, HaloParams::default(), 1.0, 2).unwrap();
        let k = net.honest_ids()[17];
        let f = net.finger(k, 31);
        let jk = joint_knuckles(&net, k, f);
        assert!(!jk.contains(&k) && !jk.contains(&f));
        for j in &jk {
            assert!(net.fingers(*j).contains(&f));
        }
        // exhaustive scan over every node's finger table
        let all: Vec<NodeId> = net
            .ids()
            .filter(|j| *j != k && *j != f && net.fingers(*j).contains(&f))
            .collect();
        assert_eq!(jk, all);
    }

    #[test]
    fn regular_ring_joint_knuckles() {
        let ids: Vec<(NodeId, bool)> = (0..16u64).map(|i| (NodeId(i * 16), false)).collect();
        let net = HaloNetwork::from_members(IdSpace::new(8).unwrap(), &ids, HaloParams { successors: 2, redundancy: 4, ..Default::default() }, 1.0, 1).unwrap();
        let f = NodeId(128);
        let k = net.knuckles(f)[0];
        assert_eq!(joint_knuckles(&net, k, f).len(), 3);
    }

    #[test]
    fn exchange_fills_table() {
        let params = HaloParams {
            mode: crate::Mode::Collaborative,
            ..Default::default()
        };
        let mut net = HaloNetwork::build(IdSpace::default(), 200, 0.2, params, 1.0, 4).unwrap();
        let honest = net.honest_ids();
        for (i, o) in honest.iter().enumerate() {
            net.lookup(*o, NodeId(i as u64 * 21_474_836), true).unwrap();
        }
        net.set_shared(Some(SharedScores::new(Aggregation::DropOff)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        exchange_epoch(&mut net, &mut rng);
        let sh = net.shared().unwrap();
        assert_eq!(sh.epoch(), 1);
        let filled = honest.iter().filter(|k| sh.table.get(k).is_some_and(|r| !r.is_empty())).count();
        assert!(filled > honest.len() / 2);
        for row in sh.table.values() {
            assert!(row.values().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn expectation_bounds(nh in 0u32..15, nm in 0u32..15, rh in 0.0f64..=1.0, rm in 0.0f64..=1.0, rk in 0.0f64..=1.0) {
            let d = expected_dropoff(nh, nm, rh, rm, rk).unwrap();
            prop_assert!(d.p >= -1e-12 && d.q >= -1e-12);
            prop_assert!(d.p + d.q <= 1.0 + 1e-9);
            let lo = rh.min(rm) - 1e-9;
            let hi = rh.max(rm) + 1e-9;
            prop_assert!(d.expected >= lo && d.expected <= hi);
        }

        #[test]
        fn aggregate_stays_in_range(own in 0.0f64..=1.0, r in proptest::collection::vec(-0.5f64..1.5, 0..20), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for m in [Aggregation::Average, Aggregation::Median, Aggregation::DropOff] {
                let v = aggregate(m, own, &r, &mut rng);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
