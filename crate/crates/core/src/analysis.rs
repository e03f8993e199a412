//! Numerical attack models.
//!
//! The oscillation model pits one attacker against one honest node in a
//! bucket. The attacker's score follows an EWMA of its behavior and it is
//! picked with probability `s^beta / (s^beta + s_h^beta)`. The expected
//! recursion applies the EWMA step in proportion to the selection
//! probability, since the score only moves when the attacker is used.
//!
//! The use-based model measures how often Drop-off hands a victim knuckle the
//! attacker's good public score despite the victim's own bad experience.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adversary::{AdversaryError, Oscillator, Strategy};
use crate::idspace::{IdError, IdSpace, NodeId};
use crate::reputation::{ewma_update, selection_prob};
use crate::sharedrep::{aggregate, Aggregation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("lookup count must be positive")]
    NoLookups,
    #[error("{name} must be in [0, 1], got {value}")]
    OutOfUnitInterval { name: &'static str, value: f64 },
    #[error("need at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Id(#[from] IdError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillationModel {
    /// EWMA weight of the newest result.
    pub alpha: f64,
    /// Selection bias exponent.
    pub beta: f64,
    pub honest_score: f64,
    pub initial_score: f64,
    pub lookups: usize,
}

impl Default for OscillationModel {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 1.0,
            honest_score: 0.9,
            initial_score: 0.9,
            lookups: 10_000,
        }
    }
}

impl OscillationModel {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        if self.lookups == 0 {
            return Err(AnalysisError::NoLookups);
        }
        for (name, value) in [
            ("alpha", self.alpha),
            ("honest score", self.honest_score),
            ("initial score", self.initial_score),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(AnalysisError::OutOfUnitInterval { name, value });
            }
        }
        Ok(())
    }

    /// Probability that the attacker is picked over the honest node.
    pub fn pick_probability(&self, s: f64) -> f64 {
        selection_prob(&[s, self.honest_score], self.beta).map_or(0.0, |p| p[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillationStep {
    pub score: f64,
    pub pick: f64,
    pub attack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscillationRun {
    pub expected_attacks: f64,
    pub trajectory: Vec<OscillationStep>,
}

impl OscillationRun {
    pub fn attacked_fraction(&self) -> f64 {
        self.expected_attacks / self.trajectory.len() as f64
    }

    /// Mean score and pick probability over the latter half of the run.
    pub fn settled(&self) -> (f64, f64) {
        let tail = &self.trajectory[self.trajectory.len() / 2..];
        let n = tail.len() as f64;
        (
            tail.iter().map(|s| s.score).sum::<f64>() / n,
            tail.iter().map(|s| s.pick).sum::<f64>() / n,
        )
    }
}

/// Expected-value recursion: `E += Pr[A] p`,
/// `s <- s + Pr[A] alpha ((1 - p) - s)`.
pub fn simulate_oscillation(model: &OscillationModel, strategy: Strategy) -> Result<OscillationRun, AnalysisError> {
    model.validate()?;
    let mut attacker = Oscillator::new(strategy)?;
    let mut s = model.initial_score;
    let mut expected = 0.0;
    let mut trajectory = Vec::with_capacity(model.lookups);
    for _ in 0..model.lookups {
        let pick = model.pick_probability(s);
        let attack = attacker.decide(pick);
        expected += pick * attack;
        trajectory.push(OscillationStep { score: s, pick, attack });
        s += pick * (ewma_update(s, 1.0 - attack, model.alpha) - s);
    }
    Ok(OscillationRun {
        expected_attacks: expected,
        trajectory,
    })
}

/// Sampled counterpart of [`simulate_oscillation`]: returns the number of
/// attacks actually carried out.
pub fn sample_oscillation<R: Rng + ?Sized>(
    model: &OscillationModel,
    strategy: Strategy,
    rng: &mut R,
) -> Result<u64, AnalysisError> {
    model.validate()?;
    let mut attacker = Oscillator::new(strategy)?;
    let mut s = model.initial_score;
    let mut attacks = 0;
    for _ in 0..model.lookups {
        let pick = model.pick_probability(s);
        let p = attacker.decide(pick);
        if rng.gen::<f64>() < pick {
            let attacked = rng.gen::<f64>() < p;
            attacks += u64::from(attacked);
            s = ewma_update(s, if attacked { 0.0 } else { 1.0 }, model.alpha);
        }
    }
    Ok(attacks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub strategy: Strategy,
    pub attacked_fraction: f64,
}

pub fn sweep(model: &OscillationModel, grid: &[Strategy]) -> Result<Vec<SweepPoint>, AnalysisError> {
    grid.iter()
        .map(|s| {
            simulate_oscillation(model, *s).map(|r| SweepPoint {
                strategy: *s,
                attacked_fraction: r.attacked_fraction(),
            })
        })
        .collect()
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

pub fn one_threshold_grid(step: f64) -> Vec<Strategy> {
    steps(step, 1.0 - step, step).into_iter().map(Strategy::OneThreshold).collect()
}

pub fn two_threshold_grid(step: f64) -> Vec<Strategy> {
    let ts = steps(0.0, 1.0, step);
    let mut out = Vec::new();
    for (i, low) in ts.iter().enumerate() {
        for high in &ts[i + 1..] {
            out.push(Strategy::TwoThreshold {
                low: *low,
                high: *high,
            });
        }
    }
    out
}

pub fn probabilistic_grid(slopes: &[f64], offsets: &[f64]) -> Vec<Strategy> {
    slopes
        .iter()
        .flat_map(|slope| {
            offsets.iter().map(move |offset| Strategy::Probabilistic {
                slope: *slope,
                offset: *offset,
            })
        })
        .collect()
}

/// Default probabilistic grid: slopes in [-5, 5] by 0.5, offsets in [0, 1] by 0.05.
pub fn default_probabilistic_grid() -> Vec<Strategy> {
    probabilistic_grid(&steps(-5.0, 5.0, 0.5), &steps(0.0, 1.0, 0.05))
}

pub fn best_point(points: &[SweepPoint]) -> Option<SweepPoint> {
    points
        .iter()
        .copied()
        .max_by(|a, b| a.attacked_fraction.total_cmp(&b.attacked_fraction))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UseBasedConfig {
    pub nodes: usize,
    pub lookups: usize,
    pub victims: u32,
    /// Success rate granted to non-victims.
    pub serve: f64,
    /// Failure rate imposed on victims.
    pub fail: f64,
    pub method: Aggregation,
    pub bits: u32,
    pub seed: u64,
}

impl Default for UseBasedConfig {
    fn default() -> Self {
        Self {
            nodes: 10_000,
            lookups: 10_000,
            victims: 1,
            serve: 0.8,
            fail: 0.8,
            method: Aggregation::DropOff,
            bits: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UseBasedResult {
    /// Percentage of trials in which the victim ends up with the
    /// non-victims' score.
    pub percent: f64,
    /// Trials in which the attacker had at least one victim.
    pub trials: usize,
    pub mean_knuckles: f64,
}

/// One canonical knuckle per offset (the first node of the interval), each
/// node tagged with the highest offset it serves; ordered by descending
/// offset.
fn canonical_knuckles(space: &IdSpace, ids: &[NodeId], a: usize) -> Vec<(u32, NodeId)> {
    let n = ids.len();
    let aid = ids[a];
    let pred = ids[(a + n - 1) % n];
    let mut best: BTreeMap<NodeId, u32> = BTreeMap::new();
    for i in 0..space.bits() {
        let lo = space.sub(pred, space.pow2(i));
        let hi = space.sub(aid, space.pow2(i));
        let j = ids.partition_point(|x| *x <= lo) % n;
        let w = ids[j];
        if w != aid && lo != hi && space.in_half_open(w, lo, hi) {
            let e = best.entry(w).or_insert(i);
            *e = (*e).max(i);
        }
    }
    let mut out: Vec<(u32, NodeId)> = best.into_iter().map(|(w, i)| (i, w)).collect();
    out.sort_by(|x, y| y.cmp(x));
    out
}

/// Monte-Carlo over attacker placements. Each trial picks the attacker as
/// the owner of a random key, then one victim knuckle aggregates the other
/// knuckles' reports: fellow victims report `1 - fail`, everyone else
/// `serve`. The victim's own score is `1 - fail`.
pub fn use_based_sim(cfg: &UseBasedConfig) -> Result<UseBasedResult, AnalysisError> {
    let space = IdSpace::new(cfg.bits)?;
    if cfg.nodes < 2 {
        return Err(AnalysisError::TooFewNodes(cfg.nodes));
    }
    if cfg.lookups == 0 {
        return Err(AnalysisError::NoLookups);
    }
    for (name, value) in [("serve", cfg.serve), ("fail", cfg.fail)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(AnalysisError::OutOfUnitInterval { name, value });
        }
    }
    crate::adversary::use_based_offsets(cfg.bits, cfg.victims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = rustc_hash::FxHashSet::default();
    while set.len() < cfg.nodes {
        set.insert(NodeId(rng.gen::<u64>() & space.mask()));
    }
    let mut ids: Vec<NodeId> = set.into_iter().collect();
    ids.sort_unstable();
    let low_offset = cfg.bits - cfg.victims;
    let victim_score = 1.0 - cfg.fail;
    let (mut ok, mut trials, mut knuckles_seen) = (0usize, 0usize, 0usize);
    for _ in 0..cfg.lookups {
        let key = NodeId(rng.gen::<u64>() & space.mask());
        let a = ids.partition_point(|x| *x < key) % ids.len();
        let kn = canonical_knuckles(&space, &ids, a);
        let victims = kn.iter().filter(|(i, _)| *i >= low_offset).count();
        if victims == 0 {
            continue;
        }
        trials += 1;
        knuckles_seen += kn.len();
        let mut reports = vec![victim_score; victims - 1];
        reports.extend(std::iter::repeat_n(cfg.serve, kn.len() - victims));
        let value = aggregate(cfg.method, victim_score, &reports, &mut rng);
        ok += usize::from((value - cfg.serve).abs() < 0.01);
    }
    Ok(UseBasedResult {
        percent: if trials == 0 { 0.0 } else { 100.0 * ok as f64 / trials as f64 },
        trials,
        mean_knuckles: knuckles_seen as f64 / trials.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::expected_use_based_attacked;

    #[test]
    fn fast_heavy_single_attack() {
        let m = OscillationModel::new(0.5, 100.0);
        for s in one_threshold_grid(0.05) {
            let e = simulate_oscillation(&m, s).unwrap().expected_attacks;
            assert!(e <= 1.001, "{s:?}: {e}");
        }
    }

    #[test]
    fn slow_light_settles() {
        let m = OscillationModel::new(0.01, 1.0);
        let run = simulate_oscillation(&m, Strategy::OneThreshold(0.32)).unwrap();
        let (s, pick) = run.settled();
        assert!((s - 0.42).abs() < 0.05, "{s}");
        assert!((pick - 0.32).abs() < 0.05, "{pick}");
    }

    #[test]
    fn slow_light_interior_peak() {
        let m = OscillationModel::new(0.01, 1.0);
        let pts = sweep(&m, &one_threshold_grid(0.05)).unwrap();
        let best = best_point(&pts).unwrap();
        let first = pts.first().unwrap().attacked_fraction;
        let last = pts.last().unwrap().attacked_fraction;
        assert!(best.attacked_fraction > first && best.attacked_fraction > last);
    }

    #[test]
    fn never_attacking_is_zero() {
        let m = OscillationModel::new(0.01, 100.0);
        let run = simulate_oscillation(&m, Strategy::Probabilistic { slope: 0.0, offset: 0.0 }).unwrap();
        assert_eq!(run.expected_attacks, 0.0);
    }

    #[test]
    fn static_attacks_nondecreasing_in_length() {
        let mut prev = 0.0;
        for l in [1usize, 10, 100, 1000] {
            let m = OscillationModel {
                lookups: l,
                ..OscillationModel::new(0.1, 5.0)
            };
            let e = simulate_oscillation(&m, Strategy::Static(0.3)).unwrap().expected_attacks;
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn heavy_bias_concentrates_on_argmax() {
        let m = OscillationModel {
            beta: 100.0,
            ..OscillationModel::default()
        };
        assert!(m.pick_probability(0.95) > 1.0 - 1e-2);
        assert!(m.pick_probability(0.5) < 1e-20);
    }

    #[test]
    fn sampled_mode_tracks_expectation() {
        let m = OscillationModel::new(0.05, 1.0);
        let expected = simulate_oscillation(&m, Strategy::Static(0.5)).unwrap().expected_attacks;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let runs = 40;
        let mean = (0..runs)
            .map(|_| sample_oscillation(&m, Strategy::Static(0.5), &mut rng).unwrap() as f64)
            .sum::<f64>()
            / runs as f64;
        assert!((mean - expected).abs() / expected < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn canonical_knuckles_on_regular_ring() {
        let space = IdSpace::new(8).unwrap();
        let ids: Vec<NodeId> = (0..16u64).map(|i| NodeId(i * 16)).collect();
        let kn = canonical_knuckles(&space, &ids, 8);
        let offsets: Vec<u32> = kn.iter().map(|(i, _)| *i).collect();
        assert_eq!(offsets, vec![7, 6, 5, 4]);
        assert_eq!(kn[0].1, NodeId(0));
    }

    #[test]
    fn median_with_six_of_thirteen_victims() {
        // 12 reports: five fellow victims at 0.2 and seven others at 0.8
        let mut reports = vec![0.2; 5];
        reports.extend(vec![0.8; 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(aggregate(Aggregation::Median, 0.2, &reports, &mut rng), 0.8);
        assert!((expected_use_based_attacked(100.0, 6) - 98.4375).abs() < 1e-9);
    }

    #[test]
    fn use_based_small_run() {
        let cfg = UseBasedConfig {
            nodes: 1000,
            lookups: 2000,
            ..Default::default()
        };
        let r1 = use_based_sim(&cfg).unwrap();
        let r5 = use_based_sim(&UseBasedConfig { victims: 5, ..cfg }).unwrap();
        assert!(r1.percent > r5.percent);
        assert!(r1.trials > 0 && r5.trials > 0);
        assert!(use_based_sim(&UseBasedConfig { victims: 0, ..cfg }).is_err());
    }
}
