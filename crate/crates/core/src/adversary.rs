//! Attacker behavior: the coordinated per-lookup attack coin, oscillation
//! strategies against score-based selection, and use-based victim choice.

use thiserror::Error;

use crate::halonet::HaloNetwork;
use crate::idspace::NodeId;
use crate::reputation::splitmix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("attack rate must be in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("thresholds must satisfy 0 <= tau1 < tau2 <= 1, got ({0}, {1})")]
    InvalidThresholds(f64, f64),
    #[error("threshold must be in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("victim count {m} out of range 1..={max}")]
    VictimCount { m: u32, max: u32 },
}

/// Globally coordinated attack decision: every colluder sees the same coin
/// for a given lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackPolicy {
    rate: f64,
    seed: u64,
}

impl AttackPolicy {
    pub fn new(rate: f64, seed: u64) -> Result<Self, AdversaryError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(AdversaryError::InvalidRate(rate));
        }
        Ok(Self { rate, seed })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Whether lookup number `lookup_id` is attacked.
    pub fn should_attack(&self, lookup_id: u64) -> bool {
        if self.rate >= 1.0 {
            return true;
        }
        if self.rate <= 0.0 {
            return false;
        }
        let h = splitmix64(self.seed ^ splitmix64(lookup_id));
        // 53 high bits as a uniform double in [0, 1)
        ((h >> 11) as f64) * (1.0 / (1u64 << 53) as f64) < self.rate
    }
}

/// How an oscillating attacker maps its selection probability to an attack
/// probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Static(f64),
    OneThreshold(f64),
    TwoThreshold { low: f64, high: f64 },
    Probabilistic { slope: f64, offset: f64 },
}

impl Strategy {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        match *self {
            Strategy::Static(a) if !(0.0..=1.0).contains(&a) => Err(AdversaryError::InvalidRate(a)),
            Strategy::OneThreshold(t) if !(0.0..=1.0).contains(&t) => {
                Err(AdversaryError::InvalidThreshold(t))
            }
            Strategy::TwoThreshold { low, high } if !(0.0 <= low && low < high && high <= 1.0) => {
                Err(AdversaryError::InvalidThresholds(low, high))
            }
            _ => Ok(()),
        }
    }
}

/// One attacker's strategy plus its hysteresis state.
#[derive(Debug, Clone)]
pub struct Oscillator {
    strategy: Strategy,
    attacking: bool,
}

impl Oscillator {
    pub fn new(strategy: Strategy) -> Result<Self, AdversaryError> {
        strategy.validate()?;
        Ok(Self {
            strategy,
            attacking: true,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Attack probability given the current selection probability.
    pub fn decide(&mut self, pr_a: f64) -> f64 {
        match self.strategy {
            Strategy::Static(a) => a,
            Strategy::OneThreshold(t) => {
                if pr_a >= t {
                    1.0
                } else {
                    0.0
                }
            }
            Strategy::TwoThreshold { low, high } => {
                if pr_a <= low {
                    self.attacking = false;
                } else if pr_a >= high {
                    self.attacking = true;
                }
                if self.attacking {
                    1.0
                } else {
                    0.0
                }
            }
            Strategy::Probabilistic { slope, offset } => (slope * (pr_a - 0.5) + offset).clamp(0.0, 1.0),
        }
    }
}

/// Stateless form of [`Oscillator::decide`] for the memoryless strategies.
pub fn oscillation_decision(strategy: Strategy, pr_a: f64) -> Result<f64, AdversaryError> {
    Ok(Oscillator::new(strategy)?.decide(pr_a))
}

/// Use-based attack parameters: fail victims with rate `fail`, serve
/// everyone else with success rate `serve`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UseBasedPolicy {
    pub victims: u32,
    pub fail: f64,
    pub serve: f64,
}

/// Finger offsets whose knuckles are the `m` most distant from the attacker.
pub fn use_based_offsets(bits: u32, m: u32) -> Result<Vec<u32>, AdversaryError> {
    if m == 0 || m > bits {
        return Err(AdversaryError::VictimCount { m, max: bits });
    }
    Ok((1..=m).map(|i| bits - i).collect())
}

/// The knuckles the attacker treats as victims; offsets without a knuckle
/// contribute nothing.
pub fn use_based_targets(net: &HaloNetwork, attacker: NodeId, m: u32) -> Result<Vec<NodeId>, AdversaryError> {
    let offsets = use_based_offsets(net.space().bits(), m)?;
    let mut out: Vec<NodeId> = offsets
        .into_iter()
        .filter_map(|i| net.knuckle_at(attacker, i))
        .collect();
    out.dedup();
    Ok(out)
}

/// Expected attacked lookups among `lookups` routed through the attacker when
/// it attacks its `m` most distant knuckles.
pub fn expected_use_based_attacked(lookups: f64, m: u32) -> f64 {
    lookups * (1.0 - 0.5f64.powi(m as i32))
}
