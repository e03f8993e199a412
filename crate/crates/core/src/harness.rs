//! Experiment driver: configuration, churn, slots and CSV output.
//!
//! A slot is one training phase (reputation-updating lookups, churn active)
//! followed by one probing phase (measurement only). Querying nodes are drawn
//! from random permutations of the live honest nodes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::halonet::{FailureReason, HaloError, HaloNetwork, HaloParams};
use crate::idspace::{IdSpace, NodeId};
use crate::kadnet::{KadError, KadNetwork, KadParams};
use crate::reputation::{splitmix64, ScoreParams};
use crate::sharedrep::{exchange_epoch, Aggregation, SharedScores};
use crate::Mode;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("churn window must be positive and c below 1")]
    ChurnDomain,
    #[error(transparent)]
    Halo(#[from] HaloError),
    #[error(transparent)]
    Kad(#[from] KadError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dht {
    Halo,
    Kad,
}

impl FromStr for Dht {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "halo" | "chord" => Ok(Dht::Halo),
            "kad" | "kademlia" => Ok(Dht::Kad),
            other => Err(format!("unknown dht `{other}`")),
        }
    }
}

/// Boosting mode plus the shared-score variant of collaborative Halo.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Regular,
    ABoost,
    Collaborative,
    Shared,
}

impl RunMode {
    pub fn base(self) -> Mode {
        match self {
            RunMode::Regular => Mode::Regular,
            RunMode::ABoost => Mode::ABoost,
            RunMode::Collaborative | RunMode::Shared => Mode::Collaborative,
        }
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("shared") {
            return Ok(RunMode::Shared);
        }
        Ok(match s.parse::<Mode>()? {
            Mode::Regular => RunMode::Regular,
            Mode::ABoost => RunMode::ABoost,
            Mode::Collaborative => RunMode::Collaborative,
        })
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Regular => "regular",
            RunMode::ABoost => "aboost",
            RunMode::Collaborative => "collaborative",
            RunMode::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dht: Dht,
    pub mode: RunMode,
    pub nodes: usize,
    pub colluding: f64,
    pub attack_rate: f64,
    /// Fraction of nodes replaced per `churn_window` lookups per node.
    pub churn: f64,
    pub churn_window: f64,
    pub training: usize,
    pub probing: usize,
    pub slots: usize,
    pub redundancy: u32,
    pub k_bucket: usize,
    pub successors: usize,
    pub k: usize,
    pub alpha: usize,
    pub beta: usize,
    pub replicas: usize,
    pub tolerance_bits: u32,
    pub bits: u32,
    /// Kad training lookups per node before the first slot.
    pub warmup: usize,
    /// Honest nodes injected at the midpoint slot and measured separately.
    pub fresh_nodes: usize,
    pub fresh_probes: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub instantiations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dht: Dht::Halo,
            mode: RunMode::Regular,
            nodes: 1000,
            colluding: 0.2,
            attack_rate: 1.0,
            churn: 0.0,
            churn_window: 800.0,
            training: 5000,
            probing: 1000,
            slots: 10,
            redundancy: 10,
            k_bucket: 2,
            successors: 8,
            k: 10,
            alpha: 7,
            beta: 3,
            replicas: 10,
            tolerance_bits: 8,
            bits: 32,
            warmup: 0,
            fresh_nodes: 0,
            fresh_probes: 4,
            aggregation: Aggregation::DropOff,
            seed: 1,
            instantiations: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "dht" => self.dht = v.parse().map_err(HarnessError::Config)?,
            "mode" => self.mode = v.parse().map_err(HarnessError::Config)?,
            "aggregation" => self.aggregation = v.parse().map_err(HarnessError::Config)?,
            "nodes" | "n" => self.nodes = parse(&key, v)?,
            "colluding" | "c" => self.colluding = parse(&key, v)?,
            "attack_rate" | "a" => self.attack_rate = parse(&key, v)?,
            "churn" => self.churn = parse(&key, v)?,
            "churn_window" => self.churn_window = parse(&key, v)?,
            "training" => self.training = parse(&key, v)?,
            "probing" => self.probing = parse(&key, v)?,
            "slots" => self.slots = parse(&key, v)?,
            "redundancy" => self.redundancy = parse(&key, v)?,
            "kbucket" | "k_bucket" => self.k_bucket = parse(&key, v)?,
            "successors" => self.successors = parse(&key, v)?,
            "k" => self.k = parse(&key, v)?,
            "alpha" => self.alpha = parse(&key, v)?,
            "beta" => self.beta = parse(&key, v)?,
            "replicas" => self.replicas = parse(&key, v)?,
            "tolerance_bits" => self.tolerance_bits = parse(&key, v)?,
            "bits" => self.bits = parse(&key, v)?,
            "warmup" => self.warmup = parse(&key, v)?,
            "fresh_nodes" => self.fresh_nodes = parse(&key, v)?,
            "fresh_probes" => self.fresh_probes = parse(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "instantiations" => self.instantiations = parse(&key, v)?,
            other => return Err(HarnessError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), HarnessError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        for (name, r) in [("colluding", self.colluding), ("attack_rate", self.attack_rate), ("churn", self.churn)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.colluding >= 1.0 {
            return bad("colluding must be below 1");
        }
        if self.nodes < 2 {
            return bad("need at least 2 nodes");
        }
        if self.slots == 0 || self.instantiations == 0 {
            return bad("slots and instantiations must be positive");
        }
        if self.churn > 0.0 && self.churn_window <= 0.0 {
            return bad("churn_window must be positive");
        }
        if self.mode == RunMode::Shared && self.dht != Dht::Halo {
            return bad("shared mode is only available for halo");
        }
        if self.redundancy == 0 || self.redundancy > self.bits {
            return bad("redundancy must be in 1..=bits");
        }
        if self.k == 0 || self.alpha == 0 || self.beta == 0 || self.replicas == 0 || self.k_bucket == 0 {
            return bad("k, alpha, beta, replicas and kbucket must be positive");
        }
        IdSpace::new(self.bits).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn churn_probability(&self) -> Result<f64, HarnessError> {
        if self.churn == 0.0 {
            return Ok(0.0);
        }
        churn_probability(self.churn, self.churn_window, self.colluding)
    }
}

/// Per-training-lookup probability of one leave (and, independently, one
/// join) so that a fraction `r` of nodes is replaced every `l` lookups per
/// node when only the honest fraction `1 - c` issues lookups.
pub fn churn_probability(r: f64, l: f64, c: f64) -> Result<f64, HarnessError> {
    if l <= 0.0 || c >= 1.0 {
        return Err(HarnessError::ChurnDomain);
    }
    Ok(r / (l * (1.0 - c)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub slot: usize,
    /// Probing lookups in the slot.
    pub lookups: usize,
    pub failure_rate: f64,
    pub pollution_fraction: Option<f64>,
    pub mean_path_length: f64,
    /// Failed subsearches per reason, in [`FailureReason::ALL`] order.
    pub reasons: [u64; 5],
    pub live_nodes: usize,
    /// Failure rate of probes issued by injected fresh nodes.
    pub fresh_failure_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<SlotRecord>,
    pub departures: u64,
    pub arrivals: u64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl RunResult {
    /// Latter half of the slots.
    pub fn steady(&self) -> &[SlotRecord] {
        &self.records[self.records.len() / 2..]
    }

    pub fn steady_failure(&self) -> f64 {
        mean(self.steady().iter().map(|r| r.failure_rate)).unwrap_or(0.0)
    }

    pub fn steady_path_length(&self) -> f64 {
        mean(self.steady().iter().map(|r| r.mean_path_length)).unwrap_or(0.0)
    }

    pub fn steady_fresh_failure(&self) -> Option<f64> {
        mean(self.steady().iter().filter_map(|r| r.fresh_failure_rate))
    }
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        let m = mean(xs.iter().copied())?;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean: m,
            stderr,
            samples: n,
        })
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.stderr, self.samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub failure: Estimate,
    pub path_length: Estimate,
    pub pollution: Option<Estimate>,
    pub fresh_failure: Option<Estimate>,
}

struct Probe {
    failed: bool,
    hops: Option<f64>,
    reasons: [u64; 5],
}

enum Net {
    Halo(Box<HaloNetwork>),
    Kad(Box<KadNetwork>),
}

impl Net {
    fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        let space = IdSpace::new(cfg.bits).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(match cfg.dht {
            Dht::Halo => {
                let params = HaloParams {
                    k_bucket: cfg.k_bucket,
                    successors: cfg.successors,
                    redundancy: cfg.redundancy,
                    mode: cfg.mode.base(),
                    score: ScoreParams::default(),
                };
                let mut net = HaloNetwork::build(space, cfg.nodes, cfg.colluding, params, cfg.attack_rate, seed)?;
                if cfg.mode == RunMode::Shared {
                    net.set_shared(Some(SharedScores::new(cfg.aggregation)));
                }
                Net::Halo(Box::new(net))
            }
            Dht::Kad => {
                let params = KadParams {
                    k: cfg.k,
                    alpha: cfg.alpha,
                    beta: cfg.beta,
                    replicas: cfg.replicas,
                    tolerance_bits: cfg.tolerance_bits,
                    mode: cfg.mode.base(),
                    ..KadParams::default()
                };
                let mut net = KadNetwork::build(space, cfg.nodes, cfg.colluding, params, cfg.attack_rate, seed)?;
                net.warmup(cfg.warmup);
                Net::Kad(Box::new(net))
            }
        })
    }

    fn honest(&self) -> Vec<NodeId> {
        match self {
            Net::Halo(n) => n.honest_ids(),
            Net::Kad(n) => n.honest_ids().to_vec(),
        }
    }

    fn is_live_honest(&self, id: NodeId) -> bool {
        match self {
            Net::Halo(n) => n.node(id).is_some_and(|x| !x.malicious),
            Net::Kad(n) => n.node(id).is_some_and(|x| x.alive && !x.malicious),
        }
    }

    fn len(&self) -> usize {
        match self {
            Net::Halo(n) => n.len(),
            Net::Kad(n) => n.len(),
        }
    }

    fn random_key(&mut self) -> NodeId {
        match self {
            Net::Halo(n) => {
                let mask = n.space().mask();
                NodeId(n.rng_mut().gen::<u64>() & mask)
            }
            Net::Kad(n) => n.random_key(),
        }
    }

    fn lookup(&mut self, q: NodeId, train: bool) -> Result<Probe, HarnessError> {
        let key = self.random_key();
        Ok(match self {
            Net::Halo(n) => {
                let out = n.lookup(q, key, train)?;
                let mut reasons = [0u64; 5];
                for r in out.failure_reasons() {
                    reasons[r.index()] += 1;
                }
                Probe {
                    failed: out.failed(),
                    hops: out.mean_full_hops(),
                    reasons,
                }
            }
            Net::Kad(n) => {
                let out = n.lookup(q, key, train)?;
                Probe {
                    failed: !out.success,
                    hops: Some(out.steps as f64),
                    reasons: [0; 5],
                }
            }
        })
    }

    fn leave_random(&mut self) -> bool {
        match self {
            Net::Halo(n) => n.leave_random().is_some(),
            Net::Kad(n) => n.leave_random().is_some(),
        }
    }

    fn join(&mut self, malicious: bool) -> NodeId {
        match self {
            Net::Halo(n) => n.join(malicious),
            Net::Kad(n) => n.join(malicious),
        }
    }

    fn pollution(&self) -> Option<f64> {
        match self {
            Net::Halo(_) => None,
            Net::Kad(n) => Some(n.pollution_fraction()),
        }
    }

    fn fingerprint(&self) -> u64 {
        match self {
            Net::Halo(n) => n.reputation_fingerprint(),
            Net::Kad(n) => n.state_fingerprint(),
        }
    }

    fn end_of_training(&mut self, rng: &mut ChaCha8Rng) {
        if let Net::Halo(n) = self {
            if n.shared().is_some() {
                exchange_epoch(n, rng);
            }
        }
    }
}

/// Endless stream of honest querying nodes in random-permutation rounds.
struct Origins {
    queue: Vec<NodeId>,
}

impl Origins {
    fn next(&mut self, net: &Net, rng: &mut ChaCha8Rng) -> Option<NodeId> {
        for _ in 0..2 {
            while let Some(q) = self.queue.pop() {
                if net.is_live_honest(q) {
                    return Some(q);
                }
            }
            self.queue = net.honest();
            self.queue.shuffle(rng);
        }
        None
    }
}

struct Runner {
    net: Net,
    rng: ChaCha8Rng,
    origins: Origins,
    p_churn: f64,
    colluding: f64,
    departures: u64,
    arrivals: u64,
    fresh: Vec<NodeId>,
}

impl Runner {
    fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let net = Net::build(cfg, seed)?;
        Ok(Self {
            net,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED)),
            origins: Origins { queue: Vec::new() },
            p_churn: cfg.churn_probability()?,
            colluding: cfg.colluding,
            departures: 0,
            arrivals: 0,
            fresh: Vec::new(),
        })
    }

    fn train(&mut self, lookups: usize) -> Result<(), HarnessError> {
        for _ in 0..lookups {
            let Some(q) = self.origins.next(&self.net, &mut self.rng) else {
                break;
            };
            self.net.lookup(q, true)?;
            if self.p_churn > 0.0 {
                if self.rng.gen_bool(self.p_churn.min(1.0)) && self.net.leave_random() {
                    self.departures += 1;
                }
                if self.rng.gen_bool(self.p_churn.min(1.0)) {
                    let bad = self.rng.gen_bool(self.colluding);
                    self.net.join(bad);
                    self.arrivals += 1;
                }
            }
        }
        self.net.end_of_training(&mut self.rng);
        Ok(())
    }

    fn inject_fresh(&mut self, count: usize) {
        for _ in 0..count {
            let id = self.net.join(false);
            self.fresh.push(id);
        }
    }

    fn probe(&mut self, slot: usize, lookups: usize, fresh_probes: usize) -> Result<SlotRecord, HarnessError> {
        let before = self.net.fingerprint();
        let (mut failed, mut hops, mut done, mut routed) = (0usize, 0.0, 0usize, 0usize);
        let mut reasons = [0u64; 5];
        for _ in 0..lookups {
            let Some(q) = self.origins.next(&self.net, &mut self.rng) else {
                break;
            };
            let p = self.net.lookup(q, false)?;
            failed += usize::from(p.failed);
            if let Some(h) = p.hops {
                hops += h;
                routed += 1;
            }
            done += 1;
            for (acc, r) in reasons.iter_mut().zip(p.reasons) {
                *acc += r;
            }
        }
        let live_fresh: Vec<NodeId> = self.fresh.iter().copied().filter(|f| self.net.is_live_honest(*f)).collect();
        let fresh_failure_rate = if live_fresh.is_empty() {
            None
        } else {
            let mut bad = 0usize;
            for f in &live_fresh {
                for _ in 0..fresh_probes {
                    bad += usize::from(self.net.lookup(*f, false)?.failed);
                }
            }
            Some(bad as f64 / (live_fresh.len() * fresh_probes).max(1) as f64)
        };
        debug_assert_eq!(before, self.net.fingerprint(), "probing changed routing or reputation state");
        Ok(SlotRecord {
            slot,
            lookups: done,
            failure_rate: if done == 0 { 0.0 } else { failed as f64 / done as f64 },
            pollution_fraction: self.net.pollution(),
            mean_path_length: if routed == 0 { 0.0 } else { hops / routed as f64 },
            reasons,
            live_nodes: self.net.len(),
            fresh_failure_rate: if fresh_probes == 0 { None } else { fresh_failure_rate },
        })
    }
}

/// Alternates training and probing for `slots` slots. Fresh nodes, if
/// configured, join at the start of the midpoint slot.
pub fn run_continuous(cfg: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    run_seeded(cfg, cfg.seed)
}

fn run_seeded(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult, HarnessError> {
    let mut run = Runner::new(cfg, seed)?;
    let mut records = Vec::with_capacity(cfg.slots);
    for slot in 0..cfg.slots {
        if slot == cfg.slots / 2 && cfg.fresh_nodes > 0 {
            run.inject_fresh(cfg.fresh_nodes);
        }
        run.train(cfg.training)?;
        records.push(run.probe(slot, cfg.probing, cfg.fresh_probes)?);
    }
    Ok(RunResult {
        records,
        departures: run.departures,
        arrivals: run.arrivals,
    })
}

/// Seed of instantiation `i`.
pub fn instantiation_seed(seed: u64, i: usize) -> u64 {
    splitmix64(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Independent instantiations, each trained for `slots * training` lookups
/// and then probed once with `probing` lookups.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<BatchSummary, HarnessError> {
    let mut fail = Vec::new();
    let mut path = Vec::new();
    let mut poll = Vec::new();
    let mut fresh = Vec::new();
    for i in 0..cfg.instantiations {
        let mut run = Runner::new(cfg, instantiation_seed(cfg.seed, i))?;
        for slot in 0..cfg.slots {
            if slot == cfg.slots / 2 && cfg.fresh_nodes > 0 {
                run.inject_fresh(cfg.fresh_nodes);
            }
            run.train(cfg.training)?;
        }
        let rec = run.probe(cfg.slots, cfg.probing, cfg.fresh_probes)?;
        fail.push(rec.failure_rate);
        path.push(rec.mean_path_length);
        poll.extend(rec.pollution_fraction);
        fresh.extend(rec.fresh_failure_rate);
    }
    Ok(BatchSummary {
        failure: Estimate::from_samples(&fail).expect("at least one instantiation"),
        path_length: Estimate::from_samples(&path).expect("at least one instantiation"),
        pollution: Estimate::from_samples(&poll),
        fresh_failure: Estimate::from_samples(&fresh),
    })
}

/// Batch failure rate for each attack rate, with the rate fixed per run.
pub fn attack_effectiveness_sweep(cfg: &ExperimentConfig, rates: &[f64]) -> Result<Vec<(f64, Estimate)>, HarnessError> {
    rates
        .iter()
        .map(|a| {
            let c = ExperimentConfig {
                attack_rate: *a,
                ..cfg.clone()
            };
            Ok((*a, run_batch(&c)?.failure))
        })
        .collect()
}

pub const CSV_HEADER: [&str; 11] = [
    "slot",
    "lookups",
    "failure_rate",
    "pollution_fraction",
    "mean_path_length",
    "reason_bad_node",
    "reason_start_colluder",
    "reason_knuckle_colluder",
    "reason_nonexistent",
    "reason_wrong_successor",
    "live_nodes",
];

const REASON_COLUMNS: [FailureReason; 5] = [
    FailureReason::BadNodeInPath,
    FailureReason::StartNodeColluder,
    FailureReason::KnuckleColluder,
    FailureReason::KnuckleNonexistent,
    FailureReason::WrongSuccessor,
];

pub fn write_csv<W: std::io::Write>(records: &[SlotRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let mut row = vec![
            r.slot.to_string(),
            r.lookups.to_string(),
            r.failure_rate.to_string(),
            r.pollution_fraction.map(|p| p.to_string()).unwrap_or_default(),
            r.mean_path_length.to_string(),
        ];
        row.extend(REASON_COLUMNS.iter().map(|c| r.reasons[c.index()].to_string()));
        row.push(r.live_nodes.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[SlotRecord], path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path)?;
    write_csv(records, std::io::BufWriter::new(file))
}

/// Parses a file written by [`emit_csv`]. Fresh-node rates are not stored.
pub fn read_csv(path: &Path) -> Result<Vec<SlotRecord>, HarnessError> {
    let mut rd = csv::Reader::from_path(path)?;
    let bad = |f: &str| HarnessError::Config(format!("malformed csv field `{f}`"));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != CSV_HEADER.len() {
            return Err(HarnessError::Config(format!("expected {} columns, got {}", CSV_HEADER.len(), row.len())));
        }
        let num = |i: usize| -> Result<f64, HarnessError> { row[i].parse().map_err(|_| bad(&row[i])) };
        let int = |i: usize| -> Result<u64, HarnessError> { row[i].parse().map_err(|_| bad(&row[i])) };
        let mut reasons = [0u64; 5];
        for (j, c) in REASON_COLUMNS.iter().enumerate() {
            reasons[c.index()] = int(5 + j)?;
        }
        out.push(SlotRecord {
            slot: int(0)? as usize,
            lookups: int(1)? as usize,
            failure_rate: num(2)?,
            pollution_fraction: if row[3].is_empty() { None } else { Some(num(3)?) },
            mean_path_length: num(4)?,
            reasons,
            live_nodes: int(10)? as usize,
            fresh_failure_rate: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn churn_probability_examples() {
        assert!((churn_probability(0.25, 250.0, 0.2).unwrap() - 0.00125).abs() < 1e-15);
        assert_eq!(churn_probability(0.0, 250.0, 0.2).unwrap(), 0.0);
        assert!(churn_probability(0.25, 0.0, 0.2).is_err());
        assert!(churn_probability(0.25, 10.0, 1.0).is_err());
    }

    #[test]
    fn kv_parsing() {
        let cfg = ExperimentConfig::from_kv("dht = kad\nmode=collaborative # boosted\n\nnodes=500\nalpha=5\ntolerance-bits=6\n").unwrap();
        assert_eq!(cfg.dht, Dht::Kad);
        assert_eq!(cfg.mode, RunMode::Collaborative);
        assert_eq!((cfg.nodes, cfg.alpha, cfg.tolerance_bits), (500, 5, 6));
        assert!(ExperimentConfig::from_kv("nodes").is_err());
        assert!(ExperimentConfig::from_kv("bogus=1").is_err());
        assert!(ExperimentConfig::from_kv("colluding=1.5").is_err());
        assert!(ExperimentConfig::from_kv("dht=kad\nmode=shared").is_err());
    }

    fn small(dht: Dht, mode: RunMode) -> ExperimentConfig {
        ExperimentConfig {
            dht,
            mode,
            nodes: 200,
            training: 300,
            probing: 100,
            slots: 4,
            warmup: 2,
            instantiations: 2,
            ..Default::default()
        }
    }

    #[test]
    fn honest_network_never_fails() {
        for dht in [Dht::Halo, Dht::Kad] {
            let cfg = ExperimentConfig {
                colluding: 0.0,
                ..small(dht, RunMode::Collaborative)
            };
            let res = run_continuous(&cfg).unwrap();
            assert!(res.records.iter().all(|r| r.failure_rate == 0.0), "{dht:?}");
        }
    }

    #[test]
    fn steady_state_uses_latter_half() {
        let mut res = run_continuous(&small(Dht::Halo, RunMode::Regular)).unwrap();
        for (i, r) in res.records.iter_mut().enumerate() {
            r.failure_rate = i as f64;
        }
        assert_eq!(res.steady().len(), 2);
        assert_eq!(res.steady_failure(), 2.5);
    }

    #[test]
    fn realized_churn_is_binomial() {
        let cfg = ExperimentConfig {
            churn: 1.0,
            churn_window: 4.0,
            training: 400,
            probing: 10,
            slots: 5,
            ..small(Dht::Halo, RunMode::Regular)
        };
        let p = cfg.churn_probability().unwrap();
        let trials = (cfg.training * cfg.slots) as f64;
        let (mu, sd) = (trials * p, (trials * p * (1.0 - p)).sqrt());
        let res = run_continuous(&cfg).unwrap();
        for got in [res.departures as f64, res.arrivals as f64] {
            assert!((got - mu).abs() <= 3.0 * sd, "{got} vs {mu} ± {sd}");
        }
    }

    #[test]
    fn fresh_nodes_are_tracked() {
        let cfg = ExperimentConfig {
            fresh_nodes: 5,
            ..small(Dht::Halo, RunMode::Shared)
        };
        let res = run_continuous(&cfg).unwrap();
        assert!(res.records[0].fresh_failure_rate.is_none());
        assert!(res.records[3].fresh_failure_rate.is_some());
        assert!(res.steady_fresh_failure().is_some());
    }

    #[test]
    fn batch_reports_standard_error() {
        let s = run_batch(&small(Dht::Kad, RunMode::Regular)).unwrap();
        assert_eq!(s.failure.samples, 2);
        assert!(s.pollution.is_some());
        let e = Estimate::from_samples(&[1.0, 3.0]).unwrap();
        assert_eq!((e.mean, e.stderr), (2.0, 1.0));
    }

    #[test]
    fn csv_header_only_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        emit_csv(&[], &empty).unwrap();
        assert_eq!(std::fs::read_to_string(&empty).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
        let res = run_continuous(&small(Dht::Kad, RunMode::Collaborative)).unwrap();
        let path = dir.path().join("run.csv");
        emit_csv(&res.records, &path).unwrap();
        let back = read_csv(&path).unwrap();
        let mut want = res.records.clone();
        want.iter_mut().for_each(|r| r.fresh_failure_rate = None);
        assert_eq!(back, want);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.lines().all(|l| l.split(',').count() == 11));
    }

    #[test]
    fn identical_seed_identical_bytes() {
        let cfg = small(Dht::Halo, RunMode::Collaborative);
        let run = |c: &ExperimentConfig| {
            let mut buf = Vec::new();
            write_csv(&run_continuous(c).unwrap().records, &mut buf).unwrap();
            buf
        };
        assert_eq!(run(&cfg), run(&cfg));
        let other = ExperimentConfig { seed: 2, ..cfg.clone() };
        assert_ne!(run(&cfg), run(&other));
    }
}
