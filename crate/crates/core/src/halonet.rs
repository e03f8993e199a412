//! Chord ring with Halo redundant knuckle searches.
//!
//! A lookup for target `t` runs one subsearch per offset `i` among the top
//! `redundancy` offsets. Each subsearch routes to `t - 2^i`, asks the node
//! found there (the knuckle candidate) for its `i`-th finger and, if that
//! finger still precedes `t`, asks the candidate's successor instead. The
//! origin keeps the clockwise-closest answer and confirms it by walking
//! predecessor pointers back toward `t`.
//!
//! In the reputation modes every finger is widened into a k-bucket holding
//! the canonical finger and its ring predecessors, and nodes keep `k' + 1`
//! successors so that the last hop can be short-circuited.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashSet;
use thiserror::Error;

use crate::adversary::{AdversaryError, AttackPolicy};
use crate::idspace::{clockwise_closest, IdSpace, NodeId};
use crate::reputation::{ReputationStore, ScoreParams};
use crate::sharedrep::SharedScores;
use crate::Mode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HaloError {
    #[error("need at least {need} nodes, got {got}")]
    TooFewNodes { need: usize, got: usize },
    #[error("colluding fraction must be in [0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("redundancy must be in 1..={max}, got {got}")]
    InvalidRedundancy { got: u32, max: u32 },
    #[error("k-bucket size must be at least 1")]
    InvalidBucket,
    #[error("node {0} is not in the ring")]
    UnknownNode(NodeId),
    #[error("origin {0} is malicious")]
    MaliciousOrigin(NodeId),
    #[error("duplicate identifier {0}")]
    DuplicateId(NodeId),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

/// Why a subsearch did not return the true owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailureReason {
    BadNodeInPath,
    StartNodeColluder,
    KnuckleColluder,
    KnuckleNonexistent,
    WrongSuccessor,
}

impl FailureReason {
    pub const ALL: [FailureReason; 5] = [
        FailureReason::BadNodeInPath,
        FailureReason::StartNodeColluder,
        FailureReason::KnuckleColluder,
        FailureReason::KnuckleNonexistent,
        FailureReason::WrongSuccessor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaloParams {
    pub k_bucket: usize,
    /// `k'`: extra successors kept for short-circuiting.
    pub successors: usize,
    pub redundancy: u32,
    pub mode: Mode,
    pub score: ScoreParams,
}

impl Default for HaloParams {
    fn default() -> Self {
        Self {
            k_bucket: 2,
            successors: 8,
            redundancy: 10,
            mode: Mode::Regular,
            score: ScoreParams::default(),
        }
    }
}

impl HaloParams {
    /// Successor-list length actually used by the current mode.
    pub fn successor_list(&self) -> usize {
        match self.mode {
            Mode::Collaborative => self.successors + 1,
            Mode::Regular | Mode::ABoost => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HaloNode {
    pub id: NodeId,
    pub malicious: bool,
    pub store: ReputationStore,
}

/// Result of one routing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    /// The current node is the closest node at or before the key.
    Found,
    /// The closest node at or before the key sits in the successor list.
    Final(NodeId),
    Forward(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subsearch {
    pub offset: u32,
    /// Nodes contacted by the origin, in order.
    pub path: Vec<NodeId>,
    pub returned: NodeId,
    /// Agreement with the consolidated answer.
    pub success: bool,
    /// Whether `returned` is the true owner.
    pub correct: bool,
    pub knuckle_exists: bool,
    /// Position in `path` of the colluder that hijacked the subsearch.
    pub subverted_at: Option<usize>,
    /// Position in `path` where the knuckle step starts.
    pub knuckle_at: usize,
}

impl Subsearch {
    pub fn hops(&self) -> usize {
        self.path.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HaloLookupOutcome {
    pub origin: NodeId,
    pub target: NodeId,
    pub owner: NodeId,
    pub answer: NodeId,
    pub attacked: bool,
    pub subsearches: Vec<Subsearch>,
}

impl HaloLookupOutcome {
    pub fn failed(&self) -> bool {
        self.answer != self.owner
    }

    pub fn mean_hops(&self) -> f64 {
        let total: usize = self.subsearches.iter().map(Subsearch::hops).sum();
        total as f64 / self.subsearches.len().max(1) as f64
    }

    /// Mean hops over subsearches that were not hijacked; hijacked paths are
    /// cut short and say nothing about routing cost.
    pub fn mean_full_hops(&self) -> Option<f64> {
        let full: Vec<usize> = self
            .subsearches
            .iter()
            .filter(|s| s.subverted_at.is_none())
            .map(Subsearch::hops)
            .collect();
        (!full.is_empty()).then(|| full.iter().sum::<usize>() as f64 / full.len() as f64)
    }

    /// Reasons of every subsearch that missed the true owner.
    pub fn failure_reasons(&self) -> Vec<FailureReason> {
        self.subsearches.iter().filter_map(classify_failure).collect()
    }
}

/// First matching reason for a subsearch that missed the true owner;
/// `None` when it returned the owner.
pub fn classify_failure(s: &Subsearch) -> Option<FailureReason> {
    if s.correct {
        return None;
    }
    Some(match s.subverted_at {
        Some(0) if s.knuckle_at > 0 => FailureReason::StartNodeColluder,
        Some(j) if j < s.knuckle_at => FailureReason::BadNodeInPath,
        Some(_) => FailureReason::KnuckleColluder,
        None if !s.knuckle_exists => FailureReason::KnuckleNonexistent,
        None => FailureReason::WrongSuccessor,
    })
}

#[derive(Debug, Clone)]
pub struct HaloNetwork {
    space: IdSpace,
    nodes: Vec<HaloNode>,
    colluders: Vec<NodeId>,
    params: HaloParams,
    attack: AttackPolicy,
    lookups: u64,
    rng: ChaCha8Rng,
    shared: Option<SharedScores>,
}

impl HaloNetwork {
    /// `n` nodes with uniform identifiers, `floor(c * n)` of them colluding.
    pub fn build(
        space: IdSpace,
        n: usize,
        c: f64,
        params: HaloParams,
        attack_rate: f64,
        seed: u64,
    ) -> Result<Self, HaloError> {
        if !(0.0..1.0).contains(&c) {
            return Err(HaloError::InvalidFraction(c));
        }
        let need = params.successors + 2;
        if n < need {
            return Err(HaloError::TooFewNodes { need, got: n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = FxHashSet::default();
        let mut ids = Vec::with_capacity(n);
        while ids.len() < n {
            let v = NodeId(rng.gen::<u64>() & space.mask());
            if seen.insert(v) {
                ids.push(v);
            }
        }
        let bad = (c * n as f64).floor() as usize;
        let malicious: Vec<bool> = {
            let mut flags = vec![false; n];
            flags[..bad].iter_mut().for_each(|f| *f = true);
            flags.shuffle(&mut rng);
            flags
        };
        let members: Vec<(NodeId, bool)> = ids.into_iter().zip(malicious).collect();
        Self::from_members(space, &members, params, attack_rate, rng.gen())
    }

    /// Builds a ring from explicit `(id, malicious)` members.
    pub fn from_members(
        space: IdSpace,
        members: &[(NodeId, bool)],
        params: HaloParams,
        attack_rate: f64,
        seed: u64,
    ) -> Result<Self, HaloError> {
        if params.k_bucket == 0 {
            return Err(HaloError::InvalidBucket);
        }
        if params.redundancy == 0 || params.redundancy > space.bits() {
            return Err(HaloError::InvalidRedundancy {
                got: params.redundancy,
                max: space.bits(),
            });
        }
        if members.len() < 2 {
            return Err(HaloError::TooFewNodes {
                need: 2,
                got: members.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes: Vec<HaloNode> = members
            .iter()
            .map(|(id, bad)| HaloNode {
                id: *id,
                malicious: *bad,
                store: ReputationStore::new(*id, params.score, rng.gen()),
            })
            .collect();
        nodes.sort_by_key(|n| n.id);
        for w in nodes.windows(2) {
            if w[0].id == w[1].id {
                return Err(HaloError::DuplicateId(w[0].id));
            }
        }
        let colluders = nodes.iter().filter(|n| n.malicious).map(|n| n.id).collect();
        Ok(Self {
            space,
            nodes,
            colluders,
            params,
            attack: AttackPolicy::new(attack_rate, rng.gen())?,
            lookups: 0,
            rng,
            shared: None,
        })
    }

    pub fn space(&self) -> &IdSpace {
        &self.space
    }

    pub fn params(&self) -> &HaloParams {
        &self.params
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.params.mode = mode;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[HaloNode] {
        &self.nodes
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn honest_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| !n.malicious).map(|n| n.id).collect()
    }

    pub fn colluders(&self) -> &[NodeId] {
        &self.colluders
    }

    pub fn attack_policy(&self) -> &AttackPolicy {
        &self.attack
    }

    pub fn set_shared(&mut self, shared: Option<SharedScores>) {
        self.shared = shared;
    }

    pub fn shared(&self) -> Option<&SharedScores> {
        self.shared.as_ref()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn node(&self, id: NodeId) -> Option<&HaloNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn is_malicious(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| n.malicious)
    }

    pub fn store(&self, id: NodeId) -> Option<&ReputationStore> {
        self.node(id).map(|n| &n.store)
    }

    fn owner_idx(&self, x: NodeId) -> usize {
        let i = self.nodes.partition_point(|n| n.id < x);
        if i == self.nodes.len() {
            0
        } else {
            i
        }
    }

    fn pred_or_eq_idx(&self, x: NodeId) -> usize {
        let i = self.nodes.partition_point(|n| n.id <= x);
        if i == 0 {
            self.nodes.len() - 1
        } else {
            i - 1
        }
    }

    fn succ_idx(&self, i: usize) -> usize {
        (i + 1) % self.nodes.len()
    }

    fn pred_idx(&self, i: usize) -> usize {
        (i + self.nodes.len() - 1) % self.nodes.len()
    }

    /// Clockwise-closest node to `x`.
    pub fn owner(&self, x: NodeId) -> NodeId {
        self.nodes[self.owner_idx(x)].id
    }

    /// Closest node at or counter-clockwise before `x`.
    pub fn pred_or_eq(&self, x: NodeId) -> NodeId {
        self.nodes[self.pred_or_eq_idx(x)].id
    }

    pub fn successor(&self, id: NodeId) -> Option<NodeId> {
        self.index_of(id).map(|i| self.nodes[self.succ_idx(i)].id)
    }

    pub fn predecessor(&self, id: NodeId) -> Option<NodeId> {
        self.index_of(id).map(|i| self.nodes[self.pred_idx(i)].id)
    }

    /// Finger `i` of node `v`: the owner of `v + 2^i`.
    pub fn finger(&self, v: NodeId, i: u32) -> NodeId {
        self.owner(self.space.add(v, self.space.pow2(i)))
    }

    /// All `bits` fingers of `v`, one per offset.
    pub fn fingers(&self, v: NodeId) -> Vec<NodeId> {
        (0..self.space.bits()).map(|i| self.finger(v, i)).collect()
    }

    /// The `count` nodes following `v` on the ring.
    pub fn successors(&self, v: NodeId, count: usize) -> Result<Vec<NodeId>, HaloError> {
        let mut i = self.index_of(v).ok_or(HaloError::UnknownNode(v))?;
        let count = count.min(self.nodes.len() - 1);
        Ok((0..count)
            .map(|_| {
                i = self.succ_idx(i);
                self.nodes[i].id
            })
            .collect())
    }

    /// Finger `i` of `v` plus up to `k - 1` of its ring predecessors, never
    /// reaching back to `v` itself.
    pub fn finger_bucket(&self, v: NodeId, i: u32) -> Vec<NodeId> {
        let f = self.owner_idx(self.space.add(v, self.space.pow2(i)));
        self.bucket_from(v, f)
    }

    fn bucket_from(&self, v: NodeId, f: usize) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.params.k_bucket);
        let mut j = f;
        while out.len() < self.params.k_bucket && self.nodes[j].id != v {
            out.push(self.nodes[j].id);
            j = self.pred_idx(j);
            if j == f {
                break;
            }
        }
        out
    }

    /// Nodes holding `owner(target)` in their finger tables.
    pub fn knuckles(&self, target: NodeId) -> Vec<NodeId> {
        let v = self.owner_idx(target);
        let mut out: Vec<NodeId> = (0..self.space.bits())
            .flat_map(|i| self.knuckles_in_interval(v, i))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Nodes whose finger `i` is the node at index `v`.
    fn knuckles_in_interval(&self, v: usize, i: u32) -> Vec<NodeId> {
        let vid = self.nodes[v].id;
        let pred = self.nodes[self.pred_idx(v)].id;
        let lo = self.space.sub(pred, self.space.pow2(i));
        let hi = self.space.sub(vid, self.space.pow2(i));
        let mut out = Vec::new();
        let mut j = self.pred_or_eq_idx(hi);
        for _ in 0..self.nodes.len() {
            let w = self.nodes[j].id;
            if w == vid || !self.space.in_half_open(w, lo, hi) || lo == hi {
                break;
            }
            out.push(w);
            j = self.pred_idx(j);
        }
        out
    }

    /// The knuckle of node `v` for offset `i`: the last node whose finger
    /// `i` is `v`, or `None` when no such node exists.
    pub fn knuckle_at(&self, v: NodeId, i: u32) -> Option<NodeId> {
        let idx = self.index_of(v)?;
        self.knuckles_in_interval(idx, i).first().copied()
    }

    fn knuckle_exists(&self, owner: usize, i: u32) -> bool {
        let vid = self.nodes[owner].id;
        let pred = self.nodes[self.pred_idx(owner)].id;
        let lo = self.space.sub(pred, self.space.pow2(i));
        let hi = self.space.sub(vid, self.space.pow2(i));
        let w = self.nodes[self.pred_or_eq_idx(hi)].id;
        w != vid && self.space.in_half_open(w, lo, hi)
    }

    /// Score node `by` assigns to `cand`, preferring shared scores when set.
    pub fn score_of(&self, by: NodeId, cand: NodeId) -> f64 {
        if let Some(s) = self.shared.as_ref().and_then(|sh| sh.get(by, cand)) {
            return s;
        }
        self.store(by).map_or(self.params.score.prior, |st| st.score(cand))
    }

    fn step(&self, cur: usize, key: NodeId, chooser: Option<usize>) -> (Hop, usize) {
        let n = self.nodes.len();
        let cid = self.nodes[cur].id;
        let d = self.space.ring_distance(cid, key);
        let s1 = self.nodes[self.succ_idx(cur)].id;
        if d < self.space.ring_distance(cid, s1) {
            return (Hop::Found, cur);
        }
        let p = self.pred_or_eq_idx(key);
        let steps = (p + n - cur) % n;
        if steps < self.params.successor_list() {
            return (Hop::Final(self.nodes[p].id), p);
        }
        let top = 63 - d.leading_zeros();
        let mut canonical = self.succ_idx(cur);
        for i in (0..=top).rev() {
            let f = self.owner_idx(self.space.add(cid, 1u64 << i));
            let fd = self.space.ring_distance(cid, self.nodes[f].id);
            if fd != 0 && fd <= d {
                canonical = f;
                break;
            }
        }
        let next = match chooser {
            Some(by) => {
                let bucket = self.bucket_from(cid, canonical);
                let by_node = &self.nodes[by];
                let pick = by_node
                    .store
                    .select_max_by(&bucket, |c| self.score_of(by_node.id, c))
                    .unwrap_or(self.nodes[canonical].id);
                self.index_of(pick).unwrap_or(canonical)
            }
            None => canonical,
        };
        (Hop::Forward(self.nodes[next].id), next)
    }

    /// Plain Chord routing step from `v` toward the closest node at or
    /// before `key`.
    pub fn chord_next_hop(&self, v: NodeId, key: NodeId) -> Result<Hop, HaloError> {
        let i = self.index_of(v).ok_or(HaloError::UnknownNode(v))?;
        Ok(self.step(i, key, None).0)
    }

    /// Reputation-guided step: `v` picks the best member of the bucket
    /// covering `key` by its own scores.
    pub fn reds_next_hop(&self, v: NodeId, key: NodeId) -> Result<Hop, HaloError> {
        let i = self.index_of(v).ok_or(HaloError::UnknownNode(v))?;
        Ok(self.step(i, key, Some(i)).0)
    }

    /// Runs one redundant lookup. Reputation is updated only when `train`.
    pub fn lookup(&mut self, origin: NodeId, target: NodeId, train: bool) -> Result<HaloLookupOutcome, HaloError> {
        let out = self.lookup_readonly(origin, target)?;
        self.lookups += 1;
        if train {
            self.learn(&out);
        }
        Ok(out)
    }

    /// Serial number the next lookup will use for the attack coin.
    pub fn lookup_count(&self) -> u64 {
        self.lookups
    }

    fn lookup_readonly(&self, origin: NodeId, target: NodeId) -> Result<HaloLookupOutcome, HaloError> {
        let o = self.index_of(origin).ok_or(HaloError::UnknownNode(origin))?;
        if self.nodes[o].malicious {
            return Err(HaloError::MaliciousOrigin(origin));
        }
        let attacked = self.attack.should_attack(self.lookups);
        let owner_idx = self.owner_idx(target);
        let owner = self.nodes[owner_idx].id;
        let bits = self.space.bits();
        let mut subsearches: Vec<Subsearch> = (0..self.params.redundancy)
            .map(|r| self.subsearch(o, target, bits - 1 - r, owner_idx, attacked))
            .collect();
        let first = clockwise_closest(&self.space, target, subsearches.iter().map(|s| s.returned))
            .expect("redundancy is at least one");
        let answer = self.confirm(first, target, attacked);
        for s in &mut subsearches {
            s.success = s.returned == answer;
        }
        Ok(HaloLookupOutcome {
            origin,
            target,
            owner,
            answer,
            attacked,
            subsearches,
        })
    }

    fn subverts(&self, idx: usize, attacked: bool) -> bool {
        attacked && self.nodes[idx].malicious
    }

    /// First colluder clockwise from `t`: the answer every colluder gives.
    fn colluder_answer(&self, t: NodeId) -> NodeId {
        let i = self.colluders.partition_point(|c| *c < t);
        self.colluders[if i == self.colluders.len() { 0 } else { i }]
    }

    fn subsearch(&self, origin: usize, t: NodeId, offset: u32, owner: usize, attacked: bool) -> Subsearch {
        let mode = self.params.mode;
        let key = self.space.sub(t, self.space.pow2(offset));
        let knuckle_exists = self.knuckle_exists(owner, offset);
        let mut path = Vec::new();
        let mut cur = origin;
        let hijack = |path: Vec<NodeId>, at: usize, knuckle_at: usize| Subsearch {
            offset,
            path,
            returned: self.colluder_answer(t),
            success: false,
            correct: false,
            knuckle_exists,
            subverted_at: Some(at),
            knuckle_at,
        };
        let knuckle = loop {
            let chooser = match mode {
                Mode::Regular => None,
                Mode::ABoost => (cur == origin).then_some(origin),
                Mode::Collaborative => (!self.nodes[cur].malicious).then_some(cur),
            };
            match self.step(cur, key, chooser) {
                (Hop::Found, _) => break cur,
                (Hop::Final(_), p) => {
                    path.push(self.nodes[p].id);
                    if self.subverts(p, attacked) {
                        let at = path.len() - 1;
                        return hijack(path, at, at);
                    }
                    break p;
                }
                (Hop::Forward(_), next) => {
                    path.push(self.nodes[next].id);
                    if self.subverts(next, attacked) {
                        let at = path.len() - 1;
                        return hijack(path, at, usize::MAX);
                    }
                    cur = next;
                }
            }
        };
        let knuckle_at = path.len().saturating_sub(1);
        let pid = self.nodes[knuckle].id;
        let mut returned = self.finger(pid, offset);
        if self.space.ring_distance(pid, returned) < self.space.ring_distance(pid, t) {
            let s = self.succ_idx(knuckle);
            path.push(self.nodes[s].id);
            if self.subverts(s, attacked) {
                let at = path.len() - 1;
                return hijack(path, at, knuckle_at.min(at));
            }
            returned = self.finger(self.nodes[s].id, offset);
        }
        Subsearch {
            offset,
            correct: returned == self.nodes[owner].id,
            path,
            returned,
            success: false,
            knuckle_exists,
            subverted_at: None,
            knuckle_at,
        }
    }

    /// Walks predecessor pointers from `candidate` while they still lie at or
    /// after `t`; a hijacking colluder claims ownership instead.
    fn confirm(&self, candidate: NodeId, t: NodeId, attacked: bool) -> NodeId {
        let mut a = match self.index_of(candidate) {
            Some(i) => i,
            None => return candidate,
        };
        for _ in 0..self.nodes.len() {
            if self.subverts(a, attacked) {
                break;
            }
            let p = self.pred_idx(a);
            let pid = self.nodes[p].id;
            let aid = self.nodes[a].id;
            if self.space.ring_distance(t, pid) < self.space.ring_distance(t, aid) {
                a = p;
            } else {
                break;
            }
        }
        self.nodes[a].id
    }

    fn learn(&mut self, out: &HaloLookupOutcome) {
        let mode = self.params.mode;
        if mode == Mode::Regular {
            return;
        }
        for s in &out.subsearches {
            if s.path.is_empty() || !s.knuckle_exists {
                continue;
            }
            if let Some(o) = self.index_of(out.origin) {
                let _ = self.nodes[o].store.record_path(&s.path, s.success);
            }
            if mode == Mode::Collaborative {
                // hops before the knuckle step learn about their own suffix
                let last = s.path.len() - 1;
                for j in 0..last {
                    if let Some(h) = self.index_of(s.path[j]) {
                        if !self.nodes[h].malicious {
                            let _ = self.nodes[h].store.record_path(&s.path[j + 1..], s.success);
                        }
                    }
                }
            }
        }
    }

    fn fresh_id(&mut self) -> NodeId {
        loop {
            let v = NodeId(self.rng.gen::<u64>() & self.space.mask());
            if self.index_of(v).is_none() {
                return v;
            }
        }
    }

    /// Adds a node with a fresh identifier.
    pub fn join(&mut self, malicious: bool) -> NodeId {
        let id = self.fresh_id();
        let store = ReputationStore::new(id, self.params.score, self.rng.gen());
        let at = self.nodes.partition_point(|n| n.id < id);
        self.nodes.insert(
            at,
            HaloNode {
                id,
                malicious,
                store,
            },
        );
        if malicious {
            let c = self.colluders.partition_point(|x| *x < id);
            self.colluders.insert(c, id);
        } else {
            for n in self.nodes.iter_mut().filter(|n| !n.malicious) {
                n.store.on_join(id);
            }
        }
        id
    }

    /// Adds a node, malicious with probability `c`.
    pub fn join_random(&mut self, c: f64) -> NodeId {
        let bad = self.rng.gen_bool(c.clamp(0.0, 1.0));
        self.join(bad)
    }

    /// Removes `id`; every store moves its entries into the leave cache.
    pub fn leave(&mut self, id: NodeId) -> Result<(), HaloError> {
        let i = self.index_of(id).ok_or(HaloError::UnknownNode(id))?;
        if self.nodes.len() <= self.params.successors + 2 {
            return Err(HaloError::TooFewNodes {
                need: self.params.successors + 2,
                got: self.nodes.len() - 1,
            });
        }
        let node = self.nodes.remove(i);
        if node.malicious {
            self.colluders.retain(|c| *c != id);
        }
        for n in &mut self.nodes {
            n.store.on_leave(id);
        }
        if let Some(sh) = self.shared.as_mut() {
            sh.forget(id);
        }
        Ok(())
    }

    /// Removes a uniformly chosen node and returns it.
    pub fn leave_random(&mut self) -> Option<NodeId> {
        if self.nodes.len() <= self.params.successors + 2 {
            return None;
        }
        let i = self.rng.gen_range(0..self.nodes.len());
        let id = self.nodes[i].id;
        self.leave(id).ok().map(|_| id)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Digest of every store, used to check that probing is side-effect free.
    pub fn reputation_fingerprint(&self) -> u64 {
        self.nodes
            .iter()
            .fold(0u64, |acc, n| acc.rotate_left(7) ^ n.store.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(ids: &[u64], bits: u32, params: HaloParams) -> HaloNetwork {
        let members: Vec<(NodeId, bool)> = ids.iter().map(|v| (NodeId(*v), false)).collect();
        HaloNetwork::from_members(IdSpace::new(bits).unwrap(), &members, params, 1.0, 1).unwrap()
    }

    fn small_params(redundancy: u32) -> HaloParams {
        HaloParams {
            redundancy,
            successors: 2,
            ..Default::default()
        }
    }

    fn brute_owner(ids: &[u64], x: u64, size: u64) -> u64 {
        *ids.iter().min_by_key(|v| (**v + size - x) % size).unwrap()
    }

    #[test]
    fn fingers_match_brute_force() {
        let ids = [3u64, 17, 29, 40, 77, 90, 101, 130, 150, 161, 177, 190, 201, 222, 240, 250];
        let net = ring(&ids, 8, small_params(4));
        for v in ids {
            for i in 0..8 {
                let want = brute_owner(&ids, (v + (1 << i)) % 256, 256);
                assert_eq!(net.finger(NodeId(v), i), NodeId(want), "v={v} i={i}");
            }
        }
    }

    #[test]
    fn knuckles_match_exhaustive_scan() {
        let ids = [5u64, 40, 66, 99, 140, 170, 200, 230];
        let net = ring(&ids, 8, small_params(4));
        for t in (0..256u64).step_by(7) {
            let v = brute_owner(&ids, t, 256);
            let mut want: Vec<NodeId> = ids
                .iter()
                .filter(|w| **w != v && (0..8).any(|i| brute_owner(&ids, (**w + (1 << i)) % 256, 256) == v))
                .map(|w| NodeId(*w))
                .collect();
            want.sort();
            assert_eq!(net.knuckles(NodeId(t)), want, "t={t}");
        }
    }

    #[test]
    fn regular_ring_has_one_knuckle_per_offset() {
        // 16 equally spaced nodes in a 8-bit space: offsets 4..8 hit nodes
        let ids: Vec<u64> = (0..16).map(|i| i * 16).collect();
        let net = ring(&ids, 8, small_params(4));
        assert_eq!(net.knuckles(NodeId(32)).len(), 4);
    }

    #[test]
    fn chord_next_hop_matches_closest_preceding_finger() {
        let ids = [3u64, 17, 29, 40, 77, 90, 101, 130, 150, 161, 177, 190, 201, 222, 240, 250];
        let params = HaloParams {
            successors: 0,
            ..small_params(4)
        };
        let net = ring(&ids, 8, params);
        for v in ids {
            for key in 0..256u64 {
                let hop = net.chord_next_hop(NodeId(v), NodeId(key)).unwrap();
                let d = (key + 256 - v) % 256;
                let succ = brute_owner(&ids, (v + 1) % 256, 256);
                if d < (succ + 256 - v) % 256 {
                    assert_eq!(hop, Hop::Found);
                    continue;
                }
                let best = (0..8)
                    .map(|i| brute_owner(&ids, (v + (1 << i)) % 256, 256))
                    .filter(|f| {
                        let fd = (f + 256 - v) % 256;
                        fd != 0 && fd <= d
                    })
                    .max_by_key(|f| (f + 256 - v) % 256)
                    .unwrap();
                assert_eq!(hop, Hop::Forward(NodeId(best)), "v={v} key={key}");
            }
        }
    }

    #[test]
    fn short_circuit_within_successor_list() {
        let ids: Vec<u64> = (0..16).map(|i| i * 16 + 1).collect();
        let params = HaloParams {
            successors: 3,
            mode: Mode::Collaborative,
            ..small_params(4)
        };
        let net = ring(&ids, 8, params);
        // key 50 lies between the 3rd and 4th successor of node 1
        assert_eq!(net.chord_next_hop(NodeId(1), NodeId(50)).unwrap(), Hop::Final(NodeId(49)));
        // key equal to a finger key
        assert_eq!(net.chord_next_hop(NodeId(1), NodeId(129)).unwrap(), Hop::Forward(NodeId(129)));
    }

    #[test]
    fn reds_next_hop_prefers_reputable_member() {
        let ids: Vec<u64> = (0..16).map(|i| i * 16).collect();
        let params = HaloParams {
            successors: 1,
            k_bucket: 2,
            mode: Mode::Collaborative,
            ..small_params(4)
        };
        let mut net = ring(&ids, 8, params);
        let v = net.index_of(NodeId(0)).unwrap();
        // bucket toward key 200 is {128, 112}
        for _ in 0..10 {
            net.nodes[v].store.record_path(&[NodeId(128)], false).unwrap();
            net.nodes[v].store.record_path(&[NodeId(112)], true).unwrap();
        }
        assert_eq!(net.reds_next_hop(NodeId(0), NodeId(200)).unwrap(), Hop::Forward(NodeId(112)));
    }

    #[test]
    fn honest_network_always_finds_owner() {
        let space = IdSpace::default();
        for mode in [Mode::Regular, Mode::ABoost, Mode::Collaborative] {
            let params = HaloParams {
                mode,
                ..Default::default()
            };
            let mut net = HaloNetwork::build(space, 300, 0.0, params, 1.0, 11).unwrap();
            let honest = net.honest_ids();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..300 {
                let o = honest[rng.gen_range(0..honest.len())];
                let t = NodeId(rng.gen::<u64>() & space.mask());
                let out = net.lookup(o, t, true).unwrap();
                assert!(!out.failed());
                assert_eq!(out.answer, net.owner(t));
                for s in &out.subsearches {
                    if !s.correct {
                        assert_eq!(classify_failure(s), Some(FailureReason::KnuckleNonexistent));
                    }
                }
            }
        }
    }

    #[test]
    fn nonexistent_knuckle_fraction_near_quarter() {
        let space = IdSpace::default();
        let net = HaloNetwork::build(space, 1000, 0.0, HaloParams::default(), 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut missing, mut total) = (0usize, 0usize);
        for _ in 0..4000 {
            let t = NodeId(rng.gen::<u64>() & space.mask());
            let v = net.owner_idx(t);
            for i in 22..32 {
                total += 1;
                missing += usize::from(!net.knuckle_exists(v, i));
            }
        }
        let frac = missing as f64 / total as f64;
        assert!((frac - 0.25).abs() < 0.03, "{frac}");
    }

    #[test]
    fn consolidation_dominance() {
        // If any subsearch returns the owner, the consolidated answer is the owner.
        let space = IdSpace::default();
        let mut net = HaloNetwork::build(space, 500, 0.3, HaloParams::default(), 1.0, 3).unwrap();
        let honest = net.honest_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let o = honest[rng.gen_range(0..honest.len())];
            let t = NodeId(rng.gen::<u64>() & space.mask());
            let out = net.lookup(o, t, false).unwrap();
            if out.subsearches.iter().any(|s| s.correct) {
                assert!(!out.failed());
            }
        }
    }

    #[test]
    fn classification_first_match() {
        let base = Subsearch {
            offset: 3,
            path: vec![NodeId(1), NodeId(2), NodeId(3)],
            returned: NodeId(9),
            success: false,
            correct: false,
            knuckle_exists: true,
            subverted_at: Some(0),
            knuckle_at: 2,
        };
        assert_eq!(classify_failure(&base), Some(FailureReason::StartNodeColluder));
        let mid = Subsearch {
            subverted_at: Some(1),
            ..base.clone()
        };
        assert_eq!(classify_failure(&mid), Some(FailureReason::BadNodeInPath));
        let kn = Subsearch {
            subverted_at: Some(2),
            ..base.clone()
        };
        assert_eq!(classify_failure(&kn), Some(FailureReason::KnuckleColluder));
        let none = Subsearch {
            subverted_at: None,
            knuckle_exists: false,
            ..base.clone()
        };
        assert_eq!(classify_failure(&none), Some(FailureReason::KnuckleNonexistent));
        let ok = Subsearch {
            correct: true,
            ..base
        };
        assert_eq!(classify_failure(&ok), None);
    }

    #[test]
    fn probing_leaves_reputation_untouched() {
        let params = HaloParams {
            mode: Mode::Collaborative,
            ..Default::default()
        };
        let mut net = HaloNetwork::build(IdSpace::default(), 200, 0.2, params, 1.0, 8).unwrap();
        let honest = net.honest_ids();
        for (i, o) in honest.iter().enumerate() {
            net.lookup(*o, NodeId((i as u64) * 7_777_777), true).unwrap();
        }
        let before = net.reputation_fingerprint();
        for (i, o) in honest.iter().enumerate() {
            net.lookup(*o, NodeId((i as u64) * 5_555_555), false).unwrap();
        }
        assert_eq!(net.reputation_fingerprint(), before);
    }

    #[test]
    fn churn_keeps_ring_consistent() {
        let mut net = HaloNetwork::build(IdSpace::default(), 100, 0.2, HaloParams::default(), 1.0, 8).unwrap();
        for _ in 0..200 {
            net.leave_random();
            net.join_random(0.2);
        }
        assert!(net.nodes.windows(2).all(|w| w[0].id < w[1].id));
        let bad: Vec<NodeId> = net.nodes.iter().filter(|n| n.malicious).map(|n| n.id).collect();
        assert_eq!(bad, net.colluders);
        assert!(matches!(
            net.lookup(net.colluders[0], NodeId(0), false),
            Err(HaloError::MaliciousOrigin(_))
        ));
    }
}
