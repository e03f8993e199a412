//! First-hand reputation state.
//!
//! Each honest node owns a [`ReputationStore`]: a tree of observed lookup-path
//! prefixes (for Chord) or a flat map of contacts (for Kademlia, which only
//! ever records single-node prefixes). Every entry counts how often the
//! prefix was used and how often the lookup through it succeeded.

use std::collections::VecDeque;
use std::hash::{Hash, Hasher};

use rustc_hash::{FxHashMap, FxHasher};
use thiserror::Error;

use crate::idspace::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReputationError {
    #[error("cannot record an empty path")]
    EmptyPath,
    #[error("cannot select from an empty bucket")]
    EmptyBucket,
    #[error("selection scores must be non-negative and not all zero")]
    DegenerateScores,
    #[error("{name} must be in [0, 1], got {value}")]
    OutOfUnitInterval { name: &'static str, value: f64 },
}

/// Score prior and churn policy shared by all stores of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    /// Score of an unseen entry.
    pub prior: f64,
    /// Pseudo-observations backing the prior.
    pub prior_weight: f64,
    /// Prior assigned to a node observed joining.
    pub join_score: f64,
    /// Deepest path prefix kept in the tree.
    pub max_depth: usize,
    /// Departed-node entries remembered for white-washing defense.
    pub cache_capacity: usize,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            prior: 0.5,
            prior_weight: 1.0,
            join_score: 0.5,
            max_depth: 3,
            cache_capacity: 64,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<(), ReputationError> {
        for (name, value) in [("prior", self.prior), ("join_score", self.join_score)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ReputationError::OutOfUnitInterval { name, value });
            }
        }
        Ok(())
    }
}

/// Success and use counters of one tree entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub successes: u32,
    pub uses: u32,
}

#[derive(Debug, Clone, Default)]
struct TreeNode {
    tally: Tally,
    /// Overrides the store-wide prior (set on join).
    prior: Option<f64>,
    children: FxHashMap<NodeId, TreeNode>,
}

impl TreeNode {
    fn score(&self, params: &ScoreParams) -> f64 {
        let prior = self.prior.unwrap_or(params.prior);
        (self.tally.successes as f64 + prior * params.prior_weight)
            / (self.tally.uses as f64 + params.prior_weight)
    }

    fn count(&self) -> usize {
        1 + self.children.values().map(TreeNode::count).sum::<usize>()
    }

    fn hash_into(&self, id: NodeId, h: &mut FxHasher) {
        id.hash(h);
        self.tally.successes.hash(h);
        self.tally.uses.hash(h);
        self.prior.map(f64::to_bits).hash(h);
        let mut keys: Vec<&NodeId> = self.children.keys().collect();
        keys.sort_unstable();
        for k in keys {
            self.children[k].hash_into(*k, h);
        }
    }
}

/// Bounded memory of departed nodes' entries, evicting the oldest first.
#[derive(Debug, Clone, Default)]
struct LeaveCache {
    order: VecDeque<NodeId>,
    entries: FxHashMap<NodeId, TreeNode>,
}

impl LeaveCache {
    fn put(&mut self, id: NodeId, node: TreeNode, capacity: usize) {
        if capacity == 0 {
            return;
        }
        if self.entries.insert(id, node).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > capacity {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }

    fn take(&mut self, id: NodeId) -> Option<TreeNode> {
        let node = self.entries.remove(&id)?;
        self.order.retain(|x| *x != id);
        Some(node)
    }
}

/// One node's first-hand reputation tree.
#[derive(Debug, Clone)]
pub struct ReputationStore {
    owner: NodeId,
    params: ScoreParams,
    roots: FxHashMap<NodeId, TreeNode>,
    cache: LeaveCache,
    salt: u64,
}

impl ReputationStore {
    /// `salt` seeds the sticky tie-break among equally scored candidates.
    pub fn new(owner: NodeId, params: ScoreParams, salt: u64) -> Self {
        Self {
            owner,
            params,
            roots: FxHashMap::default(),
            cache: LeaveCache::default(),
            salt,
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn params(&self) -> &ScoreParams {
        &self.params
    }

    /// Records one observed lookup path: every prefix gains a use, and a
    /// success too when the lookup succeeded. Prefixes deeper than
    /// `max_depth` are not tracked.
    pub fn record_path(&mut self, path: &[NodeId], success: bool) -> Result<(), ReputationError> {
        let (first, rest) = path.split_first().ok_or(ReputationError::EmptyPath)?;
        let mut node = self.roots.entry(*first).or_default();
        bump(&mut node.tally, success);
        for id in rest.iter().take(self.params.max_depth.saturating_sub(1)) {
            node = node.children.entry(*id).or_default();
            bump(&mut node.tally, success);
        }
        Ok(())
    }

    /// Score of a single contact (a depth-one prefix).
    pub fn score(&self, id: NodeId) -> f64 {
        self.roots
            .get(&id)
            .map_or(self.params.prior, |n| n.score(&self.params))
    }

    /// Score of an arbitrary prefix; falls back to the prior when unseen.
    pub fn score_path(&self, path: &[NodeId]) -> f64 {
        let Some((first, rest)) = path.split_first() else {
            return self.params.prior;
        };
        let mut node = match self.roots.get(first) {
            Some(n) => n,
            None => return self.params.prior,
        };
        for id in rest {
            match node.children.get(id) {
                Some(n) => node = n,
                None => return self.params.prior,
            }
        }
        node.score(&self.params)
    }

    pub fn tally(&self, path: &[NodeId]) -> Option<Tally> {
        let (first, rest) = path.split_first()?;
        let mut node = self.roots.get(first)?;
        for id in rest {
            node = node.children.get(id)?;
        }
        Some(node.tally)
    }

    pub fn knows(&self, id: NodeId) -> bool {
        self.roots.contains_key(&id)
    }

    /// Contacts with a depth-one entry.
    pub fn contacts(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.roots.keys().copied()
    }

    /// Total number of tree entries.
    pub fn len(&self) -> usize {
        self.roots.values().map(TreeNode::count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    /// Stable per-store pseudo-random rank used to break score ties.
    pub fn tie_rank(&self, id: NodeId) -> u64 {
        splitmix64(self.salt ^ id.0.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Deterministic maximum: highest score, ties broken by the sticky rank.
    pub fn select_max(&self, bucket: &[NodeId]) -> Result<NodeId, ReputationError> {
        self.select_max_by(bucket, |id| self.score(id))
    }

    /// [`select_max`](Self::select_max) with an externally supplied score.
    pub fn select_max_by<F>(&self, bucket: &[NodeId], score: F) -> Result<NodeId, ReputationError>
    where
        F: Fn(NodeId) -> f64,
    {
        bucket
            .iter()
            .map(|id| (score(*id), self.tie_rank(*id), *id))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, _, id)| id)
            .ok_or(ReputationError::EmptyBucket)
    }

    /// Enters a newly joined node with the join prior, or restores its cached
    /// entry if it left recently.
    pub fn on_join(&mut self, id: NodeId) {
        if let Some(cached) = self.cache.take(id) {
            self.roots.insert(id, cached);
            return;
        }
        let join = self.params.join_score;
        if join == self.params.prior && !self.roots.contains_key(&id) {
            // unseen nodes already score the prior
            return;
        }
        let entry = self.roots.entry(id).or_default();
        if entry.tally.uses == 0 {
            entry.prior = Some(join);
        }
    }

    /// Moves a departed node's entry (and its subtree) into the bounded cache.
    pub fn on_leave(&mut self, id: NodeId) {
        if let Some(node) = self.roots.remove(&id) {
            let capacity = self.params.cache_capacity;
            self.cache.put(id, node, capacity);
        }
    }

    /// Drops a contact without caching it.
    pub fn forget(&mut self, id: NodeId) {
        self.roots.remove(&id);
    }

    /// Order-independent digest of the tree, used to check that measurement
    /// phases leave reputation untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut keys: Vec<&NodeId> = self.roots.keys().collect();
        keys.sort_unstable();
        let mut h = FxHasher::default();
        for k in keys {
            self.roots[k].hash_into(*k, &mut h);
        }
        h.finish()
    }
}

fn bump(t: &mut Tally, success: bool) {
    t.uses += 1;
    if success {
        t.successes += 1;
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `alpha * r + (1 - alpha) * s`.
pub fn ewma_update(s: f64, r: f64, alpha: f64) -> f64 {
    alpha * r + (1.0 - alpha) * s
}

/// An exponentially weighted score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwmaScore {
    pub value: f64,
    pub weight: f64,
}

impl EwmaScore {
    pub fn new(value: f64, weight: f64) -> Result<Self, ReputationError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(ReputationError::OutOfUnitInterval { name: "score", value });
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(ReputationError::OutOfUnitInterval {
                name: "ewma weight",
                value: weight,
            });
        }
        Ok(Self { value, weight })
    }

    pub fn update(&mut self, result: f64) -> f64 {
        self.value = ewma_update(self.value, result, self.weight);
        self.value
    }
}

/// Power-biased selection probabilities `s_j^bias / sum_i s_i^bias`.
///
/// Computed in log space so that large biases do not underflow.
pub fn selection_prob(scores: &[f64], bias: f64) -> Result<Vec<f64>, ReputationError> {
    if scores.is_empty() || scores.iter().any(|s| *s < 0.0 || s.is_nan()) {
        return Err(ReputationError::DegenerateScores);
    }
    if scores.iter().all(|s| *s == 0.0) {
        return Err(ReputationError::DegenerateScores);
    }
    if bias == 0.0 {
        let u = 1.0 / scores.len() as f64;
        return Ok(vec![u; scores.len()]);
    }
    let logs: Vec<f64> = scores.iter().map(|s| bias * s.ln()).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}
