//! Kademlia overlay with iterative lookups and lookup-graph reputation.
//!
//! A lookup keeps a shortlist of the `k` closest nodes seen so far and queries
//! `alpha` unqueried members per step; each queried node answers with `beta`
//! contacts. The querier records who returned whom in a [`LookupGraph`]. When
//! the lookup ends at the closest honest replica root, a depth-first walk
//! from that root credits every node on a path back to the querier.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap, FxHashSet};
use thiserror::Error;

use crate::adversary::{AdversaryError, AttackPolicy};
use crate::idspace::{xor_closest, IdSpace, NodeId};
use crate::reputation::{ReputationStore, ScoreParams};
use crate::Mode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KadError {
    #[error("replica count must be at least 1")]
    NoReplicas,
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("colluding fraction must be in [0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("k, alpha and beta must all be positive")]
    InvalidRedundancy,
    #[error("node {0} is not in the network")]
    UnknownNode(NodeId),
    #[error("querying node {0} is malicious")]
    MaliciousOrigin(NodeId),
    #[error("vertex {0} is not in the lookup graph")]
    NotInGraph(NodeId),
    #[error("cannot insert a node into its own bucket")]
    SelfInsert,
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KadParams {
    pub k: usize,
    pub alpha: usize,
    pub beta: usize,
    pub replicas: usize,
    pub tolerance_bits: u32,
    pub mode: Mode,
    pub score: ScoreParams,
}

impl Default for KadParams {
    fn default() -> Self {
        Self {
            k: 10,
            alpha: 7,
            beta: 3,
            replicas: 10,
            tolerance_bits: 8,
            mode: Mode::Regular,
            score: ScoreParams {
                max_depth: 1,
                ..ScoreParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Contact {
    pub id: NodeId,
    pub last_seen: u64,
}

#[derive(Debug, Clone)]
pub struct KadNode {
    pub id: NodeId,
    pub malicious: bool,
    pub alive: bool,
    /// Bucket `j` holds contacts sharing exactly `j` leading bits with `id`.
    pub buckets: Vec<Vec<Contact>>,
    pub bootstrap: Vec<NodeId>,
    pub store: ReputationStore,
}

impl KadNode {
    pub fn contacts(&self) -> impl Iterator<Item = &Contact> + '_ {
        self.buckets.iter().flatten()
    }
}

/// Who-returned-whom graph of one lookup. An edge `u -> v` means `u` was
/// returned by `v` (or, for the first step, that the querier picked `u`).
#[derive(Debug, Clone, Default)]
pub struct LookupGraph {
    querier: NodeId,
    vertices: Vec<NodeId>,
    index: FxHashMap<NodeId, usize>,
    out: Vec<Vec<usize>>,
}

impl LookupGraph {
    pub fn new(querier: NodeId) -> Self {
        let mut g = Self {
            querier,
            ..Default::default()
        };
        g.vertex(querier);
        g
    }

    fn vertex(&mut self, id: NodeId) -> usize {
        if let Some(i) = self.index.get(&id) {
            return *i;
        }
        let i = self.vertices.len();
        self.vertices.push(id);
        self.index.insert(id, i);
        self.out.push(Vec::new());
        i
    }

    pub fn querier(&self) -> NodeId {
        self.querier
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn vertices(&self) -> &[NodeId] {
        &self.vertices
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(u, vs)| vs.iter().map(move |v| (self.vertices[u], self.vertices[*v])))
            .collect()
    }

    /// One application of the graph-building step: on the first step the
    /// queried node is linked to the querier, then every returned node gets
    /// an edge toward the node that returned it.
    pub fn step(&mut self, first: bool, queried: NodeId, returned: &[NodeId]) {
        let a = self.vertex(queried);
        if first {
            let q = self.vertex(self.querier);
            self.out[a].push(q);
        }
        for b in returned {
            let bi = self.vertex(*b);
            self.out[bi].push(a);
        }
    }

    /// Depth-first walk from `root` along out-edges, visiting each vertex at
    /// most once and never entering the querier. Returns visited vertices in
    /// visiting order.
    pub fn credit(&self, root: NodeId) -> Result<Vec<NodeId>, KadError> {
        let start = *self.index.get(&root).ok_or(KadError::NotInGraph(root))?;
        let q = self.index[&self.querier];
        let mut visited = vec![false; self.vertices.len()];
        let mut order = Vec::new();
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            if visited[u] || u == q {
                continue;
            }
            visited[u] = true;
            order.push(self.vertices[u]);
            for v in self.out[u].iter().rev() {
                if !visited[*v] {
                    stack.push(*v);
                }
            }
        }
        Ok(order)
    }
}

#[derive(Debug, Clone)]
pub struct KadLookupOutcome {
    pub querier: NodeId,
    pub key: NodeId,
    pub attacked: bool,
    /// Closest honest live node to the key.
    pub true_root: Option<NodeId>,
    /// Closest node the lookup ended at.
    pub closest: Option<NodeId>,
    /// Root the querier believes it found.
    pub answer: Option<NodeId>,
    pub success: bool,
    pub queried: Vec<NodeId>,
    pub unreachable: Vec<NodeId>,
    pub steps: usize,
    pub graph: LookupGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EntryState {
    Fresh,
    Queried,
    Failed,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    id: NodeId,
    dist: u64,
    state: EntryState,
}

#[derive(Debug, Clone)]
pub struct KadNetwork {
    space: IdSpace,
    nodes: Vec<KadNode>,
    index: FxHashMap<NodeId, usize>,
    live: Vec<NodeId>,
    honest: Vec<NodeId>,
    colluders: Vec<NodeId>,
    params: KadParams,
    attack: AttackPolicy,
    lookups: u64,
    clock: u64,
    rng: ChaCha8Rng,
}

fn insert_sorted(v: &mut Vec<NodeId>, id: NodeId) {
    let i = v.partition_point(|x| *x < id);
    v.insert(i, id);
}

fn remove_sorted(v: &mut Vec<NodeId>, id: NodeId) {
    if let Ok(i) = v.binary_search(&id) {
        v.remove(i);
    }
}

impl KadNetwork {
    pub fn build(
        space: IdSpace,
        n: usize,
        c: f64,
        params: KadParams,
        attack_rate: f64,
        seed: u64,
    ) -> Result<Self, KadError> {
        if !(0.0..1.0).contains(&c) {
            return Err(KadError::InvalidFraction(c));
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
        let mut flags = vec![false; n];
        flags[..bad].iter_mut().for_each(|f| *f = true);
        flags.shuffle(&mut rng);
        let members: Vec<(NodeId, bool)> = ids.into_iter().zip(flags).collect();
        Self::from_members(space, &members, params, attack_rate, rng.gen())
    }

    pub fn from_members(
        space: IdSpace,
        members: &[(NodeId, bool)],
        params: KadParams,
        attack_rate: f64,
        seed: u64,
    ) -> Result<Self, KadError> {
        if params.replicas == 0 {
            return Err(KadError::NoReplicas);
        }
        if params.k == 0 || params.alpha == 0 || params.beta == 0 {
            return Err(KadError::InvalidRedundancy);
        }
        if members.len() < 2 {
            return Err(KadError::TooFewNodes(members.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attack = AttackPolicy::new(attack_rate, rng.gen())?;
        let mut net = Self {
            space,
            nodes: Vec::with_capacity(members.len()),
            index: FxHashMap::default(),
            live: Vec::new(),
            honest: Vec::new(),
            colluders: Vec::new(),
            params,
            attack,
            lookups: 0,
            clock: 0,
            rng,
        };
        for (id, bad) in members {
            net.add_node(*id, *bad);
        }
        let all = net.live.clone();
        let boot = net.bootstrap_size();
        for i in 0..net.nodes.len() {
            let me = net.nodes[i].id;
            let mut list = Vec::with_capacity(boot);
            while list.len() < boot.min(all.len() - 1) {
                let pick = all[net.rng.gen_range(0..all.len())];
                if pick != me && !list.contains(&pick) {
                    list.push(pick);
                }
            }
            net.nodes[i].bootstrap = list;
        }
        Ok(net)
    }

    fn bootstrap_size(&self) -> usize {
        (self.live.len().max(2) as f64).log2().ceil() as usize
    }

    fn add_node(&mut self, id: NodeId, malicious: bool) -> usize {
        let i = self.nodes.len();
        let salt = self.rng.gen();
        self.nodes.push(KadNode {
            id,
            malicious,
            alive: true,
            buckets: vec![Vec::new(); self.space.bits() as usize],
            bootstrap: Vec::new(),
            store: ReputationStore::new(id, self.params.score, salt),
        });
        self.index.insert(id, i);
        insert_sorted(&mut self.live, id);
        if malicious {
            insert_sorted(&mut self.colluders, id);
        } else {
            insert_sorted(&mut self.honest, id);
        }
        i
    }

    pub fn space(&self) -> &IdSpace {
        &self.space
    }

    pub fn params(&self) -> &KadParams {
        &self.params
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.params.mode = mode;
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn live_ids(&self) -> &[NodeId] {
        &self.live
    }

    pub fn honest_ids(&self) -> &[NodeId] {
        &self.honest
    }

    pub fn colluders(&self) -> &[NodeId] {
        &self.colluders
    }

    pub fn node(&self, id: NodeId) -> Option<&KadNode> {
        self.index.get(&id).map(|i| &self.nodes[*i])
    }

    fn idx(&self, id: NodeId) -> Result<usize, KadError> {
        self.index.get(&id).copied().ok_or(KadError::UnknownNode(id))
    }

    fn is_live(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| n.alive)
    }

    fn is_bad(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| n.malicious)
    }

    /// The replica roots of `key`: the closest live nodes sharing at least
    /// `tolerance_bits` leading bits with it, closest first.
    pub fn replica_roots(&self, key: NodeId) -> Vec<NodeId> {
        xor_closest(&self.space, &self.live, key, self.params.replicas)
            .into_iter()
            .filter(|r| self.space.shared_prefix_bits(*r, key) >= self.params.tolerance_bits)
            .collect()
    }

    /// Closest live node to `key`.
    pub fn true_root(&self, key: NodeId) -> Option<NodeId> {
        xor_closest(&self.space, &self.live, key, 1).first().copied()
    }

    fn bucket_index(&self, owner: NodeId, other: NodeId) -> usize {
        self.space.shared_prefix_bits(owner, other) as usize
    }

    pub fn in_buckets(&self, owner: NodeId, other: NodeId) -> bool {
        if owner == other {
            return false;
        }
        self.node(owner).is_some_and(|n| {
            n.buckets[self.bucket_index(owner, other)]
                .iter()
                .any(|c| c.id == other)
        })
    }

    /// Inserts `candidate` into `owner`'s matching bucket. When the bucket is
    /// full, plain mode evicts the least recently seen contact; reputation
    /// modes evict the lowest-scored one, least recently seen among ties.
    pub fn bucket_insert(&mut self, owner: NodeId, candidate: NodeId) -> Result<(), KadError> {
        if owner == candidate {
            return Err(KadError::SelfInsert);
        }
        let oi = self.idx(owner)?;
        self.clock += 1;
        let now = self.clock;
        let j = self.bucket_index(owner, candidate);
        let live: Vec<bool> = self.nodes[oi].buckets[j].iter().map(|c| self.is_live(c.id)).collect();
        let node = &mut self.nodes[oi];
        let bucket = &mut node.buckets[j];
        let mut keep = live.into_iter();
        bucket.retain(|_| keep.next().unwrap_or(false));
        if let Some(c) = bucket.iter_mut().find(|c| c.id == candidate) {
            c.last_seen = now;
            return Ok(());
        }
        let fresh = Contact {
            id: candidate,
            last_seen: now,
        };
        if bucket.len() < self.params.k {
            bucket.push(fresh);
            node.store.on_join(candidate);
            return Ok(());
        }
        let victim = match self.params.mode {
            Mode::Regular => bucket
                .iter()
                .enumerate()
                .min_by_key(|(_, c)| c.last_seen)
                .map(|(i, _)| i),
            Mode::ABoost | Mode::Collaborative => {
                let store = &node.store;
                bucket
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, store.score(c.id), c.last_seen))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)))
                    .map(|(i, _, _)| i)
            }
        };
        if let Some(i) = victim {
            let old = bucket[i].id;
            bucket[i] = fresh;
            node.store.on_leave(old);
            node.store.on_join(candidate);
        }
        Ok(())
    }

    fn touch(&mut self, owner: usize, id: NodeId) {
        self.clock += 1;
        let now = self.clock;
        let j = self.space.shared_prefix_bits(self.nodes[owner].id, id) as usize;
        if let Some(c) = self.nodes[owner].buckets[j].iter_mut().find(|c| c.id == id) {
            c.last_seen = now;
        }
    }

    fn drop_contact(&mut self, owner: usize, id: NodeId) {
        let j = self.space.shared_prefix_bits(self.nodes[owner].id, id) as usize;
        self.nodes[owner].buckets[j].retain(|c| c.id != id);
    }

    /// Fraction of malicious entries among all live entries of honest nodes'
    /// buckets.
    pub fn pollution_fraction(&self) -> f64 {
        let (mut bad, mut total) = (0usize, 0usize);
        for n in self.nodes.iter().filter(|n| n.alive && !n.malicious) {
            for c in n.contacts() {
                if let Some(m) = self.node(c.id).filter(|m| m.alive) {
                    total += 1;
                    bad += usize::from(m.malicious);
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            bad as f64 / total as f64
        }
    }

    /// Score `by` assigns to `id`.
    fn score(&self, by: usize, id: NodeId) -> f64 {
        self.nodes[by].store.score(id)
    }

    /// Orders candidates by distance to the key, or by `by`'s score (then
    /// distance) when `reputation` is set.
    fn rank(&self, by: usize, key: NodeId, cands: &mut [NodeId], reputation: bool) {
        if reputation {
            let mut keyed: Vec<(f64, u64, NodeId)> = cands
                .iter()
                .map(|c| (self.score(by, *c), self.space.xor_distance(*c, key), *c))
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (slot, k) in cands.iter_mut().zip(keyed) {
                *slot = k.2;
            }
        } else {
            cands.sort_by_key(|c| self.space.xor_distance(*c, key));
        }
    }

    /// Live contacts of node `a`, excluding `skip`.
    fn known(&self, a: usize, skip: NodeId) -> Vec<NodeId> {
        self.nodes[a]
            .contacts()
            .map(|c| c.id)
            .filter(|id| *id != skip && self.is_live(*id))
            .collect()
    }

    /// What queried node `a` returns to `q`.
    fn respond(&self, a: usize, q: NodeId, key: NodeId, attacked: bool, given: &FxHashSet<NodeId>) -> Vec<NodeId> {
        let beta = self.params.beta;
        let node = &self.nodes[a];
        if node.malicious {
            if attacked {
                // coordinated colluders hand out members the querier has not seen yet
                return xor_closest(&self.space, &self.colluders, key, beta + 1 + given.len())
                    .into_iter()
                    .filter(|c| *c != node.id && !given.contains(c))
                    .take(beta)
                    .collect();
            }
            let closest = xor_closest(&self.space, &self.colluders, key, beta + 1);
            let mine = self.space.shared_prefix_bits(node.id, key);
            let mut out = Vec::with_capacity(beta);
            if mine >= self.params.tolerance_bits {
                if let Some(r) = self.true_root(key) {
                    out.push(r);
                }
            }
            for c in closest {
                if out.len() >= beta {
                    break;
                }
                if c != node.id && self.space.shared_prefix_bits(c, key) > mine && !out.contains(&c) {
                    out.push(c);
                }
            }
            if out.len() < beta {
                let mut fill = self.known(a, q);
                fill.sort_by_key(|c| self.space.xor_distance(*c, key));
                for c in fill {
                    if out.len() >= beta {
                        break;
                    }
                    if !out.contains(&c) {
                        out.push(c);
                    }
                }
            }
            return out;
        }
        let mut cands = self.known(a, q);
        cands.sort_by_key(|c| self.space.xor_distance(*c, key));
        if self.params.mode == Mode::Collaborative {
            // best-scored members of the bucket covering the key come first
            let j = self.space.shared_prefix_bits(node.id, key);
            let (mut near, rest): (Vec<NodeId>, Vec<NodeId>) =
                cands.into_iter().partition(|c| self.space.shared_prefix_bits(node.id, *c) == j);
            near.sort_by(|x, y| self.score(a, *y).total_cmp(&self.score(a, *x)));
            near.extend(rest);
            cands = near;
        }
        cands.truncate(beta);
        cands
    }

    pub fn lookup_count(&self) -> u64 {
        self.lookups
    }

    /// Runs one lookup; buckets and reputation change only when `train`.
    pub fn lookup(&mut self, q: NodeId, key: NodeId, train: bool) -> Result<KadLookupOutcome, KadError> {
        let out = self.lookup_readonly(q, key)?;
        self.lookups += 1;
        if train {
            self.learn(&out);
        }
        Ok(out)
    }

    fn lookup_readonly(&self, q: NodeId, key: NodeId) -> Result<KadLookupOutcome, KadError> {
        let qi = self.idx(q)?;
        if self.nodes[qi].malicious {
            return Err(KadError::MaliciousOrigin(q));
        }
        let attacked = self.attack.should_attack(self.lookups);
        let p = &self.params;
        let reputation = p.mode != Mode::Regular;
        let mut seed: Vec<NodeId> = self.known(qi, q);
        if seed.len() < p.alpha {
            for b in &self.nodes[qi].bootstrap {
                if *b != q && !seed.contains(b) && self.is_live(*b) {
                    seed.push(*b);
                }
            }
        }
        seed.sort_by_key(|c| self.space.xor_distance(*c, key));
        seed.truncate(p.k);
        let mut seen: FxHashSet<NodeId> = seed.iter().copied().collect();
        seen.insert(q);
        let mut list: Vec<Entry> = seed
            .into_iter()
            .map(|id| Entry {
                id,
                dist: self.space.xor_distance(id, key),
                state: EntryState::Fresh,
            })
            .collect();
        list.sort_by_key(|e| e.dist);
        let mut graph = LookupGraph::new(q);
        let mut queried = Vec::new();
        let mut unreachable = Vec::new();
        let mut step = 0usize;
        loop {
            let mut fresh: Vec<NodeId> = list
                .iter()
                .filter(|e| e.state != EntryState::Failed)
                .take(p.k)
                .filter(|e| e.state == EntryState::Fresh)
                .map(|e| e.id)
                .collect();
            if fresh.is_empty() {
                break;
            }
            self.rank(qi, key, &mut fresh, reputation);
            fresh.truncate(p.alpha);
            for a in fresh {
                let entry = list.iter_mut().find(|e| e.id == a).expect("candidate is listed");
                let ai = match self.index.get(&a) {
                    Some(i) if self.nodes[*i].alive => *i,
                    _ => {
                        entry.state = EntryState::Failed;
                        unreachable.push(a);
                        continue;
                    }
                };
                entry.state = EntryState::Queried;
                queried.push(a);
                let returned = self.respond(ai, q, key, attacked, &seen);
                graph.step(step == 0, a, &returned);
                for r in returned {
                    if seen.insert(r) {
                        list.push(Entry {
                            id: r,
                            dist: self.space.xor_distance(r, key),
                            state: EntryState::Fresh,
                        });
                    }
                }
            }
            list.sort_by_key(|e| e.dist);
            step += 1;
        }
        let closest = list
            .iter()
            .find(|e| e.state == EntryState::Queried)
            .map(|e| e.id)
            .filter(|c| self.space.xor_distance(*c, key) < self.space.xor_distance(q, key))
            .or(Some(q));
        let true_root = self.true_root(key);
        let answer = closest.map(|c| match (self.is_bad(c), attacked) {
            (true, true) => xor_closest(&self.space, &self.colluders, key, 1)[0],
            (true, false) => true_root.unwrap_or(c),
            (false, _) => c,
        });
        let success = answer.is_some() && answer == true_root;
        Ok(KadLookupOutcome {
            querier: q,
            key,
            attacked,
            true_root,
            closest,
            answer,
            success,
            queried,
            unreachable,
            steps: step,
            graph,
        })
    }

    fn learn(&mut self, out: &KadLookupOutcome) {
        let qi = match self.index.get(&out.querier) {
            Some(i) => *i,
            None => return,
        };
        let q = out.querier;
        for dead in &out.unreachable {
            self.drop_contact(qi, *dead);
        }
        for v in out.graph.vertices().iter().copied() {
            if v != q && self.is_live(v) && !out.queried.contains(&v) && !self.in_buckets(q, v) {
                let _ = self.bucket_insert(q, v);
            }
        }
        for a in &out.queried {
            if self.in_buckets(q, *a) {
                self.touch(qi, *a);
            } else {
                let _ = self.bucket_insert(q, *a);
            }
            if !self.is_bad(*a) {
                let _ = self.bucket_insert(*a, q);
            }
        }
        if self.params.mode == Mode::Regular {
            return;
        }
        let credited: FxHashSet<NodeId> = match (out.success, out.closest) {
            (true, Some(root)) if root != q => {
                let start = out.answer.filter(|a| out.graph.contains(*a)).unwrap_or(root);
                out.graph.credit(start).unwrap_or_default().into_iter().collect()
            }
            _ => FxHashSet::default(),
        };
        let touched: Vec<NodeId> = out
            .graph
            .vertices()
            .iter()
            .copied()
            .filter(|v| *v != q && self.in_buckets(q, *v))
            .collect();
        for v in touched {
            let _ = self.nodes[qi].store.record_path(&[v], credited.contains(&v));
        }
    }

    /// Every live honest node looks up its own identifier, then runs
    /// `per_node` training lookups for uniform random keys, in
    /// random-permutation rounds.
    pub fn warmup(&mut self, per_node: usize) {
        for round in 0..=per_node {
            let mut order = self.honest.clone();
            order.shuffle(&mut self.rng);
            for q in order {
                if !self.is_live(q) {
                    continue;
                }
                let key = if round == 0 { q } else { self.random_key() };
                let _ = self.lookup(q, key, true);
            }
        }
    }

    pub fn random_key(&mut self) -> NodeId {
        NodeId(self.rng.gen::<u64>() & self.space.mask())
    }

    /// Adds a node with a fresh identifier and a random bootstrap list. An
    /// honest joiner looks up its own identifier.
    pub fn join(&mut self, malicious: bool) -> NodeId {
        let id = loop {
            let v = self.random_key();
            if !self.index.contains_key(&v) {
                break v;
            }
        };
        let i = self.add_node(id, malicious);
        let boot = self.bootstrap_size().min(self.live.len() - 1);
        let mut list = Vec::with_capacity(boot);
        while list.len() < boot {
            let pick = self.live[self.rng.gen_range(0..self.live.len())];
            if pick != id && !list.contains(&pick) {
                list.push(pick);
            }
        }
        self.nodes[i].bootstrap = list;
        if !malicious {
            let _ = self.lookup(id, id, true);
        }
        id
    }

    pub fn join_random(&mut self, c: f64) -> NodeId {
        let bad = self.rng.gen_bool(c.clamp(0.0, 1.0));
        self.join(bad)
    }

    /// Marks `id` as departed; other nodes notice lazily when they contact it.
    pub fn leave(&mut self, id: NodeId) -> Result<(), KadError> {
        let i = self.idx(id)?;
        if !self.nodes[i].alive {
            return Ok(());
        }
        self.nodes[i].alive = false;
        remove_sorted(&mut self.live, id);
        if self.nodes[i].malicious {
            remove_sorted(&mut self.colluders, id);
        } else {
            remove_sorted(&mut self.honest, id);
        }
        Ok(())
    }

    pub fn leave_random(&mut self) -> Option<NodeId> {
        if self.live.len() <= 2 {
            return None;
        }
        let id = self.live[self.rng.gen_range(0..self.live.len())];
        self.leave(id).ok().map(|_| id)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Digest of all buckets and stores.
    pub fn state_fingerprint(&self) -> u64 {
        let mut acc = 0u64;
        for n in &self.nodes {
            acc = acc.rotate_left(5) ^ n.store.fingerprint();
            for (j, b) in n.buckets.iter().enumerate() {
                for c in b {
                    acc = acc
                        .rotate_left(3)
                        .wrapping_add(c.id.0 ^ c.last_seen.wrapping_mul(31) ^ j as u64);
                }
            }
        }
        acc
    }

    /// Every bucket member shares exactly its bucket index in leading bits
    /// with the owner, and no bucket exceeds `k`.
    pub fn check_bucket_invariants(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.buckets.iter().enumerate().all(|(j, b)| {
                b.len() <= self.params.k
                    && b.iter()
                        .all(|c| self.space.shared_prefix_bits(n.id, c.id) as usize == j)
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig2() -> (LookupGraph, [NodeId; 12]) {
        // vertex names follow their XOR distance to the key
        let v = |d: u64| NodeId(d);
        let (q, a27, a22, a25) = (v(45), v(27), v(22), v(25));
        let (b15, b12, b10, b14, b30, r4, r7) = (v(15), v(12), v(10), v(14), v(30), v(4), v(7));
        let mut g = LookupGraph::new(q);
        g.step(true, a27, &[b12, b15]);
        g.step(true, a22, &[b12, b10]);
        g.step(true, a25, &[b10, b14]);
        g.step(false, b12, &[b15, b30]);
        g.step(false, b10, &[r4]);
        g.step(false, b14, &[r4, r7]);
        (g, [q, a27, a22, a25, b15, b12, b10, b14, b30, r4, r7, v(99)])
    }

    #[test]
    fn graph_matches_figure_edges() {
        let (g, [q, a27, a22, a25, b15, b12, b10, b14, b30, r4, r7, _]) = fig2();
        let mut edges = g.edges();
        edges.sort();
        let mut want = vec![
            (a27, q),
            (a22, q),
            (a25, q),
            (b12, a27),
            (b15, b12),
            (b12, a22),
            (b10, a22),
            (b10, a25),
            (b14, a25),
            (b15, a27),
            (b30, b12),
            (r4, b10),
            (r4, b14),
            (r7, b14),
        ];
        want.sort();
        assert_eq!(edges, want);
        // b10 returned twice: one vertex, two edges
        assert_eq!(g.vertices().iter().filter(|x| **x == b10).count(), 1);
    }

    #[test]
    fn credit_traverses_successful_paths_once() {
        let (g, [q, _a27, a22, a25, _b15, _b12, b10, b14, _b30, r4, _r7, stranger]) = fig2();
        let visited = g.credit(r4).unwrap();
        let mut set: Vec<NodeId> = visited.clone();
        set.sort();
        let mut want = vec![r4, b10, b14, a22, a25];
        want.sort();
        assert_eq!(set, want);
        assert!(!visited.contains(&q));
        let path_members: FxHashSet<NodeId> = visited.into_iter().filter(|x| *x != r4).collect();
        assert_eq!(path_members, [b10, b14, a22, a25].into_iter().collect());
        assert_eq!(g.credit(stranger), Err(KadError::NotInGraph(stranger)));
    }

    #[test]
    fn credit_handles_cycles_and_leaves() {
        let (q, a, b) = (NodeId(1), NodeId(2), NodeId(3));
        let mut g = LookupGraph::new(q);
        g.step(true, a, &[b]);
        g.step(false, b, &[a]);
        let mut got = g.credit(b).unwrap();
        got.sort();
        assert_eq!(got, vec![a, b]);
        let mut lone = LookupGraph::new(q);
        lone.step(true, a, &[]);
        assert_eq!(lone.credit(a).unwrap(), vec![a]);
    }

    fn tiny(mode: Mode, k: usize) -> KadNetwork {
        let space = IdSpace::new(8).unwrap();
        let members: Vec<(NodeId, bool)> = (0..=255u64).step_by(3).map(|v| (NodeId(v), false)).collect();
        let params = KadParams {
            k,
            mode,
            ..Default::default()
        };
        KadNetwork::from_members(space, &members, params, 1.0, 3).unwrap()
    }

    #[test]
    fn eviction_policies() {
        // bucket 0 of node 0 holds ids with the top bit set
        for mode in [Mode::Regular, Mode::Collaborative] {
            let mut net = tiny(mode, 3);
            let owner = NodeId(0);
            for id in [129u64, 132, 135] {
                net.bucket_insert(owner, NodeId(id)).unwrap();
            }
            let oi = net.idx(owner).unwrap();
            // scores 5/.., 3/.., 3/..: 129 strong, 132 and 135 tied weaker
            let st = &mut net.nodes[oi].store;
            for _ in 0..5 {
                st.record_path(&[NodeId(129)], true).unwrap();
            }
            for id in [132u64, 135] {
                for _ in 0..3 {
                    st.record_path(&[NodeId(id)], true).unwrap();
                }
                for _ in 0..2 {
                    st.record_path(&[NodeId(id)], false).unwrap();
                }
            }
            // make 129 the least recently seen
            net.touch(oi, NodeId(132));
            net.touch(oi, NodeId(135));
            net.bucket_insert(owner, NodeId(138)).unwrap();
            let ids: Vec<u64> = net.nodes[oi].buckets[0].iter().map(|c| c.id.0).collect();
            match mode {
                Mode::Regular => assert!(!ids.contains(&129), "{ids:?}"),
                _ => {
                    assert!(ids.contains(&129) && !ids.contains(&132), "{ids:?}");
                }
            }
            assert_eq!(ids.len(), 3);
        }
    }

    #[test]
    fn append_when_not_full() {
        let mut net = tiny(Mode::Collaborative, 3);
        net.bucket_insert(NodeId(0), NodeId(129)).unwrap();
        assert!(net.in_buckets(NodeId(0), NodeId(129)));
        assert_eq!(net.bucket_insert(NodeId(0), NodeId(0)), Err(KadError::SelfInsert));
    }

    #[test]
    fn replica_roots_match_brute_force() {
        let net = KadNetwork::build(IdSpace::new(16).unwrap(), 500, 0.2, KadParams::default(), 1.0, 4).unwrap();
        for key in [0u64, 777, 40_000, 65_535] {
            let key = NodeId(key);
            let mut brute: Vec<NodeId> = net.live_ids().to_vec();
            brute.sort_by_key(|x| x.0 ^ key.0);
            let want: Vec<NodeId> = brute
                .into_iter()
                .take(10)
                .filter(|r| net.space.shared_prefix_bits(*r, key) >= 8)
                .collect();
            assert_eq!(net.replica_roots(key), want);
        }
    }

    #[test]
    fn honest_network_succeeds_after_warmup() {
        let mut net = KadNetwork::build(IdSpace::default(), 400, 0.0, KadParams::default(), 1.0, 9).unwrap();
        net.warmup(5);
        let honest = net.honest_ids().to_vec();
        let mut fails = 0;
        for (i, q) in honest.iter().enumerate() {
            let key = NodeId((i as u64).wrapping_mul(0x9E37_79B9) & 0xFFFF_FFFF);
            fails += usize::from(!net.lookup(*q, key, false).unwrap().success);
        }
        assert_eq!(fails, 0);
        assert!(net.check_bucket_invariants());
        assert_eq!(net.pollution_fraction(), 0.0);
    }

    #[test]
    fn no_warmup_means_empty_buckets() {
        let net = KadNetwork::build(IdSpace::default(), 100, 0.0, KadParams::default(), 1.0, 9).unwrap();
        assert!(net.nodes.iter().all(|n| n.contacts().count() == 0));
    }

    #[test]
    fn probing_is_side_effect_free() {
        let params = KadParams {
            mode: Mode::Collaborative,
            ..Default::default()
        };
        let mut net = KadNetwork::build(IdSpace::default(), 300, 0.2, params, 1.0, 2).unwrap();
        net.warmup(2);
        let before = net.state_fingerprint();
        let honest = net.honest_ids().to_vec();
        for q in honest.iter().take(50) {
            let key = net.random_key();
            net.lookup(*q, key, false).unwrap();
        }
        assert_eq!(net.state_fingerprint(), before);
    }

    #[test]
    fn credit_increments_bounded_by_vertices() {
        let params = KadParams {
            mode: Mode::Collaborative,
            ..Default::default()
        };
        let mut net = KadNetwork::build(IdSpace::default(), 300, 0.1, params, 0.5, 6).unwrap();
        net.warmup(2);
        let q = net.honest_ids()[0];
        for _ in 0..30 {
            let key = net.random_key();
            let out = net.lookup(q, key, false).unwrap();
            if let Some(root) = out.closest {
                let credited = out.graph.credit(root).unwrap();
                let unique: FxHashSet<NodeId> = credited.iter().copied().collect();
                assert_eq!(unique.len(), credited.len());
                assert!(credited.len() < out.graph.vertices().len());
            }
        }
    }

    #[test]
    fn pollution_counts_malicious_entries() {
        let space = IdSpace::new(8).unwrap();
        let members = vec![(NodeId(0), false), (NodeId(200), true), (NodeId(100), false)];
        let mut net = KadNetwork::from_members(space, &members, KadParams::default(), 1.0, 1).unwrap();
        net.bucket_insert(NodeId(0), NodeId(200)).unwrap();
        assert_eq!(net.pollution_fraction(), 1.0);
        net.bucket_insert(NodeId(0), NodeId(100)).unwrap();
        assert_eq!(net.pollution_fraction(), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bucket_prefix_invariant(inserts in proptest::collection::vec((0usize..40, 0usize..40), 1..60), reds in any::<bool>()) {
            let space = IdSpace::new(10).unwrap();
            let members: Vec<(NodeId, bool)> = (0..40u64).map(|i| (NodeId(i * 25 + 3), i % 5 == 0)).collect();
            let mode = if reds { Mode::Collaborative } else { Mode::Regular };
            let params = KadParams { k: 3, mode, ..Default::default() };
            let mut net = KadNetwork::from_members(space, &members, params, 1.0, 1).unwrap();
            for (a, b) in inserts {
                let (a, b) = (members[a].0, members[b].0);
                if a != b {
                    net.bucket_insert(a, b).unwrap();
                }
                prop_assert!(net.check_bucket_invariants());
            }
        }

        #[test]
        fn single_credit_per_vertex(edges in proptest::collection::vec((0u64..12, proptest::collection::vec(0u64..12, 0..4)), 1..20)) {
            let q = NodeId(100);
            let mut g = LookupGraph::new(q);
            for (i, (a, rs)) in edges.iter().enumerate() {
                let rs: Vec<NodeId> = rs.iter().map(|x| NodeId(*x)).collect();
                g.step(i < 3, NodeId(*a), &rs);
            }
            for v in g.vertices().to_vec() {
                if v == q { continue; }
                let c = g.credit(v).unwrap();
                let set: FxHashSet<NodeId> = c.iter().copied().collect();
                prop_assert_eq!(set.len(), c.len());
                prop_assert!(!set.contains(&q));
                prop_assert!(c.len() < g.vertices().len());
            }
        }
    }
}
