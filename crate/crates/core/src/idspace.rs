//! Identifier-space arithmetic shared by the Chord and Kademlia flavors.
//!
//! Identifiers live in `[0, 2^bits)`. Chord measures clockwise ring distance,
//! Kademlia measures the integer value of the XOR of two identifiers.

use std::fmt;

use thiserror::Error;

/// Default identifier width used by the simulators.
pub const DEFAULT_BITS: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdError {
    #[error("identifier width must be in 1..=64, got {0}")]
    InvalidWidth(u32),
    #[error("identifier {value} does not fit in a {bits}-bit space")]
    OutOfSpace { value: u64, bits: u32 },
    #[error("candidate set is empty")]
    EmptyCandidates,
}

/// A point in the identifier space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub u64);

impl NodeId {
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// A `bits`-wide identifier space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdSpace {
    bits: u32,
    mask: u64,
}

impl Default for IdSpace {
    fn default() -> Self {
        Self::new(DEFAULT_BITS).expect("default width is valid")
    }
}

impl IdSpace {
    pub fn new(bits: u32) -> Result<Self, IdError> {
        if bits == 0 || bits > 64 {
            return Err(IdError::InvalidWidth(bits));
        }
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        Ok(Self { bits, mask })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    /// Number of identifiers in the space, `2^bits`.
    pub fn size(&self) -> u128 {
        1u128 << self.bits
    }

    pub fn id(&self, value: u64) -> Result<NodeId, IdError> {
        if value & !self.mask != 0 {
            return Err(IdError::OutOfSpace {
                value,
                bits: self.bits,
            });
        }
        Ok(NodeId(value))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 & !self.mask == 0
    }

    /// `id + offset (mod 2^bits)`.
    pub fn add(&self, id: NodeId, offset: u64) -> NodeId {
        NodeId(id.0.wrapping_add(offset) & self.mask)
    }

    /// `id - offset (mod 2^bits)`.
    pub fn sub(&self, id: NodeId, offset: u64) -> NodeId {
        NodeId(id.0.wrapping_sub(offset) & self.mask)
    }

    /// `2^i` for an offset index `i < bits`.
    pub fn pow2(&self, i: u32) -> u64 {
        debug_assert!(i < self.bits);
        1u64 << i
    }

    /// Clockwise distance from `a` to `b`: `(b - a) mod 2^bits`.
    pub fn ring_distance(&self, a: NodeId, b: NodeId) -> u64 {
        b.0.wrapping_sub(a.0) & self.mask
    }

    /// Whether `x` lies in the half-open clockwise interval `(from, to]`.
    ///
    /// When `from == to` the interval is the whole ring.
    pub fn in_half_open(&self, x: NodeId, from: NodeId, to: NodeId) -> bool {
        let dx = self.ring_distance(from, x);
        let dt = self.ring_distance(from, to);
        if dt == 0 {
            return true;
        }
        dx != 0 && dx <= dt
    }

    pub fn xor_distance(&self, a: NodeId, b: NodeId) -> u64 {
        (a.0 ^ b.0) & self.mask
    }

    /// Length of the common most-significant-bit prefix of `a` and `b`.
    pub fn shared_prefix_bits(&self, a: NodeId, b: NodeId) -> u32 {
        let x = self.xor_distance(a, b);
        if x == 0 {
            self.bits
        } else {
            // leading zeros counted within the `bits`-wide window
            x.leading_zeros() - (64 - self.bits)
        }
    }
}

/// The candidate with minimal clockwise distance from `target`.
pub fn clockwise_closest<I>(space: &IdSpace, target: NodeId, candidates: I) -> Result<NodeId, IdError>
where
    I: IntoIterator<Item = NodeId>,
{
    candidates
        .into_iter()
        .min_by_key(|c| space.ring_distance(target, *c))
        .ok_or(IdError::EmptyCandidates)
}

/// The `count` identifiers of a sorted slice that are XOR-closest to `key`,
/// ordered from closest to farthest.
///
/// Identifiers sharing at least `p` leading bits with `key` form a contiguous
/// run of the sorted slice, so only that run needs to be ranked.
pub fn xor_closest(space: &IdSpace, sorted: &[NodeId], key: NodeId, count: usize) -> Vec<NodeId> {
    let count = count.min(sorted.len());
    if count == 0 {
        return Vec::new();
    }
    let bits = space.bits();
    let mut range = (0, sorted.len());
    for p in (0..=bits).rev() {
        let (lo, hi) = prefix_range(space, sorted, key, p);
        if hi - lo >= count {
            range = (lo, hi);
            break;
        }
    }
    let mut run: Vec<NodeId> = sorted[range.0..range.1].to_vec();
    run.sort_unstable_by_key(|id| space.xor_distance(*id, key));
    run.truncate(count);
    run
}

/// Index range of `sorted` whose members share the top `p` bits with `key`.
fn prefix_range(space: &IdSpace, sorted: &[NodeId], key: NodeId, p: u32) -> (usize, usize) {
    let bits = space.bits();
    let low_bits = bits - p;
    let low_mask = if low_bits == 64 {
        u64::MAX
    } else {
        (1u64 << low_bits) - 1
    };
    let first = key.0 & !low_mask & space.mask();
    let last = first | (low_mask & space.mask());
    let lo = sorted.partition_point(|id| id.0 < first);
    let hi = sorted.partition_point(|id| id.0 <= last);
    (lo, hi)
}
