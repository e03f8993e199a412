//! Reputation-enhanced redundant DHT lookups.
//!
//! Two simulated overlays share one reputation layer:
//!
//! * [`halonet`]: a Chord ring with redundant knuckle searches, plus per-finger
//!   k-buckets, longer successor lists and reputation-guided hop selection.
//! * [`kadnet`]: an iterative Kademlia overlay whose lookups build a graph of
//!   who-returned-whom, crediting every node on a path to the found root.
//!
//! [`sharedrep`] adds score exchange between nodes that share a finger,
//! [`analysis`] holds the numerical attack models, and [`harness`] runs the
//! experiments and writes CSV.

pub mod adversary;
pub mod analysis;
pub mod harness;
pub mod halonet;
pub mod idspace;
pub mod kadnet;
pub mod reputation;
pub mod sharedrep;

pub use idspace::{IdSpace, NodeId};

/// Boosting mode shared by both overlays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Plain protocol without reputation.
    Regular,
    /// Only the querying node applies its reputation.
    ABoost,
    /// Every honest hop applies its own reputation.
    Collaborative,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "regular" => Ok(Mode::Regular),
            "aboost" | "a-boost" => Ok(Mode::ABoost),
            "collaborative" | "collab" => Ok(Mode::Collaborative),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}
