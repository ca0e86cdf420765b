//! The distributed layer: peer identity and path, level-indexed routing
//! tables, prefix-routing lookup with interval multicast, the pairwise
//! exchange protocol that builds the trie, replication to factor two, and the
//! peer state machine.

mod peer;
pub mod simnet;

pub use peer::{Peer, PeerConfig, PeerStatus};

use crate::keyspace::BitKey;
use thiserror::Error;

/// Network-unique peer identifier. Transport addresses are carried
/// separately; see [`PeerInfo`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct PeerId(pub u64);

impl PeerId {
    /// Sentinel id for an external client (query CLI, loader) that is not
    /// part of the overlay. Responses to it leave the peer network.
    pub const CLIENT: PeerId = PeerId(u64::MAX);
}

impl std::fmt::Display for PeerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "peer{}", self.0)
    }
}

/// A peer reference with its transport address.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PeerInfo {
    pub id: PeerId,
    pub addr: String,
}

/// Peer lifecycle. Transitions only run forward.
#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord)]
pub enum Phase {
    Bootstrapping,
    Exchanging,
    Replicating,
    Running,
}

impl Phase {
    pub fn tag(self) -> u8 {
        match self {
            Phase::Bootstrapping => 0,
            Phase::Exchanging => 1,
            Phase::Replicating => 2,
            Phase::Running => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Phase> {
        match t {
            0 => Some(Phase::Bootstrapping),
            1 => Some(Phase::Exchanging),
            2 => Some(Phase::Replicating),
            3 => Some(Phase::Running),
            _ => None,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Bootstrapping => "bootstrapping",
            Phase::Exchanging => "exchanging",
            Phase::Replicating => "replicating",
            Phase::Running => "running",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OverlayError {
    #[error("no route: empty reference list at level {0}")]
    NoRoute(u32),
    #[error("bootstrap timed out, no seed responded")]
    BootstrapTimeout,
    #[error("exchange partner unavailable")]
    PartnerUnavailable,
}

/// Maximum references kept per routing level. Routing picks uniformly at
/// random among them.
pub const REFS_PER_LEVEL: usize = 2;

/// Per-peer, level-indexed references to peers in the opposite subtree at
/// each prefix depth. `levels.len()` always equals the path length.
#[derive(Clone, Default, Debug)]
pub struct RoutingTable {
    levels: Vec<Vec<PeerId>>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn level(&self, i: u32) -> &[PeerId] {
        &self.levels[i as usize]
    }

    pub fn levels(&self) -> &[Vec<PeerId>] {
        &self.levels
    }

    pub fn resize(&mut self, path_len: u32) {
        self.levels.resize(path_len as usize, Vec::new());
    }

    /// Add a reference at `level` if there is room. Returns true if added.
    pub fn add(&mut self, level: u32, peer: PeerId) -> bool {
        let refs = &mut self.levels[level as usize];
        if refs.contains(&peer) || refs.len() >= REFS_PER_LEVEL {
            return false;
        }
        refs.push(peer);
        refs.sort();
        true
    }

    /// Replace the references at `level` wholesale (fixture setup).
    pub fn set_level(&mut self, level: u32, refs: Vec<PeerId>) {
        self.levels[level as usize] = refs;
    }

    /// Drop references that no longer satisfy the level invariant against
    /// `resolve`, which maps a peer to its currently known path.
    pub fn retain_consistent(&mut self, own_path: &BitKey, resolve: impl Fn(PeerId) -> Option<BitKey>) {
        for (i, refs) in self.levels.iter_mut().enumerate() {
            let want = own_path.prefix(i as u32).child(!own_path.bit(i as u32));
            refs.retain(|p| match resolve(*p) {
                Some(path) => want.is_prefix_of(&path) || path.is_prefix_of(&want),
                None => true,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_table_caps_refs() {
        let mut rt = RoutingTable::new();
        rt.resize(1);
        assert!(rt.add(0, PeerId(1)));
        assert!(!rt.add(0, PeerId(1)));
        assert!(rt.add(0, PeerId(2)));
        assert!(!rt.add(0, PeerId(3)));
        assert_eq!(rt.level(0), &[PeerId(1), PeerId(2)]);
    }
}
