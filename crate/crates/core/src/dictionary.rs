//! Term dictionary: deterministic translation between RDF term strings and
//! fixed-width 32-bit identifiers.
//!
//! Every peer hashes independently and arrives at the same identifier for the
//! same term, so no coordination is needed at insert time. Collisions are
//! detected locally and surfaced as errors, never merged.

use std::collections::HashMap;
use std::sync::RwLock;

use thiserror::Error;

/// A dictionary-encoded RDF term.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct TermId(pub u32);

impl std::fmt::Display for TermId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DictError {
    #[error("hash collision: {existing:?} and {new:?} both map to {id}")]
    Collision {
        existing: String,
        new: String,
        id: TermId,
    },
    #[error("unknown term id {0}")]
    UnknownId(TermId),
}

/// 32-bit FNV-1a over the UTF-8 bytes of a term.
pub fn hash_term(term: &str) -> TermId {
    const OFFSET: u32 = 0x811c_9dc5;
    const PRIME: u32 = 0x0100_0193;
    let mut h = OFFSET;
    for &b in term.as_bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(PRIME);
    }
    TermId(h)
}

#[derive(Default)]
struct Store {
    forward: HashMap<String, TermId>,
    reverse: HashMap<TermId, String>,
}

/// Concurrent-read, exclusive-write term store. Shared between the peer's
/// message handler and query executors.
#[derive(Default)]
pub struct Dictionary {
    store: RwLock<Store>,
}

impl Dictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Hash `term` and register the pair locally.
    pub fn encode(&self, term: &str) -> Result<TermId, DictError> {
        let id = hash_term(term);
        let mut store = self.store.write().unwrap();
        match store.reverse.get(&id) {
            Some(existing) if existing != term => Err(DictError::Collision {
                existing: existing.clone(),
                new: term.to_owned(),
                id,
            }),
            Some(_) => Ok(id),
            None => {
                store.forward.insert(term.to_owned(), id);
                store.reverse.insert(id, term.to_owned());
                Ok(id)
            }
        }
    }

    /// Look up the original string of a registered id.
    pub fn decode(&self, id: TermId) -> Result<String, DictError> {
        self.store
            .read()
            .unwrap()
            .reverse
            .get(&id)
            .cloned()
            .ok_or(DictError::UnknownId(id))
    }

    pub fn contains(&self, id: TermId) -> bool {
        self.store.read().unwrap().reverse.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.store.read().unwrap().reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Install a (term, id) pair learned from a remote peer's dictionary.
    /// The id must be the term's own hash; anything else is rejected.
    pub fn import(&self, term: &str, id: TermId) -> Result<(), DictError> {
        if hash_term(term) != id {
            return Err(DictError::UnknownId(id));
        }
        self.encode(term).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Hand-verified against the FNV-1a reference algorithm.
    const OBSERVATION_IRI: &str = "http://www.w3.org/ns/sosa/Observation";
    const OBSERVATION_HASH: u32 = 0x36b8_69ce;

    // Brute-forced 32-bit FNV-1a collision over short alphanumeric strings.
    const COLLIDE_A: &str = "gwzx";
    const COLLIDE_B: &str = "16cd";
    const COLLIDE_HASH: u32 = 0x6b3e_8b99;

    #[test]
    fn fnv1a_reference_value() {
        assert_eq!(hash_term(OBSERVATION_IRI), TermId(OBSERVATION_HASH));
    }

    #[test]
    fn encode_is_deterministic() {
        let d = Dictionary::new();
        let a = d.encode("ex:s1").unwrap();
        let b = d.encode("ex:s1").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roundtrip() {
        let d = Dictionary::new();
        let id = d.encode("ex:s1").unwrap();
        assert_eq!(d.decode(id).unwrap(), "ex:s1");
    }

    #[test]
    fn unknown_id_on_empty_store() {
        let d = Dictionary::new();
        assert_eq!(d.decode(TermId(7)), Err(DictError::UnknownId(TermId(7))));
    }

    #[test]
    fn collision_pair_is_detected() {
        assert_eq!(hash_term(COLLIDE_A), TermId(COLLIDE_HASH));
        assert_eq!(hash_term(COLLIDE_B), TermId(COLLIDE_HASH));
        let d = Dictionary::new();
        d.encode(COLLIDE_A).unwrap();
        let err = d.encode(COLLIDE_B).unwrap_err();
        assert!(matches!(err, DictError::Collision { .. }));
        // the store still maps the id to the first registration
        assert_eq!(d.decode(TermId(COLLIDE_HASH)).unwrap(), COLLIDE_A);
    }

    #[test]
    fn import_rejects_mismatched_id() {
        let d = Dictionary::new();
        assert!(d.import("ex:s1", TermId(1)).is_err());
        assert!(d.import("ex:s1", hash_term("ex:s1")).is_ok());
    }
}
