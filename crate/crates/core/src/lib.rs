//! A peer-to-peer RDF triple store over a binary-trie overlay.
//!
//! Triples are dictionary-encoded into three 32-bit component identifiers and
//! indexed under the SPO, POS and OSP layouts. Each peer stores sorted runs of
//! triples (molecules) in a physical layer, summarised by block entries in a
//! buffer layer, and owns a bit-prefix partition of the 96-bit key space. A
//! prefix-routing overlay locates matching blocks anywhere in the network;
//! star-shaped basic graph patterns are answered with bind joins.
//!
//! The crate ships two interchangeable transports: a deterministic
//! discrete-event simulator (used by the experiment harness and tests) and a
//! length-prefixed TCP transport for real deployments.

pub mod dictionary;
pub mod experiment;
pub mod keyspace;
pub mod network;
pub mod ntriples;
pub mod overlay;
pub mod query;
pub mod storage;

pub use dictionary::{Dictionary, TermId};
pub use keyspace::{BitKey, KeyInterval, Layout, TripleId};
pub use overlay::{PeerId, Phase};
