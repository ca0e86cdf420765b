//! In-process network: the full set of peers driven by the deterministic
//! simulator. Used by tests, experiments and the CLI's simulation commands.

use std::collections::{BTreeMap, HashMap};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dictionary::TermId;
use crate::keyspace::{triple_key, BitKey, KeyInterval, Layout, TripleId};
use crate::network::message::{Envelope, Message};
use crate::network::sim::{SimConfig, SimError, Simulator, TraceEvent};
use crate::overlay::{Peer, PeerConfig, PeerId, PeerInfo, Phase};
use crate::storage::BlockEntry;

/// Consecutive network-wide no-op exchange rounds before construction halts.
pub const QUIESCENT_ROUNDS: u32 = 3;
/// Hard cap on exchange rounds; hitting it is reported as an error.
pub const MAX_EXCHANGE_ROUNDS: u32 = 512;

#[derive(Debug, thiserror::Error)]
pub enum SimNetError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("construction did not converge within {0} exchange rounds")]
    NoConvergence(u32),
    #[error("no response to client request {0}")]
    NoResponse(u64),
    #[error("peer replied with error {code}: {detail}")]
    Remote { code: u8, detail: String },
}

/// Construction statistics from [`SimNetwork::converge`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ConvergenceReport {
    pub exchange_rounds: u32,
    pub replication_rounds: u32,
    pub elapsed_us: u64,
    pub messages: u64,
    pub bytes: u64,
}

pub struct SimNetwork {
    pub sim: Simulator,
    peers: Vec<Peer>,
    index: HashMap<PeerId, usize>,
    rng: ChaCha8Rng,
    next_client_rid: u64,
    /// Responses addressed to [`PeerId::CLIENT`].
    outbox: Vec<Envelope>,
}

impl SimNetwork {
    pub fn new(n: usize, peer_cfg: PeerConfig, sim_cfg: SimConfig) -> Self {
        let seed = sim_cfg.seed;
        let mut peers = Vec::with_capacity(n);
        let mut index = HashMap::new();
        for i in 0..n {
            let id = PeerId(i as u64);
            index.insert(id, i);
            peers.push(Peer::new(id, format!("sim:{i}"), peer_cfg, seed));
        }
        SimNetwork {
            sim: Simulator::new(sim_cfg),
            peers,
            index,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4e45_545f_0000),
            next_client_rid: 0,
            outbox: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn peer(&self, i: usize) -> &Peer {
        &self.peers[i]
    }

    pub fn peer_mut(&mut self, i: usize) -> &mut Peer {
        &mut self.peers[i]
    }

    pub fn peer_by_id(&self, id: PeerId) -> Option<&Peer> {
        self.index.get(&id).map(|&i| &self.peers[i])
    }

    pub fn infos(&self) -> Vec<PeerInfo> {
        self.peers.iter().map(|p| p.info()).collect()
    }

    // ----- message pump ----------------------------------------------------

    fn dispatch(&mut self, env: Envelope) {
        if env.to == PeerId::CLIENT {
            self.outbox.push(env);
            return;
        }
        let Some(&i) = self.index.get(&env.to) else {
            log::warn!("dropping message to unknown {}", env.to);
            return;
        };
        for out in self.peers[i].handle_message(env) {
            self.sim.send(out);
        }
    }

    /// Deliver until the queue drains.
    pub fn pump(&mut self) -> Result<(), SimError> {
        while let Some(env) = self.sim.next_delivery()? {
            self.dispatch(env);
        }
        Ok(())
    }

    fn send_all(&mut self, envs: Vec<Envelope>) {
        for env in envs {
            self.sim.send(env);
        }
    }

    // ----- construction ----------------------------------------------------

    /// Message-driven bootstrap: every peer greets every other.
    pub fn bootstrap_all(&mut self) -> Result<(), SimError> {
        let infos = self.infos();
        for i in 0..self.peers.len() {
            let envs = self.peers[i].start(&infos);
            self.send_all(envs);
        }
        self.pump()
    }

    /// Run exchange rounds until three consecutive rounds change nothing
    /// network-wide, then replicate every block once and enter Running.
    pub fn converge(&mut self) -> Result<ConvergenceReport, SimNetError> {
        let mut report = ConvergenceReport::default();
        let mut quiet = 0u32;
        // peers sweep their partners cyclically, so a quiet window spanning
        // a whole sweep proves every pair reached a joint fixpoint
        let quiet_rounds = QUIESCENT_ROUNDS.max(self.peers.len() as u32);
        while quiet < quiet_rounds {
            if report.exchange_rounds >= MAX_EXCHANGE_ROUNDS {
                return Err(SimNetError::NoConvergence(report.exchange_rounds));
            }
            report.exchange_rounds += 1;
            for p in &mut self.peers {
                p.changed = false;
            }
            let mut order: Vec<usize> = (0..self.peers.len()).collect();
            order.shuffle(&mut self.rng);
            for i in order {
                let envs = self.peers[i].initiate_exchange();
                self.send_all(envs);
                self.pump()?;
                let envs = self.peers[i].flush_pending();
                self.send_all(envs);
                self.pump()?;
            }
            if self.peers.iter().any(|p| p.changed) {
                quiet = 0;
            } else {
                quiet += 1;
            }
        }

        for p in &mut self.peers {
            p.begin_replicating();
        }
        loop {
            report.replication_rounds += 1;
            let mut any = false;
            for i in 0..self.peers.len() {
                let envs = self.peers[i].replication_round();
                any |= !envs.is_empty();
                self.send_all(envs);
            }
            self.pump()?;
            if !any || report.replication_rounds > 64 {
                break;
            }
        }
        for p in &mut self.peers {
            p.finish_replicating();
        }
        report.elapsed_us = self.sim.now_us();
        report.messages = self.sim.messages_sent;
        report.bytes = self.sim.bytes_sent;
        Ok(report)
    }

    /// Full construction: bootstrap, exchange until quiescent, replicate.
    pub fn run_until_quiescent(&mut self) -> Result<ConvergenceReport, SimNetError> {
        self.bootstrap_all()?;
        self.converge()
    }

    // ----- direct (non-message) build, for tests and experiments -----------

    /// Skip construction: assign every peer a fixed `k`-bit path, fill the
    /// routing tables, and mark the network running. Requires `2^k` peers.
    pub fn build_balanced(&mut self, k: u32) {
        assert_eq!(self.peers.len(), 1usize << k, "need 2^k peers");
        let infos = self.infos();
        let paths: Vec<BitKey> = (0..self.peers.len())
            .map(|i| BitKey::new(i as u128, k))
            .collect();
        for (i, p) in self.peers.iter_mut().enumerate() {
            p.path = paths[i];
            p.routing.resize(k);
            for info in &infos {
                p.learn(&info.clone());
            }
            for level in 0..k {
                let want = paths[i].prefix(level).child(!paths[i].bit(level));
                for (j, cand) in paths.iter().enumerate() {
                    if j != i && want.is_prefix_of(cand) {
                        p.routing.add(level, PeerId(j as u64));
                    }
                }
            }
            for (j, path) in paths.iter().enumerate() {
                if j != i {
                    p.peer_paths.insert(PeerId(j as u64), *path);
                }
            }
            p.phase = Phase::Running;
        }
    }

    /// Insert an encoded triple directly at its owners (one per layout).
    /// Only valid after the partition is fixed.
    pub fn load_triple(&mut self, t: &TripleId) {
        for layout in Layout::ALL {
            self.load_triple_layout(t, layout);
        }
    }

    pub fn load_triple_layout(&mut self, t: &TripleId, layout: Layout) {
        let key = triple_key(t, layout);
        let m = self.peers[0].cfg.m;
        let v = key.val(m);
        let i = self
            .peers
            .iter()
            .position(|p| p.interval().contains(v))
            .expect("intervals partition the key space");
        self.peers[i].storage.insert_triple_layout(t, layout);
    }

    /// Register a dictionary entry at every peer (desk-scale loading).
    pub fn load_term(&mut self, term: &str) -> TermId {
        let mut id = None;
        for p in &self.peers {
            id = Some(p.dict.encode(term).expect("dictionary collision"));
        }
        id.expect("no peers")
    }

    /// Replicate every owned block once without messages (test setup).
    pub fn replicate_direct(&mut self) {
        let n = self.peers.len();
        if n < 2 {
            return;
        }
        for i in 0..n {
            let entries: Vec<BlockEntry> = Layout::ALL
                .iter()
                .flat_map(|&l| self.peers[i].storage.owned_entries(l))
                .collect();
            let j = (i + 1) % n;
            for e in entries {
                self.peers[j].storage.import_replica_entry(e);
            }
        }
    }

    // ----- client operations ----------------------------------------------

    fn client_rid(&mut self) -> u64 {
        self.next_client_rid += 1;
        // keep client request ids out of the peers' own id space
        self.next_client_rid | (1 << 63)
    }

    fn await_response(&mut self, rid: u64) -> Result<Envelope, SimNetError> {
        self.pump()?;
        let pos = self
            .outbox
            .iter()
            .position(|e| e.request_id == rid)
            .ok_or(SimNetError::NoResponse(rid))?;
        let env = self.outbox.remove(pos);
        if let Message::Error { code, detail } = &env.msg {
            return Err(SimNetError::Remote {
                code: *code,
                detail: detail.clone(),
            });
        }
        Ok(env)
    }

    /// Ask peer `i` for the blocks intersecting `range`; returns the
    /// deduplicated entries and the deepest hop count in the aggregation
    /// tree.
    pub fn lookup_from(
        &mut self,
        i: usize,
        layout: Layout,
        range: KeyInterval,
    ) -> Result<(Vec<BlockEntry>, u32, bool), SimNetError> {
        let rid = self.client_rid();
        let envs = self.peers[i].start_lookup(PeerId::CLIENT, "client", rid, layout, range);
        self.send_all(envs);
        let env = self.await_response(rid)?;
        match env.msg {
            Message::BlockEntriesResponse {
                entries,
                max_hop,
                partial,
            } => Ok((entries, max_hop, partial)),
            other => Err(SimNetError::Remote {
                code: 0,
                detail: format!("unexpected response tag {}", other.tag()),
            }),
        }
    }

    fn client_call(&mut self, to: PeerId, msg: Message) -> Result<Envelope, SimNetError> {
        let rid = self.client_rid();
        self.sim.send(Envelope {
            from: PeerId::CLIENT,
            from_addr: "client".into(),
            to,
            request_id: rid,
            msg,
        });
        self.await_response(rid)
    }

    /// Fetch the tuples of one block from its origin peer.
    pub fn fetch_from(
        &mut self,
        origin: PeerId,
        layout: Layout,
        molecule_key: BitKey,
        range: KeyInterval,
    ) -> Result<(Vec<TripleId>, bool), SimNetError> {
        let env = self.client_call(
            origin,
            Message::FetchTriples {
                layout,
                molecule_key,
                range,
            },
        )?;
        match env.msg {
            Message::TriplesResponse { triples, partial } => Ok((triples, partial)),
            other => Err(SimNetError::Remote {
                code: 0,
                detail: format!("unexpected response tag {}", other.tag()),
            }),
        }
    }

    pub fn dict_from(
        &mut self,
        peer: PeerId,
        ids: Vec<TermId>,
    ) -> Result<Vec<(TermId, String)>, SimNetError> {
        let env = self.client_call(peer, Message::DictLookup { ids })?;
        match env.msg {
            Message::DictResponse { entries } => Ok(entries),
            other => Err(SimNetError::Remote {
                code: 0,
                detail: format!("unexpected response tag {}", other.tag()),
            }),
        }
    }

    /// Insert string triples through peer `i`, routing messages as needed.
    pub fn insert_from(
        &mut self,
        i: usize,
        triples: Vec<(String, String, String)>,
    ) -> Result<u32, SimNetError> {
        let env = self.client_call(PeerId(i as u64), Message::InsertTriples { triples })?;
        match env.msg {
            Message::InsertAck { count } => Ok(count),
            other => Err(SimNetError::Remote {
                code: 0,
                detail: format!("unexpected response tag {}", other.tag()),
            }),
        }
    }

    // ----- invariant censuses ----------------------------------------------

    /// True when the peers' intervals are pairwise disjoint and cover the
    /// whole key space.
    pub fn intervals_partition(&self) -> bool {
        let m = self.peers[0].cfg.m;
        let mut ivs: Vec<KeyInterval> = self.peers.iter().map(|p| p.interval()).collect();
        ivs.sort_by_key(|iv| iv.lo);
        let mut expect = 0u128;
        for iv in &ivs {
            if iv.lo != expect {
                return false;
            }
            expect = iv.hi;
        }
        expect == KeyInterval::full(m).hi
    }

    /// Copies of each owned block across the network: the origin's copy
    /// plus matching replica entries elsewhere.
    pub fn replica_census(&self) -> BTreeMap<(u8, u128, u64), u32> {
        let mut census = BTreeMap::new();
        for p in &self.peers {
            for layout in Layout::ALL {
                for e in p.storage.owned_entries(layout) {
                    let k = (layout.tag(), e.molecule_key.val(96), e.origin.0);
                    *census.entry(k).or_insert(0) += 1;
                }
            }
            for e in p.storage.replica_entries() {
                let k = (e.layout.tag(), e.molecule_key.val(96), e.origin.0);
                *census.entry(k).or_insert(0) += 1;
            }
        }
        census
    }

    /// Every routing reference must point into the opposite subtree at its
    /// level, judged by the referenced peer's actual current path.
    pub fn routing_consistent(&self) -> bool {
        for p in &self.peers {
            for (level, refs) in p.routing.levels().iter().enumerate() {
                let want = p.path.prefix(level as u32).child(!p.path.bit(level as u32));
                for r in refs {
                    let Some(target) = self.peer_by_id(*r) else {
                        return false;
                    };
                    if !(want.is_prefix_of(&target.path) || target.path.is_prefix_of(&want)) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// All triples owned anywhere under `layout`, flattened (test oracle).
    pub fn global_scan(&self, layout: Layout) -> Vec<TripleId> {
        let full = KeyInterval::full(self.peers[0].cfg.m);
        let mut out: Vec<TripleId> = self
            .peers
            .iter()
            .flat_map(|p| p.storage.scan_range(layout, &full))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.sim.trace
    }
}
