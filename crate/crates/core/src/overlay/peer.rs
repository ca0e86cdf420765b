//! The peer state machine. `handle_message` is the single state mutator:
//! given the current state and one inbound envelope it produces the next
//! state and the outbound messages, which is what makes the deterministic
//! simulator possible.

use std::collections::{BTreeMap, HashMap};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dictionary::{Dictionary, TermId};
use crate::keyspace::{triple_key, BitKey, KeyInterval, Layout, TripleId, TRIPLE_KEY_BITS};
use crate::network::message::{Envelope, Message};
use crate::overlay::{OverlayError, PeerId, PeerInfo, Phase, RoutingTable};
use crate::storage::{BlockEntry, Molecule, PeerStorage, StorageError};

#[derive(Clone, Copy, Debug)]
pub struct PeerConfig {
    /// Maximal key length; 96 in production, smaller in trie fixtures.
    pub m: u32,
    /// Path split threshold: extend when a pair's combined block count
    /// exceeds this.
    pub split_blocks: usize,
    /// Global replication factor (copies per block, including the origin).
    pub replication_target: u32,
    /// Molecule split threshold in tuples.
    pub split_tuples: usize,
    /// Experiment knob: fraction of local tuples an answering node reads
    /// and transfers per fetch (one retrieval unit). In-range results come
    /// first and are truncated at the unit; if they run short, neighbouring
    /// tuples ride along and the initiator trims them. `None` disables the
    /// unit model and fetches return exactly the in-range tuples.
    pub retrieval_rate: Option<f64>,
}

impl Default for PeerConfig {
    fn default() -> Self {
        PeerConfig {
            m: TRIPLE_KEY_BITS,
            split_blocks: 4,
            replication_target: 2,
            split_tuples: crate::storage::DEFAULT_SPLIT_TUPLES,
            retrieval_rate: None,
        }
    }
}

/// Encoded triples plus the dictionary entries they need, grouped for one
/// insert-forwarding target.
type InsertBatch = (Vec<TripleId>, Vec<(TermId, String)>);

/// In-flight lookup aggregation: local entries are held until every
/// forwarded sub-range answers, then one response goes to the requester.
struct LookupAgg {
    requester: PeerId,
    requester_addr: String,
    request_id: u64,
    remaining: usize,
    entries: Vec<BlockEntry>,
    max_hop: u32,
    partial: bool,
}

#[derive(Clone, Debug)]
pub struct PeerStatus {
    pub phase: Phase,
    pub path: BitKey,
    pub block_counts: [u32; 3],
    pub replica_entries: u32,
    pub replica_deficit: u32,
    pub routing_levels: Vec<u32>,
}

pub struct Peer {
    pub id: PeerId,
    pub addr: String,
    pub cfg: PeerConfig,
    pub phase: Phase,
    pub path: BitKey,
    pub routing: RoutingTable,
    pub storage: PeerStorage,
    pub dict: Dictionary,
    /// Address book: every peer this one has heard of.
    pub known: BTreeMap<PeerId, String>,
    /// Last observed paths of other peers.
    pub peer_paths: HashMap<PeerId, BitKey>,
    /// Molecules this peer holds but no longer owns (its path moved away
    /// from them); flushed toward their owners between exchange rounds.
    pending: Vec<Molecule>,
    /// Set whenever an exchange, flush or insert changes state; the
    /// construction driver clears it to detect no-op rounds.
    pub changed: bool,
    exchange_inflight: bool,
    /// Remaining partners in the current shuffled exchange sweep.
    exchange_cycle: Vec<PeerId>,
    rng: ChaCha8Rng,
    next_request_id: u64,
    aggs: HashMap<u64, LookupAgg>,
    /// child request id -> aggregation id
    agg_children: HashMap<u64, u64>,
    next_agg_id: u64,
    /// (layout tag, molecule key val) -> confirmed remote replicas.
    replica_acks: HashMap<(u8, u128), u32>,
    /// blocks with a replicate request in flight, by child request id.
    replicate_inflight: HashMap<u64, (u8, u128)>,
    /// peers already tried per block.
    replicate_tried: HashMap<(u8, u128), Vec<PeerId>>,
    /// forwarded fetches awaiting a reply: child request id -> (original
    /// requester, original request id).
    fetch_relay: HashMap<u64, (PeerId, u64)>,
}

impl Peer {
    pub fn new(id: PeerId, addr: String, cfg: PeerConfig, seed: u64) -> Self {
        let mut storage = PeerStorage::with_split_threshold(id, cfg.split_tuples);
        storage.set_owner(id);
        Peer {
            id,
            addr,
            cfg,
            phase: Phase::Bootstrapping,
            path: BitKey::EMPTY,
            routing: RoutingTable::new(),
            storage,
            dict: Dictionary::new(),
            known: BTreeMap::new(),
            peer_paths: HashMap::new(),
            pending: Vec::new(),
            changed: false,
            exchange_inflight: false,
            exchange_cycle: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ id.0.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            next_request_id: 0,
            aggs: HashMap::new(),
            agg_children: HashMap::new(),
            next_agg_id: 0,
            replica_acks: HashMap::new(),
            replicate_inflight: HashMap::new(),
            replicate_tried: HashMap::new(),
            fetch_relay: HashMap::new(),
        }
    }

    /// Replace the in-memory store with a log-backed one.
    pub fn attach_storage(&mut self, storage: PeerStorage) {
        self.storage = storage;
        self.storage.set_owner(self.id);
    }

    fn fresh_request_id(&mut self) -> u64 {
        self.next_request_id += 1;
        self.next_request_id
    }

    fn envelope(&self, to: PeerId, request_id: u64, msg: Message) -> Envelope {
        Envelope {
            from: self.id,
            from_addr: self.addr.clone(),
            to,
            request_id,
            msg,
        }
    }

    pub fn info(&self) -> PeerInfo {
        PeerInfo {
            id: self.id,
            addr: self.addr.clone(),
        }
    }

    pub fn interval(&self) -> KeyInterval {
        self.path.interval(self.cfg.m)
    }

    pub fn status(&self) -> PeerStatus {
        PeerStatus {
            phase: self.phase,
            path: self.path,
            block_counts: [
                self.storage.block_count(Layout::Spo) as u32,
                self.storage.block_count(Layout::Pos) as u32,
                self.storage.block_count(Layout::Osp) as u32,
            ],
            replica_entries: self.storage.replica_entry_count() as u32,
            replica_deficit: self.replica_deficit(),
            routing_levels: self.routing.levels().iter().map(|l| l.len() as u32).collect(),
        }
    }

    // ----- bootstrap -------------------------------------------------------

    /// Join the network. With no seeds this peer starts a network of one.
    pub fn start(&mut self, seeds: &[PeerInfo]) -> Vec<Envelope> {
        assert_eq!(self.phase, Phase::Bootstrapping);
        let mut out = Vec::new();
        let live: Vec<&PeerInfo> = seeds.iter().filter(|s| s.id != self.id).collect();
        if live.is_empty() {
            self.phase = Phase::Exchanging;
            return out;
        }
        let me = self.info();
        for seed in live {
            let rid = self.fresh_request_id();
            out.push(self.envelope(
                seed.id,
                rid,
                Message::Bootstrap {
                    me: me.clone(),
                    known: self.known_infos(),
                },
            ));
        }
        out
    }

    fn known_infos(&self) -> Vec<PeerInfo> {
        self.known
            .iter()
            .map(|(id, addr)| PeerInfo {
                id: *id,
                addr: addr.clone(),
            })
            .collect()
    }

    pub(crate) fn learn(&mut self, info: &PeerInfo) {
        if info.id != self.id && info.id != PeerId::CLIENT {
            self.known.insert(info.id, info.addr.clone());
        }
    }

    // ----- routing ---------------------------------------------------------

    /// Where to send a request for `key`: `None` means it falls in this
    /// peer's own interval.
    pub fn route(&mut self, key: &BitKey) -> Result<Option<PeerId>, OverlayError> {
        if self.path.is_prefix_of(key) || key.is_prefix_of(&self.path) {
            return Ok(None);
        }
        let level = self.path.common_prefix_len(key);
        let refs = self.routing.level(level);
        if !refs.is_empty() {
            return Ok(Some(refs[self.rng.gen_range(0..refs.len())]));
        }
        // no reference at this level yet: fall back to the known peer whose
        // cached path is closest to the key, as long as it is strictly
        // closer than we are, so parked inserts keep moving while the
        // routing table is still sparse
        let best = self
            .peer_paths
            .iter()
            .filter(|(p, _)| **p != self.id)
            .map(|(p, path)| (path.common_prefix_len(key), *p))
            .max();
        match best {
            Some((l, p)) if l > level => Ok(Some(p)),
            _ => Err(OverlayError::NoRoute(level)),
        }
    }

    // ----- exchange --------------------------------------------------------

    /// Peers whose last known path overlaps ours, so an exchange with them
    /// can still reshape the trie (split, merge or extend).
    fn overlapping_partners(&self) -> Vec<PeerId> {
        self.peer_paths
            .iter()
            .filter(|(p, path)| {
                **p != self.id
                    && (path.is_prefix_of(&self.path) || self.path.is_prefix_of(path))
            })
            .map(|(p, _)| *p)
            .collect()
    }

    /// Initiate one exchange. During construction this walks the known peers
    /// in a shuffled cycle; once running it only targets peers whose path
    /// still overlaps ours, which resolves duplicated or nested paths left
    /// behind when data arrived mid-construction.
    pub fn initiate_exchange(&mut self) -> Vec<Envelope> {
        if self.exchange_inflight || self.known.is_empty() {
            return Vec::new();
        }
        let partner = match self.phase {
            // cycling rather than sampling independently: every pair then
            // meets at least once per cycle, so a full quiet sweep of the
            // network is a genuine fixpoint
            Phase::Exchanging => loop {
                match self.exchange_cycle.pop() {
                    Some(p) if self.known.contains_key(&p) => break p,
                    Some(_) => continue,
                    None => {
                        self.exchange_cycle = self.known.keys().copied().collect();
                        self.exchange_cycle.shuffle(&mut self.rng);
                        break self.exchange_cycle.pop().expect("known is non-empty");
                    }
                }
            },
            Phase::Running => {
                let overlapping = self.overlapping_partners();
                if overlapping.is_empty() {
                    return Vec::new();
                }
                overlapping[self.rng.gen_range(0..overlapping.len())]
            }
            _ => return Vec::new(),
        };
        self.exchange_inflight = true;
        let rid = self.fresh_request_id();
        vec![self.envelope(
            partner,
            rid,
            Message::ExchangeRequest {
                path: self.path,
                blocks: self.total_blocks() as u32,
            },
        )]
    }

    /// Running-phase anti-entropy probe: exchange with the next peer in the
    /// shuffled sweep regardless of cached paths, and refresh membership at
    /// the same time. Cached paths go stale while the trie is still settling,
    /// and a peer that bootstrapped off a single seed may not even know its
    /// twin exists; the probe repairs both without waiting for overlap to be
    /// observed first.
    pub fn probe_exchange(&mut self) -> Vec<Envelope> {
        if self.phase != Phase::Running || self.exchange_inflight || self.known.is_empty() {
            return Vec::new();
        }
        let partner = loop {
            match self.exchange_cycle.pop() {
                Some(p) if self.known.contains_key(&p) => break p,
                Some(_) => continue,
                None => {
                    self.exchange_cycle = self.known.keys().copied().collect();
                    self.exchange_cycle.shuffle(&mut self.rng);
                    break self.exchange_cycle.pop().expect("known is non-empty");
                }
            }
        };
        self.exchange_inflight = true;
        let rid = self.fresh_request_id();
        let greet_rid = self.fresh_request_id();
        vec![
            self.envelope(
                partner,
                greet_rid,
                Message::Bootstrap {
                    me: self.info(),
                    known: self.known_infos(),
                },
            ),
            self.envelope(
                partner,
                rid,
                Message::ExchangeRequest {
                    path: self.path,
                    blocks: self.total_blocks() as u32,
                },
            ),
        ]
    }

    fn total_blocks(&self) -> usize {
        Layout::ALL
            .iter()
            .map(|&l| self.storage.block_count(l))
            .sum()
    }

    fn dict_entries_for(&self, molecules: &[Molecule]) -> Vec<(TermId, String)> {
        let mut ids: Vec<TermId> = molecules
            .iter()
            .flat_map(|m| m.tuples.iter().flat_map(|t| [t.s, t.p, t.o]))
            .collect();
        ids.sort();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| self.dict.decode(id).ok().map(|s| (id, s)))
            .collect()
    }

    /// Remove owned molecules that no longer match the path, shipping those
    /// inside `partner` and parking the rest in the pending buffer.
    fn collect_for_partner(&mut self, partner: &KeyInterval) -> Vec<Molecule> {
        let path = self.path;
        let strays = self.storage.take_molecules_outside(&path);
        let mut ship = Vec::new();
        for mol in strays {
            if partner.contains(mol.key.val(self.cfg.m)) {
                ship.push(mol);
            } else {
                self.pending.push(mol);
            }
        }
        let m = self.cfg.m;
        let (flush, keep): (Vec<Molecule>, Vec<Molecule>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|mol| partner.contains(mol.key.val(m)));
        self.pending = keep;
        ship.extend(flush);
        ship
    }

    fn handle_exchange_request(
        &mut self,
        from: PeerId,
        from_addr: &str,
        rid: u64,
        their_path: BitKey,
        their_blocks: u32,
    ) -> Vec<Envelope> {
        // running peers keep accepting exchanges: anti-entropy probes resolve
        // duplicated or nested paths left behind when data arrived
        // mid-construction, and a diverging exchange is just a reference swap
        if !(self.phase == Phase::Exchanging || self.phase == Phase::Running) {
            return vec![self.envelope(
                from,
                rid,
                Message::Error {
                    code: 1,
                    detail: format!("exchange rejected in phase {}", self.phase),
                },
            )];
        }
        if self.exchange_inflight {
            return vec![self.envelope(
                from,
                rid,
                Message::Error {
                    code: 2,
                    detail: "exchange in progress, retry".into(),
                },
            )];
        }
        self.learn(&PeerInfo {
            id: from,
            addr: from_addr.to_owned(),
        });

        let my_path = self.path;
        let my_blocks = self.total_blocks() as u32;
        let m = self.cfg.m;

        let (adopt_path, new_my_path, add_ref_level, merge) = if their_path == my_path {
            if (their_blocks + my_blocks) as usize > self.cfg.split_blocks
                && my_path.len() < m
            {
                // split: the higher id takes the '1' subtree
                let their_bit = from > self.id;
                (
                    their_path.child(their_bit),
                    my_path.child(!their_bit),
                    Some(my_path.len()),
                    false,
                )
            } else {
                (their_path, my_path, None, true)
            }
        } else if my_path.is_prefix_of(&their_path) {
            // we are shorter: extend by the opposite of their next bit
            let bit = !their_path.bit(my_path.len());
            (their_path, my_path.child(bit), Some(my_path.len()), false)
        } else if their_path.is_prefix_of(&my_path) {
            // they are shorter: they extend
            let bit = !my_path.bit(their_path.len());
            (
                their_path.child(bit),
                my_path,
                Some(their_path.len()),
                false,
            )
        } else {
            // diverging paths: swap references at the divergence level
            let level = my_path.common_prefix_len(&their_path);
            (their_path, my_path, Some(level), false)
        };

        if new_my_path != my_path {
            self.path = new_my_path;
            self.routing.resize(new_my_path.len());
            self.changed = true;
        }
        if let Some(level) = add_ref_level {
            if self.routing.add(level, from) {
                self.changed = true;
            }
        }
        self.peer_paths.insert(from, adopt_path);

        let molecules = if merge {
            self.all_owned_molecules()
        } else {
            self.collect_for_partner(&adopt_path.interval(m))
        };
        if !molecules.is_empty() {
            self.changed = true;
        }
        let dict = self.dict_entries_for(&molecules);
        vec![self.envelope(
            from,
            rid,
            Message::ExchangeData {
                adopt_path,
                peer_path: self.path,
                add_ref_level,
                merge,
                reply_expected: true,
                molecules,
                dict,
            },
        )]
    }

    fn all_owned_molecules(&self) -> Vec<Molecule> {
        self.storage
            .owned_molecule_keys()
            .into_iter()
            .map(|(layout, key)| self.storage.export_block(&key, layout).unwrap().1)
            .collect()
    }

    fn import_molecules(&mut self, molecules: Vec<Molecule>, dict: Vec<(TermId, String)>) {
        for (id, s) in dict {
            let _ = self.dict.import(&s, id);
        }
        let own = self.interval();
        for mol in molecules {
            if mol.tuples.is_empty() {
                continue;
            }
            if own.contains(mol.key.val(self.cfg.m)) {
                if self.storage.import_block(mol) {
                    self.changed = true;
                }
            } else {
                self.pending.push(mol);
                self.changed = true;
            }
        }
    }

    #[allow(clippy::too_many_arguments)] // mirrors the ExchangeData fields
    fn handle_exchange_data(
        &mut self,
        from: PeerId,
        rid: u64,
        adopt_path: BitKey,
        peer_path: BitKey,
        add_ref_level: Option<u32>,
        merge: bool,
        reply_expected: bool,
        molecules: Vec<Molecule>,
        dict: Vec<(TermId, String)>,
    ) -> Vec<Envelope> {
        self.peer_paths.insert(from, peer_path);
        if adopt_path != self.path {
            self.path = adopt_path;
            self.routing.resize(adopt_path.len());
            self.changed = true;
        }
        if let Some(level) = add_ref_level {
            if (level as usize) < self.routing.levels().len() && self.routing.add(level, from) {
                self.changed = true;
            }
        }
        self.import_molecules(molecules, dict);

        if !reply_expected {
            return Vec::new();
        }
        self.exchange_inflight = false;
        let mirror = if merge {
            self.all_owned_molecules()
        } else {
            self.collect_for_partner(&peer_path.interval(self.cfg.m))
        };
        if !mirror.is_empty() {
            self.changed = true;
        }
        let dict = self.dict_entries_for(&mirror);
        vec![self.envelope(
            from,
            rid,
            Message::ExchangeData {
                adopt_path: peer_path,
                peer_path: self.path,
                add_ref_level: None,
                merge,
                reply_expected: false,
                molecules: mirror,
                dict,
            },
        )]
    }

    /// Push parked molecules toward their owners via prefix routing.
    pub fn flush_pending(&mut self) -> Vec<Envelope> {
        if self.pending.is_empty() {
            return Vec::new();
        }
        let own = self.interval();
        let mut out = Vec::new();
        let mut keep = Vec::new();
        for mol in std::mem::take(&mut self.pending) {
            if own.contains(mol.key.val(self.cfg.m)) {
                self.storage.import_block(mol);
                self.changed = true;
                continue;
            }
            match self.route(&mol.key) {
                Ok(Some(next)) => {
                    let dict = self.dict_entries_for(std::slice::from_ref(&mol));
                    let rid = self.fresh_request_id();
                    out.push(self.envelope(
                        next,
                        rid,
                        Message::InsertEncoded {
                            layout: mol.layout,
                            triples: mol.tuples,
                            dict,
                        },
                    ));
                    self.changed = true;
                }
                _ => keep.push(mol),
            }
        }
        self.pending = keep;
        out
    }

    pub fn pending_blocks(&self) -> usize {
        self.pending.len()
    }

    // ----- replication -----------------------------------------------------

    pub fn begin_replicating(&mut self) {
        if self.phase == Phase::Exchanging {
            self.phase = Phase::Replicating;
        }
    }

    fn block_key(entry: &BlockEntry) -> (u8, u128) {
        (entry.layout.tag(), entry.molecule_key.val(TRIPLE_KEY_BITS))
    }

    /// Number of owned blocks still short of the replication target.
    pub fn replica_deficit(&self) -> u32 {
        let need = self.cfg.replication_target.saturating_sub(1);
        Layout::ALL
            .iter()
            .flat_map(|&l| self.storage.owned_entries(l))
            .filter(|e| {
                self.replica_acks.get(&Self::block_key(e)).copied().unwrap_or(0) < need
            })
            .count() as u32
    }

    /// One replication round: push a replica request for each unsatisfied
    /// block with none in flight. Returns the outbound requests; an empty
    /// return with zero deficit means this peer is done.
    pub fn replication_round(&mut self) -> Vec<Envelope> {
        if self.phase != Phase::Replicating {
            return Vec::new();
        }
        let need = self.cfg.replication_target.saturating_sub(1);
        let inflight: Vec<(u8, u128)> = self.replicate_inflight.values().copied().collect();
        let entries: Vec<BlockEntry> = Layout::ALL
            .iter()
            .flat_map(|&l| self.storage.owned_entries(l))
            .collect();
        let mut out = Vec::new();
        for entry in entries {
            let bk = Self::block_key(&entry);
            if self.replica_acks.get(&bk).copied().unwrap_or(0) >= need
                || inflight.contains(&bk)
            {
                continue;
            }
            let tried = self.replicate_tried.entry(bk).or_default().clone();
            let candidates: Vec<PeerId> = self
                .known
                .keys()
                .copied()
                .filter(|p| !tried.contains(p))
                .collect();
            let Some(&target) = candidates.get(self.rng.gen_range(0..candidates.len().max(1)))
            else {
                continue; // gave up on this block; stays in the deficit
            };
            self.replicate_tried.entry(bk).or_default().push(target);
            let rid = self.fresh_request_id();
            self.replicate_inflight.insert(rid, bk);
            out.push(self.envelope(target, rid, Message::ReplicateBlock { entry }));
        }
        out
    }

    pub fn finish_replicating(&mut self) {
        if self.phase == Phase::Replicating {
            if self.replica_deficit() > 0 {
                log::warn!(
                    "{}: entering running phase with replica deficit {}",
                    self.id,
                    self.replica_deficit()
                );
            }
            self.phase = Phase::Running;
        }
    }

    // ----- lookup ----------------------------------------------------------

    /// Start a lookup on behalf of an external requester; responses flow to
    /// `requester` when the aggregation completes.
    pub fn start_lookup(
        &mut self,
        requester: PeerId,
        requester_addr: &str,
        request_id: u64,
        layout: Layout,
        range: KeyInterval,
    ) -> Vec<Envelope> {
        self.handle_lookup(requester, requester_addr, request_id, layout, range, 0)
    }

    fn handle_lookup(
        &mut self,
        from: PeerId,
        from_addr: &str,
        rid: u64,
        layout: Layout,
        range: KeyInterval,
        hop_count: u32,
    ) -> Vec<Envelope> {
        let entries = self.storage.candidate_blocks(layout, &range);
        let mut partial = false;
        let mut forwards: Vec<(PeerId, KeyInterval)> = Vec::new();
        for i in 0..self.path.len() {
            let opposite = self.path.prefix(i).child(!self.path.bit(i));
            let sub = range.intersect(&opposite.interval(self.cfg.m));
            if sub.is_empty() {
                continue;
            }
            let refs = self.routing.level(i);
            if refs.is_empty() {
                log::warn!("{}: no route at level {i} for lookup", self.id);
                partial = true;
                continue;
            }
            let target = refs[self.rng.gen_range(0..refs.len())];
            forwards.push((target, sub));
        }

        if forwards.is_empty() {
            let response = Message::BlockEntriesResponse {
                entries: dedup_entries(entries),
                max_hop: hop_count,
                partial,
            };
            return vec![self.envelope(from, rid, response)];
        }

        self.next_agg_id += 1;
        let agg_id = self.next_agg_id;
        let mut out = Vec::new();
        let mut children = 0;
        for (target, sub) in forwards {
            let child_rid = self.fresh_request_id();
            self.agg_children.insert(child_rid, agg_id);
            children += 1;
            out.push(self.envelope(
                target,
                child_rid,
                Message::LookupRequest {
                    layout,
                    range: sub,
                    hop_count: hop_count + 1,
                },
            ));
        }
        self.aggs.insert(
            agg_id,
            LookupAgg {
                requester: from,
                requester_addr: from_addr.to_owned(),
                request_id: rid,
                remaining: children,
                entries,
                max_hop: hop_count,
                partial,
            },
        );
        out
    }

    fn handle_lookup_response(
        &mut self,
        child_rid: u64,
        entries: Vec<BlockEntry>,
        max_hop: u32,
        partial: bool,
    ) -> Vec<Envelope> {
        let Some(agg_id) = self.agg_children.remove(&child_rid) else {
            return Vec::new();
        };
        let Some(agg) = self.aggs.get_mut(&agg_id) else {
            return Vec::new();
        };
        agg.entries.extend(entries);
        agg.max_hop = agg.max_hop.max(max_hop);
        agg.partial |= partial;
        agg.remaining -= 1;
        if agg.remaining > 0 {
            return Vec::new();
        }
        let agg = self.aggs.remove(&agg_id).unwrap();
        let response = Message::BlockEntriesResponse {
            entries: dedup_entries(agg.entries),
            max_hop: agg.max_hop,
            partial: agg.partial,
        };
        let mut env = self.envelope(agg.requester, agg.request_id, response);
        env.from_addr = self.addr.clone();
        let _ = &agg.requester_addr;
        vec![env]
    }

    /// Expire every in-flight aggregation, answering requesters with what
    /// has arrived so far, flagged partial. Socket deployments call this on
    /// a timer; the simulator's reliable delivery never needs it.
    pub fn expire_lookups(&mut self) -> Vec<Envelope> {
        let ids: Vec<u64> = self.aggs.keys().copied().collect();
        let mut out = Vec::new();
        for agg_id in ids {
            let agg = self.aggs.remove(&agg_id).unwrap();
            self.agg_children.retain(|_, v| *v != agg_id);
            out.push(self.envelope(
                agg.requester,
                agg.request_id,
                Message::BlockEntriesResponse {
                    entries: dedup_entries(agg.entries),
                    max_hop: agg.max_hop,
                    partial: true,
                },
            ));
        }
        out
    }

    // ----- insert routing --------------------------------------------------

    fn handle_insert_strings(
        &mut self,
        from: PeerId,
        rid: u64,
        triples: Vec<(String, String, String)>,
    ) -> Vec<Envelope> {
        let mut count = 0u32;
        let mut errors = Vec::new();
        let mut batches: HashMap<(PeerId, u8), InsertBatch> = HashMap::new();
        for (s, p, o) in triples {
            let ids = (self.dict.encode(&s), self.dict.encode(&p), self.dict.encode(&o));
            let (s_id, p_id, o_id) = match ids {
                (Ok(a), Ok(b), Ok(c)) => (a, b, c),
                (a, b, c) => {
                    for r in [a, b, c] {
                        if let Err(e) = r {
                            errors.push(e.to_string());
                        }
                    }
                    continue;
                }
            };
            let t = TripleId { s: s_id, p: p_id, o: o_id };
            count += 1;
            for layout in Layout::ALL {
                let key = triple_key(&t, layout);
                match self.route(&key) {
                    Ok(None) => {
                        if self.storage.insert_triple_layout(&t, layout) {
                            self.changed = true;
                        }
                    }
                    Ok(Some(next)) => {
                        let batch = batches.entry((next, layout.tag())).or_default();
                        batch.0.push(t);
                        batch
                            .1
                            .extend([(s_id, s.clone()), (p_id, p.clone()), (o_id, o.clone())]);
                    }
                    Err(_) => {
                        // no route yet; park it for a later flush
                        self.pending.push(Molecule {
                            key,
                            layout,
                            tuples: vec![t],
                        });
                        self.changed = true;
                    }
                }
            }
        }
        let mut out = Vec::new();
        for ((target, layout_tag), (triples, mut dict)) in batches {
            dict.sort_by_key(|(id, _)| *id);
            dict.dedup_by_key(|(id, _)| *id);
            let child = self.fresh_request_id();
            out.push(self.envelope(
                target,
                child,
                Message::InsertEncoded {
                    layout: Layout::from_tag(layout_tag).unwrap(),
                    triples,
                    dict,
                },
            ));
        }
        if from != self.id {
            let reply = if errors.is_empty() {
                Message::InsertAck { count }
            } else {
                Message::Error {
                    code: 3,
                    detail: errors.join("; "),
                }
            };
            out.push(self.envelope(from, rid, reply));
        }
        out
    }

    fn handle_insert_encoded(
        &mut self,
        layout: Layout,
        triples: Vec<TripleId>,
        dict: Vec<(TermId, String)>,
    ) -> Vec<Envelope> {
        let mut forward: HashMap<PeerId, Vec<TripleId>> = HashMap::new();
        for t in triples {
            let key = triple_key(&t, layout);
            match self.route(&key) {
                Ok(None) => {
                    for (id, s) in &dict {
                        if [t.s, t.p, t.o].contains(id) {
                            let _ = self.dict.import(s, *id);
                        }
                    }
                    if self.storage.insert_triple_layout(&t, layout) {
                        self.changed = true;
                    }
                }
                Ok(Some(next)) => forward.entry(next).or_default().push(t),
                Err(_) => {
                    // no route yet (mid-construction); park it for a later flush
                    for (id, s) in &dict {
                        if [t.s, t.p, t.o].contains(id) {
                            let _ = self.dict.import(s, *id);
                        }
                    }
                    self.pending.push(Molecule {
                        key,
                        layout,
                        tuples: vec![t],
                    });
                    self.changed = true;
                }
            }
        }
        let mut out = Vec::new();
        for (target, batch) in forward {
            let rid = self.fresh_request_id();
            out.push(self.envelope(
                target,
                rid,
                Message::InsertEncoded {
                    layout,
                    triples: batch,
                    dict: dict.clone(),
                },
            ));
        }
        out
    }

    // ----- dispatch --------------------------------------------------------

    /// The single protocol entry point: current state + message in, next
    /// state + messages out.
    pub fn handle_message(&mut self, env: Envelope) -> Vec<Envelope> {
        let Envelope {
            from,
            from_addr,
            request_id: rid,
            msg,
            ..
        } = env;
        match msg {
            Message::Bootstrap { me, known } => {
                self.learn(&me);
                for p in &known {
                    self.learn(p);
                }
                let mut reply_known = self.known_infos();
                reply_known.push(self.info());
                vec![self.envelope(from, rid, Message::BootstrapAck { known: reply_known })]
            }
            Message::BootstrapAck { known } => {
                for p in &known {
                    self.learn(p);
                }
                if self.phase == Phase::Bootstrapping {
                    self.phase = Phase::Exchanging;
                }
                Vec::new()
            }
            Message::ExchangeRequest { path, blocks } => {
                self.handle_exchange_request(from, &from_addr, rid, path, blocks)
            }
            Message::ExchangeData {
                adopt_path,
                peer_path,
                add_ref_level,
                merge,
                reply_expected,
                molecules,
                dict,
            } => self.handle_exchange_data(
                from,
                rid,
                adopt_path,
                peer_path,
                add_ref_level,
                merge,
                reply_expected,
                molecules,
                dict,
            ),
            Message::ReplicateBlock { entry } => {
                let accepted = entry.origin != self.id;
                if accepted {
                    self.storage.import_replica_entry(entry);
                    self.changed = true;
                }
                vec![self.envelope(
                    from,
                    rid,
                    Message::ReplicateAck {
                        layout: entry.layout,
                        molecule_key: entry.molecule_key,
                        accepted,
                    },
                )]
            }
            Message::ReplicateAck { accepted, .. } => {
                if let Some(bk) = self.replicate_inflight.remove(&rid) {
                    if accepted {
                        *self.replica_acks.entry(bk).or_insert(0) += 1;
                    }
                }
                Vec::new()
            }
            Message::LookupRequest {
                layout,
                range,
                hop_count,
            } => self.handle_lookup(from, &from_addr, rid, layout, range, hop_count),
            Message::BlockEntriesResponse {
                entries,
                max_hop,
                partial,
            } => self.handle_lookup_response(rid, entries, max_hop, partial),
            Message::FetchTriples {
                layout,
                molecule_key,
                range,
            } => {
                match self.storage.fetch_molecule_triples(&molecule_key, layout, &range) {
                    Ok(mut triples) => {
                        let mut partial = false;
                        if let Some(rate) = self.cfg.retrieval_rate {
                            let unit = ((self.storage.tuple_count(layout) as f64 * rate).ceil()
                                as usize)
                                .max(1);
                            if triples.len() > unit {
                                triples.truncate(unit);
                                partial = true;
                            } else {
                                // the device reads a whole retrieval unit;
                                // out-of-range neighbours ride along and the
                                // initiator trims them after the transfer
                                for t in self.storage.read_unit(layout, &molecule_key, unit) {
                                    if triples.len() >= unit {
                                        break;
                                    }
                                    if !range.contains(triple_key(&t, layout).val(self.cfg.m)) {
                                        triples.push(t);
                                    }
                                }
                            }
                        }
                        vec![self.envelope(
                            from,
                            rid,
                            Message::TriplesResponse { triples, partial },
                        )]
                    }
                    // the molecule may have migrated in a later exchange
                    // while an index entry naming us is still in circulation;
                    // follow the trie towards its current owner and relay
                    Err(e @ StorageError::UnknownMolecule(..)) => match self.route(&molecule_key)
                    {
                        Ok(Some(next)) => {
                            let child_rid = self.fresh_request_id();
                            self.fetch_relay.insert(child_rid, (from, rid));
                            vec![self.envelope(
                                next,
                                child_rid,
                                Message::FetchTriples {
                                    layout,
                                    molecule_key,
                                    range,
                                },
                            )]
                        }
                        _ => vec![self.envelope(
                            from,
                            rid,
                            Message::Error {
                                code: 4,
                                detail: e.to_string(),
                            },
                        )],
                    },
                    Err(e) => vec![self.envelope(
                        from,
                        rid,
                        Message::Error {
                            code: 5,
                            detail: e.to_string(),
                        },
                    )],
                }
            }
            Message::DictLookup { ids } => {
                let entries = ids
                    .into_iter()
                    .filter_map(|id| self.dict.decode(id).ok().map(|s| (id, s)))
                    .collect();
                vec![self.envelope(from, rid, Message::DictResponse { entries })]
            }
            Message::InsertTriples { triples } => self.handle_insert_strings(from, rid, triples),
            Message::InsertEncoded {
                layout,
                triples,
                dict,
            } => self.handle_insert_encoded(layout, triples, dict),
            Message::StatusRequest => {
                let st = self.status();
                vec![self.envelope(
                    from,
                    rid,
                    Message::StatusResponse {
                        phase: st.phase,
                        path: st.path,
                        block_counts: st.block_counts,
                        replica_entries: st.replica_entries,
                        replica_deficit: st.replica_deficit,
                        routing_levels: st.routing_levels,
                        known: self.known_infos(),
                    },
                )]
            }
            Message::Error { code, detail } => {
                // an errored exchange request unblocks the initiator
                if code == 1 || code == 2 {
                    self.exchange_inflight = false;
                }
                if let Some((requester, orig_rid)) = self.fetch_relay.remove(&rid) {
                    return vec![self.envelope(
                        requester,
                        orig_rid,
                        Message::Error { code, detail },
                    )];
                }
                log::debug!("{}: error reply from {from}: {code} {detail}", self.id);
                Vec::new()
            }
            Message::TriplesResponse { triples, partial } => {
                match self.fetch_relay.remove(&rid) {
                    Some((requester, orig_rid)) => vec![self.envelope(
                        requester,
                        orig_rid,
                        Message::TriplesResponse { triples, partial },
                    )],
                    None => Vec::new(),
                }
            }
            // responses consumed by external clients, not by peers
            Message::DictResponse { .. }
            | Message::InsertAck { .. }
            | Message::StatusResponse { .. } => Vec::new(),
            #[allow(unreachable_patterns)]
            other => vec![self.envelope(
                from,
                rid,
                Message::Error {
                    code: 0,
                    detail: format!("unexpected message tag {}", other.tag()),
                },
            )],
        }
    }
}

fn dedup_entries(mut entries: Vec<BlockEntry>) -> Vec<BlockEntry> {
    entries.sort_by(|a, b| {
        (a.layout.tag(), a.origin, a.molecule_key).cmp(&(b.layout.tag(), b.origin, b.molecule_key))
    });
    entries.dedup_by(|a, b| {
        a.layout == b.layout && a.origin == b.origin && a.molecule_key == b.molecule_key
    });
    entries.sort_by(|a, b| a.first.cmp(&b.first).then(a.origin.cmp(&b.origin)));
    entries
}
