//! Per-peer two-layer storage: a physical layer of sorted molecules grouped
//! into blocks, and a buffer layer of block-range summaries that serves as the
//! index and as the unit of replication.
//!
//! A molecule is a sorted run of triples sharing a 64-bit grouping prefix (the
//! first two components under the layout). Its block entry records the first
//! and last tuple keys, the molecule key and the origin peer. Replica entries
//! point at remote origins and never contribute tuples to local scans.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::keyspace::{triple_key, BitKey, KeyInterval, Layout, TripleId, TRIPLE_KEY_BITS};
use crate::overlay::PeerId;

/// Tuples per molecule before a median split.
pub const DEFAULT_SPLIT_TUPLES: usize = 256;

const M: u32 = TRIPLE_KEY_BITS;
const GROUP_BITS: u32 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("no molecule under key {0} in layout {1}")]
    UnknownMolecule(BitKey, Layout),
    #[error("molecule {0} in layout {1} is not owned locally")]
    NotOwned(BitKey, Layout),
    #[error("storage log i/o: {0}")]
    Io(String),
    #[error("corrupt storage log record at offset {0}")]
    CorruptLog(u64),
}

impl From<std::io::Error> for StorageError {
    fn from(e: std::io::Error) -> Self {
        StorageError::Io(e.to_string())
    }
}

/// A sorted tuple run under one key, the physical storage unit.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Molecule {
    pub key: BitKey,
    pub layout: Layout,
    /// Sorted ascending by `triple_key(_, layout)`, no duplicates.
    pub tuples: Vec<TripleId>,
}

impl Molecule {
    pub fn first_key(&self) -> BitKey {
        triple_key(&self.tuples[0], self.layout)
    }

    pub fn last_key(&self) -> BitKey {
        triple_key(self.tuples.last().unwrap(), self.layout)
    }
}

/// Buffer-layer summary of one molecule.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BlockEntry {
    pub layout: Layout,
    pub first: BitKey,
    pub last: BitKey,
    pub molecule_key: BitKey,
    pub origin: PeerId,
}

impl BlockEntry {
    pub fn span(&self) -> KeyInterval {
        KeyInterval {
            lo: self.first.val(M),
            hi: self.last.val(M) + 1,
        }
    }

    pub fn intersects(&self, range: &KeyInterval) -> bool {
        self.span().intersects(range)
    }
}

#[derive(Default)]
struct LayoutStore {
    /// Owned molecules keyed by `val(molecule_key)`. Runs are pairwise
    /// disjoint, so entries sorted by molecule key are sorted by first key.
    molecules: BTreeMap<u128, Molecule>,
    /// Replica block entries keyed by (val(molecule_key), origin).
    replicas: BTreeMap<(u128, u64), BlockEntry>,
}

/// The peer's store across all three layouts, optionally backed by
/// append-only log files (one per layout) replayed on startup.
pub struct PeerStorage {
    owner: PeerId,
    split_tuples: usize,
    layouts: [LayoutStore; 3],
    log: Option<StorageLog>,
}

impl PeerStorage {
    pub fn new(owner: PeerId) -> Self {
        PeerStorage {
            owner,
            split_tuples: DEFAULT_SPLIT_TUPLES,
            layouts: Default::default(),
            log: None,
        }
    }

    pub fn with_split_threshold(owner: PeerId, split_tuples: usize) -> Self {
        let mut s = Self::new(owner);
        s.split_tuples = split_tuples.max(2);
        s
    }

    /// Open a log-backed store, replaying any existing records.
    pub fn open(owner: PeerId, dir: &Path) -> Result<Self, StorageError> {
        let mut s = Self::new(owner);
        let log = StorageLog::open(dir)?;
        for (layout, t) in log.replay()? {
            s.insert_layout(&t, layout);
        }
        s.log = Some(log);
        Ok(s)
    }

    pub fn owner(&self) -> PeerId {
        self.owner
    }

    pub fn set_owner(&mut self, owner: PeerId) {
        self.owner = owner;
    }

    fn store(&self, layout: Layout) -> &LayoutStore {
        &self.layouts[layout.tag() as usize]
    }

    fn store_mut(&mut self, layout: Layout) -> &mut LayoutStore {
        &mut self.layouts[layout.tag() as usize]
    }

    /// Insert into all three layouts; duplicates are no-ops.
    pub fn insert_triple(&mut self, t: &TripleId) -> bool {
        let mut fresh = false;
        for layout in Layout::ALL {
            fresh |= self.insert_triple_layout(t, layout);
        }
        fresh
    }

    /// Insert into a single layout only (routed per-layout inserts: a peer
    /// typically owns a triple's key under some layouts but not others).
    pub fn insert_triple_layout(&mut self, t: &TripleId, layout: Layout) -> bool {
        let fresh = self.insert_layout(t, layout);
        if fresh {
            if let Some(log) = &mut self.log {
                let _ = log.append(t, layout);
            }
        }
        fresh
    }

    fn insert_layout(&mut self, t: &TripleId, layout: Layout) -> bool {
        let key = triple_key(t, layout);
        let kv = key.val(M);
        let group = key.prefix(GROUP_BITS).interval(M);
        let split_at = self.split_tuples;
        let store = self.store_mut(layout);

        // target molecule: greatest in the group with molecule_key <= key,
        // else the group's first molecule (re-keyed), else a fresh one
        let target = store
            .molecules
            .range(group.lo..=kv)
            .next_back()
            .map(|(k, _)| *k)
            .or_else(|| {
                store
                    .molecules
                    .range(kv..group.hi)
                    .next()
                    .map(|(k, _)| *k)
            });

        let Some(tk) = target else {
            store.molecules.insert(
                kv,
                Molecule {
                    key,
                    layout,
                    tuples: vec![*t],
                },
            );
            return true;
        };

        let mol = store.molecules.get_mut(&tk).unwrap();
        let pos = mol
            .tuples
            .binary_search_by(|x| triple_key(x, layout).cmp(&key));
        match pos {
            Ok(_) => return false, // idempotent
            Err(i) => mol.tuples.insert(i, *t),
        }

        if kv < tk {
            // new first tuple: the molecule is re-keyed
            let mut mol = store.molecules.remove(&tk).unwrap();
            mol.key = key;
            store.molecules.insert(kv, mol);
        }

        let tk = tk.min(kv);
        if store.molecules[&tk].tuples.len() > split_at {
            let mol = store.molecules.get_mut(&tk).unwrap();
            let mid = mol.tuples.len() / 2;
            let upper = mol.tuples.split_off(mid);
            let upper_key = triple_key(&upper[0], layout);
            store.molecules.insert(
                upper_key.val(M),
                Molecule {
                    key: upper_key,
                    layout,
                    tuples: upper,
                },
            );
        }
        true
    }

    fn entry_for(&self, mol: &Molecule) -> BlockEntry {
        BlockEntry {
            layout: mol.layout,
            first: mol.first_key(),
            last: mol.last_key(),
            molecule_key: mol.key,
            origin: self.owner,
        }
    }

    /// All locally stored triples whose key under `layout` lies in `range`,
    /// ascending. Buffer-layer selection, then molecule fetch and trimming.
    pub fn scan_range(&self, layout: Layout, range: &KeyInterval) -> Vec<TripleId> {
        let mut out = Vec::new();
        for mol in self.select_molecules(layout, range) {
            trim_into(mol, layout, range, &mut out);
        }
        out
    }

    fn select_molecules<'a>(
        &'a self,
        layout: Layout,
        range: &KeyInterval,
    ) -> impl Iterator<Item = &'a Molecule> + 'a {
        let range = *range;
        let store = self.store(layout);
        // the run starting before range.lo may still reach into the range
        let start = store
            .molecules
            .range(..range.lo)
            .next_back()
            .map(|(k, _)| *k)
            .unwrap_or(0);
        store
            .molecules
            .range(start..range.hi)
            .map(|(_, m)| m)
            .filter(move |m| m.last_key().val(M) >= range.lo)
    }

    /// Owned and replica block entries whose span intersects `range`, in
    /// first-key order.
    pub fn candidate_blocks(&self, layout: Layout, range: &KeyInterval) -> Vec<BlockEntry> {
        let mut out: Vec<BlockEntry> = self
            .select_molecules(layout, range)
            .map(|m| self.entry_for(m))
            .collect();
        out.extend(
            self.store(layout)
                .replicas
                .values()
                .filter(|e| e.intersects(range))
                .copied(),
        );
        out.sort_by(|a, b| a.first.cmp(&b.first).then(a.origin.cmp(&b.origin)));
        out
    }

    /// Decompose one owned molecule and return its tuples within `range`.
    pub fn fetch_molecule_triples(
        &self,
        molecule_key: &BitKey,
        layout: Layout,
        range: &KeyInterval,
    ) -> Result<Vec<TripleId>, StorageError> {
        let mol = self
            .store(layout)
            .molecules
            .get(&molecule_key.val(M))
            .ok_or(StorageError::UnknownMolecule(*molecule_key, layout))?;
        let mut out = Vec::new();
        trim_into(mol, layout, range, &mut out);
        Ok(out)
    }

    /// Read up to `limit` tuples starting at the molecule keyed `start`,
    /// continuing through following molecules in key order and wrapping to
    /// the front of the layout if the tail runs short. Models a device that
    /// transfers storage in fixed-size retrieval units.
    pub fn read_unit(&self, layout: Layout, start: &BitKey, limit: usize) -> Vec<TripleId> {
        let store = self.store(layout);
        let pivot = start.val(M);
        let mut out = Vec::with_capacity(limit.min(1024));
        let ordered = store
            .molecules
            .range(pivot..)
            .chain(store.molecules.range(..pivot));
        for (_, m) in ordered {
            for t in &m.tuples {
                if out.len() >= limit {
                    return out;
                }
                out.push(*t);
            }
        }
        out
    }

    pub fn export_block(
        &self,
        molecule_key: &BitKey,
        layout: Layout,
    ) -> Result<(BlockEntry, Molecule), StorageError> {
        let mol = self
            .store(layout)
            .molecules
            .get(&molecule_key.val(M))
            .ok_or(StorageError::NotOwned(*molecule_key, layout))?;
        Ok((self.entry_for(mol), mol.clone()))
    }

    /// Install a molecule with ownership transferred to this peer. Returns
    /// true if any tuple was new.
    pub fn import_block(&mut self, molecule: Molecule) -> bool {
        // merge tuple-by-tuple so grouping and split invariants hold
        let layout = molecule.layout;
        let mut fresh = false;
        for t in molecule.tuples {
            fresh |= self.insert_triple_layout(&t, layout);
        }
        fresh
    }

    /// Install only the block entry, origin preserved (replication).
    pub fn import_replica_entry(&mut self, entry: BlockEntry) {
        if entry.origin == self.owner {
            return;
        }
        let key = (entry.molecule_key.val(M), entry.origin.0);
        self.store_mut(entry.layout).replicas.insert(key, entry);
    }

    /// Remove and return all owned molecules (every layout) whose key does
    /// not have `path` as a prefix. Used by the exchange protocol.
    pub fn take_molecules_outside(&mut self, path: &BitKey) -> Vec<Molecule> {
        let keep = path.interval(M);
        let mut out = Vec::new();
        for layout in Layout::ALL {
            let store = self.store_mut(layout);
            let stray: Vec<u128> = store
                .molecules
                .iter()
                .filter(|(k, _)| !keep.contains(**k))
                .map(|(k, _)| *k)
                .collect();
            for k in stray {
                out.push(store.molecules.remove(&k).unwrap());
            }
        }
        out
    }

    pub fn owned_entries(&self, layout: Layout) -> Vec<BlockEntry> {
        self.store(layout)
            .molecules
            .values()
            .map(|m| self.entry_for(m))
            .collect()
    }

    pub fn owned_molecule_keys(&self) -> Vec<(Layout, BitKey)> {
        Layout::ALL
            .iter()
            .flat_map(|&l| self.store(l).molecules.values().map(move |m| (l, m.key)))
            .collect()
    }

    pub fn block_count(&self, layout: Layout) -> usize {
        self.store(layout).molecules.len()
    }

    pub fn replica_entry_count(&self) -> usize {
        Layout::ALL
            .iter()
            .map(|&l| self.store(l).replicas.len())
            .sum()
    }

    pub fn replica_entries(&self) -> Vec<BlockEntry> {
        Layout::ALL
            .iter()
            .flat_map(|&l| self.store(l).replicas.values().copied())
            .collect()
    }

    pub fn tuple_count(&self, layout: Layout) -> usize {
        self.store(layout).molecules.values().map(|m| m.tuples.len()).sum()
    }
}

fn trim_into(mol: &Molecule, layout: Layout, range: &KeyInterval, out: &mut Vec<TripleId>) {
    let lo = mol
        .tuples
        .partition_point(|t| triple_key(t, layout).val(M) < range.lo);
    for t in &mol.tuples[lo..] {
        if triple_key(t, layout).val(M) >= range.hi {
            break;
        }
        out.push(*t);
    }
}

/// Append-only on-disk log, one file per layout. Record layout:
/// `[1-byte layout tag][12-byte big-endian triple key][12 bytes s,p,o]`.
pub struct StorageLog {
    dir: PathBuf,
    writers: [BufWriter<File>; 3],
}

const LOG_RECORD: usize = 1 + 12 + 12;

fn log_file(dir: &Path, layout: Layout) -> PathBuf {
    dir.join(format!("{}.log", layout.to_string().to_lowercase()))
}

impl StorageLog {
    pub fn open(dir: &Path) -> Result<Self, StorageError> {
        std::fs::create_dir_all(dir)?;
        let mut writers = Vec::new();
        for layout in Layout::ALL {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(log_file(dir, layout))?;
            writers.push(BufWriter::new(file));
        }
        Ok(StorageLog {
            dir: dir.to_path_buf(),
            writers: writers.try_into().map_err(|_| ()).unwrap(),
        })
    }

    pub fn append(&mut self, t: &TripleId, layout: Layout) -> Result<(), StorageError> {
        let mut rec = [0u8; LOG_RECORD];
        rec[0] = layout.tag();
        let key = triple_key(t, layout).val(M);
        rec[1..13].copy_from_slice(&key.to_be_bytes()[4..16]);
        rec[13..17].copy_from_slice(&t.s.0.to_be_bytes());
        rec[17..21].copy_from_slice(&t.p.0.to_be_bytes());
        rec[21..25].copy_from_slice(&t.o.0.to_be_bytes());
        let w = &mut self.writers[layout.tag() as usize];
        w.write_all(&rec)?;
        w.flush()?;
        Ok(())
    }

    pub fn replay(&self) -> Result<Vec<(Layout, TripleId)>, StorageError> {
        let mut out = Vec::new();
        for layout in Layout::ALL {
            let file = File::open(log_file(&self.dir, layout))?;
            let mut r = BufReader::new(file);
            let mut rec = [0u8; LOG_RECORD];
            let mut offset = 0u64;
            loop {
                match r.read_exact(&mut rec) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(e.into()),
                }
                if rec[0] != layout.tag() {
                    return Err(StorageError::CorruptLog(offset));
                }
                let s = u32::from_be_bytes(rec[13..17].try_into().unwrap());
                let p = u32::from_be_bytes(rec[17..21].try_into().unwrap());
                let o = u32::from_be_bytes(rec[21..25].try_into().unwrap());
                let t = TripleId::new(s, p, o);
                // stored key must match the components
                let key = triple_key(&t, layout).val(M);
                if rec[1..13] != key.to_be_bytes()[4..16] {
                    return Err(StorageError::CorruptLog(offset));
                }
                out.push((layout, t));
                offset += LOG_RECORD as u64;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::{pattern_prefix, PatternShape};
    use crate::dictionary::TermId;
    use proptest::prelude::*;

    fn shape(s: Option<u32>, p: Option<u32>, o: Option<u32>) -> PatternShape {
        PatternShape {
            s: s.map(TermId),
            p: p.map(TermId),
            o: o.map(TermId),
        }
    }

    #[test]
    fn molecule_construction_fig1() {
        let mut st = PeerStorage::new(PeerId(1));
        for o in [1, 2, 3, 4] {
            st.insert_triple(&TripleId::new(10, 20, o));
        }
        assert_eq!(st.block_count(Layout::Spo), 1);
        let entries = st.owned_entries(Layout::Spo);
        assert_eq!(entries.len(), 1);
        let e = &entries[0];
        assert_eq!(e.first, triple_key(&TripleId::new(10, 20, 1), Layout::Spo));
        assert_eq!(e.last, triple_key(&TripleId::new(10, 20, 4), Layout::Spo));
        assert_eq!(e.molecule_key, e.first);

        let range = pattern_prefix(&shape(Some(10), Some(20), None), Layout::Spo)
            .unwrap()
            .interval(M);
        let got = st.scan_range(Layout::Spo, &range);
        assert_eq!(got, (1..=4).map(|o| TripleId::new(10, 20, o)).collect::<Vec<_>>());
    }

    #[test]
    fn insert_is_idempotent() {
        let mut a = PeerStorage::new(PeerId(1));
        let mut b = PeerStorage::new(PeerId(1));
        let t = TripleId::new(1, 2, 3);
        a.insert_triple(&t);
        b.insert_triple(&t);
        assert!(!b.insert_triple(&t));
        for l in Layout::ALL {
            assert_eq!(
                a.scan_range(l, &KeyInterval::full(M)),
                b.scan_range(l, &KeyInterval::full(M))
            );
            assert_eq!(a.block_count(l), b.block_count(l));
        }
    }

    #[test]
    fn last_widens_on_append() {
        let mut st = PeerStorage::new(PeerId(1));
        for o in [1, 2, 3, 4] {
            st.insert_triple(&TripleId::new(10, 20, o));
        }
        st.insert_triple(&TripleId::new(10, 20, 5));
        let e = st.owned_entries(Layout::Spo)[0];
        assert_eq!(e.last, triple_key(&TripleId::new(10, 20, 5), Layout::Spo));
        assert_eq!(st.block_count(Layout::Spo), 1);
    }

    #[test]
    fn rekey_on_smaller_first_tuple() {
        let mut st = PeerStorage::new(PeerId(1));
        st.insert_triple(&TripleId::new(10, 20, 5));
        st.insert_triple(&TripleId::new(10, 20, 1));
        let e = st.owned_entries(Layout::Spo)[0];
        assert_eq!(e.molecule_key, triple_key(&TripleId::new(10, 20, 1), Layout::Spo));
        assert_eq!(st.block_count(Layout::Spo), 1);
    }

    #[test]
    fn empty_store_scans_empty() {
        let st = PeerStorage::new(PeerId(1));
        assert!(st.scan_range(Layout::Spo, &KeyInterval::full(M)).is_empty());
        assert!(st
            .candidate_blocks(Layout::Pos, &KeyInterval::full(M))
            .is_empty());
    }

    #[test]
    fn molecule_splits_at_threshold() {
        let mut st = PeerStorage::with_split_threshold(PeerId(1), 4);
        for o in 0..10 {
            st.insert_triple(&TripleId::new(1, 1, o));
        }
        assert!(st.block_count(Layout::Spo) >= 2);
        // all blocks still in one group, runs disjoint and sorted
        let entries = st.owned_entries(Layout::Spo);
        for w in entries.windows(2) {
            assert!(w[0].last < w[1].first);
        }
        let got = st.scan_range(Layout::Spo, &KeyInterval::full(M));
        assert_eq!(got.len(), 10);
    }

    #[test]
    fn replica_entries_index_but_do_not_scan() {
        let mut origin = PeerStorage::new(PeerId(1));
        for o in [1, 2] {
            origin.insert_triple(&TripleId::new(7, 8, o));
        }
        let (entry, _) = origin
            .export_block(&origin.owned_entries(Layout::Spo)[0].molecule_key, Layout::Spo)
            .unwrap();

        let mut replica = PeerStorage::new(PeerId(2));
        replica.import_replica_entry(entry);
        let range = KeyInterval::full(M);
        let cands = replica.candidate_blocks(Layout::Spo, &range);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].origin, PeerId(1));
        assert!(replica.scan_range(Layout::Spo, &range).is_empty());
    }

    #[test]
    fn export_then_import_block_transfers_ownership() {
        let mut a = PeerStorage::new(PeerId(1));
        for o in [1, 2, 3] {
            a.insert_triple(&TripleId::new(5, 6, o));
        }
        let key = a.owned_entries(Layout::Spo)[0].molecule_key;
        let (_, mol) = a.export_block(&key, Layout::Spo).unwrap();
        let mut b = PeerStorage::new(PeerId(2));
        b.import_block(mol);
        let range = KeyInterval::full(M);
        assert_eq!(a.scan_range(Layout::Spo, &range), b.scan_range(Layout::Spo, &range));
        assert_eq!(b.owned_entries(Layout::Spo)[0].origin, PeerId(2));
    }

    #[test]
    fn export_unowned_errors() {
        let st = PeerStorage::new(PeerId(1));
        let key = triple_key(&TripleId::new(1, 2, 3), Layout::Spo);
        assert!(matches!(
            st.export_block(&key, Layout::Spo),
            Err(StorageError::NotOwned(..))
        ));
        assert!(matches!(
            st.fetch_molecule_triples(&key, Layout::Spo, &KeyInterval::full(M)),
            Err(StorageError::UnknownMolecule(..))
        ));
    }

    #[test]
    fn two_adjacent_blocks_both_reported() {
        let mut st = PeerStorage::new(PeerId(1));
        // distinct groups -> distinct molecules
        st.insert_triple(&TripleId::new(1, 1, 1));
        st.insert_triple(&TripleId::new(1, 2, 1));
        let lo = triple_key(&TripleId::new(1, 1, 1), Layout::Spo).val(M);
        let hi = triple_key(&TripleId::new(1, 2, 1), Layout::Spo).val(M) + 1;
        let cands = st.candidate_blocks(Layout::Spo, &KeyInterval { lo, hi });
        assert_eq!(cands.len(), 2);
        assert!(cands[0].first < cands[1].first);
    }

    #[test]
    fn log_replay_restores_store() {
        let dir = tempfile::tempdir().unwrap();
        let triples = [
            TripleId::new(1, 2, 3),
            TripleId::new(1, 2, 4),
            TripleId::new(9, 9, 9),
        ];
        {
            let mut st = PeerStorage::open(PeerId(1), dir.path()).unwrap();
            for t in &triples {
                st.insert_triple(t);
            }
        }
        let st = PeerStorage::open(PeerId(1), dir.path()).unwrap();
        for l in Layout::ALL {
            assert_eq!(st.scan_range(l, &KeyInterval::full(M)).len(), 3);
        }
    }

    fn oracle_scan(all: &[TripleId], layout: Layout, range: &KeyInterval) -> Vec<TripleId> {
        let mut v: Vec<TripleId> = all
            .iter()
            .filter(|t| range.contains(triple_key(t, layout).val(M)))
            .copied()
            .collect();
        v.sort_by_key(|t| triple_key(t, layout));
        v.dedup();
        v
    }

    proptest! {
        #[test]
        fn scan_matches_flat_oracle(
            raw in prop::collection::vec((0u32..6, 0u32..6, 0u32..40), 0..300),
            lo in 0u32..50, width in 0u32..50,
        ) {
            let triples: Vec<TripleId> =
                raw.iter().map(|&(s, p, o)| TripleId::new(s, p, o)).collect();
            let mut st = PeerStorage::with_split_threshold(PeerId(1), 8);
            for t in &triples {
                st.insert_triple(t);
            }
            // a range cutting through the populated region of each layout
            for layout in Layout::ALL {
                let base = TripleId::new(lo % 6, (lo / 6) % 6, lo % 40);
                let start = triple_key(&base, layout).val(M);
                let range = KeyInterval { lo: start, hi: start.saturating_add((width as u128) << 32) };
                prop_assert_eq!(
                    st.scan_range(layout, &range),
                    oracle_scan(&triples, layout, &range)
                );
                let full = KeyInterval::full(M);
                prop_assert_eq!(
                    st.scan_range(layout, &full),
                    oracle_scan(&triples, layout, &full)
                );
            }
        }

        #[test]
        fn buffer_soundness(
            raw in prop::collection::vec((0u32..5, 0u32..5, 0u32..30), 1..200),
        ) {
            let mut st = PeerStorage::with_split_threshold(PeerId(1), 8);
            for &(s, p, o) in &raw {
                st.insert_triple(&TripleId::new(s, p, o));
            }
            for layout in Layout::ALL {
                let full = KeyInterval::full(M);
                let blocks = st.candidate_blocks(layout, &full);
                for t in st.scan_range(layout, &full) {
                    let v = triple_key(&t, layout).val(M);
                    prop_assert!(blocks.iter().any(|b| b.span().contains(v)));
                }
            }
        }
    }
}
