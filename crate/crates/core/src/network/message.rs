//! Protocol messages and their binary wire format.
//!
//! Frame layout: `[4-byte big-endian length][1-byte message tag][payload]`,
//! where length counts the tag plus payload. All integers are big-endian.
//! Keys are packed most-significant-bit-first into 12 bytes; variable-length
//! keys carry a preceding length byte, the full 96-bit keys inside block
//! entries do not. A block transfer payload is the 45-byte block entry
//! (layout tag, first, last, molecule key, origin) followed by a 32-bit tuple
//! count and packed 12-byte tuples.

use crate::dictionary::TermId;
use crate::keyspace::{BitKey, KeyInterval, Layout, TripleId, TRIPLE_KEY_BITS};
use crate::overlay::{PeerId, PeerInfo, Phase};
use crate::storage::{BlockEntry, Molecule};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame")]
    Truncated,
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error("frame too large: {0} bytes")]
    TooLarge(u64),
}

/// Addressed protocol message. `request_id` correlates responses with
/// requests issued by `from`.
#[derive(Clone, PartialEq, Debug)]
pub struct Envelope {
    pub from: PeerId,
    pub from_addr: String,
    pub to: PeerId,
    pub request_id: u64,
    pub msg: Message,
}

#[derive(Clone, PartialEq, Debug)]
pub enum Message {
    Bootstrap {
        me: PeerInfo,
        known: Vec<PeerInfo>,
    },
    BootstrapAck {
        known: Vec<PeerInfo>,
    },
    ExchangeRequest {
        path: BitKey,
        blocks: u32,
    },
    /// Exchange step: the recipient adopts `adopt_path`, notes the sender's
    /// `peer_path`, optionally adds the sender at `add_ref_level`, and
    /// installs the molecules. `reply_expected` asks for the mirror transfer.
    ExchangeData {
        adopt_path: BitKey,
        peer_path: BitKey,
        add_ref_level: Option<u32>,
        merge: bool,
        reply_expected: bool,
        molecules: Vec<Molecule>,
        /// Term strings for the moved molecules' components, so the new
        /// owner can answer DictLookup for them.
        dict: Vec<(TermId, String)>,
    },
    ReplicateBlock {
        entry: BlockEntry,
    },
    ReplicateAck {
        layout: Layout,
        molecule_key: BitKey,
        accepted: bool,
    },
    LookupRequest {
        layout: Layout,
        range: KeyInterval,
        hop_count: u32,
    },
    BlockEntriesResponse {
        entries: Vec<BlockEntry>,
        max_hop: u32,
        partial: bool,
    },
    FetchTriples {
        layout: Layout,
        molecule_key: BitKey,
        range: KeyInterval,
    },
    TriplesResponse {
        triples: Vec<TripleId>,
        partial: bool,
    },
    DictLookup {
        ids: Vec<TermId>,
    },
    DictResponse {
        entries: Vec<(TermId, String)>,
    },
    Error {
        code: u8,
        detail: String,
    },
    /// Loader surface: string triples to be encoded and routed to owners.
    InsertTriples {
        triples: Vec<(String, String, String)>,
    },
    /// Routed insert for one layout at the owning peer, with the dictionary
    /// entries of the components.
    InsertEncoded {
        layout: Layout,
        triples: Vec<TripleId>,
        dict: Vec<(TermId, String)>,
    },
    InsertAck {
        count: u32,
    },
    StatusRequest,
    StatusResponse {
        phase: Phase,
        path: BitKey,
        block_counts: [u32; 3],
        replica_entries: u32,
        replica_deficit: u32,
        routing_levels: Vec<u32>,
        known: Vec<PeerInfo>,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Bootstrap { .. } => 0,
            Message::BootstrapAck { .. } => 1,
            Message::ExchangeRequest { .. } => 2,
            Message::ExchangeData { .. } => 3,
            Message::ReplicateBlock { .. } => 4,
            Message::ReplicateAck { .. } => 5,
            Message::LookupRequest { .. } => 6,
            Message::BlockEntriesResponse { .. } => 7,
            Message::FetchTriples { .. } => 8,
            Message::TriplesResponse { .. } => 9,
            Message::DictLookup { .. } => 10,
            Message::DictResponse { .. } => 11,
            Message::Error { .. } => 12,
            Message::InsertTriples { .. } => 13,
            Message::InsertEncoded { .. } => 14,
            Message::InsertAck { .. } => 15,
            Message::StatusRequest => 16,
            Message::StatusResponse { .. } => 17,
        }
    }
}

pub const MAX_FRAME: u64 = 256 * 1024 * 1024;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u96(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_be_bytes()[4..16]);
    }

    fn string(&mut self, s: &str) {
        let b = s.as_bytes();
        assert!(b.len() <= u16::MAX as usize);
        self.buf.extend_from_slice(&(b.len() as u16).to_be_bytes());
        self.buf.extend_from_slice(b);
    }

    /// Variable-length key: one length byte, then 12 bytes MSB-first.
    fn key(&mut self, k: &BitKey) {
        self.u8(k.len() as u8);
        self.u96(k.val(TRIPLE_KEY_BITS));
    }

    /// Full 96-bit key without the length byte.
    fn key96(&mut self, k: &BitKey) {
        debug_assert_eq!(k.len(), TRIPLE_KEY_BITS);
        self.u96(k.raw_bits());
    }

    fn interval(&mut self, r: &KeyInterval) {
        // hi may be 2^96 (full space): store hi - 1 inclusive? No: store as
        // 13-byte with an overflow flag to stay exact.
        self.u96(r.lo);
        let full = r.hi == 1u128 << TRIPLE_KEY_BITS;
        self.u8(full as u8);
        self.u96(if full { 0 } else { r.hi });
    }

    fn triple(&mut self, t: &TripleId) {
        self.u32(t.s.0);
        self.u32(t.p.0);
        self.u32(t.o.0);
    }

    fn entry(&mut self, e: &BlockEntry) {
        self.u8(e.layout.tag());
        self.key96(&e.first);
        self.key96(&e.last);
        self.key96(&e.molecule_key);
        self.u64(e.origin.0);
    }

    fn molecule(&mut self, m: &Molecule) {
        self.u8(m.layout.tag());
        self.key96(&m.key);
        self.u32(m.tuples.len() as u32);
        for t in &m.tuples {
            self.triple(t);
        }
    }

    fn peer_info(&mut self, p: &PeerInfo) {
        self.u64(p.id.0);
        self.string(&p.addr);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Invalid("trailing bytes"))
        }
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Invalid("bool")),
        }
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u96(&mut self) -> Result<u128, WireError> {
        let mut b = [0u8; 16];
        b[4..16].copy_from_slice(self.take(12)?);
        Ok(u128::from_be_bytes(b))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as usize;
        std::str::from_utf8(self.take(n)?)
            .map(|s| s.to_owned())
            .map_err(|_| WireError::Invalid("utf8"))
    }

    fn key(&mut self) -> Result<BitKey, WireError> {
        let len = self.u8()? as u32;
        if len > TRIPLE_KEY_BITS {
            return Err(WireError::Invalid("key length"));
        }
        let aligned = self.u96()?;
        if len < TRIPLE_KEY_BITS && aligned & ((1u128 << (TRIPLE_KEY_BITS - len)) - 1) != 0 {
            return Err(WireError::Invalid("key padding"));
        }
        Ok(BitKey::new(aligned >> (TRIPLE_KEY_BITS - len), len))
    }

    fn key96(&mut self) -> Result<BitKey, WireError> {
        Ok(BitKey::new(self.u96()?, TRIPLE_KEY_BITS))
    }

    fn interval(&mut self) -> Result<KeyInterval, WireError> {
        let lo = self.u96()?;
        let full = self.bool()?;
        let hi = if full {
            let z = self.u96()?;
            if z != 0 {
                return Err(WireError::Invalid("interval hi"));
            }
            1u128 << TRIPLE_KEY_BITS
        } else {
            self.u96()?
        };
        Ok(KeyInterval { lo, hi })
    }

    fn layout(&mut self) -> Result<Layout, WireError> {
        Layout::from_tag(self.u8()?).ok_or(WireError::Invalid("layout tag"))
    }

    fn triple(&mut self) -> Result<TripleId, WireError> {
        Ok(TripleId::new(self.u32()?, self.u32()?, self.u32()?))
    }

    fn entry(&mut self) -> Result<BlockEntry, WireError> {
        Ok(BlockEntry {
            layout: self.layout()?,
            first: self.key96()?,
            last: self.key96()?,
            molecule_key: self.key96()?,
            origin: PeerId(self.u64()?),
        })
    }

    fn molecule(&mut self) -> Result<Molecule, WireError> {
        let layout = self.layout()?;
        let key = self.key96()?;
        let n = self.u32()? as usize;
        let mut tuples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            tuples.push(self.triple()?);
        }
        Ok(Molecule {
            key,
            layout,
            tuples,
        })
    }

    fn peer_info(&mut self) -> Result<PeerInfo, WireError> {
        Ok(PeerInfo {
            id: PeerId(self.u64()?),
            addr: self.string()?,
        })
    }
}

fn write_message(w: &mut Writer, msg: &Message) {
    w.u8(msg.tag());
    match msg {
        Message::Bootstrap { me, known } => {
            w.peer_info(me);
            w.u32(known.len() as u32);
            for p in known {
                w.peer_info(p);
            }
        }
        Message::BootstrapAck { known } => {
            w.u32(known.len() as u32);
            for p in known {
                w.peer_info(p);
            }
        }
        Message::ExchangeRequest { path, blocks } => {
            w.key(path);
            w.u32(*blocks);
        }
        Message::ExchangeData {
            adopt_path,
            peer_path,
            add_ref_level,
            merge,
            reply_expected,
            molecules,
            dict,
        } => {
            w.key(adopt_path);
            w.key(peer_path);
            match add_ref_level {
                Some(l) => {
                    w.u8(1);
                    w.u32(*l);
                }
                None => w.u8(0),
            }
            w.u8(*merge as u8);
            w.u8(*reply_expected as u8);
            w.u32(molecules.len() as u32);
            for m in molecules {
                w.molecule(m);
            }
            w.u32(dict.len() as u32);
            for (id, s) in dict {
                w.u32(id.0);
                w.string(s);
            }
        }
        Message::ReplicateBlock { entry } => w.entry(entry),
        Message::ReplicateAck {
            layout,
            molecule_key,
            accepted,
        } => {
            w.u8(layout.tag());
            w.key96(molecule_key);
            w.u8(*accepted as u8);
        }
        Message::LookupRequest {
            layout,
            range,
            hop_count,
        } => {
            w.u8(layout.tag());
            w.interval(range);
            w.u32(*hop_count);
        }
        Message::BlockEntriesResponse {
            entries,
            max_hop,
            partial,
        } => {
            w.u32(entries.len() as u32);
            for e in entries {
                w.entry(e);
            }
            w.u32(*max_hop);
            w.u8(*partial as u8);
        }
        Message::FetchTriples {
            layout,
            molecule_key,
            range,
        } => {
            w.u8(layout.tag());
            w.key96(molecule_key);
            w.interval(range);
        }
        Message::TriplesResponse { triples, partial } => {
            w.u32(triples.len() as u32);
            for t in triples {
                w.triple(t);
            }
            w.u8(*partial as u8);
        }
        Message::DictLookup { ids } => {
            w.u32(ids.len() as u32);
            for id in ids {
                w.u32(id.0);
            }
        }
        Message::DictResponse { entries } => {
            w.u32(entries.len() as u32);
            for (id, s) in entries {
                w.u32(id.0);
                w.string(s);
            }
        }
        Message::Error { code, detail } => {
            w.u8(*code);
            w.string(detail);
        }
        Message::InsertTriples { triples } => {
            w.u32(triples.len() as u32);
            for (s, p, o) in triples {
                w.string(s);
                w.string(p);
                w.string(o);
            }
        }
        Message::InsertEncoded {
            layout,
            triples,
            dict,
        } => {
            w.u8(layout.tag());
            w.u32(triples.len() as u32);
            for t in triples {
                w.triple(t);
            }
            w.u32(dict.len() as u32);
            for (id, s) in dict {
                w.u32(id.0);
                w.string(s);
            }
        }
        Message::InsertAck { count } => w.u32(*count),
        Message::StatusRequest => {}
        Message::StatusResponse {
            phase,
            path,
            block_counts,
            replica_entries,
            replica_deficit,
            routing_levels,
            known,
        } => {
            w.u8(phase.tag());
            w.key(path);
            for c in block_counts {
                w.u32(*c);
            }
            w.u32(*replica_entries);
            w.u32(*replica_deficit);
            w.u32(routing_levels.len() as u32);
            for l in routing_levels {
                w.u32(*l);
            }
            w.u32(known.len() as u32);
            for p in known {
                w.peer_info(p);
            }
        }
    }
}

fn read_message(r: &mut Reader) -> Result<Message, WireError> {
    let tag = r.u8()?;
    let msg = match tag {
        0 => {
            let me = r.peer_info()?;
            let n = r.u32()? as usize;
            let mut known = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                known.push(r.peer_info()?);
            }
            Message::Bootstrap { me, known }
        }
        1 => {
            let n = r.u32()? as usize;
            let mut known = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                known.push(r.peer_info()?);
            }
            Message::BootstrapAck { known }
        }
        2 => Message::ExchangeRequest {
            path: r.key()?,
            blocks: r.u32()?,
        },
        3 => {
            let adopt_path = r.key()?;
            let peer_path = r.key()?;
            let add_ref_level = match r.u8()? {
                0 => None,
                1 => Some(r.u32()?),
                _ => return Err(WireError::Invalid("option tag")),
            };
            let merge = r.bool()?;
            let reply_expected = r.bool()?;
            let n = r.u32()? as usize;
            let mut molecules = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                molecules.push(r.molecule()?);
            }
            let d = r.u32()? as usize;
            let mut dict = Vec::with_capacity(d.min(1 << 16));
            for _ in 0..d {
                dict.push((TermId(r.u32()?), r.string()?));
            }
            Message::ExchangeData {
                adopt_path,
                peer_path,
                add_ref_level,
                merge,
                reply_expected,
                molecules,
                dict,
            }
        }
        4 => Message::ReplicateBlock { entry: r.entry()? },
        5 => Message::ReplicateAck {
            layout: r.layout()?,
            molecule_key: r.key96()?,
            accepted: r.bool()?,
        },
        6 => Message::LookupRequest {
            layout: r.layout()?,
            range: r.interval()?,
            hop_count: r.u32()?,
        },
        7 => {
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                entries.push(r.entry()?);
            }
            Message::BlockEntriesResponse {
                entries,
                max_hop: r.u32()?,
                partial: r.bool()?,
            }
        }
        8 => Message::FetchTriples {
            layout: r.layout()?,
            molecule_key: r.key96()?,
            range: r.interval()?,
        },
        9 => {
            let n = r.u32()? as usize;
            let mut triples = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                triples.push(r.triple()?);
            }
            Message::TriplesResponse {
                triples,
                partial: r.bool()?,
            }
        }
        10 => {
            let n = r.u32()? as usize;
            let mut ids = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                ids.push(TermId(r.u32()?));
            }
            Message::DictLookup { ids }
        }
        11 => {
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                entries.push((TermId(r.u32()?), r.string()?));
            }
            Message::DictResponse { entries }
        }
        12 => Message::Error {
            code: r.u8()?,
            detail: r.string()?,
        },
        13 => {
            let n = r.u32()? as usize;
            let mut triples = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                triples.push((r.string()?, r.string()?, r.string()?));
            }
            Message::InsertTriples { triples }
        }
        14 => {
            let layout = r.layout()?;
            let n = r.u32()? as usize;
            let mut triples = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                triples.push(r.triple()?);
            }
            let d = r.u32()? as usize;
            let mut dict = Vec::with_capacity(d.min(1 << 16));
            for _ in 0..d {
                dict.push((TermId(r.u32()?), r.string()?));
            }
            Message::InsertEncoded {
                layout,
                triples,
                dict,
            }
        }
        15 => Message::InsertAck { count: r.u32()? },
        16 => Message::StatusRequest,
        17 => {
            let phase = Phase::from_tag(r.u8()?).ok_or(WireError::Invalid("phase tag"))?;
            let path = r.key()?;
            let block_counts = [r.u32()?, r.u32()?, r.u32()?];
            let replica_entries = r.u32()?;
            let replica_deficit = r.u32()?;
            let n = r.u32()? as usize;
            let mut routing_levels = Vec::with_capacity(n.min(128));
            for _ in 0..n {
                routing_levels.push(r.u32()?);
            }
            let k = r.u32()? as usize;
            let mut known = Vec::with_capacity(k.min(1 << 16));
            for _ in 0..k {
                known.push(r.peer_info()?);
            }
            Message::StatusResponse {
                phase,
                path,
                block_counts,
                replica_entries,
                replica_deficit,
                routing_levels,
                known,
            }
        }
        t => return Err(WireError::UnknownTag(t)),
    };
    Ok(msg)
}

impl Envelope {
    /// Encode as a complete frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.from.0);
        w.string(&self.from_addr);
        w.u64(self.to.0);
        w.u64(self.request_id);
        write_message(&mut w, &self.msg);
        let mut out = Vec::with_capacity(w.buf.len() + 4);
        out.extend_from_slice(&(w.buf.len() as u32).to_be_bytes());
        out.extend_from_slice(&w.buf);
        out
    }

    /// Decode a frame body (everything after the 4-byte length prefix).
    pub fn decode_body(body: &[u8]) -> Result<Envelope, WireError> {
        let mut r = Reader::new(body);
        let from = PeerId(r.u64()?);
        let from_addr = r.string()?;
        let to = PeerId(r.u64()?);
        let request_id = r.u64()?;
        let msg = read_message(&mut r)?;
        r.done()?;
        Ok(Envelope {
            from,
            from_addr,
            to,
            request_id,
            msg,
        })
    }

    /// Decode a complete frame; returns the envelope and bytes consumed.
    pub fn decode(frame: &[u8]) -> Result<(Envelope, usize), WireError> {
        if frame.len() < 4 {
            return Err(WireError::Truncated);
        }
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as u64;
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        let len = len as usize;
        if frame.len() < 4 + len {
            return Err(WireError::Truncated);
        }
        Ok((Envelope::decode_body(&frame[4..4 + len])?, 4 + len))
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }
}
