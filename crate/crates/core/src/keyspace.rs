//! Bit-string key mathematics: triple keys per layout, key values, key
//! intervals, common prefixes and prefix relations.
//!
//! A key is an ordered sequence of bits `p1 p2 ... pk` with `k <= m`, where
//! `m` is the maximal key length of the space (96 for full triple keys, three
//! 32-bit components; small values such as 6 are used in tests). The value of
//! a key is `sum p_i * 2^(m-i)`, i.e. the key left-aligned in an m-bit
//! integer, and a key of length `k` addresses the half-open interval
//! `[val, val + 2^(m-k))` of the key space.

use crate::dictionary::TermId;
use thiserror::Error;

/// Maximal key length for full triple keys: three 32-bit components.
pub const TRIPLE_KEY_BITS: u32 = 96;

/// Index layout: the order in which triple components are concatenated.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Layout {
    Spo,
    Pos,
    Osp,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Spo, Layout::Pos, Layout::Osp];

    pub fn tag(self) -> u8 {
        match self {
            Layout::Spo => 0,
            Layout::Pos => 1,
            Layout::Osp => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Layout> {
        match tag {
            0 => Some(Layout::Spo),
            1 => Some(Layout::Pos),
            2 => Some(Layout::Osp),
            _ => None,
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::Spo => "SPO",
            Layout::Pos => "POS",
            Layout::Osp => "OSP",
        })
    }
}

/// A triple as three dictionary-encoded components.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct TripleId {
    pub s: TermId,
    pub p: TermId,
    pub o: TermId,
}

impl TripleId {
    pub fn new(s: u32, p: u32, o: u32) -> Self {
        TripleId {
            s: TermId(s),
            p: TermId(p),
            o: TermId(o),
        }
    }

    /// Components in layout order.
    pub fn components(&self, layout: Layout) -> [u32; 3] {
        match layout {
            Layout::Spo => [self.s.0, self.p.0, self.o.0],
            Layout::Pos => [self.p.0, self.o.0, self.s.0],
            Layout::Osp => [self.o.0, self.s.0, self.p.0],
        }
    }
}

/// A variable-length binary key, most-significant bit first.
///
/// Stored as the low `len` bits of `bits`; the key's first bit is the highest
/// of those. Ordering is lexicographic on the bit sequence, with a proper
/// prefix sorting before its extensions.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitKey {
    len: u8,
    bits: u128,
}

impl BitKey {
    pub const EMPTY: BitKey = BitKey { len: 0, bits: 0 };

    /// Build from the low `len` bits of `bits`.
    pub fn new(bits: u128, len: u32) -> Self {
        assert!(len <= 128);
        let mask = if len == 128 {
            u128::MAX
        } else {
            (1u128 << len) - 1
        };
        BitKey {
            len: len as u8,
            bits: bits & mask,
        }
    }

    /// Parse a string of '0'/'1' digits; test convenience.
    pub fn parse(s: &str) -> Self {
        let mut k = BitKey::EMPTY;
        for c in s.chars() {
            match c {
                '0' => k = k.child(false),
                '1' => k = k.child(true),
                _ => panic!("invalid bit char {c:?}"),
            }
        }
        k
    }

    pub fn len(&self) -> u32 {
        self.len as u32
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn raw_bits(&self) -> u128 {
        self.bits
    }

    /// Bit at position `i` (0-based from the first, most significant bit).
    pub fn bit(&self, i: u32) -> bool {
        assert!(i < self.len());
        (self.bits >> (self.len() - 1 - i)) & 1 == 1
    }

    /// The key extended by one bit.
    pub fn child(&self, bit: bool) -> BitKey {
        BitKey {
            len: self.len + 1,
            bits: (self.bits << 1) | bit as u128,
        }
    }

    /// The first `n` bits.
    pub fn prefix(&self, n: u32) -> BitKey {
        assert!(n <= self.len());
        BitKey {
            len: n as u8,
            bits: self.bits >> (self.len() - n),
        }
    }

    /// `sum p_i * 2^(m-i)`: the key left-aligned in an m-bit integer.
    pub fn val(&self, m: u32) -> u128 {
        assert!(self.len() <= m && m <= 127);
        self.bits << (m - self.len())
    }

    /// The key-space partition `[val, val + 2^(m-k))` addressed by this key.
    pub fn interval(&self, m: u32) -> KeyInterval {
        let lo = self.val(m);
        KeyInterval {
            lo,
            hi: lo + (1u128 << (m - self.len())),
        }
    }

    /// True iff `self` equals the first `|self|` bits of `other`.
    pub fn is_prefix_of(&self, other: &BitKey) -> bool {
        self.len() <= other.len() && other.prefix(self.len()) == *self
    }

    /// Length of the longest common leading run with `other`.
    pub fn common_prefix_len(&self, other: &BitKey) -> u32 {
        let n = self.len().min(other.len());
        if n == 0 {
            return 0;
        }
        let a = self.bits >> (self.len() - n);
        let b = other.bits >> (other.len() - n);
        let diff = a ^ b;
        if diff == 0 {
            n
        } else {
            n - (128 - diff.leading_zeros())
        }
    }
}

impl PartialOrd for BitKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BitKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // lexicographic on bits, prefix first
        let n = self.len().min(other.len());
        let a = if self.len() > n {
            self.bits >> (self.len() - n)
        } else {
            self.bits
        };
        let b = if other.len() > n {
            other.bits >> (other.len() - n)
        } else {
            other.bits
        };
        a.cmp(&b).then(self.len.cmp(&other.len))
    }
}

impl std::fmt::Debug for BitKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("\"")?;
        for i in 0..self.len() {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        f.write_str("\"")
    }
}

impl std::fmt::Display for BitKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            return f.write_str("ε");
        }
        for i in 0..self.len() {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Half-open interval `[lo, hi)` of the key space.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct KeyInterval {
    pub lo: u128,
    pub hi: u128,
}

impl KeyInterval {
    pub fn full(m: u32) -> Self {
        KeyInterval {
            lo: 0,
            hi: 1u128 << m,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }

    pub fn contains(&self, v: u128) -> bool {
        self.lo <= v && v < self.hi
    }

    pub fn intersect(&self, other: &KeyInterval) -> KeyInterval {
        KeyInterval {
            lo: self.lo.max(other.lo),
            hi: self.hi.min(other.hi),
        }
    }

    pub fn intersects(&self, other: &KeyInterval) -> bool {
        !self.intersect(other).is_empty()
    }
}

/// 96-bit concatenation of a triple's components in layout order.
pub fn triple_key(t: &TripleId, layout: Layout) -> BitKey {
    let [a, b, c] = t.components(layout);
    let bits = ((a as u128) << 64) | ((b as u128) << 32) | c as u128;
    BitKey::new(bits, TRIPLE_KEY_BITS)
}

/// Longest shared leading bit sequence of a non-empty set of keys.
pub fn common_prefix<'a, I: IntoIterator<Item = &'a BitKey>>(keys: I) -> BitKey {
    let mut it = keys.into_iter();
    let first = *it.next().expect("common_prefix of empty set");
    it.fold(first, |acc, k| acc.prefix(acc.common_prefix_len(k)))
}

/// Bound-component shape of a triple pattern, in subject/predicate/object
/// positions. Variables are `None`; their names live in the query layer.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PatternShape {
    pub s: Option<TermId>,
    pub p: Option<TermId>,
    pub o: Option<TermId>,
}

impl PatternShape {
    pub fn components(&self, layout: Layout) -> [Option<TermId>; 3] {
        match layout {
            Layout::Spo => [self.s, self.p, self.o],
            Layout::Pos => [self.p, self.o, self.s],
            Layout::Osp => [self.o, self.s, self.p],
        }
    }

    pub fn bound_count(&self) -> u32 {
        [self.s, self.p, self.o].iter().flatten().count() as u32
    }

    pub fn matches(&self, t: &TripleId) -> bool {
        self.s.is_none_or(|v| v == t.s)
            && self.p.is_none_or(|v| v == t.p)
            && self.o.is_none_or(|v| v == t.o)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bound components of pattern are not a prefix under layout {layout}")]
pub struct LayoutMismatch {
    pub layout: Layout,
}

/// Concatenation of the pattern's bound leading components under `layout`
/// (length 0, 32 or 64; a fully bound pattern yields the full 96-bit key).
pub fn pattern_prefix(pattern: &PatternShape, layout: Layout) -> Result<BitKey, LayoutMismatch> {
    let comps = pattern.components(layout);
    let mut key = BitKey::EMPTY;
    let mut seen_unbound = false;
    for c in comps {
        match c {
            Some(id) if !seen_unbound => {
                key = BitKey::new((key.raw_bits() << 32) | id.0 as u128, key.len() + 32);
            }
            Some(_) => return Err(LayoutMismatch { layout }),
            None => seen_unbound = true,
        }
    }
    Ok(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn val_examples_m6() {
        assert_eq!(BitKey::parse("00").val(6), 0);
        // 2^5 + 2^4, hand evaluation
        assert_eq!(BitKey::parse("11").val(6), 48);
        assert_eq!(BitKey::EMPTY.val(6), 0);
    }

    #[test]
    fn interval_examples_m6() {
        assert_eq!(
            BitKey::parse("00").interval(6),
            KeyInterval { lo: 0, hi: 16 }
        );
        assert_eq!(BitKey::EMPTY.interval(6), KeyInterval { lo: 0, hi: 64 });
        assert_eq!(
            BitKey::parse("11").interval(6),
            KeyInterval { lo: 48, hi: 64 }
        );
    }

    #[test]
    fn triple_key_layouts() {
        let t = TripleId::new(0, 0, 1);
        assert_eq!(triple_key(&t, Layout::Spo).val(96), 1);
        // object bits lead under OSP: 1 * 2^64
        assert_eq!(triple_key(&t, Layout::Osp).val(96), 1u128 << 64);
    }

    #[test]
    fn triple_key_order_follows_object_order() {
        let a = TripleId::new(5, 9, 3);
        let b = TripleId::new(5, 9, 4);
        assert!(triple_key(&a, Layout::Spo) < triple_key(&b, Layout::Spo));
    }

    #[test]
    fn common_prefix_trie_example() {
        // the four keys of Peer1 in the m=6 trie example
        let keys = [
            BitKey::parse("000001"),
            BitKey::parse("000000"),
            BitKey::parse("001000"),
            BitKey::parse("001100"),
        ];
        assert_eq!(common_prefix(keys.iter()), BitKey::parse("00"));
    }

    #[test]
    fn common_prefix_edge_cases() {
        let k = BitKey::parse("0110");
        assert_eq!(common_prefix([&k]), k);
        let a = BitKey::parse("0110");
        let b = BitKey::parse("1110");
        assert_eq!(common_prefix([&a, &b]), BitKey::EMPTY);
    }

    #[test]
    fn prefix_relation() {
        assert!(BitKey::parse("00").is_prefix_of(&BitKey::parse("000110")));
        assert!(BitKey::EMPTY.is_prefix_of(&BitKey::parse("1")));
        assert!(!BitKey::parse("01").is_prefix_of(&BitKey::parse("001")));
    }

    #[test]
    fn pattern_prefix_shapes() {
        let sp = PatternShape {
            s: Some(TermId(3)),
            p: Some(TermId(7)),
            o: None,
        };
        let key = pattern_prefix(&sp, Layout::Spo).unwrap();
        assert_eq!(key.len(), 64);
        assert_eq!(key.raw_bits(), (3u128 << 32) | 7);

        let po = PatternShape {
            s: None,
            p: Some(TermId(7)),
            o: Some(TermId(9)),
        };
        assert!(pattern_prefix(&po, Layout::Spo).is_err());
        assert!(pattern_prefix(&po, Layout::Pos).is_ok());

        let all_var = PatternShape {
            s: None,
            p: None,
            o: None,
        };
        assert_eq!(pattern_prefix(&all_var, Layout::Spo).unwrap(), BitKey::EMPTY);
    }

    fn arb_key(max_m: u32) -> impl Strategy<Value = BitKey> {
        (0..=max_m).prop_flat_map(|len| {
            prop::bits::u64::masked(if len >= 64 {
                u64::MAX
            } else {
                (1u64 << len) - 1
            })
            .prop_map(move |bits| BitKey::new(bits as u128, len))
        })
    }

    proptest! {
        #[test]
        fn sibling_intervals_partition(key in arb_key(15)) {
            let m = 16;
            let parent = key.interval(m);
            let left = key.child(false).interval(m);
            let right = key.child(true).interval(m);
            prop_assert_eq!(left.lo, parent.lo);
            prop_assert_eq!(left.hi, right.lo);
            prop_assert_eq!(right.hi, parent.hi);
        }

        #[test]
        fn prefix_iff_val_in_interval(key in arb_key(16), full_bits in any::<u16>()) {
            let m = 16;
            let full = BitKey::new(full_bits as u128, m);
            prop_assert_eq!(
                key.is_prefix_of(&full),
                key.interval(m).contains(full.val(m))
            );
        }

        #[test]
        fn full_key_lex_order_is_integer_order(a in any::<u16>(), b in any::<u16>()) {
            let m = 16;
            let ka = BitKey::new(a as u128, m);
            let kb = BitKey::new(b as u128, m);
            prop_assert_eq!(ka.cmp(&kb), a.cmp(&b));
        }

        #[test]
        fn common_prefix_is_longest_shared(a in arb_key(16), b in arb_key(16)) {
            let cp = common_prefix([&a, &b]);
            prop_assert!(cp.is_prefix_of(&a));
            prop_assert!(cp.is_prefix_of(&b));
            // one bit longer is no longer a shared prefix of both
            if cp.len() < a.len() && cp.len() < b.len() {
                prop_assert!(a.prefix(cp.len() + 1) != b.prefix(cp.len() + 1));
            }
        }
    }
}
