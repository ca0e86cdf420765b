//! Synthetic evaluation campaigns over the simulated network: atomic-pattern
//! scaling (campaign one) and star-join scaling per peer (campaign two).
//! Runs are deterministic per seed; results come back as CSV-ready rows.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dictionary::hash_term;
use crate::keyspace::{pattern_prefix, Layout, PatternShape, TripleId, TRIPLE_KEY_BITS};
use crate::network::sim::SimConfig;
use crate::overlay::simnet::{SimNetError, SimNetwork};
use crate::overlay::PeerConfig;
use crate::query::{execute, select_layout, Query, SimClient, Term, TriplePattern};

/// Default dataset sizes (in triples) for campaign one.
pub const EXP1_SIZES: [u64; 8] = [
    26_100, 52_200, 140_070, 208_800, 417_600, 720_615, 1_000_500, 2_001_000,
];
/// Default per-peer tuple counts for campaign two.
pub const EXP2_TUPLES: [u64; 4] = [1_000, 10_000, 100_000, 1_000_000];
/// Network sizes used by both campaigns.
pub const PEER_COUNTS: [u32; 3] = [4, 8, 16];

/// Star subjects selected by campaign two's seed pattern.
pub const EXP2_STAR_SUBJECTS: usize = 64;

#[derive(Clone, Debug)]
pub struct ExpRow {
    pub experiment: &'static str,
    pub peers: u32,
    pub scale: u64,
    pub query: String,
    pub qet_ms: f64,
    pub max_hop: u32,
    pub messages: u64,
    pub bytes: u64,
    pub results: u64,
}

pub const CSV_HEADER: &str = "experiment,peers,scale,query,qet_ms,max_hop,messages,bytes,results";

impl ExpRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{},{},{},{}",
            self.experiment,
            self.peers,
            self.scale,
            self.query,
            self.qet_ms,
            self.max_hop,
            self.messages,
            self.bytes,
            self.results
        )
    }
}

fn log2_exact(n: u32) -> u32 {
    assert!(n.is_power_of_two(), "peer counts must be powers of two");
    n.trailing_zeros()
}

/// Observation-record terms, encoded straight to ids: at campaign scale the
/// dictionary is bypassed and queries compare hashes only.
struct RecordIds {
    type_p: u32,
    observation: u32,
    observed_property: u32,
    simple_result: u32,
    part_of_record: u32,
}

impl RecordIds {
    fn new() -> Self {
        RecordIds {
            type_p: hash_term("<http://www.w3.org/1999/02/22-rdf-syntax-ns#type>").0,
            observation: hash_term("<http://www.w3.org/ns/sosa/Observation>").0,
            observed_property: hash_term("<http://www.w3.org/ns/sosa/observedProperty>").0,
            simple_result: hash_term("<http://www.w3.org/ns/sosa/hasSimpleResult>").0,
            part_of_record: hash_term("<http://example.org/sensors/vocab#partOfRecord>").0,
        }
    }
}

/// Generate `records` observation records as encoded triples, mirroring the
/// string generator's shape: seven typed observation nodes per record, each
/// with eleven more triples, plus three station triples.
fn generate_encoded(records: u64, seed: u64) -> Vec<TripleId> {
    let ids = RecordIds::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records as usize * 87);
    // fixed per-schema predicate ids for the nine filler triples
    let filler_preds: Vec<u32> = (0..9).map(|i| hash_term(&format!("<p:{i}>")).0).collect();
    for r in 0..records {
        let station = hash_term(&format!("<s:{}>", r % 1000)).0;
        let record = rng.gen::<u32>();
        out.push(TripleId::new(station, filler_preds[0], record));
        out.push(TripleId::new(station, filler_preds[1], rng.gen()));
        out.push(TripleId::new(station, filler_preds[2], rng.gen()));
        for _ in 0..7 {
            let obs = rng.gen::<u32>();
            out.push(TripleId::new(obs, ids.type_p, ids.observation));
            out.push(TripleId::new(obs, ids.observed_property, rng.gen_range(0..7)));
            out.push(TripleId::new(obs, ids.simple_result, rng.gen()));
            out.push(TripleId::new(obs, ids.part_of_record, record));
            for &p in &filler_preds[1..9] {
                out.push(TripleId::new(obs, p, rng.gen()));
            }
        }
    }
    out
}

/// Time one atomic pattern from `entry`, returning a result row.
fn timed_pattern(
    net: &mut SimNetwork,
    entry: usize,
    name: &str,
    shape: &PatternShape,
) -> Result<ExpRow, SimNetError> {
    let layout = select_layout(shape);
    let prefix = pattern_prefix(shape, layout).expect("bound components lead");
    let range = prefix.interval(TRIPLE_KEY_BITS);
    let t0 = net.sim.now_us();
    let m0 = net.sim.messages_sent;
    let b0 = net.sim.bytes_sent;
    let (entries, max_hop, _partial) = net.lookup_from(entry, layout, range)?;
    let mut results = 0u64;
    for e in entries {
        if !e.intersects(&range) {
            continue;
        }
        let (triples, _) = net.fetch_from(e.origin, e.layout, e.molecule_key, range)?;
        results += triples.iter().filter(|t| shape.matches(t)).count() as u64;
    }
    Ok(ExpRow {
        experiment: "exp1",
        peers: net.len() as u32,
        scale: 0,
        query: name.to_owned(),
        qet_ms: (net.sim.now_us() - t0) as f64 / 1000.0,
        max_hop,
        messages: net.sim.messages_sent - m0,
        bytes: net.sim.bytes_sent - b0,
        results,
    })
}

/// Campaign one: two atomic patterns over growing datasets. The class
/// pattern (tp1) touches a fixed share of the whole dataset, so its
/// execution time grows with dataset size; the subject pattern (tp2)
/// matches a fixed dozen triples regardless of scale.
pub fn run_exp1(
    sizes: &[u64],
    peer_counts: &[u32],
    seed: u64,
) -> Result<Vec<ExpRow>, SimNetError> {
    let ids = RecordIds::new();
    let mut rows = Vec::new();
    for &n in peer_counts {
        let k = log2_exact(n);
        for &size in sizes {
            let records = size / 87;
            let mut net = SimNetwork::new(
                n as usize,
                PeerConfig::default(),
                SimConfig { seed, ..SimConfig::default() },
            );
            net.build_balanced(k);
            let data = generate_encoded(records, seed ^ size);
            // tp1 runs on pos, tp2 on spo; the third layout is not queried
            for t in &data {
                net.load_triple_layout(t, Layout::Spo);
                net.load_triple_layout(t, Layout::Pos);
            }
            let tp1 = PatternShape {
                s: None,
                p: Some(crate::dictionary::TermId(ids.type_p)),
                o: Some(crate::dictionary::TermId(ids.observation)),
            };
            // the first observation node of the first record
            let subject = data[3].s;
            let tp2 = PatternShape {
                s: Some(subject),
                p: None,
                o: None,
            };
            for (name, shape) in [("tp1", &tp1), ("tp2", &tp2)] {
                let mut row = timed_pattern(&mut net, 0, name, shape)?;
                row.scale = size;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Campaign two: a three-pattern star join over growing per-peer loads.
/// Only the subject-ordered layout is populated, which is the one the join
/// probes use. A retrieval-rate below one truncates each fetch.
pub fn run_exp2(
    tuples_per_peer: &[u64],
    peer_counts: &[u32],
    seed: u64,
    retrieval_rate: Option<f64>,
) -> Result<Vec<ExpRow>, SimNetError> {
    let mut rows = Vec::new();
    for &n in peer_counts {
        let k = log2_exact(n);
        for &tuples in tuples_per_peer {
            let cfg = PeerConfig {
                retrieval_rate,
                ..PeerConfig::default()
            };
            let mut net = SimNetwork::new(
                n as usize,
                cfg,
                SimConfig { seed, ..SimConfig::default() },
            );
            net.build_balanced(k);

            let total = tuples * n as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ total);
            // a hub subject links to the star subjects, which carry the two
            // probed properties; everything stays on the subject-ordered layout
            let hub = hash_term("<exp2:hub>").0;
            // star subjects are odd, background subjects even, so the two
            // populations never collide while both spread over the id space
            let star: Vec<u32> = (0..EXP2_STAR_SUBJECTS)
                .map(|_| rng.gen::<u32>() | 1)
                .collect();
            for &s in &star {
                net.load_triple_layout(&TripleId::new(hub, pid("seed"), s), Layout::Spo);
                net.load_triple_layout(&TripleId::new(s, pid("b"), rng.gen()), Layout::Spo);
                net.load_triple_layout(&TripleId::new(s, pid("c"), rng.gen()), Layout::Spo);
            }
            // background load: pooled subjects with the probed predicates,
            // so molecules fill to realistic runs instead of one per tuple
            let background = total.saturating_sub(3 * EXP2_STAR_SUBJECTS as u64);
            let pool = (background / 100).max(1) as u32;
            let preds = [pid("b"), pid("c"), pid("noise")];
            for _ in 0..background {
                // multiplicative hash spreads the pool over the id space
                let s = rng.gen_range(0..pool).wrapping_mul(2_654_435_761) & !1;
                let p = preds[rng.gen_range(0..3)];
                net.load_triple_layout(&TripleId::new(s, p, rng.gen()), Layout::Spo);
            }

            let q = star_query();
            let t0 = net.sim.now_us();
            let m0 = net.sim.messages_sent;
            let b0 = net.sim.bytes_sent;
            let mut client = SimClient { net: &mut net, entry: 0 };
            let result = execute(&mut client, &q)
                .map_err(|e| SimNetError::Remote { code: 0, detail: e.to_string() })?;
            rows.push(ExpRow {
                experiment: "exp2",
                peers: n,
                scale: tuples,
                query: "star3".into(),
                qet_ms: (net.sim.now_us() - t0) as f64 / 1000.0,
                max_hop: 0,
                messages: net.sim.messages_sent - m0,
                bytes: net.sim.bytes_sent - b0,
                results: result.rows.len() as u64,
            });
        }
    }
    Ok(rows)
}

fn pid(tag: &str) -> u32 {
    hash_term(&format!("<exp2:p:{tag}>")).0
}

fn star_query() -> Query {
    let b = |t: String| Term::Bound(t);
    Query {
        select: vec!["x".into(), "y".into(), "z".into()],
        patterns: vec![
            TriplePattern {
                s: b("<exp2:hub>".into()),
                p: b("<exp2:p:seed>".into()),
                o: Term::Var("x".into()),
            },
            TriplePattern {
                s: Term::Var("x".into()),
                p: b("<exp2:p:b>".into()),
                o: Term::Var("y".into()),
            },
            TriplePattern {
                s: Term::Var("x".into()),
                p: b("<exp2:p:c>".into()),
                o: Term::Var("z".into()),
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoded_records_keep_the_shape() {
        let data = generate_encoded(10, 3);
        assert_eq!(data.len(), 10 * 87);
        let ids = RecordIds::new();
        let types = data
            .iter()
            .filter(|t| t.p.0 == ids.type_p && t.o.0 == ids.observation)
            .count();
        assert_eq!(types, 70);
    }

    #[test]
    fn exp1_class_pattern_counts_scale() {
        let rows = run_exp1(&[8_700, 17_400], &[4], 42).unwrap();
        assert_eq!(rows.len(), 4);
        let tp1: Vec<&ExpRow> = rows.iter().filter(|r| r.query == "tp1").collect();
        assert_eq!(tp1[0].results, 8_700 / 87 * 7);
        assert_eq!(tp1[1].results, 2 * tp1[0].results);
        assert!(tp1[1].qet_ms > tp1[0].qet_ms);
        let tp2: Vec<&ExpRow> = rows.iter().filter(|r| r.query == "tp2").collect();
        assert_eq!(tp2[0].results, 12);
        assert_eq!(tp2[1].results, 12);
    }

    #[test]
    fn exp2_star_join_finds_all_subjects() {
        let rows = run_exp2(&[500], &[4], 7, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].results, EXP2_STAR_SUBJECTS as u64);
        assert!(rows[0].qet_ms > 0.0);
    }

    #[test]
    fn csv_rows_are_stable_per_seed() {
        let a: Vec<String> = run_exp2(&[300], &[4], 9, None)
            .unwrap()
            .iter()
            .map(|r| r.to_csv())
            .collect();
        let b: Vec<String> = run_exp2(&[300], &[4], 9, None)
            .unwrap()
            .iter()
            .map(|r| r.to_csv())
            .collect();
        assert_eq!(a, b);
    }
}
