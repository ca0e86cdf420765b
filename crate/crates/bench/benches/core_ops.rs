//! Microbenchmarks for the hot paths: key arithmetic, storage insert and
//! scan, envelope encoding, and a full simulated lookup.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use trigrid_core::keyspace::{triple_key, KeyInterval, Layout, TripleId, TRIPLE_KEY_BITS};
use trigrid_core::network::message::{Envelope, Message};
use trigrid_core::network::sim::SimConfig;
use trigrid_core::overlay::simnet::SimNetwork;
use trigrid_core::overlay::{PeerConfig, PeerId};
use trigrid_core::storage::PeerStorage;

fn random_triples(n: usize, seed: u64) -> Vec<TripleId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TripleId::new(rng.gen(), rng.gen_range(0..64), rng.gen()))
        .collect()
}

fn bench_keyspace(c: &mut Criterion) {
    let triples = random_triples(1024, 1);
    c.bench_function("triple_key_all_layouts", |b| {
        b.iter(|| {
            let mut acc = 0u128;
            for t in &triples {
                for layout in Layout::ALL {
                    acc ^= triple_key(black_box(t), layout).val(TRIPLE_KEY_BITS);
                }
            }
            acc
        })
    });
}

fn bench_storage(c: &mut Criterion) {
    let triples = random_triples(10_000, 2);
    c.bench_function("storage_insert_10k", |b| {
        b.iter(|| {
            let mut st = PeerStorage::new(PeerId(0));
            for t in &triples {
                st.insert_triple(black_box(t));
            }
            st.block_count(Layout::Spo)
        })
    });

    let mut st = PeerStorage::new(PeerId(0));
    for t in &triples {
        st.insert_triple(t);
    }
    let full = KeyInterval::full(TRIPLE_KEY_BITS);
    c.bench_function("storage_scan_10k", |b| {
        b.iter(|| st.scan_range(Layout::Spo, black_box(&full)).len())
    });
}

fn bench_codec(c: &mut Criterion) {
    let env = Envelope {
        from: PeerId(3),
        from_addr: "127.0.0.1:4000".into(),
        to: PeerId(7),
        request_id: 99,
        msg: Message::InsertEncoded {
            layout: Layout::Spo,
            triples: random_triples(100, 3),
            dict: Vec::new(),
        },
    };
    c.bench_function("envelope_encode_decode_100", |b| {
        b.iter(|| {
            let frame = black_box(&env).encode();
            Envelope::decode(&frame).unwrap().0
        })
    });
}

fn bench_lookup(c: &mut Criterion) {
    let mut net = SimNetwork::new(8, PeerConfig::default(), SimConfig::default());
    net.build_balanced(3);
    for t in random_triples(5_000, 4) {
        net.load_triple_layout(&t, Layout::Spo);
    }
    let full = KeyInterval::full(TRIPLE_KEY_BITS);
    c.bench_function("sim_lookup_full_range_8_peers", |b| {
        b.iter(|| net.lookup_from(0, Layout::Spo, full).unwrap().0.len())
    });
}

criterion_group!(benches, bench_keyspace, bench_storage, bench_codec, bench_lookup);
criterion_main!(benches);
