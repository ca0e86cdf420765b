//! Query processing: pattern types, layout selection, planning, and the
//! bind-join executor, all written against an abstract overlay client so the
//! same code runs over the simulator and over sockets.

pub mod parser;

use std::collections::HashMap;

use thiserror::Error;

use crate::dictionary::{hash_term, TermId};
use crate::keyspace::{pattern_prefix, BitKey, KeyInterval, Layout, PatternShape, TripleId};
use crate::overlay::PeerId;
use crate::storage::BlockEntry;

pub use parser::{parse, ParseError};

/// Distinct probe shapes dispatched per executor batch.
pub const PROBE_FANOUT: usize = 64;

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Term {
    Bound(String),
    Var(String),
}

impl Term {
    fn id(&self, bindings: &HashMap<String, TermId>) -> Option<TermId> {
        match self {
            Term::Bound(s) => Some(hash_term(s)),
            Term::Var(v) => bindings.get(v).copied(),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TriplePattern {
    pub s: Term,
    pub p: Term,
    pub o: Term,
}

impl TriplePattern {
    pub fn variables(&self) -> Vec<String> {
        [&self.s, &self.p, &self.o]
            .into_iter()
            .filter_map(|t| match t {
                Term::Var(v) => Some(v.clone()),
                Term::Bound(_) => None,
            })
            .collect()
    }

    pub fn bound_count(&self) -> u32 {
        [&self.s, &self.p, &self.o]
            .into_iter()
            .filter(|t| matches!(t, Term::Bound(_)))
            .count() as u32
    }

    fn text(&self) -> String {
        format!("{:?} {:?} {:?}", self.s, self.p, self.o)
    }

    /// The access-path shape once `bindings` are substituted in.
    fn shape(&self, bindings: &HashMap<String, TermId>) -> PatternShape {
        PatternShape {
            s: self.s.id(bindings),
            p: self.p.id(bindings),
            o: self.o.id(bindings),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Query {
    pub select: Vec<String>,
    pub patterns: Vec<TriplePattern>,
}

/// Pick the layout whose component order puts the bound components first.
pub fn select_layout(shape: &PatternShape) -> Layout {
    match (shape.s.is_some(), shape.p.is_some(), shape.o.is_some()) {
        (true, true, true) | (true, true, false) | (true, false, false) => Layout::Spo,
        (false, true, true) | (false, true, false) => Layout::Pos,
        (false, false, true) | (true, false, true) => Layout::Osp,
        (false, false, false) => Layout::Spo,
    }
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("pattern '{0}' shares no variable with the preceding patterns")]
    DisconnectedPattern(String),
    #[error("network: {0}")]
    Net(String),
}

/// Order patterns most-selective first (bound components descending, text
/// as the deterministic tie-break), requiring each pattern to join on a
/// variable introduced earlier.
pub fn plan(query: &Query) -> Result<Vec<TriplePattern>, QueryError> {
    let mut remaining: Vec<TriplePattern> = query.patterns.clone();
    remaining.sort_by(|a, b| {
        b.bound_count()
            .cmp(&a.bound_count())
            .then_with(|| a.text().cmp(&b.text()))
    });
    let mut ordered = vec![remaining.remove(0)];
    let mut vars: Vec<String> = ordered[0].variables();
    while !remaining.is_empty() {
        let next = remaining
            .iter()
            .position(|p| p.variables().iter().any(|v| vars.contains(v)));
        match next {
            Some(i) => {
                let p = remaining.remove(i);
                vars.extend(p.variables());
                ordered.push(p);
            }
            None => {
                return Err(QueryError::DisconnectedPattern(remaining[0].text()));
            }
        }
    }
    Ok(ordered)
}

/// The operations the executor needs from the overlay, independent of the
/// transport underneath.
pub trait OverlayClient {
    /// Index lookup: all block entries intersecting `range` under `layout`.
    /// Returns the entries, the deepest hop count, and a partial flag.
    fn lookup(
        &mut self,
        layout: Layout,
        range: KeyInterval,
    ) -> Result<(Vec<BlockEntry>, u32, bool), QueryError>;

    /// Fetch the tuples of one block from its origin.
    fn fetch(
        &mut self,
        origin: PeerId,
        layout: Layout,
        molecule_key: BitKey,
        range: KeyInterval,
    ) -> Result<(Vec<TripleId>, bool), QueryError>;

    /// Resolve encoded terms back to strings.
    fn decode(&mut self, ids: &[TermId]) -> Result<Vec<(TermId, String)>, QueryError>;
}

/// Matches for one access-path shape, with the partial flag from the
/// network round trips that produced them.
pub fn resolve_pattern<C: OverlayClient>(
    client: &mut C,
    shape: &PatternShape,
) -> Result<(Vec<TripleId>, bool), QueryError> {
    let layout = select_layout(shape);
    let prefix = pattern_prefix(shape, layout)
        .expect("select_layout puts bound components first");
    let range = prefix.interval(crate::keyspace::TRIPLE_KEY_BITS);
    let (entries, _hops, mut partial) = client.lookup(layout, range)?;
    let mut out = Vec::new();
    for e in entries {
        if !e.intersects(&range) {
            continue;
        }
        let (triples, p) = client.fetch(e.origin, e.layout, e.molecule_key, range)?;
        partial |= p;
        out.extend(triples.into_iter().filter(|t| shape.matches(t)));
    }
    out.sort();
    out.dedup();
    Ok((out, partial))
}

#[derive(Clone, Debug)]
pub struct ResultSet {
    pub vars: Vec<String>,
    pub rows: Vec<Vec<TermId>>,
    /// True when any network answer was truncated or incomplete.
    pub partial: bool,
}

/// Run the query as a bind join: resolve the first pattern for seed
/// bindings, then for each later pattern probe the overlay once per
/// distinct substituted shape and merge compatible matches.
pub fn execute<C: OverlayClient>(client: &mut C, query: &Query) -> Result<ResultSet, QueryError> {
    let patterns = plan(query)?;
    let mut partial = false;
    let mut bindings: Vec<HashMap<String, TermId>> = vec![HashMap::new()];

    for pattern in &patterns {
        let mut probe_cache: HashMap<Vec<Option<TermId>>, Vec<TripleId>> = HashMap::new();
        let mut next: Vec<HashMap<String, TermId>> = Vec::new();
        for binding in &bindings {
            let shape = pattern.shape(binding);
            let cache_key = vec![shape.s, shape.p, shape.o];
            if !probe_cache.contains_key(&cache_key) {
                let (triples, p) = resolve_pattern(client, &shape)?;
                partial |= p;
                probe_cache.insert(cache_key.clone(), triples);
                if probe_cache.len().is_multiple_of(PROBE_FANOUT) {
                    log::debug!("dispatched {} probes", probe_cache.len());
                }
            }
            for t in &probe_cache[&cache_key] {
                let mut b = binding.clone();
                let mut ok = true;
                for (term, id) in [(&pattern.s, t.s), (&pattern.p, t.p), (&pattern.o, t.o)] {
                    if let Term::Var(v) = term {
                        match b.get(v) {
                            Some(&prev) if prev != id => {
                                ok = false;
                                break;
                            }
                            _ => {
                                b.insert(v.clone(), id);
                            }
                        }
                    }
                }
                if ok {
                    next.push(b);
                }
            }
        }
        bindings = next;
        if bindings.is_empty() {
            break;
        }
    }

    let mut rows: Vec<Vec<TermId>> = bindings
        .into_iter()
        .map(|b| {
            query
                .select
                .iter()
                .map(|v| b.get(v).copied().unwrap_or(TermId(0)))
                .collect()
        })
        .collect();
    rows.sort();
    rows.dedup();
    Ok(ResultSet {
        vars: query.select.clone(),
        rows,
        partial,
    })
}

/// Render rows as strings, resolving ids through the client's dictionary
/// lookup. Ids nobody can decode are shown in raw hex.
pub fn decode_rows<C: OverlayClient>(
    client: &mut C,
    result: &ResultSet,
) -> Result<Vec<Vec<String>>, QueryError> {
    let mut ids: Vec<TermId> = result.rows.iter().flatten().copied().collect();
    ids.sort();
    ids.dedup();
    let map: HashMap<TermId, String> = client.decode(&ids)?.into_iter().collect();
    Ok(result
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(|id| {
                    map.get(id)
                        .cloned()
                        .unwrap_or_else(|| format!("_:{:08x}", id.0))
                })
                .collect()
        })
        .collect())
}

// ----- simulator-backed client ---------------------------------------------

use crate::overlay::simnet::SimNetwork;

/// [`OverlayClient`] over the in-process simulated network, entering the
/// overlay at one peer.
pub struct SimClient<'a> {
    pub net: &'a mut SimNetwork,
    pub entry: usize,
}

impl OverlayClient for SimClient<'_> {
    fn lookup(
        &mut self,
        layout: Layout,
        range: KeyInterval,
    ) -> Result<(Vec<BlockEntry>, u32, bool), QueryError> {
        self.net
            .lookup_from(self.entry, layout, range)
            .map_err(|e| QueryError::Net(e.to_string()))
    }

    fn fetch(
        &mut self,
        origin: PeerId,
        layout: Layout,
        molecule_key: BitKey,
        range: KeyInterval,
    ) -> Result<(Vec<TripleId>, bool), QueryError> {
        self.net
            .fetch_from(origin, layout, molecule_key, range)
            .map_err(|e| QueryError::Net(e.to_string()))
    }

    fn decode(&mut self, ids: &[TermId]) -> Result<Vec<(TermId, String)>, QueryError> {
        // the dictionary is spread over the overlay; ask every peer and
        // merge what comes back
        let mut out: Vec<(TermId, String)> = Vec::new();
        for i in 0..self.net.len() {
            let missing: Vec<TermId> = ids
                .iter()
                .filter(|id| !out.iter().any(|(k, _)| k == *id))
                .copied()
                .collect();
            if missing.is_empty() {
                break;
            }
            let id = self.net.peer(i).id;
            let entries = self
                .net
                .dict_from(id, missing)
                .map_err(|e| QueryError::Net(e.to_string()))?;
            out.extend(entries);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::sim::SimConfig;
    use crate::overlay::PeerConfig;

    fn pattern(s: &str, p: &str, o: &str) -> TriplePattern {
        let term = |t: &str| {
            if let Some(v) = t.strip_prefix('?') {
                Term::Var(v.into())
            } else {
                Term::Bound(t.into())
            }
        };
        TriplePattern {
            s: term(s),
            p: term(p),
            o: term(o),
        }
    }

    #[test]
    fn layout_rule_table() {
        let t = Some(TermId(1));
        let f = None;
        let cases = [
            ((t, t, t), Layout::Spo),
            ((t, t, f), Layout::Spo),
            ((t, f, f), Layout::Spo),
            ((f, t, t), Layout::Pos),
            ((f, t, f), Layout::Pos),
            ((f, f, t), Layout::Osp),
            ((t, f, t), Layout::Osp),
            ((f, f, f), Layout::Spo),
        ];
        for ((s, p, o), want) in cases {
            assert_eq!(select_layout(&PatternShape { s, p, o }), want);
        }
    }

    #[test]
    fn plan_orders_by_selectivity() {
        let q = Query {
            select: vec!["x".into(), "v".into()],
            patterns: vec![
                pattern("?x", "<p2>", "?v"),
                pattern("?x", "<p1>", "<o1>"),
            ],
        };
        let ordered = plan(&q).unwrap();
        assert_eq!(ordered[0], q.patterns[1]);
    }

    #[test]
    fn plan_rejects_cartesian_products() {
        let q = Query {
            select: vec![],
            patterns: vec![pattern("?x", "<p>", "?y"), pattern("?a", "<p>", "?b")],
        };
        assert!(matches!(
            plan(&q),
            Err(QueryError::DisconnectedPattern(_))
        ));
    }

    /// Reference implementation: nested loops over the flat triple list.
    fn oracle(
        triples: &[(String, String, String)],
        query: &Query,
    ) -> Vec<Vec<TermId>> {
        let mut rows: Vec<HashMap<String, TermId>> = vec![HashMap::new()];
        for p in &query.patterns {
            let mut next = Vec::new();
            for b in &rows {
                for (ts, tp, to) in triples {
                    let t = TripleId {
                        s: hash_term(ts),
                        p: hash_term(tp),
                        o: hash_term(to),
                    };
                    let mut b2 = b.clone();
                    let mut ok = true;
                    for (term, id) in [(&p.s, t.s), (&p.p, t.p), (&p.o, t.o)] {
                        match term {
                            Term::Bound(w) => {
                                if hash_term(w) != id {
                                    ok = false;
                                    break;
                                }
                            }
                            Term::Var(v) => match b2.get(v) {
                                Some(&prev) if prev != id => {
                                    ok = false;
                                    break;
                                }
                                _ => {
                                    b2.insert(v.clone(), id);
                                }
                            },
                        }
                    }
                    if ok {
                        next.push(b2);
                    }
                }
            }
            rows = next;
        }
        let mut out: Vec<Vec<TermId>> = rows
            .into_iter()
            .map(|b| query.select.iter().map(|v| b[v]).collect())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    fn station_data() -> Vec<(String, String, String)> {
        crate::ntriples::generate(4, 12, 5)
    }

    fn loaded_net(n: usize, k: u32) -> SimNetwork {
        let mut net = SimNetwork::new(n, PeerConfig::default(), SimConfig::default());
        net.build_balanced(k);
        for (s, p, o) in station_data() {
            for t in [&s, &p, &o] {
                net.load_term(t);
            }
            let t = TripleId {
                s: hash_term(&s),
                p: hash_term(&p),
                o: hash_term(&o),
            };
            net.load_triple(&t);
        }
        net
    }

    #[test]
    fn single_patterns_match_oracle() {
        let mut net = loaded_net(4, 2);
        let data = station_data();
        let queries = [
            "SELECT ?o WHERE { <http://example.org/sensors/obs/3-1> <http://www.w3.org/ns/sosa/observedProperty> ?o }",
            "SELECT ?s WHERE { ?s <http://www.w3.org/1999/02/22-rdf-syntax-ns#type> <http://www.w3.org/ns/sosa/Observation> }",
            "SELECT ?s ?p WHERE { ?s ?p <http://www.w3.org/ns/sosa/Observation> }",
            "SELECT ?p ?o WHERE { <http://example.org/sensors/obs/3-1> ?p ?o }",
            "SELECT ?s ?p ?o WHERE { ?s ?p ?o }",
        ];
        for text in queries {
            let q = parse(text).unwrap();
            let mut client = SimClient { net: &mut net, entry: 0 };
            let got = execute(&mut client, &q).unwrap();
            assert!(!got.partial);
            assert_eq!(got.rows, oracle(&data, &q), "query: {text}");
        }
    }

    #[test]
    fn star_join_matches_oracle() {
        let mut net = loaded_net(4, 2);
        let data = station_data();
        let q = parse(
            "PREFIX sosa: <http://www.w3.org/ns/sosa/>\n\
             SELECT ?obs ?prop ?v WHERE {\n\
               ?obs a sosa:Observation .\n\
               ?obs sosa:observedProperty ?prop .\n\
               ?obs sosa:hasSimpleResult ?v .\n\
             }",
        )
        .unwrap();
        let mut client = SimClient { net: &mut net, entry: 1 };
        let got = execute(&mut client, &q).unwrap();
        let want = oracle(&data, &q);
        assert_eq!(got.rows.len(), 12 * 7);
        assert_eq!(got.rows, want);
        // and the rows decode back to terms
        let decoded = decode_rows(&mut client, &got).unwrap();
        assert!(decoded
            .iter()
            .all(|row| row.iter().all(|t| !t.starts_with("_:"))));
    }

    #[test]
    fn path_pattern_joins_across_subjects() {
        let mut net = loaded_net(2, 1);
        let data = station_data();
        let q = parse(
            "PREFIX ex: <http://example.org/sensors/vocab#>\n\
             SELECT ?station ?obs WHERE {\n\
               ?station ex:hasRecord ?rec .\n\
               ?obs ex:partOfRecord ?rec .\n\
             }",
        )
        .unwrap();
        let mut client = SimClient { net: &mut net, entry: 0 };
        let got = execute(&mut client, &q).unwrap();
        assert_eq!(got.rows, oracle(&data, &q));
        assert_eq!(got.rows.len(), 12 * 7);
    }
}
