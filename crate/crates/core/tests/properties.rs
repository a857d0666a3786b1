#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};

use damt::chord::{ChordRing, NodeId, SourceMetadata};
use damt::ontology::{ConceptId, DomainOntology, MappingLink, OntologyGraph, OntologyId, VoPath};
use damt::overlay::PeerId;
use proptest::prelude::*;

fn vertex(i: usize) -> OntologyId {
    OntologyId(i as u32)
}

fn concept(v: usize, k: usize) -> ConceptId {
    ConceptId::from(format!("v{v}k{k}").as_str())
}

/// Graph on `n` vertices whose edges are the pairs `(a, b)`, `a < b`, for
/// which the matching flag is set. Every link maps `k` to `k`.
fn graph_from(n: usize, flags: &[bool], concepts: usize) -> OntologyGraph {
    let mut g = OntologyGraph::new();
    for v in 0..n {
        g.add_ontology(DomainOntology::new(vertex(v), (0..concepts).map(|k| concept(v, k))).unwrap())
            .unwrap();
    }
    let mut i = 0;
    for a in 0..n {
        for b in a + 1..n {
            if flags[i] {
                let pairs = (0..concepts).map(|k| (concept(a, k), concept(b, k)));
                g.add_link(MappingLink::new(vertex(a), vertex(b), pairs).unwrap()).unwrap();
            }
            i += 1;
        }
    }
    g
}

/// All-pairs distances by Floyd-Warshall; `None` for unreachable pairs.
fn floyd(n: usize, flags: &[bool]) -> Vec<Vec<Option<usize>>> {
    let mut d = vec![vec![None; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = Some(0);
    }
    let mut i = 0;
    for a in 0..n {
        for b in a + 1..n {
            if flags[i] {
                d[a][b] = Some(1);
                d[b][a] = Some(1);
            }
            i += 1;
        }
    }
    for k in 0..n {
        for a in 0..n {
            for b in 0..n {
                if let (Some(x), Some(y)) = (d[a][k], d[k][b]) {
                    if d[a][b].is_none_or(|cur| x + y < cur) {
                        d[a][b] = Some(x + y);
                    }
                }
            }
        }
    }
    d
}

fn graph_case() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (1usize..=12).prop_flat_map(|n| {
        let pairs = n * (n - 1) / 2;
        (Just(n), proptest::collection::vec(proptest::bool::weighted(0.35), pairs))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn diameter_matches_all_pairs_distances((n, flags) in graph_case()) {
        let g = graph_from(n, &flags, 1);
        let d = floyd(n, &flags);
        let connected = d.iter().flatten().all(Option::is_some);
        match g.diameter() {
            Ok(diam) => {
                prop_assert!(connected);
                let expected = d.iter().flatten().map(|x| x.unwrap()).max().unwrap();
                prop_assert_eq!(diam, expected);
            }
            Err(_) => prop_assert!(!connected),
        }
        prop_assert_eq!(g.is_connected(), connected);
        for v in 0..n {
            let from_v = g.distances_from(vertex(v));
            for w in 0..n {
                prop_assert_eq!(from_v.get(&vertex(w)).copied(), d[v][w]);
            }
        }
    }

    #[test]
    fn neighbor_relation_is_symmetric((n, flags) in graph_case()) {
        let g = graph_from(n, &flags, 1);
        for a in 0..n {
            for b in g.neighbors(vertex(a)).unwrap() {
                prop_assert!(g.neighbors(b).unwrap().contains(&vertex(a)));
                prop_assert!(g.link(vertex(a), b).is_some());
                prop_assert!(g.link(b, vertex(a)).is_some());
            }
        }
    }

    #[test]
    fn shortest_paths_have_bfs_length((n, flags) in graph_case()) {
        let g = graph_from(n, &flags, 1);
        let d = floyd(n, &flags);
        for a in 0..n {
            for b in 0..n {
                let path = g.shortest_path(vertex(a), vertex(b));
                prop_assert_eq!(path.as_ref().map(VoPath::len), d[a][b]);
                if let Some(p) = path {
                    let vs = p.vertices();
                    let distinct: BTreeSet<_> = vs.iter().collect();
                    prop_assert_eq!(distinct.len(), vs.len());
                }
            }
        }
    }

    #[test]
    fn translation_round_trips(
        size in 1usize..20,
        shuffle in proptest::collection::vec(any::<u32>(), 20),
        keep in proptest::collection::vec(any::<bool>(), 20),
    ) {
        // A partial bijection between two ontologies of `size` concepts.
        let mut targets: Vec<usize> = (0..size).collect();
        targets.sort_by_key(|&k| shuffle[k]);
        let (a, b) = (vertex(0), vertex(1));
        let mut g = OntologyGraph::new();
        g.add_ontology(DomainOntology::new(a, (0..size).map(|k| concept(0, k))).unwrap()).unwrap();
        g.add_ontology(DomainOntology::new(b, (0..size).map(|k| concept(1, k))).unwrap()).unwrap();
        let pairs: Vec<_> = (0..size)
            .filter(|&k| keep[k])
            .map(|k| (concept(0, k), concept(1, targets[k])))
            .collect();
        g.add_link(MappingLink::new(a, b, pairs.clone()).unwrap()).unwrap();
        let there = VoPath::from_steps(vec![(a, b)]).unwrap();
        let back = there.reversed();
        for k in 0..size {
            let x = concept(0, k);
            let y = g.translate(&x, a, b).unwrap();
            prop_assert_eq!(y.is_some(), keep[k]);
            if let Some(y) = y {
                prop_assert_eq!(&y, &concept(1, targets[k]));
                prop_assert_eq!(g.translate(&y, b, a).unwrap(), Some(x.clone()));
                let along = g.translate_along_path(&x, &there).unwrap().unwrap();
                prop_assert_eq!(g.translate_along_path(&along, &back).unwrap(), Some(x));
            }
        }
    }
}

#[derive(Debug, Clone)]
enum RingOp {
    Join(u64),
    Leave(usize),
}

fn ring_ops() -> impl Strategy<Value = (BTreeSet<u64>, Vec<RingOp>)> {
    let initial = proptest::collection::btree_set(0u64..64, 1..=20);
    let op = prop_oneof![(0u64..64).prop_map(RingOp::Join), any::<usize>().prop_map(RingOp::Leave)];
    (initial, proptest::collection::vec(op, 0..=50))
}

/// First member at or after `key`, wrapping, by linear scan.
fn responsible(members: &BTreeSet<u64>, key: u64) -> u64 {
    members.iter().copied().find(|&m| m >= key).unwrap_or_else(|| *members.iter().next().unwrap())
}

fn record(k: usize) -> SourceMetadata {
    SourceMetadata {
        source_id: format!("s{k}"),
        owner: PeerId::new(vertex(0), NodeId(0)),
        concept: concept(0, k),
        descriptor: String::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn ring_stays_consistent_under_membership_changes((initial, ops) in ring_ops()) {
        let mut ring = ChordRing::from_ids(6, initial.iter().map(|&i| NodeId(i))).unwrap();
        let mut members = initial.clone();
        let first = NodeId(*members.iter().next().unwrap());
        let mut published = BTreeMap::new();
        for k in 0..12 {
            ring.publish(first, record(k)).unwrap();
            published.insert(concept(0, k), format!("s{k}"));
        }
        for op in ops {
            match op {
                RingOp::Join(id) if !members.contains(&id) => {
                    ring.join(NodeId(id)).unwrap();
                    members.insert(id);
                }
                RingOp::Join(id) => prop_assert!(ring.join(NodeId(id)).is_err()),
                RingOp::Leave(i) if members.len() > 1 => {
                    let id = *members.iter().nth(i % members.len()).unwrap();
                    ring.leave(NodeId(id)).unwrap();
                    members.remove(&id);
                }
                RingOp::Leave(_) => {}
            }
            prop_assert_eq!(ring.check_invariants(), Ok(()));
            prop_assert_eq!(ring.len(), members.len());
            for &start in &members {
                for key in (0..64).step_by(7) {
                    let (owner, hops) = ring.lookup(NodeId(start), NodeId(key)).unwrap();
                    prop_assert_eq!(owner.0, responsible(&members, key));
                    prop_assert!(hops as usize <= members.len());
                }
            }
            for (c, id) in &published {
                let (found, _) = ring.find(first_member(&members), c).unwrap();
                prop_assert!(found.iter().any(|m| &m.source_id == id), "lost {}", id);
            }
        }
    }
}

fn first_member(members: &BTreeSet<u64>) -> NodeId {
    NodeId(*members.iter().next().unwrap())
}
