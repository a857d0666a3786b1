//! Discovery results checked against a brute-force search of every store,
//! plus structural audits of the paths queries take.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::brute_force;

use damt::discovery::{exhaustive_oracle, DamtPropagation, MethodId};
use damt::metrics::{Category, TraceKind};
use damt::ontology::{concept_name, OntologyId, Topology};
use damt::overlay::PeerId;
use damt::scenario::Scenario;
use damt::sim::Simulator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(method: MethodId, seed: u64) -> Scenario {
    let vo_count = 2 + (seed as usize % 9);
    let mut s = Scenario::basic(method, vo_count, 6, seed);
    s.concepts_per_ontology = 4;
    s.sources_per_peer = 2;
    s
}

fn random_origin(sim: &Simulator, rng: &mut ChaCha8Rng) -> PeerId {
    let peers: Vec<PeerId> = sim.system().live_peers().collect();
    peers[rng.gen_range(0..peers.len())]
}

fn assert_matches_oracle(method: MethodId, propagation: DamtPropagation) {
    for seed in 0..50u64 {
        let mut s = scenario(method, seed);
        s.damt_propagation = propagation;
        let mut sim = s.build(method, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            let origin = random_origin(&sim, &mut rng);
            let concept = concept_name(origin.vo, rng.gen_range(0..s.concepts_per_ontology));
            let expected = brute_force(sim.system(), origin.vo, &concept);
            assert!(!expected.is_empty(), "seed {seed}: every concept has sources");
            let r = sim.discover(origin, concept.clone()).unwrap();
            assert!(!r.partial, "seed {seed}: {:?}", r.warnings);
            assert_eq!(r.source_ids(), expected, "{method} seed {seed} from {origin} for {concept}");
        }
    }
}

#[test]
fn damt_tree_propagation_equals_brute_force() {
    assert_matches_oracle(MethodId::Damt, DamtPropagation::ShortestPathTree);
}

#[test]
fn damt_all_paths_propagation_equals_brute_force() {
    assert_matches_oracle(MethodId::Damt, DamtPropagation::AllPaths);
}

#[test]
fn baselines_equal_brute_force_when_all_peers_are_live() {
    for method in [MethodId::Dsp, MethodId::D2b2, MethodId::DFlooding] {
        assert_matches_oracle(method, DamtPropagation::default());
    }
}

#[test]
fn partial_mappings_follow_the_breadth_first_translation() {
    for seed in 0..30u64 {
        let mut s = scenario(MethodId::Damt, seed);
        s.mapping_coverage = 0.6;
        let mut sim = s.build(MethodId::Damt, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for _ in 0..4 {
            let origin = random_origin(&sim, &mut rng);
            let concept = concept_name(origin.vo, rng.gen_range(0..s.concepts_per_ontology));
            let expected = exhaustive_oracle(sim.system(), origin.vo, &concept).unwrap();
            let r = sim.discover(origin, concept).unwrap();
            assert_eq!(r.source_ids(), expected, "seed {seed}");
        }
    }
}

fn topologies() -> [Topology; 5] {
    [
        Topology::Path,
        Topology::Star,
        Topology::Complete,
        Topology::default_random(),
        Topology::MinDegree { min_degree: 3 },
    ]
}

#[test]
fn no_query_crosses_more_links_than_the_diameter() {
    for propagation in [DamtPropagation::ShortestPathTree, DamtPropagation::AllPaths] {
        for topology in topologies() {
            for seed in 0..8u64 {
                let mut s = scenario(MethodId::Damt, seed);
                s.topology = topology;
                s.damt_propagation = propagation;
                let mut sim = s.build(MethodId::Damt, 0).unwrap();
                let diameter = sim.system().graph().diameter().unwrap();
                sim.enable_trace();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..3 {
                    let origin = random_origin(&sim, &mut rng);
                    let r = sim.discover(origin, concept_name(origin.vo, 0)).unwrap();
                    assert!(r.hits.iter().all(|h| h.path.len() <= diameter));
                }
                let trace = sim.ledger().trace.as_ref().unwrap();
                let crossings: Vec<usize> = trace
                    .iter()
                    .filter(|t| t.kind == TraceKind::Send && t.category == Some(Category::InterVoQuery))
                    .map(|t| t.path_len.expect("query sends carry their path"))
                    .collect();
                if sim.system().graph().len() > 1 {
                    assert!(!crossings.is_empty());
                }
                let worst = crossings.into_iter().max().unwrap_or(0);
                assert!(
                    worst <= diameter,
                    "{topology:?} {propagation:?} seed {seed}: {worst} links, diameter {diameter}"
                );
            }
        }
    }
}

#[test]
fn result_paths_never_revisit_a_vo() {
    for propagation in [DamtPropagation::ShortestPathTree, DamtPropagation::AllPaths] {
        for topology in topologies() {
            let mut s = scenario(MethodId::Damt, 7);
            s.vo_count = 7;
            s.topology = topology;
            s.damt_propagation = propagation;
            let mut sim = s.build(MethodId::Damt, 0).unwrap();
            let origin = sim.system().live_peers().next().unwrap();
            let r = sim.discover(origin, concept_name(origin.vo, 1)).unwrap();
            assert_eq!(r.source_ids().iter().map(|(vo, _)| *vo).collect::<BTreeSet<_>>().len(), 7);
            for h in &r.hits {
                let vs = h.path.vertices();
                let distinct: BTreeSet<_> = vs.iter().collect();
                assert_eq!(distinct.len(), vs.len(), "{topology:?}: {}", h.path);
                assert_eq!(vs.first().copied().unwrap_or(origin.vo), origin.vo);
                assert_eq!(vs.last().copied().unwrap_or(origin.vo), h.vo);
            }
        }
    }
}

#[test]
fn tree_propagation_reaches_each_vo_along_one_shortest_path() {
    let mut s = scenario(MethodId::Damt, 3);
    s.vo_count = 9;
    s.topology = Topology::Complete;
    let mut sim = s.build(MethodId::Damt, 0).unwrap();
    let origin = sim.system().live_peers().next().unwrap();
    let r = sim.discover(origin, concept_name(origin.vo, 0)).unwrap();
    let mut paths: BTreeMap<OntologyId, BTreeSet<String>> = BTreeMap::new();
    for h in &r.hits {
        paths.entry(h.vo).or_default().insert(h.path.to_string());
    }
    assert_eq!(paths.len(), 9);
    assert!(paths.values().all(|p| p.len() == 1));
    assert!(r.hits.iter().all(|h| h.path.len() <= 1));
}
