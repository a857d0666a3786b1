use std::collections::{BTreeMap, BTreeSet, VecDeque};

use damt::ontology::{ConceptId, OntologyId};
use damt::overlay::System;

/// Breadth-first search from `origin`, translating the concept one link at
/// a time, then a scan of every node's store in each reached VO.
pub fn brute_force(system: &System, origin: OntologyId, concept: &ConceptId) -> BTreeSet<(OntologyId, String)> {
    let graph = system.graph();
    let mut term: BTreeMap<OntologyId, Option<ConceptId>> = BTreeMap::new();
    term.insert(origin, Some(concept.clone()));
    let mut queue = VecDeque::from([origin]);
    while let Some(v) = queue.pop_front() {
        let here = term[&v].clone();
        for w in graph.neighbors(v).unwrap() {
            if term.contains_key(&w) {
                continue;
            }
            let there = here.as_ref().and_then(|c| graph.translate(c, v, w).unwrap());
            term.insert(w, there);
            queue.push_back(w);
        }
    }
    let mut out = BTreeSet::new();
    for (vo, wanted) in term {
        let Some(wanted) = wanted else { continue };
        let ring = system.ring(vo);
        for id in ring.node_ids() {
            for records in ring.node(id).unwrap().store.values() {
                for m in records.iter().filter(|m| m.concept == wanted) {
                    out.insert((vo, m.source_id.clone()));
                }
            }
        }
    }
    out
}
