//! Discovery methods: DAMT and the three baselines (super-peer, pairwise
//! chain, flooding).
//!
//! Each method fixes its own mapping topology and inter-VO contacts
//! ([`Layout`]), a forwarding rule used by the simulator, and the eager
//! addressing maintenance the baselines pay on every join and leave. DAMT
//! pays none at departure time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chord::{hash_key, NodeId, SourceMetadata};
use crate::error::{Error, Result};
use crate::metrics::{Category, MessageCounts, SimTime};
use crate::ontology::{ConceptId, OntologyGraph, OntologyId, Topology, VoPath};
use crate::overlay::{PeerId, System, VoStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodId {
    #[serde(rename = "damt", alias = "DAMT")]
    Damt,
    #[serde(rename = "dsp", alias = "DSP")]
    Dsp,
    #[serde(rename = "d2b2", alias = "D2B2")]
    D2b2,
    #[serde(rename = "dflooding", alias = "DFLOODING")]
    DFlooding,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [MethodId::Damt, MethodId::Dsp, MethodId::D2b2, MethodId::DFlooding];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Damt => "DAMT",
            MethodId::Dsp => "DSP",
            MethodId::D2b2 => "D2B2",
            MethodId::DFlooding => "DFLOODING",
        }
    }

    /// Mapping topology the method imposes; DAMT accepts any connected one.
    pub fn imposed_topology(self, requested: Topology) -> Topology {
        match self {
            MethodId::Damt => requested,
            MethodId::Dsp => Topology::MinDegree { min_degree: 4 },
            MethodId::D2b2 => Topology::Path,
            MethodId::DFlooding => Topology::Complete,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Which access points a DAMT peer forwards a query instance to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamtPropagation {
    /// Every neighboring VO not yet on the instance's path. The number of
    /// instances grows with the number of simple paths in the graph.
    AllPaths,
    /// Only neighboring VOs whose breadth-first parent, seen from the
    /// origin VO, is the forwarding VO: each VO is entered once.
    #[default]
    ShortestPathTree,
}

/// A query instance as it travels between VOs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscoveryQuery {
    pub query_id: u64,
    /// Concept expressed in the ontology of the VO that receives it.
    pub concept: ConceptId,
    pub origin: PeerId,
    /// Remaining mapping links this instance may still cross.
    pub ttl: u32,
    pub path: VoPath,
    pub submitted_at: SimTime,
    /// Peers to traverse back to the origin, nearest last.
    pub back: Vec<PeerId>,
    /// Whether the receiver searches its own VO.
    pub lookup: bool,
}

impl DiscoveryQuery {
    /// Origin VO plus every VO already on the path.
    pub fn visits(&self, vo: OntologyId) -> bool {
        vo == self.origin.vo || self.path.visits(vo)
    }

    /// The instance `at` sends on to VO `to`: concept translated over the
    /// mapping link, one more step on the path, one less hop of budget and
    /// `at` appended to the return route. `None` when the concept has no
    /// counterpart in `to`.
    pub fn forwarded(&self, graph: &OntologyGraph, at: PeerId, to: OntologyId) -> Option<DiscoveryQuery> {
        let concept = graph.translate(&self.concept, at.vo, to).ok()??;
        let mut back = self.back.clone();
        back.push(at);
        Some(DiscoveryQuery {
            query_id: self.query_id,
            concept,
            origin: self.origin,
            ttl: self.ttl.saturating_sub(1),
            path: self.path.extended(at.vo, to),
            submitted_at: self.submitted_at,
            back,
            lookup: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hit {
    pub metadata: SourceMetadata,
    pub vo: OntologyId,
    pub path: VoPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryResponse {
    pub query_id: u64,
    pub hits: Vec<Hit>,
    pub completed_at: Option<SimTime>,
    pub partial: bool,
    pub warnings: Vec<String>,
}

impl DiscoveryResponse {
    pub fn source_ids(&self) -> BTreeSet<(OntologyId, String)> {
        self.hits
            .iter()
            .map(|h| (h.vo, h.metadata.source_id.clone()))
            .collect()
    }
}

/// Forwarding decision for one neighboring VO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Forward {
    Send(PeerId, DiscoveryQuery),
    /// No usable entry: repair first, then send.
    Repair(OntologyId, DiscoveryQuery),
    /// Target VO flagged as disconnected.
    Unreachable(OntologyId),
}

/// DAMT propagation at peer `at`: one child per access point whose VO is
/// not yet on the path, with the concept translated over the mapping link.
/// With a breadth-first `tree` (child VO to parent VO, rooted at the origin
/// VO) only the tree children of `at`'s VO are considered.
pub fn damt_forwards(
    system: &System,
    at: PeerId,
    query: &DiscoveryQuery,
    tree: Option<&BTreeMap<OntologyId, OntologyId>>,
) -> Vec<Forward> {
    if query.ttl == 0 {
        return Vec::new();
    }
    let graph = system.graph();
    let table = system.access_points(at);
    let mut out = Vec::new();
    for nb in graph.neighbors(at.vo).unwrap_or_default() {
        if query.visits(nb) || tree.is_some_and(|t| t.get(&nb) != Some(&at.vo)) {
            continue;
        }
        if system.status(nb) == VoStatus::Disconnected {
            out.push(Forward::Unreachable(nb));
            continue;
        }
        let Some(q) = query.forwarded(graph, at, nb) else {
            continue;
        };
        match table.and_then(|t| t.get(nb)) {
            Some(entry) => out.push(Forward::Send(entry, q)),
            None => out.push(Forward::Repair(nb, q)),
        }
    }
    out
}

fn chain_concept(vo: OntologyId) -> ConceptId {
    ConceptId::from(format!("chain-mapping:{}", vo.0).as_str())
}

/// Method-specific contacts between VOs.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    Damt {
        propagation: DamtPropagation,
    },
    Dsp {
        super_peers: BTreeMap<OntologyId, PeerId>,
        diameter: u32,
    },
    D2b2 {
        /// Per VO: pointers to the gateway of the previous and next VO.
        partners: BTreeMap<OntologyId, (Option<PeerId>, Option<PeerId>)>,
    },
    DFlooding {
        /// `(from, to)` → contact peer in `to` used by every peer of `from`.
        contacts: BTreeMap<(OntologyId, OntologyId), PeerId>,
    },
}

impl Layout {
    /// Builds the method's contacts over a populated system.
    pub fn build<R: Rng>(method: MethodId, system: &System, rng: &mut R) -> Result<Layout> {
        Ok(match method {
            MethodId::Damt => Layout::Damt {
                propagation: DamtPropagation::default(),
            },
            MethodId::Dsp => {
                let mut super_peers = BTreeMap::new();
                for vo in system.vos() {
                    let members: Vec<PeerId> = vo.peers().collect();
                    if members.is_empty() {
                        continue;
                    }
                    super_peers.insert(vo.ontology, members[rng.gen_range(0..members.len())]);
                }
                Layout::Dsp {
                    super_peers,
                    diameter: system.graph().diameter()? as u32,
                }
            }
            MethodId::D2b2 => {
                let mut layout = Layout::D2b2 {
                    partners: BTreeMap::new(),
                };
                layout.refresh_partners(system);
                layout
            }
            MethodId::DFlooding => {
                let mut contacts = BTreeMap::new();
                let ids: Vec<OntologyId> = system.vo_ids().collect();
                for &from in &ids {
                    for &to in &ids {
                        if from == to {
                            continue;
                        }
                        let members: Vec<PeerId> = system.vo(to)?.peers().collect();
                        if !members.is_empty() {
                            contacts.insert((from, to), members[rng.gen_range(0..members.len())]);
                        }
                    }
                }
                Layout::DFlooding { contacts }
            }
        })
    }

    pub fn method(&self) -> MethodId {
        match self {
            Layout::Damt { .. } => MethodId::Damt,
            Layout::Dsp { .. } => MethodId::Dsp,
            Layout::D2b2 { .. } => MethodId::D2b2,
            Layout::DFlooding { .. } => MethodId::DFlooding,
        }
    }

    /// Gateway of a VO in the pairwise chain: the peer responsible for the
    /// VO's chain-mapping record.
    pub fn chain_key(system: &System, vo: OntologyId) -> NodeId {
        hash_key(&chain_concept(vo), system.bits())
    }

    pub fn gateway(system: &System, vo: OntologyId) -> Option<PeerId> {
        let ring = system.ring(vo);
        ring.successor_of(Self::chain_key(system, vo))
            .map(|n| PeerId::new(vo, n))
    }

    fn refresh_partners(&mut self, system: &System) {
        if let Layout::D2b2 { partners } = self {
            let ids: Vec<OntologyId> = system.vo_ids().collect();
            partners.clear();
            for (i, &vo) in ids.iter().enumerate() {
                let prev = i.checked_sub(1).and_then(|j| Self::gateway(system, ids[j]));
                let next = ids.get(i + 1).and_then(|&n| Self::gateway(system, n));
                partners.insert(vo, (prev, next));
            }
        }
    }

    /// Chain neighbor of `vo` in direction `dir` (-1 or +1).
    pub fn chain_neighbor(system: &System, vo: OntologyId, dir: i8) -> Option<OntologyId> {
        let ids: Vec<OntologyId> = system.vo_ids().collect();
        let i = ids.iter().position(|&v| v == vo)? as i64 + dir as i64;
        usize::try_from(i).ok().and_then(|i| ids.get(i).copied())
    }

    pub fn partner(&self, vo: OntologyId, dir: i8) -> Option<PeerId> {
        match self {
            Layout::D2b2 { partners } => partners
                .get(&vo)
                .and_then(|&(prev, next)| if dir < 0 { prev } else { next }),
            _ => None,
        }
    }

    pub fn super_peer(&self, vo: OntologyId) -> Option<PeerId> {
        match self {
            Layout::Dsp { super_peers, .. } => super_peers.get(&vo).copied(),
            _ => None,
        }
    }

    pub fn contact(&self, from: OntologyId, to: OntologyId) -> Option<PeerId> {
        match self {
            Layout::DFlooding { contacts } => contacts.get(&(from, to)).copied(),
            _ => None,
        }
    }

    /// Eager addressing maintenance after `peer` left (`joined == false`)
    /// or joined VO `peer.vo`. The system must already reflect the change.
    /// DAMT returns nothing here: its joins are handled by the access-point
    /// definition and its departures are lazy.
    pub fn on_membership_change(&mut self, system: &System, peer: PeerId, joined: bool) -> MessageCounts {
        let mut counts = MessageCounts::default();
        let vo_sizes: BTreeMap<OntologyId, u64> = system
            .vos()
            .map(|v| (v.ontology, v.ring.len() as u64))
            .collect();
        let vo_count = vo_sizes.len() as u64;
        let refresh_all: u64 = vo_sizes.values().map(|n| n.saturating_sub(1)).sum();
        let refresh_others = refresh_all - vo_sizes[&peer.vo].saturating_sub(1);
        match self {
            Layout::Damt { .. } => {}
            Layout::DFlooding { contacts } => {
                if joined {
                    // Contact table copied from the ring successor.
                    counts.add(Category::AddressingMaintenance, 2);
                }
                // Announcement to one contact per VO, then every peer of
                // those VOs refreshes its contacts.
                counts.add(Category::AddressingMaintenance, vo_count - 1 + refresh_others);
                if !joined {
                    let replacement = system
                        .ring(peer.vo)
                        .successor_of(peer.node)
                        .map(|n| PeerId::new(peer.vo, n));
                    for c in contacts.values_mut() {
                        if *c == peer {
                            if let Some(r) = replacement {
                                *c = r;
                            }
                        }
                    }
                }
            }
            Layout::Dsp { super_peers, .. } => {
                let graph = system.graph();
                let flood = (2 * graph.edge_count() as u64).saturating_sub(vo_count - 1);
                counts.add(Category::AddressingMaintenance, 2 + flood + refresh_all);
                if !joined && super_peers.get(&peer.vo) == Some(&peer) {
                    if let Some(next) = system.ring(peer.vo).successor_of(peer.node) {
                        super_peers.insert(peer.vo, PeerId::new(peer.vo, next));
                        let degree = graph.neighbors(peer.vo).map(|n| n.len()).unwrap_or(0) as u64;
                        counts.add(
                            Category::AddressingMaintenance,
                            vo_sizes[&peer.vo].saturating_sub(1) + 2 * degree,
                        );
                    }
                }
            }
            Layout::D2b2 { .. } => {
                // Routed to the gateway holding the pair mapping, relayed and
                // acknowledged pairwise down the chain, and every peer then
                // refreshes both of its pair pointers.
                let ring = system.ring(peer.vo);
                let key = Self::chain_key(system, peer.vo);
                let hops = match (joined, ring.is_empty()) {
                    (_, true) => 0,
                    (true, false) => ring.lookup(peer.node, key).map(|(_, h)| h).unwrap_or(0),
                    (false, false) => {
                        let start = ring.successor_of(peer.node).expect("non-empty ring");
                        ring.lookup(start, key).map(|(_, h)| h).unwrap_or(0) + 1
                    }
                };
                counts.add(
                    Category::AddressingMaintenance,
                    hops as u64 + 1 + 2 * (vo_count - 1) + 2 * refresh_all,
                );
                self.refresh_partners(system);
            }
        }
        counts
    }
}

/// Searches every VO of `system` directly for the metadata a complete
/// discovery of `concept` from `origin_vo` must return: breadth-first over
/// the mapping graph, translating along the BFS path, then a scan of every
/// node's store in each VO.
pub fn exhaustive_oracle(
    system: &System,
    origin_vo: OntologyId,
    concept: &ConceptId,
) -> Result<BTreeSet<(OntologyId, String)>> {
    let graph = system.graph();
    let mut out = BTreeSet::new();
    for vo in graph.ontology_ids() {
        let path = graph
            .shortest_path(origin_vo, vo)
            .ok_or(Error::DisconnectedGraph)?;
        let Some(target) = graph.translate_along_path(concept, &path)? else {
            continue;
        };
        let ring = system.ring(vo);
        for node in ring.node_ids() {
            for set in ring.node(node).expect("listed").store.values() {
                for m in set {
                    if m.concept == target {
                        out.insert((vo, m.source_id.clone()));
                    }
                }
            }
        }
    }
    Ok(out)
}
