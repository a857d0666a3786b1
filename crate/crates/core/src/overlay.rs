//! Virtual organizations and the inter-VO addressing system.
//!
//! Every peer keeps one access point per neighboring VO. Entries are defined
//! when the peer joins, by walking the ring successors and adopting the
//! successor of the first live access point they know. Departures are never
//! announced to other VOs; stale entries are repaired only when a discovery
//! runs into them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chord::{ChordRing, NodeId, SourceMetadata};
use crate::error::{Error, Result};
use crate::metrics::{Category, MessageCounts, SimTime};
use crate::network::NetworkModel;
use crate::ontology::{ConceptId, OntologyGraph, OntologyId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId {
    pub vo: OntologyId,
    pub node: NodeId,
}

impl PeerId {
    pub fn new(vo: OntologyId, node: NodeId) -> Self {
        PeerId { vo, node }
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VO{}/{}", self.vo.0, self.node)
    }
}

/// Per-peer access points, keyed by neighboring VO.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessPointTable {
    entries: BTreeMap<OntologyId, PeerId>,
}

impl AccessPointTable {
    pub fn get(&self, vo: OntologyId) -> Option<PeerId> {
        self.entries.get(&vo).copied()
    }

    pub fn set(&mut self, entry: PeerId) {
        self.entries.insert(entry.vo, entry);
    }

    pub fn remove(&mut self, vo: OntologyId) -> Option<PeerId> {
        self.entries.remove(&vo)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OntologyId, PeerId)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoStatus {
    Live,
    Disconnected,
}

#[derive(Debug, Clone)]
pub struct VirtualOrganization {
    pub ontology: OntologyId,
    pub ring: ChordRing,
    pub status: VoStatus,
}

impl VirtualOrganization {
    pub fn peers(&self) -> impl Iterator<Item = PeerId> + '_ {
        let vo = self.ontology;
        self.ring.node_ids().map(move |n| PeerId::new(vo, n))
    }
}

#[derive(Debug, Clone, Default)]
struct PeerState {
    live: bool,
    access_points: AccessPointTable,
}

/// Result of a liveness probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub alive: bool,
    pub elapsed: SimTime,
    pub messages: u64,
}

/// Outcome of a successor walk looking for an access point toward one VO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    /// Live access point found through a ring neighbor.
    pub found: Option<PeerId>,
    /// Its successor, which becomes the walker's new entry.
    pub adopted: Option<PeerId>,
    pub steps: usize,
    pub failed_checks: usize,
    pub counts: MessageCounts,
    pub elapsed: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Definition {
    pub table: AccessPointTable,
    pub unreachable: Vec<OntologyId>,
    pub counts: MessageCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repair {
    /// Live access point the pending query can be sent to right away.
    pub forward_to: PeerId,
    /// New table entry.
    pub adopted: PeerId,
    pub walk: Walk,
}

/// All virtual organizations plus the per-peer addressing state.
#[derive(Debug, Clone)]
pub struct System {
    graph: OntologyGraph,
    vos: BTreeMap<OntologyId, VirtualOrganization>,
    peers: HashMap<PeerId, PeerState>,
    bits: u32,
}

impl System {
    /// One empty VO per ontology of `graph`.
    pub fn new(graph: OntologyGraph, bits: u32) -> Self {
        let vos = graph
            .ontology_ids()
            .map(|id| {
                (
                    id,
                    VirtualOrganization {
                        ontology: id,
                        ring: ChordRing::new(bits),
                        status: VoStatus::Live,
                    },
                )
            })
            .collect();
        System {
            graph,
            vos,
            peers: HashMap::new(),
            bits,
        }
    }

    /// Populates VO `vo` with `ids` without message accounting.
    pub fn populate(&mut self, vo: OntologyId, ids: impl IntoIterator<Item = NodeId>) -> Result<()> {
        let v = self.vos.get_mut(&vo).ok_or(Error::UnknownOntology(vo))?;
        let mut all: Vec<NodeId> = v.ring.node_ids().collect();
        all.extend(ids);
        v.ring = ChordRing::from_ids(self.bits, all)?;
        for n in v.ring.node_ids() {
            self.peers.entry(PeerId::new(vo, n)).or_default().live = true;
        }
        Ok(())
    }

    pub fn graph(&self) -> &OntologyGraph {
        &self.graph
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn vo(&self, id: OntologyId) -> Result<&VirtualOrganization> {
        self.vos.get(&id).ok_or(Error::UnknownOntology(id))
    }

    pub fn vos(&self) -> impl Iterator<Item = &VirtualOrganization> {
        self.vos.values()
    }

    pub fn vo_ids(&self) -> impl Iterator<Item = OntologyId> + '_ {
        self.vos.keys().copied()
    }

    pub fn ring(&self, vo: OntologyId) -> &ChordRing {
        &self.vos[&vo].ring
    }

    pub fn status(&self, vo: OntologyId) -> VoStatus {
        self.vos.get(&vo).map_or(VoStatus::Disconnected, |v| v.status)
    }

    /// Administrator reconnection of a VO flagged as disconnected.
    pub fn reconnect(&mut self, vo: OntologyId) -> Result<()> {
        self.vos
            .get_mut(&vo)
            .ok_or(Error::UnknownOntology(vo))?
            .status = VoStatus::Live;
        Ok(())
    }

    pub fn is_live(&self, peer: PeerId) -> bool {
        self.peers.get(&peer).is_some_and(|p| p.live)
    }

    /// Whether `peer` has ever been part of the system.
    pub fn known(&self, peer: PeerId) -> bool {
        self.peers.contains_key(&peer)
    }

    pub fn live_peers(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.vos.values().flat_map(VirtualOrganization::peers)
    }

    pub fn peer_count(&self) -> usize {
        self.vos.values().map(|v| v.ring.len()).sum()
    }

    pub fn access_points(&self, peer: PeerId) -> Option<&AccessPointTable> {
        self.peers
            .get(&peer)
            .filter(|p| p.live)
            .map(|p| &p.access_points)
    }

    /// Writes an entry directly (administrator bootstrap, scripted tests).
    pub fn set_access_point(&mut self, peer: PeerId, entry: PeerId) -> Result<()> {
        if entry.vo == peer.vo || !self.graph.neighbors(peer.vo)?.contains(&entry.vo) {
            return Err(Error::NoMappingLink(peer.vo, entry.vo));
        }
        if !self.known(entry) {
            return Err(Error::UnknownPeer(entry));
        }
        let state = self
            .peers
            .get_mut(&peer)
            .filter(|p| p.live)
            .ok_or(Error::UnknownPeer(peer))?;
        state.access_points.set(entry);
        Ok(())
    }

    pub fn clear_access_point(&mut self, peer: PeerId, vo: OntologyId) {
        if let Some(p) = self.peers.get_mut(&peer) {
            p.access_points.remove(vo);
        }
    }

    pub fn neighbor_peer(&self, peer: PeerId) -> Result<PeerId> {
        let next = self.vo(peer.vo)?.ring.neighbor_peer(peer.node)?;
        Ok(PeerId::new(peer.vo, next))
    }

    /// Publishes `metadata` from `peer` into its VO's ring.
    pub fn publish(&mut self, peer: PeerId, metadata: SourceMetadata) -> Result<u64> {
        if !self.is_live(peer) {
            return Err(Error::UnknownPeer(peer));
        }
        self.vos
            .get_mut(&peer.vo)
            .expect("live peers belong to a VO")
            .ring
            .publish(peer.node, metadata)
    }

    /// Every record published in `peer`'s VO under `concept`, with the
    /// routing hops used to reach the responsible node.
    pub fn intra_vo_discover(
        &self,
        peer: PeerId,
        concept: &ConceptId,
    ) -> Result<(Vec<SourceMetadata>, u32)> {
        if !self.is_live(peer) {
            return Err(Error::UnknownPeer(peer));
        }
        self.vo(peer.vo)?.ring.find(peer.node, concept)
    }

    /// Probe from `prober` to `target`: two messages and a round trip when
    /// the target answers, one message and the full budget otherwise.
    pub fn check(&self, prober: PeerId, target: PeerId, rtt_budget: SimTime, net: &NetworkModel) -> Probe {
        let round_trip = 2 * net.hop(prober, target);
        if self.is_live(target) && round_trip <= rtt_budget {
            Probe {
                alive: true,
                elapsed: round_trip,
                messages: 2,
            }
        } else {
            Probe {
                alive: false,
                elapsed: rtt_budget,
                messages: 1,
            }
        }
    }

    /// Successor walk from `peer` for an access point toward `target_vo`:
    /// each ring neighbor in turn is asked for its own entry, which is then
    /// probed. On the first live probe the access point is asked for its
    /// successor, which is adopted.
    pub fn walk(&self, peer: PeerId, target_vo: OntologyId, net: &NetworkModel) -> Result<Walk> {
        let mut walk = Walk {
            found: None,
            adopted: None,
            steps: 0,
            failed_checks: 0,
            counts: MessageCounts::default(),
            elapsed: 0,
        };
        let mut following = self.neighbor_peer(peer)?;
        while following != peer {
            walk.steps += 1;
            walk.counts.add(Category::AddressingMaintenance, 2);
            walk.elapsed += 2 * net.hop(peer, following);
            if let Some(candidate) = self.access_points(following).and_then(|t| t.get(target_vo)) {
                let probe = self.check(peer, candidate, net.rtt_budget(), net);
                walk.counts.add(Category::ApProbe, probe.messages);
                walk.elapsed += probe.elapsed;
                if probe.alive {
                    walk.counts.add(Category::AddressingMaintenance, 2);
                    walk.elapsed += 2 * net.hop(peer, candidate);
                    walk.found = Some(candidate);
                    walk.adopted = Some(self.neighbor_peer(candidate)?);
                    return Ok(walk);
                }
                walk.failed_checks += 1;
            }
            following = self.neighbor_peer(following)?;
        }
        Ok(walk)
    }

    /// Defines every access point of a peer that has just joined its ring.
    pub fn define_access_points(&mut self, new_peer: PeerId, net: &NetworkModel) -> Result<Definition> {
        if !self.is_live(new_peer) {
            return Err(Error::UnknownPeer(new_peer));
        }
        if self.vo(new_peer.vo)?.ring.len() == 1 {
            return Err(Error::SoleSurvivorVo(new_peer));
        }
        let mut def = Definition {
            table: AccessPointTable::default(),
            unreachable: Vec::new(),
            counts: MessageCounts::default(),
        };
        for vo in self.graph.neighbors(new_peer.vo)? {
            let walk = self.walk(new_peer, vo, net)?;
            def.counts.merge(&walk.counts);
            match walk.adopted {
                Some(entry) => def.table.set(entry),
                None => def.unreachable.push(vo),
            }
        }
        let state = self.peers.get_mut(&new_peer).expect("checked live");
        state.access_points = def.table.clone();
        Ok(def)
    }

    /// Replaces `peer`'s timed-out entry toward `target_vo`. When no ring
    /// neighbor knows a live access point the target VO is flagged as
    /// disconnected.
    pub fn repair_access_point(
        &mut self,
        peer: PeerId,
        target_vo: OntologyId,
        net: &NetworkModel,
    ) -> Result<Repair> {
        let (_, outcome) = self.try_repair(peer, target_vo, net)?;
        outcome.ok_or(Error::VoDisconnected(target_vo))
    }

    /// Like [`System::repair_access_point`], also returning the walk so its
    /// messages can be booked when the repair fails.
    pub fn try_repair(
        &mut self,
        peer: PeerId,
        target_vo: OntologyId,
        net: &NetworkModel,
    ) -> Result<(Walk, Option<Repair>)> {
        if !self.is_live(peer) {
            return Err(Error::UnknownPeer(peer));
        }
        let walk = self.walk(peer, target_vo, net)?;
        match (walk.found, walk.adopted) {
            (Some(forward_to), Some(adopted)) => {
                self.peers
                    .get_mut(&peer)
                    .expect("checked live")
                    .access_points
                    .set(adopted);
                let repair = Repair {
                    forward_to,
                    adopted,
                    walk: walk.clone(),
                };
                Ok((walk, Some(repair)))
            }
            _ => {
                if let Some(v) = self.vos.get_mut(&target_vo) {
                    v.status = VoStatus::Disconnected;
                }
                self.clear_access_point(peer, target_vo);
                Ok((walk, None))
            }
        }
    }

    /// Ring join of a new peer, without any addressing work.
    pub fn join_ring(&mut self, peer: PeerId) -> Result<u64> {
        if self.known(peer) {
            return Err(Error::DuplicateNode(peer.node));
        }
        let v = self.vos.get_mut(&peer.vo).ok_or(Error::UnknownOntology(peer.vo))?;
        let cost = v.ring.join(peer.node)?;
        self.peers.insert(
            peer,
            PeerState {
                live: true,
                access_points: AccessPointTable::default(),
            },
        );
        Ok(cost)
    }

    /// Friendly departure with lazy addressing maintenance: only the ring is
    /// repaired; references held in other VOs go stale. Returns the ring
    /// maintenance messages.
    pub fn friendly_leave(&mut self, peer: PeerId) -> Result<u64> {
        if !self.is_live(peer) {
            return Err(Error::UnknownPeer(peer));
        }
        let v = self.vos.get_mut(&peer.vo).expect("live peers belong to a VO");
        let cost = v.ring.leave(peer.node)?;
        if v.ring.is_empty() {
            v.status = VoStatus::Disconnected;
        }
        let state = self.peers.get_mut(&peer).expect("checked live");
        state.live = false;
        state.access_points = AccessPointTable::default();
        Ok(cost)
    }

    /// Draws a fresh node id for `vo` that no peer has ever used there.
    pub fn fresh_node_id<R: Rng>(&self, vo: OntologyId, rng: &mut R) -> NodeId {
        let space = 1u64 << self.bits;
        loop {
            let id = NodeId(rng.gen_range(0..space));
            if !self.known(PeerId::new(vo, id)) {
                return id;
            }
        }
    }

    /// Initial addressing: the highest-id peer of each VO gets administrator
    /// entries drawn with `rng`, every other peer then runs the definition
    /// walk in descending id order so each walk starts at an already
    /// defined neighbor.
    pub fn bootstrap_access_points<R: Rng>(&mut self, net: &NetworkModel, rng: &mut R) -> Result<()> {
        let vo_ids: Vec<OntologyId> = self.vos.keys().copied().collect();
        for vo in vo_ids {
            let mut members: Vec<PeerId> = self.vos[&vo].peers().collect();
            members.reverse();
            let Some(&first) = members.first() else {
                continue;
            };
            for nb in self.graph.neighbors(vo)? {
                let remote: Vec<PeerId> = self.vos[&nb].peers().collect();
                if remote.is_empty() {
                    continue;
                }
                let entry = remote[rng.gen_range(0..remote.len())];
                self.set_access_point(first, entry)?;
            }
            for &p in &members[1..] {
                self.define_access_points(p, net)?;
            }
        }
        Ok(())
    }
}
