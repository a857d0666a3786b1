//! Chord ring used inside one virtual organization.
//!
//! Maintenance is eager: `join` and `leave` leave every finger table exact
//! and return the number of messages the classic Chord join/leave protocol
//! would have exchanged to get there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ontology::ConceptId;
use crate::overlay::PeerId;

pub const DEFAULT_ID_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Metadata describing one data source.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceMetadata {
    pub source_id: String,
    pub owner: PeerId,
    pub concept: ConceptId,
    pub descriptor: String,
}

/// Stable `bits`-wide digest of a concept: the leading 8 bytes of its
/// SHA-256, big-endian, reduced modulo `2^bits`.
pub fn hash_key(concept: &ConceptId, bits: u32) -> NodeId {
    let digest = Sha256::digest(concept.as_str().as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    NodeId(u64::from_be_bytes(head) & mask(bits))
}

fn mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingNode {
    pub id: NodeId,
    pub successor: NodeId,
    pub predecessor: NodeId,
    pub fingers: Vec<NodeId>,
    pub store: BTreeMap<NodeId, BTreeSet<SourceMetadata>>,
}

impl RingNode {
    fn alone(id: NodeId, bits: u32) -> Self {
        RingNode {
            id,
            successor: id,
            predecessor: id,
            fingers: vec![id; bits as usize],
            store: BTreeMap::new(),
        }
    }

    pub fn stored_records(&self) -> usize {
        self.store.values().map(BTreeSet::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordRing {
    bits: u32,
    nodes: BTreeMap<NodeId, RingNode>,
}

impl ChordRing {
    pub fn new(bits: u32) -> Self {
        assert!((1..=63).contains(&bits), "identifier width must be in 1..=63");
        ChordRing {
            bits,
            nodes: BTreeMap::new(),
        }
    }

    /// Builds a ring with exact routing state and no message accounting.
    pub fn from_ids(bits: u32, ids: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let mut ring = ChordRing::new(bits);
        for id in ids {
            ring.check_id(id)?;
            if ring.nodes.insert(id, RingNode::alone(id, bits)).is_some() {
                return Err(Error::DuplicateNode(id));
            }
        }
        let ids: Vec<NodeId> = ring.nodes.keys().copied().collect();
        for id in ids {
            ring.rebuild_node(id);
        }
        Ok(ring)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn modulus(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&RingNode> {
        self.nodes.get(&id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn key_for(&self, concept: &ConceptId) -> NodeId {
        hash_key(concept, self.bits)
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.modulus() {
            return Err(Error::UnknownNode(id));
        }
        Ok(())
    }

    fn add(&self, a: u64, b: u64) -> u64 {
        (a + b) & mask(self.bits)
    }

    fn sub(&self, a: u64, b: u64) -> u64 {
        a.wrapping_sub(b) & mask(self.bits)
    }

    /// Distance travelled clockwise from `a` to `b`.
    fn dist(&self, a: NodeId, b: NodeId) -> u64 {
        self.sub(b.0, a.0)
    }

    /// `x` in the clockwise half-open interval `(a, b]`; the whole circle
    /// when `a == b`.
    fn in_half_open(&self, x: NodeId, a: NodeId, b: NodeId) -> bool {
        a == b || (self.dist(a, x) != 0 && self.dist(a, x) <= self.dist(a, b))
    }

    /// `x` in the clockwise open interval `(a, b)`.
    fn in_open(&self, x: NodeId, a: NodeId, b: NodeId) -> bool {
        let dx = self.dist(a, x);
        if a == b {
            return dx != 0;
        }
        dx != 0 && dx < self.dist(a, b)
    }

    /// First live node at or after `key` on the circle.
    pub fn successor_of(&self, key: NodeId) -> Option<NodeId> {
        self.nodes
            .range(key..)
            .next()
            .or_else(|| self.nodes.iter().next())
            .map(|(&k, _)| k)
    }

    fn predecessor_of(&self, key: NodeId) -> Option<NodeId> {
        self.nodes
            .range(..key)
            .next_back()
            .or_else(|| self.nodes.iter().next_back())
            .map(|(&k, _)| k)
    }

    /// Next routing hop from `at` toward the node responsible for `key`, or
    /// `None` when `at` is itself responsible.
    pub fn next_hop(&self, at: NodeId, key: NodeId) -> Option<NodeId> {
        let node = &self.nodes[&at];
        if self.in_half_open(key, node.predecessor, at) {
            return None;
        }
        if self.in_half_open(key, at, node.successor) {
            return Some(node.successor);
        }
        node.fingers
            .iter()
            .rev()
            .find(|&&f| self.in_open(f, at, key))
            .copied()
            .or(Some(node.successor))
    }

    /// Routes from `start` to the node responsible for `key`, returning that
    /// node and the number of routing messages used.
    pub fn lookup(&self, start: NodeId, key: NodeId) -> Result<(NodeId, u32)> {
        if !self.nodes.contains_key(&start) {
            return Err(Error::UnknownNode(start));
        }
        let mut at = start;
        let mut hops = 0;
        while let Some(next) = self.next_hop(at, key) {
            at = next;
            hops += 1;
            debug_assert!(hops as usize <= self.nodes.len() + 1, "routing loop");
        }
        Ok((at, hops))
    }

    /// Stores `metadata` at the node responsible for its concept. Returns the
    /// number of messages used (routing plus the store request).
    pub fn publish(&mut self, peer: NodeId, metadata: SourceMetadata) -> Result<u64> {
        let key = self.key_for(&metadata.concept);
        let (owner, hops) = self.lookup(peer, key)?;
        self.nodes
            .get_mut(&owner)
            .expect("lookup returns live nodes")
            .store
            .entry(key)
            .or_default()
            .insert(metadata);
        Ok(hops as u64 + u64::from(owner != peer))
    }

    /// Records published under `concept` held by `node`.
    pub fn records_at(&self, node: NodeId, concept: &ConceptId) -> Vec<SourceMetadata> {
        let key = self.key_for(concept);
        self.nodes
            .get(&node)
            .and_then(|n| n.store.get(&key))
            .map(|set| set.iter().filter(|m| &m.concept == concept).cloned().collect())
            .unwrap_or_default()
    }

    /// Lookup plus store read; the intra-organization search.
    pub fn find(&self, start: NodeId, concept: &ConceptId) -> Result<(Vec<SourceMetadata>, u32)> {
        let (owner, hops) = self.lookup(start, self.key_for(concept))?;
        Ok((self.records_at(owner, concept), hops))
    }

    /// The ring successor of `peer`.
    pub fn neighbor_peer(&self, peer: NodeId) -> Result<NodeId> {
        self.nodes
            .get(&peer)
            .map(|n| n.successor)
            .ok_or(Error::UnknownNode(peer))
    }

    fn exact_fingers(&self, id: NodeId) -> Vec<NodeId> {
        (0..self.bits)
            .map(|k| {
                self.successor_of(NodeId(self.add(id.0, 1u64 << k)))
                    .expect("ring is non-empty")
            })
            .collect()
    }

    fn rebuild_node(&mut self, id: NodeId) {
        let fingers = self.exact_fingers(id);
        let pred = self
            .predecessor_of(id)
            .expect("ring is non-empty");
        let node = self.nodes.get_mut(&id).expect("node exists");
        node.successor = fingers[0];
        node.predecessor = pred;
        node.fingers = fingers;
    }

    /// Nodes (other than `skip`) whose finger `k` target lies in `(from, to]`.
    fn nodes_with_finger_start_in(
        &self,
        k: u32,
        from: NodeId,
        to: NodeId,
        skip: NodeId,
    ) -> Vec<NodeId> {
        let span = 1u64 << k;
        let lo = NodeId(self.sub(from.0, span));
        let hi = NodeId(self.sub(to.0, span));
        self.nodes
            .keys()
            .copied()
            .filter(|&p| p != skip && self.in_half_open(p, lo, hi))
            .collect()
    }

    /// Adds `id` to the ring. Returns the maintenance messages exchanged:
    /// locating the successor, initialising fingers, updating other nodes'
    /// fingers, pointer notifications and the key handoff.
    pub fn join(&mut self, id: NodeId) -> Result<u64> {
        self.check_id(id)?;
        if self.nodes.contains_key(&id) {
            return Err(Error::DuplicateNode(id));
        }
        let Some(bootstrap) = self.nodes.keys().next().copied() else {
            self.nodes.insert(id, RingNode::alone(id, self.bits));
            return Ok(0);
        };

        // Costs are measured on the ring as the joining node finds it.
        let (succ, hops) = self.lookup(bootstrap, id)?;
        let pred = self.nodes[&succ].predecessor;
        let mut messages = hops as u64 + 1;

        // A finger that falls before the previous one reuses it; every other
        // finger costs a lookup routed through the successor.
        let mut prev_finger = succ;
        for k in 1..self.bits {
            let start = NodeId(self.add(id.0, 1u64 << k));
            if self.in_half_open(start, id, prev_finger) {
                continue;
            }
            let (found, hops) = self.lookup(succ, start)?;
            messages += hops as u64 + 1;
            let before_start = NodeId(self.sub(start.0, 1));
            prev_finger = if self.in_half_open(id, before_start, found) {
                id
            } else {
                found
            };
        }

        // Successor and predecessor pointer updates.
        messages += 2;

        let mut touched = BTreeSet::new();
        for k in 0..self.bits {
            let target = NodeId(self.sub(id.0, 1u64 << k));
            let (_, hops) = self.lookup(succ, target)?;
            let updated = self.nodes_with_finger_start_in(k, pred, id, id);
            messages += hops as u64 + updated.len() as u64 + 1;
            touched.extend(updated);
        }

        let moved: BTreeMap<NodeId, BTreeSet<SourceMetadata>> = {
            let succ_node = self.nodes.get_mut(&succ).expect("successor is live");
            let keys: Vec<NodeId> = succ_node
                .store
                .keys()
                .copied()
                .filter(|&key| in_half_open_raw(key, pred, id, self.bits))
                .collect();
            keys.into_iter()
                .map(|key| (key, succ_node.store.remove(&key).unwrap()))
                .collect()
        };
        if !moved.is_empty() {
            messages += 1;
        }

        let mut node = RingNode::alone(id, self.bits);
        node.store = moved;
        self.nodes.insert(id, node);
        touched.insert(id);
        touched.insert(pred);
        touched.insert(succ);
        for t in touched {
            self.rebuild_node(t);
        }
        Ok(messages)
    }

    /// Friendly departure of `id`: keys go to its successor and every finger
    /// pointing at it is redirected. Returns the maintenance messages.
    pub fn leave(&mut self, id: NodeId) -> Result<u64> {
        let node = self.nodes.get(&id).ok_or(Error::UnknownNode(id))?;
        if self.nodes.len() == 1 {
            self.nodes.remove(&id);
            return Ok(0);
        }
        let (pred, succ) = (node.predecessor, node.successor);
        let mut messages = 0u64;
        if !node.store.is_empty() {
            messages += 1;
        }
        messages += 2;

        let mut touched = BTreeSet::new();
        for k in 0..self.bits {
            let target = NodeId(self.sub(id.0, 1u64 << k));
            let (_, hops) = self.lookup(succ, target)?;
            let updated = self.nodes_with_finger_start_in(k, pred, id, id);
            messages += hops as u64 + updated.len() as u64 + 1;
            touched.extend(updated);
        }

        let departing = self.nodes.remove(&id).expect("checked above");
        let succ_node = self.nodes.get_mut(&succ).expect("successor is live");
        for (key, records) in departing.store {
            succ_node.store.entry(key).or_default().extend(records);
        }
        touched.insert(pred);
        touched.insert(succ);
        for t in touched {
            self.rebuild_node(t);
        }
        Ok(messages)
    }

    /// Verifies pointers, fingers and key placement against the definition.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for (&id, node) in &self.nodes {
            let fingers = self.exact_fingers(id);
            if node.fingers != fingers {
                return Err(format!("{id} has stale fingers"));
            }
            if node.successor != fingers[0] {
                return Err(format!("{id} has a wrong successor"));
            }
            if self.nodes[&node.successor].predecessor != id {
                return Err(format!("successor of {id} does not point back"));
            }
            for &key in node.store.keys() {
                if self.successor_of(key) != Some(id) {
                    return Err(format!("{id} holds key {key} it is not responsible for"));
                }
            }
        }
        Ok(())
    }
}

fn in_half_open_raw(x: NodeId, a: NodeId, b: NodeId, bits: u32) -> bool {
    let m = mask(bits);
    let dx = x.0.wrapping_sub(a.0) & m;
    let db = b.0.wrapping_sub(a.0) & m;
    a == b || (dx != 0 && dx <= db)
}
