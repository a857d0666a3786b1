//! Domain ontologies, the mapping links between them and the undirected graph
//! they form.
//!
//! Concepts are opaque identifiers. Each mapping link carries a partial
//! bijection between the concept sets of its two endpoints, so a concept can
//! be translated across a link in either direction.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty() {
            return Err(Error::InvalidGraph("empty concept identifier".into()));
        }
        Ok(ConceptId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConceptId {
    /// Panics on the empty string; use [`ConceptId::new`] for untrusted input.
    fn from(s: &str) -> Self {
        ConceptId::new(s).expect("concept identifiers are non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OntologyId(pub u32);

impl fmt::Display for OntologyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DO{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainOntology {
    pub id: OntologyId,
    pub concepts: BTreeSet<ConceptId>,
}

impl DomainOntology {
    pub fn new(id: OntologyId, concepts: impl IntoIterator<Item = ConceptId>) -> Result<Self> {
        let concepts: BTreeSet<_> = concepts.into_iter().collect();
        if concepts.is_empty() {
            return Err(Error::InvalidGraph(format!("{id} has no concepts")));
        }
        Ok(DomainOntology { id, concepts })
    }
}

/// A mapping link between two ontologies. `forward` translates concepts of
/// `a` into concepts of `b`, `backward` the other way.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingLink {
    a: OntologyId,
    b: OntologyId,
    forward: BTreeMap<ConceptId, ConceptId>,
    backward: BTreeMap<ConceptId, ConceptId>,
}

impl MappingLink {
    /// Builds a link from concept pairs `(concept of a, concept of b)`. The
    /// pairs must form a partial bijection.
    pub fn new(
        a: OntologyId,
        b: OntologyId,
        pairs: impl IntoIterator<Item = (ConceptId, ConceptId)>,
    ) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidGraph(format!("self-loop on {a}")));
        }
        let mut forward = BTreeMap::new();
        let mut backward = BTreeMap::new();
        for (x, y) in pairs {
            if forward.insert(x.clone(), y.clone()).is_some()
                || backward.insert(y.clone(), x.clone()).is_some()
            {
                return Err(Error::InvalidGraph(format!(
                    "mapping {a}-{b} is not a bijection at {x} -> {y}"
                )));
            }
        }
        Ok(MappingLink {
            a,
            b,
            forward,
            backward,
        })
    }

    pub fn endpoints(&self) -> (OntologyId, OntologyId) {
        (self.a, self.b)
    }

    pub fn forward(&self) -> &BTreeMap<ConceptId, ConceptId> {
        &self.forward
    }

    pub fn backward(&self) -> &BTreeMap<ConceptId, ConceptId> {
        &self.backward
    }

    fn map_from(&self, from: OntologyId, concept: &ConceptId) -> Option<&ConceptId> {
        if from == self.a {
            self.forward.get(concept)
        } else {
            self.backward.get(concept)
        }
    }
}

/// Ordered sequence of mapping-link traversals `(from, to)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoPath {
    steps: Vec<(OntologyId, OntologyId)>,
}

impl VoPath {
    pub fn empty() -> Self {
        VoPath::default()
    }

    /// Builds a path, checking only that consecutive steps chain.
    pub fn from_steps(steps: Vec<(OntologyId, OntologyId)>) -> Result<Self> {
        for w in steps.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::MalformedPath(format!(
                    "step {}->{} does not chain into {}->{}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(VoPath { steps })
    }

    pub fn steps(&self) -> &[(OntologyId, OntologyId)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn extended(&self, from: OntologyId, to: OntologyId) -> VoPath {
        debug_assert!(self.steps.last().is_none_or(|s| s.1 == from));
        let mut steps = self.steps.clone();
        steps.push((from, to));
        VoPath { steps }
    }

    pub fn reversed(&self) -> VoPath {
        VoPath {
            steps: self.steps.iter().rev().map(|&(a, b)| (b, a)).collect(),
        }
    }

    /// True if `vo` is an endpoint of any step.
    pub fn visits(&self, vo: OntologyId) -> bool {
        self.steps.iter().any(|&(a, b)| a == vo || b == vo)
    }

    /// Every ontology on the path in order, starting with the first `from`.
    pub fn vertices(&self) -> Vec<OntologyId> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        if let Some(first) = self.steps.first() {
            out.push(first.0);
        }
        out.extend(self.steps.iter().map(|s| s.1));
        out
    }
}

impl fmt::Display for VoPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|(a, b)| format!("({},{})", a.0, b.0))
            .collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OntologyGraph {
    ontologies: BTreeMap<OntologyId, DomainOntology>,
    links: BTreeMap<(OntologyId, OntologyId), MappingLink>,
}

fn key(a: OntologyId, b: OntologyId) -> (OntologyId, OntologyId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl OntologyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_ontology(&mut self, ontology: DomainOntology) -> Result<()> {
        if self.ontologies.contains_key(&ontology.id) {
            return Err(Error::InvalidGraph(format!("duplicate {}", ontology.id)));
        }
        self.ontologies.insert(ontology.id, ontology);
        Ok(())
    }

    pub fn add_link(&mut self, link: MappingLink) -> Result<()> {
        let (a, b) = link.endpoints();
        let oa = self.ontologies.get(&a).ok_or(Error::UnknownOntology(a))?;
        let ob = self.ontologies.get(&b).ok_or(Error::UnknownOntology(b))?;
        if self.links.contains_key(&key(a, b)) {
            return Err(Error::InvalidGraph(format!("duplicate link {a}-{b}")));
        }
        for (x, y) in link.forward() {
            if !oa.concepts.contains(x) || !ob.concepts.contains(y) {
                return Err(Error::InvalidGraph(format!(
                    "link {a}-{b} maps {x} -> {y} outside the ontologies' concepts"
                )));
            }
        }
        self.links.insert(key(a, b), link);
        Ok(())
    }

    pub fn ontology(&self, id: OntologyId) -> Option<&DomainOntology> {
        self.ontologies.get(&id)
    }

    pub fn ontology_ids(&self) -> impl Iterator<Item = OntologyId> + '_ {
        self.ontologies.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.ontologies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ontologies.is_empty()
    }

    pub fn links(&self) -> impl Iterator<Item = &MappingLink> {
        self.links.values()
    }

    pub fn edge_count(&self) -> usize {
        self.links.len()
    }

    pub fn link(&self, a: OntologyId, b: OntologyId) -> Option<&MappingLink> {
        self.links.get(&key(a, b))
    }

    pub fn neighbors(&self, id: OntologyId) -> Result<BTreeSet<OntologyId>> {
        if !self.ontologies.contains_key(&id) {
            return Err(Error::UnknownOntology(id));
        }
        Ok(self
            .links
            .keys()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect())
    }

    fn adjacency(&self) -> BTreeMap<OntologyId, Vec<OntologyId>> {
        let mut adj: BTreeMap<OntologyId, Vec<OntologyId>> =
            self.ontologies.keys().map(|&k| (k, Vec::new())).collect();
        for &(a, b) in self.links.keys() {
            adj.get_mut(&a).unwrap().push(b);
            adj.get_mut(&b).unwrap().push(a);
        }
        adj
    }

    /// Hop distances from `source` to every reachable ontology.
    pub fn distances_from(&self, source: OntologyId) -> BTreeMap<OntologyId, usize> {
        let adj = self.adjacency();
        let mut dist = BTreeMap::new();
        if !adj.contains_key(&source) {
            return dist;
        }
        let mut queue = VecDeque::from([source]);
        dist.insert(source, 0);
        while let Some(v) = queue.pop_front() {
            let d = dist[&v];
            for &w in &adj[&v] {
                if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(w) {
                    slot.insert(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        match self.ontologies.keys().next() {
            None => true,
            Some(&first) => self.distances_from(first).len() == self.ontologies.len(),
        }
    }

    /// Longest shortest path, in mapping links.
    pub fn diameter(&self) -> Result<usize> {
        if !self.is_connected() {
            return Err(Error::DisconnectedGraph);
        }
        Ok(self
            .ontologies
            .keys()
            .map(|&v| self.distances_from(v).values().copied().max().unwrap_or(0))
            .max()
            .unwrap_or(0))
    }

    /// Breadth-first tree rooted at `root`: every reachable ontology other
    /// than the root mapped to its parent. Ties go to the parent discovered
    /// first.
    pub fn bfs_tree(&self, root: OntologyId) -> BTreeMap<OntologyId, OntologyId> {
        let adj = self.adjacency();
        let mut parent = BTreeMap::new();
        if !adj.contains_key(&root) {
            return parent;
        }
        parent.insert(root, root);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[&v] {
                if let std::collections::btree_map::Entry::Vacant(e) = parent.entry(w) {
                    e.insert(v);
                    queue.push_back(w);
                }
            }
        }
        parent.remove(&root);
        parent
    }

    /// Shortest path between two ontologies, following [`Self::bfs_tree`].
    pub fn shortest_path(&self, from: OntologyId, to: OntologyId) -> Option<VoPath> {
        if self.ontology(from).is_none() || self.ontology(to).is_none() {
            return None;
        }
        let parent = self.bfs_tree(from);
        if from != to && !parent.contains_key(&to) {
            return None;
        }
        let mut steps = Vec::new();
        let mut cur = to;
        while cur != from {
            let p = parent[&cur];
            steps.push((p, cur));
            cur = p;
        }
        steps.reverse();
        Some(VoPath { steps })
    }

    pub fn translate(
        &self,
        concept: &ConceptId,
        from: OntologyId,
        to: OntologyId,
    ) -> Result<Option<ConceptId>> {
        let link = self.link(from, to).ok_or(Error::NoMappingLink(from, to))?;
        Ok(link.map_from(from, concept).cloned())
    }

    pub fn translate_along_path(
        &self,
        concept: &ConceptId,
        path: &VoPath,
    ) -> Result<Option<ConceptId>> {
        let mut current = concept.clone();
        for &(a, b) in path.steps() {
            let link = self.link(a, b).ok_or_else(|| {
                Error::MalformedPath(format!("no mapping link for step {a}->{b}"))
            })?;
            match link.map_from(a, &current) {
                Some(next) => current = next.clone(),
                None => return Ok(None),
            }
        }
        Ok(Some(current))
    }
}

/// Shape of a generated mapping graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    Path,
    Star,
    Complete,
    /// Erdős–Rényi graph conditioned on connectivity. When the probability
    /// is absent, `1.5 ln(V) / V` (clamped to 1) is used.
    Random { edge_probability: Option<f64> },
    /// Random graph in which every vertex has degree at least
    /// `min(min_degree, V - 1)`.
    MinDegree { min_degree: usize },
}

impl Topology {
    pub fn default_random() -> Self {
        Topology::Random {
            edge_probability: None,
        }
    }
}

pub fn concept_name(ontology: OntologyId, index: usize) -> ConceptId {
    ConceptId(format!("o{}:c{}", ontology.0, index))
}

/// Index of a concept produced by [`concept_name`].
pub fn concept_index(concept: &ConceptId) -> Option<usize> {
    concept.as_str().rsplit_once(":c")?.1.parse().ok()
}

/// Generates a graph of `vo_count` ontologies with `concepts` concepts each.
/// Every link maps `o{a}:c{k}` to `o{b}:c{k}` for a `coverage` fraction of
/// the concept indices.
pub fn generate<R: Rng>(
    topology: Topology,
    vo_count: usize,
    concepts: usize,
    coverage: f64,
    rng: &mut R,
) -> Result<OntologyGraph> {
    if vo_count == 0 {
        return Err(Error::InvalidGraph("no ontologies".into()));
    }
    if concepts == 0 {
        return Err(Error::InvalidGraph("no concepts".into()));
    }
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::InvalidGraph(format!("coverage {coverage} outside [0, 1]")));
    }
    let edges = generate_edges(topology, vo_count, rng)?;
    let mut graph = OntologyGraph::new();
    for v in 0..vo_count {
        let id = OntologyId(v as u32);
        graph.add_ontology(DomainOntology::new(
            id,
            (0..concepts).map(|k| concept_name(id, k)),
        )?)?;
    }
    for (a, b) in edges {
        let (a, b) = (OntologyId(a as u32), OntologyId(b as u32));
        let pairs: Vec<_> = (0..concepts)
            .filter(|_| coverage >= 1.0 || rng.gen_bool(coverage))
            .map(|k| (concept_name(a, k), concept_name(b, k)))
            .collect();
        graph.add_link(MappingLink::new(a, b, pairs)?)?;
    }
    Ok(graph)
}

fn generate_edges<R: Rng>(
    topology: Topology,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let all_pairs = || (0..n).flat_map(move |a| (a + 1..n).map(move |b| (a, b)));
    Ok(match topology {
        Topology::Path => (1..n).map(|b| (b - 1, b)).collect(),
        Topology::Star => (1..n).map(|b| (0, b)).collect(),
        Topology::Complete => all_pairs().collect(),
        Topology::Random { edge_probability } => {
            let p = edge_probability
                .unwrap_or_else(|| 1.5 * (n as f64).ln() / n as f64)
                .clamp(0.0, 1.0);
            if n <= 2 || p >= 1.0 {
                return Ok(all_pairs().collect());
            }
            for _ in 0..100_000 {
                let edges: Vec<_> = all_pairs().filter(|_| rng.gen_bool(p)).collect();
                if edges_connected(n, &edges) {
                    return Ok(edges);
                }
            }
            return Err(Error::InvalidGraph(format!(
                "could not draw a connected graph with p = {p}"
            )));
        }
        Topology::MinDegree { min_degree } => {
            let target = min_degree.min(n.saturating_sub(1));
            loop {
                let mut edges = BTreeSet::new();
                let mut degree = vec![0usize; n];
                let mut order: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                for &v in &order {
                    let mut guard = 0;
                    while degree[v] < target && guard < 10 * n {
                        guard += 1;
                        let w = rng.gen_range(0..n);
                        if w != v && edges.insert(key_usize(v, w)) {
                            degree[v] += 1;
                            degree[w] += 1;
                        }
                    }
                }
                let edges: Vec<_> = edges.into_iter().collect();
                if edges_connected(n, &edges) {
                    return Ok(edges);
                }
            }
        }
    })
}

fn key_usize(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn edges_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == n
}
