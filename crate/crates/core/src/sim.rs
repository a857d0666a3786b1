//! Discrete-event simulator: virtual clock, per-peer FIFO queues, message
//! delivery with timeouts, query bookkeeping and churn.
//!
//! Every message is an event that arrives at a peer, waits in that peer's
//! queue for one service time and is then handled. Messages a peer sends to
//! itself skip the network and are not counted. Maintenance work that is
//! not simulated message by message (ring joins and leaves, eager baseline
//! updates, access-point walks) is booked in bulk at the time it happens.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chord::{NodeId, SourceMetadata};
use crate::discovery::{damt_forwards, DamtPropagation, DiscoveryQuery, DiscoveryResponse, Forward, Hit, Layout, MethodId};
use crate::error::{Error, Result};
use crate::metrics::{ms, Category, MessageCounts, MetricsLedger, QueryRecord, SimTime, TraceKind, TraceRecord, Warning};
use crate::network::{NetworkModel, PeerQueue};
use crate::ontology::{concept_name, ConceptId, OntologyId, VoPath};
use crate::overlay::{PeerId, System, VoStatus};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChurnAction {
    /// Friendly departure: orderly ring handoff, lazy addressing.
    Leave(PeerId),
    /// Silent failure: the ring heals but no addressing state is updated,
    /// not even by the eager baselines.
    Crash(PeerId),
    /// Arrival in `vo`; a fresh node id is drawn when `node` is absent.
    Join { vo: OntologyId, node: Option<NodeId> },
    /// Administrator reconnection of a VO flagged as disconnected.
    Reconnect(OntologyId),
}

#[derive(Debug, Clone)]
struct Reply {
    query_id: u64,
    /// Remaining peers to traverse; the last one is the next hop.
    back: Vec<PeerId>,
    hits: Vec<Hit>,
}

#[derive(Debug, Clone)]
enum Msg {
    Start { query_id: u64 },
    Route { task: u64, key: NodeId },
    Found { task: u64, records: Vec<SourceMetadata> },
    Query(DiscoveryQuery),
    Reply(Reply),
}

impl Msg {
    fn category(&self) -> Option<Category> {
        match self {
            Msg::Start { .. } => None,
            Msg::Route { .. } | Msg::Found { .. } => Some(Category::DhtRouting),
            Msg::Query(_) => Some(Category::InterVoQuery),
            Msg::Reply(_) => Some(Category::InterVoResponse),
        }
    }

    fn query_id(&self, tasks: &HashMap<u64, Task>) -> Option<u64> {
        match self {
            Msg::Start { query_id } => Some(*query_id),
            Msg::Route { task, .. } | Msg::Found { task, .. } => tasks.get(task).map(|t| t.query.query_id),
            Msg::Query(q) => Some(q.query_id),
            Msg::Reply(r) => Some(r.query_id),
        }
    }
}

#[derive(Debug, Clone)]
enum Event {
    Arrive { to: PeerId, from: PeerId, msg: Msg, sent_at: SimTime },
    Process { at: PeerId, from: PeerId, msg: Msg },
    Timeout { sender: PeerId, to: PeerId, msg: Msg },
    Close { query_id: u64 },
    Churn(ChurnAction),
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// What a peer does once an intra-VO lookup it started comes back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskKind {
    /// Search this VO for the query instance and reply.
    Lookup,
    /// Search, then pass the query on along the chain in this direction.
    LookupThenRelay(i8),
    /// Reach the chain gateway of the origin VO.
    ChainStart,
}

#[derive(Debug, Clone)]
struct Task {
    requester: PeerId,
    query: DiscoveryQuery,
    kind: TaskKind,
}

#[derive(Debug, Clone)]
struct OpenQuery {
    origin: PeerId,
    concept: ConceptId,
    submitted_at: SimTime,
    /// Branches whose reply has not reached the origin yet.
    outstanding: u64,
    hits: BTreeSet<Hit>,
    warnings: Vec<String>,
    completed_at: Option<SimTime>,
    partial: bool,
}

pub struct Simulator {
    system: System,
    layout: Layout,
    net: NetworkModel,
    now: SimTime,
    seq: u64,
    events: BinaryHeap<Reverse<Scheduled>>,
    queues: HashMap<PeerId, PeerQueue>,
    ledger: MetricsLedger,
    queries: BTreeMap<u64, OpenQuery>,
    tasks: HashMap<u64, Task>,
    next_task: u64,
    next_query: u64,
    /// Super-peer flood dedupe: `(query, VO)` already handled.
    seen: BTreeSet<(u64, OntologyId)>,
    horizon: Option<SimTime>,
    rng: ChaCha8Rng,
    diameter: u32,
    /// Breadth-first trees of the mapping graph, by root VO.
    trees: HashMap<OntologyId, BTreeMap<OntologyId, OntologyId>>,
}

impl Simulator {
    /// `seed` drives the choices made while running, such as the node ids
    /// of arriving peers.
    pub fn new(system: System, layout: Layout, net: NetworkModel, seed: u64) -> Self {
        let system_diameter = system.graph().diameter().unwrap_or(0) as u32;
        Simulator {
            system,
            layout,
            net,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            queues: HashMap::new(),
            ledger: MetricsLedger::default(),
            queries: BTreeMap::new(),
            tasks: HashMap::new(),
            next_task: 0,
            next_query: 0,
            seen: BTreeSet::new(),
            horizon: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            diameter: system_diameter,
            trees: HashMap::new(),
        }
    }

    /// Keeps a full event trace in the ledger.
    pub fn enable_trace(&mut self) {
        if self.ledger.trace.is_none() {
            self.ledger.trace = Some(Vec::new());
        }
    }

    /// Queries still open at `horizon` are closed as partial then.
    pub fn set_horizon(&mut self, horizon: SimTime) {
        self.horizon = Some(horizon);
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    /// Direct access for scripted scenarios; changes made here are not
    /// accounted.
    pub fn system_mut(&mut self) -> &mut System {
        &mut self.system
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn method(&self) -> MethodId {
        self.layout.method()
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    pub fn ledger(&self) -> &MetricsLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> MetricsLedger {
        self.ledger
    }

    /// Schedules a discovery of `concept` from `origin` at time `at`.
    pub fn submit(&mut self, at: SimTime, origin: PeerId, concept: ConceptId) -> u64 {
        let query_id = self.next_query;
        self.next_query += 1;
        self.queries.insert(
            query_id,
            OpenQuery {
                origin,
                concept,
                submitted_at: at,
                outstanding: 0,
                hits: BTreeSet::new(),
                warnings: Vec::new(),
                completed_at: None,
                partial: false,
            },
        );
        self.schedule(
            at,
            Event::Arrive {
                to: origin,
                from: origin,
                msg: Msg::Start { query_id },
                sent_at: at,
            },
        );
        query_id
    }

    pub fn schedule_churn(&mut self, at: SimTime, action: ChurnAction) {
        self.schedule(at, Event::Churn(action));
    }

    /// Result of a submitted query, once it has completed or been closed.
    pub fn response(&self, query_id: u64) -> Option<DiscoveryResponse> {
        let q = self.queries.get(&query_id)?;
        Some(DiscoveryResponse {
            query_id,
            hits: q.hits.iter().cloned().collect(),
            completed_at: q.completed_at,
            partial: q.partial,
            warnings: q.warnings.clone(),
        })
    }

    /// Submits one query now and runs until the event queue drains.
    pub fn discover(&mut self, origin: PeerId, concept: ConceptId) -> Result<DiscoveryResponse> {
        if !self.system.is_live(origin) {
            return Err(Error::UnknownPeer(origin));
        }
        let id = self.submit(self.now, origin, concept);
        self.run();
        Ok(self.response(id).expect("submitted"))
    }

    /// Processes events until none are left and finalizes the query
    /// records.
    pub fn run(&mut self) -> &MetricsLedger {
        while let Some(Reverse(next)) = self.events.pop() {
            debug_assert!(next.at >= self.now, "clock went backwards");
            self.now = next.at;
            self.dispatch(next.event);
        }
        self.finalize();
        &self.ledger
    }

    fn finalize(&mut self) {
        self.ledger.queries = self
            .queries
            .iter()
            .filter(|(_, q)| q.completed_at.is_some())
            .map(|(&id, q)| QueryRecord {
                query_id: id,
                origin: q.origin,
                submitted_at: q.submitted_at,
                completed_at: q.completed_at,
                partial: q.partial,
                results: q.hits.len(),
            })
            .collect();
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(Reverse(Scheduled { at, seq, event }));
    }

    fn trace(&mut self, rec: TraceRecord) {
        self.ledger.record(rec);
    }

    fn book(&mut self, counts: &MessageCounts, note: &str) {
        if counts.total() > 0 {
            let now = self.now;
            self.ledger.add_bulk(now, counts, note);
        }
    }

    fn warn(&mut self, query_id: Option<u64>, vo: Option<OntologyId>, message: String) {
        if self.ledger.tracing() {
            let mut rec = TraceRecord::new(self.now, TraceKind::Warning);
            rec.query_id = query_id;
            rec.note = Some(message.clone());
            self.trace(rec);
        }
        self.ledger.warnings.push(Warning {
            at_us: self.now,
            query_id,
            vo,
            message: message.clone(),
        });
        if let Some(q) = query_id.and_then(|id| self.queries.get_mut(&id)) {
            q.warnings.push(message);
        }
    }

    /// Sends `msg` leaving `from` at `depart` (not before now).
    fn send_at(&mut self, from: PeerId, to: PeerId, msg: Msg, depart: SimTime) {
        let depart = depart.max(self.now);
        if from == to {
            self.schedule(depart, Event::Arrive { to, from, msg, sent_at: depart });
            return;
        }
        let category = msg.category().expect("only query starts are local");
        self.ledger.counts.add(category, 1);
        self.ledger.sent += 1;
        if self.ledger.tracing() {
            let mut rec = TraceRecord::new(self.now, TraceKind::Send);
            rec.category = Some(category);
            rec.count = 1;
            rec.from = Some(from);
            rec.to = Some(to);
            rec.query_id = msg.query_id(&self.tasks);
            if let Msg::Query(q) = &msg {
                rec.path_len = Some(q.path.len());
            }
            self.trace(rec);
        }
        let at = depart + self.net.hop(from, to);
        self.schedule(at, Event::Arrive { to, from, msg, sent_at: depart });
    }

    fn send(&mut self, from: PeerId, to: PeerId, msg: Msg) {
        self.send_at(from, to, msg, self.now);
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Arrive { to, from, msg, sent_at } => self.arrive(to, from, msg, sent_at),
            Event::Process { at, from, msg } => {
                if self.system.is_live(at) {
                    self.process(at, from, msg);
                }
            }
            Event::Timeout { sender, to, msg } => self.timeout(sender, to, msg),
            Event::Close { query_id } => self.close(query_id),
            Event::Churn(action) => self.churn(action),
        }
    }

    fn arrive(&mut self, to: PeerId, from: PeerId, msg: Msg, sent_at: SimTime) {
        let networked = from != to;
        if !self.system.is_live(to) {
            if networked {
                self.ledger.expired += 1;
                if self.ledger.tracing() {
                    let mut rec = TraceRecord::new(self.now, TraceKind::Expire);
                    rec.from = Some(from);
                    rec.to = Some(to);
                    rec.query_id = msg.query_id(&self.tasks);
                    self.trace(rec);
                }
                let at = (sent_at + self.net.rtt_budget()).max(self.now);
                self.schedule(at, Event::Timeout { sender: from, to, msg });
            }
            return;
        }
        if networked {
            self.ledger.delivered += 1;
            if self.ledger.tracing() {
                let mut rec = TraceRecord::new(self.now, TraceKind::Deliver);
                rec.from = Some(from);
                rec.to = Some(to);
                rec.query_id = msg.query_id(&self.tasks);
                self.trace(rec);
            }
        }
        let service = self.net.service();
        let done = self.queues.entry(to).or_default().admit(self.now, service);
        self.schedule(done, Event::Process { at: to, from, msg });
    }
}

impl Simulator {
    fn process(&mut self, at: PeerId, from: PeerId, msg: Msg) {
        match msg {
            Msg::Start { query_id } => self.start_query(at, query_id),
            Msg::Route { task, key } => self.route_step(at, task, key),
            Msg::Found { task, records } => self.finish_task(at, task, records),
            Msg::Query(q) => self.handle_query(at, from, q),
            Msg::Reply(r) => self.pass_reply(at, r),
        }
    }

    fn initial_ttl(&self) -> u32 {
        match &self.layout {
            Layout::Damt { .. } => self.diameter,
            Layout::Dsp { diameter, .. } => *diameter,
            Layout::D2b2 { .. } => self.system.graph().len().saturating_sub(1) as u32,
            Layout::DFlooding { .. } => 1,
        }
    }

    fn add_branch(&mut self, query_id: u64) {
        if let Some(q) = self.queries.get_mut(&query_id) {
            q.outstanding += 1;
        }
    }

    fn start_query(&mut self, origin: PeerId, query_id: u64) {
        let Some(open) = self.queries.get_mut(&query_id) else {
            return;
        };
        // The local lookup is the first branch.
        open.outstanding = 1;
        let mut close_at = open.submitted_at + ms(self.net.query_close_ms);
        if let Some(h) = self.horizon {
            close_at = close_at.min(h);
        }
        let base = DiscoveryQuery {
            query_id,
            concept: open.concept.clone(),
            origin,
            ttl: 0,
            path: VoPath::empty(),
            submitted_at: open.submitted_at,
            back: Vec::new(),
            lookup: true,
        };
        let base = DiscoveryQuery {
            ttl: self.initial_ttl(),
            ..base
        };
        self.schedule(close_at.max(self.now), Event::Close { query_id });
        if self.ledger.tracing() {
            let mut rec = TraceRecord::new(self.now, TraceKind::QuerySubmit);
            rec.query_id = Some(query_id);
            rec.from = Some(origin);
            self.trace(rec);
        }
        match self.layout.method() {
            MethodId::Damt => self.damt_propagate(origin, &base),
            MethodId::Dsp => {
                let isolated = self.system.graph().neighbors(origin.vo).map_or(true, |n| n.is_empty());
                if let Some(sp) = self.layout.super_peer(origin.vo).filter(|_| !isolated) {
                    let back = if sp == origin { Vec::new() } else { vec![origin] };
                    let q = DiscoveryQuery {
                        back,
                        lookup: false,
                        ..base.clone()
                    };
                    // Pending until the super-peer has flooded it on.
                    self.add_branch(query_id);
                    self.send(origin, sp, Msg::Query(q));
                }
            }
            MethodId::D2b2 => {
                let has_chain = [-1, 1]
                    .into_iter()
                    .any(|d| Layout::chain_neighbor(&self.system, origin.vo, d).is_some());
                if has_chain {
                    // Pending until the gateway has sent it along the chain.
                    self.add_branch(query_id);
                    self.start_route(origin, base.clone(), TaskKind::ChainStart);
                }
            }
            MethodId::DFlooding => {
                let neighbors = self.system.graph().neighbors(origin.vo).unwrap_or_default();
                for vo in neighbors {
                    let Some(contact) = self.layout.contact(origin.vo, vo) else {
                        continue;
                    };
                    if let Some(child) = base.forwarded(self.system.graph(), origin, vo) {
                        self.add_branch(query_id);
                        self.send(origin, contact, Msg::Query(child));
                    }
                }
            }
        }
        self.start_route(origin, base, TaskKind::Lookup);
    }

    /// Starts an intra-VO lookup at `at`; the result comes back as a
    /// `Found` message unless `at` is itself responsible.
    fn start_route(&mut self, at: PeerId, query: DiscoveryQuery, kind: TaskKind) {
        let key = match kind {
            TaskKind::ChainStart => Layout::chain_key(&self.system, at.vo),
            _ => self.system.ring(at.vo).key_for(&query.concept),
        };
        let task = self.next_task;
        self.next_task += 1;
        self.tasks.insert(
            task,
            Task {
                requester: at,
                query,
                kind,
            },
        );
        self.route_step(at, task, key);
    }

    fn route_step(&mut self, at: PeerId, task: u64, key: NodeId) {
        let Some(t) = self.tasks.get(&task) else {
            return;
        };
        match self.system.ring(at.vo).next_hop(at.node, key) {
            Some(next) => self.send(at, PeerId::new(at.vo, next), Msg::Route { task, key }),
            None if t.kind == TaskKind::ChainStart => {
                let t = self.tasks.remove(&task).expect("present");
                self.chain_start(at, t.query);
            }
            None => {
                let records = self.system.ring(at.vo).records_at(at.node, &t.query.concept);
                let requester = t.requester;
                if requester == at {
                    self.finish_task(at, task, records);
                } else {
                    self.send(at, requester, Msg::Found { task, records });
                }
            }
        }
    }

    fn finish_task(&mut self, at: PeerId, task: u64, records: Vec<SourceMetadata>) {
        let Some(t) = self.tasks.remove(&task) else {
            return;
        };
        let hits = records
            .into_iter()
            .map(|metadata| Hit {
                metadata,
                vo: at.vo,
                path: t.query.path.clone(),
            })
            .collect();
        if let TaskKind::LookupThenRelay(dir) = t.kind {
            self.relay_chain(at, &t.query, dir);
        }
        self.instance_done(at, &t.query, hits);
    }

    fn instance_done(&mut self, at: PeerId, query: &DiscoveryQuery, hits: Vec<Hit>) {
        let reply = Reply {
            query_id: query.query_id,
            back: query.back.clone(),
            hits,
        };
        self.pass_reply(at, reply);
    }

    /// Moves a reply one step closer to the origin, or merges it there.
    fn pass_reply(&mut self, at: PeerId, mut reply: Reply) {
        match reply.back.pop() {
            Some(next) => self.send(at, next, Msg::Reply(reply)),
            None => self.merge(reply.query_id, reply.hits),
        }
    }

    /// Resolves a branch that will never answer: the peer that gave up on
    /// it reports an empty result in its place.
    fn dead_branch(&mut self, at: PeerId, child: &DiscoveryQuery) {
        let mut back = child.back.clone();
        let own = back.pop();
        debug_assert_eq!(own, Some(at));
        self.pass_reply(
            at,
            Reply {
                query_id: child.query_id,
                back,
                hits: Vec::new(),
            },
        );
    }

    fn merge(&mut self, query_id: u64, hits: Vec<Hit>) {
        let now = self.now;
        let Some(q) = self.queries.get_mut(&query_id) else {
            return;
        };
        if q.completed_at.is_some() {
            return;
        }
        q.hits.extend(hits);
        q.outstanding = q.outstanding.saturating_sub(1);
        if q.outstanding == 0 {
            q.completed_at = Some(now);
            q.partial = !q.warnings.is_empty();
            if self.ledger.tracing() {
                let mut rec = TraceRecord::new(now, TraceKind::QueryDone);
                rec.query_id = Some(query_id);
                self.trace(rec);
            }
        }
    }

    fn close(&mut self, query_id: u64) {
        let now = self.now;
        let Some(q) = self.queries.get_mut(&query_id) else {
            return;
        };
        if q.completed_at.is_none() {
            q.completed_at = Some(now);
            q.partial = true;
            if self.ledger.tracing() {
                let mut rec = TraceRecord::new(now, TraceKind::QueryDone);
                rec.query_id = Some(query_id);
                rec.note = Some("closed with missing branches".into());
                self.trace(rec);
            }
        }
    }
}

impl Simulator {
    fn handle_query(&mut self, at: PeerId, _from: PeerId, q: DiscoveryQuery) {
        match self.layout.method() {
            MethodId::Damt => {
                self.damt_propagate(at, &q);
                self.start_route(at, q, TaskKind::Lookup);
            }
            MethodId::Dsp => {
                if !self.seen.insert((q.query_id, at.vo)) {
                    if q.lookup {
                        self.instance_done(at, &q, Vec::new());
                    }
                    return;
                }
                if q.ttl > 0 {
                    let graph = self.system.graph();
                    let mut sends = Vec::new();
                    for nb in graph.neighbors(at.vo).unwrap_or_default() {
                        if q.visits(nb) {
                            continue;
                        }
                        let (Some(sp), Some(child)) = (self.layout.super_peer(nb), q.forwarded(graph, at, nb)) else {
                            continue;
                        };
                        sends.push((sp, child));
                    }
                    for (sp, child) in sends {
                        self.add_branch(q.query_id);
                        self.send(at, sp, Msg::Query(child));
                    }
                }
                if q.lookup {
                    self.start_route(at, q, TaskKind::Lookup);
                } else {
                    self.settle(q.query_id);
                }
            }
            MethodId::D2b2 => {
                let dir = match q.path.steps().last() {
                    Some(&(a, b)) if b.0 < a.0 => -1,
                    _ => 1,
                };
                self.start_route(at, q, TaskKind::LookupThenRelay(dir));
            }
            MethodId::DFlooding => self.start_route(at, q, TaskKind::Lookup),
        }
    }

    fn damt_propagate(&mut self, at: PeerId, q: &DiscoveryQuery) {
        let tree = match self.layout {
            Layout::Damt {
                propagation: DamtPropagation::ShortestPathTree,
            } => {
                let graph = self.system.graph();
                Some(&*self.trees.entry(q.origin.vo).or_insert_with(|| graph.bfs_tree(q.origin.vo)))
            }
            _ => None,
        };
        for forward in damt_forwards(&self.system, at, q, tree) {
            match forward {
                Forward::Send(entry, child) => {
                    self.add_branch(q.query_id);
                    self.send(at, entry, Msg::Query(child));
                }
                Forward::Repair(vo, child) => {
                    self.add_branch(q.query_id);
                    self.repair_and_forward(at, vo, child);
                }
                Forward::Unreachable(vo) => {
                    self.warn(Some(q.query_id), Some(vo), format!("{vo} is disconnected"));
                }
            }
        }
    }

    /// Lazy repair of `at`'s entry toward `vo`, then delivery of `child` to
    /// the access point found by the walk.
    fn repair_and_forward(&mut self, at: PeerId, vo: OntologyId, child: DiscoveryQuery) {
        if self.system.status(vo) == VoStatus::Disconnected {
            self.warn(Some(child.query_id), Some(vo), format!("{vo} is disconnected"));
            self.dead_branch(at, &child);
            return;
        }
        let net = self.net.clone();
        match self.system.try_repair(at, vo, &net) {
            Ok((walk, Some(repair))) => {
                self.book(&walk.counts, "access-point repair");
                let depart = self.now + walk.elapsed;
                self.send_at(at, repair.forward_to, Msg::Query(child), depart);
            }
            Ok((walk, None)) => {
                self.book(&walk.counts, "access-point repair");
                self.warn(
                    Some(child.query_id),
                    Some(vo),
                    format!("no live access point toward {vo}; flagged as disconnected"),
                );
                self.dead_branch(at, &child);
            }
            Err(e) => {
                self.warn(Some(child.query_id), Some(vo), format!("repair toward {vo} failed: {e}"));
                self.dead_branch(at, &child);
            }
        }
    }

    /// The chain gateway of the origin VO sends the query both ways.
    fn chain_start(&mut self, gateway: PeerId, mut query: DiscoveryQuery) {
        if gateway != query.origin {
            query.back = vec![query.origin];
        }
        for dir in [-1, 1] {
            self.relay_chain(gateway, &query, dir);
        }
        self.settle(query.query_id);
    }

    /// Drops a pending hand-off once the branches it spawned are counted.
    fn settle(&mut self, query_id: u64) {
        self.merge(query_id, Vec::new());
    }

    fn relay_chain(&mut self, at: PeerId, q: &DiscoveryQuery, dir: i8) {
        let Some(next_vo) = Layout::chain_neighbor(&self.system, at.vo, dir) else {
            return;
        };
        if q.ttl == 0 || q.visits(next_vo) {
            return;
        }
        let Some(partner) = self.layout.partner(at.vo, dir) else {
            self.warn(Some(q.query_id), Some(next_vo), format!("no chain partner toward {next_vo}"));
            return;
        };
        if let Some(child) = q.forwarded(self.system.graph(), at, next_vo) {
            self.add_branch(q.query_id);
            self.send(at, partner, Msg::Query(child));
        }
    }

    fn timeout(&mut self, sender: PeerId, to: PeerId, msg: Msg) {
        if !self.system.is_live(sender) {
            return;
        }
        match msg {
            Msg::Query(child) => match self.layout.method() {
                MethodId::Damt => {
                    let current = self.system.access_points(sender).and_then(|t| t.get(to.vo));
                    match current {
                        // Another query already replaced the entry.
                        Some(entry) if entry != to && self.system.is_live(entry) => {
                            self.send(sender, entry, Msg::Query(child));
                        }
                        _ => self.repair_and_forward(sender, to.vo, child),
                    }
                }
                _ => {
                    self.warn(
                        Some(child.query_id),
                        Some(to.vo),
                        format!("{to} did not answer; {} unreachable", to.vo),
                    );
                    if child.lookup {
                        self.dead_branch(sender, &child);
                    } else {
                        self.settle(child.query_id);
                    }
                }
            },
            Msg::Route { task, key } => self.route_step(sender, task, key),
            Msg::Reply(r) => {
                self.warn(Some(r.query_id), Some(to.vo), format!("response lost at departed {to}"));
            }
            Msg::Found { .. } | Msg::Start { .. } => {}
        }
    }

    fn churn(&mut self, action: ChurnAction) {
        if self.ledger.tracing() {
            let mut rec = TraceRecord::new(self.now, TraceKind::Churn);
            rec.note = Some(format!("{action:?}"));
            self.trace(rec);
        }
        match action {
            ChurnAction::Leave(peer) | ChurnAction::Crash(peer) => {
                if !self.system.is_live(peer) || self.system.ring(peer.vo).len() <= 1 {
                    return;
                }
                let cost = self.system.friendly_leave(peer).expect("live peer");
                self.book(&MessageCounts::of(Category::DhtMaintenance, cost), "ring leave");
                if matches!(action, ChurnAction::Leave(_)) {
                    let counts = self.layout.on_membership_change(&self.system, peer, false);
                    self.book(&counts, "addressing update on leave");
                }
            }
            ChurnAction::Join { vo, node } => {
                if self.system.vo(vo).is_err() {
                    return;
                }
                let node = node.unwrap_or_else(|| self.system.fresh_node_id(vo, &mut self.rng));
                let peer = PeerId::new(vo, node);
                let Ok(cost) = self.system.join_ring(peer) else {
                    return;
                };
                self.book(&MessageCounts::of(Category::DhtMaintenance, cost), "ring join");
                if self.layout.method() == MethodId::Damt {
                    if self.system.ring(vo).len() > 1 {
                        let net = self.net.clone();
                        if let Ok(def) = self.system.define_access_points(peer, &net) {
                            self.book(&def.counts, "access-point definition");
                            for unreachable in def.unreachable {
                                self.warn(None, Some(unreachable), format!("{peer} found no access point toward {unreachable}"));
                            }
                        }
                    }
                } else {
                    let counts = self.layout.on_membership_change(&self.system, peer, true);
                    self.book(&counts, "addressing update on join");
                }
            }
            ChurnAction::Reconnect(vo) => {
                let _ = self.system.reconnect(vo);
            }
        }
    }
}

/// Discovery traffic submitted during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    None,
    /// Every live peer submits `rate_per_peer` queries per second for
    /// `duration_ms`, evenly spaced from a random phase, each shifted by a
    /// jitter of at most a tenth of the spacing.
    Rate {
        rate_per_peer: f64,
        duration_ms: f64,
        #[serde(default)]
        start_ms: f64,
    },
    /// `count` queries from random live peers, `spacing_ms` apart, so that
    /// no two overlap.
    Isolated { count: usize, spacing_ms: f64 },
}

/// Peer arrivals and departures during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChurnModel {
    None,
    /// `peers` friendly departures, `spacing_ms` apart from `start_ms`,
    /// each followed 1 ms later by an arrival in the same VO.
    Count {
        peers: usize,
        #[serde(default)]
        start_ms: f64,
        #[serde(default = "default_churn_spacing")]
        spacing_ms: f64,
    },
    /// Observation window of `window_ms`: at `session_fraction` of it,
    /// `churn_fraction` of each VO's peers leave and are replaced 1 ms
    /// later. Queries still open at the end of the window are closed.
    Session {
        window_ms: f64,
        session_fraction: f64,
        churn_fraction: f64,
    },
}

fn default_churn_spacing() -> f64 {
    100.0
}

fn live_by_vo(system: &System) -> Vec<(OntologyId, Vec<PeerId>)> {
    system
        .vos()
        .map(|v| (v.ontology, v.peers().filter(|p| system.is_live(*p)).collect()))
        .collect()
}

/// Schedules the queries of `workload`; returns how many were submitted.
/// Concepts are drawn uniformly from the origin's ontology of
/// `concepts_per_ontology` concepts.
pub fn inject_query_load<R: Rng>(
    sim: &mut Simulator,
    workload: &Workload,
    concepts_per_ontology: usize,
    rng: &mut R,
) -> usize {
    let concept_for = |rng: &mut R, origin: PeerId| concept_name(origin.vo, rng.gen_range(0..concepts_per_ontology.max(1)));
    match *workload {
        Workload::None => 0,
        Workload::Rate {
            rate_per_peer,
            duration_ms,
            start_ms,
        } => {
            // Also rejects NaN.
            let positive = |x: f64| x > 0.0;
            if !positive(rate_per_peer) || !positive(duration_ms) {
                return 0;
            }
            let interval = 1_000_000.0 / rate_per_peer;
            let duration = duration_ms * 1000.0;
            let start = ms(start_ms);
            let mut submitted = 0;
            let peers: Vec<PeerId> = live_by_vo(sim.system()).into_iter().flat_map(|(_, p)| p).collect();
            for origin in peers {
                let phase = rng.gen::<f64>() * interval;
                let mut k = 0u64;
                loop {
                    let t = phase + k as f64 * interval;
                    if t >= duration {
                        break;
                    }
                    let jitter = rng.gen::<f64>() * 0.1 * interval;
                    let at = start + (t + jitter).round() as SimTime;
                    let concept = concept_for(rng, origin);
                    sim.submit(at, origin, concept);
                    submitted += 1;
                    k += 1;
                }
            }
            submitted
        }
        Workload::Isolated { count, spacing_ms } => {
            let peers: Vec<PeerId> = live_by_vo(sim.system()).into_iter().flat_map(|(_, p)| p).collect();
            if peers.is_empty() {
                return 0;
            }
            for i in 0..count {
                let origin = peers[rng.gen_range(0..peers.len())];
                let concept = concept_for(rng, origin);
                sim.submit(ms(spacing_ms * i as f64), origin, concept);
            }
            count
        }
    }
}

/// Schedules the departures and arrivals of `churn`; returns the number of
/// departures. Peers that are alone in their VO never leave.
pub fn inject_churn<R: Rng>(sim: &mut Simulator, churn: &ChurnModel, rng: &mut R) -> usize {
    let replace_after = ms(1.0);
    match *churn {
        ChurnModel::None => 0,
        ChurnModel::Count {
            peers,
            start_ms,
            spacing_ms,
        } => {
            let mut pools = live_by_vo(sim.system());
            let mut scheduled = 0;
            for i in 0..peers {
                let eligible: Vec<(usize, usize)> = pools
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, p))| p.len() >= 2)
                    .flat_map(|(v, (_, p))| (0..p.len()).map(move |j| (v, j)))
                    .collect();
                if eligible.is_empty() {
                    break;
                }
                let (v, j) = eligible[rng.gen_range(0..eligible.len())];
                let peer = pools[v].1.swap_remove(j);
                let at = ms(start_ms + spacing_ms * i as f64);
                sim.schedule_churn(at, ChurnAction::Leave(peer));
                sim.schedule_churn(at + replace_after, ChurnAction::Join { vo: peer.vo, node: None });
                scheduled += 1;
            }
            scheduled
        }
        ChurnModel::Session {
            window_ms,
            session_fraction,
            churn_fraction,
        } => {
            sim.set_horizon(ms(window_ms));
            let at = ms(window_ms * session_fraction);
            let mut scheduled = 0;
            for (vo, peers) in live_by_vo(sim.system()) {
                let leaving = ((peers.len() as f64 * churn_fraction).round() as usize).min(peers.len().saturating_sub(1));
                for i in rand::seq::index::sample(rng, peers.len(), leaving) {
                    sim.schedule_churn(at, ChurnAction::Leave(peers[i]));
                    sim.schedule_churn(at + replace_after, ChurnAction::Join { vo, node: None });
                    scheduled += 1;
                }
            }
            scheduled
        }
    }
}
