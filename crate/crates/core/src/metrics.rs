//! Message counters, per-query latency records and the optional event trace.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ontology::OntologyId;
use crate::overlay::PeerId;

/// Simulated time in microseconds.
pub type SimTime = u64;

pub fn ms(value: f64) -> SimTime {
    (value * 1000.0).round() as SimTime
}

pub fn to_ms(t: SimTime) -> f64 {
    t as f64 / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    DhtRouting,
    InterVoQuery,
    InterVoResponse,
    ApProbe,
    DhtMaintenance,
    AddressingMaintenance,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::DhtRouting,
        Category::InterVoQuery,
        Category::InterVoResponse,
        Category::ApProbe,
        Category::DhtMaintenance,
        Category::AddressingMaintenance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::DhtRouting => "dht_routing",
            Category::InterVoQuery => "inter_vo_query",
            Category::InterVoResponse => "inter_vo_response",
            Category::ApProbe => "ap_probe",
            Category::DhtMaintenance => "dht_maintenance",
            Category::AddressingMaintenance => "addressing_maintenance",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts([u64; 6]);

impl MessageCounts {
    pub fn add(&mut self, category: Category, n: u64) {
        self.0[category.index()] += n;
    }

    pub fn get(&self, category: Category) -> u64 {
        self.0[category.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn merge(&mut self, other: &MessageCounts) {
        for c in Category::ALL {
            self.add(c, other.get(c));
        }
    }

    pub fn maintenance(&self) -> u64 {
        self.get(Category::DhtMaintenance) + self.get(Category::AddressingMaintenance)
    }

    pub fn of(category: Category, n: u64) -> Self {
        let mut c = MessageCounts::default();
        c.add(category, n);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub origin: PeerId,
    pub submitted_at: SimTime,
    pub completed_at: Option<SimTime>,
    pub partial: bool,
    pub results: usize,
}

impl QueryRecord {
    pub fn latency(&self) -> Option<SimTime> {
        self.completed_at.map(|c| c - self.submitted_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Deliver,
    Expire,
    Maintenance,
    Churn,
    QuerySubmit,
    QueryDone,
    Warning,
}

/// One line of the newline-delimited trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at_us: SimTime,
    pub kind: TraceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    /// Messages represented by this record (0 for non-message records).
    pub count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<PeerId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to: Option<PeerId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<u64>,
    /// Mapping links already crossed by the query instance carried.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TraceRecord {
    pub fn new(at_us: SimTime, kind: TraceKind) -> Self {
        TraceRecord {
            at_us,
            kind,
            category: None,
            count: 0,
            from: None,
            to: None,
            query_id: None,
            path_len: None,
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub at_us: SimTime,
    pub query_id: Option<u64>,
    pub vo: Option<OntologyId>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub counts: MessageCounts,
    pub queries: Vec<QueryRecord>,
    pub warnings: Vec<Warning>,
    /// Network messages handed to the event queue.
    pub sent: u64,
    pub delivered: u64,
    pub expired: u64,
    pub trace: Option<Vec<TraceRecord>>,
}

impl MetricsLedger {
    pub fn with_trace() -> Self {
        MetricsLedger {
            trace: Some(Vec::new()),
            ..Default::default()
        }
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record(&mut self, rec: TraceRecord) {
        if let Some(t) = self.trace.as_mut() {
            t.push(rec);
        }
    }

    /// Books messages that are accounted without being simulated one by one.
    pub fn add_bulk(&mut self, at: SimTime, counts: &MessageCounts, note: &str) {
        self.counts.merge(counts);
        if self.tracing() {
            for c in Category::ALL {
                let n = counts.get(c);
                if n > 0 {
                    let mut rec = TraceRecord::new(at, TraceKind::Maintenance);
                    rec.category = Some(c);
                    rec.count = n;
                    rec.note = Some(note.to_string());
                    self.record(rec);
                }
            }
        }
    }

    /// Sum of message counts carried by trace records.
    pub fn traced_messages(&self) -> Option<u64> {
        self.trace.as_ref().map(|t| t.iter().map(|r| r.count).sum())
    }

    pub fn latencies_ms(&self) -> Vec<f64> {
        self.queries
            .iter()
            .filter_map(QueryRecord::latency)
            .map(to_ms)
            .collect()
    }

    pub fn completed(&self) -> usize {
        self.queries
            .iter()
            .filter(|q| q.completed_at.is_some() && !q.partial)
            .count()
    }

    pub fn partial(&self) -> usize {
        self.queries.len() - self.completed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Mean, median and nearest-rank 95th percentile; zeros when empty.
pub fn summarize(values: &[f64]) -> LatencySummary {
    if values.is_empty() {
        return LatencySummary {
            mean: 0.0,
            median: 0.0,
            p95: 0.0,
        };
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    LatencySummary {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        p95: v[rank - 1],
    }
}
