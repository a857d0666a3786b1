//! Experiment runs, parameter sweeps, the CSV result format and the trend
//! checker that reads it back.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::discovery::MethodId;
use crate::error::{Error, Result};
use crate::metrics::{summarize, Category};
use crate::ontology::Topology;
use crate::scenario::Scenario;
use crate::sim::{ChurnModel, Workload};

/// Column names of the result CSV, in order.
pub const CSV_HEADER: [&str; 21] = [
    "fingerprint",
    "experiment",
    "method",
    "seed",
    "repetition",
    "vo_count",
    "peers_per_vo",
    "load",
    "churn",
    "mean_ms",
    "median_ms",
    "p95_ms",
    "dht_routing",
    "inter_vo_query",
    "inter_vo_response",
    "ap_probe",
    "dht_maintenance",
    "addressing_maintenance",
    "total_messages",
    "queries_completed",
    "queries_partial",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fingerprint: String,
    pub experiment: String,
    pub method: MethodId,
    pub seed: u64,
    pub repetition: usize,
    pub vo_count: usize,
    pub peers_per_vo: usize,
    pub load: f64,
    pub churn: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub dht_routing: u64,
    pub inter_vo_query: u64,
    pub inter_vo_response: u64,
    pub ap_probe: u64,
    pub dht_maintenance: u64,
    pub addressing_maintenance: u64,
    pub total_messages: u64,
    pub queries_completed: usize,
    pub queries_partial: usize,
}

impl ResultRow {
    pub fn maintenance(&self) -> u64 {
        self.dht_maintenance + self.addressing_maintenance
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Runs one method and repetition of a scenario.
pub fn run_one(scenario: &Scenario, method: MethodId, repetition: usize) -> Result<ResultRow> {
    let mut sim = scenario.build(method, repetition)?;
    let ledger = sim.run();
    let lat = summarize(&ledger.latencies_ms());
    let c = ledger.counts;
    Ok(ResultRow {
        fingerprint: scenario.fingerprint(),
        experiment: scenario.experiment.clone(),
        method,
        seed: scenario.repetition_seed(repetition),
        repetition,
        vo_count: scenario.vo_count,
        peers_per_vo: scenario.peers_per_vo,
        load: scenario.load(),
        churn: scenario.churn_level(),
        mean_ms: round3(lat.mean),
        median_ms: round3(lat.median),
        p95_ms: round3(lat.p95),
        dht_routing: c.get(Category::DhtRouting),
        inter_vo_query: c.get(Category::InterVoQuery),
        inter_vo_response: c.get(Category::InterVoResponse),
        ap_probe: c.get(Category::ApProbe),
        dht_maintenance: c.get(Category::DhtMaintenance),
        addressing_maintenance: c.get(Category::AddressingMaintenance),
        total_messages: c.total(),
        queries_completed: ledger.completed(),
        queries_partial: ledger.partial(),
    })
}

/// One row per (scenario, method, repetition), computed on up to `workers`
/// threads and returned sorted by fingerprint, method and repetition.
pub fn run_scenarios(scenarios: &[Scenario], workers: usize) -> Result<Vec<ResultRow>> {
    let jobs: Vec<(&Scenario, MethodId, usize)> = scenarios
        .iter()
        .flat_map(|s| {
            s.methods
                .iter()
                .flat_map(move |&m| (0..s.repetitions).map(move |r| (s, m, r)))
        })
        .collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(s, m, r)) = jobs.get(i) else {
                    break;
                };
                let out = run_one(s, m, r).map_err(|e| {
                    Error::invalid(format!("scenario {}", s.fingerprint()), format!("{m}: {e}"))
                });
                results.lock().expect("no worker panics").push(out);
            });
        }
    });
    let mut rows = results
        .into_inner()
        .expect("no worker panics")
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        (&a.fingerprint, a.method, a.repetition).cmp(&(&b.fingerprint, b.method, b.repetition))
    });
    Ok(rows)
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn write_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let io = |e: csv::Error| Error::invalid("output", e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::invalid("output", e.to_string()))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r
        .headers()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?
        .clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::SchemaMismatch(format!(
            "expected header `{}`, found `{}`",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::SchemaMismatch(format!("row {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(format!("unknown scale `{other}` (desk or paper)")),
        }
    }
}

pub const FIGURES: [&str; 6] = ["fig5", "fig6", "fig8", "fig9", "fig10", "fig11"];

const VO_SWEEP: [usize; 6] = [2, 5, 10, 25, 50, 100];
const LOAD_GRID: [f64; 8] = [1.0, 5.0, 10.0, 20.0, 25.0, 50.0, 100.0, 500.0];
const CHURN_GRID: [usize; 6] = [1, 5, 10, 20, 50, 70];
const CHURN_PERCENT: [f64; 6] = [1.0, 5.0, 10.0, 20.0, 50.0, 70.0];

/// Parameter grid of one experiment at the given scale. Desk scale uses
/// 1000 peers in total, paper scale 10000.
pub fn sweep(figure: &str, scale: Scale, seed: u64) -> Result<Vec<Scenario>> {
    let total = match scale {
        Scale::Desk => 1000,
        Scale::Paper => 10_000,
    };
    let burst_ms = match scale {
        Scale::Desk => 50.0,
        Scale::Paper => 100.0,
    };
    let base = |vo_count: usize| {
        let mut s = Scenario::basic(MethodId::Damt, vo_count, total / vo_count, seed);
        s.experiment = figure.to_string();
        s.methods = MethodId::ALL.to_vec();
        s.topology = Topology::default_random();
        s
    };
    let fig6_vo_counts: &[usize] = match scale {
        Scale::Desk => &[10],
        Scale::Paper => &[10, 100],
    };
    let rate = |r: f64| Workload::Rate {
        rate_per_peer: r,
        duration_ms: burst_ms,
        start_ms: 0.0,
    };
    let count_churn = |peers: usize| ChurnModel::Count {
        peers,
        start_ms: 0.0,
        spacing_ms: 100.0,
    };
    let grid: Vec<Scenario> = match figure {
        "fig5" => VO_SWEEP
            .iter()
            .map(|&v| Scenario {
                workload: Workload::Isolated {
                    count: 20,
                    spacing_ms: 5000.0,
                },
                ..base(v)
            })
            .collect(),
        "fig6" => fig6_vo_counts
            .iter()
            .copied()
            .flat_map(|v| LOAD_GRID.iter().map(move |&r| (v, r)))
            .map(|(v, r)| Scenario {
                workload: rate(r),
                ..base(v)
            })
            .collect(),
        "fig8" => VO_SWEEP
            .iter()
            .map(|&v| Scenario {
                methods: vec![MethodId::Damt, MethodId::DFlooding],
                workload: rate(20.0),
                ..base(v)
            })
            .collect(),
        "fig9" => CHURN_GRID
            .iter()
            .map(|&k| Scenario {
                churn: count_churn(k),
                ..base(10)
            })
            .collect(),
        "fig10" => CHURN_PERCENT
            .iter()
            .map(|&pct| Scenario {
                churn: count_churn((pct / 100.0 * total as f64).round() as usize),
                ..base(10)
            })
            .collect(),
        "fig11" => (1..=10)
            .map(|k| Scenario {
                workload: Workload::Rate {
                    rate_per_peer: 100.0,
                    duration_ms: 10.0,
                    start_ms: 0.0,
                },
                churn: ChurnModel::Session {
                    window_ms: 10_000.0,
                    session_fraction: k as f64 / 10.0,
                    churn_fraction: 0.05,
                },
                ..base(10)
            })
            .collect(),
        other => return Err(Error::UnknownFigure(other.to_string())),
    };
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub assertion: String,
    pub measured: String,
    pub required: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        !self.lines.is_empty() && self.lines.iter().all(|l| l.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.lines.iter().filter(|l| !l.pass)
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.lines {
            writeln!(
                f,
                "[{}] {}: measured {}, required {}",
                if l.pass { "PASS" } else { "FAIL" },
                l.assertion,
                l.measured,
                l.required
            )?;
        }
        Ok(())
    }
}

/// Maintenance ratio DAMT / DFLOODING must not exceed this.
pub const MAINTENANCE_RATIO_MAX: f64 = 0.80;
/// Latency ratio DSP / DAMT at 10 queries per second must reach this.
pub const DSP_SLOWDOWN_MIN: f64 = 2.0;

type GroupKey = (String, u64, usize, usize, String, String);

fn group(rows: &[ResultRow], experiment: &str) -> BTreeMap<GroupKey, BTreeMap<MethodId, ResultRow>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<MethodId, ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.experiment == experiment) {
        let key = (
            r.experiment.clone(),
            r.seed,
            r.repetition,
            r.vo_count,
            format!("{}", r.load),
            format!("{}", r.churn),
        );
        groups.entry(key).or_default().insert(r.method, r.clone());
    }
    groups
}

fn line(assertion: String, measured: String, required: &str, pass: bool) -> CheckLine {
    CheckLine {
        assertion,
        measured,
        required: required.to_string(),
        pass,
    }
}

/// Evaluates every trend assertion that applies to the rows present.
pub fn report_check(rows: &[ResultRow]) -> CheckReport {
    use MethodId::*;
    let mut lines = Vec::new();
    if rows.is_empty() {
        lines.push(line("input".into(), "no rows".into(), "at least one row", false));
        return CheckReport { lines };
    }
    for ((_, seed, _, _, _, churn), m) in group(rows, "fig9") {
        let (Some(a), Some(f), Some(s), Some(c)) = (m.get(&Damt), m.get(&DFlooding), m.get(&Dsp), m.get(&D2b2)) else {
            continue;
        };
        let (a, f, s, c) = (a.maintenance(), f.maintenance(), s.maintenance(), c.maintenance());
        lines.push(line(
            format!("fig9 seed {seed} churn {churn}: maintenance DAMT < DFLOODING < DSP <= D2B2"),
            format!("{a} / {f} / {s} / {c}"),
            "strict ordering",
            a < f && f < s && s <= c,
        ));
        let ratio = a as f64 / f as f64;
        lines.push(line(
            format!("fig9 seed {seed} churn {churn}: maintenance DAMT/DFLOODING"),
            format!("{ratio:.3}"),
            "<= 0.80",
            ratio <= MAINTENANCE_RATIO_MAX,
        ));
    }
    let mut flood_vs_damt: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for ((_, seed, _, vo_count, _, _), m) in group(rows, "fig5") {
        if let Some(c) = m.get(&D2b2) {
            let others = m.values().filter(|r| r.method != D2b2);
            let worst_other = others.map(|r| r.mean_ms).fold(f64::NEG_INFINITY, f64::max);
            lines.push(line(
                format!("fig5 seed {seed} vo_count {vo_count}: D2B2 has the largest mean latency"),
                format!("{:.3} vs {:.3}", c.mean_ms, worst_other),
                "D2B2 > every other method",
                c.mean_ms > worst_other,
            ));
        }
        if let (Some(a), Some(f)) = (m.get(&Damt), m.get(&DFlooding)) {
            let e = flood_vs_damt.entry(seed).or_default();
            e.0 += f.mean_ms;
            e.1 += a.mean_ms;
            e.2 += 1;
        }
    }
    for (seed, (f, a, n)) in flood_vs_damt {
        lines.push(line(
            format!("fig5 seed {seed}: DFLOODING <= DAMT mean latency over the VO sweep"),
            format!("{:.3} vs {:.3}", f / n as f64, a / n as f64),
            "DFLOODING <= DAMT",
            f <= a,
        ));
    }
    for ((_, seed, _, vo_count, load, _), m) in group(rows, "fig6") {
        let load_value: f64 = load.parse().unwrap_or(0.0);
        let (Some(a), Some(f), Some(s)) = (m.get(&Damt), m.get(&DFlooding), m.get(&Dsp)) else {
            continue;
        };
        if load_value >= 50.0 {
            lines.push(line(
                format!("fig6 seed {seed} vo_count {vo_count} load {load}: DAMT <= DFLOODING mean latency"),
                format!("{:.3} vs {:.3}", a.mean_ms, f.mean_ms),
                "DAMT <= DFLOODING",
                a.mean_ms <= f.mean_ms,
            ));
        }
        if load_value == 10.0 {
            let ratio = s.mean_ms / a.mean_ms;
            lines.push(line(
                format!("fig6 seed {seed} vo_count {vo_count} load {load}: DSP/DAMT mean latency"),
                format!("{ratio:.3}"),
                ">= 2.0",
                ratio >= DSP_SLOWDOWN_MIN,
            ));
        }
    }
    if lines.is_empty() {
        lines.push(line(
            "applicable assertions".into(),
            "none".into(),
            "rows from fig5, fig6 or fig9",
            false,
        ));
    }
    CheckReport { lines }
}
