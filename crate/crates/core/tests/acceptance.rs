//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit status
//! when any criterion fails. Thresholds are pinned below or imported from
//! the library where the `check` verb uses the same value.

mod common;

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use damt::chord::{ChordRing, NodeId, SourceMetadata};
use damt::discovery::{DamtPropagation, MethodId};
use damt::experiments::{
    default_workers, report_check, run_scenarios, sweep, write_csv, ResultRow, Scale, DSP_SLOWDOWN_MIN,
    MAINTENANCE_RATIO_MAX,
};
use damt::metrics::{Category, TraceKind};
use damt::ontology::{concept_name, ConceptId, OntologyId, Topology};
use damt::overlay::PeerId;
use damt::scenario::{Scenario, ScenarioFile};
use damt::sim::{ChurnAction, ChurnModel};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RING_SIZES: [usize; 3] = [16, 64, 256];
const RING_QUERIES: usize = 1000;
const ID_BITS: u32 = 16;
/// Mean routing hops allowed per lookup, as a multiple of log2(N).
const HOPS_PER_LOG2_N: f64 = 2.0;
const ORACLE_GRAPHS: u64 = 50;
const ORACLE_MAX_VOS: usize = 10;
const CHURNED_PEERS: usize = 10;
const SWEEP_SEEDS: [u64; 3] = [1, 2, 3];
const GOLDEN_TOML: &str = include_str!("golden/scenarios.toml");
const GOLDEN_CSV: &str = include_str!("golden/scenarios.csv");

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce(&mut Sweeps) -> Verdict + 'a>);

struct Sweeps {
    rows: BTreeMap<(&'static str, u64), Vec<ResultRow>>,
}

impl Sweeps {
    fn get(&mut self, figure: &'static str, seed: u64) -> Result<&[ResultRow], String> {
        if let Entry::Vacant(slot) = self.rows.entry((figure, seed)) {
            let grid = sweep(figure, Scale::Desk, seed).map_err(|e| e.to_string())?;
            slot.insert(run_scenarios(&grid, default_workers()).map_err(|e| e.to_string())?);
        }
        Ok(&self.rows[&(figure, seed)])
    }
}

fn record(concept: &ConceptId, i: usize, owner: NodeId) -> SourceMetadata {
    SourceMetadata {
        source_id: format!("s{i}"),
        owner: PeerId::new(OntologyId(0), owner),
        concept: concept.clone(),
        descriptor: String::new(),
    }
}

/// Per ring size: the number of answers that differ from a linear scan of
/// everything published, and the mean lookup hop count.
fn ring_survey() -> Vec<(usize, usize, f64)> {
    RING_SIZES
        .iter()
        .map(|&n| {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let ids: Vec<NodeId> = sample(&mut rng, 1 << ID_BITS, n)
                .into_iter()
                .map(|i| NodeId(i as u64))
                .collect();
            let mut ring = ChordRing::from_ids(ID_BITS, ids.iter().copied()).unwrap();
            // A quarter of the concept pool is never published, so empty
            // answers are exercised too.
            let pool: Vec<ConceptId> = (0..n + n / 4).map(|k| ConceptId::from(format!("c{k}").as_str())).collect();
            let mut published: BTreeMap<ConceptId, BTreeSet<String>> = BTreeMap::new();
            for i in 0..2 * n {
                let concept = &pool[rng.gen_range(0..n)];
                let owner = ids[rng.gen_range(0..n)];
                ring.publish(owner, record(concept, i, owner)).unwrap();
                published.entry(concept.clone()).or_default().insert(format!("s{i}"));
            }
            let mut wrong = 0;
            let mut hops = 0u64;
            for _ in 0..RING_QUERIES {
                let concept = &pool[rng.gen_range(0..pool.len())];
                let start = ids[rng.gen_range(0..n)];
                let (found, h) = ring.find(start, concept).unwrap();
                let found: BTreeSet<String> = found.into_iter().map(|m| m.source_id).collect();
                if found != published.get(concept).cloned().unwrap_or_default() {
                    wrong += 1;
                }
                hops += u64::from(h);
            }
            (n, wrong, hops as f64 / RING_QUERIES as f64)
        })
        .collect()
}

fn intra_vo_correctness(survey: &[(usize, usize, f64)]) -> Verdict {
    let wrong: usize = survey.iter().map(|s| s.1).sum();
    let detail = format!("{} lookups on rings of {RING_SIZES:?} peers, {wrong} differ from the scan", survey.len() * RING_QUERIES);
    if wrong == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lookup_complexity(survey: &[(usize, usize, f64)]) -> Verdict {
    let parts: Vec<String> = survey
        .iter()
        .map(|&(n, _, mean)| format!("N={n}: {mean:.2} <= {:.1}", HOPS_PER_LOG2_N * (n as f64).log2()))
        .collect();
    let ok = survey.iter().all(|&(n, _, mean)| mean <= HOPS_PER_LOG2_N * (n as f64).log2());
    if ok {
        Ok(parts.join(", "))
    } else {
        Err(parts.join(", "))
    }
}

fn damt_completeness() -> Verdict {
    let mut queries = 0;
    for seed in 0..ORACLE_GRAPHS {
        let vo_count = 2 + (seed as usize % (ORACLE_MAX_VOS - 1));
        let mut s = Scenario::basic(MethodId::Damt, vo_count, 8, 1000 + seed);
        s.concepts_per_ontology = 5;
        s.sources_per_peer = 2;
        let mut sim = s.build(MethodId::Damt, 0).map_err(|e| e.to_string())?;
        let peers: Vec<PeerId> = sim.system().live_peers().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let origin = peers[rng.gen_range(0..peers.len())];
            let concept = concept_name(origin.vo, rng.gen_range(0..s.concepts_per_ontology));
            let expected = common::brute_force(sim.system(), origin.vo, &concept);
            let got = sim.discover(origin, concept.clone()).map_err(|e| e.to_string())?;
            if got.source_ids() != expected {
                return Err(format!(
                    "graph {seed} ({vo_count} VOs), {concept} from {origin}: {} results, oracle {}",
                    got.source_ids().len(),
                    expected.len()
                ));
            }
            queries += 1;
        }
    }
    Ok(format!("{queries} queries on {ORACLE_GRAPHS} graphs of 2..={ORACLE_MAX_VOS} VOs equal the oracle"))
}

fn ttl_bound() -> Verdict {
    let topologies = [
        Topology::Path,
        Topology::Star,
        Topology::Complete,
        Topology::default_random(),
        Topology::MinDegree { min_degree: 3 },
    ];
    let mut audited = 0;
    for propagation in [DamtPropagation::ShortestPathTree, DamtPropagation::AllPaths] {
        for topology in topologies {
            for seed in 0..10u64 {
                let mut s = Scenario::basic(MethodId::Damt, 3 + seed as usize % 6, 6, seed);
                s.topology = topology;
                s.damt_propagation = propagation;
                let mut sim = s.build(MethodId::Damt, 0).map_err(|e| e.to_string())?;
                let diameter = sim.system().graph().diameter().map_err(|e| e.to_string())?;
                sim.enable_trace();
                let peers: Vec<PeerId> = sim.system().live_peers().collect();
                for p in peers.iter().step_by(7) {
                    sim.discover(*p, concept_name(p.vo, 0)).map_err(|e| e.to_string())?;
                }
                for rec in sim.ledger().trace.iter().flatten() {
                    if rec.kind != TraceKind::Send || rec.category != Some(Category::InterVoQuery) {
                        continue;
                    }
                    audited += 1;
                    let crossed = rec.path_len.unwrap_or(usize::MAX);
                    if crossed > diameter {
                        return Err(format!(
                            "{topology:?}, {propagation:?}, seed {seed}: query crossed {crossed} links, diameter {diameter}"
                        ));
                    }
                }
            }
        }
    }
    Ok(format!("{audited} inter-VO query sends audited, none beyond the diameter"))
}

fn maintenance_ordering() -> Verdict {
    let mut s = Scenario::basic(MethodId::Damt, 10, 100, 1);
    s.methods = MethodId::ALL.to_vec();
    s.churn = ChurnModel::Count {
        peers: CHURNED_PEERS,
        start_ms: 0.0,
        spacing_ms: 100.0,
    };
    let rows = run_scenarios(&[s], default_workers()).map_err(|e| e.to_string())?;
    let total = |m: MethodId| rows.iter().find(|r| r.method == m).map(|r| r.total_messages).unwrap_or(0);
    let (damt, flood, dsp, d2b2) = (
        total(MethodId::Damt),
        total(MethodId::DFlooding),
        total(MethodId::Dsp),
        total(MethodId::D2b2),
    );
    let ratio = damt as f64 / flood as f64;
    let detail = format!(
        "DAMT {damt} < DFLOODING {flood} < DSP {dsp} <= D2B2 {d2b2}, DAMT/DFLOODING {ratio:.3} <= {MAINTENANCE_RATIO_MAX}"
    );
    if damt < flood && flood < dsp && dsp <= d2b2 && ratio <= MAINTENANCE_RATIO_MAX {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lazy_maintenance() -> Verdict {
    let mut departures = 0;
    for topology in [Topology::Path, Topology::Star, Topology::Complete, Topology::default_random()] {
        for seed in 0..5u64 {
            let s = Scenario {
                topology,
                ..Scenario::basic(MethodId::Damt, 6, 12, seed)
            };
            let mut sim = s.build(MethodId::Damt, 0).map_err(|e| e.to_string())?;
            sim.enable_trace();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let peers: Vec<PeerId> = sim.system().live_peers().collect();
            for (i, idx) in sample(&mut rng, peers.len(), peers.len() / 3).into_iter().enumerate() {
                sim.schedule_churn(1000 * i as u64, ChurnAction::Leave(peers[idx]));
                departures += 1;
            }
            let ledger = sim.run();
            let non_ring: u64 = Category::ALL
                .into_iter()
                .filter(|&c| c != Category::DhtMaintenance)
                .map(|c| ledger.counts.get(c))
                .sum();
            let crossing = ledger
                .trace
                .iter()
                .flatten()
                .filter(|r| r.kind == TraceKind::Send && matches!((r.from, r.to), (Some(a), Some(b)) if a.vo != b.vo))
                .count();
            if non_ring > 0 || crossing > 0 {
                return Err(format!(
                    "{topology:?} seed {seed}: {non_ring} non-ring messages, {crossing} inter-VO sends"
                ));
            }
        }
    }
    Ok(format!("{departures} departures, 0 inter-VO messages"))
}

fn verdict_of(rows: &[ResultRow], what: &str) -> Verdict {
    let report = report_check(rows);
    let lines = report.lines.len();
    let first_failure = report.failures().next().cloned();
    match first_failure {
        None if report.passed() => Ok(format!("{lines} {what} assertions hold")),
        None => Err(format!("no {what} assertions were evaluated")),
        Some(f) => Err(format!("{}: measured {}, required {}", f.assertion, f.measured, f.required)),
    }
}

fn fig5_ordering(sweeps: &mut Sweeps) -> Verdict {
    let mut held = 0;
    for seed in SWEEP_SEEDS {
        let rows = sweeps.get("fig5", seed)?;
        verdict_of(rows, "latency ordering")?;
        held += report_check(rows).lines.len();
    }
    Ok(format!(
        "seeds {SWEEP_SEEDS:?}: D2B2 slowest at every VO count and DFLOODING <= DAMT, {held} assertions hold"
    ))
}

fn fig6_crossover(sweeps: &mut Sweeps) -> Verdict {
    let mut worst_slowdown = f64::INFINITY;
    for seed in SWEEP_SEEDS {
        let rows = sweeps.get("fig6", seed)?;
        verdict_of(rows, "load")?;
        let mean = |m: MethodId| rows.iter().find(|r| r.method == m && r.load == 10.0).map(|r| r.mean_ms);
        if let (Some(dsp), Some(damt)) = (mean(MethodId::Dsp), mean(MethodId::Damt)) {
            worst_slowdown = worst_slowdown.min(dsp / damt);
        }
    }
    Ok(format!(
        "seeds {SWEEP_SEEDS:?}: DAMT <= DFLOODING from 50 q/s/peer, smallest DSP/DAMT at 10 q/s/peer {worst_slowdown:.1} >= {DSP_SLOWDOWN_MIN}"
    ))
}

fn determinism() -> Verdict {
    let file = ScenarioFile::parse(GOLDEN_TOML).map_err(|e| e.to_string())?;
    for workers in [1, 3] {
        let rows = run_scenarios(&file.scenarios, workers).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        write_csv(&mut out, &rows).map_err(|e| e.to_string())?;
        if out != GOLDEN_CSV.as_bytes() {
            return Err(format!("golden CSV differs when run with {workers} worker(s)"));
        }
    }
    Ok(format!("{} golden rows byte-identical with 1 and 3 workers", GOLDEN_CSV.lines().count() - 1))
}

fn sweeps_pass_check(sweeps: &mut Sweeps) -> Verdict {
    let mut evaluated = 0;
    for seed in SWEEP_SEEDS {
        for figure in ["fig5", "fig6", "fig9"] {
            let rows = sweeps.get(figure, seed)?;
            let report = report_check(rows);
            if let Some(f) = report.failures().next() {
                return Err(format!("{figure} seed {seed}: {}", f.assertion));
            }
            if !report.passed() {
                return Err(format!("{figure} seed {seed}: nothing checked"));
            }
            evaluated += report.lines.len();
        }
    }
    Ok(format!("fig5, fig6 and fig9 for seeds {SWEEP_SEEDS:?}: {evaluated} assertions hold"))
}

fn main() -> ExitCode {
    // Assertion failures inside a criterion are reported as that
    // criterion's failure rather than aborting the run.
    std::panic::set_hook(Box::new(|_| {}));
    let mut sweeps = Sweeps { rows: BTreeMap::new() };
    let survey = ring_survey();
    let criteria: Vec<Criterion> = vec![
        ("intra-VO correctness", Box::new(|_| intra_vo_correctness(&survey))),
        ("lookup complexity", Box::new(|_| lookup_complexity(&survey))),
        ("DAMT completeness and soundness", Box::new(|_| damt_completeness())),
        ("TTL bound", Box::new(|_| ttl_bound())),
        ("maintenance ordering", Box::new(|_| maintenance_ordering())),
        ("lazy maintenance on departure", Box::new(|_| lazy_maintenance())),
        ("single-query latency ordering", Box::new(fig5_ordering)),
        ("load crossover", Box::new(fig6_crossover)),
        ("determinism", Box::new(|_| determinism())),
        ("trend check on fresh desk sweeps", Box::new(sweeps_pass_check)),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(|| run(&mut sweeps)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        match verdict {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
