//! Scenario configuration (TOML) and construction of a ready-to-run
//! simulator from it.
//!
//! A configuration file holds one or more `[[scenarios]]` tables:
//!
//! ```toml
//! [[scenarios]]
//! experiment = "smoke"
//! methods = ["damt", "dflooding"]
//! vo_count = 4
//! peers_per_vo = 20
//! seed = 7
//! topology = { kind = "random" }
//! workload = { kind = "isolated", count = 5, spacing_ms = 5000.0 }
//! churn = { mode = "none" }
//! ```

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chord::{NodeId, SourceMetadata, DEFAULT_ID_BITS};
use crate::discovery::{DamtPropagation, Layout, MethodId};
use crate::error::{Error, Result};
use crate::network::NetworkModel;
use crate::ontology::{concept_name, generate, Topology};
use crate::overlay::{PeerId, System};
use crate::sim::{inject_churn, inject_query_load, ChurnModel, Simulator, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Free-form tag copied into result rows, e.g. the sweep name.
    #[serde(default)]
    pub experiment: String,
    pub methods: Vec<MethodId>,
    /// Requested mapping topology. Only DAMT uses it as given; the
    /// baselines impose their own.
    #[serde(default = "Topology::default_random")]
    pub topology: Topology,
    /// Forwarding rule of DAMT peers; ignored by the other methods.
    #[serde(default)]
    pub damt_propagation: DamtPropagation,
    pub vo_count: usize,
    pub peers_per_vo: usize,
    #[serde(default = "default_concepts")]
    pub concepts_per_ontology: usize,
    #[serde(default = "default_one")]
    pub sources_per_peer: usize,
    #[serde(default = "default_coverage")]
    pub mapping_coverage: f64,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default = "default_workload")]
    pub workload: Workload,
    #[serde(default = "default_churn")]
    pub churn: ChurnModel,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_concepts() -> usize {
    20
}

fn default_one() -> usize {
    1
}

fn default_coverage() -> f64 {
    1.0
}

fn default_workload() -> Workload {
    Workload::None
}

fn default_churn() -> ChurnModel {
    ChurnModel::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenarios: Vec<Scenario>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| Error::invalid("config", e.message().to_string()))?;
        for (i, s) in file.scenarios.iter().enumerate() {
            s.validate().map_err(|e| match e {
                Error::ScenarioInvalid { field, reason } => Error::ScenarioInvalid {
                    field: format!("scenarios[{i}].{field}"),
                    reason,
                },
                other => other,
            })?;
        }
        Ok(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios always serialize")
    }
}

/// Ids per VO must leave room in the identifier space.
const MAX_PEERS_PER_VO: usize = 1 << (DEFAULT_ID_BITS - 1);

fn fraction(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be within [0, 1], got {v}")))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be > 0, got {v}")))
    }
}

impl Scenario {
    /// A single-method scenario with library defaults, for programmatic use.
    pub fn basic(method: MethodId, vo_count: usize, peers_per_vo: usize, seed: u64) -> Self {
        Scenario {
            experiment: String::new(),
            methods: vec![method],
            topology: Topology::default_random(),
            damt_propagation: DamtPropagation::default(),
            vo_count,
            peers_per_vo,
            concepts_per_ontology: default_concepts(),
            sources_per_peer: 1,
            mapping_coverage: 1.0,
            network: NetworkModel::default(),
            workload: Workload::None,
            churn: ChurnModel::None,
            seed,
            repetitions: 1,
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("methods", "at least one method is required"));
        }
        if self.vo_count == 0 {
            return Err(Error::invalid("vo_count", "must be >= 1"));
        }
        if self.peers_per_vo == 0 || self.peers_per_vo > MAX_PEERS_PER_VO {
            return Err(Error::invalid(
                "peers_per_vo",
                format!("must be within [1, {MAX_PEERS_PER_VO}], got {}", self.peers_per_vo),
            ));
        }
        if self.concepts_per_ontology == 0 {
            return Err(Error::invalid("concepts_per_ontology", "must be >= 1"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions", "must be >= 1"));
        }
        fraction("mapping_coverage", self.mapping_coverage)?;
        if let Topology::Random {
            edge_probability: Some(p),
        } = self.topology
        {
            fraction("topology.edge_probability", p)?;
        }
        self.network
            .validate()
            .map_err(|(field, reason)| Error::ScenarioInvalid { field, reason })?;
        match self.workload {
            Workload::None => {}
            Workload::Rate {
                rate_per_peer,
                duration_ms,
                start_ms,
            } => {
                if !(rate_per_peer.is_finite() && rate_per_peer >= 0.0) {
                    return Err(Error::invalid("workload.rate_per_peer", "must be >= 0"));
                }
                positive("workload.duration_ms", duration_ms)?;
                if !(start_ms.is_finite() && start_ms >= 0.0) {
                    return Err(Error::invalid("workload.start_ms", "must be >= 0"));
                }
            }
            Workload::Isolated { spacing_ms, .. } => positive("workload.spacing_ms", spacing_ms)?,
        }
        match self.churn {
            ChurnModel::None => {}
            ChurnModel::Count {
                start_ms, spacing_ms, ..
            } => {
                if !(start_ms.is_finite() && start_ms >= 0.0) {
                    return Err(Error::invalid("churn.start_ms", "must be >= 0"));
                }
                positive("churn.spacing_ms", spacing_ms)?;
            }
            ChurnModel::Session {
                window_ms,
                session_fraction,
                churn_fraction,
            } => {
                positive("churn.window_ms", window_ms)?;
                fraction("churn.session_fraction", session_fraction)?;
                fraction("churn.churn_fraction", churn_fraction)?;
            }
        }
        Ok(())
    }

    /// Stable digest of the scenario: first 16 hex digits of the SHA-256 of
    /// its canonical TOML form.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("scenarios always serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Seed of one repetition.
    pub fn repetition_seed(&self, repetition: usize) -> u64 {
        self.seed.wrapping_add(repetition as u64)
    }

    /// Query rate per peer, or 0 for non-rate workloads.
    pub fn load(&self) -> f64 {
        match self.workload {
            Workload::Rate { rate_per_peer, .. } => rate_per_peer,
            _ => 0.0,
        }
    }

    /// Churned peers (count mode) or session fraction (session mode).
    pub fn churn_level(&self) -> f64 {
        match self.churn {
            ChurnModel::None => 0.0,
            ChurnModel::Count { peers, .. } => peers as f64,
            ChurnModel::Session { session_fraction, .. } => session_fraction,
        }
    }

    /// Builds the system for `method` and schedules the workload and churn.
    /// Peer ids, sources and queries depend only on the scenario and the
    /// repetition, so every method faces the same population and requests.
    pub fn build(&self, method: MethodId, repetition: usize) -> Result<Simulator> {
        self.validate()?;
        let seed = self.repetition_seed(repetition);
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let topology = method.imposed_topology(self.topology);
        let graph = generate(
            topology,
            self.vo_count,
            self.concepts_per_ontology,
            self.mapping_coverage,
            &mut stream(1),
        )?;
        let mut system = System::new(graph, DEFAULT_ID_BITS);
        let space = 1usize << DEFAULT_ID_BITS;
        let mut ids = stream(2);
        let vo_ids: Vec<_> = system.vo_ids().collect();
        for &vo in &vo_ids {
            let nodes = sample(&mut ids, space, self.peers_per_vo).into_iter().map(|i| NodeId(i as u64));
            system.populate(vo, nodes)?;
        }
        let mut sources = stream(3);
        for &vo in &vo_ids {
            let peers: Vec<PeerId> = system.vo(vo)?.peers().collect();
            for peer in peers {
                for i in 0..self.sources_per_peer {
                    let concept = concept_name(vo, sources.gen_range(0..self.concepts_per_ontology));
                    let meta = SourceMetadata {
                        source_id: format!("src-{}-{}-{i}", vo.0, peer.node.0),
                        owner: peer,
                        descriptor: format!("{concept} data source"),
                        concept,
                    };
                    system.publish(peer, meta)?;
                }
            }
        }
        let mut addressing = stream(4);
        let layout = match Layout::build(method, &system, &mut addressing)? {
            Layout::Damt { .. } => Layout::Damt {
                propagation: self.damt_propagation,
            },
            other => other,
        };
        if method == MethodId::Damt {
            system.bootstrap_access_points(&self.network, &mut addressing)?;
        }
        let mut sim = Simulator::new(system, layout, self.network.clone(), seed ^ 0x5eed);
        inject_query_load(&mut sim, &self.workload, self.concepts_per_ontology, &mut stream(5));
        inject_churn(&mut sim, &self.churn, &mut stream(6));
        Ok(sim)
    }
}
