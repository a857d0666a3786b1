//! Per-hop latency model and the per-peer FIFO service queue.

use serde::{Deserialize, Serialize};

use crate::metrics::{ms, SimTime};
use crate::overlay::PeerId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkModel {
    pub inter_vo_hop_ms: f64,
    pub intra_vo_hop_ms: f64,
    pub service_time_ms: f64,
    /// Time after which an unanswered request counts as lost.
    pub rtt_budget_ms: f64,
    /// Deadline after which a discovery with missing branches is closed.
    pub query_close_ms: f64,
    /// Informational only.
    pub bandwidth: String,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            inter_vo_hop_ms: 10.0,
            intra_vo_hop_ms: 1.0,
            service_time_ms: 1.0,
            rtt_budget_ms: 50.0,
            query_close_ms: 60_000.0,
            bandwidth: "100 Mb/s".into(),
        }
    }
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let checks = [
            ("inter_vo_hop_ms", self.inter_vo_hop_ms),
            ("intra_vo_hop_ms", self.intra_vo_hop_ms),
            ("service_time_ms", self.service_time_ms),
            ("rtt_budget_ms", self.rtt_budget_ms),
            ("query_close_ms", self.query_close_ms),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err((format!("network.{name}"), format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn hop(&self, from: PeerId, to: PeerId) -> SimTime {
        if from.vo == to.vo {
            ms(self.intra_vo_hop_ms)
        } else {
            ms(self.inter_vo_hop_ms)
        }
    }

    pub fn service(&self) -> SimTime {
        ms(self.service_time_ms)
    }

    pub fn rtt_budget(&self) -> SimTime {
        ms(self.rtt_budget_ms)
    }
}

/// Single FIFO server: messages are handled one at a time, in arrival order,
/// each taking a fixed service time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PeerQueue {
    busy_until: SimTime,
}

impl PeerQueue {
    /// Admits a message arriving at `arrival` and returns its completion
    /// time.
    pub fn admit(&mut self, arrival: SimTime, service: SimTime) -> SimTime {
        let done = arrival.max(self.busy_until) + service;
        self.busy_until = done;
        done
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifo_queue_serializes_work() {
        let mut q = PeerQueue::default();
        assert_eq!(q.admit(0, 1000), 1000);
        assert_eq!(q.admit(0, 1000), 2000);
        assert_eq!(q.admit(5000, 1000), 6000);
    }

    /// Poisson arrivals into the deterministic server against the M/D/1
    /// mean waiting time rho / (2 mu (1 - rho)).
    #[test]
    fn matches_md1_mean_wait() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let service = 1000u64;
        for rho in [0.3, 0.6, 0.8] {
            let lambda = rho / service as f64;
            let mut q = PeerQueue::default();
            let mut t = 0.0f64;
            let mut wait = 0.0;
            let n = 400_000;
            for _ in 0..n {
                t += -rng.gen::<f64>().ln() / lambda;
                let arrival = t as SimTime;
                let done = q.admit(arrival, service);
                wait += (done - service - arrival) as f64;
            }
            let measured = wait / n as f64;
            let expected = rho / (2.0 * (1.0 / service as f64) * (1.0 - rho));
            assert!(
                (measured - expected).abs() / expected < 0.1,
                "rho={rho} measured={measured} expected={expected}"
            );
        }
    }

    #[test]
    fn latencies_depend_on_vo_boundary() {
        use crate::chord::NodeId;
        use crate::ontology::OntologyId;
        let net = NetworkModel::default();
        let a = PeerId::new(OntologyId(0), NodeId(1));
        let b = PeerId::new(OntologyId(0), NodeId(2));
        let c = PeerId::new(OntologyId(1), NodeId(1));
        assert_eq!(net.hop(a, b), 1000);
        assert_eq!(net.hop(a, c), 10_000);
        assert!(net.validate().is_ok());
        let bad = NetworkModel {
            service_time_ms: 0.0,
            ..NetworkModel::default()
        };
        assert!(bad.validate().is_err());
    }
}
