//! Random topologies, demand lists and scheduler settings, plus the
//! invariant check applied to each.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qdcsim::dag::build_dag;
use qdcsim::engine::{EventKind, Timeline};
use qdcsim::{
    build_topology, simulate, EprDemand, FidelityModel, LatencyModel, NetworkTopology, QpuSpec, SchedulerConfig,
    SimOutcome, StochasticParams, Strategy, TopologyKind, TopologyParams,
};

pub struct Instance {
    pub topo: NetworkTopology,
    pub demands: Vec<EprDemand>,
    pub config: SchedulerConfig,
    pub latency: LatencyModel,
}

impl Instance {
    pub fn run(&self) -> qdcsim::Result<SimOutcome> {
        simulate(&self.topo, &self.demands, &self.config, &self.latency, &FidelityModel::default())
    }
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = [TopologyKind::Clos, TopologyKind::SpineLeaf, TopologyKind::FatTree][rng.random_range(0..3)];
    let comm = rng.random_range(1..=3);
    let topo = build_topology(TopologyParams {
        kind,
        num_racks: rng.random_range(1..=4),
        qpus_per_rack: rng.random_range(2..=3),
        qpu_spec: QpuSpec {
            data_qubits: 8,
            buffer_qubits: comm + rng.random_range(1..=4),
            comm_qubits: comm,
        },
        edge_weight: rng.random_range(1..=2),
        bsms_per_tor: if rng.random_bool(0.3) { Some(rng.random_range(1..=3)) } else { None },
    })
    .unwrap();
    let n = topo.num_qpus();
    let mut demands = Vec::new();
    let len = rng.random_range(0..=24);
    while demands.len() < len {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        if rng.random_bool(0.25) {
            // Teleport out and back so data occupancy returns to zero.
            let id = demands.len();
            demands.push(EprDemand::tp(id, a, b));
            demands.push(EprDemand::tp(id + 1, b, a));
        } else {
            demands.push(EprDemand::cat(demands.len(), a, b));
        }
    }
    let strategy = [
        Strategy::Flexible,
        Strategy::Flexible,
        Strategy::MediumConservative,
        Strategy::MostConservative,
        Strategy::BaselineJit,
    ][rng.random_range(0..5)];
    let config = SchedulerConfig {
        lookahead: rng.random_range(1..=10),
        threshold: if rng.random_bool(0.3) { Some(comm + rng.random_range(0..=2)) } else { None },
        strategy,
        distill_copies: rng.random_range(1..=3),
        split_enabled: rng.random_bool(0.8),
        reservation_enabled: rng.random_bool(0.8),
        auto_retry: true,
        audit: true,
    };
    let stochastic = rng.random_bool(0.2).then(|| StochasticParams {
        seed: rng.random(),
        ..Default::default()
    });
    Instance {
        topo,
        demands,
        config,
        latency: LatencyModel {
            stochastic,
            ..Default::default()
        },
    }
}

fn comm_order(t: &Timeline) -> Vec<(usize, f64)> {
    t.events
        .iter()
        .filter(|e| e.kind == EventKind::Comm)
        .map(|e| (e.demands[0], e.start))
        .collect()
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

/// Runs one instance twice. Capacity is audited inside the engine at every
/// scheduling pass; the rest is checked here on the timeline.
pub fn check(seed: u64) -> Result<SimOutcome, String> {
    let inst = instance(seed);
    let o = inst.run().map_err(|e| format!("seed {seed}: {e}"))?;
    let t = &o.timeline;

    // Every program demand communicates exactly once, in DAG order.
    let n = inst.demands.len();
    let order = comm_order(t);
    ensure!(order.len() == n, "seed {seed}: {} communications for {n} demands", order.len());
    let mut pos = vec![usize::MAX; n];
    let mut at = vec![f64::NAN; n];
    for (i, &(d, start)) in order.iter().enumerate() {
        ensure!(pos[d] == usize::MAX, "seed {seed}: demand {d} communicates twice");
        pos[d] = i;
        at[d] = start;
    }
    let dag = build_dag(&inst.demands);
    for v in 0..n {
        for &u in dag.preds(v).unwrap() {
            ensure!(pos[u] < pos[v] && at[u] <= at[v], "seed {seed}: {u} after {v}");
        }
    }

    // Each generated pair is consumed once, after it was generated.
    for p in &t.pairs {
        let Some(c) = p.consumed_at else {
            return Err(format!("seed {seed}: pair for work {} never consumed", p.work));
        };
        ensure!(c >= p.generated_at, "seed {seed}: pair consumed before generation");
    }

    // Generations never overlap on one channel.
    let mut by_channel = BTreeMap::<u64, Vec<(f64, f64)>>::new();
    for e in t.events.iter().filter(|e| matches!(e.kind, EventKind::Reconfig | EventKind::EprGen)) {
        by_channel.entry(e.channel.unwrap()).or_default().push((e.start, e.end()));
    }
    for ivs in by_channel.values_mut() {
        ivs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in ivs.windows(2) {
            ensure!(w[0].1 <= w[1].0 + 1e-9, "seed {seed}: overlapping generations");
        }
    }

    let r = &o.report;
    ensure!(
        r.normalized_latency >= 0.0 && r.weighted_epr >= 0.0 && r.avg_wait >= 0.0,
        "seed {seed}: negative metric"
    );

    let again = inst.run().map_err(|e| format!("seed {seed} rerun: {e}"))?;
    ensure!(again.timeline == o.timeline && again.stats == o.stats, "seed {seed}: nondeterministic");
    Ok(o)
}
