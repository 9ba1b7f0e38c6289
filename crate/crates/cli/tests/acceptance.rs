//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test --test acceptance`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use qdcsim::engine::{detect_stall, Engine, Progress};
use qdcsim::{
    build_topology, distill_werner, epr_mean_latency, pair_weight, simulate, EprDemand, EventKind, FidelityModel,
    LatencyModel, PairCategory, QpuSpec, SchedulerConfig, SimOutcome, Strategy, TopologyKind, TopologyParams,
};
use qdcsim_cli::commands::{compare_inputs, nonincreasing_then_flat, sweep_config};
use qdcsim_cli::{Axis, ExperimentConfig, Inputs};

// Tolerances.
const FIG6_TOL_MS: f64 = 1e-9;
const FIG6_MAX_RUNTIME: Duration = Duration::from_secs(1);
const RATE_REL_TOL: f64 = 1e-12;
const DISTILL_FIDELITY: (f64, f64) = (0.9645, 0.9655);
const DISTILL_SUCCESS: (f64, f64) = (0.935, 0.937);
const ORACLE_TOL: f64 = 1e-12;
const WEIGHT_TOL: f64 = 0.005;
const FUZZ_INSTANCES: u64 = 1000;
const FUZZ_MAX_RUNTIME: Duration = Duration::from_secs(300);
const MAX_EPR_OVERHEAD: f64 = 0.30;
const LOOKAHEAD_STEP_TOL: f64 = 0.01;
const BATCH_TOL_MS: f64 = 1e-9;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Result<ExperimentConfig, String> {
    ExperimentConfig::load(&configs().join(name)).map_err(|e| format!("{name}: {e:#}"))
}

fn inputs(cfg: &ExperimentConfig) -> Result<Inputs, String> {
    cfg.inputs().map_err(|e| format!("{}: {e:#}", cfg.id))
}

fn run(i: &Inputs, s: &SchedulerConfig) -> Result<SimOutcome, String> {
    simulate(&i.topology, &i.demands, s, &i.latency, &i.fidelity).map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn fig6() -> Verdict {
    let clock = Instant::now();
    let i = inputs(&load("fig6_motivating.toml")?)?;
    let with = |strategy, split_enabled| SchedulerConfig {
        strategy,
        split_enabled,
        ..i.scheduler.clone()
    };
    let base = run(&i, &with(Strategy::BaselineJit, false))?;
    let coll = run(&i, &with(Strategy::Flexible, false))?;
    let ours = run(&i, &with(Strategy::Flexible, true))?;
    let elapsed = clock.elapsed();

    let (b, c, o) = (base.timeline.makespan(), coll.timeline.makespan(), ours.timeline.makespan());
    ensure!(close(b, 25.3, FIG6_TOL_MS), "baseline {b} ms");
    ensure!(close(c, 23.3, FIG6_TOL_MS), "collection-only {c} ms");
    ensure!(close(o, 12.4, FIG6_TOL_MS), "flexible {o} ms");

    // In-rack segment: the (B1,B2) channel, first reconfiguration to last
    // generation.
    let seg: Vec<_> = coll
        .timeline
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Reconfig | EventKind::EprGen))
        .filter(|e| e.qpus.iter().map(|q| q.0).collect::<Vec<_>>() == [2, 3])
        .collect();
    let start = seg.iter().map(|e| e.start).fold(f64::INFINITY, f64::min);
    let end = seg.iter().map(|e| e.end()).fold(0.0, f64::max);
    ensure!(close(end - start, 1.3, FIG6_TOL_MS), "in-rack segment {} ms", end - start);
    ensure!(elapsed < FIG6_MAX_RUNTIME, "took {elapsed:?}");
    Ok(format!("25.3 / 23.3 (segment 1.3) / 12.4 ms in {elapsed:.2?}"))
}

fn rate_formula() -> Verdict {
    let t_in = epr_mean_latency(0.05, 0.1, 1e-3).map_err(|e| e.to_string())?;
    let t_cross = epr_mean_latency(0.05, 0.1 / 100.0, 1e-3).map_err(|e| e.to_string())?;
    ensure!(close(t_in, 0.1, RATE_REL_TOL * 0.1), "in-rack {t_in} ms");
    ensure!(close(t_cross, 10.0, RATE_REL_TOL * 10.0), "lossy {t_cross} ms");
    Ok(format!("{t_in:.12} ms and {t_cross:.10} ms"))
}

fn distillation() -> Verdict {
    let (f, p) = distill_werner(0.95, 2).map_err(|e| e.to_string())?;
    ensure!((DISTILL_FIDELITY.0..=DISTILL_FIDELITY.1).contains(&f), "fidelity {f}");
    ensure!((DISTILL_SUCCESS.0..=DISTILL_SUCCESS.1).contains(&p), "success {p}");
    let mut worst: f64 = 0.0;
    for k in 2..=4 {
        for f0 in [0.6, 0.75, 0.85, 0.95, 0.99] {
            let (fo, po) = support::density::oracle(f0, k);
            let (fc, pc) = distill_werner(f0, k).map_err(|e| e.to_string())?;
            worst = worst.max((fo - fc).abs()).max((po - pc).abs());
        }
    }
    ensure!(worst <= ORACLE_TOL, "density-matrix oracle differs by {worst:e}");
    Ok(format!("F = {f:.5}, P = {p:.5}; oracle k = 2..4 within {worst:.1e}"))
}

fn weights() -> Verdict {
    let m = FidelityModel::default();
    let w = [PairCategory::Cross, PairCategory::InRack, PairCategory::Distilled].map(|c| pair_weight(c, &m, 2));
    ensure!(w[0] == 1.0, "cross {}", w[0]);
    ensure!(close(w[1], 0.333, WEIGHT_TOL), "in-rack {}", w[1]);
    ensure!(close(w[2], 0.233, WEIGHT_TOL), "distilled {}", w[2]);
    Ok(format!("{:.3} / {:.3} / {:.3}", w[0], w[1], w[2]))
}

fn stalls() -> Verdict {
    let i = inputs(&load("fig7b_deadlock.toml")?)?;
    let off = SchedulerConfig {
        reservation_enabled: false,
        auto_retry: false,
        ..i.scheduler.clone()
    };
    let mut e = Engine::new(&i.topology, &i.demands, &off, &i.latency, &i.fidelity).map_err(|e| e.to_string())?;
    e.settle_instant().map_err(|e| e.to_string())?;
    let mut progress = Progress::Running;
    while progress == Progress::Running {
        progress = e.advance().map_err(|e| e.to_string())?;
    }
    ensure!(progress == Progress::Stalled && detect_stall(&e.state), "no stall without reservation");
    let on = SchedulerConfig {
        reservation_enabled: true,
        ..off
    };
    let done = run(&i, &on)?;
    ensure!(done.stats.stalls == 0, "stalled with reservation");

    let c = inputs(&load("fig7c_congestion.toml")?)?;
    ensure!(c.scheduler.auto_retry, "congestion config must retry");
    let o = run(&c, &c.scheduler)?;
    ensure!(o.stats.downgrades == 1, "{} downgrades", o.stats.downgrades);
    let comms = o.timeline.events.iter().filter(|e| e.kind == EventKind::Comm).count();
    ensure!(comms == c.demands.len(), "{comms} of {} communications", c.demands.len());
    Ok(format!(
        "double split stalls, completes with reservation ({:.1}); congestion: 1 downgrade to {}",
        done.report.normalized_latency,
        o.stats.final_strategy.name()
    ))
}

fn fuzz() -> Verdict {
    let clock = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..FUZZ_INSTANCES {
        if let Err(e) = support::fuzz::check(seed) {
            failures.push(e);
        }
    }
    let elapsed = clock.elapsed();
    ensure!(failures.is_empty(), "{} violations, first: {}", failures.len(), failures[0]);
    ensure!(elapsed < FUZZ_MAX_RUNTIME, "took {elapsed:?}");
    Ok(format!("{FUZZ_INSTANCES} instances, 0 violations, {elapsed:.1?}"))
}

fn directional() -> Verdict {
    let mut lines = Vec::new();
    for name in ["qft", "grover", "rca"] {
        let cfg = load(&format!("{name}_desk.toml"))?;
        let i = inputs(&cfg)?;
        ensure!(!i.demands.is_empty(), "{name}: no remote gates");
        let (row, _, _) = compare_inputs(&cfg.id, &i).map_err(|e| format!("{e:#}"))?;
        ensure!(row.improvement_factor > 1.0, "{name}: factor {}", row.improvement_factor);
        ensure!(
            (0.0..MAX_EPR_OVERHEAD).contains(&row.epr_overhead),
            "{name}: EPR overhead {}",
            row.epr_overhead
        );
        let values: Vec<f64> = (1..=10).map(f64::from).collect();
        let rows = sweep_config(&cfg, Axis::Lookahead, &values).map_err(|e| format!("{e:#}"))?;
        let series: Vec<f64> = rows.iter().map(|r| r.ours_latency).collect();
        ensure!(
            nonincreasing_then_flat(&series, LOOKAHEAD_STEP_TOL),
            "{name}: lookahead series {series:?}"
        );
        lines.push(format!(
            "{name} {:.2}x +{:.1}% EPR",
            row.improvement_factor,
            100.0 * row.epr_overhead
        ));
    }
    Ok(lines.join(", ") + "; lookahead trends hold")
}

fn batch_law() -> Verdict {
    let topo = build_topology(TopologyParams {
        kind: TopologyKind::Clos,
        num_racks: 1,
        qpus_per_rack: 2,
        qpu_spec: QpuSpec {
            data_qubits: 8,
            buffer_qubits: 10,
            comm_qubits: 2,
        },
        edge_weight: 1,
        bsms_per_tor: None,
    })
    .map_err(|e| e.to_string())?;
    let lat = LatencyModel::default();
    for b in 1..=8 {
        let demands: Vec<EprDemand> = (0..b).map(|i| EprDemand::cat(i, 0, 1)).collect();
        let o = simulate(&topo, &demands, &SchedulerConfig::default(), &lat, &FidelityModel::default())
            .map_err(|e| e.to_string())?;
        let iv = o.timeline.channel_intervals();
        ensure!(iv.len() == 1, "b = {b}: {} channels", iv.len());
        let (s, e) = iv.values().next().copied().unwrap();
        let want = lat.t_reconfig_ms + b as f64 * lat.t_in_rack_ms;
        ensure!(close(e - s, want, BATCH_TOL_MS), "b = {b}: {} ms, want {want}", e - s);
    }
    Ok("span = t_reconfig + b * t_in_rack for b = 1..8".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("motivating example", fig6),
        ("rate formula", rate_formula),
        ("distillation", distillation),
        ("metric weights", weights),
        ("deadlock and congestion", stalls),
        ("invariant fuzz", fuzz),
        ("directional results", directional),
        ("batch law", batch_law),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {why}", n + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
