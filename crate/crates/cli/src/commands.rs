//! `run`, `compare` and `sweep`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use qdcsim::metrics::{additional_wait, epr_overhead, improvement_factor};
use qdcsim::{simulate, SchedulerConfig, SimOutcome, Strategy};

use crate::config::{ExperimentConfig, Inputs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub config_id: String,
    pub strategy: String,
    pub final_strategy: String,
    pub normalized_latency: f64,
    pub weighted_epr: f64,
    pub avg_wait: f64,
    pub makespan_ms: f64,
    pub cross_pairs: usize,
    pub in_rack_pairs: usize,
    pub distilled_pairs: usize,
    pub splits: u32,
    pub downgrades: u32,
    pub restarts: u32,
}

impl RunRow {
    fn new(config_id: &str, strategy: Strategy, o: &SimOutcome) -> Self {
        let r = &o.report;
        RunRow {
            config_id: config_id.to_string(),
            strategy: strategy.name().to_string(),
            final_strategy: o.stats.final_strategy.name().to_string(),
            normalized_latency: r.normalized_latency,
            weighted_epr: r.weighted_epr,
            avg_wait: r.avg_wait,
            makespan_ms: r.makespan_ms,
            cross_pairs: r.cross_pairs,
            in_rack_pairs: r.in_rack_pairs,
            distilled_pairs: r.distilled_pairs,
            splits: o.stats.splits,
            downgrades: o.stats.downgrades,
            restarts: o.stats.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub config_id: String,
    pub axis: String,
    pub value: String,
    pub baseline_latency: f64,
    pub ours_latency: f64,
    pub improvement_factor: f64,
    pub baseline_weighted_epr: f64,
    pub ours_weighted_epr: f64,
    pub epr_overhead: f64,
    pub baseline_avg_wait: f64,
    pub ours_avg_wait: f64,
    pub additional_wait: f64,
    pub ours_final_strategy: String,
    pub ours_splits: u32,
    pub ours_downgrades: u32,
}

fn simulate_with(inputs: &Inputs, scheduler: &SchedulerConfig) -> Result<SimOutcome> {
    Ok(simulate(
        &inputs.topology,
        &inputs.demands,
        scheduler,
        &inputs.latency,
        &inputs.fidelity,
    )?)
}

/// One simulation under the configured strategy.
pub fn run_config(cfg: &ExperimentConfig) -> Result<(RunRow, SimOutcome)> {
    let inputs = cfg.inputs()?;
    let o = simulate_with(&inputs, &inputs.scheduler)?;
    Ok((RunRow::new(&cfg.id, inputs.scheduler.strategy, &o), o))
}

/// The baseline and the flexible scheduler on one shared demand list.
pub fn compare_inputs(id: &str, inputs: &Inputs) -> Result<(CompareRow, SimOutcome, SimOutcome)> {
    let base_cfg = SchedulerConfig {
        strategy: Strategy::BaselineJit,
        ..inputs.scheduler.clone()
    };
    let ours_cfg = SchedulerConfig {
        strategy: Strategy::Flexible,
        ..inputs.scheduler.clone()
    };
    let base = simulate_with(inputs, &base_cfg).context("baseline run")?;
    let ours = simulate_with(inputs, &ours_cfg).context("flexible run")?;
    let (b, o) = (&base.report, &ours.report);
    let row = CompareRow {
        config_id: id.to_string(),
        axis: String::new(),
        value: String::new(),
        baseline_latency: b.normalized_latency,
        ours_latency: o.normalized_latency,
        improvement_factor: improvement_factor(b, o),
        baseline_weighted_epr: b.weighted_epr,
        ours_weighted_epr: o.weighted_epr,
        epr_overhead: epr_overhead(b, o),
        baseline_avg_wait: b.avg_wait,
        ours_avg_wait: o.avg_wait,
        additional_wait: additional_wait(b, o),
        ours_final_strategy: ours.stats.final_strategy.name().to_string(),
        ours_splits: ours.stats.splits,
        ours_downgrades: ours.stats.downgrades,
    };
    Ok((row, base, ours))
}

pub fn compare_config(cfg: &ExperimentConfig) -> Result<(CompareRow, SimOutcome, SimOutcome)> {
    compare_inputs(&cfg.id, &cfg.inputs()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    BufferSize,
    Lookahead,
    CommQubits,
    CrossLatency,
    InRackLatency,
    CrossFidelity,
    DistillK,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::BufferSize => "buffer_size",
            Axis::Lookahead => "lookahead",
            Axis::CommQubits => "comm_qubits",
            Axis::CrossLatency => "cross_latency",
            Axis::InRackLatency => "in_rack_latency",
            Axis::CrossFidelity => "cross_fidelity",
            Axis::DistillK => "distill_k",
        }
    }

    fn integral(self) -> bool {
        matches!(self, Axis::BufferSize | Axis::Lookahead | Axis::CommQubits | Axis::DistillK)
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "buffer_size" => Axis::BufferSize,
            "lookahead" => Axis::Lookahead,
            "comm_qubits" => Axis::CommQubits,
            "cross_latency" => Axis::CrossLatency,
            "in_rack_latency" => Axis::InRackLatency,
            "cross_fidelity" => Axis::CrossFidelity,
            "distill_k" => Axis::DistillK,
            other => bail!(
                "--axis: unknown axis `{other}` (expected buffer_size, lookahead, comm_qubits, \
                 cross_latency, in_rack_latency, cross_fidelity or distill_k)"
            ),
        })
    }
}

/// Copy of `cfg` with one axis set to `value`.
pub fn apply_axis(cfg: &ExperimentConfig, axis: Axis, value: f64) -> Result<ExperimentConfig> {
    if axis.integral() && (value.fract() != 0.0 || value < 0.0) {
        bail!("--values: axis {} takes non-negative integers, found {value}", axis.name());
    }
    let mut c = cfg.clone();
    let generated = c.topology.file.is_none();
    match axis {
        Axis::BufferSize | Axis::CommQubits if !generated => {
            bail!("--axis {}: not applicable to a topology file", axis.name())
        }
        Axis::BufferSize => c.topology.buffer_qubits = value as u32,
        Axis::CommQubits => c.topology.comm_qubits = value as u32,
        Axis::Lookahead => c.scheduler.lookahead = value as usize,
        Axis::DistillK => c.scheduler.distill_copies = value as u32,
        Axis::CrossLatency => c.model.t_cross_rack_ms = value,
        Axis::InRackLatency => c.model.t_in_rack_ms = value,
        Axis::CrossFidelity => c.model.f_cross_rack = value,
    }
    Ok(c)
}

pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("--values: `{}` is not a number", v.trim()))
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        bail!("--values: empty list");
    }
    Ok(vals)
}

/// One compare row per value, in input order.
pub fn sweep_config(cfg: &ExperimentConfig, axis: Axis, values: &[f64]) -> Result<Vec<CompareRow>> {
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| apply_axis(cfg, axis, v))
        .collect::<Result<_>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(c, v)| {
            let (mut row, _, _) =
                compare_config(c).with_context(|| format!("{} = {v}", axis.name()))?;
            row.axis = axis.name().to_string();
            row.value = v.to_string();
            Ok(row)
        })
        .collect()
}

/// Whether a latency series never rises by more than `tol` (relative)
/// step to step and ends no higher than it starts.
pub fn nonincreasing_then_flat(series: &[f64], tol: f64) -> bool {
    series.windows(2).all(|w| w[1] <= w[0] * (1.0 + tol))
        && series.last().zip(series.first()).is_none_or(|(l, f)| l <= f)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunRow> {
    let (row, o) = run_config(cfg)?;
    prepare(out)?;
    write_csv(&out.join("metrics.csv"), std::slice::from_ref(&row))?;
    fs::write(out.join("trace.txt"), o.timeline.trace_text())?;
    Ok(row)
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareRow> {
    let (row, base, ours) = compare_config(cfg)?;
    prepare(out)?;
    write_csv(&out.join("metrics.csv"), std::slice::from_ref(&row))?;
    fs::write(out.join("trace.txt"), ours.timeline.trace_text())?;
    fs::write(out.join("trace_baseline.txt"), base.timeline.trace_text())?;
    Ok(row)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[f64], out: &Path) -> Result<Vec<CompareRow>> {
    let rows = sweep_config(cfg, axis, values)?;
    prepare(out)?;
    write_csv(&out.join("metrics.csv"), &rows)?;
    Ok(rows)
}
