//! Scheduling strategies.
//!
//! - `Flexible`: two rounds per tick over the look-ahead subgraph. Round 1
//!   schedules front demands whose conditions hold, collecting in-rack
//!   pairs into batches; round 2 splits blocked cross-rack demands.
//! - `MediumConservative`: any pending demand, each on its own channel.
//! - `MostConservative`: one demand at a time in program order.
//! - `BaselineJit`: a demand starts only once every earlier demand sharing
//!   a QPU has communicated; one reconfiguration per generation.

use std::collections::BTreeSet;

use crate::engine::{Ctx, EngineState, WorkStatus};
use crate::error::{config, Result};
use crate::resources::{
    check_basic_conditions, check_modified_conditions, check_split_conditions, Decision,
    SplitPlan,
};
use crate::topology::{NetworkTopology, QpuId};
use crate::workload::{EprDemand, Origin, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Flexible,
    MediumConservative,
    MostConservative,
    BaselineJit,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Flexible => "flexible",
            Strategy::MediumConservative => "medium",
            Strategy::MostConservative => "most",
            Strategy::BaselineJit => "baseline_jit",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::error::QdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flexible" => Ok(Strategy::Flexible),
            "medium" | "medium_conservative" => Ok(Strategy::MediumConservative),
            "most" | "most_conservative" => Ok(Strategy::MostConservative),
            "baseline_jit" | "baseline" => Ok(Strategy::BaselineJit),
            other => config(format!("unknown strategy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerConfig {
    /// Look-ahead depth `l` in DAG layers.
    pub lookahead: usize,
    /// Buffer threshold; `None` means the largest per-QPU communication
    /// qubit count.
    pub threshold: Option<u32>,
    pub strategy: Strategy,
    /// In-rack copies per split (1 disables distillation).
    pub distill_copies: u32,
    pub split_enabled: bool,
    /// Guard splits with buffer reservations.
    pub reservation_enabled: bool,
    /// Roll back and downgrade on a stall instead of failing.
    pub auto_retry: bool,
    /// Re-check capacity invariants after every scheduling pass.
    pub audit: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            lookahead: 10,
            threshold: None,
            strategy: Strategy::Flexible,
            distill_copies: 2,
            split_enabled: true,
            reservation_enabled: true,
            auto_retry: true,
            audit: false,
        }
    }
}

impl SchedulerConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        SchedulerConfig {
            strategy,
            ..Default::default()
        }
    }

    /// Checks the config and returns the effective threshold.
    pub fn validate(&self, topo: &NetworkTopology) -> Result<u32> {
        if self.lookahead < 1 {
            return config("scheduler.lookahead must be at least 1");
        }
        if self.distill_copies < 1 {
            return config("scheduler.distill_copies must be at least 1");
        }
        let max_comm = topo.qpus().map(|q| topo.qpu_spec(q).comm_qubits).max().unwrap_or(0);
        match self.threshold {
            None => Ok(max_comm),
            Some(t) if t < max_comm => config(format!(
                "scheduler.threshold {t} is below the communication qubit count {max_comm}"
            )),
            Some(t) => Ok(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleAction {
    /// Single generation with its own reconfiguration.
    Start { work: usize, channel: u64 },
    OpenBatch { work: usize, channel: u64 },
    Append { work: usize, channel: u64 },
    Split { parent: usize, busy: QpuId, proxy: QpuId },
}

#[derive(Debug, Clone, Default)]
pub struct TickResult {
    pub actions: Vec<ScheduleAction>,
    /// State captured just before the first split of this tick.
    pub snapshot: Option<EngineState>,
    pub splits: u32,
}

/// Demands replacing `parent` after a split: the cross-rack pair through
/// the proxy, the in-rack pair, and `k - 1` distillation copies. Ids start
/// at `first_id`.
pub fn post_split_members(parent: &EprDemand, plan: &SplitPlan, first_id: usize) -> Vec<EprDemand> {
    let via_proxy = |q: QpuId| if q == plan.busy { plan.proxy } else { q };
    let mut out = vec![
        EprDemand {
            id: first_id,
            qpu_a: via_proxy(parent.qpu_a),
            qpu_b: via_proxy(parent.qpu_b),
            protocol: Protocol::Cat,
            origin: Origin::PostSplitCross(parent.id),
        },
        EprDemand {
            id: first_id + 1,
            qpu_a: plan.busy,
            qpu_b: plan.proxy,
            protocol: Protocol::Cat,
            origin: Origin::PostSplitInRack(parent.id),
        },
    ];
    insert_distillation(&mut out, plan.k);
    out
}

/// Adds `k - 1` copies of the in-rack member (the last entry).
pub fn insert_distillation(members: &mut Vec<EprDemand>, k: u32) {
    let Some(&base) = members.last() else { return };
    let parent = base.origin.parent().unwrap_or(base.id);
    for i in 1..k as usize {
        members.push(EprDemand {
            id: base.id + i,
            origin: Origin::DistillCopy(parent),
            ..base
        });
    }
}

/// Open batch on the same QPU pair as an in-rack demand.
pub fn try_collect(ctx: &Ctx, st: &EngineState, w: usize) -> Option<u64> {
    let d = &st.work[w].demand;
    if ctx.topo.rack_of(d.qpu_a) != ctx.topo.rack_of(d.qpu_b) {
        return None;
    }
    st.open_batch_for(d.qpu_a, d.qpu_b)
}

/// Demands generatable under the medium rule: a pending demand is
/// generatable when every earlier pending demand sharing a QPU is.
pub fn medium_conservative_front(
    demands: &[EprDemand],
    completed: &BTreeSet<usize>,
    in_flight: &BTreeSet<usize>,
) -> BTreeSet<usize> {
    let pending = |i: usize| !completed.contains(&i) && !in_flight.contains(&i);
    let mut gen = BTreeSet::new();
    for (i, d) in demands.iter().enumerate() {
        if !pending(i) {
            continue;
        }
        let ok = demands[..i]
            .iter()
            .enumerate()
            .filter(|(j, e)| pending(*j) && e.overlaps(d))
            .all(|(j, _)| gen.contains(&j));
        if ok {
            gen.insert(i);
        }
    }
    gen
}

/// Lowest-id incomplete demand.
pub fn most_conservative_next(demands: &[EprDemand], completed: &BTreeSet<usize>) -> Option<usize> {
    (0..demands.len()).find(|i| !completed.contains(i))
}

/// Runs one scheduling tick under `strategy`.
pub fn schedule_tick(ctx: &Ctx, st: &mut EngineState, strategy: Strategy) -> Result<TickResult> {
    match strategy {
        Strategy::Flexible => flexible_tick(ctx, st),
        Strategy::MediumConservative => medium_tick(ctx, st),
        Strategy::MostConservative => most_tick(ctx, st),
        Strategy::BaselineJit => baseline_tick(ctx, st),
    }
}

fn flexible_tick(ctx: &Ctx, st: &mut EngineState) -> Result<TickResult> {
    let mut out = TickResult::default();
    let cfg = &ctx.config;
    let sub = st.dag.lookahead_subgraph(cfg.lookahead);
    let layer0: BTreeSet<usize> = sub.iter().filter(|x| x.1 == 0).map(|x| x.0).collect();

    let mut remaining: Vec<usize> = sub.iter().map(|x| x.0).collect();
    loop {
        let mut progress = false;
        let mut keep = Vec::with_capacity(remaining.len());
        for w in remaining {
            if !st.dag.is_front(w) {
                keep.push(w);
                continue;
            }
            match schedule_one(ctx, st, w, layer0.contains(&w))? {
                Some(a) => {
                    st.dag.remove_scheduled(w)?;
                    out.actions.push(a);
                    progress = true;
                }
                None => keep.push(w),
            }
        }
        remaining = keep;
        if !progress {
            break;
        }
    }

    if cfg.split_enabled {
        for w in remaining {
            let d = st.work[w].demand;
            if d.origin != Origin::Program
                || st.work[w].status != WorkStatus::Pending
                || ctx.topo.rack_of(d.qpu_a) == ctx.topo.rack_of(d.qpu_b)
            {
                continue;
            }
            let plan = check_split_conditions(&st.view(ctx.topo), w, d.qpu_a, d.qpu_b, cfg.distill_copies);
            if let Some(plan) = plan {
                if out.snapshot.is_none() {
                    out.snapshot = Some(st.clone());
                }
                out.actions.push(ScheduleAction::Split {
                    parent: w,
                    busy: plan.busy,
                    proxy: plan.proxy,
                });
                st.apply_split(ctx, plan)?;
                out.splits += 1;
            }
        }
    }
    Ok(out)
}

/// Round-1 decision for one front demand.
fn schedule_one(ctx: &Ctx, st: &mut EngineState, w: usize, in_front: bool) -> Result<Option<ScheduleAction>> {
    let d = st.work[w].demand;
    let in_rack = ctx.topo.rack_of(d.qpu_a) == ctx.topo.rack_of(d.qpu_b);
    let open = try_collect(ctx, st, w);
    let (a, b) = st.endpoints(w);
    let view = st.view(ctx.topo);
    let decision = if ctx.config.split_enabled {
        check_modified_conditions(&view, &a, &b, ctx.threshold, in_front, open)
    } else {
        check_basic_conditions(&view, &a, &b, ctx.threshold, in_front, open)
    };
    Ok(match decision {
        Decision::Blocked(_) => None,
        Decision::Combinable(channel) => {
            st.append_to_batch(ctx, channel, w)?;
            Some(ScheduleAction::Append { work: w, channel })
        }
        Decision::Schedulable if in_rack => {
            let channel = st.open_batch(ctx, w)?;
            Some(ScheduleAction::OpenBatch { work: w, channel })
        }
        Decision::Schedulable => {
            let channel = st.start_single(ctx, w)?;
            Some(ScheduleAction::Start { work: w, channel })
        }
    })
}

/// Starts `w` on its own channel if the basic conditions hold.
fn start_if_possible(ctx: &Ctx, st: &mut EngineState, w: usize, in_front: bool) -> Result<Option<ScheduleAction>> {
    let (a, b) = st.endpoints(w);
    let decision = check_basic_conditions(&st.view(ctx.topo), &a, &b, ctx.threshold, in_front, None);
    if decision != Decision::Schedulable {
        return Ok(None);
    }
    let channel = st.start_single(ctx, w)?;
    st.dag.remove_forced(w)?;
    Ok(Some(ScheduleAction::Start { work: w, channel }))
}

/// Pending work in program order, split members at their parent's place.
fn pending_in_program_order(ctx: &Ctx, st: &EngineState) -> Vec<usize> {
    let mut out = Vec::new();
    for p in 0..ctx.program_len {
        match st.work[p].status {
            WorkStatus::Pending => out.push(p),
            WorkStatus::Superseded => out.extend(st.pending_members(p)),
            _ => {}
        }
    }
    out
}

fn medium_tick(ctx: &Ctx, st: &mut EngineState) -> Result<TickResult> {
    let mut out = TickResult::default();
    for w in pending_in_program_order(ctx, st) {
        let in_front = st.dag.is_front(w);
        if let Some(a) = start_if_possible(ctx, st, w, in_front)? {
            out.actions.push(a);
        }
    }
    Ok(out)
}

fn most_tick(ctx: &Ctx, st: &mut EngineState) -> Result<TickResult> {
    let mut out = TickResult::default();
    if st.in_flight() > 0 {
        return Ok(out);
    }
    let Some(p) = (0..ctx.program_len).find(|&p| !st.is_consumed(p)) else {
        return Ok(out);
    };
    let next = match st.work[p].status {
        WorkStatus::Pending => Some(p),
        WorkStatus::Superseded => st.pending_members(p).first().copied(),
        _ => None,
    };
    if let Some(w) = next {
        if let Some(a) = start_if_possible(ctx, st, w, true)? {
            out.actions.push(a);
        }
    }
    Ok(out)
}

fn baseline_tick(ctx: &Ctx, st: &mut EngineState) -> Result<TickResult> {
    let mut out = TickResult::default();
    for p in 0..ctx.program_len {
        if st.work[p].status != WorkStatus::Pending
            || !ctx.comm_preds[p].iter().all(|&u| st.is_consumed(u))
        {
            continue;
        }
        if let Some(a) = start_if_possible(ctx, st, p, true)? {
            out.actions.push(a);
        }
    }
    Ok(out)
}
