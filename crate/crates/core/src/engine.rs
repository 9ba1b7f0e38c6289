//! Event-driven simulation core.
//!
//! Time is continuous (milliseconds). All events sharing a timestamp are
//! applied first, ready communications are executed in program order, and
//! then the scheduler runs once. Idle in-rack batches are closed after the
//! scheduler has had a chance to extend them; closing frees resources, so
//! the scheduler runs again.
//!
//! When nothing is in flight but work remains, the run has stalled. The
//! engine then rolls back to the most recent pre-split snapshot (or to
//! time zero) and continues under a more conservative strategy.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::dag::{build_dag, DemandDag};
use crate::error::{invariant, QdcError, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::models::{distill_step, FidelityModel, LatencyModel};
use crate::resources::{
    reserve_split, Endpoint, HoldKey, QpuState, ResourceView, Role, SplitPlan,
};
use crate::scheduler::{post_split_members, schedule_tick, SchedulerConfig, Strategy};
use crate::topology::{
    find_available_path, NetworkTopology, NodeId, Occupancy, PathReservation, QpuId, RackId,
};
use crate::workload::{validate_demands, EprDemand, Origin, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Reconfig,
    EprGen,
    Swap,
    Distill,
    Comm,
    BufferRelease,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Reconfig => "Reconfig",
            EventKind::EprGen => "EprGen",
            EventKind::Swap => "Swap",
            EventKind::Distill => "Distill",
            EventKind::Comm => "Comm",
            EventKind::BufferRelease => "BufferRelease",
        };
        f.write_str(s)
    }
}

/// One line of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub id: usize,
    pub kind: EventKind,
    pub start: f64,
    pub duration: f64,
    pub demands: Vec<usize>,
    pub qpus: Vec<QpuId>,
    pub path: Vec<NodeId>,
    /// Channel (job or batch) the event belongs to.
    pub channel: Option<u64>,
    /// Rack whose BSM pool the channel draws from.
    pub bsm_rack: Option<RackId>,
}

impl SimEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// `event_id kind start_ms duration_ms demand_ids qpu_ids path`
    pub fn trace_line(&self) -> String {
        fn join<T: fmt::Display>(xs: &[T], sep: &str) -> String {
            if xs.is_empty() {
                "-".to_string()
            } else {
                xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
            }
        }
        format!(
            "{} {} {} {} {} {} {}",
            self.id,
            self.kind,
            self.start,
            self.duration,
            join(&self.demands, ","),
            join(&self.qpus, ","),
            join(&self.path, "-")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairCategory {
    Cross,
    InRack,
    Distilled,
}

/// A physically generated EPR pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub work: usize,
    pub category: PairCategory,
    pub qpus: (QpuId, QpuId),
    pub generated_at: f64,
    pub consumed_at: Option<f64>,
    pub fidelity: f64,
}

/// A demand the engine tracked, with its scheduling time.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkRecord {
    pub demand: EprDemand,
    pub scheduled_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub events: Vec<SimEvent>,
    pub pairs: Vec<PairRecord>,
    pub work: Vec<WorkRecord>,
    pub t_reconfig_ms: f64,
}

impl Timeline {
    pub fn makespan(&self) -> f64 {
        self.events.iter().map(|e| e.end()).fold(0.0, f64::max)
    }

    pub fn trace_text(&self) -> String {
        let mut s = String::from("# event_id kind start_ms duration_ms demand_ids qpu_ids path\n");
        for e in &self.events {
            s.push_str(&e.trace_line());
            s.push('\n');
        }
        s
    }

    /// `(first start, last end)` of every channel.
    pub fn channel_intervals(&self) -> BTreeMap<u64, (f64, f64)> {
        let mut out: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for e in &self.events {
            if let Some(ch) = e.channel {
                let iv = out.entry(ch).or_insert((e.start, e.end()));
                iv.0 = iv.0.min(e.start);
                iv.1 = iv.1.max(e.end());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub downgrades: u32,
    pub stalls: u32,
    pub restarts: u32,
    pub splits: u32,
    pub final_strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub timeline: Timeline,
    pub report: MetricsReport,
    pub stats: RunStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkStatus {
    Pending,
    Scheduled,
    Generated,
    Consumed,
    /// Split program demand, replaced by its post-split members.
    Superseded,
}

/// One end of a work item's pair: role, buffer key and whether it takes a
/// fresh slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct End {
    pub qpu: QpuId,
    pub role: Role,
    pub key: HoldKey,
    pub allocates: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkItem {
    pub demand: EprDemand,
    pub status: WorkStatus,
    /// Fixed at scheduling time.
    pub ends: Option<[End; 2]>,
    pub scheduled_at: Option<f64>,
    pub pair: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Accumulator {
    work: usize,
    pair: usize,
    fidelity: f64,
    distilled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SplitGroup {
    pub plan: SplitPlan,
    pub cross: usize,
    pub members: Vec<usize>,
    pub succs: Vec<usize>,
    pub unscheduled: usize,
    pub scheduled_in_rack: usize,
    pub reserved_active: bool,
    /// Reservation still held per QPU. A half that permanently takes a
    /// slot converts one unit of it into the hold itself.
    pub outstanding: BTreeMap<QpuId, u32>,
    slot2_held: bool,
    cross_done: bool,
    acc: Option<Accumulator>,
    arrivals_pending: usize,
    swapped: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum ChannelKind {
    Single(usize),
    Batch {
        queue: VecDeque<usize>,
        current: Option<usize>,
        reconfigured: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Channel {
    path: PathReservation,
    rack: RackId,
    ends: (QpuId, QpuId),
    cross: bool,
    kind: ChannelKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EvKey {
    time: f64,
    seq: u64,
}

impl Eq for EvKey {}

impl Ord for EvKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for EvKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pending {
    ReconfigDone(u64),
    GenDone(u64, usize),
}

/// Immutable inputs of one run.
#[derive(Debug, Clone)]
pub struct Ctx<'a> {
    pub topo: &'a NetworkTopology,
    pub latency: LatencyModel,
    pub fidelity: FidelityModel,
    pub config: SchedulerConfig,
    pub threshold: u32,
    /// Overlap-DAG predecessors of each program demand; communications
    /// respect this order.
    pub comm_preds: Vec<Vec<usize>>,
    pub program_len: usize,
}

/// Complete mutable state of a run. Cloning it is a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub now: f64,
    pub work: Vec<WorkItem>,
    pub dag: DemandDag,
    pub qpus: Vec<QpuState>,
    pub bsm_used: Vec<u32>,
    pub occupancy: Occupancy,
    channels: BTreeMap<u64, Channel>,
    open_batches: BTreeMap<(QpuId, QpuId), u64>,
    pub(crate) groups: BTreeMap<usize, SplitGroup>,
    queue: BTreeMap<EvKey, Pending>,
    ready: BTreeSet<usize>,
    consumed: Vec<bool>,
    remaining: usize,
    pub trace: Vec<SimEvent>,
    pub pairs: Vec<PairRecord>,
    next_seq: u64,
    next_channel: u64,
    rng: ChaCha8Rng,
}

fn protocol_role(d: &EprDemand, q: QpuId) -> Role {
    match d.protocol {
        Protocol::Cat => Role::Cat,
        Protocol::Tp { source, .. } if source == q => Role::TpSource,
        Protocol::Tp { .. } => Role::TpDest,
    }
}

impl EngineState {
    pub fn new(ctx: &Ctx, demands: &[EprDemand], seed: u64) -> Self {
        let work = demands
            .iter()
            .map(|d| WorkItem {
                demand: *d,
                status: WorkStatus::Pending,
                ends: None,
                scheduled_at: None,
                pair: None,
            })
            .collect();
        EngineState {
            now: 0.0,
            work,
            dag: build_dag(demands),
            qpus: ctx.topo.qpus().map(|q| QpuState::new(ctx.topo.qpu_spec(q))).collect(),
            bsm_used: vec![0; ctx.topo.racks().len()],
            occupancy: Occupancy::new(ctx.topo),
            channels: BTreeMap::new(),
            open_batches: BTreeMap::new(),
            groups: BTreeMap::new(),
            queue: BTreeMap::new(),
            ready: BTreeSet::new(),
            consumed: vec![false; demands.len()],
            remaining: demands.len(),
            trace: Vec::new(),
            pairs: Vec::new(),
            next_seq: 0,
            next_channel: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn view<'s>(&'s self, topo: &'s NetworkTopology) -> ResourceView<'s> {
        ResourceView {
            topo,
            qpus: &self.qpus,
            bsm_used: &self.bsm_used,
            occupancy: &self.occupancy,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.channels.len()
    }

    pub fn is_done(&self) -> bool {
        self.remaining == 0
    }

    pub fn is_consumed(&self, program_id: usize) -> bool {
        self.consumed[program_id]
    }

    pub fn is_split(&self, program_id: usize) -> bool {
        self.groups.contains_key(&program_id)
    }

    /// Pending in-rack members of a split, in id order.
    pub fn pending_members(&self, program_id: usize) -> Vec<usize> {
        self.groups
            .get(&program_id)
            .map(|g| {
                g.members
                    .iter()
                    .copied()
                    .filter(|&m| self.work[m].status == WorkStatus::Pending)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn open_batch_for(&self, a: QpuId, b: QpuId) -> Option<u64> {
        self.open_batches.get(&(a.min(b), a.max(b))).copied()
    }

    fn push_event(&mut self, time: f64, p: Pending) {
        let key = EvKey {
            time,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.queue.insert(key, p);
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        kind: EventKind,
        start: f64,
        duration: f64,
        demands: Vec<usize>,
        qpus: Vec<QpuId>,
        path: Vec<NodeId>,
        channel: Option<u64>,
        bsm_rack: Option<RackId>,
    ) {
        let id = self.trace.len();
        self.trace.push(SimEvent {
            id,
            kind,
            start,
            duration,
            demands,
            qpus,
            path,
            channel,
            bsm_rack,
        });
    }

    fn group_of(&self, w: usize) -> Option<usize> {
        match self.work[w].demand.origin {
            Origin::Program => None,
            o => o.parent(),
        }
    }

    /// Endpoints of a pending work item as the conditions see them.
    pub fn endpoints(&self, w: usize) -> (Endpoint, Endpoint) {
        let d = &self.work[w].demand;
        match d.origin {
            Origin::Program => (
                Endpoint::new(d.qpu_a, protocol_role(d, d.qpu_a)),
                Endpoint::new(d.qpu_b, protocol_role(d, d.qpu_b)),
            ),
            Origin::PostSplitCross(p) => {
                let parent = &self.work[p].demand;
                let mk = |q: QpuId| {
                    if q == self.groups[&p].plan.far {
                        Endpoint::new(q, protocol_role(parent, q))
                    } else {
                        Endpoint::new(q, Role::Transient)
                    }
                };
                (mk(d.qpu_a), mk(d.qpu_b))
            }
            Origin::PostSplitInRack(p) | Origin::DistillCopy(p) => {
                let g = &self.groups[&p];
                let parent = &self.work[p].demand;
                let first = g.scheduled_in_rack == 0;
                let allocates = first || (g.scheduled_in_rack == 1 && g.plan.k >= 2);
                let mk = |q: QpuId| {
                    let role = if first && q == g.plan.busy {
                        protocol_role(parent, q)
                    } else {
                        Role::Transient
                    };
                    Endpoint {
                        qpu: q,
                        role,
                        allocates,
                        own_reservation: g.outstanding.get(&q).copied().unwrap_or(0),
                    }
                };
                (mk(d.qpu_a), mk(d.qpu_b))
            }
        }
    }

    /// Marks a work item scheduled and allocates its buffer slots.
    fn mark_scheduled(&mut self, w: usize) -> Result<()> {
        if self.work[w].status != WorkStatus::Pending {
            return invariant(format!("work {w} scheduled twice"));
        }
        let d = self.work[w].demand;
        let ends = match d.origin {
            Origin::Program => [d.qpu_a, d.qpu_b].map(|q| End {
                qpu: q,
                role: protocol_role(&d, q),
                key: (w, 0),
                allocates: true,
            }),
            Origin::PostSplitCross(_) => {
                let (ea, eb) = self.endpoints(w);
                [ea, eb].map(|e| End {
                    qpu: e.qpu,
                    role: e.role,
                    key: (w, 0),
                    allocates: true,
                })
            }
            Origin::PostSplitInRack(p) | Origin::DistillCopy(p) => {
                let (ea, eb) = self.endpoints(w);
                let g = self.groups.get_mut(&p).expect("group exists");
                let slot = if g.scheduled_in_rack == 0 { 1 } else { 2 };
                if ea.allocates && slot == 2 {
                    g.slot2_held = true;
                }
                g.scheduled_in_rack += 1;
                g.unscheduled = g.unscheduled.saturating_sub(1);
                [ea, eb].map(|e| End {
                    qpu: e.qpu,
                    role: e.role,
                    key: (p, slot),
                    allocates: e.allocates,
                })
            }
        };
        for e in &ends {
            if e.allocates {
                self.qpus[e.qpu.0].hold(e.key, e.role)?;
            }
        }
        let item = &mut self.work[w];
        item.status = WorkStatus::Scheduled;
        item.ends = Some(ends);
        item.scheduled_at = Some(self.now);
        if let Some(p) = self.group_of(w) {
            let g = self.groups.get_mut(&p).expect("group exists");
            if !g.reserved_active {
                return Ok(());
            }
            for e in ends.iter().filter(|e| e.allocates && e.role.release() == 0) {
                if let Some(m) = g.outstanding.get_mut(&e.qpu).filter(|m| **m > 0) {
                    *m -= 1;
                    self.qpus[e.qpu.0].unreserve(1)?;
                }
            }
            if g.unscheduled == 0 {
                g.reserved_active = false;
                for (q, m) in std::mem::take(&mut g.outstanding) {
                    self.qpus[q.0].unreserve(m)?;
                }
            }
        }
        Ok(())
    }

    fn sample_generation(&mut self, ctx: &Ctx, cross: bool) -> f64 {
        match &ctx.latency.stochastic {
            None => ctx.latency.generation_ms(cross),
            Some(s) => {
                let p = s.success_probability(cross);
                let failures = Geometric::new(p)
                    .expect("validated probability")
                    .sample(&mut self.rng);
                (failures as f64 + 1.0) * s.tau0_ms
            }
        }
    }

    fn acquire_channel(&mut self, ctx: &Ctx, w: usize) -> Result<(u64, Channel)> {
        let d = self.work[w].demand;
        let (a, b) = (d.qpu_a, d.qpu_b);
        let ch = self.next_channel;
        let Some(path) = find_available_path(ctx.topo, &self.occupancy, a, b, ch) else {
            return invariant(format!("work {w} scheduled without a free path"));
        };
        let Some(rack) = self.view(ctx.topo).bsm_pool_for(a, b) else {
            return invariant(format!("work {w} scheduled without a free BSM"));
        };
        self.next_channel += 1;
        self.occupancy.occupy(ctx.topo, &path)?;
        self.bsm_used[rack.0] += 1;
        self.qpus[a.0].take_comm()?;
        self.qpus[b.0].take_comm()?;
        let cross = ctx.topo.rack_of(a) != ctx.topo.rack_of(b);
        let channel = Channel {
            path,
            rack,
            ends: (a, b),
            cross,
            kind: ChannelKind::Single(w),
        };
        Ok((ch, channel))
    }

    fn release_channel(&mut self, ch: u64) -> Result<()> {
        let Some(c) = self.channels.remove(&ch) else {
            return invariant(format!("channel {ch} released twice"));
        };
        self.occupancy.release(&c.path)?;
        if self.bsm_used[c.rack.0] == 0 {
            return invariant("BSM pool underflow");
        }
        self.bsm_used[c.rack.0] -= 1;
        self.qpus[c.ends.0 .0].give_comm()?;
        self.qpus[c.ends.1 .0].give_comm()?;
        if !c.cross {
            let key = (c.ends.0.min(c.ends.1), c.ends.0.max(c.ends.1));
            if self.open_batches.get(&key) == Some(&ch) {
                self.open_batches.remove(&key);
            }
        }
        Ok(())
    }

    /// A single generation on its own channel: reconfiguration, then one
    /// pair.
    pub(crate) fn start_single(&mut self, ctx: &Ctx, w: usize) -> Result<u64> {
        let (ch, channel) = self.acquire_channel(ctx, w)?;
        self.mark_scheduled(w)?;
        let tr = ctx.latency.t_reconfig_ms;
        let gen = self.sample_generation(ctx, channel.cross);
        let now = self.now;
        let (a, b) = channel.ends;
        let nodes = channel.path.nodes.clone();
        let rack = channel.rack;
        self.record(EventKind::Reconfig, now, tr, vec![w], vec![a, b], nodes.clone(), Some(ch), Some(rack));
        self.record(EventKind::EprGen, now + tr, gen, vec![w], vec![a, b], nodes, Some(ch), Some(rack));
        self.channels.insert(ch, channel);
        self.push_event(now + tr + gen, Pending::GenDone(ch, w));
        Ok(ch)
    }

    /// Opens an in-rack batch channel with `w` as its first member.
    pub(crate) fn open_batch(&mut self, ctx: &Ctx, w: usize) -> Result<u64> {
        let (ch, mut channel) = self.acquire_channel(ctx, w)?;
        if channel.cross {
            return invariant(format!("batch opened for cross-rack work {w}"));
        }
        self.mark_scheduled(w)?;
        channel.kind = ChannelKind::Batch {
            queue: VecDeque::from([w]),
            current: None,
            reconfigured: false,
        };
        let tr = ctx.latency.t_reconfig_ms;
        let now = self.now;
        let (a, b) = channel.ends;
        self.record(
            EventKind::Reconfig,
            now,
            tr,
            vec![w],
            vec![a, b],
            channel.path.nodes.clone(),
            Some(ch),
            Some(channel.rack),
        );
        self.open_batches.insert((a.min(b), a.max(b)), ch);
        self.channels.insert(ch, channel);
        self.push_event(now + tr, Pending::ReconfigDone(ch));
        Ok(ch)
    }

    /// Appends `w` to an open batch; no new reconfiguration.
    pub(crate) fn append_to_batch(&mut self, ctx: &Ctx, ch: u64, w: usize) -> Result<()> {
        let d = self.work[w].demand;
        match self.channels.get(&ch) {
            Some(c) if (c.ends.0.min(c.ends.1), c.ends.0.max(c.ends.1)) == d.pair_key() => {}
            _ => return invariant(format!("work {w} appended to a foreign channel {ch}")),
        }
        self.mark_scheduled(w)?;
        let idle = match &mut self.channels.get_mut(&ch).expect("checked").kind {
            ChannelKind::Batch {
                queue,
                current,
                reconfigured,
            } => {
                queue.push_back(w);
                *reconfigured && current.is_none()
            }
            ChannelKind::Single(_) => return invariant(format!("channel {ch} is not a batch")),
        };
        if idle {
            self.start_next_in_batch(ctx, ch);
        }
        Ok(())
    }

    fn start_next_in_batch(&mut self, ctx: &Ctx, ch: u64) {
        let next = match &mut self.channels.get_mut(&ch).expect("live batch").kind {
            ChannelKind::Batch {
                queue,
                current,
                reconfigured,
            } => {
                *reconfigured = true;
                *current = queue.pop_front();
                *current
            }
            ChannelKind::Single(_) => None,
        };
        if let Some(w) = next {
            let gen = self.sample_generation(ctx, false);
            let c = &self.channels[&ch];
            let (ends, nodes, rack) = (c.ends, c.path.nodes.clone(), c.rack);
            let now = self.now;
            self.record(EventKind::EprGen, now, gen, vec![w], vec![ends.0, ends.1], nodes, Some(ch), Some(rack));
            self.push_event(now + gen, Pending::GenDone(ch, w));
        }
    }

    /// Closes batches with nothing queued or generating. Returns how many.
    fn close_idle_batches(&mut self) -> Result<usize> {
        let idle: Vec<u64> = self
            .open_batches
            .values()
            .copied()
            .filter(|ch| {
                matches!(
                    &self.channels[ch].kind,
                    ChannelKind::Batch { queue, current: None, reconfigured: true } if queue.is_empty()
                )
            })
            .collect();
        for ch in &idle {
            self.release_channel(*ch)?;
        }
        Ok(idle.len())
    }

    /// Replaces a blocked cross-rack program demand by a cross-rack pair
    /// through the proxy plus `k` in-rack pairs, and starts the cross pair.
    pub(crate) fn apply_split(&mut self, ctx: &Ctx, plan: SplitPlan) -> Result<()> {
        let p = plan.parent;
        let parent = self.work[p].demand;
        if parent.origin != Origin::Program || self.work[p].status != WorkStatus::Pending {
            return invariant(format!("demand {p} cannot be split"));
        }
        let cross_id = self.work.len();
        let new_items = post_split_members(&parent, &plan, cross_id);
        let members: Vec<usize> = new_items[1..].iter().map(|d| d.id).collect();
        for d in new_items {
            self.work.push(WorkItem {
                demand: d,
                status: WorkStatus::Pending,
                ends: None,
                scheduled_at: None,
                pair: None,
            });
        }
        let succs: Vec<usize> = self
            .dag
            .succs(p)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        self.dag.apply_split(p, true, &members)?;
        self.work[p].status = WorkStatus::Superseded;
        let reserve = ctx.config.reservation_enabled;
        if reserve {
            reserve_split(&mut self.qpus, &plan);
        }
        self.groups.insert(
            p,
            SplitGroup {
                cross: cross_id,
                unscheduled: members.len(),
                arrivals_pending: members.len(),
                members,
                succs,
                scheduled_in_rack: 0,
                reserved_active: reserve,
                outstanding: if reserve { plan.m.clone() } else { BTreeMap::new() },
                slot2_held: false,
                cross_done: false,
                acc: None,
                swapped: false,
                plan,
            },
        );
        self.start_single(ctx, cross_id)?;
        Ok(())
    }

    fn process(&mut self, ctx: &Ctx, ev: Pending) -> Result<()> {
        match ev {
            Pending::ReconfigDone(ch) => self.start_next_in_batch(ctx, ch),
            Pending::GenDone(ch, w) => {
                let single = matches!(self.channels.get(&ch).map(|c| &c.kind), Some(ChannelKind::Single(_)));
                if single {
                    self.release_channel(ch)?;
                }
                self.arrive(ctx, w)?;
                if !single {
                    self.start_next_in_batch(ctx, ch);
                }
            }
        }
        Ok(())
    }

    fn arrive(&mut self, ctx: &Ctx, w: usize) -> Result<()> {
        let d = self.work[w].demand;
        let cross = ctx.topo.rack_of(d.qpu_a) != ctx.topo.rack_of(d.qpu_b);
        let (category, fidelity) = if cross {
            (PairCategory::Cross, ctx.fidelity.f_cross_rack)
        } else {
            (PairCategory::InRack, ctx.fidelity.f_in_rack)
        };
        let idx = self.pairs.len();
        self.pairs.push(PairRecord {
            work: w,
            category,
            qpus: (d.qpu_a, d.qpu_b),
            generated_at: self.now,
            consumed_at: None,
            fidelity,
        });
        self.work[w].status = WorkStatus::Generated;
        self.work[w].pair = Some(idx);
        match d.origin {
            Origin::Program => {
                self.ready.insert(w);
            }
            Origin::PostSplitCross(p) => {
                self.groups.get_mut(&p).expect("group").cross_done = true;
                self.try_swap(p)?;
            }
            Origin::PostSplitInRack(p) | Origin::DistillCopy(p) => {
                self.arrive_in_rack(ctx, p, w, idx)?;
                self.try_swap(p)?;
            }
        }
        Ok(())
    }

    fn arrive_in_rack(&mut self, ctx: &Ctx, p: usize, w: usize, idx: usize) -> Result<()> {
        let now = self.now;
        let f_in = ctx.fidelity.f_in_rack;
        let g = self.groups.get_mut(&p).expect("group");
        g.arrivals_pending -= 1;
        let Some(acc) = g.acc.clone() else {
            g.acc = Some(Accumulator {
                work: w,
                pair: idx,
                fidelity: f_in,
                distilled: false,
            });
            return self.maybe_free_scratch(p);
        };
        let (busy, proxy, k) = (g.plan.busy, g.plan.proxy, g.plan.k);
        let (f_out, p_ok) = distill_step(acc.fidelity, f_in);
        let ok = ctx.latency.stochastic.is_none() || self.rng.random_bool(p_ok.clamp(0.0, 1.0));
        self.record(EventKind::Distill, now, 0.0, vec![acc.work, w], vec![busy, proxy], Vec::new(), None, None);
        self.pairs[idx].consumed_at = Some(now);
        let g = self.groups.get_mut(&p).expect("group");
        if ok {
            g.acc = Some(Accumulator {
                fidelity: f_out,
                distilled: true,
                ..acc
            });
            return self.maybe_free_scratch(p);
        }
        // Failed round: both pairs are lost; regenerate up to k outstanding.
        self.pairs[acc.pair].consumed_at = Some(now);
        g.acc = None;
        let fresh = (k as usize).saturating_sub(g.arrivals_pending);
        let succs = g.succs.clone();
        for _ in 0..fresh {
            let id = self.work.len();
            self.work.push(WorkItem {
                demand: EprDemand {
                    id,
                    qpu_a: busy,
                    qpu_b: proxy,
                    protocol: Protocol::Cat,
                    origin: Origin::DistillCopy(p),
                },
                status: WorkStatus::Pending,
                ends: None,
                scheduled_at: None,
                pair: None,
            });
            self.dag.insert(id, &[], &succs)?;
            let g = self.groups.get_mut(&p).expect("group");
            g.members.push(id);
            g.arrivals_pending += 1;
        }
        Ok(())
    }

    fn maybe_free_scratch(&mut self, p: usize) -> Result<()> {
        let g = self.groups.get_mut(&p).expect("group");
        if !(g.slot2_held && g.arrivals_pending == 0 && g.acc.is_some()) {
            return Ok(());
        }
        g.slot2_held = false;
        let (busy, proxy) = (g.plan.busy, g.plan.proxy);
        self.qpus[busy.0].release_hold((p, 2))?;
        self.qpus[proxy.0].release_hold((p, 2))?;
        let now = self.now;
        self.record(EventKind::BufferRelease, now, 0.0, vec![p], vec![busy, proxy], Vec::new(), None, None);
        Ok(())
    }

    fn try_swap(&mut self, p: usize) -> Result<()> {
        let g = &self.groups[&p];
        if g.swapped || !g.cross_done || g.acc.is_none() || g.arrivals_pending > 0 {
            return Ok(());
        }
        let acc = g.acc.clone().expect("checked");
        let (cross, far, proxy, busy) = (g.cross, g.plan.far, g.plan.proxy, g.plan.busy);
        self.qpus[proxy.0].release_hold((cross, 0))?;
        self.qpus[proxy.0].release_hold((p, 1))?;
        if acc.distilled {
            self.pairs[acc.pair].category = PairCategory::Distilled;
        }
        self.pairs[acc.pair].fidelity = acc.fidelity;
        let now = self.now;
        self.record(EventKind::Swap, now, 0.0, vec![cross, acc.work], vec![far, proxy, busy], Vec::new(), None, None);
        self.groups.get_mut(&p).expect("group").swapped = true;
        self.ready.insert(p);
        Ok(())
    }

    /// Executes every ready communication whose predecessors are done, in
    /// program order, until none is left.
    fn cascade(&mut self, ctx: &Ctx) -> Result<()> {
        loop {
            let next = self
                .ready
                .iter()
                .copied()
                .find(|&p| ctx.comm_preds[p].iter().all(|&u| self.consumed[u]));
            let Some(p) = next else { return Ok(()) };
            self.ready.remove(&p);
            self.communicate(p)?;
        }
    }

    fn communicate(&mut self, p: usize) -> Result<()> {
        let d = self.work[p].demand;
        let now = self.now;
        if let Some(g) = self.groups.get(&p) {
            let (cross, far, busy) = (g.cross, g.plan.far, g.plan.busy);
            let acc_pair = g.acc.as_ref().expect("swapped").pair;
            self.qpus[far.0].release_hold((cross, 0))?;
            self.qpus[busy.0].release_hold((p, 1))?;
            let cross_pair = self.work[cross].pair.expect("generated");
            self.pairs[cross_pair].consumed_at = Some(now);
            self.pairs[acc_pair].consumed_at = Some(now);
            self.work[cross].status = WorkStatus::Consumed;
        } else {
            self.qpus[d.qpu_a.0].release_hold((p, 0))?;
            self.qpus[d.qpu_b.0].release_hold((p, 0))?;
            let idx = self.work[p].pair.expect("generated");
            self.pairs[idx].consumed_at = Some(now);
        }
        if let Protocol::Tp { source, dest } = d.protocol {
            self.qpus[source.0].data_shift -= 1;
            self.qpus[dest.0].data_shift += 1;
        }
        self.work[p].status = WorkStatus::Consumed;
        self.consumed[p] = true;
        self.remaining -= 1;
        self.record(EventKind::Comm, now, 0.0, vec![p], vec![d.qpu_a, d.qpu_b], Vec::new(), None, None);
        Ok(())
    }

    /// Checks the capacity and reservation invariants at this instant.
    pub fn audit(&self, ctx: &Ctx, check_reservations: bool) -> Result<()> {
        for (i, q) in self.qpus.iter().enumerate() {
            if q.buffer_in_use() > q.buffer_capacity as i64 {
                return invariant(format!("QPU {i} buffer over capacity"));
            }
            if q.comm_in_use > q.comm_total {
                return invariant(format!("QPU {i} communication qubits over capacity"));
            }
            if check_reservations && (q.reserved_buffer as i64) > q.projected_buffer() {
                return invariant(format!(
                    "QPU {i} reserved {} exceeds projected {}",
                    q.reserved_buffer,
                    q.projected_buffer()
                ));
            }
        }
        for (r, used) in self.bsm_used.iter().enumerate() {
            if *used > ctx.topo.bsm_count(RackId(r)) {
                return invariant(format!("rack {r} BSM pool over capacity"));
            }
        }
        for (i, e) in ctx.topo.edges().iter().enumerate() {
            if self.occupancy.used(crate::topology::EdgeId(i)) > e.weight {
                return invariant(format!("edge {i} over capacity"));
            }
        }
        Ok(())
    }

    /// Wait-for summary used in stall reports.
    pub fn diagnostic(&self, ctx: &Ctx) -> String {
        let mut s = String::new();
        let waiting: Vec<usize> = (0..ctx.program_len).filter(|&p| !self.consumed[p]).collect();
        writeln!(s, "{} program demands unconsumed", waiting.len()).ok();
        for &p in waiting.iter().take(8) {
            let d = &self.work[p].demand;
            let blockers: Vec<usize> = ctx.comm_preds[p].iter().copied().filter(|&u| !self.consumed[u]).collect();
            writeln!(
                s,
                "  demand {p} ({},{}) status {:?} waits on {:?}",
                d.qpu_a, d.qpu_b, self.work[p].status, blockers
            )
            .ok();
        }
        for (i, q) in self.qpus.iter().enumerate() {
            writeln!(
                s,
                "  qpu {i}: free {} projected {} reserved {} comm {}/{}",
                q.free_buffer(),
                q.projected_buffer(),
                q.reserved_buffer,
                q.comm_in_use,
                q.comm_total
            )
            .ok();
        }
        s
    }
}

/// True iff nothing is in flight and program demands remain.
pub fn detect_stall(state: &EngineState) -> bool {
    state.queue.is_empty() && !state.is_done()
}

/// Outcome of advancing the engine to the next stable instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Running,
    Done,
    Stalled,
}

/// A run in progress, with its retry bookkeeping.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    pub ctx: Ctx<'a>,
    pub state: EngineState,
    pub strategy: Strategy,
    snapshot: Option<EngineState>,
    initial: EngineState,
    pub stats: RunStats,
    most_restarted: bool,
}

impl<'a> Engine<'a> {
    pub fn new(
        topo: &'a NetworkTopology,
        demands: &[EprDemand],
        config: &SchedulerConfig,
        latency: &LatencyModel,
        fidelity: &FidelityModel,
    ) -> Result<Self> {
        latency.validate()?;
        fidelity.validate()?;
        validate_demands(topo, demands)?;
        let threshold = config.validate(topo)?;
        if config.strategy == Strategy::Flexible && config.split_enabled && config.distill_copies >= 2 {
            crate::models::distill_werner(fidelity.f_in_rack, config.distill_copies)?;
        }
        let dag = build_dag(demands);
        let comm_preds = (0..demands.len())
            .map(|v| dag.preds(v).map(|p| p.iter().copied().collect()).unwrap_or_default())
            .collect();
        let ctx = Ctx {
            topo,
            latency: *latency,
            fidelity: *fidelity,
            config: config.clone(),
            threshold,
            comm_preds,
            program_len: demands.len(),
        };
        let seed = latency.stochastic.map(|s| s.seed).unwrap_or(0);
        let state = EngineState::new(&ctx, demands, seed);
        Ok(Engine {
            initial: state.clone(),
            state,
            strategy: config.strategy,
            snapshot: None,
            stats: RunStats {
                downgrades: 0,
                stalls: 0,
                restarts: 0,
                splits: 0,
                final_strategy: config.strategy,
            },
            ctx,
            most_restarted: false,
        })
    }

    pub fn snapshot(&self) -> Option<&EngineState> {
        self.snapshot.as_ref()
    }

    /// Runs the scheduler until it neither schedules nor frees anything at
    /// the current instant.
    pub fn settle_instant(&mut self) -> Result<()> {
        loop {
            let tick = schedule_tick(&self.ctx, &mut self.state, self.strategy)?;
            self.stats.splits += tick.splits;
            if let Some(s) = tick.snapshot {
                self.snapshot = Some(s);
            }
            if self.ctx.config.audit {
                let check = self.strategy == Strategy::Flexible && self.ctx.config.reservation_enabled;
                self.state.audit(&self.ctx, check)?;
            }
            if self.state.close_idle_batches()? == 0 {
                return Ok(());
            }
        }
    }

    /// Processes one timestamp worth of events and reschedules.
    pub fn advance(&mut self) -> Result<Progress> {
        if self.state.is_done() {
            return Ok(Progress::Done);
        }
        let Some((&first, _)) = self.state.queue.first_key_value() else {
            return Ok(Progress::Stalled);
        };
        self.state.now = first.time;
        while let Some((&key, _)) = self.state.queue.first_key_value() {
            if key.time != first.time {
                break;
            }
            let ev = self.state.queue.remove(&key).expect("present");
            self.state.process(&self.ctx, ev)?;
        }
        self.state.cascade(&self.ctx)?;
        self.settle_instant()?;
        if self.state.is_done() {
            return Ok(Progress::Done);
        }
        if detect_stall(&self.state) {
            return Ok(Progress::Stalled);
        }
        Ok(Progress::Running)
    }

    /// Applies the retry policy after a stall.
    fn recover(&mut self) -> Result<()> {
        self.stats.stalls += 1;
        if !self.ctx.config.auto_retry {
            return Err(self.stall_error());
        }
        let next = match self.strategy {
            Strategy::Flexible => Strategy::MediumConservative,
            Strategy::MediumConservative | Strategy::BaselineJit => Strategy::MostConservative,
            Strategy::MostConservative => {
                if self.most_restarted {
                    return Err(self.stall_error());
                }
                self.most_restarted = true;
                self.stats.restarts += 1;
                self.state = self.initial.clone();
                self.snapshot = None;
                return self.settle_instant();
            }
        };
        self.strategy = next;
        self.stats.downgrades += 1;
        self.state = match &self.snapshot {
            Some(s) => s.clone(),
            None => {
                self.stats.restarts += 1;
                self.initial.clone()
            }
        };
        self.settle_instant()
    }

    fn stall_error(&self) -> QdcError {
        QdcError::Stall {
            time_ms: self.state.now,
            diagnostic: self.state.diagnostic(&self.ctx),
        }
    }

    pub fn run(mut self) -> Result<SimOutcome> {
        if self.state.is_done() {
            return Ok(self.finish());
        }
        self.settle_instant()?;
        loop {
            if self.state.is_done() {
                return Ok(self.finish());
            }
            if detect_stall(&self.state) {
                self.recover()?;
                continue;
            }
            match self.advance()? {
                Progress::Done => return Ok(self.finish()),
                Progress::Stalled => self.recover()?,
                Progress::Running => {}
            }
        }
    }

    fn finish(mut self) -> SimOutcome {
        self.stats.final_strategy = self.strategy;
        let timeline = Timeline {
            events: std::mem::take(&mut self.state.trace),
            pairs: std::mem::take(&mut self.state.pairs),
            work: self
                .state
                .work
                .iter()
                .map(|w| WorkRecord {
                    demand: w.demand,
                    scheduled_at: w.scheduled_at,
                })
                .collect(),
            t_reconfig_ms: self.ctx.latency.t_reconfig_ms,
        };
        let report = compute_metrics(&timeline, &self.ctx.latency, &self.ctx.fidelity);
        SimOutcome {
            timeline,
            report,
            stats: self.stats,
        }
    }

    /// Live EPR halves left in any buffer.
    pub fn live_halves(&self) -> u32 {
        self.state.qpus.iter().map(|q| q.halves).sum()
    }
}

/// Runs one simulation to completion.
pub fn simulate(
    topo: &NetworkTopology,
    demands: &[EprDemand],
    config: &SchedulerConfig,
    latency: &LatencyModel,
    fidelity: &FidelityModel,
) -> Result<SimOutcome> {
    Engine::new(topo, demands, config, latency, fidelity)?.run()
}
