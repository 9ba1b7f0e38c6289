//! Per-QPU qubit accounting and the scheduling, combining and split
//! conditions.
//!
//! Buffer slots are allocated when a pair is scheduled and freed when the
//! pair is consumed. Each held half carries a [`Role`] that says how much
//! buffer its consumption gives back, which is what `projected_buffer`
//! sums.

use std::collections::BTreeMap;

use crate::error::{invariant, Result};
use crate::topology::{find_available_path, NetworkTopology, Occupancy, QpuId, QpuSpec, RackId};

/// How a held EPR half is eventually consumed at this QPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// Remote-gate block: the half is measured out, one slot returns.
    Cat,
    /// Teleportation source: the half and the outgoing data qubit free up.
    TpSource,
    /// Teleportation destination: the incoming data qubit takes the slot.
    TpDest,
    /// Intermediate half consumed by a swap or a distillation.
    Transient,
}

impl Role {
    pub fn release(self) -> i64 {
        match self {
            Role::Cat | Role::Transient => 1,
            Role::TpSource => 2,
            Role::TpDest => 0,
        }
    }
}

/// Key of a held half: `(work id, slot)`. Split groups use slots 1 and 2
/// for the accumulator and scratch halves of their in-rack pairs.
pub type HoldKey = (usize, u8);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QpuState {
    pub buffer_capacity: u32,
    /// Buffer slots allocated to EPR halves.
    pub halves: u32,
    /// Buffer slots taken (positive) or given back (negative) by
    /// teleported data qubits.
    pub data_shift: i64,
    pub comm_total: u32,
    pub comm_in_use: u32,
    pub reserved_buffer: u32,
    pub holds: BTreeMap<HoldKey, Role>,
}

impl QpuState {
    pub fn new(spec: QpuSpec) -> Self {
        QpuState {
            buffer_capacity: spec.buffer_qubits,
            halves: 0,
            data_shift: 0,
            comm_total: spec.comm_qubits,
            comm_in_use: 0,
            reserved_buffer: 0,
            holds: BTreeMap::new(),
        }
    }

    pub fn buffer_in_use(&self) -> i64 {
        self.halves as i64 + self.data_shift
    }

    pub fn free_buffer(&self) -> i64 {
        self.buffer_capacity as i64 - self.buffer_in_use()
    }

    pub fn avail_comm(&self) -> u32 {
        self.comm_total - self.comm_in_use
    }

    /// Free buffer once every held half is consumed.
    pub fn projected_buffer(&self) -> i64 {
        self.free_buffer() + self.holds.values().map(|r| r.release()).sum::<i64>()
    }

    pub fn hold(&mut self, key: HoldKey, role: Role) -> Result<()> {
        if self.free_buffer() < 1 {
            return invariant(format!("buffer overflow allocating half {key:?}"));
        }
        if self.holds.insert(key, role).is_some() {
            return invariant(format!("half {key:?} allocated twice"));
        }
        self.halves += 1;
        Ok(())
    }

    pub fn release_hold(&mut self, key: HoldKey) -> Result<Role> {
        match self.holds.remove(&key) {
            Some(role) => {
                self.halves -= 1;
                Ok(role)
            }
            None => invariant(format!("half {key:?} released but not held")),
        }
    }

    pub fn take_comm(&mut self) -> Result<()> {
        if self.comm_in_use >= self.comm_total {
            return invariant("communication qubit over-subscribed");
        }
        self.comm_in_use += 1;
        Ok(())
    }

    pub fn give_comm(&mut self) -> Result<()> {
        if self.comm_in_use == 0 {
            return invariant("communication qubit released twice");
        }
        self.comm_in_use -= 1;
        Ok(())
    }

    pub fn reserve(&mut self, m: u32) {
        self.reserved_buffer += m;
    }

    pub fn unreserve(&mut self, m: u32) -> Result<()> {
        if self.reserved_buffer < m {
            return invariant(format!(
                "reserved buffer underflow ({} - {m})",
                self.reserved_buffer
            ));
        }
        self.reserved_buffer -= m;
        Ok(())
    }
}

/// Read-only view of everything the conditions inspect.
#[derive(Debug, Clone, Copy)]
pub struct ResourceView<'a> {
    pub topo: &'a NetworkTopology,
    pub qpus: &'a [QpuState],
    pub bsm_used: &'a [u32],
    pub occupancy: &'a Occupancy,
}

impl ResourceView<'_> {
    pub fn qpu(&self, q: QpuId) -> &QpuState {
        &self.qpus[q.0]
    }

    pub fn bsm_free(&self, r: RackId) -> bool {
        self.bsm_used[r.0] < self.topo.bsm_count(r)
    }

    /// BSM pool a generation between `a` and `b` would draw from: the
    /// shared rack for in-rack pairs, otherwise `a`'s rack first.
    pub fn bsm_pool_for(&self, a: QpuId, b: QpuId) -> Option<RackId> {
        let (ra, rb) = (self.topo.rack_of(a), self.topo.rack_of(b));
        [ra, rb].into_iter().find(|r| self.bsm_free(*r))
    }

    /// No spare communication qubit, or the link to the ToR is full.
    pub fn is_busy(&self, q: QpuId) -> bool {
        self.qpu(q).avail_comm() == 0
            || !self
                .occupancy
                .has_free_slot(self.topo, self.topo.access_edge(q))
    }
}

/// One endpoint of a generation under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub qpu: QpuId,
    pub role: Role,
    /// Whether the pair needs a fresh buffer slot here.
    pub allocates: bool,
    /// Reservation held here by the pair's own split group, ignored when
    /// the pair itself is checked.
    pub own_reservation: u32,
}

impl Endpoint {
    pub fn new(qpu: QpuId, role: Role) -> Self {
        Endpoint {
            qpu,
            role,
            allocates: true,
            own_reservation: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockReason {
    Comm(QpuId),
    Bsm,
    Channel,
    BufferThreshold(QpuId),
    BufferFull(QpuId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Schedulable,
    /// Append to the open in-rack batch with this channel id.
    Combinable(u64),
    Blocked(BlockReason),
}

/// Buffer-threshold rule for one endpoint. Front-layer demands are exempt
/// from the threshold, but under the modified rule a TP destination never
/// eats into another split's reservation.
fn buffer_rule(view: &ResourceView, ep: &Endpoint, threshold: u32, in_front: bool, modified: bool) -> bool {
    let st = view.qpu(ep.qpu);
    let reserved = st.reserved_buffer.saturating_sub(ep.own_reservation) as i64;
    let spare = st.projected_buffer() - reserved;
    if modified && ep.role == Role::TpDest && ep.allocates && spare < 1 {
        return false;
    }
    if in_front {
        return true;
    }
    let avail = st.avail_comm() as i64;
    let thr = threshold as i64;
    if !modified {
        return st.free_buffer() + avail >= thr;
    }
    // For a TP destination `spare + avail - 1 >= thr` is the same test.
    spare + avail > thr
}

fn evaluate(
    view: &ResourceView,
    a: &Endpoint,
    b: &Endpoint,
    threshold: u32,
    in_front: bool,
    open_batch: Option<u64>,
    modified: bool,
) -> Decision {
    if open_batch.is_none() {
        for ep in [a, b] {
            if view.qpu(ep.qpu).avail_comm() == 0 {
                return Decision::Blocked(BlockReason::Comm(ep.qpu));
            }
        }
        if view.bsm_pool_for(a.qpu, b.qpu).is_none() {
            return Decision::Blocked(BlockReason::Bsm);
        }
        if find_available_path(view.topo, view.occupancy, a.qpu, b.qpu, 0).is_none() {
            return Decision::Blocked(BlockReason::Channel);
        }
    }
    for ep in [a, b] {
        if !buffer_rule(view, ep, threshold, in_front, modified) {
            return Decision::Blocked(BlockReason::BufferThreshold(ep.qpu));
        }
    }
    for ep in [a, b] {
        if ep.allocates && view.qpu(ep.qpu).free_buffer() < 1 {
            return Decision::Blocked(BlockReason::BufferFull(ep.qpu));
        }
    }
    match open_batch {
        Some(ch) => Decision::Combinable(ch),
        None => Decision::Schedulable,
    }
}

/// Communication qubits, BSM, channel, and `free + avail_comm >= threshold`
/// off the front layer. `open_batch` names an open in-rack batch on the
/// same QPU pair, which supplies the first three.
pub fn check_basic_conditions(
    view: &ResourceView,
    a: &Endpoint,
    b: &Endpoint,
    threshold: u32,
    in_front: bool,
    open_batch: Option<u64>,
) -> Decision {
    evaluate(view, a, b, threshold, in_front, open_batch, false)
}

/// As [`check_basic_conditions`], but the buffer rule works on
/// `projected - reserved`: strict for Cat, TP-source and transient halves,
/// and `spare + avail - 1 >= threshold` plus one spare slot for a TP
/// destination.
pub fn check_modified_conditions(
    view: &ResourceView,
    a: &Endpoint,
    b: &Endpoint,
    threshold: u32,
    in_front: bool,
    open_batch: Option<u64>,
) -> Decision {
    evaluate(view, a, b, threshold, in_front, open_batch, true)
}

/// A split of a blocked cross-rack demand around its busy endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub parent: usize,
    pub busy: QpuId,
    pub proxy: QpuId,
    pub far: QpuId,
    /// Total in-rack copies (1 means no distillation).
    pub k: u32,
    /// Buffer slots the group will hold at each involved QPU.
    pub m: BTreeMap<QpuId, u32>,
}

impl SplitPlan {
    pub fn new(parent: usize, busy: QpuId, proxy: QpuId, far: QpuId, k: u32) -> Self {
        let distill = u32::from(k >= 2);
        let m = BTreeMap::from([(far, 1), (busy, 1 + distill), (proxy, 2 + distill)]);
        SplitPlan {
            parent,
            busy,
            proxy,
            far,
            k,
            m,
        }
    }

    pub fn m_at(&self, q: QpuId) -> u32 {
        self.m.get(&q).copied().unwrap_or(0)
    }
}

/// Proxy candidates for splitting the demand `(a, b)` that pass the
/// buffer reservation test, best first. Empty unless exactly one endpoint
/// is busy.
pub fn split_candidates(view: &ResourceView, parent: usize, a: QpuId, b: QpuId, k: u32) -> Vec<SplitPlan> {
    if view.topo.rack_of(a) == view.topo.rack_of(b) {
        return Vec::new();
    }
    let (busy, far) = match (view.is_busy(a), view.is_busy(b)) {
        (true, false) => (a, b),
        (false, true) => (b, a),
        _ => return Vec::new(),
    };
    let rack = view.topo.rack(view.topo.rack_of(busy));
    let mut proxies: Vec<QpuId> = rack
        .qpus
        .iter()
        .copied()
        .filter(|&p| p != busy && !view.is_busy(p))
        .collect();
    proxies.sort_by_key(|&p| (std::cmp::Reverse(view.qpu(p).avail_comm()), p));
    proxies
        .into_iter()
        .map(|p| SplitPlan::new(parent, busy, p, far, k))
        .filter(|plan| {
            plan.m.iter().all(|(&q, &m)| {
                let st = view.qpu(q);
                st.projected_buffer() - st.reserved_buffer as i64 >= m as i64
            })
        })
        .collect()
}

/// First split plan whose substitute cross-rack pair can start now.
pub fn check_split_conditions(view: &ResourceView, parent: usize, a: QpuId, b: QpuId, k: u32) -> Option<SplitPlan> {
    split_candidates(view, parent, a, b, k).into_iter().find(|plan| {
        let proxy = Endpoint::new(plan.proxy, Role::Transient);
        let far = Endpoint::new(plan.far, Role::Cat);
        evaluate(view, &proxy, &far, 0, true, None, false) == Decision::Schedulable
    })
}

/// Charges a plan's reservation when its cross-rack pair is scheduled.
pub fn reserve_split(qpus: &mut [QpuState], plan: &SplitPlan) {
    for (q, m) in &plan.m {
        qpus[q.0].reserve(*m);
    }
}

/// Returns a plan's reservation once all its in-rack pairs are scheduled.
pub fn settle_split(qpus: &mut [QpuState], plan: &SplitPlan) -> Result<()> {
    for (q, m) in &plan.m {
        qpus[q.0].unreserve(*m)?;
    }
    Ok(())
}
