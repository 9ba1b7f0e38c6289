//! Optical network model of a quantum data center.
//!
//! QPUs hang off a top-of-rack (ToR) switch; ToRs are joined through core
//! (and, for fat trees, aggregation) switches. Every edge carries a
//! multiplexing weight: the number of channels that may cross it at once.
//! QPU nodes always occupy node ids `0..num_qpus`, so a [`QpuId`] doubles as
//! a node index.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use crate::error::{config, invariant, QdcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QpuId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RackId(pub usize);

impl QpuId {
    pub fn node(self) -> NodeId {
        NodeId(self.0)
    }
}

impl fmt::Display for QpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Qpu,
    Tor,
    Aggregation,
    Core,
}

impl NodeKind {
    fn as_str(self) -> &'static str {
        match self {
            NodeKind::Qpu => "qpu",
            NodeKind::Tor => "tor",
            NodeKind::Aggregation => "agg",
            NodeKind::Core => "core",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Clos,
    SpineLeaf,
    FatTree,
}

impl std::str::FromStr for TopologyKind {
    type Err = QdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clos" => Ok(TopologyKind::Clos),
            "spine_leaf" => Ok(TopologyKind::SpineLeaf),
            "fat_tree" => Ok(TopologyKind::FatTree),
            other => config(format!("unknown topology kind '{other}'")),
        }
    }
}

/// Qubit budget of one QPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpuSpec {
    pub data_qubits: u32,
    pub buffer_qubits: u32,
    pub comm_qubits: u32,
}

impl Default for QpuSpec {
    fn default() -> Self {
        QpuSpec {
            data_qubits: 30,
            buffer_qubits: 10,
            comm_qubits: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub weight: u32,
}

impl Edge {
    pub fn other(&self, n: NodeId) -> NodeId {
        if self.a == n {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rack {
    pub tor: NodeId,
    pub qpus: Vec<QpuId>,
}

/// Generator parameters for [`build_topology`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopologyParams {
    pub kind: TopologyKind,
    pub num_racks: usize,
    pub qpus_per_rack: usize,
    pub qpu_spec: QpuSpec,
    pub edge_weight: u32,
    /// BSM devices per ToR; `None` means two per QPU in the rack.
    pub bsms_per_tor: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    nodes: Vec<NodeKind>,
    qpu_specs: Vec<QpuSpec>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(NodeId, EdgeId)>>,
    racks: Vec<Rack>,
    rack_of: Vec<RackId>,
    bsm_count: Vec<u32>,
}

impl NetworkTopology {
    /// Assembles and validates a topology from raw parts.
    pub fn from_parts(
        nodes: Vec<NodeKind>,
        qpu_specs: Vec<QpuSpec>,
        edges: Vec<Edge>,
        racks: Vec<Rack>,
        bsm_count: Vec<u32>,
    ) -> Result<Self> {
        let num_qpus = nodes.iter().take_while(|k| **k == NodeKind::Qpu).count();
        if nodes[num_qpus..].contains(&NodeKind::Qpu) {
            return config("QPU nodes must occupy the lowest node ids");
        }
        if qpu_specs.len() != num_qpus {
            return config(format!(
                "{} QPU specs given for {} QPU nodes",
                qpu_specs.len(),
                num_qpus
            ));
        }
        if bsm_count.len() != racks.len() {
            return config("one BSM count per rack is required");
        }
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            if e.a.0 >= nodes.len() || e.b.0 >= nodes.len() || e.a == e.b {
                return config(format!("edge {i} has invalid endpoints"));
            }
            if e.weight < 1 {
                return config(format!("edge {i} has weight 0"));
            }
            adjacency[e.a.0].push((e.b, EdgeId(i)));
            adjacency[e.b.0].push((e.a, EdgeId(i)));
        }
        for adj in adjacency.iter_mut() {
            adj.sort();
        }
        let mut rack_of = vec![None; num_qpus];
        for (r, rack) in racks.iter().enumerate() {
            if nodes.get(rack.tor.0) != Some(&NodeKind::Tor) {
                return config(format!("rack {r} names a ToR that is not a ToR node"));
            }
            if racks[..r].iter().any(|o| o.tor == rack.tor) {
                return config(format!("rack {r} shares its ToR with another rack"));
            }
            for q in &rack.qpus {
                if q.0 >= num_qpus {
                    return config(format!("rack {r} lists non-QPU node {}", q.0));
                }
                if rack_of[q.0].is_some() {
                    return config(format!("QPU {} belongs to more than one rack", q.0));
                }
                rack_of[q.0] = Some(RackId(r));
                let tor_link = adjacency[q.0].iter().any(|(n, _)| *n == rack.tor);
                if !tor_link {
                    return config(format!("QPU {} has no link to its ToR", q.0));
                }
            }
        }
        let rack_of = rack_of
            .into_iter()
            .enumerate()
            .map(|(q, r)| r.ok_or_else(|| QdcError::Config(format!("QPU {q} belongs to no rack"))))
            .collect::<Result<Vec<_>>>()?;

        let topo = NetworkTopology {
            nodes,
            qpu_specs,
            edges,
            adjacency,
            racks,
            rack_of,
            bsm_count,
        };
        if !topo.is_connected() {
            return config("network graph is not connected");
        }
        Ok(topo)
    }

    fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for (m, _) in &self.adjacency[n] {
                if !seen[m.0] {
                    seen[m.0] = true;
                    queue.push_back(m.0);
                }
            }
        }
        seen.iter().all(|s| *s)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_qpus(&self) -> usize {
        self.qpu_specs.len()
    }

    pub fn qpus(&self) -> impl Iterator<Item = QpuId> {
        (0..self.num_qpus()).map(QpuId)
    }

    pub fn node_kind(&self, n: NodeId) -> NodeKind {
        self.nodes[n.0]
    }

    pub fn is_qpu(&self, n: NodeId) -> bool {
        n.0 < self.num_qpus()
    }

    pub fn qpu_spec(&self, q: QpuId) -> QpuSpec {
        self.qpu_specs[q.0]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e.0]
    }

    pub fn neighbors(&self, n: NodeId) -> &[(NodeId, EdgeId)] {
        &self.adjacency[n.0]
    }

    pub fn racks(&self) -> &[Rack] {
        &self.racks
    }

    pub fn rack(&self, r: RackId) -> &Rack {
        &self.racks[r.0]
    }

    pub fn rack_of(&self, q: QpuId) -> RackId {
        self.rack_of[q.0]
    }

    pub fn tor_of(&self, q: QpuId) -> NodeId {
        self.racks[self.rack_of[q.0].0].tor
    }

    pub fn bsm_count(&self, r: RackId) -> u32 {
        self.bsm_count[r.0]
    }

    /// The QPU's link to its own ToR (lowest edge id if multiplexed as
    /// several parallel records).
    pub fn access_edge(&self, q: QpuId) -> EdgeId {
        let tor = self.tor_of(q);
        self.adjacency[q.0]
            .iter()
            .find(|(n, _)| *n == tor)
            .map(|(_, e)| *e)
            .expect("validated at construction")
    }

    pub fn check_qpu(&self, q: QpuId) -> Result<()> {
        if q.0 < self.num_qpus() {
            Ok(())
        } else {
            config(format!("unknown QPU id {}", q.0))
        }
    }

    /// Renders the topology in the line-oriented topology file format.
    pub fn to_records(&self) -> String {
        let mut out = String::from("# qdcsim topology\n");
        for (i, k) in self.nodes.iter().enumerate() {
            if *k == NodeKind::Qpu {
                let s = self.qpu_specs[i];
                out.push_str(&format!(
                    "node {i} qpu {} {} {}\n",
                    s.data_qubits, s.buffer_qubits, s.comm_qubits
                ));
            } else {
                out.push_str(&format!("node {i} {}\n", k.as_str()));
            }
        }
        for e in &self.edges {
            out.push_str(&format!("edge {} {} {}\n", e.a, e.b, e.weight));
        }
        for (r, rack) in self.racks.iter().enumerate() {
            out.push_str(&format!("rack {r} {}", rack.tor));
            for q in &rack.qpus {
                out.push_str(&format!(" {q}"));
            }
            out.push('\n');
            out.push_str(&format!("bsm {} {}\n", rack.tor, self.bsm_count[r]));
        }
        out
    }

    /// Parses the line-oriented topology file format:
    ///
    /// ```text
    /// node <id> qpu <data> <buffer> <comm>
    /// node <id> tor|agg|core
    /// edge <a> <b> <weight>
    /// rack <rack-id> <tor-id> <qpu-id>...
    /// bsm <tor-id> <count>
    /// ```
    pub fn from_records(text: &str) -> Result<Self> {
        let mut nodes: Vec<Option<(NodeKind, Option<QpuSpec>)>> = Vec::new();
        let mut edges = Vec::new();
        let mut racks: Vec<Option<Rack>> = Vec::new();
        let mut bsm: Vec<(NodeId, u32, usize)> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| QdcError::Parse { line: line_no, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<usize> {
                s.parse::<usize>()
                    .map_err(|_| perr(format!("expected a non-negative integer, found '{s}'")))
            };
            match toks[0] {
                "node" => {
                    if toks.len() < 3 {
                        return Err(perr("node record needs an id and a kind".into()));
                    }
                    let id = num(toks[1])?;
                    let entry = match toks[2] {
                        "qpu" => {
                            if toks.len() != 6 {
                                return Err(perr("qpu node needs <data> <buffer> <comm>".into()));
                            }
                            let spec = QpuSpec {
                                data_qubits: num(toks[3])? as u32,
                                buffer_qubits: num(toks[4])? as u32,
                                comm_qubits: num(toks[5])? as u32,
                            };
                            (NodeKind::Qpu, Some(spec))
                        }
                        "tor" => (NodeKind::Tor, None),
                        "agg" => (NodeKind::Aggregation, None),
                        "core" => (NodeKind::Core, None),
                        other => return Err(perr(format!("unknown node kind '{other}'"))),
                    };
                    if nodes.len() <= id {
                        nodes.resize(id + 1, None);
                    }
                    if nodes[id].is_some() {
                        return Err(perr(format!("node {id} declared twice")));
                    }
                    nodes[id] = Some(entry);
                }
                "edge" => {
                    if toks.len() != 4 {
                        return Err(perr("edge record needs <a> <b> <weight>".into()));
                    }
                    let weight = num(toks[3])? as u32;
                    if weight == 0 {
                        return Err(perr("edge weight must be at least 1".into()));
                    }
                    edges.push(Edge {
                        a: NodeId(num(toks[1])?),
                        b: NodeId(num(toks[2])?),
                        weight,
                    });
                }
                "rack" => {
                    if toks.len() < 4 {
                        return Err(perr("rack record needs <rack> <tor> <qpu>...".into()));
                    }
                    let r = num(toks[1])?;
                    let tor = NodeId(num(toks[2])?);
                    let qpus = toks[3..]
                        .iter()
                        .map(|t| num(t).map(QpuId))
                        .collect::<Result<Vec<_>>>()?;
                    if racks.len() <= r {
                        racks.resize(r + 1, None);
                    }
                    if racks[r].is_some() {
                        return Err(perr(format!("rack {r} declared twice")));
                    }
                    racks[r] = Some(Rack { tor, qpus });
                }
                "bsm" => {
                    if toks.len() != 3 {
                        return Err(perr("bsm record needs <tor> <count>".into()));
                    }
                    bsm.push((NodeId(num(toks[1])?), num(toks[2])? as u32, line_no));
                }
                other => return Err(perr(format!("unknown record type '{other}'"))),
            }
        }

        let mut kinds = Vec::with_capacity(nodes.len());
        let mut specs = Vec::new();
        for (id, n) in nodes.into_iter().enumerate() {
            let (kind, spec) = n.ok_or_else(|| QdcError::Config(format!("node {id} is missing")))?;
            kinds.push(kind);
            if let Some(s) = spec {
                specs.push(s);
            }
        }
        let racks = racks
            .into_iter()
            .enumerate()
            .map(|(r, rk)| rk.ok_or_else(|| QdcError::Config(format!("rack {r} is missing"))))
            .collect::<Result<Vec<_>>>()?;
        let mut bsm_count = vec![0u32; racks.len()];
        for (tor, count, line) in bsm {
            match racks.iter().position(|r| r.tor == tor) {
                Some(r) => bsm_count[r] = count,
                None => {
                    return Err(QdcError::Parse {
                        line,
                        msg: format!("bsm record names {tor}, which is no rack's ToR"),
                    })
                }
            }
        }
        NetworkTopology::from_parts(kinds, specs, edges, racks, bsm_count)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QdcError::Io(format!("{}: {e}", path.display())))?;
        Self::from_records(&text)
    }
}

/// Builds a CLOS, spine-leaf or fat-tree data center.
///
/// Node layout: QPUs (rack by rack), then ToRs, then aggregation switches,
/// then core switches. A single-rack build has no switches above its ToR.
pub fn build_topology(p: TopologyParams) -> Result<NetworkTopology> {
    if p.num_racks < 1 {
        return config("topology.racks must be at least 1");
    }
    if p.qpus_per_rack < 1 {
        return config("topology.qpus_per_rack must be at least 1");
    }
    if p.edge_weight < 1 {
        return config("topology.edge_weight must be at least 1");
    }
    let num_qpus = p.num_racks * p.qpus_per_rack;
    let bsms = p
        .bsms_per_tor
        .unwrap_or(2 * p.qpus_per_rack as u32);

    let mut nodes = vec![NodeKind::Qpu; num_qpus];
    let tor0 = nodes.len();
    nodes.extend(std::iter::repeat_n(NodeKind::Tor, p.num_racks));
    let tor = |r: usize| NodeId(tor0 + r);

    let mut edges = Vec::new();
    let mut link = |a: NodeId, b: NodeId| {
        edges.push(Edge {
            a,
            b,
            weight: p.edge_weight,
        })
    };
    let mut racks = Vec::with_capacity(p.num_racks);
    for r in 0..p.num_racks {
        let qpus: Vec<QpuId> = (0..p.qpus_per_rack)
            .map(|i| QpuId(r * p.qpus_per_rack + i))
            .collect();
        for q in &qpus {
            link(q.node(), tor(r));
        }
        racks.push(Rack { tor: tor(r), qpus });
    }

    if p.num_racks > 1 {
        match p.kind {
            TopologyKind::Clos | TopologyKind::SpineLeaf => {
                // Folded Clos keeps ToR uplinks equal to downlinks; the
                // spine-leaf build is oversubscribed 2:1.
                let uplinks = match p.kind {
                    TopologyKind::Clos => p.qpus_per_rack,
                    _ => p.qpus_per_rack.div_ceil(2),
                };
                let core0 = nodes.len();
                nodes.extend(std::iter::repeat_n(NodeKind::Core, uplinks));
                for r in 0..p.num_racks {
                    for c in 0..uplinks {
                        link(tor(r), NodeId(core0 + c));
                    }
                }
            }
            TopologyKind::FatTree => {
                // k = 4 fat tree collapsed to three tiers: each pod holds
                // up to two ToRs and two aggregation switches; aggregation
                // switch j of every pod reaches cores 2j and 2j+1.
                let pods = p.num_racks.div_ceil(2);
                let agg0 = nodes.len();
                nodes.extend(std::iter::repeat_n(NodeKind::Aggregation, 2 * pods));
                let core0 = nodes.len();
                nodes.extend(std::iter::repeat_n(NodeKind::Core, 4));
                for r in 0..p.num_racks {
                    let pod = r / 2;
                    for j in 0..2 {
                        link(tor(r), NodeId(agg0 + 2 * pod + j));
                    }
                }
                for pod in 0..pods {
                    for j in 0..2 {
                        for c in 0..2 {
                            link(NodeId(agg0 + 2 * pod + j), NodeId(core0 + 2 * j + c));
                        }
                    }
                }
            }
        }
    }

    NetworkTopology::from_parts(
        nodes,
        vec![p.qpu_spec; num_qpus],
        edges,
        racks,
        vec![bsms; p.num_racks],
    )
}

/// Returns whether both QPUs sit in one rack. A QPU paired with itself is
/// rejected.
pub fn same_rack(topo: &NetworkTopology, a: QpuId, b: QpuId) -> Result<bool> {
    topo.check_qpu(a)?;
    topo.check_qpu(b)?;
    if a == b {
        return config(format!("QPU {a} paired with itself"));
    }
    Ok(topo.rack_of(a) == topo.rack_of(b))
}

/// A channel through the network held by one generation job or batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathReservation {
    /// Id of the job or batch holding the channel.
    pub owner: u64,
    pub nodes: Vec<NodeId>,
    /// One slot on each listed edge.
    pub edges: Vec<EdgeId>,
    pub requires_reconfig: bool,
}

impl PathReservation {
    pub fn hops(&self) -> usize {
        self.edges.len()
    }
}

/// Per-edge slot usage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occupancy {
    used: Vec<u32>,
    active: BTreeSet<u64>,
}

impl Occupancy {
    pub fn new(topo: &NetworkTopology) -> Self {
        Occupancy {
            used: vec![0; topo.edges().len()],
            active: BTreeSet::new(),
        }
    }

    pub fn used(&self, e: EdgeId) -> u32 {
        self.used[e.0]
    }

    pub fn has_free_slot(&self, topo: &NetworkTopology, e: EdgeId) -> bool {
        self.used[e.0] < topo.edge(e).weight
    }

    pub fn is_active(&self, owner: u64) -> bool {
        self.active.contains(&owner)
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty() && self.used.iter().all(|u| *u == 0)
    }

    pub fn occupy(&mut self, topo: &NetworkTopology, r: &PathReservation) -> Result<()> {
        if self.active.contains(&r.owner) {
            return invariant(format!("channel {} is already active", r.owner));
        }
        if let Some(e) = r.edges.iter().find(|e| !self.has_free_slot(topo, **e)) {
            return invariant(format!(
                "edge {} is full ({} of {})",
                e.0,
                self.used[e.0],
                topo.edge(*e).weight
            ));
        }
        for e in &r.edges {
            self.used[e.0] += 1;
        }
        self.active.insert(r.owner);
        Ok(())
    }

    pub fn release(&mut self, r: &PathReservation) -> Result<()> {
        if !self.active.remove(&r.owner) {
            return invariant(format!("channel {} released while inactive", r.owner));
        }
        for e in &r.edges {
            if self.used[e.0] == 0 {
                return invariant(format!("edge {} slot underflow", e.0));
            }
            self.used[e.0] -= 1;
        }
        Ok(())
    }
}

/// Shortest path between two QPUs over edges that still have a free slot.
///
/// Intermediate hops are switches only. Among equally short paths the one
/// with the lexicographically smallest node-id sequence wins.
pub fn find_available_path(
    topo: &NetworkTopology,
    occ: &Occupancy,
    a: QpuId,
    b: QpuId,
    owner: u64,
) -> Option<PathReservation> {
    if a == b || !topo.is_qpu(a.node()) || !topo.is_qpu(b.node()) {
        return None;
    }
    let (src, dst) = (a.node(), b.node());
    let passable = |n: NodeId| n == src || n == dst || !topo.is_qpu(n);

    let mut dist = vec![usize::MAX; topo.num_nodes()];
    dist[dst.0] = 0;
    let mut queue = VecDeque::from([dst]);
    while let Some(n) = queue.pop_front() {
        if n == src {
            break;
        }
        if n != dst && topo.is_qpu(n) {
            continue;
        }
        for (m, e) in topo.neighbors(n) {
            if dist[m.0] == usize::MAX && passable(*m) && occ.has_free_slot(topo, *e) {
                dist[m.0] = dist[n.0] + 1;
                queue.push_back(*m);
            }
        }
    }
    if dist[src.0] == usize::MAX {
        return None;
    }

    let mut nodes = vec![src];
    let mut edges = Vec::new();
    let mut cur = src;
    while cur != dst {
        let (next, e) = topo
            .neighbors(cur)
            .iter()
            .filter(|(m, e)| {
                dist[m.0] != usize::MAX
                    && dist[m.0] + 1 == dist[cur.0]
                    && occ.has_free_slot(topo, *e)
            })
            .min()
            .copied()?;
        nodes.push(next);
        edges.push(e);
        cur = next;
    }
    Some(PathReservation {
        owner,
        nodes,
        edges,
        requires_reconfig: true,
    })
}
