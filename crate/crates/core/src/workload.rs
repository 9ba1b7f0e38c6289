//! EPR demand lists: simplified benchmark generators and the demand file.
//!
//! The generators stand in for an upstream distributed-circuit compiler.
//! They emit the two-qubit gate skeleton of each benchmark, place qubits in
//! blocks, and turn every remote interaction into a demand. Absolute demand
//! counts therefore differ from those of a real compiler.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config, QdcError, Result};
use crate::topology::{NetworkTopology, QpuId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Remote gate block executed without moving data.
    Cat,
    /// Teleport a data qubit from `source` to `dest`.
    Tp { source: QpuId, dest: QpuId },
}

/// Where a demand came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Program,
    PostSplitCross(usize),
    PostSplitInRack(usize),
    DistillCopy(usize),
}

impl Origin {
    pub fn parent(&self) -> Option<usize> {
        match *self {
            Origin::Program => None,
            Origin::PostSplitCross(p) | Origin::PostSplitInRack(p) | Origin::DistillCopy(p) => {
                Some(p)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EprDemand {
    pub id: usize,
    pub qpu_a: QpuId,
    pub qpu_b: QpuId,
    pub protocol: Protocol,
    pub origin: Origin,
}

impl EprDemand {
    pub fn cat(id: usize, a: usize, b: usize) -> Self {
        EprDemand {
            id,
            qpu_a: QpuId(a),
            qpu_b: QpuId(b),
            protocol: Protocol::Cat,
            origin: Origin::Program,
        }
    }

    pub fn tp(id: usize, source: usize, dest: usize) -> Self {
        EprDemand {
            id,
            qpu_a: QpuId(source),
            qpu_b: QpuId(dest),
            protocol: Protocol::Tp {
                source: QpuId(source),
                dest: QpuId(dest),
            },
            origin: Origin::Program,
        }
    }

    pub fn qpus(&self) -> [QpuId; 2] {
        [self.qpu_a, self.qpu_b]
    }

    pub fn touches(&self, q: QpuId) -> bool {
        self.qpu_a == q || self.qpu_b == q
    }

    pub fn overlaps(&self, other: &EprDemand) -> bool {
        self.touches(other.qpu_a) || self.touches(other.qpu_b)
    }

    /// Unordered QPU pair, smaller id first.
    pub fn pair_key(&self) -> (QpuId, QpuId) {
        (self.qpu_a.min(self.qpu_b), self.qpu_a.max(self.qpu_b))
    }

    pub fn validate(&self, topo: &NetworkTopology) -> Result<()> {
        topo.check_qpu(self.qpu_a)?;
        topo.check_qpu(self.qpu_b)?;
        if self.qpu_a == self.qpu_b {
            return config(format!("demand {} pairs QPU {} with itself", self.id, self.qpu_a));
        }
        if let Protocol::Tp { source, dest } = self.protocol {
            let ends = [source, dest];
            if source == dest || !ends.contains(&self.qpu_a) || !ends.contains(&self.qpu_b) {
                return config(format!(
                    "demand {}: TP endpoints must be the demand's two QPUs",
                    self.id
                ));
            }
        }
        Ok(())
    }
}

/// Checks a demand list against a topology: valid QPUs and ids `0..n`.
pub fn validate_demands(topo: &NetworkTopology, demands: &[EprDemand]) -> Result<()> {
    for (i, d) in demands.iter().enumerate() {
        if d.id != i {
            return config(format!("demand at position {i} carries id {}", d.id));
        }
        if d.origin != Origin::Program {
            return config(format!("demand {i} is not a program demand"));
        }
        d.validate(topo)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub qpu: QpuId,
    pub local: u32,
}

/// Program qubit index to physical location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub slots: Vec<Slot>,
}

impl Placement {
    pub fn qpu_of(&self, qubit: usize) -> QpuId {
        self.slots[qubit].qpu
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Block placement: fill QPUs in id order, rack by rack.
pub fn place_qubits(n_qubits: usize, topo: &NetworkTopology) -> Result<Placement> {
    let capacity: usize = topo.qpus().map(|q| topo.qpu_spec(q).data_qubits as usize).sum();
    if n_qubits > capacity {
        return config(format!(
            "{n_qubits} program qubits exceed the {capacity} data qubits available"
        ));
    }
    let mut slots = Vec::with_capacity(n_qubits);
    'fill: for rack in topo.racks() {
        for &q in &rack.qpus {
            for local in 0..topo.qpu_spec(q).data_qubits {
                if slots.len() == n_qubits {
                    break 'fill;
                }
                slots.push(Slot { qpu: q, local });
            }
        }
    }
    Ok(Placement { slots })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkKind {
    Mct,
    Qft,
    Grover,
    Rca,
}

impl std::str::FromStr for BenchmarkKind {
    type Err = QdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mct" => Ok(BenchmarkKind::Mct),
            "qft" => Ok(BenchmarkKind::Qft),
            "grover" => Ok(BenchmarkKind::Grover),
            "rca" => Ok(BenchmarkKind::Rca),
            other => config(format!("unknown benchmark kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    /// Controlled gate, `(control, target)`.
    Controlled(usize, usize),
    Swap(usize, usize),
}

/// Toffoli ladder over adjacent triples, computed then uncomputed.
fn mct_ladder(n: usize, out: &mut Vec<Gate>) {
    if n == 2 {
        out.push(Gate::Controlled(0, 1));
        return;
    }
    let toffoli = |a: usize, b: usize, c: usize, out: &mut Vec<Gate>| {
        use Gate::Controlled as Cx;
        out.extend([Cx(b, c), Cx(a, c), Cx(b, c), Cx(a, c), Cx(a, b), Cx(a, b)]);
    };
    for i in 0..n - 2 {
        toffoli(i, i + 1, i + 2, out);
    }
    for i in (0..n - 2).rev() {
        toffoli(i, i + 1, i + 2, out);
    }
}

/// Two-qubit gate skeleton of a benchmark.
pub fn benchmark_gates(kind: BenchmarkKind, n: usize, iterations: usize) -> Result<Vec<Gate>> {
    if n < 2 {
        return config("workload.qubits must be at least 2");
    }
    if iterations < 1 {
        return config("workload.iterations must be at least 1");
    }
    let mut g = Vec::new();
    match kind {
        BenchmarkKind::Mct => mct_ladder(n, &mut g),
        BenchmarkKind::Qft => {
            for i in 0..n {
                for j in i + 1..n {
                    g.push(Gate::Controlled(j, i));
                }
            }
            for i in 0..n / 2 {
                g.push(Gate::Swap(i, n - 1 - i));
            }
        }
        BenchmarkKind::Grover => {
            for _ in 0..iterations {
                mct_ladder(n, &mut g);
                mct_ladder(n, &mut g);
            }
        }
        BenchmarkKind::Rca => {
            for _ in 0..iterations {
                for i in 0..n - 1 {
                    g.push(Gate::Controlled(i, i + 1));
                }
                for i in (0..n - 1).rev() {
                    g.push(Gate::Controlled(i, i + 1));
                }
            }
        }
    }
    Ok(g)
}

/// Turns a gate list into demands under a placement.
///
/// A maximal run of consecutive remote controlled gates on the same
/// ordered `(control, target)` pair becomes one Cat demand from the
/// control's QPU. A remote swap becomes a TP pair that moves the qubit with
/// the lower location to its partner's QPU and back.
pub fn demands_from_gates(gates: &[Gate], placement: &Placement) -> Result<Vec<EprDemand>> {
    for g in gates {
        let (a, b) = match *g {
            Gate::Controlled(a, b) | Gate::Swap(a, b) => (a, b),
        };
        if a >= placement.len() || b >= placement.len() || a == b {
            return config(format!("gate {g:?} references invalid qubits"));
        }
    }
    let mut out: Vec<EprDemand> = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for g in gates {
        match *g {
            Gate::Controlled(c, t) => {
                let (qc, qt) = (placement.qpu_of(c), placement.qpu_of(t));
                if qc == qt {
                    run = None;
                    continue;
                }
                if run != Some((c, t)) {
                    out.push(EprDemand::cat(out.len(), qc.0, qt.0));
                    run = Some((c, t));
                }
            }
            Gate::Swap(a, b) => {
                run = None;
                let (sa, sb) = (placement.slots[a], placement.slots[b]);
                if sa.qpu == sb.qpu {
                    continue;
                }
                let (mover, partner) = if (sa.qpu, sa.local) < (sb.qpu, sb.local) {
                    (sa.qpu, sb.qpu)
                } else {
                    (sb.qpu, sa.qpu)
                };
                out.push(EprDemand::tp(out.len(), mover.0, partner.0));
                out.push(EprDemand::tp(out.len(), partner.0, mover.0));
            }
        }
    }
    Ok(out)
}

pub fn generate_benchmark(
    kind: BenchmarkKind,
    n_qubits: usize,
    iterations: usize,
    placement: &Placement,
) -> Result<Vec<EprDemand>> {
    if n_qubits > placement.len() {
        return config(format!(
            "placement covers {} qubits, benchmark needs {n_qubits}",
            placement.len()
        ));
    }
    demands_from_gates(&benchmark_gates(kind, n_qubits, iterations)?, placement)
}

/// Parses `id qpu_a qpu_b CAT [- -]` and `id qpu_a qpu_b TP src dst`
/// records. Ids are reassigned by file order.
pub fn parse_demands(text: &str) -> Result<Vec<EprDemand>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| QdcError::Parse { line: line_no, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(perr("expected `id qpu_a qpu_b CAT|TP [src dst]`".into()));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| perr(format!("expected a QPU id, found '{s}'")))
        };
        num(toks[0])?;
        let (a, b) = (num(toks[1])?, num(toks[2])?);
        if a == b {
            return Err(perr(format!("qpu_a and qpu_b are both {a}")));
        }
        let id = out.len();
        let d = match toks[3].to_ascii_uppercase().as_str() {
            "CAT" => {
                if !(toks.len() == 4 || (toks.len() == 6 && toks[4] == "-" && toks[5] == "-")) {
                    return Err(perr("CAT record takes no direction".into()));
                }
                EprDemand::cat(id, a, b)
            }
            "TP" => {
                if toks.len() != 6 {
                    return Err(perr("TP record needs `src dst`".into()));
                }
                let (s, t) = (num(toks[4])?, num(toks[5])?);
                if !((s == a && t == b) || (s == b && t == a)) {
                    return Err(perr("TP src/dst must be the record's two QPUs".into()));
                }
                EprDemand {
                    id,
                    qpu_a: QpuId(a),
                    qpu_b: QpuId(b),
                    protocol: Protocol::Tp {
                        source: QpuId(s),
                        dest: QpuId(t),
                    },
                    origin: Origin::Program,
                }
            }
            other => return Err(perr(format!("unknown protocol '{other}'"))),
        };
        out.push(d);
    }
    Ok(out)
}

pub fn format_demands(demands: &[EprDemand]) -> String {
    let mut s = String::from("# id qpu_a qpu_b protocol [src dst]\n");
    for d in demands {
        match d.protocol {
            Protocol::Cat => writeln!(s, "{} {} {} CAT", d.id, d.qpu_a, d.qpu_b),
            Protocol::Tp { source, dest } => {
                writeln!(s, "{} {} {} TP {} {}", d.id, d.qpu_a, d.qpu_b, source, dest)
            }
        }
        .expect("writing to a String cannot fail");
    }
    s
}

pub fn parse_demand_file(path: &Path) -> Result<Vec<EprDemand>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| QdcError::Io(format!("{}: {e}", path.display())))?;
    parse_demands(&text)
}

pub fn write_demand_file(demands: &[EprDemand], path: &Path) -> Result<()> {
    std::fs::write(path, format_demands(demands))
        .map_err(|e| QdcError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_topology, QpuSpec, TopologyKind, TopologyParams};

    fn topo(racks: usize, per: usize, data: u32) -> NetworkTopology {
        build_topology(TopologyParams {
            kind: TopologyKind::Clos,
            num_racks: racks,
            qpus_per_rack: per,
            qpu_spec: QpuSpec {
                data_qubits: data,
                buffer_qubits: 4,
                comm_qubits: 2,
            },
            edge_weight: 1,
            bsms_per_tor: None,
        })
        .unwrap()
    }

    #[test]
    fn block_placement_fills_in_order() {
        let t = topo(1, 2, 2);
        let p = place_qubits(4, &t).unwrap();
        let qpus: Vec<usize> = (0..4).map(|i| p.qpu_of(i).0).collect();
        assert_eq!(qpus, vec![0, 0, 1, 1]);
        assert!(place_qubits(5, &t).is_err());
    }

    #[test]
    fn table_scale_placement() {
        let t = topo(4, 4, 30);
        let p = place_qubits(480, &t).unwrap();
        for q in 0..16 {
            assert_eq!(p.slots.iter().filter(|s| s.qpu.0 == q).count(), 30);
        }
    }

    #[test]
    fn local_qft_has_no_demands() {
        let t = topo(1, 2, 4);
        let p = place_qubits(2, &t).unwrap();
        assert!(generate_benchmark(BenchmarkKind::Qft, 2, 1, &p).unwrap().is_empty());
    }

    #[test]
    fn local_rca_has_no_demands() {
        let t = topo(1, 1, 30);
        let p = place_qubits(20, &t).unwrap();
        assert!(generate_benchmark(BenchmarkKind::Rca, 20, 100, &p).unwrap().is_empty());
    }

    #[test]
    fn qft_four_qubits_over_two_qpus() {
        // CP(j, i) for i < j; remote when exactly one of i, j is in {0, 1}.
        // Pairs: (2,0) (3,0) (2,1) (3,1), then swaps (0,3) and (1,2).
        let t = topo(1, 2, 2);
        let p = place_qubits(4, &t).unwrap();
        let d = generate_benchmark(BenchmarkKind::Qft, 4, 1, &p).unwrap();
        let cats = d.iter().filter(|x| x.protocol == Protocol::Cat).count();
        let tps = d.len() - cats;
        assert_eq!(cats, 4);
        assert_eq!(tps, 4);
        assert!(d[..4].iter().all(|x| x.qpu_a == QpuId(1) && x.qpu_b == QpuId(0)));
        assert_eq!(d[4].protocol, Protocol::Tp { source: QpuId(0), dest: QpuId(1) });
        assert_eq!(d[5].protocol, Protocol::Tp { source: QpuId(1), dest: QpuId(0) });
    }

    #[test]
    fn consecutive_same_pair_gates_merge() {
        let t = topo(1, 2, 2);
        let p = place_qubits(4, &t).unwrap();
        let gates = [
            Gate::Controlled(0, 2),
            Gate::Controlled(0, 2),
            Gate::Controlled(2, 0),
            Gate::Controlled(0, 1),
            Gate::Controlled(0, 2),
        ];
        let d = demands_from_gates(&gates, &p).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!((d[0].qpu_a, d[0].qpu_b), (QpuId(0), QpuId(1)));
        assert_eq!((d[1].qpu_a, d[1].qpu_b), (QpuId(1), QpuId(0)));
    }

    #[test]
    fn unknown_benchmark_kind() {
        assert!("bogus".parse::<BenchmarkKind>().is_err());
        assert_eq!("grover".parse::<BenchmarkKind>().unwrap(), BenchmarkKind::Grover);
    }

    #[test]
    fn demand_file_round_trip() {
        let list = vec![
            EprDemand::cat(0, 0, 2),
            EprDemand::tp(1, 1, 3),
            EprDemand {
                id: 2,
                qpu_a: QpuId(3),
                qpu_b: QpuId(1),
                protocol: Protocol::Tp {
                    source: QpuId(1),
                    dest: QpuId(3),
                },
                origin: Origin::Program,
            },
        ];
        assert_eq!(parse_demands(&format_demands(&list)).unwrap(), list);
    }

    #[test]
    fn empty_demand_file() {
        assert!(parse_demands("").unwrap().is_empty());
        assert!(parse_demands("# nothing\n\n").unwrap().is_empty());
    }

    #[test]
    fn self_pair_record_rejected_with_line() {
        let err = parse_demands("0 0 1 CAT\n1 2 2 CAT\n").unwrap_err();
        assert!(matches!(err, QdcError::Parse { line: 2, .. }));
    }

    #[test]
    fn ids_follow_file_order() {
        let d = parse_demands("7 0 1 CAT\n3 1 2 CAT - -\n").unwrap();
        assert_eq!(d[0].id, 0);
        assert_eq!(d[1].id, 1);
    }

    #[test]
    fn bad_tp_direction_rejected() {
        assert!(parse_demands("0 0 1 TP 0 2\n").is_err());
        assert!(parse_demands("0 0 1 TP 0\n").is_err());
        assert!(parse_demands("0 0 1 XX\n").is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn demand() -> impl Strategy<Value = (usize, usize, u8)> {
            (0usize..6, 0usize..6, 0u8..3).prop_filter("distinct", |(a, b, _)| a != b)
        }

        proptest! {
            #[test]
            fn format_parse_identity(raw in proptest::collection::vec(demand(), 0..40)) {
                let list: Vec<EprDemand> = raw
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b, k))| match k {
                        0 => EprDemand::cat(i, a, b),
                        1 => EprDemand::tp(i, a, b),
                        _ => EprDemand {
                            id: i,
                            qpu_a: QpuId(a),
                            qpu_b: QpuId(b),
                            protocol: Protocol::Tp { source: QpuId(b), dest: QpuId(a) },
                            origin: Origin::Program,
                        },
                    })
                    .collect();
                prop_assert_eq!(parse_demands(&format_demands(&list)).unwrap(), list);
            }

            #[test]
            fn merging_keeps_per_pair_order(
                gates in proptest::collection::vec((0usize..6, 0usize..6), 0..60)
            ) {
                // Brute-force oracle: the sequence of remote ordered qubit pairs with
                // immediate repeats collapsed must match the emitted demands.
                let t = {
                    use crate::topology::*;
                    build_topology(TopologyParams {
                        kind: TopologyKind::Clos,
                        num_racks: 3,
                        qpus_per_rack: 1,
                        qpu_spec: QpuSpec { data_qubits: 2, buffer_qubits: 2, comm_qubits: 1 },
                        edge_weight: 1,
                        bsms_per_tor: None,
                    }).unwrap()
                };
                let p = place_qubits(6, &t).unwrap();
                let gs: Vec<Gate> = gates
                    .iter()
                    .filter(|(a, b)| a != b)
                    .map(|&(a, b)| Gate::Controlled(a, b))
                    .collect();
                let mut expect = Vec::new();
                let mut prev: Option<(usize, usize)> = None;
                for g in &gs {
                    let Gate::Controlled(a, b) = *g else { unreachable!() };
                    if a / 2 == b / 2 { prev = None; continue; }
                    if prev != Some((a, b)) { expect.push((a / 2, b / 2)); }
                    prev = Some((a, b));
                }
                let got: Vec<(usize, usize)> = demands_from_gates(&gs, &p)
                    .unwrap()
                    .iter()
                    .map(|d| (d.qpu_a.0, d.qpu_b.0))
                    .collect();
                prop_assert_eq!(got, expect);
            }
        }
    }
}
