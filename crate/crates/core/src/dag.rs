//! Overlap-dependency DAG over demands.
//!
//! A demand depends on an earlier one when their QPU pairs share a QPU.
//! Only the transitive reduction of that relation is stored. Node ids are
//! work ids: program demands first, post-split members appended later.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{invariant, Result};
use crate::workload::EprDemand;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DemandDag {
    preds: BTreeMap<usize, BTreeSet<usize>>,
    succs: BTreeMap<usize, BTreeSet<usize>>,
    front: BTreeSet<usize>,
}

/// Builds the reduced overlap DAG. Each demand's only candidate parents
/// are the latest earlier demands on each of its two QPUs; the older
/// candidate is dropped when it already reaches the newer one.
pub fn build_dag(demands: &[EprDemand]) -> DemandDag {
    let mut dag = DemandDag::default();
    let mut last: BTreeMap<usize, usize> = BTreeMap::new();
    for (v, d) in demands.iter().enumerate() {
        dag.add_node(v);
        let mut cands: Vec<usize> = [d.qpu_a.0, d.qpu_b.0]
            .iter()
            .filter_map(|q| last.get(q).copied())
            .collect();
        cands.sort_unstable();
        cands.dedup();
        if cands.len() == 2 && dag.reaches(cands[0], cands[1]) {
            cands.remove(0);
        }
        for u in cands {
            dag.add_edge(u, v);
        }
        last.insert(d.qpu_a.0, v);
        last.insert(d.qpu_b.0, v);
    }
    dag
}

impl DemandDag {
    fn add_node(&mut self, id: usize) {
        self.preds.entry(id).or_default();
        self.succs.entry(id).or_default();
        self.front.insert(id);
    }

    fn add_edge(&mut self, u: usize, v: usize) {
        self.succs.get_mut(&u).expect("present").insert(v);
        self.preds.get_mut(&v).expect("present").insert(u);
        self.front.remove(&v);
    }

    /// Whether `to` is reachable from `from`. Ids grow along edges created
    /// by [`build_dag`], so the search never descends past `to`.
    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if n > to || !seen.insert(n) {
                continue;
            }
            stack.extend(self.succs[&n].iter().copied());
        }
        false
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.preds.contains_key(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.preds.keys().copied()
    }

    pub fn preds(&self, id: usize) -> Option<&BTreeSet<usize>> {
        self.preds.get(&id)
    }

    pub fn succs(&self, id: usize) -> Option<&BTreeSet<usize>> {
        self.succs.get(&id)
    }

    pub fn is_front(&self, id: usize) -> bool {
        self.front.contains(&id)
    }

    /// Nodes without predecessors, ascending.
    pub fn front_layer(&self) -> Vec<usize> {
        self.front.iter().copied().collect()
    }

    pub fn edge_count(&self) -> usize {
        self.succs.values().map(|s| s.len()).sum()
    }

    /// Longest-path depth of every node.
    pub fn layers(&self) -> BTreeMap<usize, usize> {
        self.peel(usize::MAX).into_iter().collect()
    }

    /// Kahn peel that stops after `max_layers` layers.
    fn peel(&self, max_layers: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
        let mut layer: Vec<usize> = self.front.iter().copied().collect();
        let mut depth = 0;
        while !layer.is_empty() && depth < max_layers {
            let mut next = Vec::new();
            for &n in &layer {
                out.push((n, depth));
                for &s in &self.succs[&n] {
                    let left = remaining.entry(s).or_insert_with(|| self.preds[&s].len());
                    *left -= 1;
                    if *left == 0 {
                        next.push(s);
                    }
                }
            }
            next.sort_unstable();
            layer = next;
            depth += 1;
        }
        out
    }

    /// `(id, layer)` for every node in the first `l` layers, ordered by
    /// `(layer, id)`.
    pub fn lookahead_subgraph(&self, l: usize) -> Vec<(usize, usize)> {
        self.peel(l)
    }

    /// Removes a node whose predecessors have all been removed.
    pub fn remove_scheduled(&mut self, id: usize) -> Result<()> {
        match self.preds.get(&id) {
            None => return invariant(format!("demand {id} is not in the DAG")),
            Some(p) if !p.is_empty() => {
                return invariant(format!(
                    "demand {id} scheduled before its predecessors {p:?}"
                ))
            }
            _ => {}
        }
        self.detach(id);
        Ok(())
    }

    /// Removes a node regardless of predecessors, linking each of its
    /// predecessors to each of its successors.
    pub fn remove_forced(&mut self, id: usize) -> Result<()> {
        let Some(preds) = self.preds.get(&id).cloned() else {
            return invariant(format!("demand {id} is not in the DAG"));
        };
        let succs = self.succs[&id].clone();
        self.detach(id);
        for &p in &preds {
            for &s in &succs {
                self.add_edge(p, s);
            }
        }
        Ok(())
    }

    fn detach(&mut self, id: usize) {
        let preds = self.preds.remove(&id).unwrap_or_default();
        let succs = self.succs.remove(&id).unwrap_or_default();
        self.front.remove(&id);
        for p in preds {
            self.succs.get_mut(&p).expect("present").remove(&id);
        }
        for s in succs {
            let ps = self.preds.get_mut(&s).expect("present");
            ps.remove(&id);
            if ps.is_empty() {
                self.front.insert(s);
            }
        }
    }

    /// Adds a node with edges from `preds` and to `succs`; absent ids are
    /// skipped.
    pub fn insert(&mut self, id: usize, preds: &[usize], succs: &[usize]) -> Result<()> {
        if self.contains(id) {
            return invariant(format!("demand {id} inserted twice"));
        }
        self.add_node(id);
        for &p in preds {
            if self.contains(p) {
                self.add_edge(p, id);
            }
        }
        for &s in succs {
            if self.contains(s) {
                self.add_edge(id, s);
            }
        }
        Ok(())
    }

    /// Replaces node `id` by its post-split in-rack members. The cross
    /// member is scheduled at split time and never enters the DAG.
    /// Members inherit the predecessors of `id`; successors of `id` wait
    /// for every member.
    pub fn apply_split(&mut self, id: usize, cross_rack: bool, in_rack_members: &[usize]) -> Result<()> {
        if !cross_rack {
            return invariant(format!("demand {id} is in-rack and cannot be split"));
        }
        let Some(preds) = self.preds.get(&id).cloned() else {
            return invariant(format!("demand {id} is not in the DAG"));
        };
        let succs: Vec<usize> = self.succs[&id].iter().copied().collect();
        let preds: Vec<usize> = preds.into_iter().collect();
        self.detach(id);
        for &m in in_rack_members {
            self.insert(m, &preds, &succs)?;
        }
        Ok(())
    }

    /// `u v` per line, for debugging.
    pub fn edge_list(&self) -> String {
        let mut s = String::new();
        for (u, vs) in &self.succs {
            for v in vs {
                writeln!(s, "{u} {v}").expect("writing to a String cannot fail");
            }
        }
        s
    }
}
