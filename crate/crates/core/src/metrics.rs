//! Run metrics: latency and wait time in units of the reconfiguration
//! latency, and an infidelity-weighted EPR pair count.

use crate::engine::{PairCategory, Timeline};
use crate::models::{FidelityModel, LatencyModel};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub makespan_ms: f64,
    /// Makespan over the reconfiguration latency.
    pub normalized_latency: f64,
    /// Sum of `pair_weight` over every generated pair.
    pub weighted_epr: f64,
    /// Mean buffer time of consumed pairs over the reconfiguration latency.
    pub avg_wait: f64,
    pub cross_pairs: usize,
    pub in_rack_pairs: usize,
    pub distilled_pairs: usize,
}

impl MetricsReport {
    pub fn total_pairs(&self) -> usize {
        self.cross_pairs + self.in_rack_pairs + self.distilled_pairs
    }
}

/// Infidelity of `fidelity` relative to a cross-rack pair.
pub fn weight_of(fidelity: f64, model: &FidelityModel) -> f64 {
    (1.0 - fidelity) / (1.0 - model.f_cross_rack)
}

/// Weight of a pair category; distilled pairs use `k` copies.
pub fn pair_weight(category: PairCategory, model: &FidelityModel, k: u32) -> f64 {
    let f = match category {
        PairCategory::Cross => model.f_cross_rack,
        PairCategory::InRack => model.f_in_rack,
        PairCategory::Distilled => model.distilled(k).unwrap_or(model.f_in_rack),
    };
    weight_of(f, model)
}

pub fn compute_metrics(timeline: &Timeline, latency: &LatencyModel, fidelity: &FidelityModel) -> MetricsReport {
    let tr = latency.t_reconfig_ms;
    let makespan = timeline.makespan();
    let mut r = MetricsReport {
        makespan_ms: makespan,
        normalized_latency: makespan / tr,
        ..Default::default()
    };
    let mut wait_sum = 0.0;
    let mut consumed = 0usize;
    for p in &timeline.pairs {
        match p.category {
            PairCategory::Cross => r.cross_pairs += 1,
            PairCategory::InRack => r.in_rack_pairs += 1,
            PairCategory::Distilled => r.distilled_pairs += 1,
        }
        r.weighted_epr += weight_of(p.fidelity, fidelity);
        if let Some(c) = p.consumed_at {
            wait_sum += c - p.generated_at;
            consumed += 1;
        }
    }
    if consumed > 0 {
        r.avg_wait = wait_sum / consumed as f64 / tr;
    }
    r
}

/// Baseline latency over ours; 1.0 when either is zero.
pub fn improvement_factor(baseline: &MetricsReport, ours: &MetricsReport) -> f64 {
    if baseline.normalized_latency == 0.0 || ours.normalized_latency == 0.0 {
        return 1.0;
    }
    baseline.normalized_latency / ours.normalized_latency
}

/// Relative extra weighted EPR count of ours over the baseline.
pub fn epr_overhead(baseline: &MetricsReport, ours: &MetricsReport) -> f64 {
    if baseline.weighted_epr == 0.0 {
        return 0.0;
    }
    ours.weighted_epr / baseline.weighted_epr - 1.0
}

/// Extra average wait of ours over the baseline, in reconfiguration units.
pub fn additional_wait(baseline: &MetricsReport, ours: &MetricsReport) -> f64 {
    ours.avg_wait - baseline.avg_wait
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::PairRecord;
    use crate::topology::QpuId;
    use proptest::prelude::*;

    fn pair(category: PairCategory, fidelity: f64, gen: f64, used: Option<f64>) -> PairRecord {
        PairRecord {
            work: 0,
            category,
            qpus: (QpuId(0), QpuId(1)),
            generated_at: gen,
            consumed_at: used,
            fidelity,
        }
    }

    fn timeline(pairs: Vec<PairRecord>) -> Timeline {
        Timeline {
            events: Vec::new(),
            pairs,
            work: Vec::new(),
            t_reconfig_ms: 1.0,
        }
    }

    #[test]
    fn default_weights() {
        let m = FidelityModel::default();
        assert_eq!(pair_weight(PairCategory::Cross, &m, 2), 1.0);
        assert!((pair_weight(PairCategory::InRack, &m, 2) - 1.0 / 3.0).abs() < 1e-12);
        let d = pair_weight(PairCategory::Distilled, &m, 2);
        assert!((d - 0.233).abs() < 0.005, "{d}");
    }

    #[test]
    fn empty_timeline_is_all_zero() {
        let r = compute_metrics(&timeline(Vec::new()), &LatencyModel::default(), &FidelityModel::default());
        assert_eq!(r, MetricsReport::default());
    }

    #[test]
    fn immediate_consumption_has_no_wait() {
        let t = timeline(vec![pair(PairCategory::Cross, 0.85, 11.0, Some(11.0))]);
        let r = compute_metrics(&t, &LatencyModel::default(), &FidelityModel::default());
        assert_eq!(r.avg_wait, 0.0);
        assert_eq!(r.weighted_epr, 1.0);
    }

    #[test]
    fn improvement_examples() {
        let mk = |l| MetricsReport {
            normalized_latency: l,
            ..Default::default()
        };
        assert_eq!(improvement_factor(&mk(5.0), &mk(5.0)), 1.0);
        assert!((improvement_factor(&mk(25.3), &mk(12.4)) - 2.04).abs() < 0.005);
        assert!((improvement_factor(&mk(23.3), &mk(12.4)) - 1.88).abs() < 0.005);
        assert_eq!(improvement_factor(&mk(0.0), &mk(0.0)), 1.0);
    }

    proptest! {
        #[test]
        fn wait_is_translation_invariant(
            spans in proptest::collection::vec((0.0f64..50.0, 0.0f64..20.0), 1..20),
            shift in 0.0f64..1000.0,
        ) {
            let m = FidelityModel::default();
            let l = LatencyModel::default();
            let mk = |s: f64| timeline(spans.iter().map(|&(g, w)| {
                pair(PairCategory::InRack, 0.95, g + s, Some(g + w + s))
            }).collect());
            let a = compute_metrics(&mk(0.0), &l, &m).avg_wait;
            let b = compute_metrics(&mk(shift), &l, &m).avg_wait;
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn weighted_epr_is_additive(
            cats in proptest::collection::vec(0u8..3, 0..30),
            cut in 0usize..30,
        ) {
            let m = FidelityModel::default();
            let l = LatencyModel::default();
            let ps: Vec<PairRecord> = cats.iter().map(|c| match c {
                0 => pair(PairCategory::Cross, 0.85, 0.0, None),
                1 => pair(PairCategory::InRack, 0.95, 0.0, None),
                _ => pair(PairCategory::Distilled, 0.965, 0.0, None),
            }).collect();
            let cut = cut.min(ps.len());
            let whole = compute_metrics(&timeline(ps.clone()), &l, &m).weighted_epr;
            let left = compute_metrics(&timeline(ps[..cut].to_vec()), &l, &m).weighted_epr;
            let right = compute_metrics(&timeline(ps[cut..].to_vec()), &l, &m).weighted_epr;
            prop_assert!((whole - left - right).abs() < 1e-9);
        }
    }
}
