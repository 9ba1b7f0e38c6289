//! Generation latency, pair fidelity and distillation models.

use crate::error::{config, Result};

/// Parameters of the heralded-generation model used in stochastic mode.
///
/// Each attempt succeeds with probability `2 * alpha * eta` and takes
/// `tau0_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticParams {
    pub alpha: f64,
    pub eta_in_rack: f64,
    pub eta_cross: f64,
    pub tau0_ms: f64,
    pub seed: u64,
}

impl Default for StochasticParams {
    fn default() -> Self {
        StochasticParams {
            alpha: 0.05,
            eta_in_rack: 0.1,
            eta_cross: 0.001,
            tau0_ms: 0.001,
            seed: 0,
        }
    }
}

impl StochasticParams {
    pub fn success_probability(&self, cross_rack: bool) -> f64 {
        let eta = if cross_rack { self.eta_cross } else { self.eta_in_rack };
        2.0 * self.alpha * eta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub t_in_rack_ms: f64,
    pub t_reconfig_ms: f64,
    pub t_cross_rack_ms: f64,
    /// `Some` switches generation latency to sampled attempt counts.
    pub stochastic: Option<StochasticParams>,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            t_in_rack_ms: 0.1,
            t_reconfig_ms: 1.0,
            t_cross_rack_ms: 10.0,
            stochastic: None,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_in_rack_ms", self.t_in_rack_ms),
            ("t_reconfig_ms", self.t_reconfig_ms),
            ("t_cross_rack_ms", self.t_cross_rack_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return config(format!("{name} must be a positive duration, got {v}"));
            }
        }
        if let Some(s) = &self.stochastic {
            for cross in [false, true] {
                let eta = if cross { s.eta_cross } else { s.eta_in_rack };
                epr_mean_latency(s.alpha, eta, s.tau0_ms)?;
            }
        }
        Ok(())
    }

    /// Mean generation latency for one pair.
    pub fn generation_ms(&self, cross_rack: bool) -> f64 {
        if cross_rack {
            self.t_cross_rack_ms
        } else {
            self.t_in_rack_ms
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityModel {
    pub f_in_rack: f64,
    pub f_cross_rack: f64,
}

impl Default for FidelityModel {
    fn default() -> Self {
        FidelityModel {
            f_in_rack: 0.95,
            f_cross_rack: 0.85,
        }
    }
}

impl FidelityModel {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("f_in_rack", self.f_in_rack), ("f_cross_rack", self.f_cross_rack)] {
            if !(f > 0.0 && f <= 1.0) {
                return config(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        Ok(())
    }

    /// Fidelity of an in-rack pair after pumping with `k` copies in total.
    pub fn distilled(&self, k: u32) -> Result<f64> {
        Ok(distill_werner(self.f_in_rack, k)?.0)
    }
}

/// Mean time to a successful heralded generation: `tau0 / (2 alpha eta)`.
pub fn epr_mean_latency(alpha: f64, eta: f64, tau0: f64) -> Result<f64> {
    let p = 2.0 * alpha * eta;
    if !(p > 0.0 && p <= 1.0) {
        return config(format!(
            "success probability 2*alpha*eta = {p} must lie in (0, 1]"
        ));
    }
    if !(tau0 > 0.0 && tau0.is_finite()) {
        return config(format!("tau0 must be positive, got {tau0}"));
    }
    Ok(tau0 / p)
}

/// One pumping round: a Werner pair of fidelity `acc` is purified with a
/// fresh Werner pair of fidelity `fresh` via bilateral CNOT and
/// coincidence post-selection. Returns `(output fidelity, success prob)`.
pub fn distill_step(acc: f64, fresh: f64) -> (f64, f64) {
    let x = (1.0 - acc) / 3.0;
    let y = (1.0 - fresh) / 3.0;
    let p = acc * fresh + acc * y + x * fresh + 5.0 * x * y;
    ((acc * fresh + x * y) / p, p)
}

/// Pumps `k - 1` fresh copies of fidelity `f` into one pair, returning the
/// final fidelity and the probability that every round succeeds.
pub fn distill_werner(f: f64, k: u32) -> Result<(f64, f64)> {
    if !(f > 0.5 && f <= 1.0) {
        return config(format!("distillation needs 0.5 < f <= 1, got {f}"));
    }
    if k < 1 {
        return config("distillation needs at least one copy");
    }
    let (mut fid, mut success) = (f, 1.0);
    for _ in 1..k {
        let (next, p) = distill_step(fid, f);
        fid = next;
        success *= p;
    }
    Ok((fid, success))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn rate_formula_in_rack_and_cross() {
        // 1 µs attempt period, expressed in ms.
        let t_in = epr_mean_latency(0.05, 0.1, 1e-3).unwrap();
        let t_cross = epr_mean_latency(0.05, 0.001, 1e-3).unwrap();
        assert!(close(t_in, 0.1, 1e-12), "{t_in}");
        assert!(close(t_cross, 10.0, 1e-12), "{t_cross}");
        assert!(close(t_cross / t_in, 100.0, 1e-12));
    }

    #[test]
    fn rate_formula_unit_probability() {
        assert_eq!(epr_mean_latency(0.5, 1.0, 1e-3).unwrap(), 1e-3);
    }

    #[test]
    fn rate_formula_domain() {
        assert!(epr_mean_latency(0.0, 0.1, 1e-3).is_err());
        assert!(epr_mean_latency(0.6, 1.0, 1e-3).is_err());
        assert!(epr_mean_latency(0.05, 0.1, 0.0).is_err());
    }

    #[test]
    fn two_copy_distillation_values() {
        let (f, p) = distill_werner(0.95, 2).unwrap();
        // Hand evaluation with x = y = 0.05/3.
        let x: f64 = 0.05 / 3.0;
        let p_hand = 0.95 * 0.95 + 2.0 * 0.95 * x + 5.0 * x * x;
        let f_hand = (0.95 * 0.95 + x * x) / p_hand;
        assert!(close(f, f_hand, 1e-14));
        assert!(close(p, p_hand, 1e-14));
        assert!((0.9645..=0.9655).contains(&f));
        assert!((0.935..=0.937).contains(&p));
    }

    #[test]
    fn single_copy_is_identity() {
        assert_eq!(distill_werner(0.9, 1).unwrap(), (0.9, 1.0));
    }

    #[test]
    fn diverging_input_rejected() {
        assert!(distill_werner(0.5, 2).is_err());
        assert!(distill_werner(0.3, 2).is_err());
        assert!(distill_werner(0.9, 0).is_err());
    }

    #[test]
    fn perfect_pairs_stay_perfect() {
        let (f, p) = distill_werner(1.0, 5).unwrap();
        assert_eq!((f, p), (1.0, 1.0));
    }

    #[test]
    fn distilled_weight_inputs() {
        let m = FidelityModel::default();
        assert!(m.distilled(2).unwrap() > m.f_in_rack);
    }

    #[test]
    fn model_validation() {
        let mut l = LatencyModel::default();
        assert!(l.validate().is_ok());
        l.t_reconfig_ms = 0.0;
        assert!(l.validate().is_err());
        let l = LatencyModel {
            stochastic: Some(StochasticParams {
                alpha: 0.6,
                eta_in_rack: 1.0,
                ..Default::default()
            }),
            ..Default::default()
        };
        assert!(l.validate().is_err());
        let f = FidelityModel {
            f_in_rack: 1.2,
            f_cross_rack: 0.85,
        };
        assert!(f.validate().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pumping_improves_above_half(f in 0.6f64..0.999, k in 2u32..8) {
                let (out, p) = distill_werner(f, k).unwrap();
                prop_assert!(out >= f);
                prop_assert!(out <= 1.0);
                prop_assert!(p > 0.0 && p <= 1.0);
            }

            #[test]
            fn success_probability_decreases_with_rounds(f in 0.6f64..0.999, k in 1u32..8) {
                let (_, p1) = distill_werner(f, k).unwrap();
                let (_, p2) = distill_werner(f, k + 1).unwrap();
                prop_assert!(p2 <= p1);
            }
        }
    }
}
