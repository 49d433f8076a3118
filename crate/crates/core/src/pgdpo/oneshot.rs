//! Controls computed directly from costates.
//!
//! Consumption inverts the marginal-utility condition `e^{−ρt} U'(C) = λ`.
//! Unconstrained weights are `−λ/(X ∂ₓλ) Σ⁻¹(μ − r1)`; constrained weights
//! come from the barrier Newton solve.

use rayon::prelude::*;

use crate::barrier::{solve_with_continuation, BarrierSolution, BarrierSystem, DEFAULT_TOL};
use crate::costate::CostateSample;
use crate::error::{PgdpoError, Result};
use crate::linalg_ad::cholesky_solve;
use crate::market::MarketParams;

/// Barrier weight used for constrained controls.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct OneShotControls {
    pub consumption: f64,
    /// Risky weights when unconstrained; full simplex weights otherwise.
    pub weights: Vec<f64>,
    pub barrier: Option<BarrierSolution>,
    pub slope_clamped: bool,
}

/// Precomputed data shared by all nodes of one evaluation.
#[derive(Debug, Clone)]
pub struct OneShotSolver<'a> {
    pub market: &'a MarketParams,
    pub gamma: f64,
    pub rho: f64,
    pub constrained: bool,
    pub epsilon: f64,
    /// `Σ⁻¹(μ − r1)`.
    direction: Vec<f64>,
}

impl<'a> OneShotSolver<'a> {
    pub fn new(market: &'a MarketParams, gamma: f64, rho: f64, constrained: bool, epsilon: f64) -> Self {
        OneShotSolver {
            market,
            gamma,
            rho,
            constrained,
            epsilon,
            direction: cholesky_solve(&market.chol, &market.excess_return()),
        }
    }

    pub fn controls(&self, t: f64, x: f64, lambda: f64, slope: f64, warm: Option<&[f64]>) -> Result<OneShotControls> {
        if !(lambda > 0.0) || !(x > 0.0) {
            return Err(PgdpoError::DomainError { index: 0, value: lambda });
        }
        let consumption = ((self.rho * t).exp() * lambda).powf(-1.0 / self.gamma);
        if self.constrained {
            let (sys, clamped) = BarrierSystem::new(self.market, lambda, slope, x, self.epsilon, self.gamma)?;
            let sol = solve_with_continuation(&sys, warm, DEFAULT_TOL)?;
            return Ok(OneShotControls {
                consumption,
                weights: sol.pi.clone(),
                barrier: Some(BarrierSolution {
                    slope_clamped: clamped,
                    ..sol
                }),
                slope_clamped: clamped,
            });
        }
        let clamped = !(slope < 0.0);
        let ratio = if clamped {
            log::debug!("non-negative costate slope {slope} at X = {x}; using the CRRA ratio");
            1.0 / self.gamma
        } else {
            -lambda / (x * slope)
        };
        Ok(OneShotControls {
            consumption,
            weights: self.direction.iter().map(|d| ratio * d).collect(),
            barrier: None,
            slope_clamped: clamped,
        })
    }

    /// Controls at every sample, solved concurrently and returned in order.
    pub fn controls_at(&self, samples: &[CostateSample]) -> Result<Vec<OneShotControls>> {
        samples
            .par_iter()
            .map(|s| self.controls(s.t, s.x, s.lambda, s.dlambda_dx, None))
            .collect()
    }
}

/// Single-node convenience with the default barrier weight.
pub fn oneshot_controls(
    costate: &CostateSample,
    market: &MarketParams,
    constrained: bool,
    gamma: f64,
    rho: f64,
) -> Result<OneShotControls> {
    OneShotSolver::new(market, gamma, rho, constrained, DEFAULT_EPSILON).controls(
        costate.t,
        costate.x,
        costate.lambda,
        costate.dlambda_dx,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_market, MarketSpec};
    use crate::merton_reference::{optimal_weights, value_ode_oracle};

    fn sample(t: f64, x: f64, lambda: f64, slope: f64) -> CostateSample {
        CostateSample {
            t,
            x,
            lambda,
            dlambda_dx: slope,
            z: vec![],
        }
    }

    #[test]
    fn unit_costate_gives_unit_consumption() {
        let m = generate_market(&MarketSpec::new(3, 1)).unwrap();
        for gamma in [0.5, 1.0, 2.0, 5.0] {
            let c = oneshot_controls(&sample(0.0, 1.0, 1.0, -gamma), &m, false, gamma, 0.1).unwrap();
            assert_eq!(c.consumption, 1.0);
        }
    }

    #[test]
    fn oracle_costates_reproduce_merton() {
        let m = generate_market(&MarketSpec::new(5, 2)).unwrap();
        let ode = value_ode_oracle(&m, 2.0, 0.1, 1.0, 1.0, 1000).unwrap();
        let (pi, _) = optimal_weights(&m, 2.0).unwrap();
        for &(t, x) in &[(0.0, 1.0), (0.4, 0.3), (0.95, 1.9)] {
            let c = oneshot_controls(&sample(t, x, ode.costate(t, x), ode.costate_slope(t, x)), &m, false, 2.0, 0.1)
                .unwrap();
            assert!((c.consumption - ode.consumption_ratio(t) * x).abs() < 1e-10);
            for (a, b) in c.weights.iter().zip(&pi) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constrained_controls_are_feasible() {
        let m = generate_market(&MarketSpec::new(6, 4)).unwrap();
        let c = oneshot_controls(&sample(0.2, 0.8, 1.7, -3.0), &m, true, 2.0, 0.1).unwrap();
        assert_eq!(c.weights.len(), 7);
        assert!(c.weights.iter().all(|w| *w > 0.0));
        assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
