//! Scores against reference rules and first-order residuals.

use crate::barrier::{kkt_enumerate_oracle, solve_with_continuation, BarrierSystem, KKT_MAX_ASSETS};
use crate::costate::CostateSample;
use crate::error::{PgdpoError, Result};
use crate::market::MarketParams;
use crate::merton_reference::{decay_rate_for_portfolio, optimal_weights, ValueOde, DEFAULT_ODE_GRID};
use crate::policy::{ConsumptionRule, FixedPolicy};
use crate::rollout::{marginal_utility, RolloutConfig};
use crate::rng::{self, Purpose};

/// Nodes closer than this to the horizon are not scored.
pub const HORIZON_MARGIN: f64 = 0.01;

/// Relative mean squared error with its per-coordinate split.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMse {
    /// Mean over nodes of `‖learned − ref‖² / ‖ref‖²`.
    pub mse: f64,
    /// Coordinate `j`'s share, scaled so that the mean over coordinates is `mse`.
    pub per_asset: Vec<f64>,
}

impl RelativeMse {
    pub fn min(&self) -> f64 {
        self.per_asset.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.per_asset.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn relative_mse(learned: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<RelativeMse> {
    if learned.len() != reference.len() || learned.is_empty() {
        return Err(PgdpoError::DimensionMismatch("relative MSE needs matching non-empty node sets".into()));
    }
    let d = reference[0].len();
    let mut per_asset = vec![0.0; d];
    let mut total = 0.0;
    for (l, r) in learned.iter().zip(reference) {
        let norm: f64 = r.iter().map(|v| v * v).sum();
        if !(norm > 0.0) {
            return Err(PgdpoError::ReferenceUndefined("reference control is zero".into()));
        }
        for j in 0..d {
            let e = (l[j] - r[j]).powi(2) / norm;
            per_asset[j] += e;
            total += e;
        }
    }
    let count = learned.len() as f64;
    Ok(RelativeMse {
        mse: total / count,
        per_asset: per_asset.into_iter().map(|v| v * d as f64 / count).collect(),
    })
}

pub fn relative_mse_scalar(learned: &[f64], reference: &[f64]) -> Result<f64> {
    let l: Vec<Vec<f64>> = learned.iter().map(|v| vec![*v]).collect();
    let r: Vec<Vec<f64>> = reference.iter().map(|v| vec![*v]).collect();
    Ok(relative_mse(&l, &r)?.mse)
}

/// Benchmark controls: a constant portfolio and ODE-driven consumption.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRule {
    /// In the emitted layout: risky weights, or full simplex weights.
    pub weights: Vec<f64>,
    pub simplex: bool,
    pub ode: ValueOde,
}

impl ReferenceRule {
    /// Unconstrained Merton rule with the experiment's bequest weight.
    pub fn unconstrained(market: &MarketParams, cfg: &RolloutConfig) -> Result<Self> {
        let (pi, _) = optimal_weights(market, cfg.gamma)?;
        let kappa = decay_rate_for_portfolio(market, cfg.gamma, cfg.rho, &pi);
        let ode = ValueOde::solve(kappa, cfg.gamma, cfg.rho, cfg.kappa_bequest, cfg.horizon, DEFAULT_ODE_GRID)?;
        Ok(ReferenceRule {
            weights: pi,
            simplex: false,
            ode,
        })
    }

    /// Simplex-constrained rule: with constant coefficients the optimal
    /// portfolio maximizes `rπ₀ + μᵀπ_r − (γ/2) π_rᵀΣπ_r` over the simplex
    /// and consumption follows the value ODE of that portfolio.
    pub fn constrained(market: &MarketParams, cfg: &RolloutConfig) -> Result<Self> {
        let (sys, _) = BarrierSystem::new(market, 1.0, -cfg.gamma, 1.0, 1e-10, cfg.gamma)?;
        let pi = if market.n <= KKT_MAX_ASSETS {
            kkt_enumerate_oracle(&sys)?.pi
        } else {
            solve_with_continuation(&sys, None, 1e-12)?.pi
        };
        let kappa = decay_rate_for_portfolio(market, cfg.gamma, cfg.rho, &pi[1..]);
        let ode = ValueOde::solve(kappa, cfg.gamma, cfg.rho, cfg.kappa_bequest, cfg.horizon, DEFAULT_ODE_GRID)?;
        Ok(ReferenceRule {
            weights: pi,
            simplex: true,
            ode,
        })
    }

    pub fn for_market(market: &MarketParams, cfg: &RolloutConfig, constrained: bool) -> Result<Self> {
        if constrained {
            ReferenceRule::constrained(market, cfg)
        } else {
            ReferenceRule::unconstrained(market, cfg)
        }
    }

    pub fn consumption(&self, t: f64, x: f64) -> f64 {
        self.ode.consumption_ratio(t) * x
    }

    /// The rule as a rollout policy.
    pub fn policy(&self) -> FixedPolicy {
        let c = ConsumptionRule::Ode(self.ode.clone());
        if self.simplex {
            FixedPolicy::on_simplex(self.weights.clone(), c)
        } else {
            FixedPolicy::risky(self.weights.clone(), c)
        }
    }
}

/// Uniform scoring nodes, dropping those within [`HORIZON_MARGIN`] of `T`.
pub fn eval_nodes(cfg: &RolloutConfig, count: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut s = rng::stream(seed, Purpose::EvalNodes, 0);
    let nodes = crate::rollout::sample_initial_nodes(cfg, count, &mut s);
    let kept: Vec<(f64, f64)> = nodes.into_iter().filter(|(t, _)| cfg.horizon - t >= HORIZON_MARGIN).collect();
    if kept.len() < count {
        log::info!("{} evaluation nodes within {HORIZON_MARGIN} of the horizon were excluded", count - kept.len());
    }
    kept
}

/// Mean squared first-order residuals, raw and divided by `λ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocResiduals {
    pub consumption_mse: f64,
    pub investment_mse: f64,
    pub consumption_mse_scaled: f64,
    pub investment_mse_scaled: f64,
}

/// Residuals of controls against costates at the same nodes.
///
/// Consumption: `e^{−ρt} U'(C) − λ`. Investment, unconstrained: the risky
/// gradient `λX(μ − r1) + ∂ₓλ X² Σπ`. Investment, simplex: the barrier
/// stationarity `∂H/∂πᵢ + ε/πᵢ − η` with `η` set to the mean of
/// `∂H/∂πᵢ + ε/πᵢ`.
#[allow(clippy::too_many_arguments)]
pub fn foc_residuals(
    market: &MarketParams,
    samples: &[CostateSample],
    consumption: &[f64],
    weights: &[Vec<f64>],
    simplex: bool,
    gamma: f64,
    rho: f64,
    epsilon: f64,
) -> FocResiduals {
    let mut rc = 0.0;
    let mut rc_s = 0.0;
    let mut rp = 0.0;
    let mut rp_s = 0.0;
    let mut coords = 0usize;
    let theta = market.excess_return();
    for ((s, &c), w) in samples.iter().zip(consumption).zip(weights) {
        let l2 = s.lambda * s.lambda;
        let r = (-rho * s.t).exp() * marginal_utility(c, gamma) - s.lambda;
        rc += r * r;
        rc_s += r * r / l2;
        let res: Vec<f64> = if simplex {
            let pi: Vec<f64> = w.iter().map(|p| p.max(f64::MIN_POSITIVE)).collect();
            let sys = BarrierSystem {
                market,
                epsilon,
                lambda: s.lambda,
                lambda_slope: s.dlambda_dx,
                x: s.x,
            };
            let eta = crate::barrier::eliminate_eta(&sys, &pi);
            sys.hamiltonian_gradient(&pi)
                .iter()
                .zip(&pi)
                .map(|(g, p)| g + epsilon / p - eta)
                .collect()
        } else {
            let s_pi = market.sigma_cov.mul_vec(w);
            theta
                .iter()
                .zip(&s_pi)
                .map(|(th, sp)| s.lambda * s.x * th + s.dlambda_dx * s.x * s.x * sp)
                .collect()
        };
        for v in &res {
            rp += v * v;
            rp_s += v * v / l2;
        }
        coords += res.len();
    }
    let nodes = samples.len().max(1) as f64;
    let coords = coords.max(1) as f64;
    FocResiduals {
        consumption_mse: rc / nodes,
        investment_mse: rp / coords,
        consumption_mse_scaled: rc_s / nodes,
        investment_mse_scaled: rp_s / coords,
    }
}
