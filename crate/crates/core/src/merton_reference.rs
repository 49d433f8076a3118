//! Closed-form unconstrained Merton benchmarks and a value-function ODE oracle.
//!
//! With CRRA utility the value function separates as
//! `V(t, x) = e^{-ρt} g(t) x^{1-γ} / (1-γ)`, so the costate is
//! `λ(t, x) = e^{-ρt} g(t) x^{-γ}` and optimal consumption is `g(t)^{-1/γ} x`.

use crate::error::{PgdpoError, Result};
use crate::linalg_ad::cholesky_solve;
use crate::market::MarketParams;

/// Unconstrained optimal risky weights `(1/γ) Σ⁻¹ (μ − r1)` and the implied
/// risk-free weight.
pub fn optimal_weights(m: &MarketParams, gamma: f64) -> Result<(Vec<f64>, f64)> {
    let excess = m.excess_return();
    let l = m.sigma_cov.factor()?;
    let pi: Vec<f64> = cholesky_solve(l, &excess).into_iter().map(|v| v / gamma).collect();
    let pi0 = 1.0 - pi.iter().sum::<f64>();
    Ok((pi, pi0))
}

/// Squared Sharpe norm `(μ − r1)ᵀ Σ⁻¹ (μ − r1)`.
pub fn sharpe_squared(m: &MarketParams) -> f64 {
    let excess = m.excess_return();
    let w = cholesky_solve(&m.chol, &excess);
    excess.iter().zip(&w).map(|(a, b)| a * b).sum()
}

/// Consumption decay rate `ρ − (1−γ)(r + θᵀΣ⁻¹θ / (2γ))`.
pub fn decay_rate_kappa(m: &MarketParams, gamma: f64, rho: f64) -> f64 {
    rho - (1.0 - gamma) * (m.r + sharpe_squared(m) / (2.0 * gamma))
}

/// Decay rate for an arbitrary fixed portfolio, `ρ − (1−γ)(r + πᵀθ − γ/2 πᵀΣπ)`.
///
/// Equals [`decay_rate_kappa`] at the unconstrained optimum; used for
/// reference rules where the portfolio is pinned by constraints.
pub fn decay_rate_for_portfolio(m: &MarketParams, gamma: f64, rho: f64, pi: &[f64]) -> f64 {
    let excess = m.excess_return();
    let drift: f64 = pi.iter().zip(&excess).map(|(p, e)| p * e).sum();
    let var = m.sigma_cov.quad_form(pi);
    rho - (1.0 - gamma) * (m.r + drift - 0.5 * gamma * var)
}

/// Zero-bequest consumption-to-wealth ratio at time `t`.
///
/// `α(t) = a / (1 − e^{−a(T−t)})` with `a = κ_decay / γ`, tending to
/// `1/(T−t)` as `a → 0`.
pub fn consumption_fraction(t: f64, horizon: f64, kappa_decay: f64, gamma: f64) -> Result<f64> {
    let tau = horizon - t;
    if !(tau > 0.0) {
        return Err(PgdpoError::HorizonExhausted { t, horizon });
    }
    let a = kappa_decay / gamma;
    if a == 0.0 {
        return Ok(1.0 / tau);
    }
    Ok(a / -(-a * tau).exp_m1())
}

/// Tabulated solution of `g' = κ g − γ g^{(γ−1)/γ}`, `g(T) = κ_bequest`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueOde {
    pub gamma: f64,
    pub rho: f64,
    pub kappa_decay: f64,
    pub kappa_bequest: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub g: Vec<f64>,
}

const MIN_GRID: usize = 100;
/// Bound on step · local stiffness for the RK4 substeps.
const STIFFNESS_STEP: f64 = 0.02;

fn ode_rhs(g: f64, kappa: f64, gamma: f64) -> f64 {
    kappa * g - gamma * g.powf((gamma - 1.0) / gamma)
}

impl ValueOde {
    /// Integrates backward from the terminal condition with classical RK4,
    /// subdividing each grid cell where the right-hand side is stiff.
    pub fn solve(
        kappa_decay: f64,
        gamma: f64,
        rho: f64,
        kappa_bequest: f64,
        horizon: f64,
        grid_size: usize,
    ) -> Result<Self> {
        if grid_size < MIN_GRID {
            return Err(PgdpoError::InvalidConfig(format!("grid_size must be at least {MIN_GRID}")));
        }
        if !(kappa_bequest > 0.0) || !(horizon > 0.0) || !(gamma > 0.0) {
            return Err(PgdpoError::InvalidConfig(
                "value ODE needs positive bequest weight, horizon and gamma".into(),
            ));
        }
        let cell = horizon / grid_size as f64;
        let times: Vec<f64> = (0..=grid_size).map(|i| i as f64 * cell).collect();
        let mut g = vec![0.0; grid_size + 1];
        g[grid_size] = kappa_bequest;
        let f = |y: f64| ode_rhs(y, kappa_decay, gamma);
        for i in (0..grid_size).rev() {
            let mut y = g[i + 1];
            let mut remaining = cell;
            while remaining > 0.0 {
                // local Jacobian of the RHS, d/dg = κ − (γ−1) g^{−1/γ}
                let stiff = kappa_decay.abs() + (gamma - 1.0).abs() * y.powf(-1.0 / gamma) + 1.0;
                let h = (STIFFNESS_STEP / stiff).min(remaining);
                // backward in time: dy/ds = −f(y) with s = T − t
                let k1 = -f(y);
                let k2 = -f(y + 0.5 * h * k1);
                let k3 = -f(y + 0.5 * h * k2);
                let k4 = -f(y + h * k3);
                y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                remaining -= h;
                if !(y > 0.0) || !y.is_finite() {
                    return Err(PgdpoError::OracleDiverged {
                        t: times[i] + remaining,
                        g: y,
                    });
                }
            }
            g[i] = y;
        }
        Ok(ValueOde {
            gamma,
            rho,
            kappa_decay,
            kappa_bequest,
            horizon,
            times,
            g,
        })
    }

    /// `g(t)` by cubic Hermite interpolation with slopes from the ODE itself.
    pub fn g_at(&self, t: f64) -> f64 {
        let n = self.times.len() - 1;
        let t = t.clamp(0.0, self.horizon);
        let cell = self.horizon / n as f64;
        let i = ((t / cell).floor() as usize).min(n - 1);
        let s = (t - self.times[i]) / cell;
        if s == 0.0 {
            return self.g[i];
        }
        let (y0, y1) = (self.g[i], self.g[i + 1]);
        let d0 = ode_rhs(y0, self.kappa_decay, self.gamma) * cell;
        let d1 = ode_rhs(y1, self.kappa_decay, self.gamma) * cell;
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * d0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * d1
    }

    /// Optimal consumption-to-wealth ratio `g(t)^{−1/γ}`.
    pub fn consumption_ratio(&self, t: f64) -> f64 {
        self.g_at(t).powf(-1.0 / self.gamma)
    }

    /// Costate `e^{−ρt} g(t) x^{−γ}`.
    pub fn costate(&self, t: f64, x: f64) -> f64 {
        (-self.rho * t).exp() * self.g_at(t) * x.powf(-self.gamma)
    }

    /// `∂ₓλ = −γ λ / x`.
    pub fn costate_slope(&self, t: f64, x: f64) -> f64 {
        -self.gamma * self.costate(t, x) / x
    }
}

/// Solves the value ODE for a market at its unconstrained optimum.
pub fn value_ode_oracle(
    m: &MarketParams,
    gamma: f64,
    rho: f64,
    kappa_bequest: f64,
    horizon: f64,
    grid_size: usize,
) -> Result<ValueOde> {
    ValueOde::solve(decay_rate_kappa(m, gamma, rho), gamma, rho, kappa_bequest, horizon, grid_size)
}

/// Closed-form unconstrained solution bundled with its value ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormSolution {
    pub pi_star: Vec<f64>,
    pub pi0_star: f64,
    pub kappa_decay: f64,
    pub rho: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub kappa_bequest: f64,
    pub ode: ValueOde,
}

/// Default grid for the tabulated oracle.
pub const DEFAULT_ODE_GRID: usize = 2000;

impl ClosedFormSolution {
    pub fn new(m: &MarketParams, gamma: f64, rho: f64, kappa_bequest: f64, horizon: f64) -> Result<Self> {
        let (pi_star, pi0_star) = optimal_weights(m, gamma)?;
        let kappa_decay = decay_rate_kappa(m, gamma, rho);
        let ode = ValueOde::solve(kappa_decay, gamma, rho, kappa_bequest, horizon, DEFAULT_ODE_GRID)?;
        Ok(ClosedFormSolution {
            pi_star,
            pi0_star,
            kappa_decay,
            rho,
            gamma,
            horizon,
            kappa_bequest,
            ode,
        })
    }

    /// Optimal consumption rate at `(t, x)`.
    pub fn consumption(&self, t: f64, x: f64) -> f64 {
        self.ode.consumption_ratio(t) * x
    }
}
