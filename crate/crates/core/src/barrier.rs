//! Pointwise Hamiltonian maximization over the simplex.
//!
//! At a node with costate `λ`, slope `s = ∂ₓλ` and wealth `X`, the
//! Hamiltonian restricted to the portfolio is
//! `H(π) = λX(r π₀ + μᵀπ_r) + ½ s X² π_rᵀ Σ π_r`, concave when `s < 0`.
//! [`newton_solve`] maximizes `H + ε Σ ln πᵢ` subject to `Σπ = 1`;
//! [`kkt_enumerate_oracle`] solves the exact problem by active-set
//! enumeration for small `n`.

use ndarray::Array2;

use crate::error::{PgdpoError, Result};
use crate::linalg_ad::{lu_solve, DenseLu};
use crate::market::MarketParams;

/// Data of one barrier problem.
#[derive(Debug, Clone)]
pub struct BarrierSystem<'a> {
    pub market: &'a MarketParams,
    pub epsilon: f64,
    pub lambda: f64,
    pub lambda_slope: f64,
    pub x: f64,
}

impl<'a> BarrierSystem<'a> {
    /// Builds a system, replacing a non-negative slope by the CRRA slope
    /// `−|λ|γ/X`. The flag reports whether that happened.
    pub fn new(
        market: &'a MarketParams,
        lambda: f64,
        lambda_slope: f64,
        x: f64,
        epsilon: f64,
        gamma: f64,
    ) -> Result<(Self, bool)> {
        if !(epsilon > 0.0) || !(x > 0.0) {
            return Err(PgdpoError::InvalidConfig("barrier needs epsilon > 0 and X > 0".into()));
        }
        let clamped = !(lambda_slope < 0.0);
        let lambda_slope = if clamped {
            log::debug!("non-negative costate slope {lambda_slope} at X = {x}; using the CRRA slope");
            -lambda.abs() * gamma / x
        } else {
            lambda_slope
        };
        Ok((
            BarrierSystem {
                market,
                epsilon,
                lambda,
                lambda_slope,
                x,
            },
            clamped,
        ))
    }

    pub fn n(&self) -> usize {
        self.market.n
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        BarrierSystem { epsilon, ..self.clone() }
    }

    /// `∂H/∂πᵢ` for `i = 0..=n`.
    pub fn hamiltonian_gradient(&self, pi: &[f64]) -> Vec<f64> {
        let m = self.market;
        let lx = self.lambda * self.x;
        let sx2 = self.lambda_slope * self.x * self.x;
        let s_pi = m.sigma_cov.mul_vec(&pi[1..]);
        let mut g = Vec::with_capacity(m.n + 1);
        g.push(lx * m.r);
        g.extend(m.mu.iter().zip(&s_pi).map(|(mu, sp)| lx * mu + sx2 * sp));
        g
    }

    /// Hamiltonian value up to terms independent of the portfolio.
    pub fn hamiltonian(&self, pi: &[f64]) -> f64 {
        let m = self.market;
        let lx = self.lambda * self.x;
        let lin = lx * (m.r * pi[0] + m.mu.iter().zip(&pi[1..]).map(|(a, b)| a * b).sum::<f64>());
        lin + 0.5 * self.lambda_slope * self.x * self.x * m.sigma_cov.quad_form(&pi[1..])
    }
}

fn check_domain(pi: &[f64]) -> Result<()> {
    match pi.iter().position(|p| !(*p > 0.0)) {
        Some(index) => Err(PgdpoError::DomainError {
            index,
            value: pi[index],
        }),
        None => Ok(()),
    }
}

/// `F_i = ∂H/∂πᵢ + ε/πᵢ − η` for `i = 0..=n`, then `F_sum = Σπ − 1`.
pub fn barrier_residual(sys: &BarrierSystem, pi: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_domain(pi)?;
    let mut f: Vec<f64> = sys
        .hamiltonian_gradient(pi)
        .iter()
        .zip(pi)
        .map(|(g, p)| g + sys.epsilon / p - eta)
        .collect();
    f.push(pi.iter().sum::<f64>() - 1.0);
    Ok(f)
}

/// Jacobian of [`barrier_residual`] in the unknowns `(π₀, …, πₙ, η)`.
pub fn barrier_jacobian(sys: &BarrierSystem, pi: &[f64], _eta: f64) -> Result<Array2<f64>> {
    check_domain(pi)?;
    let n = sys.n();
    let dim = n + 2;
    let sx2 = sys.lambda_slope * sys.x * sys.x;
    let sigma = sys.market.sigma();
    let mut j = Array2::zeros((dim, dim));
    for i in 0..=n {
        for k in 1..=n {
            if i >= 1 {
                j[[i, k]] = sx2 * sigma[[i - 1, k - 1]];
            }
        }
        j[[i, i]] -= sys.epsilon / (pi[i] * pi[i]);
        j[[i, n + 1]] = -1.0;
        j[[n + 1, i]] = 1.0;
    }
    Ok(j)
}

/// Result of a barrier solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSolution {
    /// Weights with the risk-free asset at index 0.
    pub pi: Vec<f64>,
    pub eta: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub epsilon_used: f64,
    pub converged: bool,
    pub slope_clamped: bool,
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100;
/// Fraction of the distance to the boundary a step may cover.
const BOUNDARY_FRACTION: f64 = 0.99;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least-squares multiplier for fixed weights.
pub fn eliminate_eta(sys: &BarrierSystem, pi: &[f64]) -> f64 {
    let g = sys.hamiltonian_gradient(pi);
    g.iter().zip(pi).map(|(g, p)| g + sys.epsilon / p).sum::<f64>() / pi.len() as f64
}

/// Damped Newton iteration on the barrier system.
///
/// Every iterate stays strictly inside the simplex: the step is first cut
/// to a fixed fraction of the distance to the boundary, then halved until
/// the residual decreases.
pub fn newton_solve(sys: &BarrierSystem, init: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<BarrierSolution> {
    let n = sys.n();
    let mut pi = match init {
        Some(p) if p.len() == n + 1 && p.iter().all(|v| *v > 0.0) => {
            let s: f64 = p.iter().sum();
            p.iter().map(|v| v / s).collect()
        }
        _ => vec![1.0 / (n + 1) as f64; n + 1],
    };
    let mut eta = eliminate_eta(sys, &pi);
    let mut f = barrier_residual(sys, &pi, eta)?;
    let mut norm = inf_norm(&f);
    let mut iterations = 0;
    while norm > tol && iterations < max_iter {
        iterations += 1;
        let jac = barrier_jacobian(sys, &pi, eta)?;
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let step = match DenseLu::factor(jac) {
            Ok(lu) => lu.solve(&rhs),
            Err(_) => return Err(PgdpoError::SingularJacobian),
        };
        let mut alpha: f64 = 1.0;
        for i in 0..=n {
            if step[i] < 0.0 {
                alpha = alpha.min(-BOUNDARY_FRACTION * pi[i] / step[i]);
            }
        }
        let base = l2(&f);
        let (mut next_pi, mut next_eta, mut next_f);
        loop {
            next_pi = pi.iter().zip(&step).map(|(p, d)| p + alpha * d).collect::<Vec<_>>();
            next_eta = eta + alpha * step[n + 1];
            next_f = barrier_residual(sys, &next_pi, next_eta);
            if let Ok(ref nf) = next_f {
                if l2(nf) <= (1.0 - 1e-4 * alpha) * base || alpha < 1e-12 {
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-14 {
                break;
            }
        }
        let Ok(nf) = next_f else {
            break;
        };
        pi = next_pi;
        eta = next_eta;
        f = nf;
        norm = inf_norm(&f);
    }
    Ok(BarrierSolution {
        converged: norm <= tol,
        pi,
        eta,
        residual_norm: norm,
        iterations,
        epsilon_used: sys.epsilon,
        slope_clamped: false,
    })
}

/// Starting barrier weight of the continuation.
pub const CONTINUATION_START: f64 = 1e-2;

/// Solves at `epsilon` by continuation from [`CONTINUATION_START`],
/// dividing by 100 per stage and warm-starting each stage.
pub fn solve_with_continuation(sys: &BarrierSystem, init: Option<&[f64]>, tol: f64) -> Result<BarrierSolution> {
    let target = sys.epsilon;
    let mut eps = CONTINUATION_START.max(target);
    let mut warm: Option<Vec<f64>> = init.map(|p| p.to_vec());
    let mut total = 0;
    loop {
        let stage = sys.with_epsilon(eps);
        let sol = match newton_solve(&stage, warm.as_deref(), tol, DEFAULT_MAX_ITER) {
            Err(PgdpoError::SingularJacobian) if eps < target * 10.0 => {
                log::warn!("singular barrier Jacobian at epsilon {eps}; retrying with {}", eps * 10.0);
                newton_solve(&sys.with_epsilon(eps * 10.0), warm.as_deref(), tol, DEFAULT_MAX_ITER)?
            }
            other => other?,
        };
        total += sol.iterations;
        if eps <= target {
            if !sol.converged {
                log::warn!(
                    "barrier solve stopped after {total} Newton steps with residual {:e}",
                    sol.residual_norm
                );
            }
            return Ok(BarrierSolution { iterations: total, ..sol });
        }
        warm = Some(sol.pi);
        eps = (eps / 100.0).max(target);
    }
}

/// Exact KKT point of the simplex-constrained problem.
#[derive(Debug, Clone, PartialEq)]
pub struct KktCertificate {
    pub pi: Vec<f64>,
    pub eta: f64,
    /// `ζᵢ = η − ∂H/∂πᵢ`, zero off the active set.
    pub zeta: Vec<f64>,
    pub active_set: Vec<usize>,
    pub stationarity_residual: f64,
}

pub const KKT_MAX_ASSETS: usize = 12;
const KKT_FEAS_TOL: f64 = 1e-12;

/// Enumerates all active sets and returns the feasible KKT point with the
/// highest Hamiltonian. The barrier weight of `sys` is ignored.
pub fn kkt_enumerate_oracle(sys: &BarrierSystem) -> Result<KktCertificate> {
    let n = sys.n();
    if n > KKT_MAX_ASSETS {
        return Err(PgdpoError::OracleTooLarge { n, max: KKT_MAX_ASSETS });
    }
    let lx = sys.lambda * sys.x;
    let sx2 = sys.lambda_slope * sys.x * sys.x;
    let sigma = sys.market.sigma();
    let mut best: Option<(f64, KktCertificate)> = None;
    for mask in 0u32..(1u32 << (n + 1)) {
        // bit i set: coordinate i is free
        let free: Vec<usize> = (0..=n).filter(|i| mask & (1 << i) != 0).collect();
        if free.is_empty() {
            continue;
        }
        let k = free.len();
        let mut a = Array2::zeros((k + 1, k + 1));
        let mut b = vec![0.0; k + 1];
        for (p, &i) in free.iter().enumerate() {
            if i == 0 {
                b[p] = -lx * sys.market.r;
            } else {
                b[p] = -lx * sys.market.mu[i - 1];
                for (q, &j) in free.iter().enumerate() {
                    if j >= 1 {
                        a[[p, q]] = sx2 * sigma[[i - 1, j - 1]];
                    }
                }
            }
            a[[p, k]] = -1.0;
            a[[k, p]] = 1.0;
        }
        b[k] = 1.0;
        let Ok(sol) = lu_solve(a, &b) else {
            continue;
        };
        if sol[..k].iter().any(|v| *v < -KKT_FEAS_TOL) {
            continue;
        }
        let mut pi = vec![0.0; n + 1];
        for (p, &i) in free.iter().enumerate() {
            pi[i] = sol[p].max(0.0);
        }
        let eta = sol[k];
        let g = sys.hamiltonian_gradient(&pi);
        let scale = 1.0 + eta.abs();
        let zeta: Vec<f64> = (0..=n)
            .map(|i| if mask & (1 << i) != 0 { 0.0 } else { eta - g[i] })
            .collect();
        if zeta.iter().any(|z| *z < -KKT_FEAS_TOL * scale) {
            continue;
        }
        let stationarity = (0..=n).map(|i| (g[i] - eta + zeta[i]).abs()).fold(0.0, f64::max);
        let value = sys.hamiltonian(&pi);
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((
                value,
                KktCertificate {
                    pi,
                    eta,
                    zeta: zeta.iter().map(|z| z.max(0.0)).collect(),
                    active_set: (0..=n).filter(|i| mask & (1 << i) == 0).collect(),
                    stationarity_residual: stationarity,
                },
            ));
        }
    }
    best.map(|(_, c)| c).ok_or(PgdpoError::NoFeasibleCertificate)
}
