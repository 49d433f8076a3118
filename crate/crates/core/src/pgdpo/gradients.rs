//! Policy gradients of the batch objective.
//!
//! [`pathwise_gradients`] differentiates the whole rollout tape.
//! [`pontryagin_assembly`] rebuilds the same gradient step by step from the
//! extracted costates: the sensitivity of the objective to the controls at
//! step `k` is the direct utility term plus `λ_{k+1} X_{k+1}` times the
//! derivative of the log-growth exponent, contracted with per-step network
//! Jacobians. [`literal_pontryagin_gradients`] is the continuous-time form
//! built from `(λ_k, Z_k)`, which agrees only in expectation.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{PgdpoError, Result};
use crate::linalg_ad::{Matrix, Tape};
use crate::market::MarketParams;
use crate::policy::{Head, PolicyNet, PolicyPair};
use crate::rollout::{marginal_utility, PathSetup, RolloutBatch, RolloutConfig, TapedRollout};

/// Gradient of the batch mean objective with the costates seen along the way.
#[derive(Debug, Clone)]
pub struct GradientSample {
    pub objective: f64,
    /// Investment parameters first, then consumption.
    pub grad: Vec<f64>,
    /// `λ_k` per path, `M x (m+1)`.
    pub lambdas: Array2<f64>,
    pub batch: RolloutBatch,
}

pub fn pathwise_gradients(
    market: &MarketParams,
    pair: &PolicyPair,
    cfg: &RolloutConfig,
    setup: &PathSetup,
) -> Result<GradientSample> {
    let r = TapedRollout::simulate(market, pair, cfg, setup, true)?;
    let adj = r.tape.backward_sweep(r.j_hat);
    Ok(GradientSample {
        objective: r.objective(),
        grad: pair.collect_grads(&adj, &r.params),
        lambdas: crate::costate::path_costates(&r, &adj),
        batch: r.to_batch(),
    })
}

/// Objective and gradient with the batch split into `workers` contiguous
/// chunks, each on its own tape. With one worker this is a single tape.
pub fn batch_gradient(
    market: &MarketParams,
    pair: &PolicyPair,
    cfg: &RolloutConfig,
    setup: &PathSetup,
    workers: usize,
) -> Result<(f64, Vec<f64>)> {
    let m = setup.len();
    let chunks = workers.clamp(1, m);
    let size = m.div_ceil(chunks);
    let ranges: Vec<_> = (0..m).step_by(size).map(|s| s..(s + size).min(m)).collect();
    let parts: Vec<Result<(f64, Vec<f64>)>> = ranges
        .par_iter()
        .map(|range| {
            let sub = if ranges.len() == 1 { setup.clone() } else { setup.slice(range.clone()) };
            let share = range.len() as f64 / m as f64;
            let r = TapedRollout::simulate(market, pair, cfg, &sub, true)?;
            let adj = r.tape.backward_with_seed(r.j_hat, Matrix::from_elem((1, 1), share));
            Ok((r.objective() * share, pair.collect_grads(&adj, &r.params)))
        })
        .collect();
    let mut objective = 0.0;
    let mut grad = vec![0.0; pair.param_count()];
    for p in parts {
        let (o, g) = p?;
        objective += o;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((objective, grad))
}

/// Checks an objective and gradient for non-finite entries.
pub fn ensure_finite(objective: f64, grad: &[f64], iteration: u64, seed: u64) -> Result<()> {
    if objective.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(PgdpoError::NonFiniteObjective { iteration, seed })
    }
}

/// Vector-Jacobian product of a network at constant inputs.
fn net_vjp(net: &PolicyNet, t: &[f64], x: &[f64], seed: Matrix) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true);
    let tv = tape.column_constant(t);
    let xv = tape.column_constant(x);
    let out = net.forward_tape(&mut tape, &vars, tv, xv);
    let adj = tape.backward_with_seed(out, seed);
    net.collect_grads(&adj, &vars)
}

/// `V ΔW` per path (`M x n`).
fn loaded_noise(market: &MarketParams, dw: &Array2<f64>) -> Array2<f64> {
    dw.dot(&market.chol.t())
}

/// Exact discrete gradient from `λ_{k+1}` and the recorded batch.
pub fn pontryagin_assembly(
    market: &MarketParams,
    pair: &PolicyPair,
    cfg: &RolloutConfig,
    setup: &PathSetup,
    batch: &RolloutBatch,
    lambdas: &Array2<f64>,
) -> Vec<f64> {
    let m = setup.len();
    let n = market.n;
    let scale = 1.0 / m as f64;
    let simplex = pair.investment.head() == Head::Simplex;
    let theta = market.excess_return();
    let mut gi = vec![0.0; pair.investment.params.len()];
    let mut gc = vec![0.0; pair.consumption.params.len()];
    for (k, inc) in setup.increments.iter().enumerate() {
        let t = &batch.times[k];
        let xk = batch.x.column(k).to_vec();
        let pi = &batch.weights[k];
        let vdw = loaded_noise(market, inc);
        let risky = if simplex { pi.slice(ndarray::s![.., 1..]).to_owned() } else { pi.clone() };
        let s_pi = risky.dot(market.sigma());
        let width = if simplex { n + 1 } else { n };
        let mut seed_pi = Matrix::zeros((m, width));
        let mut seed_c = Matrix::zeros((m, 1));
        for i in 0..m {
            let h = setup.dt[i];
            let a = lambdas[[i, k + 1]] * batch.x[[i, k + 1]] * scale;
            let off = if simplex {
                seed_pi[[i, 0]] = a * market.r * h;
                1
            } else {
                0
            };
            for j in 0..n {
                let drift = if simplex { market.mu[j] } else { theta[j] };
                seed_pi[[i, off + j]] = a * ((drift - s_pi[[i, j]]) * h + vdw[[i, j]]);
            }
            let c = batch.consumption[[i, k]];
            seed_c[[i, 0]] = scale * (-cfg.rho * t[i]).exp() * marginal_utility(c, cfg.gamma) * h - a * h / xk[i];
        }
        let di = net_vjp(&pair.investment, t, &xk, seed_pi);
        let dc = net_vjp(&pair.consumption, t, &xk, seed_c);
        gi.iter_mut().zip(&di).for_each(|(a, b)| *a += b);
        gc.iter_mut().zip(&dc).for_each(|(a, b)| *a += b);
    }
    gi.extend(gc);
    gi
}

/// Continuous-time gradient built from `λ_k`, `Z_k = ∂ₓλ_k X_k Vᵀπ_k`:
/// investment sensitivity `(λX θ + X V Z) Δt` and consumption sensitivity
/// `(e^{−ρt} U'(C) − λ) Δt`, both at the left endpoint of each step.
pub fn literal_pontryagin_gradients(
    market: &MarketParams,
    pair: &PolicyPair,
    cfg: &RolloutConfig,
    setup: &PathSetup,
    batch: &RolloutBatch,
    lambdas: &Array2<f64>,
    slopes: &Array2<f64>,
) -> Vec<f64> {
    let m = setup.len();
    let n = market.n;
    let scale = 1.0 / m as f64;
    let simplex = pair.investment.head() == Head::Simplex;
    let theta = market.excess_return();
    let mut gi = vec![0.0; pair.investment.params.len()];
    let mut gc = vec![0.0; pair.consumption.params.len()];
    for k in 0..setup.increments.len() {
        let t = &batch.times[k];
        let xk = batch.x.column(k).to_vec();
        let pi = &batch.weights[k];
        let width = if simplex { n + 1 } else { n };
        let mut seed_pi = Matrix::zeros((m, width));
        let mut seed_c = Matrix::zeros((m, 1));
        for i in 0..m {
            let h = setup.dt[i];
            let lam = lambdas[[i, k]];
            let x = xk[i];
            let row = pi.row(i).to_vec();
            let risky = crate::policy::risky_weights(&row, simplex);
            let z = crate::costate::z_process(slopes[[i, k]], x, market, risky);
            // X V Z
            let vz: Vec<f64> = (0..n).map(|a| (0..=a).map(|b| market.chol[[a, b]] * z[b]).sum::<f64>() * x).collect();
            let off = if simplex {
                seed_pi[[i, 0]] = scale * h * lam * x * market.r;
                1
            } else {
                0
            };
            for j in 0..n {
                let drift = if simplex { market.mu[j] } else { theta[j] };
                seed_pi[[i, off + j]] = scale * h * (lam * x * drift + vz[j]);
            }
            let c = batch.consumption[[i, k]];
            seed_c[[i, 0]] = scale * h * ((-cfg.rho * t[i]).exp() * marginal_utility(c, cfg.gamma) - lam);
        }
        let di = net_vjp(&pair.investment, t, &xk, seed_pi);
        let dc = net_vjp(&pair.consumption, t, &xk, seed_c);
        gi.iter_mut().zip(&di).for_each(|(a, b)| *a += b);
        gc.iter_mut().zip(&dc).for_each(|(a, b)| *a += b);
    }
    gi.extend(gc);
    gi
}

/// `∂ₓλ_k` for every path and step `k < m`, by common-random-number differences.
pub fn path_slopes(
    market: &MarketParams,
    pair: &PolicyPair,
    cfg: &RolloutConfig,
    setup: &PathSetup,
    batch: &RolloutBatch,
) -> Result<Array2<f64>> {
    let m = setup.len();
    let steps = setup.increments.len();
    let mut out = Array2::zeros((m, steps));
    for k in 0..steps {
        let xk = batch.x.column(k).to_vec();
        let s = crate::costate::dlambda_dx(market, pair, cfg, setup, &xk, k)?;
        out.column_mut(k).assign(&ndarray::Array1::from(s));
    }
    Ok(out)
}

/// Relative distance `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = na.max(nb);
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_market, MarketSpec};

    fn small(constrained: bool) -> (MarketParams, PolicyPair, RolloutConfig, PathSetup) {
        let market = generate_market(&MarketSpec::new(2, 5)).unwrap();
        let mut pair = PolicyPair::new(2, constrained, 1.0, 3).unwrap();
        pair.investment.shape.hidden = vec![8, 8];
        pair.consumption.shape.hidden = vec![8, 8];
        pair.investment.params = crate::policy::init_params(&pair.investment.shape, 3);
        pair.consumption.params = crate::policy::init_params(&pair.consumption.shape, 3);
        let cfg = RolloutConfig {
            steps: 2,
            batch: 4,
            ..RolloutConfig::default()
        };
        let setup = PathSetup::for_iteration(&cfg, 2, 0);
        (market, pair, cfg, setup)
    }

    #[test]
    fn assembly_matches_autodiff() {
        for constrained in [false, true] {
            let (m, p, c, s) = small(constrained);
            let g = pathwise_gradients(&m, &p, &c, &s).unwrap();
            let manual = pontryagin_assembly(&m, &p, &c, &s, &g.batch, &g.lambdas);
            assert!(relative_gap(&g.grad, &manual) < 1e-10, "{}", relative_gap(&g.grad, &manual));
        }
    }

    #[test]
    fn chunked_gradient_matches_single_tape() {
        let (m, p, c, s) = small(false);
        let (o1, g1) = batch_gradient(&m, &p, &c, &s, 1).unwrap();
        let (o3, g3) = batch_gradient(&m, &p, &c, &s, 3).unwrap();
        assert!((o1 - o3).abs() < 1e-13 * o1.abs());
        assert!(relative_gap(&g1, &g3) < 1e-12);
    }
}
