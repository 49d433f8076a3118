//! Policy-fixed adjoints extracted from differentiated rollouts.
//!
//! `λ_k` is the adjoint of the wealth node `X_k` when the tape root is the
//! path objective. Its spatial slope is a central difference of `λ` between
//! two re-simulations from `X_k ± h` that share the same Brownian increments.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::Result;
use crate::linalg_ad::{Adjoints, Tape};
use crate::market::MarketParams;
use crate::policy::{risky_weights, Controls};
use crate::rng::{self, Purpose};
use crate::rollout::{simulate_on_tape, MarketNodes, RolloutConfig, TapedRollout};

/// Adjoint triple at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateSample {
    pub t: f64,
    pub x: f64,
    pub lambda: f64,
    pub dlambda_dx: f64,
    pub z: Vec<f64>,
}

/// `λ_k` for every path and grid point (`M x (m+1)`), from a sweep rooted at
/// the batch mean.
pub fn path_costates(r: &TapedRollout, adj: &Adjoints) -> Array2<f64> {
    let m = r.tape.shape(r.x0).0;
    let steps = r.nodes.x.len();
    let mut out = Array2::zeros((m, steps));
    for (k, &xk) in r.nodes.x.iter().enumerate() {
        let a = adj.get_or_zeros(xk);
        for i in 0..m {
            out[[i, k]] = a[[i, 0]] * m as f64;
        }
    }
    out
}

/// `λ_k` on every path, with its own reverse sweep.
pub fn lambda_path(r: &TapedRollout, k: usize) -> Vec<f64> {
    let adj = r.tape.backward_sweep(r.j_hat);
    path_costates(r, &adj).column(k).to_vec()
}

/// Finite-difference step: relative with an absolute floor.
pub fn fd_step(x: f64) -> f64 {
    (1e-4 * x).max(1e-6)
}

/// Adjoint of the starting wealth for paths started at `x_start`.
///
/// Every row is an independent path; the root is the sum of path
/// objectives, so each row's adjoint is its own `∂J/∂x`.
#[allow(clippy::too_many_arguments)]
pub fn start_lambdas<P: Controls + ?Sized>(
    market: &MarketParams,
    policy: &P,
    cfg: &RolloutConfig,
    times: &[f64],
    dt: &[f64],
    x_start: &[f64],
    increments: &[Array2<f64>],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = policy.bind(&mut tape, false);
    let mk = MarketNodes::bind(&mut tape, market);
    let x0 = tape.column_input(x_start);
    let nodes = simulate_on_tape(&mut tape, market, &mk, policy, &params, cfg, times, dt, x0, increments);
    let root = tape.sum(nodes.j);
    if cfg.gamma >= 1.0 {
        for &c in &nodes.consumption {
            if let Some(bad) = tape.value(c).iter().find(|v| !(**v > 0.0)) {
                return Err(crate::PgdpoError::UtilityOverflow(*bad));
            }
        }
    }
    let adj = tape.backward_sweep(root);
    Ok(adj.get_or_zeros(x0).iter().copied().collect())
}

fn stack_rows(blocks: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("column counts agree")
}

/// `(λ, ∂ₓλ)` at the start of each row via common-random-number differences.
///
/// Rows at `x`, `x + h` and `x − h` (or `x` itself when `x − h ≤ 0`) are
/// simulated in one batch with identical increments.
#[allow(clippy::too_many_arguments)]
pub fn crn_costates<P: Controls + ?Sized>(
    market: &MarketParams,
    policy: &P,
    cfg: &RolloutConfig,
    times: &[f64],
    dt: &[f64],
    x: &[f64],
    increments: &[Array2<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = x.len();
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v)).collect();
    let up: Vec<f64> = x.iter().zip(&h).map(|(v, h)| v + h).collect();
    let lo: Vec<f64> = x.iter().zip(&h).map(|(v, h)| if v - h > 0.0 { v - h } else { *v }).collect();
    let mut xs = x.to_vec();
    xs.extend(&up);
    xs.extend(&lo);
    let t3: Vec<f64> = times.iter().chain(times).chain(times).copied().collect();
    let dt3: Vec<f64> = dt.iter().chain(dt).chain(dt).copied().collect();
    let inc3: Vec<Array2<f64>> = increments.iter().map(|a| stack_rows(&[a, a, a])).collect();
    let lam = start_lambdas(market, policy, cfg, &t3, &dt3, &xs, &inc3)?;
    let lambda = lam[..m].to_vec();
    let slope = (0..m)
        .map(|i| (lam[m + i] - lam[2 * m + i]) / (up[i] - lo[i]))
        .collect();
    Ok((lambda, slope))
}

/// `∂ₓλ_k` for every path of a simulated batch, re-simulating from node `k`.
pub fn dlambda_dx<P: Controls + ?Sized>(
    market: &MarketParams,
    policy: &P,
    cfg: &RolloutConfig,
    setup: &crate::rollout::PathSetup,
    x_k: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    let times = setup.times(k);
    Ok(crn_costates(market, policy, cfg, &times, &setup.dt, x_k, &setup.increments[k..])?.1)
}

/// `Z = ∂ₓλ · X · Vᵀ π_risky`.
pub fn z_process(lambda_slope: f64, x: f64, market: &MarketParams, pi_risky: &[f64]) -> Vec<f64> {
    let n = market.n;
    (0..n)
        .map(|j| {
            let vt_pi: f64 = (j..n).map(|i| market.chol[[i, j]] * pi_risky[i]).sum();
            lambda_slope * x * vt_pi
        })
        .collect()
}

/// Rows per tape when estimating costates at many nodes.
pub const NODE_CHUNK: usize = 256;

/// Costates at arbitrary `(t, x)` nodes, averaged over `replicates`
/// independent paths started at each node.
///
/// Path noise is keyed by `(seed, iteration, node, replicate)`, so the
/// result does not depend on how nodes are split across workers.
pub fn node_costates<P: Controls + ?Sized>(
    market: &MarketParams,
    policy: &P,
    cfg: &RolloutConfig,
    nodes: &[(f64, f64)],
    replicates: usize,
    iteration: u64,
) -> Result<Vec<CostateSample>> {
    let replicates = replicates.max(1);
    let per_chunk = (NODE_CHUNK / replicates).max(1);
    let chunks: Vec<(usize, &[(f64, f64)])> = nodes
        .chunks(per_chunk)
        .enumerate()
        .map(|(c, s)| (c * per_chunk, s))
        .collect();
    let parts: Vec<Result<Vec<(f64, f64)>>> = chunks
        .par_iter()
        .map(|&(offset, chunk)| {
            let mut t = Vec::new();
            let mut x = Vec::new();
            let mut dt = Vec::new();
            let mut keys = Vec::new();
            for (j, &(tn, xn)) in chunk.iter().enumerate() {
                for r in 0..replicates {
                    t.push(tn);
                    x.push(xn);
                    dt.push((cfg.horizon - tn) / cfg.steps as f64);
                    keys.push(((offset + j) * replicates + r) as u64);
                }
            }
            let increments = keyed_increments(cfg, market.n, iteration, &dt, &keys);
            let (lam, slope) = crn_costates(market, policy, cfg, &t, &dt, &x, &increments)?;
            Ok((0..chunk.len())
                .map(|j| {
                    let s = j * replicates..(j + 1) * replicates;
                    let l = lam[s.clone()].iter().sum::<f64>() / replicates as f64;
                    let d = slope[s].iter().sum::<f64>() / replicates as f64;
                    (l, d)
                })
                .collect())
        })
        .collect();
    let mut pairs = Vec::with_capacity(nodes.len());
    for p in parts {
        pairs.extend(p?);
    }
    let t: Vec<f64> = nodes.iter().map(|p| p.0).collect();
    let x: Vec<f64> = nodes.iter().map(|p| p.1).collect();
    let (_, pi) = policy.evaluate(&t, &x);
    let simplex = policy.simplex();
    Ok(nodes
        .iter()
        .zip(pairs)
        .enumerate()
        .map(|(i, (&(tn, xn), (lambda, dlambda_dx)))| {
            let row = pi.row(i).to_vec();
            CostateSample {
                t: tn,
                x: xn,
                lambda,
                dlambda_dx,
                z: z_process(dlambda_dx, xn, market, risky_weights(&row, simplex)),
            }
        })
        .collect())
}

/// Increments whose row `i` comes from the stream keyed by `keys[i]`.
fn keyed_increments(cfg: &RolloutConfig, n: usize, iteration: u64, dt: &[f64], keys: &[u64]) -> Vec<Array2<f64>> {
    let mut out = vec![Array2::zeros((dt.len(), n)); cfg.steps];
    for (row, (&h, &key)) in dt.iter().zip(keys).enumerate() {
        let mut s = rng::substream(cfg.seed, Purpose::EvalBrownian, iteration, key);
        let sd = h.sqrt();
        for inc in out.iter_mut() {
            for j in 0..n {
                inc[[row, j]] = sd * rng::standard_normal(&mut s);
            }
        }
    }
    out
}
