//! Exponential-Euler wealth simulation and objective estimation.
//!
//! A batch of `M` paths is simulated in one set of matrix nodes: row `i`
//! of every node belongs to path `i`. Each path starts from its own
//! `(t₀, x₀)` and uses `m` steps of size `(T − t₀)/m`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PgdpoError, Result};
use crate::linalg_ad::{column, Matrix, Tape, Var};
use crate::market::MarketParams;
use crate::policy::Controls;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub horizon: f64,
    pub steps: usize,
    pub wealth_domain: (f64, f64),
    pub batch: usize,
    pub rho: f64,
    pub gamma: f64,
    pub kappa_bequest: f64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            horizon: 1.0,
            steps: 5,
            wealth_domain: (0.1, 2.0),
            batch: 1000,
            rho: 0.1,
            gamma: 2.0,
            kappa_bequest: 1.0,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PgdpoError::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        let (lo, hi) = self.wealth_domain;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("wealth domain must lie in (0, inf)");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if !(self.gamma > 0.0) || !self.rho.is_finite() || !(self.kappa_bequest >= 0.0) {
            return bad("gamma must be positive, rho finite, bequest weight non-negative");
        }
        Ok(())
    }
}

/// CRRA utility with the logarithmic branch at `γ = 1`.
pub fn utility(c: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        c.ln()
    } else {
        c.powf(1.0 - gamma) / (1.0 - gamma)
    }
}

pub fn marginal_utility(c: f64, gamma: f64) -> f64 {
    c.powf(-gamma)
}

/// Inverse of [`marginal_utility`].
pub fn inverse_marginal_utility(y: f64, gamma: f64) -> f64 {
    y.powf(-1.0 / gamma)
}

/// Uniform `(t₀, x₀)` pairs over `[0, T] x wealth_domain`.
pub fn sample_initial_nodes<R: rand::Rng + ?Sized>(
    cfg: &RolloutConfig,
    count: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let (lo, hi) = cfg.wealth_domain;
    (0..count)
        .map(|_| {
            let t = rng::uniform(rng, 0.0, cfg.horizon);
            let x = rng::uniform(rng, lo, hi);
            (t, x)
        })
        .collect()
}

/// Brownian increments, one `M x n` matrix per step, each path from its own stream.
pub fn draw_increments(
    seed: u64,
    purpose: Purpose,
    iteration: u64,
    dt: &[f64],
    steps: usize,
    n: usize,
) -> Vec<Array2<f64>> {
    let m = dt.len();
    let mut out = vec![Array2::zeros((m, n)); steps];
    for (i, &h) in dt.iter().enumerate() {
        let mut s = rng::substream(seed, purpose, iteration, i as u64);
        let sd = h.sqrt();
        for inc in out.iter_mut() {
            for j in 0..n {
                inc[[i, j]] = sd * rng::standard_normal(&mut s);
            }
        }
    }
    out
}

/// Starting nodes, step sizes and noise for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSetup {
    pub t0: Vec<f64>,
    pub x0: Vec<f64>,
    pub dt: Vec<f64>,
    pub increments: Vec<Array2<f64>>,
}

impl PathSetup {
    /// Setup for explicit nodes with the given increments.
    pub fn from_nodes(cfg: &RolloutConfig, nodes: &[(f64, f64)], increments: Vec<Array2<f64>>) -> Self {
        let t0: Vec<f64> = nodes.iter().map(|p| p.0).collect();
        let x0 = nodes.iter().map(|p| p.1).collect();
        let dt = t0.iter().map(|t| (cfg.horizon - t) / cfg.steps as f64).collect();
        PathSetup {
            t0,
            x0,
            dt,
            increments,
        }
    }

    /// Nodes and noise drawn from the `(seed, purpose, iteration)` streams.
    pub fn draw(cfg: &RolloutConfig, n: usize, iteration: u64, nodes_purpose: Purpose, noise_purpose: Purpose) -> Self {
        let mut s = rng::stream(cfg.seed, nodes_purpose, iteration);
        let nodes = sample_initial_nodes(cfg, cfg.batch, &mut s);
        let dt: Vec<f64> = nodes.iter().map(|p| (cfg.horizon - p.0) / cfg.steps as f64).collect();
        let inc = draw_increments(cfg.seed, noise_purpose, iteration, &dt, cfg.steps, n);
        PathSetup::from_nodes(cfg, &nodes, inc)
    }

    /// Training batch for one iteration.
    pub fn for_iteration(cfg: &RolloutConfig, n: usize, iteration: u64) -> Self {
        PathSetup::draw(cfg, n, iteration, Purpose::InitialNodes, Purpose::Brownian)
    }

    pub fn len(&self) -> usize {
        self.t0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t0.is_empty()
    }

    /// Time of step `k` on every path.
    pub fn times(&self, k: usize) -> Vec<f64> {
        self.t0.iter().zip(&self.dt).map(|(t, h)| t + k as f64 * h).collect()
    }

    /// Rows `range` as a smaller setup.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        PathSetup {
            t0: self.t0[range.clone()].to_vec(),
            x0: self.x0[range.clone()].to_vec(),
            dt: self.dt[range.clone()].to_vec(),
            increments: self
                .increments
                .iter()
                .map(|a| a.slice(ndarray::s![range.clone(), ..]).to_owned())
                .collect(),
        }
    }
}

/// Market constants registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MarketNodes {
    /// V (n x n), so that `π_rᵀ V` rows give `Vᵀ π_r`.
    pub chol: Var,
    /// Column `μ − r1`.
    pub excess: Var,
    /// Column `(r, μ)`.
    pub mu_tilde: Var,
}

impl MarketNodes {
    pub fn bind(tape: &mut Tape, m: &MarketParams) -> Self {
        MarketNodes {
            chol: tape.constant(m.chol.clone()),
            excess: tape.constant(column(&m.excess_return())),
            mu_tilde: tape.constant(column(&m.mu_tilde())),
        }
    }
}

/// Node handles of a simulated batch.
#[derive(Debug, Clone)]
pub struct PathNodes {
    /// Wealth at each of the `steps + 1` grid points.
    pub x: Vec<Var>,
    pub times: Vec<Vec<f64>>,
    pub consumption: Vec<Var>,
    pub weights: Vec<Var>,
    /// Discounted running utility per step.
    pub running: Vec<Var>,
    pub bequest: Var,
    /// Per-path objective, `M x 1`.
    pub j: Var,
}

/// Simulates from `x_start` at `times` using `increments.len()` steps.
#[allow(clippy::too_many_arguments)]
pub fn simulate_on_tape<P: Controls + ?Sized>(
    tape: &mut Tape,
    market: &MarketParams,
    mk: &MarketNodes,
    policy: &P,
    params: &[Var],
    cfg: &RolloutConfig,
    start_times: &[f64],
    dt: &[f64],
    x_start: Var,
    increments: &[Array2<f64>],
) -> PathNodes {
    let n = market.n;
    let simplex = policy.simplex();
    let dt_col = tape.constant(column(dt));
    let mut x = x_start;
    let mut xs = vec![x];
    let mut times = Vec::with_capacity(increments.len() + 1);
    let mut cs = Vec::new();
    let mut ws = Vec::new();
    let mut running = Vec::new();
    for (k, inc) in increments.iter().enumerate() {
        let tk: Vec<f64> = start_times.iter().zip(dt).map(|(t, h)| t + k as f64 * h).collect();
        let t_var = tape.column_constant(&tk);
        let c = policy.consumption(tape, params, t_var, x);
        let pi = policy.investment(tape, params, t_var, x);
        let (drift, risky) = if simplex {
            (tape.matmul(pi, mk.mu_tilde), tape.columns(pi, 1, n))
        } else {
            let d = tape.matmul(pi, mk.excess);
            (tape.shift(d, market.r), pi)
        };
        let a = tape.matmul(risky, mk.chol);
        let aa = tape.mul(a, a);
        let quad = tape.row_sum(aa);
        let dw = tape.constant(inc.clone());
        let adw = tape.mul(a, dw);
        let diffusion = tape.row_sum(adw);
        let c_over_x = tape.div(c, x);
        let half_quad = tape.scale(quad, 0.5);
        let e = tape.sub(drift, half_quad);
        let e = tape.sub(e, c_over_x);
        let e = tape.mul(e, dt_col);
        let e = tape.add(e, diffusion);
        let growth = tape.exp(e);
        let u = utility_node(tape, c, cfg.gamma);
        let w: Vec<f64> = tk.iter().zip(dt).map(|(t, h)| (-cfg.rho * t).exp() * h).collect();
        let w = tape.column_constant(&w);
        running.push(tape.mul(u, w));
        x = tape.mul(x, growth);
        xs.push(x);
        times.push(tk);
        cs.push(c);
        ws.push(pi);
    }
    times.push(vec![cfg.horizon; start_times.len()]);
    let ub = utility_node(tape, x, cfg.gamma);
    let bequest = tape.scale(ub, cfg.kappa_bequest * (-cfg.rho * cfg.horizon).exp());
    let mut j = bequest;
    for r in &running {
        j = tape.add(j, *r);
    }
    PathNodes {
        x: xs,
        times,
        consumption: cs,
        weights: ws,
        running,
        bequest,
        j,
    }
}

fn utility_node(tape: &mut Tape, c: Var, gamma: f64) -> Var {
    if gamma == 1.0 {
        tape.ln(c)
    } else {
        let p = tape.powf(c, 1.0 - gamma);
        tape.scale(p, 1.0 / (1.0 - gamma))
    }
}

/// A batch simulated on its own tape.
#[derive(Debug, Clone)]
pub struct TapedRollout {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub x0: Var,
    pub nodes: PathNodes,
    /// Batch mean of the per-path objective, `1 x 1`.
    pub j_hat: Var,
}

impl TapedRollout {
    /// Simulates `setup` under `policy`. With `trainable`, policy parameters
    /// are differentiable inputs; initial wealth always is.
    pub fn simulate<P: Controls + ?Sized>(
        market: &MarketParams,
        policy: &P,
        cfg: &RolloutConfig,
        setup: &PathSetup,
        trainable: bool,
    ) -> Result<Self> {
        if policy.n_assets() != market.n {
            return Err(PgdpoError::DimensionMismatch(format!(
                "policy has {} assets, market {}",
                policy.n_assets(),
                market.n
            )));
        }
        let mut tape = Tape::new();
        let params = policy.bind(&mut tape, trainable);
        let mk = MarketNodes::bind(&mut tape, market);
        let x0 = tape.column_input(&setup.x0);
        let nodes = simulate_on_tape(
            &mut tape,
            market,
            &mk,
            policy,
            &params,
            cfg,
            &setup.t0,
            &setup.dt,
            x0,
            &setup.increments,
        );
        let j_hat = tape.mean(nodes.j);
        let r = TapedRollout {
            tape,
            params,
            x0,
            nodes,
            j_hat,
        };
        r.check_consumption(cfg.gamma)?;
        Ok(r)
    }

    fn check_consumption(&self, gamma: f64) -> Result<()> {
        if gamma < 1.0 {
            return Ok(());
        }
        for &c in &self.nodes.consumption {
            if let Some(bad) = self.tape.value(c).iter().find(|v| !(**v > 0.0)) {
                return Err(PgdpoError::UtilityOverflow(*bad));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> f64 {
        self.tape.scalar(self.j_hat)
    }

    pub fn path_objectives(&self) -> Vec<f64> {
        self.tape.column_values(self.nodes.j)
    }

    pub fn to_batch(&self) -> RolloutBatch {
        let tape = &self.tape;
        let m = tape.shape(self.x0).0;
        let steps = self.nodes.consumption.len();
        let x = Array2::from_shape_fn((m, steps + 1), |(i, k)| tape.value(self.nodes.x[k])[[i, 0]]);
        let consumption = Array2::from_shape_fn((m, steps), |(i, k)| tape.value(self.nodes.consumption[k])[[i, 0]]);
        let running = Array2::from_shape_fn((m, steps), |(i, k)| tape.value(self.nodes.running[k])[[i, 0]]);
        RolloutBatch {
            x,
            times: self.nodes.times.clone(),
            consumption,
            weights: self.nodes.weights.iter().map(|w| tape.value(*w).clone()).collect(),
            running_utility: running,
            bequest_utility: tape.column_values(self.nodes.bequest),
            j: self.path_objectives(),
            j_hat: self.objective(),
        }
    }
}

/// Plain values of a simulated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    /// `M x (m+1)` wealth.
    pub x: Array2<f64>,
    /// `times[k][i]` is `t_k` on path `i`.
    pub times: Vec<Vec<f64>>,
    pub consumption: Array2<f64>,
    pub weights: Vec<Matrix>,
    pub running_utility: Array2<f64>,
    pub bequest_utility: Vec<f64>,
    pub j: Vec<f64>,
    pub j_hat: f64,
}

/// Objective estimate without gradients.
pub fn objective_estimate<P: Controls + ?Sized>(
    market: &MarketParams,
    policy: &P,
    cfg: &RolloutConfig,
    setup: &PathSetup,
) -> Result<(f64, Vec<f64>)> {
    let r = TapedRollout::simulate(market, policy, cfg, setup, false)?;
    Ok((r.objective(), r.path_objectives()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg_ad::SpdMatrix;
    use crate::policy::{ConsumptionRule, FixedPolicy};

    fn one_asset() -> MarketParams {
        MarketParams::new(0.03, vec![0.07], SpdMatrix::from_diagonal(&[0.04]).unwrap(), vec![0.5], 2.0, 0)
            .unwrap()
    }

    fn cfg(steps: usize) -> RolloutConfig {
        RolloutConfig {
            steps,
            batch: 3,
            ..RolloutConfig::default()
        }
    }

    #[test]
    fn cash_only_grows_at_risk_free_rate() {
        let m = one_asset();
        let c = RolloutConfig {
            gamma: 0.5,
            ..cfg(4)
        };
        let setup = PathSetup::from_nodes(&c, &[(0.0, 1.0)], draw_increments(1, Purpose::Scratch, 0, &[0.25], 4, 1));
        let p = FixedPolicy::cash_only(1, ConsumptionRule::Proportional(0.0));
        let b = TapedRollout::simulate(&m, &p, &c, &setup, false).unwrap().to_batch();
        for k in 0..4 {
            assert!((b.x[[0, k + 1]] - b.x[[0, k]] * (0.03f64 * 0.25).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn proportional_consumption_is_exact() {
        let m = one_asset();
        for steps in [1, 3, 7] {
            let c = cfg(steps);
            let setup = PathSetup::from_nodes(&c, &[(0.0, 1.5)], draw_increments(1, Purpose::Scratch, 0, &[1.0 / steps as f64], steps, 1));
            let p = FixedPolicy::cash_only(1, ConsumptionRule::Proportional(0.4));
            let b = TapedRollout::simulate(&m, &p, &c, &setup, false).unwrap().to_batch();
            let exact = 1.5 * ((0.03f64 - 0.4) * 1.0).exp();
            assert!((b.x[[0, steps]] - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn single_step_exponent_by_hand() {
        let m = one_asset();
        let c = cfg(1);
        let dw = 0.137;
        let setup = PathSetup::from_nodes(&c, &[(0.5, 1.2)], vec![Array2::from_elem((1, 1), dw)]);
        let p = FixedPolicy::risky(vec![0.6], ConsumptionRule::Constant(0.3));
        let b = TapedRollout::simulate(&m, &p, &c, &setup, false).unwrap().to_batch();
        let h = 0.5;
        let expo = (0.03 + 0.6 * 0.04 - 0.5 * 0.36 * 0.04 - 0.3 / 1.2) * h + 0.6 * 0.2 * dw;
        assert!((b.x[[0, 1]] - 1.2 * f64::exp(expo)).abs() < 1e-14);
    }

    #[test]
    fn log_utility_unit_consumption_has_zero_running_term() {
        let m = one_asset();
        let c = RolloutConfig {
            gamma: 1.0,
            ..cfg(3)
        };
        let setup = PathSetup::from_nodes(&c, &[(0.0, 1.0)], draw_increments(2, Purpose::Scratch, 0, &[1.0 / 3.0], 3, 1));
        let p = FixedPolicy::cash_only(1, ConsumptionRule::Constant(1.0));
        let b = TapedRollout::simulate(&m, &p, &c, &setup, false).unwrap().to_batch();
        assert!(b.running_utility.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nodes_are_uniform_in_box() {
        let c = RolloutConfig::default();
        let mut s = rng::stream(5, Purpose::InitialNodes, 0);
        let nodes = sample_initial_nodes(&c, 10_000, &mut s);
        assert!(nodes.iter().all(|(t, x)| (0.0..=1.0).contains(t) && (0.1..=2.0).contains(x)));
    }

    #[test]
    fn nonpositive_consumption_is_rejected() {
        let m = one_asset();
        let c = cfg(1);
        let setup = PathSetup::from_nodes(&c, &[(0.0, 1.0)], vec![Array2::zeros((1, 1))]);
        let p = FixedPolicy::cash_only(1, ConsumptionRule::Constant(0.0));
        assert!(matches!(
            TapedRollout::simulate(&m, &p, &c, &setup, false),
            Err(PgdpoError::UtilityOverflow(_))
        ));
        let c_half = RolloutConfig { gamma: 0.5, ..c };
        let (j, _) = objective_estimate(&m, &p, &c_half, &setup).unwrap();
        let xt = f64::exp(0.03);
        assert!((j - (-0.1f64).exp() * xt.sqrt() / 0.5).abs() < 1e-14);
    }
}
