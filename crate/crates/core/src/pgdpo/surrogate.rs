//! Regression of networks onto pointwise controls.
//!
//! Costate-derived controls exist only at the nodes where costates were
//! estimated. Fitting a network pair to them gives a policy that can itself
//! be rolled out, so its costates and residuals can be measured like any
//! other policy. Simplex and positive outputs are fitted in log space, which
//! keeps the tiny weights produced by the barrier visible to the loss.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{PgdpoError, Result};
use crate::linalg_ad::{Tape, Var};
use crate::pgdpo::adam::{adam_step, AdamConfig, AdamState};
use crate::policy::{Head, PolicyNet, PolicyPair};
use crate::rng::{self, Purpose};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Falls back to the training learning rate when unset.
    pub learning_rate: Option<f64>,
    /// Fraction of samples kept out of the fit for scoring.
    pub holdout: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            samples: 100_000,
            epochs: 50,
            batch: 1000,
            learning_rate: None,
            holdout: 0.1,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.epochs == 0 || self.batch == 0 {
            return Err(PgdpoError::InvalidConfig("surrogate needs samples ≥ 2, epochs ≥ 1, batch ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(PgdpoError::InvalidConfig("surrogate holdout must lie in [0, 1)".into()));
        }
        if matches!(self.learning_rate, Some(lr) if !(lr > 0.0)) {
            return Err(PgdpoError::InvalidConfig("surrogate learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Controls to imitate, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTargets {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub consumption: Vec<f64>,
    /// In the investment network's output layout.
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SurrogateFit {
    pub pair: PolicyPair,
    /// Held-out squared error over target variance, in the fitted space.
    pub investment_holdout: f64,
    pub consumption_holdout: f64,
}

/// Network output in the space the loss is measured in.
fn fitted_output(net: &PolicyNet, tape: &mut Tape, vars: &[Var], t: Var, x: Var) -> Var {
    match net.head() {
        Head::Simplex => {
            let z = net.pre_head(tape, vars, t, x);
            tape.log_softmax_rows(z)
        }
        Head::Positive => {
            let z = net.pre_head(tape, vars, t, x);
            let c = tape.softplus(z);
            tape.ln(c)
        }
        _ => net.forward_tape(tape, vars, t, x),
    }
}

fn fitted_target(head: Head, values: &Array2<f64>) -> Array2<f64> {
    match head {
        Head::Simplex | Head::Positive => values.mapv(f64::ln),
        _ => values.clone(),
    }
}

fn rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(ndarray::Axis(0), idx)
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Mean squared error and its parameter gradient on the rows `idx`.
fn loss_and_grad(net: &PolicyNet, t: &[f64], x: &[f64], target: &Array2<f64>, idx: &[usize]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true);
    let tv = tape.column_constant(&pick(t, idx));
    let xv = tape.column_constant(&pick(x, idx));
    let out = fitted_output(net, &mut tape, &vars, tv, xv);
    let y = tape.constant(rows(target, idx));
    let d = tape.sub(out, y);
    let sq = tape.mul(d, d);
    let loss = tape.mean(sq);
    let adj = tape.backward_sweep(loss);
    (tape.scalar(loss), net.collect_grads(&adj, &vars))
}

/// Held-out squared error divided by the per-column target variance, summed.
fn holdout_score(net: &PolicyNet, t: &[f64], x: &[f64], target: &Array2<f64>, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, false);
    let tv = tape.column_constant(&pick(t, idx));
    let xv = tape.column_constant(&pick(x, idx));
    let out = fitted_output(net, &mut tape, &vars, tv, xv);
    let pred = tape.value(out);
    let y = rows(target, idx);
    let err: f64 = (pred - &y).mapv(|v| v * v).sum();
    let var: f64 = y
        .columns()
        .into_iter()
        .map(|c| {
            let m = c.mean().unwrap_or(0.0);
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        })
        .sum();
    if var > 0.0 {
        err / var
    } else {
        err / idx.len() as f64
    }
}

fn fit_net(
    init: &PolicyNet,
    targets: &SurrogateTargets,
    values: &Array2<f64>,
    split: (&[usize], &[usize]),
    cfg: &SurrogateConfig,
    adam: &AdamConfig,
    stream: &mut rng::Stream,
) -> (PolicyNet, f64) {
    let mut net = init.clone();
    let target = fitted_target(net.head(), values);
    let mut state = AdamState::new(net.params.len());
    let mut order = split.0.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(stream);
        for idx in order.chunks(cfg.batch) {
            let (_, g) = loss_and_grad(&net, &targets.t, &targets.x, &target, idx);
            let descent: Vec<f64> = g.iter().map(|v| -v).collect();
            adam_step(&mut net.params, &descent, &mut state, adam);
        }
    }
    let score = holdout_score(&net, &targets.t, &targets.x, &target, split.1);
    (net, score)
}

/// Fits both networks to `targets`, starting from `init`.
///
/// Rows are split once into fit and held-out parts; minibatch order is
/// reshuffled every epoch from the surrogate stream keyed by `index`.
pub fn fit_surrogate(
    init: &PolicyPair,
    targets: &SurrogateTargets,
    cfg: &SurrogateConfig,
    adam: &AdamConfig,
    seed: u64,
    index: u64,
) -> Result<SurrogateFit> {
    cfg.validate()?;
    let count = targets.t.len();
    if targets.x.len() != count || targets.consumption.len() != count || targets.weights.nrows() != count {
        return Err(PgdpoError::DimensionMismatch("surrogate targets have ragged rows".into()));
    }
    if targets.weights.ncols() != init.investment.shape.output_dim() {
        return Err(PgdpoError::DimensionMismatch("surrogate weights do not match the investment head".into()));
    }
    let mut stream = rng::stream(seed, Purpose::Surrogate, index);
    let mut all: Vec<usize> = (0..count).collect();
    all.shuffle(&mut stream);
    let held = ((count as f64) * cfg.holdout).round() as usize;
    let (held_idx, fit_idx) = all.split_at(held.min(count - 1));
    let consumption = Array2::from_shape_vec((count, 1), targets.consumption.clone()).expect("column");
    let (investment, investment_holdout) =
        fit_net(&init.investment, targets, &targets.weights, (fit_idx, held_idx), cfg, adam, &mut stream);
    let (consumption, consumption_holdout) =
        fit_net(&init.consumption, targets, &consumption, (fit_idx, held_idx), cfg, adam, &mut stream);
    Ok(SurrogateFit {
        pair: PolicyPair {
            investment,
            consumption,
        },
        investment_holdout,
        consumption_holdout,
    })
}
