//! The training loop and periodic evaluation.
//!
//! Every iteration draws fresh initial nodes and Brownian increments keyed
//! by `(seed, iteration)`, differentiates the batch objective and takes one
//! Adam ascent step. Evaluations score the networks and, in `oneshot` mode
//! after warm-up, the costate-derived controls against the reference rule.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{PgdpoError, Result};
use crate::market::MarketParams;
use crate::pgdpo::adam::{adam_step, AdamConfig, AdamState};
use crate::pgdpo::evaluate::{EvalMetrics, EvalRequest, Evaluator, PolicyScores};
use crate::pgdpo::gradients::{batch_gradient, ensure_finite};
use crate::pgdpo::oneshot::DEFAULT_EPSILON;
use crate::pgdpo::surrogate::SurrogateConfig;
use crate::policy::{Controls, PolicyPair};
use crate::rollout::{PathSetup, RolloutConfig};

/// Version tag written into every CSV row.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pgdpo,
    Oneshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nodes: usize,
    /// Paths averaged per node when estimating costates.
    pub replicates: usize,
    pub epsilon: f64,
    /// Evaluate when the iteration is a multiple of this (0 disables).
    pub every: u64,
    /// Additional iterations to evaluate at; surrogates are fitted here and
    /// at the final iteration.
    pub milestones: Vec<u64>,
    pub surrogate: SurrogateConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nodes: 1000,
            replicates: 16,
            epsilon: DEFAULT_EPSILON,
            every: 500,
            milestones: Vec::new(),
            surrogate: SurrogateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub warmup: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub constrained: bool,
    pub mode: Mode,
    pub workers: usize,
    pub checkpoint_every: u64,
    pub rolling_window: usize,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            warmup: 1000,
            adam: AdamConfig::default(),
            seed: 0,
            constrained: false,
            mode: Mode::Pgdpo,
            workers: 1,
            checkpoint_every: 500,
            rolling_window: 500,
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PgdpoError::InvalidConfig(m.into()));
        if !(self.adam.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.iterations == 0 {
            return bad("need at least one iteration");
        }
        if self.warmup >= self.iterations {
            return bad("warm-up must be shorter than the run");
        }
        if self.workers == 0 || self.rolling_window == 0 {
            return bad("workers and rolling window must be positive");
        }
        if self.eval.nodes == 0 || self.eval.replicates == 0 || !(self.eval.epsilon > 0.0) {
            return bad("evaluation needs nodes, replicates and a positive barrier weight");
        }
        self.eval.surrogate.validate()?;
        self.effective_rollout().validate()
    }

    /// Rollout settings with the run seed applied.
    pub fn effective_rollout(&self) -> RolloutConfig {
        RolloutConfig {
            seed: self.seed,
            ..self.rollout.clone()
        }
    }

    fn evaluates_at(&self, it: u64) -> bool {
        it == self.iterations || (self.eval.every > 0 && it % self.eval.every == 0) || self.eval.milestones.contains(&it)
    }

    fn fits_surrogate_at(&self, it: u64) -> bool {
        self.constrained
            && self.mode == Mode::Oneshot
            && it >= self.warmup
            && (it == self.iterations || self.eval.milestones.contains(&it))
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub iteration: u64,
    pub objective: f64,
    pub utility_rolling_mean: f64,
    pub grad_norm: f64,
    pub eval_iteration: Option<u64>,
    pub net_consumption_rel_mse: Option<f64>,
    pub net_investment_rel_mse: Option<f64>,
    pub net_investment_mse_min: Option<f64>,
    pub net_investment_mse_max: Option<f64>,
    pub net_foc_consumption_mse: Option<f64>,
    pub net_foc_investment_mse: Option<f64>,
    pub net_foc_consumption_mse_scaled: Option<f64>,
    pub net_foc_investment_mse_scaled: Option<f64>,
    pub os_consumption_rel_mse: Option<f64>,
    pub os_investment_rel_mse: Option<f64>,
    pub os_investment_mse_min: Option<f64>,
    pub os_investment_mse_max: Option<f64>,
    pub os_foc_consumption_mse: Option<f64>,
    pub os_foc_investment_mse: Option<f64>,
    pub os_foc_consumption_mse_scaled: Option<f64>,
    pub os_foc_investment_mse_scaled: Option<f64>,
}

type ScoreColumns = [Option<f64>; 8];

fn score_columns(s: Option<&PolicyScores>) -> ScoreColumns {
    let Some(s) = s else { return [None; 8] };
    let f = s.foc;
    [
        Some(s.consumption_rel_mse),
        Some(s.investment_rel_mse),
        Some(s.investment_min()),
        Some(s.investment_max()),
        f.map(|f| f.consumption_mse),
        f.map(|f| f.investment_mse),
        f.map(|f| f.consumption_mse_scaled),
        f.map(|f| f.investment_mse_scaled),
    ]
}

impl MetricRecord {
    /// Row for `iteration`, carrying forward the latest evaluation.
    pub fn new(iteration: u64, objective: f64, rolling: f64, grad_norm: f64, eval: Option<&EvalMetrics>) -> Self {
        let [a, b, c, d, e, f, g, h] = score_columns(eval.map(|e| &e.net));
        let [i, j, k, l, m, n, o, p] = score_columns(eval.and_then(|e| e.oneshot.as_ref()));
        MetricRecord {
            schema_version: SCHEMA_VERSION,
            iteration,
            objective,
            utility_rolling_mean: rolling,
            grad_norm,
            eval_iteration: eval.map(|e| e.iteration),
            net_consumption_rel_mse: a,
            net_investment_rel_mse: b,
            net_investment_mse_min: c,
            net_investment_mse_max: d,
            net_foc_consumption_mse: e,
            net_foc_investment_mse: f,
            net_foc_consumption_mse_scaled: g,
            net_foc_investment_mse_scaled: h,
            os_consumption_rel_mse: i,
            os_investment_rel_mse: j,
            os_investment_mse_min: k,
            os_investment_mse_max: l,
            os_foc_consumption_mse: m,
            os_foc_investment_mse: n,
            os_foc_consumption_mse_scaled: o,
            os_foc_investment_mse_scaled: p,
        }
    }
}

/// Everything besides the networks needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: u64,
    pub adam: AdamState,
    pub recent_objectives: VecDeque<f64>,
    pub last_eval: Option<EvalMetrics>,
}

pub struct Trainer<'a> {
    pub market: &'a MarketParams,
    pub cfg: TrainConfig,
    pub pair: PolicyPair,
    pub state: TrainerState,
    /// The most recent surrogate, when one has been fitted.
    pub surrogate: Option<PolicyPair>,
    pub evaluator: Evaluator<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(market: &'a MarketParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let pair = PolicyPair::new(market.n, cfg.constrained, cfg.rollout.horizon, cfg.seed)?;
        let state = TrainerState {
            iteration: 0,
            adam: AdamState::new(pair.param_count()),
            recent_objectives: VecDeque::new(),
            last_eval: None,
        };
        Trainer::resume(market, cfg, pair, state)
    }

    /// Continues from saved networks and state.
    pub fn resume(market: &'a MarketParams, cfg: TrainConfig, pair: PolicyPair, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        if pair.n_assets() != market.n || pair.simplex() != cfg.constrained {
            return Err(PgdpoError::Mismatch("networks do not match the market or constraint".into()));
        }
        if state.adam.m.len() != pair.param_count() {
            return Err(PgdpoError::Mismatch("optimizer state does not match the networks".into()));
        }
        let evaluator = Evaluator::new(market, cfg.effective_rollout(), cfg.constrained, cfg.eval.clone())?;
        Ok(Trainer {
            market,
            cfg,
            pair,
            state,
            surrogate: None,
            evaluator,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn finished(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    pub fn rolling_mean(&self) -> f64 {
        let q = &self.state.recent_objectives;
        q.iter().sum::<f64>() / q.len().max(1) as f64
    }

    /// One gradient step, followed by an evaluation when one is due.
    pub fn step(&mut self) -> Result<MetricRecord> {
        let it = self.state.iteration + 1;
        let rollout = &self.evaluator.rollout;
        let setup = PathSetup::for_iteration(rollout, self.market.n, it);
        let (objective, grad) = batch_gradient(self.market, &self.pair, rollout, &setup, self.cfg.workers)?;
        ensure_finite(objective, &grad, it, self.cfg.seed)?;
        let mut params = self.pair.flat_params();
        adam_step(&mut params, &grad, &mut self.state.adam, &self.cfg.adam);
        self.pair.set_flat_params(&params);
        self.state.iteration = it;
        let q = &mut self.state.recent_objectives;
        q.push_back(objective);
        while q.len() > self.cfg.rolling_window {
            q.pop_front();
        }
        if self.cfg.evaluates_at(it) {
            let e = self.evaluate()?;
            self.state.last_eval = Some(e);
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        Ok(MetricRecord::new(it, objective, self.rolling_mean(), grad_norm, self.state.last_eval.as_ref()))
    }

    /// Scores the current networks, plus costate-derived controls once warm-up
    /// is over in `oneshot` mode.
    pub fn evaluate(&mut self) -> Result<EvalMetrics> {
        let it = self.state.iteration;
        let req = EvalRequest {
            iteration: it,
            oneshot: self.cfg.mode == Mode::Oneshot && it >= self.cfg.warmup,
            surrogate: self.cfg.fits_surrogate_at(it),
        };
        let (metrics, surrogate) = self.evaluator.evaluate(&self.pair, Some(&self.pair), req, &self.cfg.adam)?;
        if surrogate.is_some() {
            self.surrogate = surrogate;
        }
        Ok(metrics)
    }

    /// Runs to the configured iteration count, handing each row to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Trainer<'a>, &MetricRecord) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let rec = self.step()?;
            sink(self, &rec)?;
        }
        Ok(())
    }
}
