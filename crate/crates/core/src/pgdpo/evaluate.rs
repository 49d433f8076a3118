//! Scoring any policy at fixed nodes against the reference rule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::costate::{node_costates, CostateSample};
use crate::error::Result;
use crate::market::MarketParams;
use crate::pgdpo::adam::AdamConfig;
use crate::pgdpo::metrics::{eval_nodes, foc_residuals, relative_mse, relative_mse_scalar, FocResiduals, ReferenceRule, HORIZON_MARGIN};
use crate::pgdpo::oneshot::OneShotSolver;
use crate::pgdpo::surrogate::{fit_surrogate, SurrogateFit, SurrogateTargets};
use crate::pgdpo::train::EvalConfig;
use crate::policy::{Controls, PolicyPair};
use crate::rng::{self, Purpose};
use crate::rollout::{sample_initial_nodes, RolloutConfig};

/// Scores of one policy at the evaluation nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScores {
    pub consumption_rel_mse: f64,
    pub investment_rel_mse: f64,
    pub per_asset: Vec<f64>,
    pub foc: Option<FocScores>,
}

impl PolicyScores {
    pub fn investment_min(&self) -> f64 {
        self.per_asset.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn investment_max(&self) -> f64 {
        self.per_asset.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocScores {
    pub consumption_mse: f64,
    pub investment_mse: f64,
    pub consumption_mse_scaled: f64,
    pub investment_mse_scaled: f64,
}

impl From<FocResiduals> for FocScores {
    fn from(f: FocResiduals) -> Self {
        FocScores {
            consumption_mse: f.consumption_mse,
            investment_mse: f.investment_mse,
            consumption_mse_scaled: f.consumption_mse_scaled,
            investment_mse_scaled: f.investment_mse_scaled,
        }
    }
}

/// Result of one evaluation.
///
/// `oneshot` scores the costate-derived controls at the nodes. Its residuals
/// come from those controls with the same costates when unconstrained, and
/// from a fitted surrogate under the surrogate's own costates when
/// constrained (absent when no surrogate was fitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub iteration: u64,
    pub net: PolicyScores,
    pub oneshot: Option<PolicyScores>,
    /// Largest simplex violation among all weights emitted in this evaluation.
    pub simplex_violation: Option<f64>,
    pub surrogate_holdout: Option<f64>,
}

/// What to compute beyond the policy's own scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRequest {
    pub iteration: u64,
    pub oneshot: bool,
    pub surrogate: bool,
}

pub fn weight_rows(w: &Array2<f64>) -> Vec<Vec<f64>> {
    w.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Worst of negative weight and budget mismatch over all rows.
pub fn simplex_violation(rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .map(|r| {
            let neg = r.iter().copied().fold(0.0f64, |a, v| a.max(-v));
            neg.max((r.iter().sum::<f64>() - 1.0).abs())
        })
        .fold(0.0, f64::max)
}

pub struct Evaluator<'a> {
    pub market: &'a MarketParams,
    pub rollout: RolloutConfig,
    pub constrained: bool,
    pub cfg: EvalConfig,
    pub reference: ReferenceRule,
    pub nodes: Vec<(f64, f64)>,
}

impl<'a> Evaluator<'a> {
    /// Nodes are drawn from the evaluation stream of `rollout.seed`.
    pub fn new(market: &'a MarketParams, rollout: RolloutConfig, constrained: bool, cfg: EvalConfig) -> Result<Self> {
        let reference = ReferenceRule::for_market(market, &rollout, constrained)?;
        let nodes = eval_nodes(&rollout, cfg.nodes, rollout.seed);
        Ok(Evaluator {
            market,
            rollout,
            constrained,
            cfg,
            reference,
            nodes,
        })
    }

    fn node_columns(&self) -> (Vec<f64>, Vec<f64>) {
        self.nodes.iter().copied().unzip()
    }

    pub fn score(&self, consumption: &[f64], weights: &[Vec<f64>]) -> Result<PolicyScores> {
        let rc: Vec<f64> = self.nodes.iter().map(|&(t, x)| self.reference.consumption(t, x)).collect();
        let rw = vec![self.reference.weights.clone(); self.nodes.len()];
        let inv = relative_mse(weights, &rw)?;
        Ok(PolicyScores {
            consumption_rel_mse: relative_mse_scalar(consumption, &rc)?,
            investment_rel_mse: inv.mse,
            per_asset: inv.per_asset,
            foc: None,
        })
    }

    pub fn foc(&self, samples: &[CostateSample], consumption: &[f64], weights: &[Vec<f64>]) -> FocScores {
        foc_residuals(
            self.market,
            samples,
            consumption,
            weights,
            self.constrained,
            self.rollout.gamma,
            self.rollout.rho,
            self.cfg.epsilon,
        )
        .into()
    }

    pub fn costates<P: Controls + ?Sized>(
        &self,
        policy: &P,
        nodes: &[(f64, f64)],
        iteration: u64,
    ) -> Result<Vec<CostateSample>> {
        node_costates(self.market, policy, &self.rollout, nodes, self.cfg.replicates, iteration)
    }

    pub fn solver(&self) -> OneShotSolver<'a> {
        OneShotSolver::new(
            self.market,
            self.rollout.gamma,
            self.rollout.rho,
            self.constrained,
            self.cfg.epsilon,
        )
    }

    /// Scores `policy` itself, with residuals under its own costates.
    pub fn policy_scores<P: Controls + ?Sized>(
        &self,
        policy: &P,
        iteration: u64,
    ) -> Result<(PolicyScores, Vec<CostateSample>, Vec<Vec<f64>>)> {
        let (t, x) = self.node_columns();
        let (c, w) = policy.evaluate(&t, &x);
        let w = weight_rows(&w);
        let samples = self.costates(policy, &self.nodes, iteration)?;
        let mut s = self.score(&c, &w)?;
        s.foc = Some(self.foc(&samples, &c, &w));
        Ok((s, samples, w))
    }

    /// Fits a surrogate to costate-derived controls of `policy` at fresh nodes.
    pub fn fit_surrogate<P: Controls + ?Sized>(
        &self,
        policy: &P,
        init: &PolicyPair,
        iteration: u64,
        adam: &AdamConfig,
    ) -> Result<SurrogateFit> {
        let sc = &self.cfg.surrogate;
        let seed = self.rollout.seed;
        let mut s = rng::stream(seed, Purpose::Surrogate, iteration);
        let nodes: Vec<(f64, f64)> = sample_initial_nodes(&self.rollout, sc.samples, &mut s)
            .into_iter()
            .filter(|(t, _)| self.rollout.horizon - t >= HORIZON_MARGIN)
            .collect();
        let samples = self.costates(policy, &nodes, iteration)?;
        let controls = self.solver().controls_at(&samples)?;
        let width = init.investment.shape.output_dim();
        let mut weights = Array2::zeros((nodes.len(), width));
        for (i, c) in controls.iter().enumerate() {
            weights.row_mut(i).assign(&ndarray::ArrayView1::from(&c.weights));
        }
        let (t, x) = nodes.iter().copied().unzip();
        let targets = SurrogateTargets {
            t,
            x,
            consumption: controls.iter().map(|c| c.consumption).collect(),
            weights,
        };
        let adam = AdamConfig {
            learning_rate: sc.learning_rate.unwrap_or(adam.learning_rate),
            ..*adam
        };
        fit_surrogate(init, &targets, sc, &adam, seed, iteration)
    }

    /// Full evaluation of `policy`; returns the fitted surrogate if one was
    /// requested. `warm` seeds the surrogate fit (fresh networks otherwise).
    pub fn evaluate<P: Controls + ?Sized>(
        &self,
        policy: &P,
        warm: Option<&PolicyPair>,
        req: EvalRequest,
        adam: &AdamConfig,
    ) -> Result<(EvalMetrics, Option<PolicyPair>)> {
        let it = req.iteration;
        let (net, samples, w_net) = self.policy_scores(policy, it)?;
        let mut violation = self.constrained.then(|| simplex_violation(&w_net));
        let mut oneshot = None;
        let mut surrogate = None;
        let mut surrogate_holdout = None;
        if req.oneshot {
            let controls = self.solver().controls_at(&samples)?;
            let clamped = controls.iter().filter(|c| c.slope_clamped).count();
            if clamped > 0 {
                log::info!("{clamped} of {} nodes had a non-negative costate slope and were clamped", controls.len());
            }
            let c_os: Vec<f64> = controls.iter().map(|c| c.consumption).collect();
            let w_os: Vec<Vec<f64>> = controls.into_iter().map(|c| c.weights).collect();
            let mut scores = self.score(&c_os, &w_os)?;
            if self.constrained {
                violation = violation.map(|v| v.max(simplex_violation(&w_os)));
                if req.surrogate {
                    let fresh;
                    let init = match warm {
                        Some(p) => p,
                        None => {
                            fresh = PolicyPair::new(self.market.n, true, self.rollout.horizon, self.rollout.seed)?;
                            &fresh
                        }
                    };
                    let fit = self.fit_surrogate(policy, init, it, adam)?;
                    let (t, x) = self.node_columns();
                    let (c_s, w_s) = fit.pair.evaluate(&t, &x);
                    let w_s = weight_rows(&w_s);
                    violation = violation.map(|v| v.max(simplex_violation(&w_s)));
                    let own = self.costates(&fit.pair, &self.nodes, it)?;
                    scores.foc = Some(self.foc(&own, &c_s, &w_s));
                    surrogate_holdout = Some(fit.investment_holdout).filter(|v| v.is_finite());
                    surrogate = Some(fit.pair);
                }
            } else {
                scores.foc = Some(self.foc(&samples, &c_os, &w_os));
            }
            oneshot = Some(scores);
        }
        Ok((
            EvalMetrics {
                iteration: it,
                net,
                oneshot,
                simplex_violation: violation,
                surrogate_holdout,
            },
            surrogate,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_market, MarketSpec};

    #[test]
    fn reference_policy_scores_zero() {
        let m = generate_market(&MarketSpec::new(4, 8)).unwrap();
        let rollout = RolloutConfig {
            seed: 3,
            ..RolloutConfig::default()
        };
        let cfg = EvalConfig {
            nodes: 50,
            replicates: 4,
            ..EvalConfig::default()
        };
        for constrained in [false, true] {
            let ev = Evaluator::new(&m, rollout.clone(), constrained, cfg.clone()).unwrap();
            let (s, _, _) = ev.policy_scores(&ev.reference.policy(), 0).unwrap();
            assert!(s.consumption_rel_mse < 1e-20 && s.investment_rel_mse < 1e-20);
        }
    }

    #[test]
    fn violation_measures_the_worst_row() {
        assert_eq!(simplex_violation(&[vec![0.5, 0.5], vec![1.25, -0.25]]), 0.25);
        assert!(simplex_violation(&[vec![0.4, 0.4]]) - 0.2 < 1e-15);
    }
}
