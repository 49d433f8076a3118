mod common;

use pgdpo::costate::CostateSample;
use pgdpo::merton_reference::{optimal_weights, value_ode_oracle};
use pgdpo::pgdpo::gradients::{pathwise_gradients, pontryagin_assembly, relative_gap};
use pgdpo::pgdpo::oneshot::oneshot_controls;
use pgdpo::pgdpo::surrogate::SurrogateConfig;
use pgdpo::pgdpo::train::{EvalConfig, Mode, TrainConfig, Trainer};
use pgdpo::rollout::{PathSetup, RolloutConfig};
use proptest::prelude::*;

use common::{jitter, market, rollout_cfg, small_pair};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn autodiff_gradient_equals_pontryagin_assembly(
        n in 1usize..=3,
        steps in 1usize..=3,
        batch in 1usize..=8,
        constrained in any::<bool>(),
        seed in any::<u64>(),
        scale in 0.0..0.3f64,
    ) {
        let m = market(n, seed);
        let mut pair = small_pair(n, constrained, 8, seed);
        jitter(&mut pair, scale, seed);
        let cfg = rollout_cfg(steps, batch, seed);
        let setup = PathSetup::for_iteration(&cfg, n, 0);
        let g = pathwise_gradients(&m, &pair, &cfg, &setup).unwrap();
        let manual = pontryagin_assembly(&m, &pair, &cfg, &setup, &g.batch, &g.lambdas);
        let gap = relative_gap(&g.grad, &manual);
        prop_assert!(gap <= 1e-6, "relative gap {gap:e}");
    }

    #[test]
    fn oracle_costates_give_merton_controls(
        n in 1usize..20,
        seed in any::<u64>(),
        t in 0.0..0.95f64,
        x in 0.1..2.0f64,
    ) {
        let m = market(n, seed);
        let cfg = RolloutConfig::default();
        let ode = value_ode_oracle(&m, cfg.gamma, cfg.rho, cfg.kappa_bequest, cfg.horizon, 400).unwrap();
        let sample = CostateSample { t, x, lambda: ode.costate(t, x), dlambda_dx: ode.costate_slope(t, x), z: vec![] };
        let c = oneshot_controls(&sample, &m, false, cfg.gamma, cfg.rho).unwrap();
        let (pi, _) = optimal_weights(&m, cfg.gamma).unwrap();
        let expected_c = ode.consumption_ratio(t) * x;
        prop_assert!((c.consumption - expected_c).abs() <= 1e-10 * expected_c);
        for (a, b) in c.weights.iter().zip(&pi) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }
}

fn tiny_config(constrained: bool, mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 6,
        warmup: 2,
        seed,
        constrained,
        mode,
        rollout: RolloutConfig { batch: 16, ..RolloutConfig::default() },
        eval: EvalConfig {
            nodes: 24,
            replicates: 2,
            every: 3,
            surrogate: SurrogateConfig { samples: 120, epochs: 2, batch: 40, ..SurrogateConfig::default() },
            ..EvalConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn every_emitted_constrained_control_is_on_the_simplex() {
    let m = market(4, 21);
    let mut t = Trainer::new(&m, tiny_config(true, Mode::Oneshot, 5)).unwrap();
    let mut checked = 0;
    while !t.finished() {
        t.step().unwrap();
        if let Some(e) = &t.state.last_eval {
            let v = e.simplex_violation.unwrap();
            assert!(v <= 1e-8, "violation {v:e} at {}", e.iteration);
            checked += 1;
        }
    }
    assert!(checked > 0);
    assert!(t.surrogate.is_some());
}

#[test]
fn identical_runs_give_identical_records() {
    let m = market(3, 2);
    let run = || {
        let mut t = Trainer::new(&m, tiny_config(false, Mode::Oneshot, 9)).unwrap();
        let mut out = Vec::new();
        while !t.finished() {
            out.push(serde_json::to_string(&t.step().unwrap()).unwrap());
        }
        (out, t.pair.flat_params())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
