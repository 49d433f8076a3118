//! Shared fixtures and an independent second-derivative oracle.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::Array2;
use pgdpo::market::{generate_market, MarketParams, MarketSpec};
use pgdpo::policy::{init_params, Head, PolicyNet, PolicyPair};
use pgdpo::rollout::RolloutConfig;

pub fn market(n: usize, seed: u64) -> MarketParams {
    generate_market(&MarketSpec::new(n, seed)).unwrap()
}

/// Networks with narrow hidden layers so tests stay fast.
pub fn small_pair(n: usize, constrained: bool, width: usize, seed: u64) -> PolicyPair {
    let mut pair = PolicyPair::new(n, constrained, 1.0, seed).unwrap();
    for net in [&mut pair.investment, &mut pair.consumption] {
        net.shape.hidden = vec![width, width];
        net.params = init_params(&net.shape, seed);
    }
    pair
}

/// Perturbs every parameter so heads leave their flat initial state.
pub fn jitter(pair: &mut PolicyPair, scale: f64, seed: u64) {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for p in pair.investment.params.iter_mut().chain(pair.consumption.params.iter_mut()) {
        *p += scale * next();
    }
}

pub fn rollout_cfg(steps: usize, batch: usize, seed: u64) -> RolloutConfig {
    RolloutConfig {
        steps,
        batch,
        seed,
        ..RolloutConfig::default()
    }
}

/// Number with two nilpotent tangents, `a + b ε₁ + c ε₂ + d ε₁ε₂`.
/// Seeding both tangents on one input yields its second derivative in `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperDual {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl HyperDual {
    pub fn constant(a: f64) -> Self {
        HyperDual { a, b: 0.0, c: 0.0, d: 0.0 }
    }

    pub fn variable(a: f64) -> Self {
        HyperDual { a, b: 1.0, c: 1.0, d: 0.0 }
    }

    /// Applies a scalar map given its value, first and second derivative.
    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        HyperDual {
            a: f,
            b: df * self.b,
            c: df * self.c,
            d: df * self.d + ddf * self.b * self.c,
        }
    }

    pub fn exp(self) -> Self {
        let e = self.a.exp();
        self.chain(e, e, e)
    }

    pub fn ln(self) -> Self {
        let a = self.a;
        self.chain(a.ln(), 1.0 / a, -1.0 / (a * a))
    }

    pub fn powf(self, p: f64) -> Self {
        let a = self.a;
        self.chain(a.powf(p), p * a.powf(p - 1.0), p * (p - 1.0) * a.powf(p - 2.0))
    }

    pub fn softplus(self) -> Self {
        let a = self.a;
        let s = 1.0 / (1.0 + (-a).exp());
        self.chain(a.max(0.0) + (-a.abs()).exp().ln_1p(), s, s * (1.0 - s))
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        if self.a > 0.0 {
            self
        } else {
            self.chain(slope * self.a, slope, 0.0)
        }
    }

    pub fn scale(self, s: f64) -> Self {
        HyperDual {
            a: s * self.a,
            b: s * self.b,
            c: s * self.c,
            d: s * self.d,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        HyperDual {
            a: self.a + o.a,
            b: self.b + o.b,
            c: self.c + o.c,
            d: self.d + o.d,
        }
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        HyperDual {
            a: self.a * o.a,
            b: self.a * o.b + self.b * o.a,
            c: self.a * o.c + self.c * o.a,
            d: self.a * o.d + self.b * o.c + self.c * o.b + self.d * o.a,
        }
    }
}

impl Div for HyperDual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let a = o.a;
        self * o.chain(1.0 / a, -1.0 / (a * a), 2.0 / (a * a * a))
    }
}

/// Network forward pass in hyper-dual arithmetic, written from the layer
/// layout alone (row-major `out x in` weights, then biases). The sign of
/// every hidden pre-activation is appended to `pattern`.
pub fn net_forward(net: &PolicyNet, t: f64, x: HyperDual, pattern: &mut Vec<bool>) -> Vec<HyperDual> {
    let mut h = vec![HyperDual::constant(t / net.horizon), x];
    let layers = net.shape.layers();
    let mut off = 0;
    for (l, &(fan_out, fan_in)) in layers.iter().enumerate() {
        let w = &net.params[off..off + fan_out * fan_in];
        off += fan_out * fan_in;
        let b = &net.params[off..off + fan_out];
        off += fan_out;
        let mut out: Vec<HyperDual> = (0..fan_out)
            .map(|j| {
                (0..fan_in).fold(HyperDual::constant(b[j]), |acc, i| acc + h[i].scale(w[j * fan_in + i]))
            })
            .collect();
        if l + 1 < layers.len() {
            pattern.extend(out.iter().map(|v| v.a > 0.0));
            out = out.into_iter().map(|v| v.leaky_relu(pgdpo::linalg_ad::LEAKY_SLOPE)).collect();
        }
        h = out;
    }
    match net.shape.head {
        Head::Identity => h,
        Head::Positive => h.into_iter().map(HyperDual::softplus).collect(),
        other => panic!("head {other:?} not needed by the oracle"),
    }
}

fn utility(c: HyperDual, gamma: f64) -> HyperDual {
    if gamma == 1.0 {
        c.ln()
    } else {
        c.powf(1.0 - gamma).scale(1.0 / (1.0 - gamma))
    }
}

/// One path of the wealth recursion with unconstrained networks, where
/// `increments[k]` is that path's `ΔW` at step `k`. Also returns the
/// activation pattern met along the path.
pub fn path_objective(
    market: &MarketParams,
    pair: &PolicyPair,
    cfg: &RolloutConfig,
    t0: f64,
    x0: HyperDual,
    increments: &[Vec<f64>],
) -> (HyperDual, Vec<bool>) {
    let mut pattern = Vec::new();
    assert_eq!(pair.investment.shape.head, Head::Identity);
    let n = market.n;
    let dt = (cfg.horizon - t0) / increments.len() as f64;
    let excess = market.excess_return();
    let mut x = x0;
    let mut j = HyperDual::constant(0.0);
    for (k, dw) in increments.iter().enumerate() {
        let t = t0 + k as f64 * dt;
        let c = net_forward(&pair.consumption, t, x, &mut pattern)[0];
        let pi = net_forward(&pair.investment, t, x, &mut pattern);
        let mut drift = HyperDual::constant(market.r);
        for i in 0..n {
            drift = drift + pi[i].scale(excess[i]);
        }
        // a = Vᵀ π with V lower triangular
        let a: Vec<HyperDual> = (0..n)
            .map(|col| (col..n).fold(HyperDual::constant(0.0), |s, row| s + pi[row].scale(market.chol[[row, col]])))
            .collect();
        let quad = a.iter().fold(HyperDual::constant(0.0), |s, v| s + *v * *v);
        let noise = a.iter().zip(dw).fold(HyperDual::constant(0.0), |s, (v, w)| s + v.scale(*w));
        let expo = (drift - quad.scale(0.5) - c / x).scale(dt) + noise;
        j = j + utility(c, cfg.gamma).scale((-cfg.rho * t).exp() * dt);
        x = x * expo.exp();
    }
    let j = j + utility(x, cfg.gamma).scale(cfg.kappa_bequest * (-cfg.rho * cfg.horizon).exp());
    (j, pattern)
}

/// Per-path increments from the `M x n` per-step matrices.
pub fn path_increments(increments: &[Array2<f64>], path: usize) -> Vec<Vec<f64>> {
    increments.iter().map(|a| a.row(path).to_vec()).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
