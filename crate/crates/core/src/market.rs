//! Synthetic market generation.
//!
//! Markets are built from a random correlation matrix, uniformly drawn
//! volatilities and a baseline portfolio whose gross sum is clamped into a
//! band; drifts are then back-solved so that the unconstrained Merton
//! portfolio equals the baseline.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PgdpoError, Result};
use crate::linalg_ad::{cholesky_factor, SpdMatrix};
use crate::rng::{self, Purpose};

/// Immutable market description.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    pub n: usize,
    pub r: f64,
    pub mu: Vec<f64>,
    pub sigma_cov: SpdMatrix,
    /// Lower-triangular V with V Vᵀ = Σ.
    pub chol: Array2<f64>,
    pub pi_base: Vec<f64>,
    pub gamma: f64,
    pub seed: u64,
}

/// Knobs for [`generate_market`]. Defaults follow the experimental setup
/// (r = 0.03, γ = 2, vols in [0.05, 0.5], weights in [-1, 2], sum in [0.2, 0.75]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub n: usize,
    pub r: f64,
    pub gamma: f64,
    pub vol_range: (f64, f64),
    pub pi_range: (f64, f64),
    pub sum_band: (f64, f64),
    pub seed: u64,
}

impl MarketSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        MarketSpec {
            n,
            r: 0.03,
            gamma: 2.0,
            vol_range: (0.05, 0.5),
            pi_range: (-1.0, 2.0),
            sum_band: (0.2, 0.75),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PgdpoError::InvalidConfig(m.to_string()));
        if self.n == 0 {
            return bad("asset count must be at least 1");
        }
        if !(self.vol_range.0 > 0.0 && self.vol_range.1 >= self.vol_range.0 && self.vol_range.1.is_finite()) {
            return bad("vol_range must satisfy 0 < lo <= hi < inf");
        }
        if !(self.pi_range.1 > self.pi_range.0) {
            return bad("pi_range must be non-degenerate");
        }
        if !(self.sum_band.0 > 0.0 && self.sum_band.1 >= self.sum_band.0 && self.sum_band.1.is_finite()) {
            return bad("sum_band must lie in (0, inf)");
        }
        if !(self.gamma > 0.0) || !self.r.is_finite() {
            return bad("gamma must be positive and r finite");
        }
        Ok(())
    }
}

/// Columns of the Gaussian factor used for the Gram construction, per asset.
pub const GRAM_EXTRA_COLUMNS: usize = 2;
const CORRELATION_ATTEMPTS: usize = 10;

/// Positive-definite correlation matrix with unit diagonal.
///
/// Draws `G` (n x (n+2)) standard normal, normalizes `G Gᵀ` to unit
/// diagonal and, whenever the Cholesky factorization fails, shrinks toward
/// the identity with `C <- 0.7 C + 0.3 I`.
pub fn random_correlation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(PgdpoError::InvalidConfig("correlation needs n >= 1".into()));
    }
    let k = n + GRAM_EXTRA_COLUMNS;
    let g = Array2::from_shape_vec((n, k), rng::normals(rng, n * k)).expect("shape");
    let gram = g.dot(&g.t());
    let d: Vec<f64> = (0..n).map(|i| gram[[i, i]].sqrt()).collect();
    let mut c = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            1.0
        } else {
            (gram[[i, j]] / (d[i] * d[j])).clamp(-1.0, 1.0)
        }
    });
    for _ in 0..CORRELATION_ATTEMPTS {
        let candidate = SpdMatrix::new(c.clone())?;
        if cholesky_factor(&candidate).is_ok() {
            return Ok(candidate.entries().clone());
        }
        c.mapv_inplace(|v| 0.7 * v);
        for i in 0..n {
            c[[i, i]] = 1.0;
        }
    }
    Err(PgdpoError::DegenerateMarket(format!(
        "correlation matrix for n = {n} failed to factor after {CORRELATION_ATTEMPTS} attempts"
    )))
}

/// Rescales `pi` so that its sum lands on the violated bound of `band`.
pub fn rescale_into_band(pi: &mut [f64], band: (f64, f64)) -> Result<()> {
    let s: f64 = pi.iter().sum();
    let target = if s < band.0 {
        band.0
    } else if s > band.1 {
        band.1
    } else {
        return Ok(());
    };
    if s == 0.0 {
        return Err(PgdpoError::DegenerateMarket("baseline portfolio sums to zero".into()));
    }
    let f = target / s;
    pi.iter_mut().for_each(|p| *p *= f);
    Ok(())
}

/// Generates a market whose unconstrained Merton portfolio is the baseline.
pub fn generate_market(spec: &MarketSpec) -> Result<MarketParams> {
    spec.validate()?;
    let n = spec.n;
    let mut corr_rng = rng::stream(spec.seed, Purpose::Correlation, n as u64);
    let corr = random_correlation(n, &mut corr_rng)?;

    let mut vol_rng = rng::stream(spec.seed, Purpose::Volatility, n as u64);
    let vols: Vec<f64> = (0..n)
        .map(|_| rng::uniform(&mut vol_rng, spec.vol_range.0, spec.vol_range.1))
        .collect();
    let sigma = Array2::from_shape_fn((n, n), |(i, j)| vols[i] * corr[[i, j]] * vols[j]);

    let mut pi_rng = rng::stream(spec.seed, Purpose::Baseline, n as u64);
    let mut pi: Vec<f64> = (0..n)
        .map(|_| rng::uniform(&mut pi_rng, spec.pi_range.0, spec.pi_range.1))
        .collect();
    rescale_into_band(&mut pi, spec.sum_band)?;

    MarketParams::from_baseline(spec.r, spec.gamma, SpdMatrix::new(sigma)?, pi, spec.seed)
}

impl MarketParams {
    /// Assembles a market, computing V from Σ.
    pub fn new(
        r: f64,
        mu: Vec<f64>,
        sigma_cov: SpdMatrix,
        pi_base: Vec<f64>,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        let n = sigma_cov.dim();
        if mu.len() != n || pi_base.len() != n {
            return Err(PgdpoError::DimensionMismatch(format!(
                "mu has {} entries and pi_base {}, covariance is {n}x{n}",
                mu.len(),
                pi_base.len()
            )));
        }
        let chol = cholesky_factor(&sigma_cov).map_err(|e| match e {
            PgdpoError::NotPositiveDefinite { .. } => {
                PgdpoError::DegenerateMarket(format!("covariance is not positive definite: {e}"))
            }
            other => other,
        })?;
        Ok(MarketParams {
            n,
            r,
            mu,
            sigma_cov,
            chol,
            pi_base,
            gamma,
            seed,
        })
    }

    /// Builds μ = r·1 + γ Σ π_base.
    pub fn from_baseline(
        r: f64,
        gamma: f64,
        sigma_cov: SpdMatrix,
        pi_base: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let s_pi = sigma_cov.mul_vec(&pi_base);
        let mu = s_pi.iter().map(|v| r + gamma * v).collect();
        MarketParams::new(r, mu, sigma_cov, pi_base, gamma, seed)
    }

    pub fn excess_return(&self) -> Vec<f64> {
        self.mu.iter().map(|m| m - self.r).collect()
    }

    /// Drift vector with the risk-free rate prepended.
    pub fn mu_tilde(&self) -> Vec<f64> {
        std::iter::once(self.r).chain(self.mu.iter().copied()).collect()
    }

    pub fn sigma(&self) -> &Array2<f64> {
        self.sigma_cov.entries()
    }

    /// Volatilities √Σ_ii.
    pub fn vols(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.sigma()[[i, i]].sqrt()).collect()
    }

    pub fn to_file(&self) -> MarketFile {
        MarketFile {
            n: self.n,
            r: self.r,
            gamma: self.gamma,
            seed: self.seed,
            mu: self.mu.clone(),
            sigma_cov: self.sigma().rows().into_iter().map(|r| r.to_vec()).collect(),
            pi_base: self.pi_base.clone(),
        }
    }

    pub fn from_file(file: MarketFile) -> Result<Self> {
        let n = file.n;
        if file.sigma_cov.len() != n || file.sigma_cov.iter().any(|r| r.len() != n) {
            return Err(PgdpoError::Format(format!("sigma_cov must be {n}x{n}")));
        }
        let flat: Vec<f64> = file.sigma_cov.into_iter().flatten().collect();
        let sigma = Array2::from_shape_vec((n, n), flat).expect("checked shape");
        for i in 0..n {
            for j in 0..i {
                if sigma[[i, j]] != sigma[[j, i]] {
                    return Err(PgdpoError::Format("sigma_cov is not symmetric".into()));
                }
            }
        }
        MarketParams::new(file.r, file.mu, SpdMatrix::new(sigma)?, file.pi_base, file.gamma, file.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("market serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        MarketParams::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        MarketParams::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks the generation invariants against `spec`; returns a description
    /// of the first violation.
    pub fn check_generated(&self, spec: &MarketSpec) -> std::result::Result<(), String> {
        let slack = 1e-12;
        for (i, v) in self.vols().iter().enumerate() {
            if *v < spec.vol_range.0 - slack || *v > spec.vol_range.1 + slack {
                return Err(format!("volatility {i} = {v} outside {:?}", spec.vol_range));
            }
        }
        let vols = self.vols();
        for i in 0..self.n {
            for j in 0..self.n {
                let c = self.sigma()[[i, j]] / (vols[i] * vols[j]);
                if !(-1.0 - slack..=1.0 + slack).contains(&c) {
                    return Err(format!("correlation ({i},{j}) = {c}"));
                }
            }
        }
        let s: f64 = self.pi_base.iter().sum();
        if s < spec.sum_band.0 - slack || s > spec.sum_band.1 + slack {
            return Err(format!("baseline sum {s} outside {:?}", spec.sum_band));
        }
        let s_pi = self.sigma_cov.mul_vec(&self.pi_base);
        for i in 0..self.n {
            let expect = self.r + self.gamma * s_pi[i];
            if (self.mu[i] - expect).abs() > 1e-12 {
                return Err(format!("drift identity fails at {i}: {} vs {expect}", self.mu[i]));
            }
        }
        Ok(())
    }
}

/// On-disk market format; V is recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketFile {
    pub n: usize,
    pub r: f64,
    pub gamma: f64,
    pub seed: u64,
    pub mu: Vec<f64>,
    pub sigma_cov: Vec<Vec<f64>>,
    pub pi_base: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_asset_correlation_is_one() {
        let mut r = rng::stream(1, Purpose::Scratch, 0);
        let c = random_correlation(1, &mut r).unwrap();
        assert_eq!(c, Array2::from_elem((1, 1), 1.0));
    }

    #[test]
    fn three_asset_correlation_factors() {
        let mut r = rng::stream(42, Purpose::Correlation, 3);
        let c = random_correlation(3, &mut r).unwrap();
        assert!(cholesky_factor(&SpdMatrix::new(c.clone()).unwrap()).is_ok());
        for i in 0..3 {
            assert_eq!(c[[i, i]], 1.0);
            for j in 0..3 {
                if i != j {
                    assert!(c[[i, j]] > -1.0 && c[[i, j]] < 1.0);
                }
            }
        }
    }

    #[test]
    fn large_correlation_is_self_normalized() {
        let mut r = rng::stream(9, Purpose::Correlation, 100);
        let c = random_correlation(100, &mut r).unwrap();
        for i in 0..100 {
            for j in 0..100 {
                let renorm = c[[i, j]] / (c[[i, i]] * c[[j, j]]).sqrt();
                assert_eq!(renorm, c[[i, j]]);
            }
        }
    }

    #[test]
    fn hand_built_single_asset_drift() {
        let sigma = SpdMatrix::from_diagonal(&[0.04]).unwrap();
        let m = MarketParams::from_baseline(0.03, 2.0, sigma, vec![0.5], 0).unwrap();
        assert!((m.mu[0] - 0.07).abs() < 1e-15);
        assert!((m.chol[[0, 0]] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_baseline_gives_flat_drift() {
        let sigma = SpdMatrix::new(ndarray::array![[0.04, 0.01], [0.01, 0.09]]).unwrap();
        let m = MarketParams::from_baseline(0.03, 2.0, sigma, vec![0.0, 0.0], 0).unwrap();
        assert_eq!(m.mu, vec![0.03, 0.03]);
    }

    #[test]
    fn rescaling_hits_violated_bound() {
        let mut low = vec![0.05, 0.05];
        rescale_into_band(&mut low, (0.2, 0.75)).unwrap();
        assert!((low.iter().sum::<f64>() - 0.2).abs() < 1e-15);
        let mut high = vec![1.5, 0.5, -0.25];
        rescale_into_band(&mut high, (0.2, 0.75)).unwrap();
        assert!((high.iter().sum::<f64>() - 0.75).abs() < 1e-15);
        let mut inside = vec![0.3, 0.2];
        rescale_into_band(&mut inside, (0.2, 0.75)).unwrap();
        assert_eq!(inside, vec![0.3, 0.2]);
    }

    #[test]
    fn generated_market_satisfies_invariants_and_is_deterministic() {
        for n in [1, 5, 40] {
            let spec = MarketSpec::new(n, 42);
            let a = generate_market(&spec).unwrap();
            let b = generate_market(&spec).unwrap();
            assert_eq!(a, b);
            a.check_generated(&spec).unwrap();
        }
    }

    #[test]
    fn json_round_trip_recomputes_factor() {
        let m = generate_market(&MarketSpec::new(6, 3)).unwrap();
        let back = MarketParams::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_market(&MarketSpec::new(0, 1)).is_err());
        let mut s = MarketSpec::new(3, 1);
        s.vol_range = (0.0, 0.5);
        assert!(matches!(generate_market(&s), Err(PgdpoError::InvalidConfig(_))));
    }
}
