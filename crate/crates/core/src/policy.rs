//! Feed-forward consumption and investment policies.
//!
//! Networks map `(t/T, X)` through two leaky-rectifier hidden layers to a
//! constraint-enforcing head. Everything that drives a rollout implements
//! [`Controls`], so closed-form and fixed rules can be simulated and
//! differentiated exactly like the learned nets.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PgdpoError, Result};
use crate::linalg_ad::{column, Adjoints, Matrix, Tape, Var};
use crate::merton_reference::ValueOde;
use crate::rng::{self, Purpose};

/// Output head of a [`PolicyNet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Raw risky weights; the risk-free weight is `1 − Σπ`.
    Identity,
    /// Softmax over risk-free plus risky weights.
    Simplex,
    /// Softplus consumption rate.
    Positive,
    /// Consumption in `[min, max]` through a scaled sigmoid.
    Bounded { min: f64, max: f64 },
}

impl Head {
    pub fn output_dim(&self, n_assets: usize) -> usize {
        match self {
            Head::Identity => n_assets,
            Head::Simplex => n_assets + 1,
            Head::Positive | Head::Bounded { .. } => 1,
        }
    }

    pub fn is_investment(&self) -> bool {
        matches!(self, Head::Identity | Head::Simplex)
    }
}

pub const DEFAULT_HIDDEN: [usize; 2] = [200, 200];
const OUTPUT_WEIGHT_SCALE: f64 = 0.01;
/// Initial consumption output of the positive head. Matches the smallest
/// sampled wealth so no starting node consumes more than it holds; a larger
/// flat rate drains small-wealth paths to zero within a few steps.
pub const INITIAL_CONSUMPTION: f64 = 0.1;

/// Layer sizes and head of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub n_assets: usize,
    pub head: Head,
    pub hidden: Vec<usize>,
}

impl NetShape {
    pub fn new(n_assets: usize, head: Head) -> Self {
        NetShape {
            n_assets,
            head,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim(self.n_assets)
    }

    /// `(fan_out, fan_in)` per layer, input layer first.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![2];
        dims.extend(&self.hidden);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(PgdpoError::InvalidConfig("hidden layers must be non-empty".into()));
        }
        if self.head.is_investment() && self.n_assets == 0 {
            return Err(PgdpoError::InvalidConfig("investment head needs n >= 1".into()));
        }
        if let Head::Bounded { min, max } = self.head {
            if !(min < max) || !min.is_finite() || !max.is_finite() {
                return Err(PgdpoError::InvalidConfig("bounded head needs finite min < max".into()));
            }
        }
        Ok(())
    }
}

fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Deterministic initialization: He-scaled hidden weights, small output
/// weights, zero biases except for the consumption offset.
pub fn init_params(shape: &NetShape, seed: u64) -> Vec<f64> {
    let tag = match shape.head {
        Head::Identity => 0,
        Head::Simplex => 1,
        Head::Positive => 2,
        Head::Bounded { .. } => 3,
    };
    let mut stream = rng::substream(seed, Purpose::NetInit, shape.n_assets as u64, tag);
    let layers = shape.layers();
    let last = layers.len() - 1;
    let mut params = Vec::with_capacity(shape.param_count());
    for (l, &(fan_out, fan_in)) in layers.iter().enumerate() {
        let scale = if l == last {
            OUTPUT_WEIGHT_SCALE * (1.0 / fan_in as f64).sqrt()
        } else {
            (2.0 / fan_in as f64).sqrt()
        };
        params.extend(rng::normals(&mut stream, fan_out * fan_in).into_iter().map(|z| z * scale));
        let bias = if l == last {
            match shape.head {
                Head::Positive => softplus_inverse(INITIAL_CONSUMPTION),
                _ => 0.0,
            }
        } else {
            0.0
        };
        params.extend(std::iter::repeat_n(bias, fan_out));
    }
    params
}

/// A feed-forward policy with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub shape: NetShape,
    /// Time input is divided by this.
    pub horizon: f64,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl PolicyNet {
    pub fn new(shape: NetShape, horizon: f64, seed: u64) -> Result<Self> {
        shape.validate()?;
        if !(horizon > 0.0) {
            return Err(PgdpoError::InvalidConfig("horizon must be positive".into()));
        }
        let params = init_params(&shape, seed);
        Ok(PolicyNet {
            shape,
            horizon,
            seed,
            params,
        })
    }

    pub fn head(&self) -> Head {
        self.shape.head
    }

    /// Registers weights and biases on `tape`, two nodes per layer.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::new();
        let mut off = 0;
        for (fan_out, fan_in) in self.shape.layers() {
            let w = Matrix::from_shape_vec((fan_out, fan_in), self.params[off..off + fan_out * fan_in].to_vec())
                .expect("layer shape");
            off += fan_out * fan_in;
            let b = Matrix::from_shape_vec((1, fan_out), self.params[off..off + fan_out].to_vec())
                .expect("bias shape");
            off += fan_out;
            if trainable {
                vars.push(tape.input(w));
                vars.push(tape.input(b));
            } else {
                vars.push(tape.constant(w));
                vars.push(tape.constant(b));
            }
        }
        vars
    }

    pub fn var_count(&self) -> usize {
        2 * self.shape.layers().len()
    }

    /// Output of the final affine layer, before the head.
    pub fn pre_head(&self, tape: &mut Tape, vars: &[Var], t: Var, x: Var) -> Var {
        let ts = tape.scale(t, 1.0 / self.horizon);
        let mut h = tape.concat_cols(&[ts, x]);
        let layers = vars.len() / 2;
        for l in 0..layers {
            h = tape.linear(h, vars[2 * l], vars[2 * l + 1]);
            if l + 1 < layers {
                h = tape.leaky_relu(h);
            }
        }
        h
    }

    /// Controls for a batch of `(t, X)` rows given as `M x 1` nodes.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], t: Var, x: Var) -> Var {
        let z = self.pre_head(tape, vars, t, x);
        match self.shape.head {
            Head::Identity => z,
            Head::Simplex => tape.softmax_rows(z),
            Head::Positive => tape.softplus(z),
            Head::Bounded { min, max } => {
                let s = tape.sigmoid(z);
                let s = tape.scale(s, max - min);
                tape.shift(s, min)
            }
        }
    }

    /// Untaped batch forward; one row per node.
    pub fn forward_batch(&self, t: &[f64], x: &[f64]) -> Array2<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let tv = tape.column_constant(t);
        let xv = tape.column_constant(x);
        let out = self.forward_tape(&mut tape, &vars, tv, xv);
        tape.value(out).clone()
    }

    pub fn forward(&self, t: f64, x: f64) -> Vec<f64> {
        self.forward_batch(&[t], &[x]).row(0).to_vec()
    }

    /// Flattens parameter adjoints back into layer order.
    pub fn collect_grads(&self, adj: &Adjoints, vars: &[Var]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.params.len());
        for &v in vars {
            g.extend(adj.get_or_zeros(v).iter());
        }
        g
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            n: self.shape.n_assets,
            head: self.shape.head,
            hidden: self.shape.hidden.clone(),
            seed: self.seed,
            horizon: self.horizon,
            input_scaling: InputScaling {
                t_divisor: self.horizon,
                x_divisor: 1.0,
            },
            param_count: self.params.len(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.checkpoint_header())?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PgdpoError::Format("not a policy checkpoint".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(PgdpoError::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let shape = NetShape {
            n_assets: header.n,
            head: header.head,
            hidden: header.hidden,
        };
        shape.validate()?;
        if shape.param_count() != header.param_count {
            return Err(PgdpoError::Format("parameter count does not match layer shapes".into()));
        }
        let mut bytes = vec![0u8; header.param_count * 8];
        r.read_exact(&mut bytes)?;
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(PolicyNet {
            shape,
            horizon: header.horizon,
            seed: header.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        PolicyNet::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PGDPONET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub t_divisor: f64,
    pub x_divisor: f64,
}

/// JSON header preceding the little-endian parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub n: usize,
    pub head: Head,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub horizon: f64,
    pub input_scaling: InputScaling,
    pub param_count: usize,
}

/// Anything that can produce controls on a tape.
///
/// Investment output is `M x n` risky weights when [`Controls::simplex`] is
/// false, and `M x (n+1)` weights with the risk-free asset in column 0 when
/// it is true. Consumption is an `M x 1` rate.
pub trait Controls: Sync {
    fn n_assets(&self) -> usize;
    fn simplex(&self) -> bool;

    /// Registers parameters on the tape; rules without parameters return none.
    fn bind(&self, _tape: &mut Tape, _trainable: bool) -> Vec<Var> {
        Vec::new()
    }

    fn consumption(&self, tape: &mut Tape, params: &[Var], t: Var, x: Var) -> Var;
    fn investment(&self, tape: &mut Tape, params: &[Var], t: Var, x: Var) -> Var;

    /// Untaped evaluation at a batch of nodes.
    fn evaluate(&self, t: &[f64], x: &[f64]) -> (Vec<f64>, Array2<f64>) {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let tv = tape.column_constant(t);
        let xv = tape.column_constant(x);
        let c = self.consumption(&mut tape, &params, tv, xv);
        let pi = self.investment(&mut tape, &params, tv, xv);
        (tape.column_values(c), tape.value(pi).clone())
    }
}

/// Investment and consumption networks trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub investment: PolicyNet,
    pub consumption: PolicyNet,
}

impl PolicyPair {
    /// Fresh networks; `constrained` selects the simplex investment head.
    pub fn new(n_assets: usize, constrained: bool, horizon: f64, seed: u64) -> Result<Self> {
        let head = if constrained { Head::Simplex } else { Head::Identity };
        Ok(PolicyPair {
            investment: PolicyNet::new(NetShape::new(n_assets, head), horizon, seed)?,
            consumption: PolicyNet::new(NetShape::new(n_assets, Head::Positive), horizon, seed)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.investment.params.len() + self.consumption.params.len()
    }

    /// Investment parameters followed by consumption parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.investment.params.clone();
        p.extend(&self.consumption.params);
        p
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let k = self.investment.params.len();
        self.investment.params.copy_from_slice(&flat[..k]);
        self.consumption.params.copy_from_slice(&flat[k..]);
    }

    /// Splits bound variables into (investment, consumption).
    pub fn split_vars<'a>(&self, vars: &'a [Var]) -> (&'a [Var], &'a [Var]) {
        vars.split_at(self.investment.var_count())
    }

    /// Flat gradient in the order of [`PolicyPair::flat_params`].
    pub fn collect_grads(&self, adj: &Adjoints, vars: &[Var]) -> Vec<f64> {
        let (vi, vc) = self.split_vars(vars);
        let mut g = self.investment.collect_grads(adj, vi);
        g.extend(self.consumption.collect_grads(adj, vc));
        g
    }
}

impl Controls for PolicyPair {
    fn n_assets(&self) -> usize {
        self.investment.shape.n_assets
    }

    fn simplex(&self) -> bool {
        self.investment.head() == Head::Simplex
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut v = self.investment.bind(tape, trainable);
        v.extend(self.consumption.bind(tape, trainable));
        v
    }

    fn consumption(&self, tape: &mut Tape, params: &[Var], t: Var, x: Var) -> Var {
        let (_, vc) = self.split_vars(params);
        self.consumption.forward_tape(tape, vc, t, x)
    }

    fn investment(&self, tape: &mut Tape, params: &[Var], t: Var, x: Var) -> Var {
        let (vi, _) = self.split_vars(params);
        self.investment.forward_tape(tape, vi, t, x)
    }
}

/// How a parameter-free rule sets consumption.
#[derive(Debug, Clone, PartialEq)]
pub enum ConsumptionRule {
    /// Constant rate `C`.
    Constant(f64),
    /// `C = a X`.
    Proportional(f64),
    /// `C = g(t)^{-1/γ} X` from a value ODE.
    Ode(ValueOde),
}

/// Parameter-free controls: fixed weights and a consumption rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPolicy {
    pub n: usize,
    /// Risky weights (length n), or full simplex weights (length n+1).
    pub weights: Vec<f64>,
    pub simplex: bool,
    pub consumption: ConsumptionRule,
}

impl FixedPolicy {
    pub fn risky(weights: Vec<f64>, consumption: ConsumptionRule) -> Self {
        FixedPolicy {
            n: weights.len(),
            weights,
            simplex: false,
            consumption,
        }
    }

    pub fn on_simplex(weights: Vec<f64>, consumption: ConsumptionRule) -> Self {
        FixedPolicy {
            n: weights.len() - 1,
            weights,
            simplex: true,
            consumption,
        }
    }

    /// All wealth in the risk-free asset.
    pub fn cash_only(n: usize, consumption: ConsumptionRule) -> Self {
        FixedPolicy::risky(vec![0.0; n], consumption)
    }
}

impl Controls for FixedPolicy {
    fn n_assets(&self) -> usize {
        self.n
    }

    fn simplex(&self) -> bool {
        self.simplex
    }

    fn consumption(&self, tape: &mut Tape, _params: &[Var], t: Var, x: Var) -> Var {
        match &self.consumption {
            ConsumptionRule::Constant(c) => {
                let z = tape.scale(x, 0.0);
                tape.shift(z, *c)
            }
            ConsumptionRule::Proportional(a) => tape.scale(x, *a),
            ConsumptionRule::Ode(ode) => {
                let ratios: Vec<f64> = tape.value(t).iter().map(|&s| ode.consumption_ratio(s)).collect();
                let r = tape.constant(column(&ratios));
                tape.mul(r, x)
            }
        }
    }

    fn investment(&self, tape: &mut Tape, _params: &[Var], _t: Var, x: Var) -> Var {
        let rows = tape.shape(x).0;
        let w = Matrix::from_shape_fn((rows, self.weights.len()), |(_, j)| self.weights[j]);
        tape.constant(w)
    }
}

/// Closed-form Merton controls: constant weights and ODE consumption.
pub fn merton_policy(pi_star: &[f64], ode: ValueOde, simplex: bool) -> FixedPolicy {
    if simplex {
        let mut w = vec![1.0 - pi_star.iter().sum::<f64>()];
        w.extend(pi_star);
        FixedPolicy::on_simplex(w, ConsumptionRule::Ode(ode))
    } else {
        FixedPolicy::risky(pi_star.to_vec(), ConsumptionRule::Ode(ode))
    }
}

/// Full weight vector (risk-free first) from a controls output row.
pub fn full_weights(row: &[f64], simplex: bool) -> Vec<f64> {
    if simplex {
        row.to_vec()
    } else {
        let mut w = vec![1.0 - row.iter().sum::<f64>()];
        w.extend(row);
        w
    }
}

/// Risky part of a controls output row.
pub fn risky_weights(row: &[f64], simplex: bool) -> &[f64] {
    if simplex {
        &row[1..]
    } else {
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_for_ten_asset_simplex() {
        assert_eq!(NetShape::new(10, Head::Simplex).param_count(), 43_011);
        assert_eq!(init_params(&NetShape::new(10, Head::Simplex), 3).len(), 43_011);
    }

    #[test]
    fn init_is_deterministic() {
        let s = NetShape::new(4, Head::Identity);
        assert_eq!(init_params(&s, 11), init_params(&s, 11));
        assert_ne!(init_params(&s, 11), init_params(&s, 12));
    }

    #[test]
    fn initial_consumption_matches_offset() {
        let net = PolicyNet::new(NetShape::new(3, Head::Positive), 1.0, 0).unwrap();
        let c = net.forward(0.0, 1.0)[0];
        assert!(c.is_finite());
        assert!((c - INITIAL_CONSUMPTION).abs() < 0.02, "c = {c}");
    }

    #[test]
    fn simplex_head_with_equal_logits_is_uniform() {
        let mut net = PolicyNet::new(NetShape::new(4, Head::Simplex), 1.0, 0).unwrap();
        let layers = net.shape.layers();
        let (o, i) = *layers.last().unwrap();
        let len = net.params.len();
        net.params[len - o - o * i..].iter_mut().for_each(|p| *p = 0.0);
        let w = net.forward(0.3, 1.2);
        for v in w {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn positive_head_asymptote() {
        let mut net = PolicyNet::new(NetShape::new(1, Head::Positive), 1.0, 0).unwrap();
        let len = net.params.len();
        net.params[len - 201..].iter_mut().for_each(|p| *p = 0.0);
        net.params[len - 1] = -50.0;
        let c = net.forward(0.0, 1.0)[0];
        assert!(c > 0.0);
        assert!((c / (-50f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bounded_head_stays_in_range() {
        let net = PolicyNet::new(NetShape::new(1, Head::Bounded { min: 0.1, max: 0.3 }), 1.0, 4).unwrap();
        let out = net.forward_batch(&[0.0, 0.5, 1.0], &[0.1, 1.0, 2.0]);
        for v in out.iter() {
            assert!((0.1..=0.3).contains(v));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = PolicyNet::new(NetShape::new(3, Head::Simplex), 1.0, 9).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        assert_eq!(PolicyNet::read_from(&buf[..]).unwrap(), net);
        buf[0] = b'X';
        assert!(PolicyNet::read_from(&buf[..]).is_err());
    }

    #[test]
    fn fixed_policy_on_tape() {
        let p = FixedPolicy::risky(vec![0.2, 0.3], ConsumptionRule::Proportional(0.5));
        let (c, pi) = p.evaluate(&[0.0, 0.5], &[1.0, 2.0]);
        assert_eq!(c, vec![0.5, 1.0]);
        assert_eq!(pi.row(1).to_vec(), vec![0.2, 0.3]);
        let k = FixedPolicy::cash_only(1, ConsumptionRule::Constant(0.7));
        assert_eq!(k.evaluate(&[0.0], &[3.0]).0, vec![0.7]);
    }
}
