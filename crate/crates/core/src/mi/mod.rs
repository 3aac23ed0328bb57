//! Variational upper bound on mutual information.
//!
//! A small network maps `x` to a diagonal Gaussian `q(y | x)`. It is fit by
//! minimizing the negative log-likelihood of paired samples; the bound is
//! then the contrast between log-likelihoods of paired and unpaired samples,
//! `(1/N^2) sum_i sum_j [log q(y_i|x_i) - log q(y_j|x_i)]`.

pub mod bench;
pub mod oracle;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{linear, Activation, AdamState, Bound, Graph, Mlp, MlpSpec, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

pub use oracle::{gaussian_mi_oracle, numeric_mi_oracle, Grid2d};

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Dimension of both `x` and `y`.
    pub dim: usize,
    /// Hidden widths of the shared backbone; empty for linear heads.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl EstimatorConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: vec![128, 128],
            activation: Activation::Relu,
        }
    }
}

/// Paired samples `(x_i, y_i)`, both `N x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBatch {
    pub x: Tensor,
    pub y: Tensor,
}

impl RepresentationBatch {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        let (n, d) = x.matrix_dims()?;
        if y.matrix_dims()? != (n, d) || x.rank() != 2 || y.rank() != 2 {
            return Err(Error::Shape(format!(
                "x {:?} and y {:?} must both be N x D",
                x.shape(),
                y.shape()
            )));
        }
        if n == 0 {
            return Err(Error::Empty("representation batch".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Same pairs in the order given by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let d = self.dim();
        let pick = |t: &Tensor| {
            let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
            Tensor::new(vec![perm.len(), d], data)
        };
        Self::new(pick(&self.x)?, pick(&self.y)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    /// Bound value in nats.
    pub value: f64,
    pub n: usize,
    /// Estimator NLL on the same batch.
    pub nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalNetwork {
    pub config: EstimatorConfig,
    backbone: Option<Mlp>,
    pub params: ParameterSet,
}

impl VariationalNetwork {
    pub fn new<R: Rng>(config: EstimatorConfig, rng: &mut R) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::InvalidArgument("estimator dimension must be positive".into()));
        }
        let mut params = ParameterSet::new();
        let backbone = if config.hidden.is_empty() {
            None
        } else {
            let mut widths = vec![config.dim];
            widths.extend(&config.hidden);
            let mut spec = MlpSpec::new(widths, config.activation)?;
            // last hidden layer is activated too; the heads are the linear outputs
            spec.activations.push(config.activation);
            Some(Mlp::init(spec, "bb.", &mut params, rng)?)
        };
        let width = config.hidden.last().copied().unwrap_or(config.dim);
        for head in ["mu", "lv"] {
            params.insert(format!("{head}.w"), crate::diff::params::glorot(rng, width, config.dim));
            params.insert(format!("{head}.b"), Tensor::zeros(&[config.dim]));
        }
        Ok(Self {
            config,
            backbone,
            params,
        })
    }

    fn check_dim(&self, g: &Graph, v: Var, what: &str) -> Result<()> {
        let (_, d) = g.value(v).matrix_dims()?;
        if d != self.config.dim {
            return Err(Error::Shape(format!(
                "{what} has dimension {d}, estimator expects {}",
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Mean and clamped log-variance heads for each row of `x`.
    pub fn heads(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check_dim(g, x, "x")?;
        let h = match &self.backbone {
            Some(mlp) => mlp.forward(g, bound, x)?,
            None => x,
        };
        let mu = linear(g, bound, "mu", h)?;
        let lv = linear(g, bound, "lv", h)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, lv))
    }

    /// Row-wise `log q(y_i | x_i)`, shape `[N]`.
    pub fn log_likelihood_graph(&self, g: &mut Graph, bound: &Bound, x: Var, y: Var) -> Result<Var> {
        self.check_dim(g, y, "y")?;
        let (mu, lv) = self.heads(g, bound, x)?;
        g.gauss_loglik(mu, lv, y)
    }

    /// `-(1/N) sum_i log q(y_i | x_i)`.
    pub fn nll_graph(&self, g: &mut Graph, bound: &Bound, x: Var, y: Var) -> Result<Var> {
        let ll = self.log_likelihood_graph(g, bound, x, y)?;
        let m = g.mean(ll)?;
        g.scale(m, -1.0)
    }

    /// The sample bound; differentiable in the parameters and in `x`, `y`.
    pub fn estimate_graph(&self, g: &mut Graph, bound: &Bound, x: Var, y: Var) -> Result<Var> {
        self.check_dim(g, y, "y")?;
        let (mu, lv) = self.heads(g, bound, x)?;
        let pair = g.pairwise_gauss_loglik(mu, lv, y)?;
        g.contrast_mean(pair)
    }

    /// `log q(y | x)` for a single pair of vectors.
    pub fn log_likelihood(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.config.dim || y.len() != self.config.dim {
            return Err(Error::Shape(format!(
                "pair of lengths ({}, {}) for dimension {}",
                x.len(),
                y.len(),
                self.config.dim
            )));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let xv = g.constant(Tensor::row_vector(x.to_vec()))?;
        let yv = g.constant(Tensor::row_vector(y.to_vec()))?;
        let ll = self.log_likelihood_graph(&mut g, &b, xv, yv)?;
        g.value(ll).item()
    }

    pub fn nll_loss(&self, batch: &RepresentationBatch) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let x = g.constant(batch.x.clone())?;
        let y = g.constant(batch.y.clone())?;
        let l = self.nll_graph(&mut g, &b, x, y)?;
        g.scalar_value(l)
    }

    pub fn estimate_mi(&self, batch: &RepresentationBatch) -> Result<MiEstimate> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let x = g.constant(batch.x.clone())?;
        let y = g.constant(batch.y.clone())?;
        let est = self.estimate_graph(&mut g, &b, x, y)?;
        let nll = self.nll_graph(&mut g, &b, x, y)?;
        Ok(MiEstimate {
            value: g.scalar_value(est)?,
            n: batch.len(),
            nll: g.scalar_value(nll)?,
        })
    }

    /// One Adam step on the NLL of `batch`; returns the NLL before the step.
    pub fn train_step(&mut self, batch: &RepresentationBatch, opt: &mut AdamState) -> Result<f64> {
        self.params.zero_grad();
        let mut g = Graph::new();
        let b = self.params.bind(&mut g)?;
        let x = g.constant(batch.x.clone())?;
        let y = g.constant(batch.y.clone())?;
        let l = self.nll_graph(&mut g, &b, x, y)?;
        let before = g.scalar_value(l)?;
        let grads = g.backward(l)?;
        self.params.accumulate(&b, &grads)?;
        opt.step(&mut self.params)?;
        Ok(before)
    }

    /// `steps` Adam updates on the NLL of `batch`. Returns the NLL seen
    /// before each step followed by the NLL after the last one.
    pub fn train_estimator(
        &mut self,
        batch: &RepresentationBatch,
        steps: usize,
        opt: &mut AdamState,
    ) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("estimator training needs at least one step".into()));
        }
        let mut trace = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            trace.push(self.train_step(batch, opt)?);
        }
        trace.push(self.nll_loss(batch)?);
        Ok(trace)
    }
}

/// `n` pairs whose `d` coordinates are independent standard bivariate
/// Gaussians with correlation `rho`.
pub fn sample_correlated_gaussian<R: Rng>(rho: f64, d: usize, n: usize, rng: &mut R) -> Result<RepresentationBatch> {
    if rho.abs() >= 1.0 {
        return Err(Error::InvalidArgument(format!("|rho| must be < 1, got {rho}")));
    }
    let s = (1.0 - rho * rho).sqrt();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let a: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        x.push(a);
        y.push(rho * a + s * e);
    }
    RepresentationBatch::new(Tensor::new(vec![n, d], x)?, Tensor::new(vec![n, d], y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::AdamConfig;
    use crate::rng::seeded;

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

    /// Linear heads forced to `mu = a * x`, `logvar = c`.
    fn linear_net(a: f64, c: f64, dim: usize) -> VariationalNetwork {
        let cfg = EstimatorConfig {
            dim,
            hidden: vec![],
            activation: Activation::Relu,
        };
        let mut net = VariationalNetwork::new(cfg, &mut seeded(0)).unwrap();
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = a;
        }
        net.params.get_mut("mu.w").unwrap().data_mut().copy_from_slice(&eye);
        net.params.get_mut("lv.w").unwrap().data_mut().fill(0.0);
        net.params.get_mut("lv.b").unwrap().data_mut().fill(c);
        net
    }

    fn batch(x: &[f64], y: &[f64], d: usize) -> RepresentationBatch {
        let n = x.len() / d;
        RepresentationBatch::new(
            Tensor::new(vec![n, d], x.to_vec()).unwrap(),
            Tensor::new(vec![n, d], y.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn log_likelihood_at_mean() {
        let net = linear_net(1.0, 0.0, 1);
        let ll = net.log_likelihood(&[0.4], &[0.4]).unwrap();
        assert!((ll + HALF_LN_2PI).abs() < 1e-12);
        assert!((ll + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn log_likelihood_one_sigma_off() {
        let net = linear_net(0.0, 0.0, 1);
        let ll = net.log_likelihood(&[3.0], &[1.0]).unwrap();
        assert!((ll - (-HALF_LN_2PI - 0.5)).abs() < 1e-12);
        assert!((ll + 1.41894).abs() < 1e-5);
    }

    #[test]
    fn log_likelihood_factorizes() {
        let net = linear_net(0.5, 0.3, 2);
        let single = linear_net(0.5, 0.3, 1);
        let joint = net.log_likelihood(&[1.0, -2.0], &[0.2, 0.7]).unwrap();
        let a = single.log_likelihood(&[1.0], &[0.2]).unwrap();
        let b = single.log_likelihood(&[-2.0], &[0.7]).unwrap();
        assert!((joint - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = linear_net(1.0, 0.0, 2);
        assert!(net.log_likelihood(&[1.0], &[1.0]).is_err());
        let b = batch(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 3);
        assert!(net.estimate_mi(&b).is_err());
    }

    #[test]
    fn nll_examples() {
        let net = linear_net(1.0, 0.0, 1);
        let one = batch(&[0.7], &[0.7], 1);
        assert!((net.nll_loss(&one).unwrap() - HALF_LN_2PI).abs() < 1e-12);
        let two = batch(&[0.7, 0.7], &[0.7, 0.7], 1);
        assert_eq!(net.nll_loss(&one).unwrap(), net.nll_loss(&two).unwrap());
    }

    #[test]
    fn nll_matches_elementwise_sum() {
        let cfg = EstimatorConfig {
            dim: 3,
            hidden: vec![8],
            activation: Activation::Gelu,
        };
        let net = VariationalNetwork::new(cfg, &mut seeded(5)).unwrap();
        let b = sample_correlated_gaussian(0.6, 3, 7, &mut seeded(6)).unwrap();
        let mut total = 0.0;
        for i in 0..7 {
            total += net.log_likelihood(b.x.row(i), b.y.row(i)).unwrap();
        }
        let expected = -total / 7.0;
        assert!((net.nll_loss(&b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn estimate_single_pair_is_zero() {
        let cfg = EstimatorConfig::new(4);
        let net = VariationalNetwork::new(cfg, &mut seeded(3)).unwrap();
        let b = sample_correlated_gaussian(0.9, 4, 1, &mut seeded(4)).unwrap();
        assert_eq!(net.estimate_mi(&b).unwrap().value, 0.0);
    }

    #[test]
    fn estimate_hand_example() {
        let net = linear_net(1.0, 0.0, 1);
        let b = batch(&[0.0, 1.0], &[0.0, 1.0], 1);
        let est = net.estimate_mi(&b).unwrap();
        assert!((est.value - 0.25).abs() < 1e-12);
        assert_eq!(est.n, 2);
    }

    #[test]
    fn estimate_is_zero_when_head_ignores_x() {
        let cfg = EstimatorConfig::new(3);
        let mut net = VariationalNetwork::new(cfg, &mut seeded(9)).unwrap();
        net.params.get_mut("bb.l0.w").unwrap().data_mut().fill(0.0);
        let b = sample_correlated_gaussian(0.8, 3, 33, &mut seeded(10)).unwrap();
        assert_eq!(net.estimate_mi(&b).unwrap().value, 0.0);
    }

    #[test]
    fn estimate_permutation_invariant() {
        let cfg = EstimatorConfig::new(2);
        let net = VariationalNetwork::new(cfg, &mut seeded(11)).unwrap();
        let b = sample_correlated_gaussian(0.5, 2, 17, &mut seeded(12)).unwrap();
        let perm: Vec<usize> = (0..17).map(|i| (i * 5 + 3) % 17).collect();
        let a = net.estimate_mi(&b).unwrap().value;
        let p = net.estimate_mi(&b.permuted(&perm).unwrap()).unwrap().value;
        assert_eq!(a.to_bits(), p.to_bits());
    }

    #[test]
    fn zero_lr_training_changes_nothing() {
        let cfg = EstimatorConfig::new(2);
        let mut net = VariationalNetwork::new(cfg, &mut seeded(1)).unwrap();
        let before = net.params.checksum();
        let b = sample_correlated_gaussian(0.5, 2, 64, &mut seeded(2)).unwrap();
        let mut opt = AdamState::new(AdamConfig::default().with_lr(0.0));
        let trace = net.train_estimator(&b, 5, &mut opt).unwrap();
        assert_eq!(before, net.params.checksum());
        assert!(trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_reaches_noise_entropy() {
        // y = x + eps, eps ~ N(0, 0.25): NLL floor is 0.5 ln(2 pi e 0.25).
        let mut rng = seeded(21);
        let n = 256;
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| v + 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let b = batch(&x, &y, 1);
        let cfg = EstimatorConfig {
            dim: 1,
            hidden: vec![16],
            activation: Activation::Relu,
        };
        let mut net = VariationalNetwork::new(cfg, &mut seeded(22)).unwrap();
        let mut opt = AdamState::new(AdamConfig::default().with_lr(1e-2));
        let trace = net.train_estimator(&b, 1500, &mut opt).unwrap();
        let floor = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.25).ln();
        let last = *trace.last().unwrap();
        assert!(last < trace[0]);
        assert!((last - floor).abs() < 0.08, "nll {last} vs floor {floor}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let cfg = EstimatorConfig::new(2);
            let mut net = VariationalNetwork::new(cfg, &mut seeded(31)).unwrap();
            let b = sample_correlated_gaussian(0.5, 2, 32, &mut seeded(32)).unwrap();
            let mut opt = AdamState::new(AdamConfig::default());
            net.train_estimator(&b, 10, &mut opt).unwrap();
            net.params.checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_shift_cancels() {
        // Adding c to every log-likelihood leaves the contrast unchanged.
        let mut g = Graph::new();
        let l = Tensor::new(vec![3, 3], vec![0.1, -2.0, 0.5, 1.0, 0.3, -0.7, 2.2, 0.0, -1.1]).unwrap();
        let a = g.constant(l.clone()).unwrap();
        let shifted = g.constant(l.map(|v| v + 123.456)).unwrap();
        let ca = g.contrast_mean(a).unwrap();
        let cs = g.contrast_mean(shifted).unwrap();
        let (va, vs) = (g.scalar_value(ca).unwrap(), g.scalar_value(cs).unwrap());
        assert!((va - vs).abs() < 1e-12);
    }
}
