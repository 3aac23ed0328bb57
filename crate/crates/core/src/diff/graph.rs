//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built eagerly: every operation computes its value
//! immediately and records how to propagate gradients. One call to
//! [`Graph::backward`] walks the record in reverse creation order and
//! then releases it; a graph cannot be differentiated twice.

use super::tensor::{exact_sum, matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RepeatRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    GaussLogLik {
        mu: Var,
        logvar: Var,
        y: Var,
    },
    PairwiseGaussLogLik {
        mu: Var,
        logvar: Var,
        y: Var,
    },
    ContrastMean(Var),
    RankHinge {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` required one.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], what: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        value.ensure_finite(what)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn dims(&self, var: Var) -> Result<(usize, usize)> {
        self.value(var).matrix_dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul [{m},{k}] x [{k2},{n}]"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a[m,n] + bias[n]` with the bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "bias of {} values for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(a, bias), &[a, bias], "add_bias")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, what: &str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b], what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v + c);
        self.push(t, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a), &[a], "relu")
    }

    /// Gaussian-error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a), &[a], "gelu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a], "exp")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v * v);
        self.push(t, Op::Square(a), &[a], "square")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a], "clamp")
    }

    /// Sum of all elements (correctly rounded).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = exact_sum(self.value(a).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean of empty tensor".into()));
        }
        let s = exact_sum(self.value(a).data().iter().copied()) / n as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    /// Column means of `a[m,n]`, shape `[1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if m == 0 {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(a), &[a], "mean_rows")
    }

    /// Repeats a `[1,n]` row `m` times.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = self.dims(a)?;
        if r != 1 {
            return Err(Error::Shape(format!("repeat_rows expects one row, got {r}")));
        }
        let row = self.value(a).data().to_vec();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::RepeatRows(a), &[a], "repeat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect::<Result<_>>()?;
        let m = dims.first().map(|d| d.0).ok_or_else(|| Error::Empty("concat_cols".into()))?;
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &(_, n)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * n..(i + 1) * n]);
            }
        }
        self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect::<Result<_>>()?;
        let n = dims.first().map(|d| d.1).ok_or_else(|| Error::Empty("concat_rows".into()))?;
        if dims.iter().any(|d| d.1 != n) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let m: usize = dims.iter().map(|d| d.0).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
            "concat_rows",
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::GatherRows(a, rows.to_vec()),
            &[a],
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    fn check_gauss_args(&self, mu: Var, logvar: Var, y: Var) -> Result<(usize, usize)> {
        let (n, d) = self.dims(mu)?;
        if self.dims(logvar)? != (n, d) {
            return Err(Error::Shape("log-variance shape differs from mean".into()));
        }
        let (ny, dy) = self.dims(y)?;
        if dy != d {
            return Err(Error::Shape(format!("y has {dy} columns, head has {d}")));
        }
        Ok((n, ny))
    }

    /// Row-wise diagonal-Gaussian log density: `out[i] = log N(y_i; mu_i, exp(logvar_i))`.
    pub fn gauss_loglik(&mut self, mu: Var, logvar: Var, y: Var) -> Result<Var> {
        let (n, ny) = self.check_gauss_args(mu, logvar, y)?;
        if n != ny {
            return Err(Error::Shape(format!("{n} heads for {ny} targets")));
        }
        let d = self.value(mu).len() / n.max(1);
        let (m, lv, yv) = (self.value(mu).data(), self.value(logvar).data(), self.value(y).data());
        let out = (0..n)
            .map(|i| {
                (0..d)
                    .map(|k| {
                        let idx = i * d + k;
                        log_normal(yv[idx], m[idx], lv[idx])
                    })
                    .sum()
            })
            .collect();
        self.push(
            Tensor::new(vec![n], out)?,
            Op::GaussLogLik { mu, logvar, y },
            &[mu, logvar, y],
            "gauss_loglik",
        )
    }

    /// `out[i][j] = log N(y_j; mu_i, exp(logvar_i))`.
    pub fn pairwise_gauss_loglik(&mut self, mu: Var, logvar: Var, y: Var) -> Result<Var> {
        let (n, ny) = self.check_gauss_args(mu, logvar, y)?;
        let d = self.value(mu).matrix_dims()?.1;
        let (m, lv, yv) = (self.value(mu).data(), self.value(logvar).data(), self.value(y).data());
        let mut out = vec![0.0; n * ny];
        for i in 0..n {
            let mi = &m[i * d..(i + 1) * d];
            let li = &lv[i * d..(i + 1) * d];
            for j in 0..ny {
                let yj = &yv[j * d..(j + 1) * d];
                out[i * ny + j] = (0..d).map(|k| log_normal(yj[k], mi[k], li[k])).sum();
            }
        }
        self.push(
            Tensor::new(vec![n, ny], out)?,
            Op::PairwiseGaussLogLik { mu, logvar, y },
            &[mu, logvar, y],
            "pairwise_gauss_loglik",
        )
    }

    /// For a square matrix `L`, `(1/N^2) sum_i sum_j (L_ii - L_ij)`.
    ///
    /// The forward value is a correctly rounded sum, so it is invariant
    /// under any simultaneous permutation of rows and columns.
    pub fn contrast_mean(&mut self, l: Var) -> Result<Var> {
        let (n, n2) = self.dims(l)?;
        if n != n2 || n == 0 {
            return Err(Error::Shape(format!("contrast_mean needs a square matrix, got [{n},{n2}]")));
        }
        let v = self.value(l).data();
        let terms = (0..n).flat_map(|i| (0..n).map(move |j| v[i * n + i] - v[i * n + j]));
        let s = exact_sum(terms) / (n * n) as f64;
        self.push(Tensor::scalar(s), Op::ContrastMean(l), &[l], "contrast_mean")
    }

    /// Pairwise hinge ranking loss of predictions against fixed targets.
    pub fn rank_hinge(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "rank loss over {} predictions and {} targets",
                p.len(),
                target.len()
            )));
        }
        let v = rank_hinge_value(p, target);
        self.push(
            Tensor::scalar(v),
            Op::RankHinge {
                pred,
                target: target.to_vec(),
            },
            &[pred],
            "rank_hinge",
        )
    }

    /// Backpropagates from the scalar `loss` and releases the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let contributions = self.local_grads(idx, &g)?;
            grads[idx] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.needs_grad {
                *g = None;
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).matrix_dims()?;
                let (_, n) = val(*b).matrix_dims()?;
                if needs(*a) {
                    out.push((*a, like(*a, matmul_a_bt(gd, val(*b).data(), m, n, k))?));
                }
                if needs(*b) {
                    out.push((*b, like(*b, matmul_at_b(val(*a).data(), gd, m, k, n))?));
                }
            }
            Op::AddBias(a, b) => {
                let n = val(*b).len();
                out.push((*a, g.clone().reshape(val(*a).shape().to_vec())?));
                if needs(*b) {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n.max(1)) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    out.push((*a, like(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect())?));
                }
                if needs(*b) {
                    out.push((*b, like(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect())?));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * c))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Gelu(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(g, e)| g * e).collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Square(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                out.push((*a, like(*a, d)?));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), gd[0]))),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                out.push((*a, Tensor::full(val(*a).shape(), gd[0] / n)));
            }
            Op::MeanRows(a) => {
                let (m, _) = val(*a).matrix_dims()?;
                let scaled: Vec<f64> = gd.iter().map(|v| v / m as f64).collect();
                let mut d = Vec::with_capacity(val(*a).len());
                for _ in 0..m {
                    d.extend_from_slice(&scaled);
                }
                out.push((*a, like(*a, d)?));
            }
            Op::RepeatRows(a) => {
                let n = val(*a).len();
                let mut d = vec![0.0; n];
                for row in gd.chunks(n.max(1)) {
                    for (o, v) in d.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.push((*a, like(*a, d)?));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.matrix_dims()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, n) = val(p).matrix_dims()?;
                    if needs(p) {
                        let mut d = Vec::with_capacity(m * n);
                        for i in 0..m {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + n]);
                        }
                        out.push((p, like(p, d)?));
                    }
                    offset += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        out.push((p, like(p, gd[offset..offset + len].to_vec())?));
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, rows) => {
                let (_, n) = val(*a).matrix_dims()?;
                let mut d = vec![0.0; val(*a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        d[r * n + c] += gd[k * n + c];
                    }
                }
                out.push((*a, like(*a, d)?));
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(val(*a).shape().to_vec())?)),
            Op::GaussLogLik { mu, logvar, y } => {
                let (m, lv, yv) = (val(*mu).data(), val(*logvar).data(), val(*y).data());
                let n = gd.len();
                let d = m.len() / n.max(1);
                let mut dmu = vec![0.0; m.len()];
                let mut dlv = vec![0.0; m.len()];
                let mut dy = vec![0.0; m.len()];
                for i in 0..n {
                    for k in 0..d {
                        let idx = i * d + k;
                        let inv = (-lv[idx]).exp();
                        let r = yv[idx] - m[idx];
                        dmu[idx] = gd[i] * r * inv;
                        dy[idx] = -gd[i] * r * inv;
                        dlv[idx] = gd[i] * (-0.5 + 0.5 * r * r * inv);
                    }
                }
                out.push((*mu, like(*mu, dmu)?));
                out.push((*logvar, like(*logvar, dlv)?));
                out.push((*y, like(*y, dy)?));
            }
            Op::PairwiseGaussLogLik { mu, logvar, y } => {
                let (m, lv, yv) = (val(*mu).data(), val(*logvar).data(), val(*y).data());
                let (n, ny) = node.value.matrix_dims()?;
                let d = val(*mu).matrix_dims()?.1;
                let mut dmu = vec![0.0; m.len()];
                let mut dlv = vec![0.0; m.len()];
                let mut dy = vec![0.0; yv.len()];
                for i in 0..n {
                    for k in 0..d {
                        let idx = i * d + k;
                        let inv = (-lv[idx]).exp();
                        let (mut am, mut al) = (0.0, 0.0);
                        for j in 0..ny {
                            let gij = gd[i * ny + j];
                            let r = yv[j * d + k] - m[idx];
                            am += gij * r * inv;
                            al += gij * (-0.5 + 0.5 * r * r * inv);
                            dy[j * d + k] -= gij * r * inv;
                        }
                        dmu[idx] = am;
                        dlv[idx] = al;
                    }
                }
                out.push((*mu, like(*mu, dmu)?));
                out.push((*logvar, like(*logvar, dlv)?));
                out.push((*y, like(*y, dy)?));
            }
            Op::ContrastMean(l) => {
                let (n, _) = val(*l).matrix_dims()?;
                let nf = n as f64;
                let off = -gd[0] / (nf * nf);
                let mut d = vec![off; n * n];
                for i in 0..n {
                    d[i * n + i] += gd[0] / nf;
                }
                out.push((*l, like(*l, d)?));
            }
            Op::RankHinge { pred, target } => {
                let p = val(*pred).data();
                let b = p.len();
                let w = gd[0] / (b * b) as f64;
                let mut d = vec![0.0; b];
                for i in 0..b {
                    for j in 0..b {
                        let e = if target[i] >= target[j] { 1.0 } else { -1.0 };
                        if (target[i] - target[j]).abs() - e * (p[i] - p[j]) > 0.0 {
                            d[i] -= w * e;
                            d[j] += w * e;
                        }
                    }
                }
                out.push((*pred, like(*pred, d)?));
            }
        }
        Ok(out)
    }
}

fn log_normal(y: f64, mu: f64, logvar: f64) -> f64 {
    let r = y - mu;
    -0.5 * (LN_2PI + logvar) - 0.5 * r * r * (-logvar).exp()
}

/// `(1/B^2) sum_i sum_j max(0, |t_i - t_j| - e_ij (p_i - p_j))` with
/// `e_ij = 1` when `t_i >= t_j`, else `-1`.
pub fn rank_hinge_value(pred: &[f64], target: &[f64]) -> f64 {
    let b = pred.len();
    let terms = (0..b).flat_map(|i| {
        (0..b).map(move |j| {
            let e = if target[i] >= target[j] { 1.0 } else { -1.0 };
            ((target[i] - target[j]).abs() - e * (pred[i] - pred[j])).max(0.0)
        })
    });
    exact_sum(terms) / (b * b) as f64
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn ln_2pi_constant() {
        assert!((LN_2PI - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0])).unwrap();
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let w0 = [0.3, -1.2, 4.0];
        let mut g = Graph::new();
        let w = g.input(t(&[3], &w0)).unwrap();
        let sq = g.square(w).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &w0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let w = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        assert!(g.input(t(&[1], &[f64::NAN])).is_err());
        let w = g.input(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(g.exp(w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.input(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.input(t(&[2], &[3.0, 4.0])).unwrap();
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn rank_hinge_hand_values() {
        assert_eq!(rank_hinge_value(&[0.1, 0.9], &[0.2, 0.8]), 0.0);
        assert!((rank_hinge_value(&[0.3, 0.4], &[0.5, 0.2]) - 0.2).abs() < 1e-15);
    }
}
