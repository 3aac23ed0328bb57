use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{glorot, Bound, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Fully-connected stack. `widths` lists the input width, every hidden
/// width, and the output width; the output layer is linear unless
/// `activations` has an entry for it too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        let spec = Self {
            widths,
            activations: vec![activation; hidden],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        // one extra activation applies to the output layer as well
        let layers = self.widths.len() - 1;
        if self.activations.len() + 1 != layers && self.activations.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.widths.len() - 2
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// An MLP whose parameters live in an external [`ParameterSet`] under
/// `{prefix}l{i}.w` / `{prefix}l{i}.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    prefix: String,
}

impl Mlp {
    pub fn init<R: Rng>(spec: MlpSpec, prefix: &str, params: &mut ParameterSet, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        for (i, w) in spec.widths.windows(2).enumerate() {
            params.insert(format!("{prefix}l{i}.w"), glorot(rng, w[0], w[1]));
            params.insert(format!("{prefix}l{i}.b"), Tensor::zeros(&[w[1]]));
        }
        Ok(Self {
            spec,
            prefix: prefix.to_string(),
        })
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let (_, cols) = g.value(x).matrix_dims()?;
        if cols != self.spec.input_width() {
            return Err(Error::Shape(format!(
                "MLP expects width {}, input has {cols}",
                self.spec.input_width()
            )));
        }
        let layers = self.spec.widths.len() - 1;
        let mut h = x;
        for i in 0..layers {
            h = linear(g, bound, &format!("{}l{i}", self.prefix), h)?;
            if let Some(act) = self.spec.activations.get(i) {
                h = act.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

/// `x W + b` for parameters `{name}.w`, `{name}.b`.
pub fn linear(g: &mut Graph, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{name}.w"))?;
    let b = bound.get(&format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Relu).is_ok());
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let mut ps = ParameterSet::new();
        let mlp = Mlp::init(spec, "", &mut ps, &mut seeded(1)).unwrap();
        for name in ["l0.w", "l1.w"] {
            ps.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        ps.get_mut("l1.b").unwrap().data_mut().copy_from_slice(&[0.25, -1.5]);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap()).unwrap();
        let y = mlp.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let mut ps = ParameterSet::new();
        let mlp = Mlp::init(spec, "", &mut ps, &mut seeded(1)).unwrap();
        let w = ps.get_mut("l0.w").unwrap().data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let v = [0.5, -2.0, 7.25];
        let x = g.constant(Tensor::new(vec![1, 3], v.to_vec()).unwrap()).unwrap();
        let y = mlp.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.value(y).data(), &v);
    }

    #[test]
    fn seeded_two_layer_matches_straight_line() {
        let spec = MlpSpec::new(vec![4, 5, 3], Activation::Relu).unwrap();
        let mut ps = ParameterSet::new();
        let mlp = Mlp::init(spec, "", &mut ps, &mut seeded(42)).unwrap();
        for name in ["l0.b", "l1.b"] {
            for (i, v) in ps.get_mut(name).unwrap().data_mut().iter_mut().enumerate() {
                *v = 0.1 * i as f64 - 0.05;
            }
        }
        let input = [0.3, -0.7, 1.1, 0.05];

        // Hand-rolled matrix-vector chain.
        let w0 = ps.get("l0.w").unwrap().data();
        let b0 = ps.get("l0.b").unwrap().data();
        let w1 = ps.get("l1.w").unwrap().data();
        let b1 = ps.get("l1.b").unwrap().data();
        let mut hidden = [0.0; 5];
        for j in 0..5 {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += input[i] * w0[i * 5 + j];
            }
            hidden[j] = (acc + b0[j]).max(0.0);
        }
        let mut expected = [0.0; 3];
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += hidden[i] * w1[i * 3 + j];
            }
            expected[j] = acc + b1[j];
        }

        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let x = g.constant(Tensor::new(vec![1, 4], input.to_vec()).unwrap()).unwrap();
        let y = mlp.forward(&mut g, &b, x).unwrap();
        for (a, e) in g.value(y).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn input_width_mismatch() {
        let spec = MlpSpec::new(vec![4, 2], Activation::Gelu).unwrap();
        let mut ps = ParameterSet::new();
        let mlp = Mlp::init(spec, "", &mut ps, &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(mlp.forward(&mut g, &b, x), Err(Error::Shape(_))));
    }
}
