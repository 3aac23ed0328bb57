use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradient accumulators of identical shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
    has_grad: bool,
}

/// Graph handles for every parameter of a set, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), p))
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
        self.has_grad = false;
    }

    /// Adds every parameter to `graph` as a gradient-receiving leaf.
    pub fn bind(&self, graph: &mut Graph) -> Result<Bound> {
        self.bind_with(graph, true)
    }

    /// Adds every parameter as a constant: no gradient flows into it.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Result<Bound> {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph, requires_grad: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            vars.insert(name.clone(), graph.leaf(p.value.clone(), requires_grad)?);
        }
        Ok(Bound { vars })
    }

    /// Adds the gradients of the bound parameters into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let var = bound
                .vars
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if let Some(g) = grads.get(*var) {
                if g.shape() != p.grad.shape() {
                    return Err(Error::Shape(format!("gradient of `{name}`")));
                }
                p.grad.add_assign(g);
            }
        }
        self.has_grad = true;
        Ok(())
    }

    /// FNV-1a digest over names and the exact bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, p) in &self.params {
            feed(name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// All parameters renamed with a `prefix`, for merging into checkpoints.
    pub fn entries_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(k, p)| (format!("{prefix}{k}"), p.value.clone()))
            .collect()
    }

    /// Replaces the values of existing parameters from `entries` whose names
    /// start with `prefix`. Every parameter of the set must be present.
    pub fn load_prefixed(&mut self, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
        let mut seen = 0;
        for (name, t) in entries {
            let Some(local) = name.strip_prefix(prefix) else { continue };
            let p = self
                .params
                .get_mut(local)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "section `{prefix}` has {seen} of {} parameters",
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform `[fan_in, fan_out]` weight matrix.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

/// Small-scale uniform table, used for positional embeddings and tokens.
pub fn small_uniform<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_every_bit() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = p.checksum();
        p.get_mut("w").unwrap().data_mut()[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert_ne!(a, p.checksum());
    }

    #[test]
    fn accumulate_and_zero() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let b = p.bind(&mut g).unwrap();
        let w = b.get("w").unwrap();
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        p.accumulate(&b, &grads).unwrap();
        p.accumulate(&b, &grads).unwrap();
        assert_eq!(p.grad("w").unwrap().data(), &[2.0, 2.0]);
        assert!(p.has_grad());
        p.zero_grad();
        assert_eq!(p.grad("w").unwrap().data(), &[0.0, 0.0]);
        assert!(!p.has_grad());
    }

    #[test]
    fn load_prefixed_requires_full_section() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[1]));
        p.insert("b", Tensor::zeros(&[1]));
        let entries = vec![("G.a".to_string(), Tensor::full(&[1], 3.0))];
        assert!(p.load_prefixed(&entries, "G.").is_err());
        let entries = vec![
            ("G.a".to_string(), Tensor::full(&[1], 3.0)),
            ("G.b".to_string(), Tensor::full(&[1], 4.0)),
            ("H.a".to_string(), Tensor::full(&[1], 9.0)),
        ];
        p.load_prefixed(&entries, "G.").unwrap();
        assert_eq!(p.get("b").unwrap().data(), &[4.0]);
    }
}
