//! Patch-token encoder shared by the content and distortion branches.
//!
//! Tokens are linear patch embeddings plus a positional embedding. Each
//! block adds a per-token feed-forward residual and then a context vector
//! computed from the mean token. The pooled output is the mean token
//! projected to `out_dim`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::PatchGrid;
use crate::diff::params::{glorot, small_uniform};
use crate::diff::{linear, Activation, Bound, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    /// Token width `E`.
    pub embed: usize,
    /// Mixing blocks `K`.
    pub blocks: usize,
    /// Representation width `D`.
    pub out_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            height: 512,
            width: 512,
            embed: 64,
            blocks: 2,
            out_dim: 64,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 || self.height % p != 0 || self.width % p != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} images are not tiled by {p}x{p} patches",
                self.height, self.width
            )));
        }
        if self.embed == 0 || self.out_dim == 0 {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Output of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[m, E]`, one row per encoded patch in the order given.
    pub tokens: Var,
    /// `[1, D]`.
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEncoder {
    pub config: EncoderConfig,
}

impl PatchEncoder {
    /// Adds the encoder parameters to `params`.
    pub fn init<R: Rng>(config: EncoderConfig, params: &mut ParameterSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (e, d) = (config.embed, config.out_dim);
        params.insert("embed.w", glorot(rng, config.patch_len(), e));
        params.insert("embed.b", Tensor::zeros(&[e]));
        params.insert("pos", small_uniform(rng, &[config.n_patches(), e], 0.02));
        for k in 0..config.blocks {
            for layer in ["ff0", "ff1", "ctx"] {
                params.insert(format!("blk{k}.{layer}.w"), glorot(rng, e, e));
                params.insert(format!("blk{k}.{layer}.b"), Tensor::zeros(&[e]));
            }
        }
        params.insert("out.w", glorot(rng, e, d));
        params.insert("out.b", Tensor::zeros(&[d]));
        Ok(Self { config })
    }

    /// Encodes the patches listed in `indices` and nothing else.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, patches: &PatchGrid, indices: &[usize]) -> Result<Encoded> {
        let c = &self.config;
        if patches.patch != c.patch || patches.height != c.height || patches.width != c.width {
            return Err(Error::Shape(format!(
                "{}x{} image with {}px patches for an encoder of {}x{} with {}px patches",
                patches.height, patches.width, patches.patch, c.height, c.width, c.patch
            )));
        }
        if indices.is_empty() {
            return Err(Error::Empty("every patch is masked".into()));
        }
        let input = g.constant(patches.rows(indices)?)?;
        self.encode_rows(g, bound, input, indices)
    }

    /// Encodes every patch.
    pub fn encode_all(&self, g: &mut Graph, bound: &Bound, patches: &PatchGrid) -> Result<Encoded> {
        let all: Vec<usize> = (0..patches.len()).collect();
        self.encode(g, bound, patches, &all)
    }

    /// Encodes pre-stacked patch rows `input[m, 3p^2]` sitting at positions
    /// `indices`.
    pub fn encode_rows(&self, g: &mut Graph, bound: &Bound, input: Var, indices: &[usize]) -> Result<Encoded> {
        let c = &self.config;
        let m = indices.len();
        let emb = linear(g, bound, "embed", input)?;
        let pos = g.gather_rows(bound.get("pos")?, indices)?;
        let mut h = g.add(emb, pos)?;
        for k in 0..c.blocks {
            let a = linear(g, bound, &format!("blk{k}.ff0"), h)?;
            let a = c.activation.apply(g, a)?;
            let a = linear(g, bound, &format!("blk{k}.ff1"), a)?;
            h = g.add(h, a)?;
            let mean = g.mean_rows(h)?;
            let ctx = linear(g, bound, &format!("blk{k}.ctx"), mean)?;
            let ctx = c.activation.apply(g, ctx)?;
            let ctx = g.repeat_rows(ctx, m)?;
            h = g.add(h, ctx)?;
        }
        let mean = g.mean_rows(h)?;
        let pooled = linear(g, bound, "out", mean)?;
        Ok(Encoded { tokens: h, pooled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::patch::{patchify_values, sample_mask};
    use crate::rng::seeded;

    fn small() -> EncoderConfig {
        EncoderConfig {
            patch: 4,
            height: 8,
            width: 12,
            embed: 5,
            blocks: 2,
            out_dim: 3,
            activation: Activation::Relu,
        }
    }

    fn image(seed: u64, c: &EncoderConfig) -> PatchGrid {
        let mut rng = seeded(seed);
        let v: Vec<f64> = (0..c.height * c.width * 3).map(|_| rng.random()).collect();
        patchify_values(&v, c.height, c.width, c.patch).unwrap()
    }

    fn run(params: &ParameterSet, enc: &PatchEncoder, grid: &PatchGrid, idx: &[usize]) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g).unwrap();
        let out = enc.encode(&mut g, &b, grid, idx).unwrap();
        (g.value(out.tokens).clone(), g.value(out.pooled).clone())
    }

    #[test]
    fn masked_patches_are_never_read() {
        let c = small();
        let mut params = ParameterSet::new();
        let enc = PatchEncoder::init(c, &mut params, &mut seeded(1)).unwrap();
        let grid = image(2, &c);
        let mask = sample_mask(grid.len(), 0.5, 3).unwrap();
        let visible = mask.visible();
        let mut scrambled = grid.clone();
        let len = grid.patch_len();
        for &k in &mask.masked {
            for v in &mut scrambled.data.data_mut()[k * len..(k + 1) * len] {
                *v = 1.0 - *v * 0.37;
            }
        }
        let a = run(&params, &enc, &grid, &visible);
        let b = run(&params, &enc, &scrambled, &visible);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let c = small();
        let mut params = ParameterSet::new();
        let enc = PatchEncoder::init(c, &mut params, &mut seeded(1)).unwrap();
        let names: Vec<String> = params.names().map(String::from).collect();
        for n in &names {
            params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        params.get_mut("out.b").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        for seed in [4, 5] {
            let (_, x) = run(&params, &enc, &image(seed, &c), &[0, 2, 5]);
            assert_eq!(x.data(), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn matches_straight_line_evaluation() {
        let c = EncoderConfig { blocks: 1, ..small() };
        let mut params = ParameterSet::new();
        let enc = PatchEncoder::init(c, &mut params, &mut seeded(8)).unwrap();
        for (i, v) in params.get_mut("blk0.ff0.b").unwrap().data_mut().iter_mut().enumerate() {
            *v = 0.05 * i as f64 - 0.1;
        }
        let grid = image(9, &c);
        let idx = [1, 3, 4];
        let (_, x) = run(&params, &enc, &grid, &idx);

        let p = |n: &str| params.get(n).unwrap().data().to_vec();
        let lin = |v: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| v.iter().enumerate().map(|(i, vi)| vi * w[i * out + j]).sum::<f64>() + b[j])
                .collect()
        };
        let e = c.embed;
        let mut h: Vec<Vec<f64>> = idx
            .iter()
            .map(|&k| {
                let t = lin(grid.patch(k), &p("embed.w"), &p("embed.b"), e);
                t.iter().zip(&p("pos")[k * e..(k + 1) * e]).map(|(a, b)| a + b).collect()
            })
            .collect();
        for row in &mut h {
            let a: Vec<f64> = lin(row, &p("blk0.ff0.w"), &p("blk0.ff0.b"), e).iter().map(|v| v.max(0.0)).collect();
            let a = lin(&a, &p("blk0.ff1.w"), &p("blk0.ff1.b"), e);
            row.iter_mut().zip(a).for_each(|(r, v)| *r += v);
        }
        let mean: Vec<f64> = (0..e).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / 3.0).collect();
        let ctx: Vec<f64> = lin(&mean, &p("blk0.ctx.w"), &p("blk0.ctx.b"), e).iter().map(|v| v.max(0.0)).collect();
        for row in &mut h {
            row.iter_mut().zip(&ctx).for_each(|(r, v)| *r += v);
        }
        let mean: Vec<f64> = (0..e).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / 3.0).collect();
        let expected = lin(&mean, &p("out.w"), &p("out.b"), c.out_dim);
        for (a, b) in x.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let c = small();
        let mut params = ParameterSet::new();
        let enc = PatchEncoder::init(c, &mut params, &mut seeded(1)).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g).unwrap();
        assert!(matches!(enc.encode(&mut g, &b, &image(1, &c), &[]), Err(Error::Empty(_))));
    }
}
