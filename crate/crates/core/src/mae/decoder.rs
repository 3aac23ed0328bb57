//! Per-patch linear decoder and the reconstruction loss.

use rand::Rng;

use super::encoder::EncoderConfig;
use super::patch::MaskSet;
use crate::diff::params::{glorot, small_uniform};
use crate::diff::{exact_sum, linear, Bound, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

/// Decodes a full patch grid from visible tokens. Masked slots start from a
/// shared mask token; every slot gets its positional embedding and a
/// projection of the pooled representation before the linear pixel map.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionDecoder {
    pub config: EncoderConfig,
}

impl ReconstructionDecoder {
    pub fn init<R: Rng>(config: EncoderConfig, params: &mut ParameterSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.embed;
        params.insert("mask_token", small_uniform(rng, &[1, e], 0.02));
        params.insert("pos", small_uniform(rng, &[config.n_patches(), e], 0.02));
        params.insert("ctx.w", glorot(rng, config.out_dim, e));
        params.insert("ctx.b", Tensor::zeros(&[e]));
        params.insert("pix.w", glorot(rng, e, config.patch_len()));
        params.insert("pix.b", Tensor::zeros(&[config.patch_len()]));
        Ok(Self { config })
    }

    /// `tokens[m, E]` are the encoder outputs of the visible slots in
    /// ascending order; `pooled[1, D]`. Returns `[N_p, 3p^2]` patch rows.
    pub fn reconstruct(&self, g: &mut Graph, bound: &Bound, tokens: Var, pooled: Var, mask: &MaskSet) -> Result<Var> {
        let n = self.config.n_patches();
        if mask.n_patches != n {
            return Err(Error::Shape(format!("mask over {} patches for {n}", mask.n_patches)));
        }
        let visible = n - mask.masked.len();
        let (m, _) = g.value(tokens).matrix_dims()?;
        if m != visible {
            return Err(Error::Shape(format!("{m} tokens for {visible} visible patches")));
        }
        let full = if mask.masked.is_empty() {
            tokens
        } else {
            let masked = g.repeat_rows(bound.get("mask_token")?, mask.masked.len())?;
            let stacked = g.concat_rows(&[tokens, masked])?;
            let (mut vi, mut mi) = (0, visible);
            let order: Vec<usize> = (0..n)
                .map(|k| {
                    if mask.is_masked(k) {
                        mi += 1;
                        mi - 1
                    } else {
                        vi += 1;
                        vi - 1
                    }
                })
                .collect();
            g.gather_rows(stacked, &order)?
        };
        let h = g.add(full, bound.get("pos")?)?;
        let ctx = linear(g, bound, "ctx", pooled)?;
        let ctx = g.repeat_rows(ctx, n)?;
        let h = g.add(h, ctx)?;
        linear(g, bound, "pix", h)
    }
}

/// Sum of squared errors between predicted and reference patch rows.
/// With `masked_only`, only the rows listed in `mask` count.
pub fn rec_loss_graph(g: &mut Graph, pred: Var, reference: &Tensor, mask: Option<&MaskSet>) -> Result<Var> {
    if g.value(pred).shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs reference {:?}",
            g.value(pred).shape(),
            reference.shape()
        )));
    }
    let target = g.constant(reference.clone())?;
    let (p, t) = match mask {
        Some(m) => (g.gather_rows(pred, &m.masked)?, g.gather_rows(target, &m.masked)?),
        None => (pred, target),
    };
    let diff = g.sub(p, t)?;
    let sq = g.square(diff)?;
    g.sum(sq)
}

/// `sum_n ||pred_n - ref_n||^2` over views given as flat pixel arrays.
pub fn rec_loss(predicted: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!("{} predicted views for {} references", predicted.len(), reference.len())));
    }
    let mut terms = Vec::new();
    for (p, r) in predicted.iter().zip(reference) {
        if p.len() != r.len() {
            return Err(Error::Shape(format!("view of {} values vs {}", p.len(), r.len())));
        }
        terms.extend(p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)));
    }
    let s = exact_sum(terms);
    if !s.is_finite() {
        return Err(Error::NonFinite("reconstruction loss".into()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::encoder::PatchEncoder;
    use crate::mae::patch::{patchify_values, sample_mask};
    use crate::rng::seeded;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            patch: 2,
            height: 4,
            width: 6,
            embed: 3,
            blocks: 1,
            out_dim: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn offset_example() {
        let r = vec![(0..512 * 512 * 3).map(|i| (i % 256) as f64 / 255.0).collect::<Vec<f64>>()];
        let p = vec![r[0].iter().map(|v| v + 0.1).collect::<Vec<f64>>()];
        let loss = rec_loss(&p, &r).unwrap();
        assert!((loss - 7864.32).abs() <= 7864.32 * 1e-9, "{loss}");
        assert_eq!(rec_loss(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn output_shape_and_mask_token_determinism() {
        let c = cfg();
        let (mut ep, mut dp) = (ParameterSet::new(), ParameterSet::new());
        let enc = PatchEncoder::init(c, &mut ep, &mut seeded(1)).unwrap();
        let dec = ReconstructionDecoder::init(c, &mut dp, &mut seeded(2)).unwrap();
        let mask = sample_mask(c.n_patches(), 0.5, 3).unwrap();
        let mut rng = seeded(4);
        let a: Vec<f64> = (0..72).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..72).map(|_| rng.random()).collect();
        let ga = patchify_values(&a, 4, 6, 2).unwrap();
        // b shares a's visible patches
        let len = c.patch_len();
        let mut gb = patchify_values(&b, 4, 6, 2).unwrap();
        for k in mask.visible() {
            gb.data.data_mut()[k * len..(k + 1) * len].copy_from_slice(ga.patch(k));
        }
        let out = |grid| {
            let mut g = Graph::new();
            let eb = ep.bind_frozen(&mut g).unwrap();
            let db = dp.bind_frozen(&mut g).unwrap();
            let e = enc.encode(&mut g, &eb, grid, &mask.visible()).unwrap();
            let r = dec.reconstruct(&mut g, &db, e.tokens, e.pooled, &mask).unwrap();
            g.value(r).clone()
        };
        let (ra, rb) = (out(&ga), out(&gb));
        assert_eq!(ra.shape(), &[6, 12]);
        assert_eq!(ra, rb);
    }

    #[test]
    fn single_masked_slot() {
        let c = cfg();
        let mut dp = ParameterSet::new();
        let dec = ReconstructionDecoder::init(c, &mut dp, &mut seeded(2)).unwrap();
        let mask = sample_mask(6, 1.0 / 6.0, 0).unwrap();
        assert_eq!(mask.masked.len(), 1);
        let mut g = Graph::new();
        let db = dp.bind_frozen(&mut g).unwrap();
        let toks = g.constant(Tensor::new(vec![5, 3], (0..15).map(f64::from).collect()).unwrap()).unwrap();
        let pooled = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let r = dec.reconstruct(&mut g, &db, toks, pooled, &mask).unwrap();
        assert_eq!(g.value(r).shape(), &[6, 12]);
        let bad = g.constant(Tensor::zeros(&[6, 3])).unwrap();
        assert!(dec.reconstruct(&mut g, &db, bad, pooled, &mask).is_err());
    }

    #[test]
    fn graph_loss_matches_flat_loss_and_masked_variant() {
        let mut g = Graph::new();
        let pred = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let reference = Tensor::new(vec![3, 2], vec![0.0, 0.2, 0.1, 0.4, 0.9, 0.6]).unwrap();
        let p = g.constant(pred.clone()).unwrap();
        let full = rec_loss_graph(&mut g, p, &reference, None).unwrap();
        let flat = rec_loss(&[pred.data().to_vec()], &[reference.data().to_vec()]).unwrap();
        assert_eq!(g.scalar_value(full).unwrap(), flat);
        let mask = MaskSet { n_patches: 3, masked: vec![2] };
        let part = rec_loss_graph(&mut g, p, &reference, Some(&mask)).unwrap();
        assert!((g.scalar_value(part).unwrap() - 0.16).abs() < 1e-15);
    }
}
