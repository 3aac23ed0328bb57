//! Dual-branch quality model.
//!
//! The content branch `F` is a pretrained [`PatchEncoder`] applied, with all
//! patches visible, to each rendered view; the per-view pooled vectors are
//! averaged into `x`. The distortion branch `G` encodes the mini-patch map
//! into `y`. The regressor `H` maps `[x, y]` to a score.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::checkpoint::{self, Entries};
use crate::diff::{exact_sum, Activation, Bound, Graph, Mlp, MlpSpec, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::mae::encoder::{EncoderConfig, PatchEncoder};
use crate::mae::patch::{patchify, PatchGrid};
use crate::minipatch::{build_map, GridSpec};
use crate::pointcloud::PointCloud;
use crate::render::{render_view, view_pose, RenderConfig, ViewImage, MAX_VIEWS};
use crate::rng::derive;

const TAG_POSE: u64 = 0x706f_7365;
const TAG_MAP: u64 = 0x6d61_70;

/// Min-max scaling of MOS to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosScaler {
    pub min: f64,
    pub max: f64,
}

impl MosScaler {
    pub fn fit(mos: &[f64]) -> Result<Self> {
        if mos.is_empty() {
            return Err(Error::Empty("no MOS values to scale".into()));
        }
        if mos.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("MOS".into()));
        }
        let min = mos.iter().copied().fold(f64::INFINITY, f64::min);
        let max = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return Err(Error::Degenerate(format!("every MOS equals {min}")));
        }
        Ok(Self { min, max })
    }

    pub fn scale(&self, mos: f64) -> f64 {
        (mos - self.min) / (self.max - self.min)
    }

    pub fn unscale(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub views: usize,
    pub render: RenderConfig,
    pub grid: GridSpec,
    pub content: EncoderConfig,
    pub distortion: EncoderConfig,
    pub hidden: usize,
    pub lambda_rank: f64,
    pub lambda_mi: f64,
    /// Subtract each mini-patch's per-channel mean before the distortion
    /// encoder.
    #[serde(default = "enabled")]
    pub center_maps: bool,
    /// Seeds stage-2 initialization and the fixed per-item poses and maps.
    pub seed: u64,
    pub scaler: MosScaler,
}

fn enabled() -> bool {
    true
}

impl ModelConfig {
    /// Stage-2 configuration around a pretrained content encoder. The render
    /// size follows the content encoder; `grid` and `distortion` are resized
    /// to it.
    pub fn for_content(content: EncoderConfig, views: usize, splat_radius: usize, grid: GridSpec, distortion: EncoderConfig) -> Self {
        Self {
            views,
            render: RenderConfig {
                width: content.width,
                height: content.height,
                splat_radius,
            },
            grid: GridSpec {
                height: content.height,
                width: content.width,
                ..grid
            },
            content,
            distortion: EncoderConfig {
                height: content.height,
                width: content.width,
                out_dim: content.out_dim,
                ..distortion
            },
            hidden: 64,
            lambda_rank: 1.0,
            lambda_mi: 0.01,
            center_maps: true,
            seed: 0,
            scaler: MosScaler { min: 0.0, max: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.content.validate()?;
        self.distortion.validate()?;
        self.grid.validate()?;
        if self.views == 0 || self.views > MAX_VIEWS {
            return Err(Error::Config(format!("views must be in 1..={MAX_VIEWS}")));
        }
        if (self.render.height, self.render.width) != (self.content.height, self.content.width) {
            return Err(Error::Config("render size differs from the content encoder input".into()));
        }
        if (self.grid.height, self.grid.width) != (self.distortion.height, self.distortion.width) {
            return Err(Error::Config("mini-patch map size differs from the distortion encoder input".into()));
        }
        if (self.grid.height, self.grid.width) != (self.render.height, self.render.width) {
            return Err(Error::Config("mini-patch grid must match the render size".into()));
        }
        if self.content.out_dim != self.distortion.out_dim {
            return Err(Error::Config(format!(
                "content dimension {} differs from distortion dimension {}",
                self.content.out_dim, self.distortion.out_dim
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(self.lambda_rank >= 0.0 && self.lambda_mi >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.scaler.max > self.scaler.min) {
            return Err(Error::Config("MOS scaler range is empty".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.content.out_dim
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stage-2 settings not inherited from the content checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelTemplate {
    pub views: usize,
    pub splat_radius: usize,
    /// Grid count and mini-patch side; the size follows the renders.
    pub grid: GridSpec,
    /// Distortion encoder; input size and output width follow the content
    /// encoder.
    pub distortion: EncoderConfig,
    pub hidden: usize,
    pub lambda_rank: f64,
    pub lambda_mi: f64,
    pub center_maps: bool,
}

impl Default for ModelTemplate {
    fn default() -> Self {
        Self {
            views: 6,
            splat_radius: RenderConfig::default().splat_radius,
            grid: GridSpec::default(),
            distortion: EncoderConfig::default(),
            hidden: 64,
            lambda_rank: 1.0,
            lambda_mi: 0.01,
            center_maps: true,
        }
    }
}

impl ModelTemplate {
    pub fn instantiate(&self, content: EncoderConfig, scaler: MosScaler, seed: u64) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            lambda_rank: self.lambda_rank,
            lambda_mi: self.lambda_mi,
            center_maps: self.center_maps,
            seed,
            scaler,
            ..ModelConfig::for_content(content, self.views, self.splat_radius, self.grid, self.distortion)
        }
    }
}

/// Model inputs for one stimulus: content patches per view and the
/// mini-patch map.
#[derive(Clone, Debug)]
pub struct ItemInput {
    pub views: Vec<PatchGrid>,
    pub map: PatchGrid,
}

/// Renders `pc` (normalized) with poses and map seed fixed by `key`.
pub fn prepare_input(pc: &PointCloud, cfg: &ModelConfig, key: u64) -> Result<ItemInput> {
    let (views, maps) = prepare_input_draws(pc, cfg, key, 1)?;
    Ok(ItemInput {
        views,
        map: patchify(&maps[0], cfg.distortion.patch)?,
    })
}

/// Content patches plus `draws` mini-patch map images sampled from the same
/// renders. Draw 0 is the map of [`prepare_input`].
pub fn prepare_input_draws(pc: &PointCloud, cfg: &ModelConfig, key: u64, draws: usize) -> Result<(Vec<PatchGrid>, Vec<ViewImage>)> {
    if draws == 0 {
        return Err(Error::InvalidArgument("at least one map draw".into()));
    }
    let images = (0..cfg.views)
        .map(|n| {
            let pose = view_pose(derive(cfg.seed, &[TAG_POSE, key, n as u64]), n)?;
            render_view(pc, &pose.rotation, &cfg.render)
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = (0..draws)
        .map(|d| {
            let seed = match d {
                0 => derive(cfg.seed, &[TAG_MAP, key]),
                _ => derive(cfg.seed, &[TAG_MAP, key, d as u64]),
            };
            Ok(build_map(&images, &cfg.grid, seed)?.image)
        })
        .collect::<Result<_>>()?;
    let views = images.iter().map(|v| patchify(v, cfg.content.patch)).collect::<Result<_>>()?;
    Ok((views, maps))
}

/// Per-patch, per-channel mean removal.
pub fn center_patches(grid: &PatchGrid) -> PatchGrid {
    let mut out = grid.clone();
    let pl = grid.patch_len();
    for patch in out.data.data_mut().chunks_mut(pl) {
        for c in 0..3 {
            let mean = exact_sum(patch.iter().skip(c).step_by(3).copied()) / (pl / 3) as f64;
            patch.iter_mut().skip(c).step_by(3).for_each(|v| *v -= mean);
        }
    }
    out
}

/// Graph handles of one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, D]` content representations (constant).
    pub x: Var,
    /// `[B, D]` distortion representations.
    pub y: Var,
    /// `[B, 1]` predicted scores.
    pub q: Var,
}

/// Graph handles of the total loss and its terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub rank: Var,
}

#[derive(Clone, Debug)]
pub struct QualityModel {
    pub config: ModelConfig,
    pub content: PatchEncoder,
    pub distortion: PatchEncoder,
    pub regressor: Mlp,
    /// `F`, frozen.
    pub f: ParameterSet,
    /// `G`.
    pub g: ParameterSet,
    /// `H`.
    pub h: ParameterSet,
}

impl QualityModel {
    /// Fresh `G` and `H` around pretrained content weights `f`.
    pub fn new<R: Rng>(config: ModelConfig, content: PatchEncoder, f: ParameterSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if content.config != config.content {
            return Err(Error::Config("content encoder differs from the model configuration".into()));
        }
        let mut g = ParameterSet::new();
        let distortion = PatchEncoder::init(config.distortion, &mut g, rng)?;
        let mut h = ParameterSet::new();
        let d = config.dim();
        let spec = MlpSpec::new(vec![2 * d, config.hidden, 1], Activation::Relu)?;
        let regressor = Mlp::init(spec, "reg.", &mut h, rng)?;
        Ok(Self {
            config,
            content,
            distortion,
            regressor,
            f,
            g,
            h,
        })
    }

    /// Content representation: mean of the per-view pooled encodings with
    /// every patch visible.
    pub fn content_vector(&self, views: &[PatchGrid]) -> Result<Vec<f64>> {
        if views.is_empty() {
            return Err(Error::Empty("no views".into()));
        }
        let mut g = Graph::new();
        let fb = self.f.bind_frozen(&mut g)?;
        let mut pooled = Vec::with_capacity(views.len());
        for v in views {
            pooled.push(self.content.encode_all(&mut g, &fb, v)?.pooled);
        }
        let stacked = g.concat_rows(&pooled)?;
        let mean = g.mean_rows(stacked)?;
        Ok(g.value(mean).data().to_vec())
    }

    /// Builds `y = G(maps)` and `q = H([x, y])` on `graph`. `xs` holds one
    /// content vector per item.
    pub fn forward(&self, graph: &mut Graph, gb: &Bound, hb: &Bound, xs: &[Vec<f64>], maps: &[&PatchGrid]) -> Result<Forward> {
        if xs.len() != maps.len() || xs.is_empty() {
            return Err(Error::Shape(format!("{} content vectors for {} maps", xs.len(), maps.len())));
        }
        let d = self.config.dim();
        if let Some(bad) = xs.iter().find(|x| x.len() != d) {
            return Err(Error::Shape(format!("content vector of length {}, expected {d}", bad.len())));
        }
        let x = graph.constant(Tensor::from_rows(xs)?)?;
        let mut ys = Vec::with_capacity(maps.len());
        for m in maps {
            ys.push(self.encode_map(graph, gb, m)?);
        }
        let y = graph.concat_rows(&ys)?;
        let xy = graph.concat_cols(&[x, y])?;
        let q = self.regressor.forward(graph, hb, xy)?;
        Ok(Forward { x, y, q })
    }

    fn encode_map(&self, graph: &mut Graph, gb: &Bound, map: &PatchGrid) -> Result<Var> {
        let e = if self.config.center_maps {
            self.distortion.encode_all(graph, gb, &center_patches(map))?
        } else {
            self.distortion.encode_all(graph, gb, map)?
        };
        Ok(e.pooled)
    }

    /// Distortion vectors without gradient tracking.
    pub fn distortion_vectors(&self, maps: &[&PatchGrid]) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new();
        let gb = self.g.bind_frozen(&mut graph)?;
        maps.iter()
            .map(|m| {
                let y = self.encode_map(&mut graph, &gb, m)?;
                Ok(graph.value(y).data().to_vec())
            })
            .collect()
    }

    /// Scores on the scaled MOS axis.
    pub fn predict_scaled(&self, xs: &[Vec<f64>], maps: &[&PatchGrid]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let gb = self.g.bind_frozen(&mut graph)?;
        let hb = self.h.bind_frozen(&mut graph)?;
        let fw = self.forward(&mut graph, &gb, &hb, xs, maps)?;
        Ok(graph.value(fw.q).data().to_vec())
    }

    /// Predicted MOS for one prepared item.
    pub fn predict(&self, input: &ItemInput) -> Result<f64> {
        let x = self.content_vector(&input.views)?;
        let s = self.predict_scaled(&[x], &[&input.map])?;
        Ok(self.config.scaler.unscale(s[0]))
    }

    pub fn to_entries(&self) -> Entries {
        let mut e = self.f.entries_with_prefix("F.");
        e.extend(self.g.entries_with_prefix("G."));
        e.extend(self.h.entries_with_prefix("H."));
        e
    }

    /// Writes the weights to `ckpt` and the configuration to `config`.
    pub fn save(&self, ckpt: &Path, config: &Path) -> Result<()> {
        checkpoint::save(ckpt, &self.to_entries())?;
        std::fs::write(config, self.config.to_toml()?).map_err(|e| Error::io(config, e))
    }

    pub fn load(ckpt: &Path, config: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
        let cfg = ModelConfig::from_toml(&text)?;
        let entries = checkpoint::load(ckpt)?;
        let mut rng = crate::rng::seeded(0);
        let mut f = ParameterSet::new();
        let content = PatchEncoder::init(cfg.content, &mut f, &mut rng)?;
        f.load_prefixed(&entries, "F.")?;
        let mut model = Self::new(cfg, content, f, &mut rng)?;
        model.g.load_prefixed(&entries, "G.")?;
        model.h.load_prefixed(&entries, "H.")?;
        Ok(model)
    }
}

/// Pairwise hinge ranking loss, averaged over all `B^2` ordered pairs.
pub fn rank_loss(g: &mut Graph, q_hat: Var, q: &[f64]) -> Result<Var> {
    g.rank_hinge(q_hat, q)
}

/// MSE plus weighted rank and MI terms. `mi` is a scalar node.
pub fn total_loss(g: &mut Graph, q_hat: Var, q: &[f64], mi: Var, lambda_rank: f64, lambda_mi: f64) -> Result<LossTerms> {
    if q.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let target = g.constant(Tensor::new(g.value(q_hat).shape().to_vec(), q.to_vec())?)?;
    let diff = g.sub(q_hat, target)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let rank = rank_loss(g, q_hat, q)?;
    let wr = g.scale(rank, lambda_rank)?;
    let wm = g.scale(mi, lambda_mi)?;
    let t = g.add(mse, wr)?;
    let total = g.add(t, wm)?;
    Ok(LossTerms { total, mse, rank })
}

/// Value form of [`total_loss`].
pub fn total_loss_value(q_hat: &[f64], q: &[f64], mi: f64, lambda_rank: f64, lambda_mi: f64) -> Result<f64> {
    if q_hat.len() != q.len() || q.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", q_hat.len(), q.len())));
    }
    let mse = exact_sum(q_hat.iter().zip(q).map(|(a, b)| (a - b) * (a - b))) / q.len() as f64;
    Ok(mse + lambda_rank * crate::diff::graph::rank_hinge_value(q_hat, q) + lambda_mi * mi)
}

/// Checksum of a named parameter section in a checkpoint, for audits.
pub fn section_checksum(entries: &Entries, prefix: &str) -> u64 {
    let mut p = ParameterSet::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix(prefix) {
            p.insert(rest.to_string(), t.clone());
        }
    }
    p.checksum()
}
