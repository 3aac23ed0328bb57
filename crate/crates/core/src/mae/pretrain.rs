//! Pretraining loop with resumable checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{rec_loss_graph, ReconstructionDecoder};
use super::encoder::{EncoderConfig, PatchEncoder};
use super::patch::{patchify, sample_mask};
use crate::diff::checkpoint::{self, Entries};
use crate::diff::{exact_sum, Activation, AdamConfig, AdamState, Bound, Gradients, Graph, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::pointcloud::{normalize_unit_sphere, read_ply, PointCloud};
use crate::render::{render_view, view_pose, RenderConfig};
use crate::rng::{derive, seeded};

const TAG_ORDER: u64 = 1;
const TAG_POSE: u64 = 2;
const TAG_MASK: u64 = 3;
const TAG_INIT: u64 = 4;

/// A normalized distorted cloud and its normalized reference.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudPair {
    pub distorted: PointCloud,
    pub reference: PointCloud,
}

/// Loads every manifest row with its reference, both normalized.
pub fn load_pairs(manifest: &Manifest) -> Result<Vec<CloudPair>> {
    let mut refs: BTreeMap<String, PointCloud> = BTreeMap::new();
    for id in manifest.content_ids() {
        let pc = read_ply(&manifest.reference_path(&id))?;
        refs.insert(id, normalize_unit_sphere(&pc)?);
    }
    manifest
        .records
        .par_iter()
        .map(|r| {
            Ok(CloudPair {
                distorted: normalize_unit_sphere(&read_ply(&manifest.resolve(r))?)?,
                reference: refs[&r.content_id].clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub views: usize,
    pub render: RenderConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
    /// Score only the masked patches instead of the full image.
    pub masked_only_loss: bool,
    /// Reuse the same poses and masks for an item in every epoch.
    pub fixed_augmentation: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            lr: 3e-4,
            weight_decay: 1e-4,
            mask_ratio: 0.5,
            views: 6,
            render: RenderConfig::default(),
            encoder: EncoderConfig::default(),
            seed: 0,
            masked_only_loss: false,
            fixed_augmentation: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.render.height != self.encoder.height || self.render.width != self.encoder.width {
            return Err(Error::Config(format!(
                "render size {}x{} differs from encoder input {}x{}",
                self.render.height, self.render.width, self.encoder.height, self.encoder.width
            )));
        }
        if self.epochs == 0 || self.batch == 0 || self.views == 0 || self.views > crate::render::MAX_VIEWS {
            return Err(Error::Config("epochs and batch must be positive and views in 1..=6".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean per-item loss (summed over views) seen during the epoch.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: PatchEncoder,
    pub encoder_params: ParameterSet,
    pub decoder_params: ParameterSet,
    pub log: Vec<EpochLoss>,
}

/// Encoder hyperparameters as a checkpoint entry.
pub fn encoder_entry(c: &EncoderConfig) -> Tensor {
    let act = match c.activation {
        Activation::Relu => 0.0,
        Activation::Gelu => 1.0,
    };
    let v = [c.patch, c.height, c.width, c.embed, c.blocks, c.out_dim].map(|x| x as f64);
    let mut data = v.to_vec();
    data.push(act);
    Tensor::new(vec![7], data).expect("seven values")
}

pub fn encoder_from_entry(t: &Tensor) -> Result<EncoderConfig> {
    let d = t.data();
    if d.len() != 7 || d.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(Error::Checkpoint("malformed encoder description".into()));
    }
    let cfg = EncoderConfig {
        patch: d[0] as usize,
        height: d[1] as usize,
        width: d[2] as usize,
        embed: d[3] as usize,
        blocks: d[4] as usize,
        out_dim: d[5] as usize,
        activation: if d[6] == 0.0 { Activation::Relu } else { Activation::Gelu },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the content encoder (`F.` section) from a pretraining checkpoint.
pub fn load_content_encoder(path: &Path) -> Result<(PatchEncoder, ParameterSet)> {
    let entries = checkpoint::load(path)?;
    let cfg_entry = find(&entries, "meta.encoder")?;
    let cfg = encoder_from_entry(cfg_entry)?;
    let mut params = ParameterSet::new();
    let enc = PatchEncoder::init(cfg, &mut params, &mut seeded(0))?;
    params.load_prefixed(&entries, "F.")?;
    Ok((enc, params))
}

fn find<'a>(entries: &'a Entries, name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
}

struct Model {
    encoder: PatchEncoder,
    decoder: ReconstructionDecoder,
    enc: ParameterSet,
    dec: ParameterSet,
}

impl Model {
    fn new(cfg: &PretrainConfig) -> Result<Self> {
        let mut rng = seeded(derive(cfg.seed, &[TAG_INIT]));
        let mut enc = ParameterSet::new();
        let mut dec = ParameterSet::new();
        let encoder = PatchEncoder::init(cfg.encoder, &mut enc, &mut rng)?;
        let decoder = ReconstructionDecoder::init(cfg.encoder, &mut dec, &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            enc,
            dec,
        })
    }

    /// Loss of one item summed over views, scaled by `scale`, with its
    /// gradients.
    fn item(&self, cfg: &PretrainConfig, pair: &CloudPair, epoch: usize, item: usize, scale: f64) -> Result<(f64, Bound, Bound, Gradients)> {
        let ep = if cfg.fixed_augmentation { 0 } else { epoch as u64 + 1 };
        let mut g = Graph::new();
        let eb = self.enc.bind(&mut g)?;
        let db = self.dec.bind(&mut g)?;
        let mut losses = Vec::with_capacity(cfg.views);
        for n in 0..cfg.views {
            let pose = view_pose(derive(cfg.seed, &[TAG_POSE, ep, item as u64, n as u64]), n)?;
            let dist = patchify(&render_view(&pair.distorted, &pose.rotation, &cfg.render)?, cfg.encoder.patch)?;
            let refr = patchify(&render_view(&pair.reference, &pose.rotation, &cfg.render)?, cfg.encoder.patch)?;
            let mask = sample_mask(dist.len(), cfg.mask_ratio, derive(cfg.seed, &[TAG_MASK, ep, item as u64, n as u64]))?;
            let e = self.encoder.encode(&mut g, &eb, &dist, &mask.visible())?;
            let pred = self.decoder.reconstruct(&mut g, &db, e.tokens, e.pooled, &mask)?;
            let l = rec_loss_graph(&mut g, pred, &refr.data, cfg.masked_only_loss.then_some(&mask))?;
            losses.push(l);
        }
        let mut cols = Vec::with_capacity(losses.len());
        for l in losses {
            cols.push(g.reshape(l, vec![1, 1])?);
        }
        let stacked = g.concat_cols(&cols)?;
        let total = g.sum(stacked)?;
        let value = g.scalar_value(total)?;
        let scaled = g.scale(total, scale)?;
        let grads = g.backward(scaled)?;
        Ok((value, eb, db, grads))
    }
}

fn save_state(path: &Path, cfg: &PretrainConfig, model: &Model, opts: [&AdamState; 2], log: &[EpochLoss]) -> Result<()> {
    let mut entries = model.enc.entries_with_prefix("F.");
    entries.extend(model.dec.entries_with_prefix("dec."));
    entries.extend(opts[0].to_entries("opt.F."));
    entries.extend(opts[1].to_entries("opt.dec."));
    entries.push(("meta.encoder".into(), encoder_entry(&cfg.encoder)));
    entries.push(("meta.epochs_done".into(), Tensor::scalar(log.len() as f64)));
    entries.push((
        "meta.log".into(),
        Tensor::new(vec![log.len()], log.iter().map(|l| l.loss).collect())?,
    ));
    checkpoint::save(path, &entries)
}

/// Runs (or resumes) pretraining. When `checkpoint` is given the full state
/// is written there after every epoch.
pub fn pretrain(cfg: &PretrainConfig, pairs: &[CloudPair], checkpoint_path: Option<&Path>, resume: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    let mut model = Model::new(cfg)?;
    let adam = AdamConfig::default().with_lr(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut opt = AdamState::new(adam);
    let mut dec_opt = AdamState::new(adam);
    let mut log = Vec::new();
    if let Some(path) = resume {
        let entries = checkpoint::load(path)?;
        if encoder_from_entry(find(&entries, "meta.encoder")?)? != cfg.encoder {
            return Err(Error::Checkpoint("encoder configuration differs from the checkpoint".into()));
        }
        model.enc.load_prefixed(&entries, "F.")?;
        model.dec.load_prefixed(&entries, "dec.")?;
        opt = AdamState::from_entries(adam, &entries, "opt.F.")?;
        dec_opt = AdamState::from_entries(adam, &entries, "opt.dec.")?;
        let past = find(&entries, "meta.log")?;
        log = past
            .data()
            .iter()
            .enumerate()
            .map(|(epoch, &loss)| EpochLoss { epoch, loss })
            .collect();
    }

    for epoch in log.len()..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seeded(derive(cfg.seed, &[TAG_ORDER, epoch as u64])));
        let mut item_losses = Vec::with_capacity(pairs.len());
        for (bi, batch) in order.chunks(cfg.batch).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let results = batch
                .par_iter()
                .map(|&i| model.item(cfg, &pairs[i], epoch, i, scale))
                .collect::<Result<Vec<_>>>()?;
            model.enc.zero_grad();
            model.dec.zero_grad();
            for (loss, eb, db, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: bi });
                }
                item_losses.push(*loss);
                model.enc.accumulate(eb, grads)?;
                model.dec.accumulate(db, grads)?;
            }
            opt.step(&mut model.enc)?;
            dec_opt.step(&mut model.dec)?;
        }
        let loss = exact_sum(item_losses.iter().copied()) / item_losses.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {loss:.6}");
        log.push(EpochLoss { epoch, loss });
        if let Some(path) = checkpoint_path {
            save_state(path, cfg, &model, [&opt, &dec_opt], &log)?;
        }
    }
    Ok(PretrainOutcome {
        encoder: model.encoder,
        encoder_params: model.enc,
        decoder_params: model.dec,
        log,
    })
}
