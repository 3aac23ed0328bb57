//! Stage-2 training: alternating optimization of the MI estimator and the
//! distortion branch plus regressor, with the content branch frozen.
//!
//! Per batch:
//! 1. `x` comes from the frozen content branch (cached), `y = G(map)`;
//! 2. `N_M` Adam steps on the estimator NLL of `(x, y)`;
//! 3. the MI bound is evaluated with the updated estimator;
//! 4. `q = H([x, y])`;
//! 5. total loss = MSE + λ1 rank + λ2 MI;
//! 6. one Adam step on `G` and `H` only.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{exact_sum, AdamConfig, AdamState, Graph, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::mae::patch::{patchify, PatchGrid};
use crate::mae::pretrain::load_content_encoder;
use crate::manifest::{Manifest, ManifestRecord};
use crate::mi::{EstimatorConfig, RepresentationBatch, VariationalNetwork};
use crate::model::{prepare_input_draws, total_loss, ModelTemplate, MosScaler, QualityModel};
use crate::pointcloud::{normalize_unit_sphere, read_ply};
use crate::render::ViewImage;
use crate::rng::{derive, hash_str, seeded};

const TAG_MODEL: u64 = 1;
const TAG_ESTIMATOR: u64 = 2;
const TAG_ORDER: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    /// Estimator steps per batch, `N_M`.
    pub inner_steps: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub estimator_lr: f64,
    pub weight_decay: f64,
    pub estimator_hidden: Vec<usize>,
    /// Mini-patch maps drawn per item from its fixed renders, cycled by
    /// epoch. Each draw is held in memory.
    pub map_draws: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            inner_steps: 10,
            epochs: 150,
            lr: 0.003,
            lr_decay: 0.95,
            estimator_lr: 1e-3,
            weight_decay: 1e-4,
            estimator_hidden: vec![128, 128],
            map_draws: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("at least one estimator step per batch".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("at least one epoch".into()));
        }
        if self.map_draws == 0 {
            return Err(Error::Config("at least one map draw".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("estimator_lr", self.estimator_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Main learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// A stimulus with its cached frozen-branch vector, mini-patch map images
/// and scaled MOS. Epoch `e` trains on `maps[e % maps.len()]`.
#[derive(Clone, Debug)]
pub struct PreparedItem {
    pub key: String,
    pub x: Vec<f64>,
    pub maps: Vec<ViewImage>,
    pub target: f64,
}

impl PreparedItem {
    /// Patches of the map used during `epoch`.
    pub fn map(&self, epoch: usize, patch: usize) -> Result<PatchGrid> {
        if self.maps.is_empty() {
            return Err(Error::Empty(format!("no mini-patch map for {}", self.key)));
        }
        patchify(&self.maps[epoch % self.maps.len()], patch)
    }
}

/// Parameter checksums taken around the sub-steps of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Audit {
    pub f_before: u64,
    pub f_after: u64,
    pub gh_before_inner: u64,
    pub gh_after_inner: u64,
    pub phi_before_main: u64,
    pub phi_after_main: u64,
}

impl Audit {
    pub fn isolated(&self) -> bool {
        self.f_before == self.f_after && self.gh_before_inner == self.gh_after_inner && self.phi_before_main == self.phi_after_main
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub total: f64,
    pub mse: f64,
    pub rank: f64,
    pub mi: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    #[serde(skip)]
    pub audit: Audit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub mse: f64,
    pub rank: f64,
    pub mi: f64,
    /// Fraction of batches whose estimator NLL did not increase.
    pub nll_improved: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub batches: Vec<BatchLog>,
    pub epochs: Vec<EpochSummary>,
}

impl EpochLog {
    pub fn batches_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.batches)
    }

    pub fn epochs_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.epochs)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

fn mean(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count();
    exact_sum(v) / n as f64
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: QualityModel,
    pub estimator: VariationalNetwork,
    opt_g: AdamState,
    opt_h: AdamState,
    opt_phi: AdamState,
    batches_seen: usize,
}

fn union_checksum(a: &ParameterSet, b: &ParameterSet) -> u64 {
    crate::rng::derive(a.checksum(), &[b.checksum()])
}

impl Trainer {
    pub fn new(model: QualityModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let est_cfg = EstimatorConfig {
            hidden: config.estimator_hidden.clone(),
            ..EstimatorConfig::new(model.config.dim())
        };
        let estimator = VariationalNetwork::new(est_cfg, &mut seeded(derive(config.seed, &[TAG_ESTIMATOR])))?;
        let main = AdamConfig::default().with_lr(config.lr).with_weight_decay(config.weight_decay);
        Ok(Self {
            opt_g: AdamState::new(main),
            opt_h: AdamState::new(main),
            opt_phi: AdamState::new(AdamConfig::default().with_lr(config.estimator_lr)),
            config,
            model,
            estimator,
            batches_seen: 0,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        let lr = self.config.lr_at(epoch);
        self.opt_g.set_lr(lr);
        self.opt_h.set_lr(lr);
    }

    /// One alternating update on `batch`. Fails with
    /// [`Error::NonFiniteLoss`] or [`Error::Isolation`].
    pub fn train_step(&mut self, batch: &[&PreparedItem], epoch: usize) -> Result<BatchLog> {
        let id = self.batches_seen;
        self.batches_seen += 1;
        let non_finite = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { batch: id },
            other => other,
        };
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let f_before = self.model.f.checksum();
        let xs: Vec<Vec<f64>> = batch.iter().map(|it| it.x.clone()).collect();
        let patch = self.model.config.distortion.patch;
        let grids: Vec<PatchGrid> = batch.iter().map(|it| it.map(epoch, patch)).collect::<Result<_>>()?;
        let maps: Vec<&PatchGrid> = grids.iter().collect();
        let targets: Vec<f64> = batch.iter().map(|it| it.target).collect();

        // (1) representations, detached for the estimator
        let ys = self.model.distortion_vectors(&maps).map_err(non_finite)?;
        let rep = RepresentationBatch::new(Tensor::from_rows(&xs)?, Tensor::from_rows(&ys)?)?;

        // (2) estimator inner loop
        let gh_before_inner = union_checksum(&self.model.g, &self.model.h);
        let trace = self
            .estimator
            .train_estimator(&rep, self.config.inner_steps, &mut self.opt_phi)
            .map_err(non_finite)?;
        let gh_after_inner = union_checksum(&self.model.g, &self.model.h);
        let (nll_before, nll_after) = (trace[0], trace[trace.len() - 1]);

        // (3)-(6) main step with the estimator frozen
        let phi_before_main = self.estimator.params.checksum();
        let mut graph = Graph::new();
        let gb = self.model.g.bind(&mut graph)?;
        let hb = self.model.h.bind(&mut graph)?;
        let pb = self.estimator.params.bind_frozen(&mut graph)?;
        let fw = self.model.forward(&mut graph, &gb, &hb, &xs, &maps).map_err(non_finite)?;
        let mi = self.estimator.estimate_graph(&mut graph, &pb, fw.x, fw.y).map_err(non_finite)?;
        let loss = total_loss(&mut graph, fw.q, &targets, mi, self.model.config.lambda_rank, self.model.config.lambda_mi)
            .map_err(non_finite)?;
        let values = [loss.total, loss.mse, loss.rank, mi].map(|v| graph.scalar_value(v));
        let [total, mse, rank, mi_v] = [0, 1, 2, 3].map(|i| values[i].as_ref().copied().unwrap_or(f64::NAN));
        if ![total, mse, rank, mi_v].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss { batch: id });
        }
        let grads = graph.backward(loss.total).map_err(non_finite)?;
        self.model.g.zero_grad();
        self.model.h.zero_grad();
        self.model.g.accumulate(&gb, &grads)?;
        self.model.h.accumulate(&hb, &grads)?;
        self.opt_g.step(&mut self.model.g)?;
        self.opt_h.step(&mut self.model.h)?;
        let audit = Audit {
            f_before,
            f_after: self.model.f.checksum(),
            gh_before_inner,
            gh_after_inner,
            phi_before_main,
            phi_after_main: self.estimator.params.checksum(),
        };
        if !audit.isolated() {
            return Err(Error::Isolation(format!("batch {id}: {audit:?}")));
        }
        Ok(BatchLog {
            epoch,
            batch: id,
            size: batch.len(),
            total,
            mse,
            rank,
            mi: mi_v,
            nll_before,
            nll_after,
            audit,
        })
    }

    /// Shuffled pass over `items`; a trailing batch of one item is merged
    /// into the previous batch.
    pub fn run_epoch(&mut self, items: &[PreparedItem], epoch: usize) -> Result<(EpochSummary, Vec<BatchLog>)> {
        if items.len() < 2 {
            return Err(Error::Empty("training needs at least two items".into()));
        }
        self.set_epoch(epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seeded(derive(self.config.seed, &[TAG_ORDER, epoch as u64])));
        let mut chunks: Vec<&[usize]> = order.chunks(self.config.batch).collect();
        if chunks.len() > 1 && chunks[chunks.len() - 1].len() == 1 {
            chunks.pop();
            let start = (chunks.len() - 1) * self.config.batch;
            let last = chunks.len() - 1;
            chunks[last] = &order[start..];
        }
        let mut logs = Vec::with_capacity(chunks.len());
        for chunk in chunks {
            let batch: Vec<&PreparedItem> = chunk.iter().map(|&i| &items[i]).collect();
            logs.push(self.train_step(&batch, epoch)?);
        }
        let summary = EpochSummary {
            epoch,
            lr: self.config.lr_at(epoch),
            total: mean(logs.iter().map(|l| l.total)),
            mse: mean(logs.iter().map(|l| l.mse)),
            rank: mean(logs.iter().map(|l| l.rank)),
            mi: mean(logs.iter().map(|l| l.mi)),
            nll_improved: logs.iter().filter(|l| l.nll_after <= l.nll_before).count() as f64 / logs.len() as f64,
        };
        log::info!(
            "epoch {epoch}: total {:.6} mse {:.6} rank {:.6} mi {:.6}",
            summary.total,
            summary.mse,
            summary.rank,
            summary.mi
        );
        Ok((summary, logs))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the lowest epoch-mean total loss.
    pub best: QualityModel,
    pub best_epoch: usize,
    pub last: QualityModel,
    pub log: EpochLog,
}

/// Runs `cfg.epochs` epochs over `items`.
pub fn train_run(model: QualityModel, items: &[PreparedItem], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut log = EpochLog::default();
    let mut best: Option<(f64, usize, QualityModel)> = None;
    for epoch in 0..cfg.epochs {
        let (summary, batches) = trainer.run_epoch(items, epoch)?;
        log.batches.extend(batches);
        log.epochs.push(summary);
        if best.as_ref().is_none_or(|(l, _, _)| summary.total < *l) {
            best = Some((summary.total, epoch, trainer.model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: trainer.model,
        log,
    })
}

/// Loads, normalizes and renders `records`, caching the frozen content
/// vector. Poses are fixed per item path; `map_draws` maps are sampled
/// from those renders.
pub fn prepare_items(model: &QualityModel, manifest: &Manifest, records: &[&ManifestRecord], map_draws: usize) -> Result<Vec<PreparedItem>> {
    records
        .par_iter()
        .map(|r| {
            let pc = normalize_unit_sphere(&read_ply(&manifest.resolve(r))?)?;
            let (views, maps) = prepare_input_draws(&pc, &model.config, hash_str(&r.path), map_draws)?;
            Ok(PreparedItem {
                key: r.path.clone(),
                x: model.content_vector(&views)?,
                maps,
                target: model.config.scaler.scale(r.mos),
            })
        })
        .collect()
}

/// Builds a fresh quality model around the content encoder stored in a
/// pretraining checkpoint.
pub fn init_model(content_ckpt: &Path, template: &ModelTemplate, scaler: MosScaler, seed: u64) -> Result<QualityModel> {
    let (content, f) = load_content_encoder(content_ckpt)?;
    let cfg = template.instantiate(content.config, scaler, seed);
    QualityModel::new(cfg, content, f, &mut seeded(derive(seed, &[TAG_MODEL])))
}

/// Trains on the `records` subset (all rows when `None`) of `manifest`.
pub fn train_from_manifest(
    manifest: &Manifest,
    records: Option<&[&ManifestRecord]>,
    content_ckpt: &Path,
    template: &ModelTemplate,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let all: Vec<&ManifestRecord> = manifest.records.iter().collect();
    let records = records.unwrap_or(&all);
    if records.is_empty() {
        return Err(Error::Empty("no training records".into()));
    }
    let scaler = MosScaler::fit(&records.iter().map(|r| r.mos).collect::<Vec<_>>())?;
    let model = init_model(content_ckpt, template, scaler, cfg.seed)?;
    cfg.validate()?;
    let items = prepare_items(&model, manifest, records, cfg.map_draws)?;
    train_run(model, &items, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_model;
    use crate::pointcloud::corpus::make_content;

    fn items(model: &QualityModel, n: usize) -> Vec<PreparedItem> {
        (0..n)
            .map(|i| {
                let pc = make_content(i % 4, 200, 7).unwrap();
                let (views, maps) = prepare_input_draws(&pc, &model.config, i as u64, 1).unwrap();
                PreparedItem {
                    key: format!("item{i}"),
                    x: model.content_vector(&views).unwrap(),
                    maps,
                    target: (i % 5) as f64 / 4.0,
                }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch: 4,
            inner_steps: 3,
            epochs: 2,
            estimator_hidden: vec![16],
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.003);
        assert!((c.lr_at(1) - 0.00285).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_single_item_batches() {
        let c = TrainConfig { batch: 1, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_estimator_lr_leaves_estimate_unchanged() {
        let model = tiny_model(1);
        let its = items(&model, 4);
        let cfg = TrainConfig { estimator_lr: 0.0, ..small_cfg() };
        let mut t = Trainer::new(model, cfg).unwrap();
        let batch: Vec<&PreparedItem> = its.iter().collect();
        let grids: Vec<PatchGrid> = batch.iter().map(|i| i.map(0, t.model.config.distortion.patch).unwrap()).collect();
        let maps: Vec<&PatchGrid> = grids.iter().collect();
        let ys = t.model.distortion_vectors(&maps).unwrap();
        let xs: Vec<Vec<f64>> = batch.iter().map(|i| i.x.clone()).collect();
        let rep = RepresentationBatch::new(Tensor::from_rows(&xs).unwrap(), Tensor::from_rows(&ys).unwrap()).unwrap();
        let before = t.estimator.estimate_mi(&rep).unwrap().value;
        let log = t.train_step(&batch, 0).unwrap();
        assert_eq!(log.mi, before);
        assert_eq!(log.nll_before, log.nll_after);
    }

    #[test]
    fn isolation_holds_each_step() {
        let model = tiny_model(2);
        let its = items(&model, 6);
        let out = train_run(model, &its, &small_cfg()).unwrap();
        assert!(out.log.batches.iter().all(|b| b.audit.isolated()));
        // 6 items in batches of 4: the remainder of 2 stays its own batch
        assert_eq!(out.log.batches.iter().filter(|b| b.epoch == 0).count(), 2);
    }

    #[test]
    fn singleton_remainder_is_merged() {
        let model = tiny_model(2);
        let its = items(&model, 5);
        let out = train_run(model, &its, &small_cfg()).unwrap();
        let sizes: Vec<usize> = out.log.batches.iter().filter(|b| b.epoch == 0).map(|b| b.size).collect();
        assert_eq!(sizes, vec![5]);
    }

    #[test]
    fn deterministic_log() {
        let its = items(&tiny_model(3), 6);
        let a = train_run(tiny_model(3), &its, &small_cfg()).unwrap();
        let b = train_run(tiny_model(3), &its, &small_cfg()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best.g.checksum(), b.best.g.checksum());
    }

    #[test]
    fn content_vector_independent_of_batch() {
        let model = tiny_model(4);
        let a = items(&model, 3);
        let b = items(&model, 5);
        for i in 0..3 {
            assert_eq!(a[i].x, b[i].x);
        }
    }

    #[test]
    fn exploding_lr_reports_batch() {
        let model = tiny_model(5);
        let its = items(&model, 4);
        let cfg = TrainConfig {
            lr: 1e200,
            epochs: 3,
            ..small_cfg()
        };
        match train_run(model, &its, &cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.log.epochs)),
        }
    }

    #[test]
    fn csv_logs_have_headers() {
        let model = tiny_model(6);
        let its = items(&model, 4);
        let out = train_run(model, &its, &small_cfg()).unwrap();
        let e = String::from_utf8(out.log.epochs_csv().unwrap()).unwrap();
        assert!(e.starts_with("epoch,lr,total,mse,rank,mi,nll_improved\n"));
        assert_eq!(e.lines().count(), 3);
        let b = String::from_utf8(out.log.batches_csv().unwrap()).unwrap();
        assert!(b.starts_with("epoch,batch,size,total,mse,rank,mi,nll_before,nll_after\n"));
    }
}
