//! Content-disjoint fold planning, Logistic-4 alignment and correlation
//! metrics.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::exact_sum;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord};
use crate::model::{prepare_input, QualityModel};
use crate::pointcloud::{normalize_unit_sphere, read_ply};
use crate::rng::{hash_str, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// `k` folds with blocks of `test_size` contents (default `ceil(n / k)`),
    /// wrapping around when `k * test_size` exceeds the content count.
    KFold { k: usize, test_size: Option<usize> },
    /// One seeded 8:1:1 train/val/test split by content.
    ThreeWay,
}

impl Protocol {
    pub fn tag(&self) -> String {
        match self {
            Protocol::KFold { k, .. } => format!("{k}-fold"),
            Protocol::ThreeWay => "8:1:1".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold: usize,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Every fold is train/val/test disjoint. A k-fold plan whose test sets
    /// together reach the corpus size must also test every id.
    pub fn check(&self, ids: &BTreeSet<String>) -> Result<()> {
        let mut tested = BTreeSet::new();
        for f in &self.folds {
            if !f.train.is_disjoint(&f.test) || !f.train.is_disjoint(&f.val) || !f.val.is_disjoint(&f.test) {
                return Err(Error::InvalidArgument(format!("fold {} overlaps", f.fold)));
            }
            for id in f.train.iter().chain(&f.val).chain(&f.test) {
                if !ids.contains(id) {
                    return Err(Error::InvalidArgument(format!("fold {} references unknown content `{id}`", f.fold)));
                }
            }
            tested.extend(f.test.iter().cloned());
        }
        let capacity: usize = self.folds.iter().map(|f| f.test.len()).sum();
        let must_cover = matches!(self.protocol, Protocol::KFold { .. }) && capacity >= ids.len();
        if must_cover && &tested != ids {
            return Err(Error::InvalidArgument("some contents are never tested".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

pub fn plan_folds(content_ids: &[String], protocol: Protocol, seed: u64) -> Result<FoldPlan> {
    let mut ids: Vec<String> = content_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    ids.shuffle(&mut seeded(seed));
    let folds = match protocol {
        Protocol::KFold { k, test_size } => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!("k-fold needs at least 2 contents, got {n}")));
            }
            if k < 2 {
                return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
            }
            let ts = test_size.unwrap_or(n.div_ceil(k));
            if ts == 0 || ts >= n {
                return Err(Error::InvalidArgument(format!("test size {ts} for {n} contents")));
            }
            (0..k)
                .map(|f| {
                    let test: BTreeSet<String> = (0..ts).map(|t| ids[(f * ts + t) % n].clone()).collect();
                    let train = ids.iter().filter(|id| !test.contains(*id)).cloned().collect();
                    Fold {
                        fold: f,
                        train,
                        val: BTreeSet::new(),
                        test,
                    }
                })
                .collect()
        }
        Protocol::ThreeWay => {
            if n < 3 {
                return Err(Error::InvalidArgument(format!("three-way split needs at least 3 contents, got {n}")));
            }
            let tenth = ((n as f64) / 10.0).round().max(1.0) as usize;
            let test: BTreeSet<String> = ids[..tenth].iter().cloned().collect();
            let val: BTreeSet<String> = ids[tenth..2 * tenth].iter().cloned().collect();
            let train = ids[2 * tenth..].iter().cloned().collect();
            vec![Fold { fold: 0, train, val, test }]
        }
    };
    Ok(FoldPlan { protocol, folds })
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} versus {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("need at least two values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    exact_sum(v.iter().copied()) / v.len() as f64
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let sab = exact_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let saa = exact_sum(a.iter().map(|x| (x - ma) * (x - ma)));
    let sbb = exact_sum(b.iter().map(|y| (y - mb) * (y - mb)));
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant sequence".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

pub fn srocc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn plcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(a, b)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok((exact_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y))) / a.len() as f64).sqrt())
}

/// `f(s) = (b1 - b2) / (1 + exp(-(s - b3) / b4)) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic4Fit {
    pub beta: [f64; 4],
    pub rss: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn logistic4(beta: &[f64; 4], s: f64) -> f64 {
    let [b1, b2, b3, b4] = *beta;
    (b1 - b2) / (1.0 + (-(s - b3) / b4).exp()) + b2
}

impl Logistic4Fit {
    pub fn eval(&self, s: f64) -> f64 {
        logistic4(&self.beta, s)
    }
}

fn rss(beta: &[f64; 4], s: &[f64], y: &[f64]) -> f64 {
    exact_sum(s.iter().zip(y).map(|(&si, &yi)| {
        let r = yi - logistic4(beta, si);
        r * r
    }))
}

const MAX_ITER: usize = 200;
const REL_TOL: f64 = 1e-10;

/// Least-squares Logistic-4 fit by Levenberg-Marquardt damped Gauss-Newton.
pub fn logistic4_fit(scores: &[f64], mos: &[f64]) -> Result<Logistic4Fit> {
    check_pair(scores, mos)?;
    if scores.len() < 5 {
        return Err(Error::InvalidArgument(format!("Logistic-4 needs at least 5 points, got {}", scores.len())));
    }
    let ms = mean(scores);
    let sd = (exact_sum(scores.iter().map(|s| (s - ms) * (s - ms))) / scores.len() as f64).sqrt();
    if sd == 0.0 {
        return Err(Error::Degenerate("constant scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let max = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = mos.iter().copied().fold(f64::INFINITY, f64::min);
    let mut beta = [max, min, median, sd / 4.0];
    let mut cur = rss(&beta, scores, mos);
    let mut lambda = 1e-3;
    let mut converged = cur == 0.0;
    let mut iterations = 0;
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        let [b1, b2, b3, b4] = beta;
        for (&s, &y) in scores.iter().zip(mos) {
            let sig = 1.0 / (1.0 + (-(s - b3) / b4).exp());
            let d = (b1 - b2) * sig * (1.0 - sig);
            let j = Vector4::new(sig, 1.0 - sig, -d / b4, -d * (s - b3) / (b4 * b4));
            jtj += j * j.transpose();
            jtr += j * (y - logistic4(&beta, s));
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [b1 + delta[0], b2 + delta[1], b3 + delta[2], b4 + delta[3]];
            let next = rss(&trial, scores, mos);
            if trial[3] != 0.0 && next.is_finite() && next <= cur {
                let rel = (cur - next) / cur.max(f64::MIN_POSITIVE);
                beta = trial;
                cur = next;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                converged = rel < REL_TOL || cur == 0.0;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no damping level reduces the residual: stationary point
            converged = true;
        }
    }
    Ok(Logistic4Fit {
        beta,
        rss: cur,
        converged,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub srocc: f64,
    pub plcc: f64,
    pub rmse: f64,
    pub beta: [f64; 4],
    pub n_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub srocc: f64,
    pub plcc: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub folds: Vec<FoldMetrics>,
    pub mean: MeanMetrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    /// One row per fold followed by a `mean` row.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = String::from("fold,srocc,plcc,rmse,beta1,beta2,beta3,beta4,n_test\n");
        for f in &self.folds {
            let [b1, b2, b3, b4] = f.beta;
            out.push_str(&format!(
                "{},{},{},{},{b1},{b2},{b3},{b4},{}\n",
                f.fold, f.srocc, f.plcc, f.rmse, f.n_test
            ));
        }
        out.push_str(&format!("mean,{},{},{},,,,,\n", self.mean.srocc, self.mean.plcc, self.mean.rmse));
        out.into_bytes()
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?).map_err(|e| Error::io(json, e))?;
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))
    }
}

/// Metrics of one test set: SROCC on raw predictions, PLCC and RMSE after
/// Logistic-4 alignment.
pub fn fold_metrics(fold: usize, pred: &[f64], mos: &[f64]) -> Result<FoldMetrics> {
    let fit = logistic4_fit(pred, mos)?;
    let aligned: Vec<f64> = pred.iter().map(|&p| fit.eval(p)).collect();
    Ok(FoldMetrics {
        fold,
        srocc: srocc(pred, mos)?,
        plcc: plcc(&aligned, mos)?,
        rmse: rmse(&aligned, mos)?,
        beta: fit.beta,
        n_test: pred.len(),
    })
}

/// Scores `(content_id, mos, prediction)` triples against `plan`.
pub fn evaluate_predictions(items: &[(String, f64, f64)], plan: &FoldPlan) -> Result<MetricsReport> {
    let known: BTreeSet<&str> = items.iter().map(|(c, _, _)| c.as_str()).collect();
    let folds = plan
        .folds
        .par_iter()
        .map(|f| {
            if let Some(missing) = f.test.iter().find(|c| !known.contains(c.as_str())) {
                return Err(Error::InvalidArgument(format!("fold {} references absent content `{missing}`", f.fold)));
            }
            let (mos, pred): (Vec<f64>, Vec<f64>) =
                items.iter().filter(|(c, _, _)| f.test.contains(c)).map(|(_, m, p)| (*m, *p)).unzip();
            fold_metrics(f.fold, &pred, &mos)
        })
        .collect::<Result<Vec<_>>>()?;
    if folds.is_empty() {
        return Err(Error::Empty("fold plan has no folds".into()));
    }
    let avg = |g: fn(&FoldMetrics) -> f64| mean(&folds.iter().map(g).collect::<Vec<_>>());
    Ok(MetricsReport {
        protocol: plan.protocol.tag(),
        mean: MeanMetrics {
            srocc: avg(|f| f.srocc),
            plcc: avg(|f| f.plcc),
            rmse: avg(|f| f.rmse),
        },
        folds,
    })
}

/// Predicted MOS for each record, with the same fixed poses as training.
pub fn predict_records(model: &QualityModel, manifest: &Manifest, records: &[&ManifestRecord]) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| {
            let pc = normalize_unit_sphere(&read_ply(&manifest.resolve(r))?)?;
            model.predict(&prepare_input(&pc, &model.config, hash_str(&r.path))?)
        })
        .collect()
}

/// Predicts every manifest row with `model` and scores the plan's test sets.
pub fn evaluate(model: &QualityModel, manifest: &Manifest, plan: &FoldPlan) -> Result<MetricsReport> {
    let records: Vec<&ManifestRecord> = manifest.records.iter().collect();
    let preds = predict_records(model, manifest, &records)?;
    let items: Vec<(String, f64, f64)> = records
        .iter()
        .zip(preds)
        .map(|(r, p)| (r.content_id.clone(), r.mos, p))
        .collect();
    evaluate_predictions(&items, plan)
}
