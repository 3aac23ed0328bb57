//! Procedural contents with graded synthetic distortions and pseudo-MOS.
//!
//! Pseudo-MOS is a linear schedule in the distortion level, not a
//! perceptual measurement.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ply::{save_ply, PlyFormat};
use super::transform::normalize_unit_sphere;
use super::PointCloud;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRecord};
use crate::rng::{derive, seeded};

pub type CorpusRecord = ManifestRecord;

pub const MAX_LEVEL: u32 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionType {
    GaussianNoise,
    ColorNoise,
    Downsample,
}

impl DistortionType {
    pub const ALL: [DistortionType; 3] = [
        DistortionType::GaussianNoise,
        DistortionType::ColorNoise,
        DistortionType::Downsample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionType::GaussianNoise => "gaussian_noise",
            DistortionType::ColorNoise => "color_noise",
            DistortionType::Downsample => "downsample",
        }
    }

    /// Per-type slope of the pseudo-MOS schedule.
    pub fn weight(self) -> f64 {
        match self {
            DistortionType::GaussianNoise => 0.8,
            DistortionType::ColorNoise => 1.0,
            DistortionType::Downsample => 0.9,
        }
    }

    fn index(self) -> u64 {
        match self {
            DistortionType::GaussianNoise => 0,
            DistortionType::ColorNoise => 1,
            DistortionType::Downsample => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Torus,
    Blob,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Torus, Shape::Blob];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Torus => "torus",
            Shape::Blob => "blob",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub contents: usize,
    pub types: Vec<DistortionType>,
    pub levels: Vec<u32>,
    pub points: usize,
    /// Position noise standard deviation per level, in normalized units.
    pub noise_step: f64,
    /// Color noise half-width per level, in 8-bit units.
    pub color_step: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            contents: 8,
            types: DistortionType::ALL.to_vec(),
            levels: (1..=MAX_LEVEL).collect(),
            points: 4096,
            noise_step: 0.01,
            color_step: 12.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contents < 2 {
            return Err(Error::InvalidArgument("a corpus needs at least two contents".into()));
        }
        if self.types.is_empty() || self.levels.is_empty() {
            return Err(Error::InvalidArgument("no distortion types or levels".into()));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l == 0 || l > MAX_LEVEL) {
            return Err(Error::InvalidArgument(format!("level {l} outside 1..={MAX_LEVEL}")));
        }
        if self.points < 2 {
            return Err(Error::InvalidArgument("contents need at least two points".into()));
        }
        Ok(())
    }
}

pub fn pseudo_mos(kind: DistortionType, level: u32) -> f64 {
    5.0 - 4.0 * (level as f64 / MAX_LEVEL as f64) * kind.weight()
}

/// Points kept by downsampling at `level`: `round(n (1 - 0.12 level))`.
pub fn downsample_keep(n: usize, level: u32) -> usize {
    ((n as f64) * (1.0 - 0.12 * level as f64)).round().max(1.0) as usize
}

pub fn content_id(index: usize) -> String {
    format!("c{index:02}_{}", Shape::ALL[index % Shape::ALL.len()].name())
}

/// Procedural content `index`: the shape cycles through the four families,
/// later variants change proportions and color pattern. Returned normalized.
pub fn make_content(index: usize, points: usize, seed: u64) -> Result<PointCloud> {
    let shape = Shape::ALL[index % Shape::ALL.len()];
    let variant = (index / Shape::ALL.len()) as f64;
    let mut rng = seeded(derive(seed, &[0x636f_6e74, index as u64]));
    let stretch = [1.0, 1.0 - 0.15 * variant, 1.0 + 0.1 * variant];
    let mut positions = Vec::with_capacity(points);
    for _ in 0..points {
        let p = match shape {
            Shape::Sphere => {
                let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                v.map(|c| c / r)
            }
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Shape::Torus => {
                let r = 0.35 + 0.05 * variant;
                let (u, v): (f64, f64) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
                [(1.0 + r * v.cos()) * u.cos(), (1.0 + r * v.cos()) * u.sin(), r * v.sin()]
            }
            Shape::Blob => {
                let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                [v[0], 0.6 * v[1], 0.35 * v[2] + 0.2 * v[0] * v[0]]
            }
        };
        positions.push([p[0] * stretch[0], p[1] * stretch[1], p[2] * stretch[2]]);
    }
    let freq = 2.0 + 1.5 * (index % 5) as f64;
    let phase = 0.7 * index as f64;
    let colors = positions
        .iter()
        .map(|p| {
            let band = |k: f64| {
                let t = (freq * (p[0] + k * p[1] - 0.5 * k * p[2]) + phase + k).sin();
                (127.5 + 127.5 * t).round().clamp(0.0, 255.0) as u8
            };
            [band(0.0), band(1.0), band(2.0)]
        })
        .collect();
    normalize_unit_sphere(&PointCloud::new(positions, Some(colors))?)
}

/// Applies `kind` at `level` to a normalized reference.
pub fn distort(reference: &PointCloud, kind: DistortionType, level: u32, cfg: &CorpusConfig, seed: u64) -> Result<PointCloud> {
    if level == 0 || level > MAX_LEVEL {
        return Err(Error::InvalidArgument(format!("level {level} outside 1..={MAX_LEVEL}")));
    }
    let mut rng = seeded(seed);
    match kind {
        DistortionType::GaussianNoise => {
            let normal = Normal::new(0.0, cfg.noise_step * level as f64)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let pos = reference
                .positions()
                .iter()
                .map(|p| p.map(|c| c + normal.sample(&mut rng)))
                .collect();
            PointCloud::new(pos, reference.colors().map(<[_]>::to_vec))
        }
        DistortionType::ColorNoise => {
            let amp = cfg.color_step * level as f64;
            let colors = (0..reference.len())
                .map(|i| {
                    reference
                        .color(i)
                        .map(|c| (c as f64 + rng.random_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8)
                })
                .collect();
            PointCloud::new(reference.positions().to_vec(), Some(colors))
        }
        DistortionType::Downsample => {
            let keep = downsample_keep(reference.len(), level);
            let mut idx: Vec<usize> = (0..reference.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(keep);
            idx.sort_unstable();
            reference.select(&idx)
        }
    }
}

/// Writes references, distorted clouds, and `manifest.csv` under `out`.
pub fn synthesize_corpus(cfg: &CorpusConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("references")).map_err(|e| Error::io(out, e))?;
    std::fs::create_dir_all(out.join("distorted")).map_err(|e| Error::io(out, e))?;

    let references: Vec<PointCloud> = (0..cfg.contents)
        .into_par_iter()
        .map(|i| make_content(i, cfg.points, cfg.seed))
        .collect::<Result<_>>()?;
    for (i, r) in references.iter().enumerate() {
        save_ply(&out.join("references").join(format!("{}.ply", content_id(i))), r, PlyFormat::BinaryLittleEndian)?;
    }

    let mut jobs = Vec::new();
    for i in 0..cfg.contents {
        for &kind in &cfg.types {
            for &level in &cfg.levels {
                jobs.push((i, kind, level));
            }
        }
    }
    let records = jobs
        .par_iter()
        .map(|&(i, kind, level)| {
            let cid = content_id(i);
            let seed = derive(cfg.seed, &[0x6469_7374, i as u64, kind.index(), level as u64]);
            let pc = distort(&references[i], kind, level, cfg, seed)?;
            let rel = format!("distorted/{cid}_{}_{level}.ply", kind.as_str());
            save_ply(&out.join(&rel), &pc, PlyFormat::BinaryLittleEndian)?;
            Ok(ManifestRecord {
                path: rel,
                content_id: cid,
                distortion_type: kind.as_str().to_string(),
                level,
                mos: pseudo_mos(kind, level),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(out, records);
    manifest.save(&out.join("manifest.csv"))?;
    Ok(manifest)
}
