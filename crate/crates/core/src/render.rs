//! Orthographic multi-view point splatting.
//!
//! A view rotates the cloud by a seeded global rotation followed by one of
//! six axis-aligned poses, projects `[-1, 1]^2` onto the raster and draws
//! each point as a z-buffered square splat.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::transform::{apply, compose, rotation_matrix, Mat3};
use crate::pointcloud::PointCloud;

pub const BACKGROUND: [u8; 3] = [128, 128, 128];
pub const MAX_VIEWS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Splats cover `(2r + 1)^2` pixels.
    pub splat_radius: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            splat_radius: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub rgb: Vec<u8>,
    /// Row-major, true where no splat wrote the pixel.
    pub mask: Vec<bool>,
}

impl ViewImage {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: BACKGROUND.repeat(width * height),
            mask: vec![true; width * height],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn is_background(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    /// Channel values scaled to `[0, 1]`, row-major HWC.
    pub fn to_unit(&self) -> Vec<f64> {
        self.rgb.iter().map(|&v| f64::from(v) / 255.0).collect()
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.rgb.clone())
            .ok_or_else(|| Error::Shape("raster size does not match dimensions".into()))?;
        img.save(path)?;
        Ok(())
    }

    /// One bit per pixel, row-major, most significant bit first.
    pub fn mask_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.mask.len().div_ceil(8)];
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn save(&self, png: &Path) -> Result<()> {
        self.save_png(png)?;
        let mask = png.with_extension("mask");
        std::fs::write(&mask, self.mask_bytes()).map_err(|e| Error::io(&mask, e))
    }

    /// Loads a PNG and its sibling `.mask` file.
    pub fn load(png: &Path) -> Result<Self> {
        let img = image::open(png)?.to_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let mask_path = png.with_extension("mask");
        let bits = std::fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        if bits.len() != (width * height).div_ceil(8) {
            return Err(Error::Shape(format!(
                "{}: {} mask bytes for a {width}x{height} image",
                mask_path.display(),
                bits.len()
            )));
        }
        let mask = (0..width * height)
            .map(|i| bits[i / 8] & (0x80 >> (i % 8)) != 0)
            .collect();
        Ok(Self {
            width,
            height,
            rgb: img.into_raw(),
            mask,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPose {
    pub pose_seed: u64,
    pub view: usize,
    /// Full rotation applied before projection.
    pub rotation: Mat3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<ViewImage>,
    pub poses: Vec<ViewPose>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Writes `view_<n>.png`, `view_<n>.mask` and `poses.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (n, v) in self.views.iter().enumerate() {
            v.save(&dir.join(format!("view_{n}.png")))?;
        }
        let poses = dir.join("poses.json");
        std::fs::write(&poses, serde_json::to_vec_pretty(&self.poses)?).map_err(|e| Error::io(&poses, e))
    }

    /// Reads the views written by [`ViewSet::save`]. Poses are optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut pngs: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let stem = p.file_stem()?.to_str()?;
                let n = stem.strip_prefix("view_")?.parse().ok()?;
                (p.extension()? == "png").then_some((n, p))
            })
            .collect();
        pngs.sort();
        if pngs.is_empty() {
            return Err(Error::Empty(format!("no view_<n>.png in {}", dir.display())));
        }
        let views = pngs.iter().map(|(_, p)| ViewImage::load(p)).collect::<Result<Vec<_>>>()?;
        let poses_path = dir.join("poses.json");
        let poses = if poses_path.exists() {
            let bytes = std::fs::read(&poses_path).map_err(|e| Error::io(&poses_path, e))?;
            serde_json::from_slice(&bytes)?
        } else {
            Vec::new()
        };
        Ok(Self { views, poses })
    }
}

/// Axis pose `n`: the viewing direction +Z, -Z, +X, -X, +Y, -Y is turned
/// onto the depth axis.
pub fn canonical_pose(n: usize) -> Result<Mat3> {
    Ok(match n {
        0 => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        1 => [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
        2 => [[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
        3 => [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]],
        4 => [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        5 => [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]],
        _ => return Err(Error::InvalidArgument(format!("view {n}: at most {MAX_VIEWS} views"))),
    })
}

pub fn view_pose(pose_seed: u64, view: usize) -> Result<ViewPose> {
    Ok(ViewPose {
        pose_seed,
        view,
        rotation: compose(&canonical_pose(view)?, &rotation_matrix(pose_seed)),
    })
}

/// Pixel column and row of a projected point; may fall outside the raster.
pub fn project(p: [f64; 3], cfg: &RenderConfig) -> (i64, i64) {
    let px = ((p[0] + 1.0) * cfg.width as f64 / 2.0).floor() as i64;
    let py = ((1.0 - p[1]) * cfg.height as f64 / 2.0).floor() as i64;
    (px, py)
}

/// Renders one view. Depth is `-z` after rotation; the smaller depth wins
/// and ties keep the lower point index.
pub fn render_view(pc: &PointCloud, rotation: &Mat3, cfg: &RenderConfig) -> Result<ViewImage> {
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::InvalidArgument("raster must be non-empty".into()));
    }
    let (w, h, r) = (cfg.width as i64, cfg.height as i64, cfg.splat_radius as i64);
    let mut img = ViewImage::blank(cfg.width, cfg.height);
    let mut depth = vec![f64::INFINITY; cfg.width * cfg.height];
    for (i, &p) in pc.positions().iter().enumerate() {
        let q = apply(rotation, p);
        let (px, py) = project(q, cfg);
        let d = -q[2];
        let color = pc.color(i);
        for y in (py - r).max(0)..=(py + r).min(h - 1) {
            for x in (px - r).max(0)..=(px + r).min(w - 1) {
                let k = (y * w + x) as usize;
                if d < depth[k] {
                    depth[k] = d;
                    img.rgb[3 * k..3 * k + 3].copy_from_slice(&color);
                    img.mask[k] = false;
                }
            }
        }
    }
    if img.mask.iter().all(|&m| m) {
        return Err(Error::Degenerate("no point projects onto the raster".into()));
    }
    Ok(img)
}

pub fn render_views(pc: &PointCloud, n_views: usize, cfg: &RenderConfig, pose_seed: u64) -> Result<ViewSet> {
    if n_views == 0 || n_views > MAX_VIEWS {
        return Err(Error::InvalidArgument(format!("n_views must be in 1..={MAX_VIEWS}, got {n_views}")));
    }
    let poses = (0..n_views).map(|n| view_pose(pose_seed, n)).collect::<Result<Vec<_>>>()?;
    let views = poses
        .par_iter()
        .map(|pose| render_view(pc, &pose.rotation, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { views, poses })
}

/// Renders both clouds with identical poses.
pub fn render_pair(
    distorted: &PointCloud,
    reference: &PointCloud,
    n_views: usize,
    cfg: &RenderConfig,
    pose_seed: u64,
) -> Result<(ViewSet, ViewSet)> {
    let (a, b) = rayon::join(
        || render_views(distorted, n_views, cfg, pose_seed),
        || render_views(reference, n_views, cfg, pose_seed),
    );
    Ok((a?, b?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::transform::IDENTITY;

    #[test]
    fn single_point_block() {
        let pc = PointCloud::new(vec![[0.0; 3]], Some(vec![[200, 10, 30]])).unwrap();
        let img = render_view(&pc, &IDENTITY, &RenderConfig::default()).unwrap();
        for row in 0..512 {
            for col in 0..512 {
                let inside = (254..=258).contains(&row) && (254..=258).contains(&col);
                assert_eq!(!img.is_background(row, col), inside, "({row},{col})");
                let expect = if inside { [200, 10, 30] } else { BACKGROUND };
                assert_eq!(img.pixel(row, col), expect);
            }
        }
        assert_eq!(img.foreground_pixels(), 25);
    }

    #[test]
    fn depth_and_tie_rules() {
        let cfg = RenderConfig::default();
        // larger z is closer to the camera
        let pc = PointCloud::new(vec![[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]], Some(vec![[1, 1, 1], [2, 2, 2]])).unwrap();
        assert_eq!(render_view(&pc, &IDENTITY, &cfg).unwrap().pixel(256, 256), [2, 2, 2]);
        let tie = PointCloud::new(vec![[0.0; 3], [0.0; 3]], Some(vec![[1, 1, 1], [2, 2, 2]])).unwrap();
        assert_eq!(render_view(&tie, &IDENTITY, &cfg).unwrap().pixel(256, 256), [1, 1, 1]);
    }

    #[test]
    fn uncolored_points_are_white() {
        let pc = PointCloud::new(vec![[0.5, 0.5, 0.0]], None).unwrap();
        let img = render_view(&pc, &IDENTITY, &RenderConfig::default()).unwrap();
        // x = 0.5 -> col 384, y = 0.5 -> row 128
        assert_eq!(img.pixel(128, 384), [255, 255, 255]);
    }

    #[test]
    fn offscreen_cloud_is_degenerate() {
        let pc = PointCloud::new(vec![[5.0, 5.0, 0.0]], None).unwrap();
        assert!(matches!(render_view(&pc, &IDENTITY, &RenderConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn canonical_poses_are_rotations() {
        for n in 0..MAX_VIEWS {
            let m = canonical_pose(n).unwrap();
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert_eq!(det, 1.0);
        }
        assert!(canonical_pose(6).is_err());
        // the six poses look down six different axes
        let dirs: Vec<[f64; 3]> = (0..6).map(|n| canonical_pose(n).unwrap()[2]).collect();
        for i in 0..6 {
            for j in 0..i {
                assert_ne!(dirs[i], dirs[j]);
            }
        }
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pc = PointCloud::new(vec![[0.1, 0.2, 0.0], [-0.3, 0.4, 0.1]], Some(vec![[9, 8, 7], [1, 2, 3]])).unwrap();
        let cfg = RenderConfig {
            width: 37,
            height: 21,
            splat_radius: 1,
        };
        let set = render_views(&pc, 3, &cfg, 11).unwrap();
        set.save(dir.path()).unwrap();
        let back = ViewSet::load(dir.path()).unwrap();
        assert_eq!(back, set);
    }
}
