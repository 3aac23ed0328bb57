//! Non-overlapping square patches and random patch masks.

use rand::seq::index::sample;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::render::ViewImage;
use crate::rng::seeded;

/// Patches of one image, one row of `3 p^2` values per patch in raster
/// order; inside a patch values run row, column, channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn patch(&self, k: usize) -> &[f64] {
        self.data.row(k)
    }

    /// The listed patches stacked in the given order.
    pub fn rows(&self, indices: &[usize]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(indices.len() * self.patch_len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::InvalidArgument(format!("patch {k} of {}", self.len())));
            }
            out.extend_from_slice(self.patch(k));
        }
        Tensor::new(vec![indices.len(), self.patch_len()], out)
    }
}

/// Cuts an `height x width x 3` row-major image into `p x p` patches.
pub fn patchify_values(values: &[f64], height: usize, width: usize, p: usize) -> Result<PatchGrid> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::InvalidArgument(format!("{height}x{width} is not tiled by {p}x{p} patches")));
    }
    if values.len() != height * width * 3 {
        return Err(Error::Shape(format!("{} values for a {height}x{width}x3 image", values.len())));
    }
    let (rows, cols) = (height / p, width / p);
    let mut data = Vec::with_capacity(values.len());
    for pr in 0..rows {
        for pc in 0..cols {
            for y in pr * p..(pr + 1) * p {
                let start = 3 * (y * width + pc * p);
                data.extend_from_slice(&values[start..start + 3 * p]);
            }
        }
    }
    Ok(PatchGrid {
        patch: p,
        height,
        width,
        data: Tensor::new(vec![rows * cols, 3 * p * p], data)?,
    })
}

/// Patches of a rendered view, with channels scaled to `[0, 1]`.
pub fn patchify(img: &ViewImage, p: usize) -> Result<PatchGrid> {
    patchify_values(&img.to_unit(), img.height, img.width, p)
}

/// Inverse of [`patchify_values`] for `N_p x 3p^2` patch rows.
pub fn unpatchify(patches: &[f64], height: usize, width: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || height % p != 0 || width % p != 0 || patches.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "{} patch values do not form a {height}x{width} image of {p}x{p} patches",
            patches.len()
        )));
    }
    let cols = width / p;
    let mut out = vec![0.0; patches.len()];
    for (k, patch) in patches.chunks_exact(3 * p * p).enumerate() {
        let (pr, pc) = (k / cols, k % cols);
        for (r, line) in patch.chunks_exact(3 * p).enumerate() {
            let start = 3 * ((pr * p + r) * width + pc * p);
            out[start..start + 3 * p].copy_from_slice(line);
        }
    }
    Ok(out)
}

/// Quantizes `[0, 1]` values back to bytes.
pub fn to_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub n_patches: usize,
    /// Sorted, unique.
    pub masked: Vec<usize>,
}

impl MaskSet {
    /// No patch masked.
    pub fn none(n_patches: usize) -> Self {
        Self {
            n_patches,
            masked: Vec::new(),
        }
    }

    pub fn is_masked(&self, k: usize) -> bool {
        self.masked.binary_search(&k).is_ok()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.n_patches).filter(|&k| !self.is_masked(k)).collect()
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.n_patches as f64
    }
}

/// Uniform random subset of `round(ratio * n)` patches.
pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    let count = (ratio * n_patches as f64).round() as usize;
    let mut masked = sample(&mut seeded(seed), n_patches, count).into_vec();
    masked.sort_unstable();
    Ok(MaskSet { n_patches, masked })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> ViewImage {
        let mut img = ViewImage::blank(w, h);
        for (i, v) in img.rgb.iter_mut().enumerate() {
            *v = (i * 7 % 256) as u8;
        }
        img
    }

    #[test]
    fn counts_and_first_patch() {
        let img = test_image(512, 512);
        let grid = patchify(&img, 16).unwrap();
        assert_eq!(grid.len(), 1024);
        let unit = img.to_unit();
        let mut expected = Vec::new();
        for y in 0..16 {
            expected.extend_from_slice(&unit[3 * y * 512..3 * y * 512 + 48]);
        }
        assert_eq!(grid.patch(0), expected.as_slice());
    }

    #[test]
    fn round_trip_is_exact() {
        let img = test_image(48, 32);
        let grid = patchify(&img, 16).unwrap();
        let back = unpatchify(grid.data.data(), 48, 32, 16).unwrap();
        assert_eq!(back, img.to_unit());
        assert_eq!(to_bytes(&back), img.rgb);
    }

    #[test]
    fn rejects_untiled_sizes() {
        assert!(patchify(&test_image(40, 32), 16).is_err());
        assert!(unpatchify(&[0.0; 10], 4, 4, 2).is_err());
    }

    #[test]
    fn mask_sizes() {
        let m = sample_mask(1024, 0.5, 1).unwrap();
        assert_eq!(m.masked.len(), 512);
        assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
        assert!(m.masked.iter().all(|&k| k < 1024));
        assert_eq!(m.visible().len(), 512);
        let two = sample_mask(2, 0.5, 9).unwrap();
        assert_eq!(two.masked.len(), 1);
        assert!(two.masked[0] < 2);
    }

    #[test]
    fn mask_determinism() {
        assert_eq!(sample_mask(1024, 0.5, 4).unwrap(), sample_mask(1024, 0.5, 4).unwrap());
        assert_ne!(sample_mask(1024, 0.5, 4).unwrap(), sample_mask(1024, 0.5, 5).unwrap());
        assert!(sample_mask(10, 0.0, 1).is_err());
        assert!(sample_mask(10, 1.0, 1).is_err());
    }
}
