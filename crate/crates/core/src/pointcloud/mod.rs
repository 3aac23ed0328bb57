//! Point clouds: PLY I/O, normalization, rotations, and a synthetic corpus.

pub mod corpus;
pub mod ply;
pub mod transform;

use crate::error::{Error, Result};

pub use corpus::{synthesize_corpus, CorpusConfig, CorpusRecord, DistortionType};
pub use ply::{parse_ply, read_ply, write_ply, PlyError, PlyFormat};
pub use transform::{normalize_unit_sphere, rotate, rotation_matrix, Mat3};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Empty("point cloud has no points".into()));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("position of point {i}")));
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::Shape(format!(
                    "{} colors for {} points",
                    c.len(),
                    positions.len()
                )));
            }
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    /// Color of point `i`, white when the cloud is uncolored.
    pub fn color(&self, i: usize) -> [u8; 3] {
        self.colors.as_ref().map_or([255; 3], |c| c[i])
    }

    /// Keeps the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("point index {i} out of range")));
        }
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let colors = self
            .colors
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        Self::new(positions, colors)
    }

    pub(crate) fn with_positions(&self, positions: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(positions, self.colors.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(PointCloud::new(vec![], None).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], None).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], Some(vec![])).is_err());
        let pc = PointCloud::new(vec![[0.0; 3], [1.0; 3]], None).unwrap();
        assert_eq!(pc.color(1), [255, 255, 255]);
        assert_eq!(pc.select(&[1]).unwrap().positions(), &[[1.0; 3]]);
        assert!(pc.select(&[2]).is_err());
    }
}
