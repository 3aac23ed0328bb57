use std::f64::consts::TAU;

use rand::Rng;

use super::PointCloud;
use crate::diff::exact_sum;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn apply(m: &Mat3, p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

pub fn compose(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Translates the centroid to the origin and scales the farthest point to
/// unit distance.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    let n = pc.len() as f64;
    let mut c = [0.0; 3];
    for (k, ck) in c.iter_mut().enumerate() {
        *ck = exact_sum(pc.positions().iter().map(|p| p[k])) / n;
    }
    let centred: Vec<[f64; 3]> = pc
        .positions()
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let r = centred
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if r <= f64::MIN_POSITIVE {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    pc.with_positions(centred.iter().map(|p| [p[0] / r, p[1] / r, p[2] / r]).collect())
}

/// Uniformly random rotation drawn from `seed` by Shoemake's quaternion
/// method. Seed 0 is reserved for the identity.
pub fn rotation_matrix(seed: u64) -> Mat3 {
    if seed == 0 {
        return IDENTITY;
    }
    let mut rng = seeded(seed);
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y, z, w) = (a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin(), b * (TAU * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rotate(pc: &PointCloud, seed: u64) -> Result<PointCloud> {
    transform(pc, &rotation_matrix(seed))
}

pub fn transform(pc: &PointCloud, m: &Mat3) -> Result<PointCloud> {
    pc.with_positions(pc.positions().iter().map(|&p| apply(m, p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = seeded(seed);
        let pts = (0..n)
            .map(|_| {
                let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                [v[0] * 3.0 + 1.0, v[1] - 2.0, v[2] * 0.5]
            })
            .collect();
        PointCloud::new(pts, None).unwrap()
    }

    fn norm(p: [f64; 3]) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn cube_corners() {
        let pts = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        let pc = normalize_unit_sphere(&PointCloud::new(pts, None).unwrap()).unwrap();
        for p in pc.positions() {
            assert!((norm(*p) - 1.0).abs() < 1e-12);
            for v in p {
                assert!((v.abs() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn idempotent_and_centred() {
        let once = normalize_unit_sphere(&random_cloud(3, 500)).unwrap();
        let twice = normalize_unit_sphere(&once).unwrap();
        for k in 0..3 {
            let mean = once.positions().iter().map(|p| p[k]).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-9);
        }
        let max = once.positions().iter().map(|&p| norm(p)).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-9);
        for (a, b) in once.positions().iter().zip(twice.positions()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coincident_points_rejected() {
        let pc = PointCloud::new(vec![[2.0, 1.0, 0.0]; 4], None).unwrap();
        assert!(matches!(normalize_unit_sphere(&pc), Err(Error::Degenerate(_))));
    }

    #[test]
    fn seed_zero_is_identity() {
        let pc = random_cloud(1, 20);
        assert_eq!(rotate(&pc, 0).unwrap(), pc);
    }

    #[test]
    fn rotation_is_orthonormal_and_deterministic() {
        for seed in 1..50 {
            let m = rotation_matrix(seed);
            let mt = [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ];
            let p = compose(&m, &mt);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((p[i][j] - e).abs() < 1e-12);
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
            assert_eq!(rotation_matrix(seed), m);
        }
    }
}
