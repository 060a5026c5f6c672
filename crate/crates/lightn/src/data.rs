//! Synthetic labeled point-cloud dataset: four shape classes separable by
//! coarse global geometry but confusable at very low sample counts.
//!
//! `two_spheres` is the deliberately hard class: a small fraction of its
//! points live on a small offset sphere, so a random subsample at low `m`
//! frequently misses the feature that separates it from `sphere`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

/// Fraction (numerator over 256) of `two_spheres` points placed on the
/// small offset sphere.
const SMALL_SPHERE_NUM: usize = 8;
const SMALL_SPHERE_DEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere,
    CubeSurface,
    Cylinder,
    TwoSpheres,
}

pub const ALL_CLASSES: [ShapeClass; NUM_CLASSES] =
    [ShapeClass::Sphere, ShapeClass::CubeSurface, ShapeClass::Cylinder, ShapeClass::TwoSpheres];

impl ShapeClass {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::CubeSurface => "cube_surface",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::TwoSpheres => "two_spheres",
        }
    }

    pub fn label(&self) -> usize {
        match self {
            ShapeClass::Sphere => 0,
            ShapeClass::CubeSurface => 1,
            ShapeClass::Cylinder => 2,
            ShapeClass::TwoSpheres => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub clouds: Vec<LabeledCloud>,
    pub num_classes: usize,
}

impl Dataset {
    /// The first `per_class` clouds of every class, in label order.
    pub fn subset_per_class(&self, per_class: usize) -> Dataset {
        let mut clouds = Vec::new();
        for label in 0..self.num_classes {
            clouds.extend(
                self.clouds.iter().filter(|c| c.label == label).take(per_class).cloned(),
            );
        }
        Dataset { clouds, num_classes: self.num_classes }
    }
}

fn unit_sphere_point(rng: &mut ChaCha20Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0f64),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Raw (pre-normalization) surface samples of one shape.
fn raw_shape(class: ShapeClass, n: usize, rng: &mut ChaCha20Rng) -> Vec<[f64; 3]> {
    match class {
        ShapeClass::Sphere => (0..n).map(|_| unit_sphere_point(rng)).collect(),
        ShapeClass::CubeSurface => (0..n)
            .map(|_| {
                let face = rng.gen_range(0..6usize);
                let u = rng.gen_range(-1.0..1.0);
                let v = rng.gen_range(-1.0..1.0);
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            })
            .collect(),
        ShapeClass::Cylinder => (0..n)
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let z = rng.gen_range(-1.0..1.0);
                [theta.cos(), theta.sin(), z]
            })
            .collect(),
        ShapeClass::TwoSpheres => {
            // deterministic split: the small offset sphere gets a fixed
            // fraction of the points, never fewer than two
            let n_small = ((n * SMALL_SPHERE_NUM) / SMALL_SPHERE_DEN).max(2);
            let mut pts = Vec::with_capacity(n);
            for _ in 0..n - n_small {
                pts.push(unit_sphere_point(rng));
            }
            for _ in 0..n_small {
                let s = unit_sphere_point(rng);
                pts.push([2.0 + 0.25 * s[0], 0.25 * s[1], 0.25 * s[2]]);
            }
            pts
        }
    }
}

/// Translate and uniformly scale the cloud so its bounding box fits the
/// unit cube `[0, 1]^3` (aspect ratio preserved, longest side mapped to 1).
pub fn normalize_unit_cube(points: &mut [[f64; 3]]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points.iter() {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let extent = (0..3).map(|c| hi[c] - lo[c]).fold(0.0f64, f64::max);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    for p in points.iter_mut() {
        for c in 0..3 {
            p[c] = (p[c] - lo[c]) * scale;
        }
    }
}

/// Generate `per_class` clouds of `n` points for each requested class,
/// seeded and deterministic. Clouds are normalized to the unit cube.
pub fn gen_synthetic(
    classes: &[ShapeClass],
    n: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if n < 8 {
        return Err(Error::Config(format!("gen_synthetic: n must be >= 8, got {n}")));
    }
    if classes.is_empty() || per_class == 0 {
        return Err(Error::Config("gen_synthetic: empty class list or per_class = 0".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut clouds = Vec::with_capacity(classes.len() * per_class);
    for &class in classes {
        for _ in 0..per_class {
            let mut pts = raw_shape(class, n, &mut rng);
            normalize_unit_cube(&mut pts);
            clouds.push(LabeledCloud { cloud: PointCloud::new(pts)?, label: class.label() });
        }
    }
    Ok(Dataset { clouds, num_classes: NUM_CLASSES })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_have_unit_norm_before_normalization() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for p in raw_shape(ShapeClass::Sphere, 64, &mut rng) {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn same_seed_gives_identical_dataset() {
        let a = gen_synthetic(&ALL_CLASSES, 16, 3, 42).unwrap();
        let b = gen_synthetic(&ALL_CLASSES, 16, 3, 42).unwrap();
        assert_eq!(a.clouds.len(), b.clouds.len());
        for (x, y) in a.clouds.iter().zip(&b.clouds) {
            assert_eq!(x.label, y.label);
            for (p, q) in x.cloud.points().iter().zip(y.cloud.points()) {
                assert_eq!(p, q);
            }
        }
    }

    #[test]
    fn class_counts_are_exact_and_clouds_fit_unit_cube() {
        let ds = gen_synthetic(&ALL_CLASSES, 32, 5, 7).unwrap();
        assert_eq!(ds.clouds.len(), 20);
        for label in 0..4 {
            assert_eq!(ds.clouds.iter().filter(|c| c.label == label).count(), 5);
        }
        for lc in &ds.clouds {
            for p in lc.cloud.points() {
                for c in 0..3 {
                    assert!(p[c] >= -1e-12 && p[c] <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_spheres_has_a_small_far_cluster() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pts = raw_shape(ShapeClass::TwoSpheres, 256, &mut rng);
        let far: Vec<_> = pts.iter().filter(|p| p[0] > 1.5).collect();
        assert_eq!(far.len(), 8);
        for p in &far {
            let d = ((p[0] - 2.0).powi(2) + p[1].powi(2) + p[2].powi(2)).sqrt();
            assert!((d - 0.25).abs() <= 1e-9);
        }
    }

    #[test]
    fn too_few_points_is_config_error() {
        assert!(gen_synthetic(&ALL_CLASSES, 4, 1, 0).is_err());
    }
}
