//! Synthetic shapes and occluded training pairs.
//!
//! Every family is sampled uniformly by area on an analytic surface that is
//! centred at the origin and scaled so its farthest surface point lies at
//! radius 1.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_arg, Error, Result};
use crate::geom::{crop_occlusion, Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Torus,
    Box,
    Plane,
    Cylinder,
    /// A torus ring around a central sphere.
    Composite,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [Self::Sphere, Self::Torus, Self::Box, Self::Plane, Self::Cylinder, Self::Composite];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Torus => "torus",
            Self::Box => "box",
            Self::Plane => "plane",
            Self::Cylinder => "cylinder",
            Self::Composite => "composite",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape family {s:?}")))
    }
}

pub const TORUS_MAJOR: f64 = 1.0 / 1.4;
pub const TORUS_MINOR: f64 = 0.4 / 1.4;
/// Box half-extents; the corner lies on the unit sphere.
pub const BOX_HALF: Point3 = [0.8 / 1.118_033_988_749_895, 0.5 / 1.118_033_988_749_895, 0.25 / 1.118_033_988_749_895];
const CYL_RADIUS: f64 = 0.6;
const CYL_HALF_HEIGHT: f64 = 0.8;

fn unit_vector<R: Rng>(rng: &mut R) -> Point3 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Point3 = std::array::from_fn(|_| normal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

fn sample_torus<R: Rng>(rng: &mut R, major: f64, minor: f64) -> Point3 {
    // area element ∝ (major + minor cos θ); rejection on θ
    loop {
        let theta = rng.random_range(0.0..TAU);
        let accept = (major + minor * theta.cos()) / (major + minor);
        if rng.random::<f64>() <= accept {
            let phi = rng.random_range(0.0..TAU);
            let ring = major + minor * theta.cos();
            return [ring * phi.cos(), ring * phi.sin(), minor * theta.sin()];
        }
    }
}

fn sample_box<R: Rng>(rng: &mut R, half: Point3) -> Point3 {
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (a, &area) in areas.iter().enumerate() {
        if pick < area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut p: Point3 = std::array::from_fn(|a| rng.random_range(-half[a]..half[a]));
    p[axis] = if rng.random::<bool>() { half[axis] } else { -half[axis] };
    p
}

fn sample_cylinder<R: Rng>(rng: &mut R, radius: f64, half_height: f64) -> Point3 {
    let side = TAU * radius * 2.0 * half_height;
    let caps = 2.0 * PI * radius * radius;
    let phi = rng.random_range(0.0..TAU);
    if rng.random::<f64>() * (side + caps) < side {
        [radius * phi.cos(), radius * phi.sin(), rng.random_range(-half_height..half_height)]
    } else {
        let r = radius * rng.random::<f64>().sqrt();
        let z = if rng.random::<bool>() { half_height } else { -half_height };
        [r * phi.cos(), r * phi.sin(), z]
    }
}

/// `n` area-uniform samples from `family`, deterministic in `seed`.
pub fn gen_shape(family: ShapeFamily, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 8 {
        return invalid_arg(format!("need at least 8 points, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Point3> = match family {
        ShapeFamily::Sphere => (0..n).map(|_| unit_vector(&mut rng)).collect(),
        ShapeFamily::Torus => (0..n).map(|_| sample_torus(&mut rng, TORUS_MAJOR, TORUS_MINOR)).collect(),
        ShapeFamily::Box => (0..n).map(|_| sample_box(&mut rng, BOX_HALF)).collect(),
        ShapeFamily::Plane => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            (0..n).map(|_| [rng.random_range(-h..h), rng.random_range(-h..h), 0.0]).collect()
        }
        ShapeFamily::Cylinder => {
            let s = (CYL_RADIUS * CYL_RADIUS + CYL_HALF_HEIGHT * CYL_HALF_HEIGHT).sqrt();
            (0..n)
                .map(|_| sample_cylinder(&mut rng, CYL_RADIUS, CYL_HALF_HEIGHT).map(|c| c / s))
                .collect()
        }
        ShapeFamily::Composite => {
            // ring: major 0.7, minor 0.3 (outer radius 1); core sphere radius 0.35
            let (major, minor, core) = (0.7, 0.3, 0.35);
            let ring_area = 4.0 * PI * PI * major * minor;
            let core_area = 4.0 * PI * core * core;
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() * (ring_area + core_area) < ring_area {
                        sample_torus(&mut rng, major, minor)
                    } else {
                        unit_vector(&mut rng).map(|c| c * core)
                    }
                })
                .collect()
        }
    };
    PointCloud::new(points)
}

/// Inputs to [`make_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub family: ShapeFamily,
    pub n_gt: usize,
    pub keep_fraction: f64,
    pub input_points: usize,
}

pub const PAD_JITTER: f64 = 1e-3;

/// Ground-truth shape and its occluded, fixed-size partial view.
///
/// The partial cloud keeps the near side of the shape along a random view
/// direction, then is subsampled without replacement, or padded by
/// duplicating random kept points with Gaussian jitter, to exactly
/// `input_points` points.
pub fn make_pair(spec: &PairSpec, seed: u64) -> Result<(PointCloud, PointCloud)> {
    if spec.input_points == 0 {
        return invalid_arg("input point count must be positive");
    }
    let gt = gen_shape(spec.family, spec.n_gt, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let view = unit_vector(&mut rng);
    let cropped = crop_occlusion(&gt, view, spec.keep_fraction)?;
    let partial = resample(&cropped, spec.input_points, &mut rng)?;
    Ok((partial, gt))
}

/// Subsamples `cloud` without replacement, or pads it by duplicating random
/// points with Gaussian jitter, to exactly `target` points.
pub fn resample<R: Rng>(cloud: &PointCloud, target: usize, rng: &mut R) -> Result<PointCloud> {
    if target == 0 {
        return invalid_arg("target point count must be positive");
    }
    let n = cloud.count();
    if n == target {
        return Ok(cloud.clone());
    }
    if n > target {
        let mut idx = index::sample(rng, n, target).into_vec();
        idx.sort_unstable();
        return cloud.select(&idx);
    }
    let jitter = Normal::new(0.0, PAD_JITTER).unwrap();
    let mut points = cloud.points().to_vec();
    while points.len() < target {
        let src = cloud.points()[rng.random_range(0..n)];
        points.push(std::array::from_fn(|a| src[a] + jitter.sample(rng)));
    }
    PointCloud::new(points)
}
