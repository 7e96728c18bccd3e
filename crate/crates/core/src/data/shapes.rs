use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::seed::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    Plane,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] =
        [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus, ShapeClass::Cylinder, ShapeClass::Cone, ShapeClass::Plane];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Torus => "torus",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Plane => "plane",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeClass> {
        Self::ALL.into_iter().find(|c| c.name() == s.to_ascii_lowercase())
    }
}

const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;

/// Cone: unit base radius, height 2, base on y = 0. The area-weighted
/// centroid of lateral surface plus base disk sits this far above the base.
fn cone_centroid_height() -> f64 {
    let slant = 5f64.sqrt();
    (slant * 2.0 / 3.0) / (slant + 1.0)
}

/// One uniform surface sample of `class`, centred on the surface centroid.
fn sample_surface(class: ShapeClass, rng: &mut ChaCha8Rng) -> Point {
    match class {
        ShapeClass::Sphere => loop {
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        },
        ShapeClass::Cube => {
            let face = rng.random_range(0..6);
            let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            }
        }
        ShapeClass::Torus => loop {
            // rejection on the area element (R + r cos θ)
            let theta = rng.random_range(0.0..TAU);
            let phi = rng.random_range(0.0..TAU);
            let w = (TORUS_MAJOR + TORUS_MINOR * theta.cos()) / (TORUS_MAJOR + TORUS_MINOR);
            if rng.random::<f64>() <= w {
                let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
                break [ring * phi.cos(), TORUS_MINOR * theta.sin(), ring * phi.sin()];
            }
        },
        ShapeClass::Cylinder => {
            // lateral area 4π, each cap π
            let u = rng.random_range(0.0..6.0 * PI);
            let phi = rng.random_range(0.0..TAU);
            if u < 4.0 * PI {
                [phi.cos(), rng.random_range(-1.0..1.0), phi.sin()]
            } else {
                let r = rng.random::<f64>().sqrt();
                let y = if u < 5.0 * PI { 1.0 } else { -1.0 };
                [r * phi.cos(), y, r * phi.sin()]
            }
        }
        ShapeClass::Cone => {
            let slant = 5f64.sqrt();
            let phi = rng.random_range(0.0..TAU);
            let yc = cone_centroid_height();
            if rng.random_range(0.0..slant + 1.0) < slant {
                // radius grows linearly from the apex, so its density does too
                let t = rng.random::<f64>().sqrt();
                [t * phi.cos(), 2.0 * (1.0 - t) - yc, t * phi.sin()]
            } else {
                let r = rng.random::<f64>().sqrt();
                [r * phi.cos(), -yc, r * phi.sin()]
            }
        }
        ShapeClass::Plane => [rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)],
    }
}

/// Uniform surface sample of a unit-scale primitive (y up) with isotropic
/// Gaussian noise, rescaled so the farthest point is at radius 1 from the
/// shape's surface centroid.
pub fn gen_shape(class: ShapeClass, n_points: usize, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::contract(format!("gen_shape needs at least 8 points, got {n_points}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::contract(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let mut rng = seed::rng(seed, Stream::Data, class as u64);
    let mut pts: Vec<Point> = (0..n_points).map(|_| sample_surface(class, &mut rng)).collect();
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma > 0");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let r = pts.iter().map(norm).fold(0.0, f64::max);
    if r > 0.0 {
        pts.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v /= r));
    }
    PointCloud::new(pts)
}

fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Moves the sample centroid to the origin and scales the farthest point to
/// radius 1.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|i| cloud.points().iter().map(|p| p[i]).sum::<f64>() / n);
    let centered: Vec<Point> = cloud.points().iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let r = centered.iter().map(norm).fold(0.0, f64::max);
    let scale = if r > 0.0 { 1.0 / r } else { 1.0 };
    let pts = centered.iter().map(|p| [p[0] * scale, p[1] * scale, p[2] * scale]).collect();
    let mut out = PointCloud::new(pts).expect("finite");
    out.label = cloud.label;
    out
}
