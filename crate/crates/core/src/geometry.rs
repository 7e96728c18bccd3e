//! Point-cloud primitives: farthest point sampling, k-NN patch grouping,
//! l2 Chamfer distance and train-time augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Raw `N×3` point set with an optional class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::contract(format!("point {} has a non-finite coordinate", i)));
        }
        Ok(Self { points, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flat row-major coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

/// `S` local patches of `k` points each, stored relative to their centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// Row-major `S×k` local coordinates.
    pub patches: Vec<Point>,
    pub k: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[Point] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }

    pub fn centers_flat(&self) -> Vec<f64> {
        self.centers.iter().flatten().copied().collect()
    }

    pub fn patches_flat(&self) -> Vec<f64> {
        self.patches.iter().flatten().copied().collect()
    }
}

#[inline]
pub fn dist_sq(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min sampling of `count` indices. The first index is drawn
/// uniformly from `seed`; each later pick maximizes the squared distance to
/// the selected set, ties going to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, count: usize, seed: u64) -> Result<Vec<usize>> {
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len());
    farthest_point_sample_from(cloud, count, first)
}

/// [`farthest_point_sample`] with an explicit first pick.
pub fn farthest_point_sample_from(cloud: &PointCloud, count: usize, first: usize) -> Result<Vec<usize>> {
    let pts = cloud.points();
    let n = pts.len();
    if count == 0 || count > n {
        return Err(Error::contract(format!("farthest_point_sample: need 1 <= S <= N, got S={} N={}", count, n)));
    }
    if first >= n {
        return Err(Error::contract(format!("farthest_point_sample: first index {} out of range", first)));
    }
    let mut selected = Vec::with_capacity(count);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..count {
        selected.push(current);
        let c = pts[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in pts.iter().enumerate() {
            let d = dist_sq(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        current = best.1;
    }
    Ok(selected)
}

/// Indices of the `k` cloud points nearest to `center`, ordered by squared
/// distance then index.
pub fn nearest_indices(cloud: &PointCloud, center: &Point, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = cloud.points().iter().enumerate().map(|(i, p)| (dist_sq(p, center), i)).collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by);
        order.truncate(k);
    }
    order.sort_unstable_by(by);
    order.into_iter().map(|(_, i)| i).collect()
}

/// Groups the `k` nearest points around each center into a recentred patch.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], k: usize) -> Result<PatchSet> {
    if k == 0 || k > cloud.len() {
        return Err(Error::contract(format!("knn_group: need 1 <= k <= N, got k={} N={}", k, cloud.len())));
    }
    if center_indices.is_empty() {
        return Err(Error::contract("knn_group: no centers"));
    }
    let pts = cloud.points();
    let mut centers = Vec::with_capacity(center_indices.len());
    let mut patches = Vec::with_capacity(center_indices.len() * k);
    for &ci in center_indices {
        let c = *pts.get(ci).ok_or_else(|| Error::contract(format!("knn_group: center index {} out of range", ci)))?;
        centers.push(c);
        for j in nearest_indices(cloud, &c, k) {
            let p = pts[j];
            patches.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(PatchSet { centers, patches, k })
}

/// FPS centers followed by k-NN grouping.
pub fn make_patches(cloud: &PointCloud, count: usize, k: usize, seed: u64) -> Result<PatchSet> {
    let idx = farthest_point_sample(cloud, count, seed)?;
    knn_group(cloud, &idx, k)
}

/// Symmetric l2 Chamfer distance: mean over `a` of the squared distance to
/// the nearest point of `b`, plus the same from `b` to `a`.
pub fn chamfer_l2(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer_l2: empty point set"));
    }
    let mut ab = vec![f64::INFINITY; a.len()];
    let mut ba = vec![f64::INFINITY; b.len()];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let d = dist_sq(p, q);
            ab[i] = ab[i].min(d);
            ba[j] = ba[j].min(d);
        }
    }
    Ok(ab.iter().sum::<f64>() / a.len() as f64 + ba.iter().sum::<f64>() / b.len() as f64)
}

/// Axis treated as "up" by rotation augmentation.
pub const UP_AXIS: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Per-axis uniform scale and translation.
    ScaleTranslate { scale: (f64, f64), translate: (f64, f64) },
    /// Uniform random rotation about [`UP_AXIS`].
    Rotate,
}

impl Augmentation {
    pub fn scale_translate_default() -> Self {
        Augmentation::ScaleTranslate { scale: (2.0 / 3.0, 1.5), translate: (-0.2, 0.2) }
    }
}

/// Rotation by `angle` radians about [`UP_AXIS`].
pub fn rotate_up(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            // y-up: rotate the (z, x) plane
            let (x, z) = (p[0], p[2]);
            [c * x + s * z, p[1], -s * x + c * z]
        })
        .collect();
    PointCloud { points, label: cloud.label }
}

pub fn augment(cloud: &PointCloud, aug: &Augmentation, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match aug {
        Augmentation::None => cloud.clone(),
        Augmentation::ScaleTranslate { scale, translate } => {
            let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
            let s: [f64; 3] = std::array::from_fn(|_| draw(&mut rng, *scale));
            let t: [f64; 3] = std::array::from_fn(|_| draw(&mut rng, *translate));
            let points = cloud.points().iter().map(|p| std::array::from_fn(|i| p[i] * s[i] + t[i])).collect();
            PointCloud { points, label: cloud.label }
        }
        Augmentation::Rotate => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            rotate_up(cloud, angle)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
    }

    /// Recomputes every min distance from scratch at each step.
    fn fps_oracle(cloud: &PointCloud, count: usize, first: usize) -> Vec<usize> {
        let pts = cloud.points();
        let mut sel = vec![first];
        while sel.len() < count {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..pts.len() {
                let d = sel.iter().map(|&s| dist_sq(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    fn knn_oracle(cloud: &PointCloud, center: usize, k: usize) -> Vec<usize> {
        let pts = cloud.points();
        let mut all: Vec<usize> = (0..pts.len()).collect();
        all.sort_by(|&a, &b| {
            dist_sq(&pts[a], &pts[center]).partial_cmp(&dist_sq(&pts[b], &pts[center])).unwrap().then(a.cmp(&b))
        });
        all.truncate(k);
        all
    }

    fn chamfer_oracle(a: &[Point], b: &[Point]) -> f64 {
        let side = |x: &[Point], y: &[Point]| {
            x.iter().map(|p| y.iter().map(|q| dist_sq(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
        };
        side(a, b) + side(b, a)
    }

    #[test]
    fn fps_square_corners() {
        let cloud = PointCloud::new(vec![[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [1., 1., 0.]]).unwrap();
        assert_eq!(farthest_point_sample_from(&cloud, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample_from(&cloud, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sample(&cloud, 4, 7).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&cloud, 5, 0).is_err());
    }

    #[test]
    fn fps_first_pick_is_seeded() {
        let cloud = random_cloud(64, 1);
        let firsts: std::collections::HashSet<usize> = (0..20).map(|s| farthest_point_sample(&cloud, 1, s).unwrap()[0]).collect();
        assert!(firsts.len() > 1);
        assert_eq!(farthest_point_sample(&cloud, 8, 3).unwrap(), farthest_point_sample(&cloud, 8, 3).unwrap());
    }

    #[test]
    fn knn_single_and_tie_cases() {
        let cloud = random_cloud(10, 2);
        let p = knn_group(&cloud, &[4], 1).unwrap();
        assert_eq!(p.patch(0), &[[0.0, 0.0, 0.0]]);

        let line = PointCloud::new((0..4).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let p = knn_group(&line, &[1], 2).unwrap();
        assert_eq!(p.patch(0), &[[0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert!(knn_group(&line, &[1], 5).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        for seed in 0..100 {
            let cloud = random_cloud(20 + (seed as usize * 7) % 100, seed);
            let centers = farthest_point_sample(&cloud, 6, seed).unwrap();
            let k = 1 + (seed as usize) % 16;
            let got = knn_group(&cloud, &centers, k).unwrap();
            for (s, &c) in centers.iter().enumerate() {
                let want = knn_oracle(&cloud, c, k);
                let ctr = cloud.points()[c];
                for (row, &j) in got.patch(s).iter().zip(&want) {
                    let p = cloud.points()[j];
                    assert_eq!(*row, [p[0] - ctr[0], p[1] - ctr[1], p[2] - ctr[2]]);
                }
            }
        }
    }

    #[test]
    fn fps_matches_oracle_up_to_512() {
        for seed in 0..30u64 {
            let n = 8 + ((seed * 97) % 505) as usize;
            let cloud = random_cloud(n, 100 + seed);
            let s = 1 + (seed as usize * 13) % n.min(40);
            let got = farthest_point_sample(&cloud, s, seed).unwrap();
            assert_eq!(got, fps_oracle(&cloud, s, got[0]));
        }
    }

    #[test]
    fn fps_min_separation_is_non_increasing() {
        let cloud = random_cloud(200, 5);
        let sel = farthest_point_sample(&cloud, 40, 5).unwrap();
        let pts = cloud.points();
        let mut prev = f64::INFINITY;
        for s in 2..=sel.len() {
            let mut m = f64::INFINITY;
            for a in 0..s {
                for b in a + 1..s {
                    m = m.min(dist_sq(&pts[sel[a]], &pts[sel[b]]));
                }
            }
            assert!(m <= prev);
            prev = m;
        }
    }

    #[test]
    fn chamfer_examples() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_l2(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
        assert!(chamfer_l2(&a, &[]).is_err());
    }

    #[test]
    fn chamfer_matches_all_pairs_oracle() {
        for seed in 0..50u64 {
            let a = random_cloud(1 + (seed as usize * 5) % 64, seed);
            let b = random_cloud(1 + (seed as usize * 11) % 64, seed + 1000);
            let got = chamfer_l2(a.points(), b.points()).unwrap();
            assert!((got - chamfer_oracle(a.points(), b.points())).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_examples() {
        let cloud = random_cloud(50, 9);
        let id = Augmentation::ScaleTranslate { scale: (1.0, 1.0), translate: (0.0, 0.0) };
        assert_eq!(augment(&cloud, &id, 3), cloud);
        assert_eq!(augment(&cloud, &Augmentation::None, 3), cloud);
        let full = rotate_up(&cloud, std::f64::consts::TAU);
        for (p, q) in cloud.points().iter().zip(full.points()) {
            assert!(dist_sq(p, q).sqrt() < 1e-12);
        }
        let st = augment(&cloud, &Augmentation::scale_translate_default(), 4);
        assert_ne!(st, cloud);
    }

    proptest! {
        #[test]
        fn rotation_preserves_pairwise_distances(seed in 0u64..10_000) {
            let cloud = random_cloud(30, seed);
            let rot = augment(&cloud, &Augmentation::Rotate, seed);
            for i in 0..30 {
                for j in 0..30 {
                    let d0 = dist_sq(&cloud.points()[i], &cloud.points()[j]).sqrt();
                    let d1 = dist_sq(&rot.points()[i], &rot.points()[j]).sqrt();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn patches_shift_back_into_cloud(seed in 0u64..10_000, k in 1usize..12) {
            let cloud = random_cloud(40, seed);
            let ps = make_patches(&cloud, 5, k, seed).unwrap();
            for s in 0..ps.len() {
                let c = ps.centers[s];
                prop_assert!(ps.patch(s).contains(&[0.0, 0.0, 0.0]));
                for p in ps.patch(s) {
                    let q = [p[0] + c[0], p[1] + c[1], p[2] + c[2]];
                    prop_assert!(cloud.points().iter().any(|x| dist_sq(x, &q) < 1e-24));
                }
            }
        }

        #[test]
        fn chamfer_symmetry_and_rigid_invariance(seed in 0u64..10_000, angle in 0.0f64..6.3) {
            let a = random_cloud(17, seed);
            let b = random_cloud(23, seed + 1);
            let ab = chamfer_l2(a.points(), b.points()).unwrap();
            prop_assert_eq!(ab, chamfer_l2(b.points(), a.points()).unwrap());
            prop_assert_eq!(chamfer_l2(a.points(), a.points()).unwrap(), 0.0);
            let shift = |c: &PointCloud| {
                let r = rotate_up(c, angle);
                r.points().iter().map(|p| [p[0] + 0.3, p[1] - 1.2, p[2] + 0.7]).collect::<Vec<_>>()
            };
            let moved = chamfer_l2(&shift(&a), &shift(&b)).unwrap();
            prop_assert!((moved - ab).abs() < 1e-9);
        }
    }
}
