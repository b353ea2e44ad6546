//! The radius function a star-shaped cloud induces on the unit sphere.
//!
//! Each point anchors its radius at its direction; elsewhere the function is
//! a Gaussian-weighted blend of the `k` nearest anchors under the chord
//! distance. Directions that carry several radii (non-star shapes) are
//! simply averaged.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{direction, to_spherical, Point, PointCloud};
use crate::harmonics::QuadratureGrid;

/// Below this chord distance a query is treated as sitting on an anchor.
pub const COINCIDENCE_EPS: f64 = 1e-12;

/// Clouds larger than this use spatial binning for neighbor search.
pub const BRUTE_FORCE_LIMIT: usize = 4096;

#[inline]
fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn chord(a: &Point, b: &Point) -> f64 {
    (2.0 - 2.0 * dot(a, b)).max(0.0).sqrt()
}

/// Chord distance `√(2 − 2[sinθ sinθ' cos(φ−φ') + cosθ cosθ'])` between two
/// directions, in `[0, 2]`.
pub fn sphere_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    chord(&direction(a.0, a.1), &direction(b.0, b.1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnStrategy {
    /// Brute force up to [`BRUTE_FORCE_LIMIT`] anchors, binning above.
    Auto,
    BruteForce,
    Binned,
}

#[derive(Clone, Debug)]
struct Bins {
    cells_per_axis: usize,
    cell: f64,
    cells: HashMap<usize, Vec<u32>>,
}

impl Bins {
    fn build(dirs: &[Point]) -> Self {
        let g = ((dirs.len() as f64 / 16.0).sqrt().ceil() as usize).clamp(4, 256);
        let mut cells: HashMap<usize, Vec<u32>> = HashMap::new();
        for (i, d) in dirs.iter().enumerate() {
            let c = Self::coords(g, d);
            cells.entry((c[0] * g + c[1]) * g + c[2]).or_default().push(i as u32);
        }
        Self {
            cells_per_axis: g,
            cell: 2.0 / g as f64,
            cells,
        }
    }

    fn coords(g: usize, d: &Point) -> [usize; 3] {
        let f = |x: f64| (((x + 1.0) * 0.5 * g as f64).floor().max(0.0) as usize).min(g - 1);
        [f(d[0]), f(d[1]), f(d[2])]
    }
}

/// Keeps the `k` smallest `(distance, index)` pairs, ascending.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    #[inline]
    fn offer(&mut self, d: f64, i: usize) {
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (d, i) >= last {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&it| it < (d, i));
        self.items.insert(pos, (d, i));
    }

    fn worst(&self) -> Option<f64> {
        if self.items.len() == self.k {
            self.items.last().map(|it| it.0)
        } else {
            None
        }
    }
}

/// KNN-interpolated radius function on the unit sphere.
///
/// Anchors are stored in a canonical order (lexicographic in `(θ, φ, r)`),
/// so neighbor ties resolve identically for any permutation of the input.
#[derive(Clone, Debug)]
pub struct RepresentativeFunction {
    anchor_angles: Vec<(f64, f64)>,
    anchor_radii: Vec<f64>,
    anchor_dirs: Vec<Point>,
    /// Canonical position -> caller's index.
    source_index: Vec<usize>,
    k: usize,
    sigma: f64,
    strategy: KnnStrategy,
    bins: Option<Bins>,
}

impl RepresentativeFunction {
    pub fn from_cloud(cloud: &PointCloud, k: usize, sigma: f64) -> Result<Self> {
        let (angles, radii) = cloud
            .points()
            .iter()
            .map(|p| {
                let s = to_spherical(*p);
                ((s.theta, s.phi), s.r)
            })
            .unzip();
        Self::from_anchors(angles, radii, k, sigma)
    }

    pub fn from_anchors(angles: Vec<(f64, f64)>, radii: Vec<f64>, k: usize, sigma: f64) -> Result<Self> {
        Self::with_strategy(angles, radii, k, sigma, KnnStrategy::Auto)
    }

    pub fn with_strategy(
        angles: Vec<(f64, f64)>,
        radii: Vec<f64>,
        k: usize,
        sigma: f64,
        strategy: KnnStrategy,
    ) -> Result<Self> {
        let n = angles.len();
        if n == 0 {
            return Err(Error::Empty("representative function anchors"));
        }
        if radii.len() != n {
            return Err(Error::ShapeMismatch {
                op: "RepresentativeFunction",
                left: vec![n],
                right: vec![radii.len()],
            });
        }
        if k == 0 || k > n {
            return Err(Error::InvalidParam(format!("k={k} must lie in 1..={n}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_knn must be positive, got {sigma}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            angles[a].0.total_cmp(&angles[b].0)
                .then(angles[a].1.total_cmp(&angles[b].1))
                .then(radii[a].total_cmp(&radii[b]))
                .then(a.cmp(&b))
        });
        let anchor_angles: Vec<(f64, f64)> = order.iter().map(|&i| angles[i]).collect();
        let anchor_radii = order.iter().map(|&i| radii[i]).collect();
        let anchor_dirs: Vec<Point> = anchor_angles.iter().map(|&(t, p)| direction(t, p)).collect();
        let use_bins = match strategy {
            KnnStrategy::Auto => n > BRUTE_FORCE_LIMIT,
            KnnStrategy::BruteForce => false,
            KnnStrategy::Binned => true,
        };
        let bins = use_bins.then(|| Bins::build(&anchor_dirs));
        Ok(Self {
            anchor_angles,
            anchor_radii,
            anchor_dirs,
            source_index: order,
            k,
            sigma,
            strategy,
            bins,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn strategy(&self) -> KnnStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.anchor_radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_radii.is_empty()
    }

    pub fn anchor_angles(&self) -> &[(f64, f64)] {
        &self.anchor_angles
    }

    pub fn anchor_radii(&self) -> &[f64] {
        &self.anchor_radii
    }

    /// The `k` nearest anchors as `(canonical index, chord distance)`,
    /// nearest first, ties broken by canonical index.
    pub fn nearest(&self, theta: f64, phi: f64) -> Vec<(usize, f64)> {
        let q = direction(theta, phi);
        let mut top = TopK::new(self.k);
        match &self.bins {
            None => {
                for (i, a) in self.anchor_dirs.iter().enumerate() {
                    top.offer(chord(&q, a), i);
                }
            }
            Some(bins) => self.search_bins(bins, &q, &mut top),
        }
        top.items.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn search_bins(&self, bins: &Bins, q: &Point, top: &mut TopK) {
        let g = bins.cells_per_axis as i64;
        let c = Bins::coords(bins.cells_per_axis, q).map(|x| x as i64);
        for s in 0..=g {
            for dx in -s..=s {
                for dy in -s..=s {
                    for dz in -s..=s {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != s {
                            continue;
                        }
                        let (x, y, z) = (c[0] + dx, c[1] + dy, c[2] + dz);
                        if x < 0 || y < 0 || z < 0 || x >= g || y >= g || z >= g {
                            continue;
                        }
                        let id = ((x * g + y) * g + z) as usize;
                        if let Some(members) = bins.cells.get(&id) {
                            for &i in members {
                                let i = i as usize;
                                top.offer(chord(q, &self.anchor_dirs[i]), i);
                            }
                        }
                    }
                }
            }
            // anything outside shell s is at least s·cell away; the margin
            // covers round-off in the chord formula
            if let Some(worst) = top.worst() {
                if worst < s as f64 * bins.cell - 1e-7 {
                    return;
                }
            }
        }
    }

    /// Normalized interpolation weights at `(θ, φ)` as `(caller index, w)`.
    /// An exactly coincident anchor gets weight 1.
    pub fn weights(&self, theta: f64, phi: f64) -> Vec<(usize, f64)> {
        let nn = self.nearest(theta, phi);
        if nn[0].1 < COINCIDENCE_EPS {
            return vec![(self.source_index[nn[0].0], 1.0)];
        }
        // shifting by the nearest distance leaves normalized weights
        // unchanged and keeps the largest one at exactly 1
        let d0 = nn[0].1 * nn[0].1;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let raw: Vec<f64> = nn.iter().map(|&(_, d)| (-(d * d - d0) * inv).exp()).collect();
        let total: f64 = raw.iter().sum();
        nn.iter()
            .zip(raw)
            .map(|(&(i, _), w)| (self.source_index[i], w / total))
            .collect()
    }

    /// `f_X(θ, φ)`.
    pub fn eval(&self, theta: f64, phi: f64) -> f64 {
        let nn = self.nearest(theta, phi);
        if nn[0].1 < COINCIDENCE_EPS {
            return self.anchor_radii[nn[0].0];
        }
        let d0 = nn[0].1 * nn[0].1;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let (mut num, mut den) = (0.0, 0.0);
        for &(i, d) in &nn {
            let w = (-(d * d - d0) * inv).exp();
            num += w * self.anchor_radii[i];
            den += w;
        }
        num / den
    }

    /// `f_X` at every node of `grid`.
    pub fn sample_grid(&self, grid: &QuadratureGrid) -> Vec<f64> {
        grid.sample(|t, p| self.eval(t, p))
    }

    /// Sparse-as-dense `nodes × anchors` matrix `W` with
    /// `f_X(node) = Σ_i W[node, i] r_i`, columns in caller order.
    pub fn weight_matrix(&self, grid: &QuadratureGrid) -> Array2<f64> {
        let mut w = Array2::zeros((grid.len(), self.len()));
        for (row, (t, p)) in grid.nodes().into_iter().enumerate() {
            for (i, wi) in self.weights(t, p) {
                w[[row, i]] += wi;
            }
        }
        w
    }
}

/// `f_X(q)` for a prepared representative function.
pub fn eval_representative(rep: &RepresentativeFunction, q: (f64, f64)) -> f64 {
    rep.eval(q.0, q.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_shape, Shape};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use std::f64::consts::PI;

    #[test]
    fn distance_examples() {
        assert_eq!(sphere_distance((0.4, 1.0), (0.4, 1.0)), 0.0);
        assert!((sphere_distance((0.0, 0.3), (PI, 2.0)) - 2.0).abs() < 1e-15);
        assert!((sphere_distance((PI / 2.0, 0.0), (PI / 2.0, PI / 2.0)) - 2f64.sqrt()).abs() < 1e-15);
        let (a, b) = ((0.3, 0.2), (1.7, 4.0));
        assert_eq!(sphere_distance(a, b), sphere_distance(b, a));
    }

    #[test]
    fn eval_examples() {
        let cloud = synth_shape(&Shape::bumpy(0.2), 200, 1).unwrap();
        let rep = RepresentativeFunction::from_cloud(&cloud, 5, 0.05).unwrap();
        let p = cloud.points()[17];
        let s = to_spherical(p);
        assert_eq!(eval_representative(&rep, (s.theta, s.phi)), s.r);

        let sphere = synth_shape(&Shape::Sphere { radius: 2.5 }, 300, 2).unwrap();
        let rep = RepresentativeFunction::from_cloud(&sphere, 5, 0.05).unwrap();
        for (t, p) in [(0.1, 0.1), (1.0, 2.0), (3.0, 5.5)] {
            assert!((rep.eval(t, p) - 2.5).abs() < 1e-12);
        }

        // two anchors equidistant from the north pole
        let rep = RepresentativeFunction::from_anchors(
            vec![(0.5, 0.0), (0.5, PI)],
            vec![1.0, 3.0],
            2,
            0.05,
        )
        .unwrap();
        assert!((rep.eval(0.0, 0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(RepresentativeFunction::from_anchors(vec![(0.0, 0.0)], vec![1.0], 2, 0.1).is_err());
        assert!(RepresentativeFunction::from_anchors(vec![(0.0, 0.0)], vec![1.0], 0, 0.1).is_err());
        assert!(RepresentativeFunction::from_anchors(vec![(0.0, 0.0)], vec![1.0], 1, 0.0).is_err());
        assert!(RepresentativeFunction::from_anchors(vec![], vec![], 1, 0.1).is_err());
    }

    #[test]
    fn shrinking_sigma_approaches_nearest_radius() {
        let cloud = synth_shape(&Shape::bumpy(0.3), 100, 4).unwrap();
        let (t, p) = (1.234, 2.345);
        let rep = RepresentativeFunction::from_cloud(&cloud, 5, 1e-4).unwrap();
        let nn = rep.nearest(t, p);
        assert!((rep.eval(t, p) - rep.anchor_radii()[nn[0].0]).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for sigma in [0.5, 0.1, 0.02, 0.005] {
            let rep = RepresentativeFunction::from_cloud(&cloud, 5, sigma).unwrap();
            let gap = (rep.eval(t, p) - rep.anchor_radii()[nn[0].0]).abs();
            assert!(gap <= last + 1e-15);
            last = gap;
        }
    }

    #[test]
    fn weight_matrix_reproduces_eval() {
        let cloud = synth_shape(&Shape::bumpy(0.3), 150, 8).unwrap();
        let rep = RepresentativeFunction::from_cloud(&cloud, 5, 0.1).unwrap();
        let grid = QuadratureGrid::new(6);
        let w = rep.weight_matrix(&grid);
        let r = ndarray::Array1::from(cloud.radii());
        let via = w.dot(&r);
        for (a, b) in via.iter().zip(rep.sample_grid(&grid)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn binned_search_matches_brute_force() {
        let mut rng = rng_from_seed(12);
        let cloud = synth_shape(&Shape::bumpy(0.3), 6000, 3).unwrap();
        let mut pts = cloud.into_points();
        // exact duplicates create distance ties
        for i in 0..200 {
            pts.push(pts[i * 7]);
        }
        let cloud = PointCloud::new(pts).unwrap();
        let (angles, radii): (Vec<_>, Vec<_>) = cloud
            .points()
            .iter()
            .map(|p| {
                let s = to_spherical(*p);
                ((s.theta, s.phi), s.r)
            })
            .unzip();
        let brute = RepresentativeFunction::with_strategy(angles.clone(), radii.clone(), 5, 0.05, KnnStrategy::BruteForce).unwrap();
        let binned = RepresentativeFunction::with_strategy(angles.clone(), radii, 5, 0.05, KnnStrategy::Binned).unwrap();
        let auto = RepresentativeFunction::from_cloud(&cloud, 5, 0.05).unwrap();
        assert!(auto.bins.is_some());
        for j in 0..500 {
            let (t, p) = if j % 5 == 0 {
                angles[j]
            } else {
                (rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI))
            };
            assert_eq!(brute.nearest(t, p), binned.nearest(t, p));
            assert_eq!(brute.eval(t, p), binned.eval(t, p));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_within_neighbor_radius_range(seed in any::<u64>(), t in 0.0f64..PI, p in 0.0f64..(2.0 * PI), sigma in 0.01f64..1.0) {
            let cloud = synth_shape(&Shape::bumpy(0.3), 64, seed).unwrap();
            let rep = RepresentativeFunction::from_cloud(&cloud, 5, sigma).unwrap();
            let nn = rep.nearest(t, p);
            let lo = nn.iter().map(|&(i, _)| rep.anchor_radii()[i]).fold(f64::MAX, f64::min);
            let hi = nn.iter().map(|&(i, _)| rep.anchor_radii()[i]).fold(f64::MIN, f64::max);
            let v = rep.eval(t, p);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn permutation_invariant(seed in any::<u64>(), t in 0.0f64..PI, p in 0.0f64..(2.0 * PI)) {
            let cloud = synth_shape(&Shape::bumpy(0.3), 64, seed).unwrap();
            let mut pts = cloud.points().to_vec();
            pts.shuffle(&mut rng_from_seed(seed ^ 1));
            let shuffled = PointCloud::new(pts).unwrap();
            let a = RepresentativeFunction::from_cloud(&cloud, 5, 0.1).unwrap();
            let b = RepresentativeFunction::from_cloud(&shuffled, 5, 0.1).unwrap();
            prop_assert_eq!(a.eval(t, p), b.eval(t, p));
        }
    }
}
