//! Point clouds, spherical coordinates and synthetic star-shaped data.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harmonics::sh_basis;
use crate::rng::rng_from_seed;

pub type Point = [f64; 3];

/// An ordered list of 3D points with set semantics.
///
/// Always non-empty with finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} of cloud")));
        }
        Ok(Self { points })
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

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Points as an `n x 3` matrix.
    pub fn to_array(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.len(), 3), |(i, j)| self.points[i][j])
    }

    pub fn from_array(a: &ndarray::Array2<f64>) -> Result<Self> {
        if a.ncols() != 3 {
            return Err(Error::ShapeMismatch {
                op: "PointCloud::from_array",
                left: vec![a.nrows(), a.ncols()],
                right: vec![a.nrows(), 3],
            });
        }
        Self::new(a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    /// Copy with points sorted lexicographically. Two clouds that are
    /// permutations of each other canonicalize to identical sequences.
    pub fn canonical(&self) -> PointCloud {
        let mut points = self.points.clone();
        points.sort_by(|a, b| {
            a[0].total_cmp(&b[0])
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
        });
        PointCloud { points }
    }

    pub fn radii(&self) -> Vec<f64> {
        self.points.iter().map(|p| norm(p)).collect()
    }

    /// Reads the whitespace-separated text format: three floats per line,
    /// blank lines and `#` comments ignored.
    pub fn read_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "line {}: expected 3 values, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let mut p = [0.0; 3];
            for (slot, field) in p.iter_mut().zip(&fields) {
                *slot = field.parse().map_err(|_| {
                    Error::Format(format!("line {}: bad number `{field}`", lineno + 1))
                })?;
            }
            points.push(p);
        }
        Self::new(points)
    }

    /// Writes with round-trip (shortest exact) float formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * 60);
        for p in &self.points {
            let _ = writeln!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        }
        out
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// `(r, θ, φ)` with colatitude θ ∈ [0, π] and longitude φ ∈ [0, 2π).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalPoint {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

/// Cartesian to spherical. The origin maps to `(0, 0, 0)`.
pub fn to_spherical(p: Point) -> SphericalPoint {
    let r = norm(&p);
    if r == 0.0 {
        return SphericalPoint {
            r: 0.0,
            theta: 0.0,
            phi: 0.0,
        };
    }
    let theta = (p[2] / r).clamp(-1.0, 1.0).acos();
    let mut phi = p[1].atan2(p[0]);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    // atan2 of a tiny negative y can round up to exactly 2π
    if phi >= 2.0 * PI {
        phi = 0.0;
    }
    SphericalPoint { r, theta, phi }
}

pub fn from_spherical(s: SphericalPoint) -> Point {
    let (st, ct) = s.theta.sin_cos();
    let (sp, cp) = s.phi.sin_cos();
    [s.r * st * cp, s.r * st * sp, s.r * ct]
}

/// Unit direction for angles `(θ, φ)`.
pub fn direction(theta: f64, phi: f64) -> Point {
    from_spherical(SphericalPoint { r: 1.0, theta, phi })
}

/// Centers the cloud on its centroid and scales the largest radius to 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in cloud.points() {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for ck in &mut c {
        *ck /= n;
    }
    let centered: Vec<Point> = cloud
        .points()
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max_r = centered.iter().map(norm).fold(0.0, f64::max);
    if max_r <= 1e-12 * (1.0 + norm(&c)) {
        return Err(Error::ZeroExtent);
    }
    PointCloud::new(
        centered
            .into_iter()
            .map(|p| [p[0] / max_r, p[1] / max_r, p[2] / max_r])
            .collect(),
    )
}

/// One real harmonic term `weight · Y_{l,m}` of a bumpy-sphere perturbation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HarmonicTerm {
    pub l: usize,
    pub m: i64,
    pub weight: f64,
}

/// Synthetic star-shaped surfaces.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// `r(θ,φ) = 1 + amplitude · Σ_j w_j Y_{l_j,m_j}(θ,φ)`.
    BumpySphere {
        amplitude: f64,
        terms: Vec<HarmonicTerm>,
    },
    Ellipsoid { radii: [f64; 3] },
    /// `Σ_i |x_i / a_i|^p = 1`.
    Superquadric { radii: [f64; 3], exponent: f64 },
}

impl Shape {
    /// Bumpy sphere with the documented default perturbation
    /// `Y_{2,0} + 0.6·Y_{3,2} + 0.4·Y_{4,-3}`.
    pub fn bumpy(amplitude: f64) -> Shape {
        Shape::BumpySphere {
            amplitude,
            terms: vec![
                HarmonicTerm { l: 2, m: 0, weight: 1.0 },
                HarmonicTerm { l: 3, m: 2, weight: 0.6 },
                HarmonicTerm { l: 4, m: -3, weight: 0.4 },
            ],
        }
    }

    /// Upper bound on `|Σ_j w_j Y_j|`, from `|Y_{l,m}| ≤ √((2l+1)/4π)`.
    pub fn perturbation_bound(terms: &[HarmonicTerm]) -> f64 {
        terms
            .iter()
            .map(|t| t.weight.abs() * ((2 * t.l + 1) as f64 / (4.0 * PI)).sqrt())
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        match self {
            Shape::Sphere { radius } if !(*radius > 0.0 && radius.is_finite()) => {
                bad(format!("sphere radius must be positive, got {radius}"))
            }
            Shape::BumpySphere { amplitude, terms } => {
                if !(*amplitude >= 0.0) {
                    return bad(format!("amplitude must be non-negative, got {amplitude}"));
                }
                if let Some(t) = terms.iter().find(|t| t.m.unsigned_abs() as usize > t.l) {
                    return bad(format!("|m| > l in term ({}, {})", t.l, t.m));
                }
                if amplitude * Self::perturbation_bound(terms) >= 1.0 {
                    return bad("perturbation could make the radius non-positive".into());
                }
                Ok(())
            }
            Shape::Ellipsoid { radii } | Shape::Superquadric { radii, .. }
                if radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) =>
            {
                bad(format!("radii must be positive, got {radii:?}"))
            }
            Shape::Superquadric { exponent, .. } if !(*exponent > 0.0) => {
                bad(format!("exponent must be positive, got {exponent}"))
            }
            _ => Ok(()),
        }
    }

    /// Surface radius along unit direction `u`.
    pub fn radius_along(&self, u: Point) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::BumpySphere { amplitude, terms } => {
                let s = to_spherical(u);
                let h: f64 = terms
                    .iter()
                    .map(|t| t.weight * sh_basis(t.l, t.m, s.theta, s.phi))
                    .sum();
                1.0 + amplitude * h
            }
            Shape::Ellipsoid { radii } => {
                let q: f64 = (0..3).map(|i| (u[i] / radii[i]).powi(2)).sum();
                1.0 / q.sqrt()
            }
            Shape::Superquadric { radii, exponent } => {
                let q: f64 = (0..3).map(|i| (u[i] / radii[i]).abs().powf(*exponent)).sum();
                q.powf(-1.0 / exponent)
            }
        }
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Point {
    loop {
        let g: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let r = norm(&g);
        if r > 1e-12 {
            return [g[0] / r, g[1] / r, g[2] / r];
        }
    }
}

/// Samples `n` surface points: directions uniform on the sphere, radius from
/// the shape's radial function. Deterministic given `seed`.
pub fn synth_shape(shape: &Shape, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidParam("point count must be at least 1".into()));
    }
    shape.validate()?;
    let mut rng = rng_from_seed(seed);
    let points = (0..n)
        .map(|_| {
            let u = random_direction(&mut rng);
            let r = shape.radius_along(u);
            [r * u[0], r * u[1], r * u[2]]
        })
        .collect();
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn spherical_examples() {
        let s = to_spherical([0.0, 0.0, 1.0]);
        assert_eq!((s.r, s.theta, s.phi), (1.0, 0.0, 0.0));
        let s = to_spherical([1.0, 0.0, 0.0]);
        assert_eq!(s.r, 1.0);
        assert!((s.theta - PI / 2.0).abs() < 1e-15);
        assert_eq!(s.phi, 0.0);
        let s = to_spherical([0.0, -2.0, 0.0]);
        assert_eq!(s.r, 2.0);
        assert!((s.theta - PI / 2.0).abs() < 1e-15);
        assert!((s.phi - 1.5 * PI).abs() < 1e-15);
        let s = to_spherical([0.0, 0.0, 0.0]);
        assert_eq!((s.r, s.theta, s.phi), (0.0, 0.0, 0.0));
    }

    #[test]
    fn from_spherical_examples() {
        let sp = |r, theta, phi| SphericalPoint { r, theta, phi };
        assert!(close(from_spherical(sp(1.0, 0.0, 0.0)), [0.0, 0.0, 1.0], 1e-15));
        assert!(close(
            from_spherical(sp(1.0, PI / 2.0, PI / 2.0)),
            [0.0, 1.0, 0.0],
            1e-15
        ));
        assert!(close(
            from_spherical(sp(2.0, PI / 4.0, PI / 4.0)),
            [1.0, 1.0, 2f64.sqrt()],
            1e-14
        ));
    }

    proptest! {
        #[test]
        fn spherical_round_trip(r in 1e-3f64..1e3, theta in 0.0f64..PI, phi in 0.0f64..(2.0 * PI)) {
            let p = from_spherical(SphericalPoint { r, theta, phi });
            let back = to_spherical(p);
            let again = from_spherical(back);
            prop_assert!((back.r - r).abs() <= 1e-12 * r);
            for k in 0..3 {
                prop_assert!((again[k] - p[k]).abs() <= 1e-12 * r);
            }
        }

        #[test]
        fn cartesian_round_trip(x in -10.0f64..10.0, y in -10.0f64..10.0, z in -10.0f64..10.0) {
            prop_assume!(x * x + y * y + z * z > 1e-6);
            let p = [x, y, z];
            let q = from_spherical(to_spherical(p));
            let r = norm(&p);
            prop_assert!(close(p, q, 1e-12 * r));
            let s = to_spherical(p);
            prop_assert!((0.0..=PI).contains(&s.theta));
            prop_assert!((0.0..2.0 * PI).contains(&s.phi));
        }
    }

    #[test]
    fn normalize_examples() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let n = normalize_cloud(&c).unwrap();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);

        let c = PointCloud::new(vec![[0.5, 0.5, 0.5]; 4]).unwrap();
        assert!(matches!(normalize_cloud(&c), Err(Error::ZeroExtent)));

        // antipodal-symmetric unit-sphere samples are a fixed point
        let base = synth_shape(&Shape::Sphere { radius: 1.0 }, 50, 3).unwrap();
        let mut pts = base.points().to_vec();
        pts.extend(base.points().iter().map(|p| [-p[0], -p[1], -p[2]]));
        let c = PointCloud::new(pts).unwrap();
        let n = normalize_cloud(&c).unwrap();
        for (a, b) in c.points().iter().zip(n.points()) {
            assert!(close(*a, *b, 1e-14));
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = synth_shape(&Shape::Ellipsoid { radii: [2.0, 1.0, 0.5] }, 200, 11).unwrap();
        let c = PointCloud::new(c.points().iter().map(|p| [p[0] + 3.0, p[1], p[2] - 1.0]).collect())
            .unwrap();
        let once = normalize_cloud(&c).unwrap();
        let twice = normalize_cloud(&once).unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            assert!(close(*a, *b, 1e-12));
        }
        let max_r = once.radii().into_iter().fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn synth_sphere_is_deterministic_and_exact() {
        let shape = Shape::Sphere { radius: 1.0 };
        let a = synth_shape(&shape, 100, 7).unwrap();
        let b = synth_shape(&shape, 100, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        let big = synth_shape(&shape, 10_000, 7).unwrap();
        assert!(big.radii().iter().all(|r| (r - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn bumpy_radii_respect_perturbation_bound() {
        let shape = Shape::bumpy(0.3);
        let Shape::BumpySphere { terms, .. } = &shape else { unreachable!() };
        let bound = 0.3 * Shape::perturbation_bound(terms);
        let c = synth_shape(&shape, 10_000, 5).unwrap();
        assert_eq!(c.len(), 10_000);
        let radii = c.radii();
        assert!(radii.iter().all(|r| *r >= 1.0 - bound && *r <= 1.0 + bound));
        // the perturbation is genuinely present
        let spread = radii.iter().cloned().fold(f64::MIN, f64::max)
            - radii.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.1);
    }

    #[test]
    fn synth_rejects_bad_params() {
        assert!(synth_shape(&Shape::Sphere { radius: -1.0 }, 10, 0).is_err());
        assert!(synth_shape(&Shape::Ellipsoid { radii: [1.0, -1.0, 1.0] }, 10, 0).is_err());
        assert!(synth_shape(&Shape::bumpy(5.0), 10, 0).is_err());
        assert!(synth_shape(&Shape::Sphere { radius: 1.0 }, 0, 0).is_err());
    }

    #[test]
    fn superquadric_points_lie_on_surface() {
        let shape = Shape::Superquadric { radii: [1.0, 0.8, 0.6], exponent: 4.0 };
        let c = synth_shape(&shape, 500, 1).unwrap();
        for p in c.points() {
            let q: f64 = [1.0, 0.8, 0.6]
                .iter()
                .zip(p)
                .map(|(a, x)| (x / a).abs().powf(4.0))
                .sum();
            assert!((q - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn text_format_round_trip() {
        let c = synth_shape(&Shape::bumpy(0.2), 20, 9).unwrap();
        let text = format!("# comment\n\n{}", c.to_text());
        assert_eq!(PointCloud::parse_text(&text).unwrap(), c);
        assert!(PointCloud::parse_text("1 2\n").is_err());
        assert!(PointCloud::parse_text("# nothing\n").is_err());
        assert!(PointCloud::parse_text("1 2 x\n").is_err());
    }
}
