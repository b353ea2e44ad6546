//! Real spherical harmonics and a quadrature-based analysis/synthesis pair.
//!
//! Basis convention: orthonormal real harmonics built from the
//! Condon–Shortley-phased associated Legendre functions,
//!
//! ```text
//! Y_{l,m}  = √2 N_{l,m} P_{l,m}(cos θ) cos(mφ)     m > 0
//! Y_{l,0}  =    N_{l,0} P_{l,0}(cos θ)
//! Y_{l,-m} = √2 N_{l,m} P_{l,m}(cos θ) sin(mφ)     m > 0
//! ```
//!
//! with `N_{l,m} = √((2l+1)/(4π) · (l-m)!/(l+m)!)`. Coefficients are stored
//! flat at index `l² + l + m`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Unnormalized associated Legendre function `P_{l,m}(x)` with the
/// Condon–Shortley phase, so `P_{1,1}(x) = -√(1-x²)`.
///
/// Magnitudes grow like `(2m-1)!!`; use [`legendre_normalized`] for high
/// orders.
pub fn legendre_assoc(l: usize, m: usize, x: f64) -> Result<f64> {
    if m > l {
        return Err(Error::InvalidParam(format!("legendre order m={m} exceeds degree l={l}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::InvalidParam(format!("legendre argument {x} outside [-1, 1]")));
    }
    let s = ((1.0 - x) * (1.0 + x)).sqrt();
    let mut pmm = 1.0;
    for k in 1..=m {
        pmm *= -((2 * k - 1) as f64) * s;
    }
    if l == m {
        return Ok(pmm);
    }
    let mut prev = pmm;
    let mut cur = x * (2 * m + 1) as f64 * pmm;
    for ll in (m + 2)..=l {
        let next = (x * (2 * ll - 1) as f64 * cur - (ll + m - 1) as f64 * prev) / (ll - m) as f64;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Index of `(l, m ≥ 0)` in a triangular Legendre table.
#[inline]
pub fn tri_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// All `N_{l,m} P_{l,m}(x)` for `0 ≤ m ≤ l ≤ lmax`, triangular layout.
///
/// Uses the normalized recurrences directly so nothing overflows at high
/// degree.
pub fn legendre_normalized(lmax: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; tri_index(lmax, lmax) + 1];
    let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = (1.0 / (4.0 * PI)).sqrt();
    for m in 0..=lmax {
        if m > 0 {
            pmm *= -(((2 * m + 1) as f64) / ((2 * m) as f64)).sqrt() * s;
        }
        out[tri_index(m, m)] = pmm;
        if m == lmax {
            break;
        }
        let mut prev = pmm;
        let mut cur = ((2 * m + 3) as f64).sqrt() * x * pmm;
        out[tri_index(m + 1, m)] = cur;
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            let next = a * (x * cur - b * prev);
            prev = cur;
            cur = next;
            out[tri_index(l, m)] = cur;
        }
    }
    out
}

/// Number of real coefficients up to degree `lmax`.
#[inline]
pub fn num_coeffs(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 1)
}

/// Flat index of `(l, m)`, `|m| ≤ l`.
#[inline]
pub fn coeff_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// Inverse of [`coeff_index`].
#[inline]
pub fn coeff_degree_order(idx: usize) -> (usize, i64) {
    let l = (idx as f64).sqrt() as usize;
    let l = if (l + 1) * (l + 1) <= idx { l + 1 } else { l };
    (l, idx as i64 - (l * l + l) as i64)
}

/// Real orthonormal basis `Y_{l,m}(θ, φ)`.
///
/// # Panics
/// If `|m| > l`.
pub fn sh_basis(l: usize, m: i64, theta: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs() as usize;
    assert!(am <= l, "sh_basis: |m|={am} exceeds l={l}");
    let table = legendre_normalized(l, theta.cos());
    let p = table[tri_index(l, am)];
    match m {
        0 => p,
        m if m > 0 => std::f64::consts::SQRT_2 * p * (m as f64 * phi).cos(),
        _ => std::f64::consts::SQRT_2 * p * (am as f64 * phi).sin(),
    }
}

/// Evaluates every `Y_{l,m}` up to `lmax` at one direction, flat layout.
pub fn sh_basis_all(lmax: usize, theta: f64, phi: f64) -> Vec<f64> {
    let table = legendre_normalized(lmax, theta.cos());
    let mut out = vec![0.0; num_coeffs(lmax)];
    for l in 0..=lmax {
        out[coeff_index(l, 0)] = table[tri_index(l, 0)];
        for m in 1..=l {
            let p = std::f64::consts::SQRT_2 * table[tri_index(l, m)];
            let (s, c) = (m as f64 * phi).sin_cos();
            out[coeff_index(l, m as i64)] = p * c;
            out[coeff_index(l, -(m as i64))] = p * s;
        }
    }
    out
}

/// Harmonic basis truncated at `lmax`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HarmonicBasis {
    pub lmax: usize,
}

impl HarmonicBasis {
    pub fn new(lmax: usize) -> Self {
        Self { lmax }
    }

    pub fn len(&self) -> usize {
        num_coeffs(self.lmax)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, l: usize, m: i64, theta: f64, phi: f64) -> f64 {
        sh_basis(l, m, theta, phi)
    }

    pub fn eval_all(&self, theta: f64, phi: f64) -> Vec<f64> {
        sh_basis_all(self.lmax, theta, phi)
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], nodes in descending order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Legendre (in cos θ) × uniform-φ grid, `(L+1) × (2L+2)` nodes.
///
/// Integrates `Y_{l,m} Y_{l',m'}` exactly for `l, l' ≤ L`. Nodes are stored
/// ring-major: node `i * n_phi + j` sits at `(thetas[i], phis[j])`.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    pub lmax: usize,
    pub thetas: Vec<f64>,
    pub cos_thetas: Vec<f64>,
    pub phis: Vec<f64>,
    /// Weight per ring (GL weight times the φ spacing).
    pub ring_weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(lmax: usize) -> Self {
        let (xs, ws) = gauss_legendre(lmax + 1);
        let n_phi = 2 * lmax + 2;
        let dphi = 2.0 * PI / n_phi as f64;
        Self {
            lmax,
            thetas: xs.iter().map(|x| x.clamp(-1.0, 1.0).acos()).collect(),
            cos_thetas: xs,
            phis: (0..n_phi).map(|j| j as f64 * dphi).collect(),
            ring_weights: ws.iter().map(|w| w * dphi).collect(),
        }
    }

    pub fn n_theta(&self) -> usize {
        self.thetas.len()
    }

    pub fn n_phi(&self) -> usize {
        self.phis.len()
    }

    pub fn len(&self) -> usize {
        self.n_theta() * self.n_phi()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(θ, φ)` of every node, ring-major.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        self.thetas
            .iter()
            .flat_map(|&t| self.phis.iter().map(move |&p| (t, p)))
            .collect()
    }

    pub fn weight(&self, node: usize) -> f64 {
        self.ring_weights[node / self.n_phi()]
    }

    /// Samples `f(θ, φ)` at every node.
    pub fn sample(&self, mut f: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
        self.nodes().into_iter().map(|(t, p)| f(t, p)).collect()
    }

    /// Quadrature of node values over the sphere.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| self.weight(i) * v)
            .sum()
    }
}

/// Real coefficients `c_{l,m}`, `0 ≤ l ≤ lmax`, flat layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicSpectrum {
    lmax: usize,
    coeffs: Vec<f64>,
}

impl HarmonicSpectrum {
    pub fn zeros(lmax: usize) -> Self {
        Self {
            lmax,
            coeffs: vec![0.0; num_coeffs(lmax)],
        }
    }

    pub fn from_coeffs(lmax: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != num_coeffs(lmax) {
            return Err(Error::ShapeMismatch {
                op: "HarmonicSpectrum::from_coeffs",
                left: vec![coeffs.len()],
                right: vec![num_coeffs(lmax)],
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("spectrum coefficient".into()));
        }
        Ok(Self { lmax, coeffs })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn get(&self, l: usize, m: i64) -> f64 {
        self.coeffs[coeff_index(l, m)]
    }

    pub fn set(&mut self, l: usize, m: i64, v: f64) {
        self.coeffs[coeff_index(l, m)] = v;
    }

    /// `(l, m, c)` triples in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, i64, f64)> + '_ {
        self.coeffs.iter().enumerate().map(|(i, &c)| {
            let (l, m) = coeff_degree_order(i);
            (l, m, c)
        })
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// CSV with header `l,m,c`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("l,m,c\n");
        for (l, m, c) in self.iter() {
            let _ = writeln!(out, "{l},{m},{c:?}");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `c_{l,m} = Σ_nodes w · f · Y_{l,m}`.
pub fn analyze(samples: &[f64], grid: &QuadratureGrid) -> Result<HarmonicSpectrum> {
    if samples.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            op: "analyze",
            left: vec![samples.len()],
            right: vec![grid.len()],
        });
    }
    let lmax = grid.lmax;
    let n_phi = grid.n_phi();
    let mut coeffs = vec![0.0; num_coeffs(lmax)];
    // per-ring azimuthal Fourier sums, then the Legendre projection
    let trig: Vec<Vec<(f64, f64)>> = (0..=lmax)
        .map(|m| grid.phis.iter().map(|&p| (m as f64 * p).sin_cos()).collect())
        .collect();
    for (i, &x) in grid.cos_thetas.iter().enumerate() {
        let ring = &samples[i * n_phi..(i + 1) * n_phi];
        let w = grid.ring_weights[i];
        let table = legendre_normalized(lmax, x);
        for m in 0..=lmax {
            let (mut a, mut b) = (0.0, 0.0);
            for (f, &(s, c)) in ring.iter().zip(&trig[m]) {
                a += f * c;
                b += f * s;
            }
            for l in m..=lmax {
                let p = table[tri_index(l, m)] * w;
                if m == 0 {
                    coeffs[coeff_index(l, 0)] += p * a;
                } else {
                    let p = p * std::f64::consts::SQRT_2;
                    coeffs[coeff_index(l, m as i64)] += p * a;
                    coeffs[coeff_index(l, -(m as i64))] += p * b;
                }
            }
        }
    }
    HarmonicSpectrum::from_coeffs(lmax, coeffs)
}

/// `Σ c_{l,m} Y_{l,m}(θ, φ)`.
pub fn synthesize(spec: &HarmonicSpectrum, theta: f64, phi: f64) -> f64 {
    sh_basis_all(spec.lmax, theta, phi)
        .iter()
        .zip(spec.coeffs())
        .map(|(y, c)| y * c)
        .sum()
}

/// Synthesizes onto every grid node.
pub fn synthesize_grid(spec: &HarmonicSpectrum, grid: &QuadratureGrid) -> Vec<f64> {
    grid.sample(|t, p| synthesize(spec, t, p))
}

/// The analysis map as a dense `(L+1)² × nodes` matrix, so that
/// `spectrum = A · samples`. Used where the transform has to sit inside a
/// differentiable graph.
pub fn analysis_matrix(grid: &QuadratureGrid) -> Array2<f64> {
    let nodes = grid.nodes();
    let mut a = Array2::zeros((num_coeffs(grid.lmax), nodes.len()));
    for (j, &(t, p)) in nodes.iter().enumerate() {
        let w = grid.weight(j);
        for (i, y) in sh_basis_all(grid.lmax, t, p).into_iter().enumerate() {
            a[[i, j]] = w * y;
        }
    }
    a
}
