//! Frequency rectifiers, the rectified spectral distance between clouds and
//! the differentiable rectification loss.
//!
//! Differentiability boundary: when a reconstructed cloud enters the loss,
//! its KNN neighbor sets and angular interpolation weights are frozen for
//! the evaluation. Gradients flow only through the reconstructed radii.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Grads, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{to_spherical, PointCloud};
use crate::harmonics::{analysis_matrix, analyze, coeff_degree_order, num_coeffs, HarmonicSpectrum, QuadratureGrid};
use crate::rng::{normal_matrix, rng_from_seed};
use crate::sphere_repr::RepresentativeFunction;

/// `r_l = exp(−(L − l)² / (2σ²))` for `l = 0..=L`.
#[derive(Clone, Debug, PartialEq)]
pub struct RectifierProfile {
    lmax: usize,
    sigma: f64,
    weights: Vec<f64>,
}

pub fn make_rectifiers(lmax: usize, sigma: f64) -> Result<RectifierProfile> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!("sigma_fre must be positive, got {sigma}")));
    }
    let weights = (0..=lmax)
        .map(|l| {
            let d = (lmax - l) as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Ok(RectifierProfile { lmax, sigma, weights })
}

impl RectifierProfile {
    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Per-degree weights `r_0..=r_L`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight of every flat coefficient slot.
    pub fn coeff_weights(&self) -> Vec<f64> {
        (0..num_coeffs(self.lmax))
            .map(|i| self.weights[coeff_degree_order(i).0])
            .collect()
    }

    /// `r_l · c_{l,m}` for every coefficient.
    pub fn rectify(&self, spec: &HarmonicSpectrum) -> Result<HarmonicSpectrum> {
        self.check(spec)?;
        let coeffs = spec
            .coeffs()
            .iter()
            .zip(self.coeff_weights())
            .map(|(c, r)| c * r)
            .collect();
        HarmonicSpectrum::from_coeffs(self.lmax, coeffs)
    }

    fn check(&self, spec: &HarmonicSpectrum) -> Result<()> {
        if spec.lmax() != self.lmax {
            return Err(Error::InvalidParam(format!(
                "spectrum degree {} does not match rectifier degree {}",
                spec.lmax(),
                self.lmax
            )));
        }
        Ok(())
    }
}

/// `Σ_l Σ_m r_l (a_{l,m} − b_{l,m})²`.
pub fn freq_distance(a: &HarmonicSpectrum, b: &HarmonicSpectrum, rect: &RectifierProfile) -> Result<f64> {
    rect.check(a)?;
    rect.check(b)?;
    Ok(a.coeffs()
        .iter()
        .zip(b.coeffs())
        .zip(rect.coeff_weights())
        .map(|((x, y), r)| r * (x - y) * (x - y))
        .sum())
}

/// Settings of the rectification term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreqRectConfig {
    /// Truncation degree `L`.
    pub l_max: usize,
    pub sigma_fre: f64,
    /// Loss multiplier `η`.
    pub eta: f64,
    /// Neighbor count of the representative function.
    pub k: usize,
    pub sigma_knn: f64,
    /// Reconstructions averaged per loss evaluation.
    pub sample_count: usize,
    /// Points per reconstruction; `0` means the input cloud's size.
    pub recon_points: usize,
}

impl Default for FreqRectConfig {
    fn default() -> Self {
        Self {
            l_max: 16,
            sigma_fre: 16.0,
            eta: 1e3,
            k: 5,
            sigma_knn: 0.05,
            sample_count: 1,
            recon_points: 0,
        }
    }
}

impl FreqRectConfig {
    /// Hyperparameters at the original (GPU) scale.
    pub fn full_scale() -> Self {
        Self {
            l_max: 50,
            sigma_fre: 50.0,
            eta: 5e6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidParam(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.k == 0 || self.sample_count == 0 {
            return Err(Error::InvalidParam("k and sample_count must be at least 1".into()));
        }
        make_rectifiers(self.l_max, self.sigma_fre)?;
        if !(self.sigma_knn > 0.0) {
            return Err(Error::InvalidParam("sigma_knn must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen pieces of one loss evaluation: the interpolation weights of the
/// reconstructed cloud and the target spectrum.
#[derive(Clone, Debug)]
pub struct FreqLossPlan {
    /// `nodes × N'` interpolation weights.
    pub weights: Array2<f64>,
    /// `(L+1)² × 1` target coefficients.
    pub target: Array2<f64>,
}

/// Everything needed to turn clouds into spectra and compare them.
#[derive(Clone, Debug)]
pub struct FreqRectifier {
    pub cfg: FreqRectConfig,
    pub rect: RectifierProfile,
    pub grid: QuadratureGrid,
    analysis: Array2<f64>,
    coeff_weights: Array2<f64>,
}

impl FreqRectifier {
    pub fn new(cfg: &FreqRectConfig) -> Result<Self> {
        cfg.validate()?;
        let rect = make_rectifiers(cfg.l_max, cfg.sigma_fre)?;
        let grid = QuadratureGrid::new(cfg.l_max);
        let analysis = analysis_matrix(&grid);
        let coeff_weights = Array2::from_shape_vec((num_coeffs(cfg.l_max), 1), rect.coeff_weights())
            .expect("length matches");
        Ok(Self {
            cfg: cfg.clone(),
            rect,
            grid,
            analysis,
            coeff_weights,
        })
    }

    pub fn representative(&self, cloud: &PointCloud) -> Result<RepresentativeFunction> {
        RepresentativeFunction::from_cloud(cloud, self.cfg.k.min(cloud.len()), self.cfg.sigma_knn)
    }

    /// Spectrum of a cloud's representative function.
    pub fn spectrum(&self, cloud: &PointCloud) -> Result<HarmonicSpectrum> {
        let rep = self.representative(cloud)?;
        analyze(&rep.sample_grid(&self.grid), &self.grid)
    }

    /// Rectified distance between two clouds.
    pub fn distance(&self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        freq_distance(&self.spectrum(a)?, &self.spectrum(b)?, &self.rect)
    }

    /// Freezes neighbor weights of the reconstruction `recon` (`N' × 3`).
    pub fn plan(&self, target: &HarmonicSpectrum, recon: &Array2<f64>) -> Result<FreqLossPlan> {
        self.rect.check(target)?;
        let (angles, radii): (Vec<_>, Vec<_>) = recon
            .rows()
            .into_iter()
            .map(|r| {
                let s = to_spherical([r[0], r[1], r[2]]);
                ((s.theta, s.phi), s.r)
            })
            .unzip();
        if radii.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reconstructed point".into()));
        }
        let k = self.cfg.k.min(radii.len());
        let rep = RepresentativeFunction::from_anchors(angles, radii, k, self.cfg.sigma_knn)?;
        Ok(FreqLossPlan {
            weights: rep.weight_matrix(&self.grid),
            target: Array2::from_shape_vec((target.coeffs().len(), 1), target.coeffs().to_vec())
                .expect("length matches"),
        })
    }

    /// `d_Fre` of the reconstruction `points` (`N' × 3` node) against the
    /// plan's target, as a graph node.
    pub fn loss_node(&self, g: &mut Graph, plan: &FreqLossPlan, points: Var) -> Result<Var> {
        let sq = g.square(points);
        let r2 = g.sum_cols(sq);
        let radii = g.sqrt(r2);
        let w = g.constant(plan.weights.clone());
        let f = g.matmul(w, radii)?;
        let a = g.constant(self.analysis.clone());
        let c = g.matmul(a, f)?;
        let target = g.constant(plan.target.clone());
        let diff = g.sub(c, target)?;
        let d2 = g.square(diff);
        let rw = g.constant(self.coeff_weights.clone());
        let weighted = g.mul(d2, rw)?;
        Ok(g.sum(weighted))
    }

    /// Plain evaluation of the frozen plan at given reconstructed radii.
    pub fn loss_value(&self, plan: &FreqLossPlan, radii: &[f64]) -> f64 {
        let f = plan.weights.dot(&Array1::from(radii.to_vec()));
        let c = self.analysis.dot(&f);
        c.iter()
            .zip(plan.target.iter())
            .zip(self.coeff_weights.iter())
            .map(|((c, t), r)| r * (c - t) * (c - t))
            .sum()
    }
}

/// A decoder that maps base noise (`N' × 3`) and a latent row to points,
/// differentiably.
pub trait ReconstructionDecoder {
    fn params(&self) -> &ParamStore;
    fn decode_graph(&self, g: &mut Graph, p: &Bindings, base: &Array2<f64>, z: Var) -> Result<Var>;
}

/// Monte-Carlo estimate of `E_{X'}[d_Fre(X, X')]` with `cfg.sample_count`
/// reconstructions from seeded base noise, and its gradient with respect to
/// the decoder parameters.
pub fn freq_loss(
    x: &PointCloud,
    decoder: &dyn ReconstructionDecoder,
    z: &[f64],
    rectifier: &FreqRectifier,
    seed: u64,
) -> Result<(f64, Grads)> {
    let target = rectifier.spectrum(x)?;
    let n = match rectifier.cfg.recon_points {
        0 => x.len(),
        n => n,
    };
    let mut g = Graph::new();
    let bindings = decoder.params().bind(&mut g);
    let zv = g.constant(Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
    let mut rng = rng_from_seed(seed);
    let mut total: Option<Var> = None;
    for _ in 0..rectifier.cfg.sample_count {
        let base = normal_matrix(&mut rng, n, 3);
        let pts = decoder.decode_graph(&mut g, &bindings, &base, zv)?;
        let plan = rectifier.plan(&target, g.value(pts))?;
        let l = rectifier.loss_node(&mut g, &plan, pts)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("sample_count >= 1");
    let loss = g.scale(total, 1.0 / rectifier.cfg.sample_count as f64);
    let value = g.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("frequency loss".into()));
    }
    if g.requires_grad(loss) {
        g.backward(loss)?;
    }
    Ok((value, decoder.params().gradients(&g, &bindings)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_shape, Shape};
    use crate::rng::normal_vec;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn rectifier_examples() {
        for (l, s) in [(0, 1.0), (5, 0.3), (50, 50.0), (16, 16.0)] {
            assert_eq!(make_rectifiers(l, s).unwrap().weights()[l], 1.0);
        }
        let r = make_rectifiers(50, 50.0).unwrap();
        assert!((r.weights()[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((r.weights()[0] - 0.60653).abs() < 1e-5);
        let r = make_rectifiers(20, 1e9).unwrap();
        assert!(r.weights().iter().all(|w| (w - 1.0).abs() < 1e-9));
        assert!(make_rectifiers(3, 0.0).is_err());
        assert!(make_rectifiers(3, -1.0).is_err());
    }

    #[test]
    fn rectifiers_strictly_increase() {
        for (l, s) in [(50, 50.0), (16, 16.0), (8, 2.0)] {
            let r = make_rectifiers(l, s).unwrap();
            assert!(r.weights()[0] > 0.0);
            assert!(r.weights().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn distance_examples() {
        let r = make_rectifiers(50, 50.0).unwrap();
        let a = HarmonicSpectrum::zeros(50);
        assert_eq!(freq_distance(&a, &a, &r).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(50, 0, 0.7);
        assert!((freq_distance(&a, &b, &r).unwrap() - 0.49).abs() < 1e-15);
        let mut c = a.clone();
        c.set(0, 0, 0.7);
        assert!((freq_distance(&a, &c, &r).unwrap() - (-0.5f64).exp() * 0.49).abs() < 1e-15);
        assert!(freq_distance(&a, &HarmonicSpectrum::zeros(3), &r).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_bounded_symmetric_quadratic(seed in any::<u64>(), sigma in 0.5f64..40.0) {
            let r = make_rectifiers(8, sigma).unwrap();
            let mut rng = rng_from_seed(seed);
            let a = HarmonicSpectrum::from_coeffs(8, normal_vec(&mut rng, 81)).unwrap();
            let b = HarmonicSpectrum::from_coeffs(8, normal_vec(&mut rng, 81)).unwrap();
            let d = freq_distance(&a, &b, &r).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, freq_distance(&b, &a, &r).unwrap());
            let l2: f64 = a.coeffs().iter().zip(b.coeffs()).map(|(x, y)| (x - y).powi(2)).sum();
            prop_assert!(d <= l2 + 1e-12);
        }

        #[test]
        fn high_degree_discrepancy_weighs_more(lo in 0usize..8, delta in 0.01f64..10.0) {
            let r = make_rectifiers(8, 3.0).unwrap();
            let zero = HarmonicSpectrum::zeros(8);
            let mut low = zero.clone();
            low.set(lo, 0, delta);
            let mut high = zero.clone();
            high.set(8, 0, delta);
            prop_assert!(freq_distance(&zero, &high, &r).unwrap() > freq_distance(&zero, &low, &r).unwrap());
        }
    }

    /// `x' = base ⊙ scale + shift`, with `scale, shift` 1 × 3 plus a 1 × 4
    /// latent mixing row: 10 parameters.
    struct ToyDecoder {
        params: ParamStore,
    }

    impl ToyDecoder {
        fn new() -> Self {
            let mut params = ParamStore::new();
            params.insert("scale", ndarray::array![[0.9, 1.1, 1.0]]);
            params.insert("shift", ndarray::array![[0.05, -0.02, 0.01]]);
            params.insert("mix", ndarray::array![[0.1, -0.2, 0.05, 0.3]]);
            Self { params }
        }

        fn decode_plain(&self, base: &Array2<f64>, z: &[f64]) -> Array2<f64> {
            let scale = self.params.get("scale").unwrap();
            let shift = self.params.get("shift").unwrap();
            let mix = self.params.get("mix").unwrap();
            let zm: f64 = mix.iter().zip(z).map(|(m, z)| m * z).sum();
            let mut out = base * scale + shift;
            out.mapv_inplace(|v| v * (1.0 + zm));
            // unit-normalize direction of base so radii stay moderate
            out
        }
    }

    impl ReconstructionDecoder for ToyDecoder {
        fn params(&self) -> &ParamStore {
            &self.params
        }

        fn decode_graph(&self, g: &mut Graph, p: &Bindings, base: &Array2<f64>, z: Var) -> Result<Var> {
            let b = g.constant(base.clone());
            let x = g.mul(b, p.get("scale")?)?;
            let x = g.add(x, p.get("shift")?)?;
            let zm = g.mul(z, p.get("mix")?)?;
            let zm = g.sum(zm);
            let f = g.offset(zm, 1.0);
            g.mul(x, f)
        }
    }

    struct ExactDecoder {
        params: ParamStore,
        cloud: Array2<f64>,
    }

    impl ReconstructionDecoder for ExactDecoder {
        fn params(&self) -> &ParamStore {
            &self.params
        }

        fn decode_graph(&self, g: &mut Graph, p: &Bindings, _base: &Array2<f64>, _z: Var) -> Result<Var> {
            let c = g.constant(self.cloud.clone());
            let w = p.get("w")?;
            let zero = g.scale(w, 0.0);
            let zero = g.sum(zero);
            g.add(c, zero)
        }
    }

    fn small_cfg() -> FreqRectConfig {
        FreqRectConfig { l_max: 6, sigma_fre: 6.0, eta: 1.0, k: 5, sigma_knn: 0.2, sample_count: 1, recon_points: 0 }
    }

    #[test]
    fn exact_reconstruction_gives_zero_loss_and_gradient() {
        let x = synth_shape(&Shape::bumpy(0.3), 128, 2).unwrap();
        let mut params = ParamStore::new();
        params.insert("w", ndarray::array![[0.3, 0.4]]);
        let dec = ExactDecoder { params, cloud: x.to_array() };
        let rect = FreqRectifier::new(&small_cfg()).unwrap();
        let (loss, grads) = freq_loss(&x, &dec, &[0.0], &rect, 1).unwrap();
        assert!(loss.abs() < 1e-20);
        assert!(grads["w"].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_is_permutation_invariant_in_target() {
        let x = synth_shape(&Shape::bumpy(0.3), 128, 3).unwrap();
        let mut pts = x.points().to_vec();
        pts.shuffle(&mut rng_from_seed(4));
        let shuffled = PointCloud::new(pts).unwrap();
        let dec = ToyDecoder::new();
        let rect = FreqRectifier::new(&small_cfg()).unwrap();
        let z = [0.5, -0.3, 0.2, 0.1];
        let (a, _) = freq_loss(&x, &dec, &z, &rect, 9).unwrap();
        let (b, _) = freq_loss(&shuffled, &dec, &z, &rect, 9).unwrap();
        assert_eq!(a, b);
        let (c, _) = freq_loss(&x, &dec, &z, &rect, 9).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_neighbors() {
        let x = synth_shape(&Shape::bumpy(0.3), 96, 5).unwrap();
        let dec = ToyDecoder::new();
        let rect = FreqRectifier::new(&small_cfg()).unwrap();
        let z = [0.5, -0.3, 0.2, 0.1];
        let seed = 17;
        let (_, grads) = freq_loss(&x, &dec, &z, &rect, seed).unwrap();
        assert_eq!(dec.params.num_scalars(), 10);

        // oracle: same base draw, plan frozen at the unperturbed decode,
        // radii recomputed by plain arithmetic
        let base = normal_matrix(&mut rng_from_seed(seed), x.len(), 3);
        let target = rect.spectrum(&x).unwrap();
        let plan = rect.plan(&target, &dec.decode_plain(&base, &z)).unwrap();
        let loss_at = |d: &ToyDecoder| {
            let pts = d.decode_plain(&base, &z);
            let radii: Vec<f64> = pts.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            rect.loss_value(&plan, &radii)
        };
        let h = 1e-6;
        for name in ["scale", "shift", "mix"] {
            let cols = dec.params.get(name).unwrap().ncols();
            for j in 0..cols {
                let mut plus = ToyDecoder::new();
                plus.params.get_mut(name).unwrap()[[0, j]] += h;
                let mut minus = ToyDecoder::new();
                minus.params.get_mut(name).unwrap()[[0, j]] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let analytic = grads[name][[0, j]];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}[{j}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn cloud_spectrum_of_sphere_is_concentrated() {
        let x = synth_shape(&Shape::Sphere { radius: 1.0 }, 512, 1).unwrap();
        let rect = FreqRectifier::new(&small_cfg()).unwrap();
        let s = rect.spectrum(&x).unwrap();
        assert!(s.get(0, 0).powi(2) / s.energy() > 0.999);
        assert!(rect.distance(&x, &x).unwrap() == 0.0);
    }
}
