//! Set encoder, conditional CNF decoder and the (frequency-rectified)
//! evidence lower bound.
//!
//! Every tensor is row-major: a cloud is `N × 3`, a latent code is `1 × D`.
//! The decoder has two evaluation paths. The graph path records every
//! intermediate for back-propagation and is used in training; the plain path
//! works on bare arrays in fixed-size chunks and is used for generation and
//! evaluation. Both compute the same arithmetic.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{tanh, Bindings, Grads, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::freq_rect::{FreqLossPlan, FreqRectifier, ReconstructionDecoder};
use crate::geometry::PointCloud;
use crate::rng::{derive_seed, normal_matrix, rng_from_seed};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const DECODE_CHUNK: usize = 4096;

pub type LatentCode = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Widths of the per-point encoder layers.
    pub encoder_widths: Vec<usize>,
    pub head_width: usize,
    pub field_width: usize,
    /// Hidden layers of the vector field.
    pub field_layers: usize,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub horizon: f64,
    /// Points per cloud in the training likelihood; `0` uses all of them.
    pub likelihood_points: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            encoder_widths: vec![128, 256],
            head_width: 256,
            field_width: 32,
            field_layers: 2,
            train_steps: 20,
            eval_steps: 40,
            horizon: 1.0,
            likelihood_points: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.head_width == 0 || self.field_width == 0 || self.field_layers == 0 {
            return Err(Error::InvalidParam("model widths must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::InvalidParam("encoder_widths must be non-empty and positive".into()));
        }
        if self.train_steps == 0 || self.eval_steps == 0 {
            return Err(Error::InvalidParam("integration step counts must be positive".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParam(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }
}

fn insert_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut crate::rng::StreamRng) {
    let mut w = normal_matrix(rng, fan_in, fan_out);
    w.mapv_inplace(|v| v / (fan_in as f64).sqrt());
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn check_finite(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

// ---------------------------------------------------------------------------
// encoder

/// Diagonal Gaussian `q(z|X)`, stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl PosteriorGaussian {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::ShapeMismatch {
                op: "posterior",
                left: vec![mu.len()],
                right: vec![logvar.len()],
            });
        }
        Ok(Self { mu, logvar })
    }

    pub fn from_std(mu: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParam("posterior std-devs must be positive".into()));
        }
        Self::new(mu, sigma.iter().map(|s| 2.0 * s.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `z = μ + σ ⊙ noise`.
pub fn reparam_sample(post: &PosteriorGaussian, noise: &[f64]) -> Result<LatentCode> {
    if noise.len() != post.dim() {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            left: vec![post.dim()],
            right: vec![noise.len()],
        });
    }
    Ok(post
        .mu
        .iter()
        .zip(post.sigma())
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// `KL(q ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_standard_normal(post: &PosteriorGaussian) -> f64 {
    0.5 * post
        .mu
        .iter()
        .zip(&post.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(m2, var)?;
    let a = g.sub(a, logvar)?;
    let a = g.offset(a, -1.0);
    let s = g.sum(a);
    Ok(g.scale(s, 0.5))
}

/// Per-point network, symmetric max/mean pooling, then a head producing
/// `(μ, ln σ²)`. Input clouds are put in canonical order first, so the output
/// does not depend on the order of the points at all.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub params: ParamStore,
    layers: usize,
    latent_dim: usize,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        let mut prev = 3;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            insert_linear(&mut params, &format!("point{i}"), prev, w, &mut rng);
            prev = w;
        }
        insert_linear(&mut params, "head0", 2 * prev, cfg.head_width, &mut rng);
        insert_linear(&mut params, "head1", cfg.head_width, 2 * cfg.latent_dim, &mut rng);
        Ok(Self {
            params,
            layers: cfg.encoder_widths.len(),
            latent_dim: cfg.latent_dim,
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(cfg, 0)?;
        check_same_layout(&fresh.params, &params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Graph nodes for `(μ, ln σ²)`, each `1 × D`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bindings, cloud: &PointCloud) -> Result<(Var, Var)> {
        let mut h = g.constant(cloud.canonical().to_array());
        for i in 0..self.layers {
            h = dense(g, p, &format!("point{i}"), h)?;
            h = g.softplus(h);
        }
        let mx = g.max_rows(h)?;
        let mean = g.mean_rows(h);
        let pooled = g.concat_cols(&[mx, mean])?;
        let h = dense(g, p, "head0", pooled)?;
        let h = g.softplus(h);
        let out = dense(g, p, "head1", h)?;
        let mu = g.slice_cols(out, 0, self.latent_dim)?;
        let logvar = g.slice_cols(out, self.latent_dim, 2 * self.latent_dim)?;
        Ok((mu, logvar))
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<PosteriorGaussian> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (mu, lv) = self.encode_graph(&mut g, &p, cloud)?;
        let post = PosteriorGaussian::new(g.value(mu).iter().copied().collect(), g.value(lv).iter().copied().collect())?;
        if post.mu.iter().chain(&post.logvar).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(post)
    }
}

fn dense(g: &mut Graph, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add(h, p.get(&format!("{name}.b"))?)
}

pub(crate) fn check_same_layout(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    for (name, v) in expected.iter() {
        let got = found.get(name).map_err(|_| Error::MissingTensor(name.clone()))?;
        if got.dim() != v.dim() {
            return Err(Error::ShapeMismatch {
                op: "load parameters",
                left: vec![v.nrows(), v.ncols()],
                right: vec![got.nrows(), got.ncols()],
            });
        }
    }
    if found.len() != expected.len() {
        return Err(Error::Format(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            found.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CNF decoder

/// Conditional vector field `g(x, t, z)` integrated with fixed-step RK4.
///
/// Hidden layer `i` computes `tanh(h·Wᵢ + t·τᵢ + z·Zᵢ + bᵢ)` where `h` is the
/// previous activation (the point itself for the first layer). The output
/// layer has the same form without the activation, plus a linear skip `x·S`.
/// The output layer starts at zero, so a fresh decoder is the identity flow.
#[derive(Clone, Debug)]
pub struct CnfDecoder {
    pub params: ParamStore,
    latent_dim: usize,
    layers: usize,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub horizon: f64,
}

/// Per-layer weights with the latent contribution folded into the bias.
struct Conditioned {
    layers: Vec<(Array2<f64>, Array1<f64>, Array1<f64>)>,
    out: (Array2<f64>, Array1<f64>, Array1<f64>),
    skip: Array2<f64>,
}

impl Conditioned {
    fn field(&self, x: &Array2<f64>, t: f64) -> Array2<f64> {
        let mut h = x.clone();
        for (w, tw, zb) in &self.layers {
            let bias = zb + &(tw * t);
            let mut pre = h.dot(w);
            pre += &bias;
            pre.mapv_inplace(tanh);
            h = pre;
        }
        let (w, tw, zb) = &self.out;
        let mut out = h.dot(w);
        out += &(zb + &(tw * t));
        out += &x.dot(&self.skip);
        out
    }

    /// Field value and the exact trace of its `3 × 3` Jacobian per point.
    fn field_trace(&self, x: &Array2<f64>, t: f64) -> (Array2<f64>, Array1<f64>) {
        let mut h = x.clone();
        let mut tangents: Vec<Array2<f64>> = Vec::new();
        for (li, (w, tw, zb)) in self.layers.iter().enumerate() {
            let bias = zb + &(tw * t);
            let mut pre = h.dot(w);
            pre += &bias;
            pre.mapv_inplace(tanh);
            let deriv = pre.mapv(|v| 1.0 - v * v);
            tangents = if li == 0 {
                (0..3).map(|j| &deriv * &w.row(j)).collect()
            } else {
                tangents.iter().map(|d| d.dot(w) * &deriv).collect()
            };
            h = pre;
        }
        let (w, tw, zb) = &self.out;
        let mut out = h.dot(w);
        out += &(zb + &(tw * t));
        out += &x.dot(&self.skip);
        let mut trace = Array1::from_elem(x.nrows(), self.skip[[0, 0]] + self.skip[[1, 1]] + self.skip[[2, 2]]);
        for (j, d) in tangents.iter().enumerate() {
            trace += &d.dot(&w.column(j));
        }
        (out, trace)
    }
}

/// Graph handles of a conditioned field.
struct CondGraph {
    layers: Vec<(Var, Var, Var)>,
    out: (Var, Var, Var),
    skip: Var,
}

impl CnfDecoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        let hdim = cfg.field_width;
        let d = cfg.latent_dim;
        for i in 0..cfg.field_layers {
            let fan_in = if i == 0 { 3 } else { hdim };
            let scale = 1.0 / ((fan_in + 1 + d) as f64).sqrt();
            params.insert(format!("layer{i}.w"), normal_matrix(&mut rng, fan_in, hdim) * scale);
            params.insert(format!("layer{i}.t"), normal_matrix(&mut rng, 1, hdim) * scale);
            params.insert(format!("layer{i}.z"), normal_matrix(&mut rng, d, hdim) * scale);
            params.insert(format!("layer{i}.b"), Array2::zeros((1, hdim)));
        }
        params.insert("out.w", Array2::zeros((hdim, 3)));
        params.insert("out.t", Array2::zeros((1, 3)));
        params.insert("out.z", Array2::zeros((d, 3)));
        params.insert("out.b", Array2::zeros((1, 3)));
        params.insert("out.x", Array2::zeros((3, 3)));
        Ok(Self {
            params,
            latent_dim: d,
            layers: cfg.field_layers,
            train_steps: cfg.train_steps,
            eval_steps: cfg.eval_steps,
            horizon: cfg.horizon,
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(cfg, 0)?;
        check_same_layout(&fresh.params, &params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "latent code",
                left: vec![self.latent_dim],
                right: vec![z.len()],
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(())
    }

    fn check_points(x: &Array2<f64>) -> Result<()> {
        if x.ncols() != 3 {
            return Err(Error::ShapeMismatch {
                op: "points",
                left: vec![x.nrows(), 3],
                right: vec![x.nrows(), x.ncols()],
            });
        }
        check_finite(x, || "input points".into())
    }

    fn conditioned(&self, z: &[f64]) -> Result<Conditioned> {
        self.check_latent(z)?;
        let z = Array1::from(z.to_vec());
        let p = &self.params;
        let take = |name: &str| -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
            let w = p.get(&format!("{name}.w"))?.clone();
            let tw = p.get(&format!("{name}.t"))?.row(0).to_owned();
            let zb = z.dot(p.get(&format!("{name}.z"))?) + p.get(&format!("{name}.b"))?.row(0);
            Ok((w, tw, zb))
        };
        Ok(Conditioned {
            layers: (0..self.layers).map(|i| take(&format!("layer{i}"))).collect::<Result<_>>()?,
            out: take("out")?,
            skip: p.get("out.x")?.clone(),
        })
    }

    /// Pushes base points (`n × 3`) through the flow from `t = 0` to `τ`.
    pub fn decode(&self, base: &Array2<f64>, z: &[f64], steps: usize) -> Result<Array2<f64>> {
        Self::check_points(base)?;
        let cond = self.conditioned(z)?;
        let h = self.horizon / steps as f64;
        let mut out = Array2::zeros(base.dim());
        for (chunk_idx, chunk) in base.axis_chunks_iter(Axis(0), DECODE_CHUNK).enumerate() {
            let mut x = chunk.to_owned();
            for k in 0..steps {
                let t = k as f64 * h;
                let k1 = cond.field(&x, t);
                let k2 = cond.field(&(&x + &(&k1 * (0.5 * h))), t + 0.5 * h);
                let k3 = cond.field(&(&x + &(&k2 * (0.5 * h))), t + 0.5 * h);
                let k4 = cond.field(&(&x + &(&k3 * h)), t + h);
                x = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
                check_finite(&x, || format!("decoder state at integration step {}", k + 1))?;
            }
            let start = chunk_idx * DECODE_CHUNK;
            out.slice_mut(s![start..start + x.nrows(), ..]).assign(&x);
        }
        Ok(out)
    }

    /// Decodes with the evaluation step count.
    pub fn decode_cloud(&self, base: &Array2<f64>, z: &[f64]) -> Result<PointCloud> {
        PointCloud::from_array(&self.decode(base, z, self.eval_steps)?)
    }

    /// Integrates from `t = τ` back to `0`. Returns the base points and
    /// `∫₀^τ Tr(∂g/∂x) dt` per point.
    pub fn invert(&self, x: &Array2<f64>, z: &[f64], steps: usize) -> Result<(Array2<f64>, Array1<f64>)> {
        Self::check_points(x)?;
        let cond = self.conditioned(z)?;
        let h = self.horizon / steps as f64;
        let mut base = Array2::zeros(x.dim());
        let mut integral = Array1::zeros(x.nrows());
        for (chunk_idx, chunk) in x.axis_chunks_iter(Axis(0), DECODE_CHUNK).enumerate() {
            let mut y = chunk.to_owned();
            let mut acc = Array1::<f64>::zeros(y.nrows());
            for k in 0..steps {
                let t = self.horizon - k as f64 * h;
                let (k1, r1) = cond.field_trace(&y, t);
                let (k2, r2) = cond.field_trace(&(&y - &(&k1 * (0.5 * h))), t - 0.5 * h);
                let (k3, r3) = cond.field_trace(&(&y - &(&k2 * (0.5 * h))), t - 0.5 * h);
                let (k4, r4) = cond.field_trace(&(&y - &(&k3 * h)), t - h);
                y = y - (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
                acc = acc + (r1 + (r2 + r3) * 2.0 + r4) * (h / 6.0);
                check_finite(&y, || format!("inverse state at integration step {}", k + 1))?;
            }
            let start = chunk_idx * DECODE_CHUNK;
            base.slice_mut(s![start..start + y.nrows(), ..]).assign(&y);
            integral.slice_mut(s![start..start + y.nrows()]).assign(&acc);
        }
        Ok((base, integral))
    }

    /// `log p(x | z)` per point.
    pub fn logprob(&self, x: &Array2<f64>, z: &[f64], steps: usize) -> Result<Vec<f64>> {
        let (base, integral) = self.invert(x, z, steps)?;
        let out: Vec<f64> = base
            .rows()
            .into_iter()
            .zip(integral.iter())
            .map(|(b, i)| -1.5 * LN_2PI - 0.5 * b.dot(&b) - i)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point log-density".into()));
        }
        Ok(out)
    }

    fn cond_graph(&self, g: &mut Graph, p: &Bindings, z: Var) -> Result<CondGraph> {
        let mut take = |name: &str| -> Result<(Var, Var, Var)> {
            let zw = g.matmul(z, p.get(&format!("{name}.z"))?)?;
            let zb = g.add(zw, p.get(&format!("{name}.b"))?)?;
            Ok((p.get(&format!("{name}.w"))?, p.get(&format!("{name}.t"))?, zb))
        };
        let layers = (0..self.layers).map(|i| take(&format!("layer{i}"))).collect::<Result<_>>()?;
        let out = take("out")?;
        Ok(CondGraph {
            layers,
            out,
            skip: p.get("out.x")?,
        })
    }

    fn field_graph(&self, g: &mut Graph, c: &CondGraph, x: Var, t: f64, trace: bool) -> Result<(Var, Option<Var>)> {
        let mut h = x;
        let mut tangents: Vec<Var> = Vec::new();
        for (li, &(w, tw, zb)) in c.layers.iter().enumerate() {
            let tt = g.scale(tw, t);
            let bias = g.add(zb, tt)?;
            let pre = g.matmul(h, w)?;
            let pre = g.add(pre, bias)?;
            h = g.tanh(pre);
            if trace {
                let sq = g.square(h);
                let nsq = g.neg(sq);
                let deriv = g.offset(nsq, 1.0);
                tangents = if li == 0 {
                    (0..3)
                        .map(|j| {
                            let wr = g.slice_rows(w, j, j + 1)?;
                            g.mul(deriv, wr)
                        })
                        .collect::<Result<_>>()?
                } else {
                    tangents
                        .iter()
                        .map(|&d| {
                            let m = g.matmul(d, w)?;
                            g.mul(m, deriv)
                        })
                        .collect::<Result<_>>()?
                };
            }
        }
        let (w, tw, zb) = c.out;
        let tt = g.scale(tw, t);
        let bias = g.add(zb, tt)?;
        let o = g.matmul(h, w)?;
        let o = g.add(o, bias)?;
        let sk = g.matmul(x, c.skip)?;
        let o = g.add(o, sk)?;
        if !trace {
            return Ok((o, None));
        }
        let mut tr: Option<Var> = None;
        for j in 0..3 {
            let col = g.slice_cols(w, j, j + 1)?;
            let tj = g.matmul(tangents[j], col)?;
            let sr = g.slice_rows(c.skip, j, j + 1)?;
            let diag = g.slice_cols(sr, j, j + 1)?;
            let tj = g.add(tj, diag)?;
            tr = Some(match tr {
                None => tj,
                Some(a) => g.add(a, tj)?,
            });
        }
        Ok((o, tr))
    }

    /// Differentiable pushforward of constant base points.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bindings, base: &Array2<f64>, z: Var, steps: usize) -> Result<Var> {
        Self::check_points(base)?;
        let c = self.cond_graph(g, p, z)?;
        let h = self.horizon / steps as f64;
        let mut x = g.constant(base.clone());
        for k in 0..steps {
            let t = k as f64 * h;
            let (k1, _) = self.field_graph(g, &c, x, t, false)?;
            let a = g.scale(k1, 0.5 * h);
            let x2 = g.add(x, a)?;
            let (k2, _) = self.field_graph(g, &c, x2, t + 0.5 * h, false)?;
            let a = g.scale(k2, 0.5 * h);
            let x3 = g.add(x, a)?;
            let (k3, _) = self.field_graph(g, &c, x3, t + 0.5 * h, false)?;
            let a = g.scale(k3, h);
            let x4 = g.add(x, a)?;
            let (k4, _) = self.field_graph(g, &c, x4, t + h, false)?;
            x = rk4_combine(g, x, [k1, k2, k3, k4], h)?;
        }
        check_finite(g.value(x), || "decoder state".into())?;
        Ok(x)
    }

    /// Differentiable `log p(x | z)` per point (`n × 1`).
    pub fn logprob_graph(&self, g: &mut Graph, p: &Bindings, x: &Array2<f64>, z: Var, steps: usize) -> Result<Var> {
        Self::check_points(x)?;
        let c = self.cond_graph(g, p, z)?;
        let h = self.horizon / steps as f64;
        let mut y = g.constant(x.clone());
        let mut acc: Option<Var> = None;
        for k in 0..steps {
            let t = self.horizon - k as f64 * h;
            let (k1, r1) = self.field_graph(g, &c, y, t, true)?;
            let a = g.scale(k1, -0.5 * h);
            let y2 = g.add(y, a)?;
            let (k2, r2) = self.field_graph(g, &c, y2, t - 0.5 * h, true)?;
            let a = g.scale(k2, -0.5 * h);
            let y3 = g.add(y, a)?;
            let (k3, r3) = self.field_graph(g, &c, y3, t - 0.5 * h, true)?;
            let a = g.scale(k3, -h);
            let y4 = g.add(y, a)?;
            let (k4, r4) = self.field_graph(g, &c, y4, t - h, true)?;
            y = rk4_combine(g, y, [k1, k2, k3, k4], -h)?;
            let inc = rk4_increment(g, [r1, r2, r3, r4].map(|r| r.expect("trace requested")), h)?;
            acc = Some(match acc {
                None => inc,
                Some(a) => g.add(a, inc)?,
            });
        }
        check_finite(g.value(y), || "inverse state".into())?;
        let sq = g.square(y);
        let r2 = g.sum_cols(sq);
        let lp = g.scale(r2, -0.5);
        let lp = g.offset(lp, -1.5 * LN_2PI);
        g.sub(lp, acc.expect("at least one step"))
    }
}

/// `h/6 (k1 + 2k2 + 2k3 + k4)`.
fn rk4_increment(g: &mut Graph, k: [Var; 4], h: f64) -> Result<Var> {
    let mid = g.add(k[1], k[2])?;
    let mid = g.scale(mid, 2.0);
    let s = g.add(k[0], mid)?;
    let s = g.add(s, k[3])?;
    Ok(g.scale(s, h / 6.0))
}

fn rk4_combine(g: &mut Graph, x: Var, k: [Var; 4], h: f64) -> Result<Var> {
    let inc = rk4_increment(g, k, h)?;
    g.add(x, inc)
}

impl ReconstructionDecoder for CnfDecoder {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn decode_graph(&self, g: &mut Graph, p: &Bindings, base: &Array2<f64>, z: Var) -> Result<Var> {
        CnfDecoder::decode_graph(self, g, p, base, z, self.train_steps)
    }
}

// ---------------------------------------------------------------------------
// objectives

#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: CnfDecoder,
}

impl Vae {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(cfg, derive_seed(seed, &[1]))?,
            decoder: CnfDecoder::new(cfg, derive_seed(seed, &[2]))?,
        })
    }
}

/// Values of one objective evaluation. `objective` is the FreELBO (the ELBO
/// when no frequency term is active).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub objective: f64,
    pub recon: f64,
    pub kl: f64,
    pub freq: f64,
}

pub struct ObjectiveNodes {
    pub objective: Var,
    pub recon: Var,
    pub kl: Var,
    pub freq: Option<Var>,
    /// Frozen neighbor weights used by the frequency term, one per sample.
    pub plans: Vec<FreqLossPlan>,
}

impl ObjectiveNodes {
    pub fn terms(&self, g: &Graph) -> ElboTerms {
        ElboTerms {
            objective: g.scalar_value(self.objective),
            recon: g.scalar_value(self.recon),
            kl: g.scalar_value(self.kl),
            freq: self.freq.map_or(0.0, |f| g.scalar_value(f)),
        }
    }
}

/// Indices (into the canonical order) of the points entering the training
/// likelihood.
fn likelihood_subset(n: usize, m: usize, seed: u64) -> Vec<usize> {
    if m == 0 || m >= n {
        return (0..n).collect();
    }
    let mut idx = sample(&mut rng_from_seed(seed), n, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Builds the objective graph for one cloud.
///
/// `noise` is the reparameterization draw. `seed` fixes the likelihood
/// subsample and the base noise of the reconstructions. With `frozen`, the
/// frequency term reuses the given neighbor weights instead of building them
/// from the current reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph(
    g: &mut Graph,
    enc: &Bindings,
    dec: &Bindings,
    vae: &Vae,
    cloud: &PointCloud,
    noise: &[f64],
    rect: Option<&FreqRectifier>,
    seed: u64,
    frozen: Option<&[FreqLossPlan]>,
) -> Result<ObjectiveNodes> {
    let d = vae.cfg.latent_dim;
    if noise.len() != d {
        return Err(Error::ShapeMismatch {
            op: "reparameterization noise",
            left: vec![d],
            right: vec![noise.len()],
        });
    }
    let (mu, logvar) = vae.encoder.encode_graph(g, enc, cloud)?;
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let eps = g.constant(row(noise));
    let spread = g.mul(sigma, eps)?;
    let z = g.add(mu, spread)?;

    let canon = cloud.canonical().to_array();
    let n = canon.nrows();
    let idx = likelihood_subset(n, vae.cfg.likelihood_points, derive_seed(seed, &[0]));
    let pts = canon.select(Axis(0), &idx);
    let lp = vae.decoder.logprob_graph(g, dec, &pts, z, vae.decoder.train_steps)?;
    let lp = g.sum(lp);
    let recon = g.scale(lp, n as f64 / idx.len() as f64);
    let kl = kl_graph(g, mu, logvar)?;
    let elbo = g.sub(recon, kl)?;

    let active = rect.filter(|r| r.cfg.eta > 0.0);
    let Some(rect) = active else {
        return Ok(ObjectiveNodes {
            objective: elbo,
            recon,
            kl,
            freq: None,
            plans: Vec::new(),
        });
    };
    let target = rect.spectrum(cloud)?;
    let n_recon = match rect.cfg.recon_points {
        0 => n,
        m => m,
    };
    let mut plans = Vec::with_capacity(rect.cfg.sample_count);
    let mut total: Option<Var> = None;
    for s in 0..rect.cfg.sample_count {
        let base = normal_matrix(&mut rng_from_seed(derive_seed(seed, &[1, s as u64])), n_recon, 3);
        let recon_pts = vae.decoder.decode_graph(g, dec, &base, z, vae.decoder.train_steps)?;
        let plan = match frozen {
            Some(f) => f
                .get(s)
                .cloned()
                .ok_or_else(|| Error::InvalidParam("too few frozen plans".into()))?,
            None => rect.plan(&target, g.value(recon_pts))?,
        };
        let l = rect.loss_node(g, &plan, recon_pts)?;
        plans.push(plan);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("sample_count >= 1");
    let freq = g.scale(total, 1.0 / rect.cfg.sample_count as f64);
    let penalty = g.scale(freq, rect.cfg.eta);
    let objective = g.sub(elbo, penalty)?;
    Ok(ObjectiveNodes {
        objective,
        recon,
        kl,
        freq: Some(freq),
        plans,
    })
}

fn evaluate(vae: &Vae, cloud: &PointCloud, noise: &[f64], rect: Option<&FreqRectifier>, seed: u64) -> Result<ElboTerms> {
    let mut g = Graph::new();
    let enc = vae.encoder.params.bind_frozen(&mut g);
    let dec = vae.decoder.params.bind_frozen(&mut g);
    let nodes = objective_graph(&mut g, &enc, &dec, vae, cloud, noise, rect, seed, None)?;
    let terms = nodes.terms(&g);
    if !terms.objective.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok(terms)
}

/// One-sample ELBO: `log p(X | z) − KL(q(z|X) ‖ N(0, I))`.
pub fn elbo(vae: &Vae, cloud: &PointCloud, noise: &[f64], seed: u64) -> Result<ElboTerms> {
    evaluate(vae, cloud, noise, None, seed)
}

/// ELBO minus `η ·` the frequency-rectification loss.
pub fn freelbo(vae: &Vae, cloud: &PointCloud, rect: &FreqRectifier, noise: &[f64], seed: u64) -> Result<ElboTerms> {
    evaluate(vae, cloud, noise, Some(rect), seed)
}

/// Objective value and its gradients with respect to encoder and decoder
/// parameters (ascent direction).
pub fn objective_grads(
    vae: &Vae,
    cloud: &PointCloud,
    rect: Option<&FreqRectifier>,
    noise: &[f64],
    seed: u64,
) -> Result<(ElboTerms, Grads, Grads)> {
    let mut g = Graph::new();
    let enc = vae.encoder.params.bind(&mut g);
    let dec = vae.decoder.params.bind(&mut g);
    let nodes = objective_graph(&mut g, &enc, &dec, vae, cloud, noise, rect, seed, None)?;
    let terms = nodes.terms(&g);
    if !terms.objective.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    g.backward(nodes.objective)?;
    Ok((terms, vae.encoder.params.gradients(&g, &enc), vae.decoder.params.gradients(&g, &dec)))
}
