//! Latent denoising diffusion: variance schedule, single-step forward
//! diffusion, the noise-prediction loss and ancestral sampling.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Grads, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::models::check_same_layout;
use crate::rng::{normal_matrix, rng_from_seed};

/// Precomputed `β_t, α_t = Π √(1−β_i), γ_t = √(1−α_t²), σ_t = √β_t`,
/// indexed by `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    gammas: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParam("diffusion step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alphas = Vec::with_capacity(steps);
    let mut a = 1.0;
    for b in &betas {
        a *= (1.0 - b).sqrt();
        alphas.push(a);
    }
    let gammas = alphas.iter().map(|a| (1.0 - a * a).sqrt()).collect();
    let sigmas = betas.iter().map(|b| b.sqrt()).collect();
    Ok(DiffusionSchedule {
        betas,
        alphas,
        gammas,
        sigmas,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn at(&self, v: &[f64], t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside 1..={}", self.steps());
        v[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.at(&self.betas, t)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.at(&self.alphas, t)
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.at(&self.gammas, t)
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.at(&self.sigmas, t)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParam(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `z_t = α_t z_0 + γ_t ε`.
pub fn diffuse(z0: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if z0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "diffuse",
            left: vec![z0.len()],
            right: vec![eps.len()],
        });
    }
    let (a, g) = (sched.alpha(t), sched.gamma(t));
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + g * e).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub width: usize,
    pub blocks: usize,
    /// Size of the sinusoidal time embedding (even).
    pub time_dim: usize,
}

impl Default for DiffusionConfig {
    /// `T = 200` with the conventional `[1e-4, 0.02]` range (tuned for
    /// `T = 1000`) scaled by `1000/T`, so the terminal marginal stays close to
    /// a standard normal.
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            width: 256,
            blocks: 2,
            time_dim: 32,
        }
    }
}

impl DiffusionConfig {
    /// `T = 1000`, β from `1e-4` to `0.02`.
    pub fn full_scale() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.width == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidParam("score net width must be positive and time_dim even".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer steps, one row per step.
pub fn time_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((ts.len(), dim), |(i, j)| {
        let freq = (-(10_000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let a = ts[i] as f64 * freq;
        if j < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Anything that predicts the noise in a batch of diffused latents.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    /// `z` is `B × D`, `ts[i]` the step of row `i`.
    fn predict(&self, z: &Array2<f64>, ts: &[usize]) -> Result<Array2<f64>>;
}

/// Residual network `ε(z_t, t)`: an input layer, residual blocks
/// `h ← h + tanh(h·A + e·C + a)·B + b` and a linear read-out. The time
/// embedding `e` enters the input layer and every block.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub params: ParamStore,
    dim: usize,
    blocks: usize,
    time_dim: usize,
}

impl ScoreNet {
    pub fn new(dim: usize, cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::InvalidParam("latent dimension must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        let (w, e) = (cfg.width, cfg.time_dim);
        let mut lin = |name: &str, fan_in: usize, fan_out: usize, scale: f64| {
            let m = normal_matrix(&mut rng, fan_in, fan_out) * (scale / (fan_in as f64).sqrt());
            params.insert(name.to_string(), m);
        };
        lin("in.w", dim, w, 1.0);
        lin("in.t", e, w, 1.0);
        for i in 0..cfg.blocks {
            lin(&format!("block{i}.a.w"), w, w, 1.0);
            lin(&format!("block{i}.a.t"), e, w, 1.0);
            lin(&format!("block{i}.b.w"), w, w, 0.5);
        }
        lin("out.w", w, dim, 1.0);
        params.insert("in.b", Array2::zeros((1, w)));
        for i in 0..cfg.blocks {
            params.insert(format!("block{i}.a.b"), Array2::zeros((1, w)));
            params.insert(format!("block{i}.b.b"), Array2::zeros((1, w)));
        }
        params.insert("out.b", Array2::zeros((1, dim)));
        Ok(Self {
            params,
            dim,
            blocks: cfg.blocks,
            time_dim: cfg.time_dim,
        })
    }

    pub fn from_params(dim: usize, cfg: &DiffusionConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(dim, cfg, 0)?;
        check_same_layout(&fresh.params, &params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn forward_graph(&self, g: &mut Graph, p: &Bindings, z: Var, ts: &[usize]) -> Result<Var> {
        let emb = g.constant(time_embedding(ts, self.time_dim));
        let h = g.matmul(z, p.get("in.w")?)?;
        let te = g.matmul(emb, p.get("in.t")?)?;
        let h = g.add(h, te)?;
        let mut h = g.add(h, p.get("in.b")?)?;
        for i in 0..self.blocks {
            let u = g.matmul(h, p.get(&format!("block{i}.a.w"))?)?;
            let te = g.matmul(emb, p.get(&format!("block{i}.a.t"))?)?;
            let u = g.add(u, te)?;
            let u = g.add(u, p.get(&format!("block{i}.a.b"))?)?;
            let u = g.tanh(u);
            let u = g.matmul(u, p.get(&format!("block{i}.b.w"))?)?;
            let u = g.add(u, p.get(&format!("block{i}.b.b"))?)?;
            h = g.add(h, u)?;
        }
        let o = g.matmul(h, p.get("out.w")?)?;
        g.add(o, p.get("out.b")?)
    }
}

impl NoisePredictor for ScoreNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, z: &Array2<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let out = self.forward_graph(&mut g, &p, zv, ts)?;
        Ok(g.value(out).clone())
    }
}

/// Per-item `(t, ε)` draws of one loss evaluation.
fn loss_draws(n: usize, dim: usize, sched: &DiffusionSchedule, seed: u64) -> (Vec<usize>, Array2<f64>) {
    let mut rng = rng_from_seed(seed);
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=sched.steps())).collect();
    let eps = normal_matrix(&mut rng, n, dim);
    (ts, eps)
}

/// Graph of `mean_i ‖ε_i − ε(z_{t_i}, t_i)‖²` over the rows of `z0`.
pub fn ddpm_loss_graph(
    g: &mut Graph,
    p: &Bindings,
    net: &ScoreNet,
    z0: &Array2<f64>,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Var> {
    if z0.nrows() == 0 {
        return Err(Error::Empty("latent batch"));
    }
    if z0.ncols() != net.dim {
        return Err(Error::ShapeMismatch {
            op: "ddpm_loss",
            left: vec![z0.nrows(), net.dim],
            right: vec![z0.nrows(), z0.ncols()],
        });
    }
    let (ts, eps) = loss_draws(z0.nrows(), net.dim, sched, seed);
    let mut zt = eps.clone();
    for (i, mut row) in zt.rows_mut().into_iter().enumerate() {
        let (a, gm) = (sched.alpha(ts[i]), sched.gamma(ts[i]));
        row.zip_mut_with(&z0.row(i), |e, z| *e = a * z + gm * *e);
    }
    let zv = g.constant(zt);
    let pred = net.forward_graph(g, p, zv, &ts)?;
    let target = g.constant(eps);
    let diff = g.sub(target, pred)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / z0.nrows() as f64))
}

pub fn ddpm_loss(net: &ScoreNet, z0: &Array2<f64>, sched: &DiffusionSchedule, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let p = net.params.bind_frozen(&mut g);
    let l = ddpm_loss_graph(&mut g, &p, net, z0, sched, seed)?;
    Ok(g.scalar_value(l))
}

pub fn ddpm_loss_grads(net: &ScoreNet, z0: &Array2<f64>, sched: &DiffusionSchedule, seed: u64) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g);
    let l = ddpm_loss_graph(&mut g, &p, net, z0, sched, seed)?;
    let value = g.scalar_value(l);
    if !value.is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    g.backward(l)?;
    Ok((value, net.params.gradients(&g, &p)))
}

/// Runs `n` independent reverse chains from `z_T ~ N(0, I)`:
/// `z_{t−1} = (z_t − β_t/γ_t · ε(z_t, t)) / √(1−β_t) + σ_t ξ`, with `ξ = 0`
/// at the last step. Uses exactly `T` predictor calls.
pub fn ancestral_sample_batch(net: &dyn NoisePredictor, sched: &DiffusionSchedule, n: usize, seed: u64) -> Result<Array2<f64>> {
    let mut rng = rng_from_seed(seed);
    let mut z = normal_matrix(&mut rng, n, net.dim());
    for t in (1..=sched.steps()).rev() {
        let eps = net.predict(&z, &vec![t; n])?;
        let (b, gm) = (sched.beta(t), sched.gamma(t));
        let scale = 1.0 / (1.0 - b).sqrt();
        z.zip_mut_with(&eps, |zi, e| *zi = (*zi - b / gm * e) * scale);
        if t > 1 {
            let xi = normal_matrix(&mut rng, n, net.dim());
            let s = sched.sigma(t);
            z.zip_mut_with(&xi, |zi, x| *zi += s * x);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent chain at t = {t}")));
        }
    }
    Ok(z)
}

pub fn ancestral_sample(net: &dyn NoisePredictor, sched: &DiffusionSchedule, seed: u64) -> Result<Vec<f64>> {
    Ok(ancestral_sample_batch(net, sched, 1, seed)?.row(0).to_vec())
}
