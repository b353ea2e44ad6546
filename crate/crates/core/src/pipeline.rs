//! Run configuration, datasets, checkpoints and the two-stage training,
//! generation and evaluation workflows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Grads, ParamStore, PlateauScheduler, TensorContainer};
use crate::diffusion::{ancestral_sample_batch, ddpm_loss_grads, DiffusionConfig, ScoreNet};
use crate::error::{Error, Result};
use crate::freq_rect::{FreqRectConfig, FreqRectifier};
use crate::geometry::{normalize_cloud, synth_shape, HarmonicTerm, PointCloud, Shape};
use crate::harmonics::{coeff_degree_order, num_coeffs, HarmonicSpectrum};
use crate::metrics::{evaluate_sets, MetricConfig, MetricRow};
use crate::models::{objective_grads, CnfDecoder, ElboTerms, Encoder, ModelConfig, Vae};
use crate::rng::{normal_matrix, normal_vec, Purpose, Streams};

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Bumpy spheres drawn around a few random prototypes.
    Synthetic,
    /// Text clouds from `path`; the last `test_shapes` files (by name) are
    /// held out.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: String,
    pub seed: u64,
    pub train_shapes: usize,
    pub test_shapes: usize,
    pub points: usize,
    pub prototypes: usize,
    /// Highest harmonic degree of the synthetic bumps.
    pub max_degree: usize,
    /// Radial perturbation amplitude; radii stay within `1 ± amplitude`.
    pub amplitude: f64,
    /// Per-shape spread of harmonic weights around the prototype.
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: String::new(),
            seed: 0,
            train_shapes: 200,
            test_shapes: 50,
            points: 512,
            prototypes: 4,
            max_degree: 6,
            amplitude: 0.3,
            jitter: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub batch_size: usize,
    pub ddpm_epochs: usize,
    pub ddpm_lr: f64,
    pub ddpm_batch_size: usize,
    /// Posterior draws per training shape and epoch.
    pub ddpm_draws: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vae_epochs: 30,
            vae_lr: 1e-3,
            batch_size: 2,
            ddpm_epochs: 30,
            ddpm_lr: 1e-3,
            ddpm_batch_size: 64,
            ddpm_draws: 16,
            adam: AdamConfig::default(),
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub freq: FreqRectConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
}

impl RunConfig {
    /// Hyperparameters at the original scale: `D_z = 1024`, `L = 50`,
    /// `σ_Fre = 50`, `η = 5·10⁶`, `T = 1000`, DDPM learning rate `1e-5`.
    pub fn full_scale() -> Self {
        let mut cfg = Self::default();
        cfg.model.latent_dim = 1024;
        cfg.freq = FreqRectConfig::full_scale();
        cfg.diffusion = DiffusionConfig::full_scale();
        cfg.train.ddpm_lr = 1e-5;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.freq.validate()?;
        self.diffusion.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.ddpm_batch_size == 0 || t.ddpm_draws == 0 {
            return Err(Error::Config("batch sizes and ddpm_draws must be positive".into()));
        }
        if !(t.vae_lr > 0.0 && t.ddpm_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let d = &self.data;
        if d.points == 0 || d.train_shapes == 0 {
            return Err(Error::Config("dataset needs at least one shape and one point".into()));
        }
        if d.source == DataSource::Synthetic && (d.prototypes == 0 || d.max_degree < 1 || !(d.amplitude >= 0.0 && d.amplitude < 1.0)) {
            return Err(Error::Config("synthetic data needs prototypes >= 1, max_degree >= 1, 0 <= amplitude < 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `section.key=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("split yields one item");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

// ---------------------------------------------------------------------------
// data

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

/// Random harmonic weights for degrees `2..=max_degree`, scaled so the
/// perturbation bound is 1.
fn prototype_terms(streams: &Streams, cfg: &DataConfig, proto: u64) -> Vec<f64> {
    let mut rng = streams.rng(Purpose::Data, &[0, proto]);
    let w = normal_vec(&mut rng, num_coeffs(cfg.max_degree));
    w.iter()
        .enumerate()
        .map(|(i, v)| if coeff_degree_order(i).0 >= 2 { *v } else { 0.0 })
        .collect()
}

fn bumpy_shape(weights: &[f64], amplitude: f64) -> Shape {
    let mut terms: Vec<HarmonicTerm> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(i, w)| {
            let (l, m) = coeff_degree_order(i);
            HarmonicTerm { l, m, weight: *w }
        })
        .collect();
    let bound = Shape::perturbation_bound(&terms);
    for t in &mut terms {
        t.weight /= bound;
    }
    Shape::BumpySphere { amplitude, terms }
}

/// The synthetic collection: shape `i` picks prototype `i mod P` and
/// perturbs its weights.
pub fn synthetic_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let streams = Streams::new(cfg.seed);
    let protos: Vec<Vec<f64>> = (0..cfg.prototypes as u64).map(|p| prototype_terms(&streams, cfg, p)).collect();
    let make = |i: usize| -> Result<PointCloud> {
        let mut rng = streams.rng(Purpose::Data, &[1, i as u64]);
        let noise = normal_vec(&mut rng, protos[0].len());
        let w: Vec<f64> = protos[i % protos.len()]
            .iter()
            .zip(&noise)
            .enumerate()
            .map(|(k, (p, n))| if coeff_degree_order(k).0 >= 2 { p + cfg.jitter * n } else { 0.0 })
            .collect();
        let shape = bumpy_shape(&w, cfg.amplitude);
        normalize_cloud(&synth_shape(&shape, cfg.points, streams.seed_for(Purpose::Data, &[2, i as u64]))?)
    };
    let all = (0..cfg.train_shapes + cfg.test_shapes).map(make).collect::<Result<Vec<_>>>()?;
    let (train, test) = all.split_at(cfg.train_shapes);
    Ok(Dataset {
        train: train.to_vec(),
        test: test.to_vec(),
    })
}

const CLOUD_EXTENSIONS: [&str; 3] = ["xyz", "txt", "pts"];

/// Reads every cloud file in `dir`, sorted by file name.
pub fn read_cloud_dir(dir: impl AsRef<Path>) -> Result<Vec<PointCloud>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| CLOUD_EXTENSIONS.contains(&e))
        })
        .collect();
    files.sort();
    files.iter().map(PointCloud::read_text).collect()
}

/// Writes `cloud_0000.xyz`, `cloud_0001.xyz`, … into `dir`.
pub fn write_cloud_dir(dir: impl AsRef<Path>, clouds: &[PointCloud]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, c) in clouds.iter().enumerate() {
        c.write_text(dir.join(format!("cloud_{i:04}.xyz")))?;
    }
    Ok(())
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    match cfg.source {
        DataSource::Synthetic => synthetic_dataset(cfg),
        DataSource::Directory => {
            let mut all = read_cloud_dir(&cfg.path)?;
            if all.len() <= cfg.test_shapes {
                return Err(Error::Config(format!(
                    "{} holds {} clouds, not enough for {} held-out shapes",
                    cfg.path,
                    all.len(),
                    cfg.test_shapes
                )));
            }
            let test = all.split_off(all.len() - cfg.test_shapes);
            let train = all.into_iter().take(cfg.train_shapes).collect();
            Ok(Dataset { train, test })
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder and decoder only.
    Vae,
    /// Encoder, decoder and latent prior.
    Full,
}

impl Stage {
    fn label(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Full => "full",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    stage: Stage,
    config: RunConfig,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub config: RunConfig,
    pub stage: Stage,
    pub vae: Vae,
    pub prior: Option<ScoreNet>,
}

impl ModelCheckpoint {
    pub fn to_container(&self) -> TensorContainer {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            config: self.config.clone(),
        };
        let mut c = TensorContainer::new(toml::to_string(&header).expect("header serializes"));
        self.vae.encoder.params.export(&mut c, "encoder/");
        self.vae.decoder.params.export(&mut c, "decoder/");
        if let Some(p) = &self.prior {
            p.params.export(&mut c, "prior/");
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let header: CheckpointHeader = toml::from_str(&c.header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
        }
        let cfg = header.config;
        let vae = Vae {
            cfg: cfg.model.clone(),
            encoder: Encoder::from_params(&cfg.model, ParamStore::import(c, "encoder/")?)?,
            decoder: CnfDecoder::from_params(&cfg.model, ParamStore::import(c, "decoder/")?)?,
        };
        let prior = match header.stage {
            Stage::Vae => None,
            Stage::Full => Some(ScoreNet::from_params(
                cfg.model.latent_dim,
                &cfg.diffusion,
                ParamStore::import(c, "prior/")?,
            )?),
        };
        Ok(Self {
            config: cfg,
            stage: header.stage,
            vae,
            prior,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }

    fn require_prior(&self) -> Result<&ScoreNet> {
        self.prior.as_ref().ok_or(Error::StageMismatch {
            expected: Stage::Full.label(),
            found: self.stage.label().into(),
        })
    }
}

// ---------------------------------------------------------------------------
// stage 1

/// Training-set means of one VAE epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub terms: ElboTerms,
    pub lr: f64,
}

pub fn vae_log_csv(rows: &[VaeEpochLog]) -> String {
    let mut s = String::from("epoch,freelbo,recon,kl,freq,lr\n");
    for r in rows {
        let t = r.terms;
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", r.epoch, t.objective, t.recon, t.kl, t.freq, r.lr);
    }
    s
}

fn scale_grads(grads: &mut Grads, c: f64) {
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v * c);
    }
}

fn add_grads(acc: &mut Option<Grads>, g: Grads) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (k, v) in g {
                *a.get_mut(&k).expect("same parameter set") += &v;
            }
        }
    }
}

/// Maximizes the FreELBO (the ELBO when `η = 0`) with minibatch Adam and
/// plateau learning-rate decay.
pub fn train_vae(cfg: &RunConfig) -> Result<(ModelCheckpoint, Vec<VaeEpochLog>)> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    train_vae_on(cfg, &data.train)
}

pub fn train_vae_on(cfg: &RunConfig, train: &[PointCloud]) -> Result<(ModelCheckpoint, Vec<VaeEpochLog>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let streams = Streams::new(cfg.seed);
    let mut vae = Vae::new(&cfg.model, streams.seed_for(Purpose::Init, &[0]))?;
    let rect = if cfg.freq.eta > 0.0 { Some(FreqRectifier::new(&cfg.freq)?) } else { None };
    let mut sched = PlateauScheduler::new(cfg.train.vae_lr);
    let mut lr = cfg.train.vae_lr;
    let mut log = Vec::with_capacity(cfg.train.vae_epochs);
    for epoch in 1..=cfg.train.vae_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut streams.rng(Purpose::Shuffle, &[0, epoch as u64]));
        let mut sum = ElboTerms::default();
        for (b, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let (mut ge, mut gd) = (None, None);
            for &i in batch {
                let key = [epoch as u64, i as u64];
                let noise = normal_vec(&mut streams.rng(Purpose::Reparam, &key), cfg.model.latent_dim);
                let seed = streams.seed_for(Purpose::Subsample, &key);
                let (t, e, d) = objective_grads(&vae, &train[i], rect.as_ref(), &noise, seed)
                    .map_err(|err| step_error(err, epoch, b))?;
                sum.objective += t.objective;
                sum.recon += t.recon;
                sum.kl += t.kl;
                sum.freq += t.freq;
                add_grads(&mut ge, e);
                add_grads(&mut gd, d);
            }
            // ascent on the objective is descent on its negation
            let c = -1.0 / batch.len() as f64;
            let (mut ge, mut gd) = (ge.expect("non-empty batch"), gd.expect("non-empty batch"));
            scale_grads(&mut ge, c);
            scale_grads(&mut gd, c);
            vae.encoder.params.adam_step(&ge, lr, &cfg.train.adam).map_err(|err| step_error(err, epoch, b))?;
            vae.decoder.params.adam_step(&gd, lr, &cfg.train.adam).map_err(|err| step_error(err, epoch, b))?;
        }
        let n = train.len() as f64;
        let terms = ElboTerms {
            objective: sum.objective / n,
            recon: sum.recon / n,
            kl: sum.kl / n,
            freq: sum.freq / n,
        };
        info!(
            "vae epoch {epoch}: freelbo {:.4} recon {:.4} kl {:.4} freq {:.6} lr {lr:e}",
            terms.objective, terms.recon, terms.kl, terms.freq
        );
        log.push(VaeEpochLog { epoch, terms, lr });
        lr = sched.observe(-terms.objective);
    }
    Ok((
        ModelCheckpoint {
            config: cfg.clone(),
            stage: Stage::Vae,
            vae,
            prior: None,
        },
        log,
    ))
}

fn step_error(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {m}")),
        Error::NonFiniteGradient(m) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: gradient of `{m}`")),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// stage 2

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdpmEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn ddpm_log_csv(rows: &[DdpmEpochLog]) -> String {
    let mut s = String::from("epoch,loss,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?},{:?}", r.epoch, r.loss, r.lr);
    }
    s
}

/// Freezes the VAE of `stage1` and fits the latent prior to posterior draws
/// of the training shapes.
pub fn train_ddpm(cfg: &RunConfig, stage1: &ModelCheckpoint) -> Result<(ModelCheckpoint, Vec<DdpmEpochLog>)> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    train_ddpm_on(cfg, stage1, &data.train)
}

pub fn train_ddpm_on(cfg: &RunConfig, stage1: &ModelCheckpoint, train: &[PointCloud]) -> Result<(ModelCheckpoint, Vec<DdpmEpochLog>)> {
    cfg.validate()?;
    if stage1.stage != Stage::Vae {
        return Err(Error::StageMismatch {
            expected: Stage::Vae.label(),
            found: stage1.stage.label().into(),
        });
    }
    if cfg.model != stage1.config.model {
        return Err(Error::Config("model section differs from the stage-1 checkpoint".into()));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let streams = Streams::new(cfg.seed);
    let d = cfg.model.latent_dim;
    let posts = train
        .iter()
        .map(|c| stage1.vae.encoder.encode(c))
        .collect::<Result<Vec<_>>>()?;
    let sched = cfg.diffusion.schedule()?;
    let mut net = ScoreNet::new(d, &cfg.diffusion, streams.seed_for(Purpose::Init, &[1]))?;
    let mut plateau = PlateauScheduler::new(cfg.train.ddpm_lr);
    let mut lr = cfg.train.ddpm_lr;
    let mut log = Vec::with_capacity(cfg.train.ddpm_epochs);
    let draws = cfg.train.ddpm_draws;
    for epoch in 1..=cfg.train.ddpm_epochs {
        let mut z = Array2::zeros((posts.len() * draws, d));
        for (i, post) in posts.iter().enumerate() {
            let sigma = post.sigma();
            let mut rng = streams.rng(Purpose::Reparam, &[1, epoch as u64, i as u64]);
            for k in 0..draws {
                let eps = normal_vec(&mut rng, d);
                for j in 0..d {
                    z[[i * draws + k, j]] = post.mu[j] + sigma[j] * eps[j];
                }
            }
        }
        let mut order: Vec<usize> = (0..z.nrows()).collect();
        order.shuffle(&mut streams.rng(Purpose::Shuffle, &[1, epoch as u64]));
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.train.ddpm_batch_size).enumerate() {
            let zb = z.select(ndarray::Axis(0), batch);
            let seed = streams.seed_for(Purpose::Diffusion, &[0, epoch as u64, b as u64]);
            let (loss, g) = ddpm_loss_grads(&net, &zb, &sched, seed).map_err(|err| step_error(err, epoch, b))?;
            net.params.adam_step(&g, lr, &cfg.train.adam).map_err(|err| step_error(err, epoch, b))?;
            total += loss * batch.len() as f64;
        }
        let loss = total / z.nrows() as f64;
        info!("ddpm epoch {epoch}: loss {loss:.5} lr {lr:e}");
        log.push(DdpmEpochLog { epoch, loss, lr });
        lr = plateau.observe(loss);
    }
    Ok((
        ModelCheckpoint {
            config: cfg.clone(),
            stage: Stage::Full,
            vae: stage1.vae.clone(),
            prior: Some(net),
        },
        log,
    ))
}

// ---------------------------------------------------------------------------
// generation and evaluation

/// Where generation draws its latent codes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentPrior {
    /// The trained latent diffusion model.
    Diffusion,
    /// `N(0, I)`, the plain VAE prior.
    Gaussian,
}

/// Latent codes for `n_shapes` shapes.
pub fn sample_latents(ckpt: &ModelCheckpoint, prior: LatentPrior, n_shapes: usize, seed: u64) -> Result<Array2<f64>> {
    let streams = Streams::new(seed);
    match prior {
        LatentPrior::Diffusion => {
            let net = ckpt.require_prior()?;
            let sched = ckpt.config.diffusion.schedule()?;
            ancestral_sample_batch(net, &sched, n_shapes, streams.seed_for(Purpose::Diffusion, &[1]))
        }
        LatentPrior::Gaussian => Ok(normal_matrix(
            &mut streams.rng(Purpose::Diffusion, &[2]),
            n_shapes,
            ckpt.config.model.latent_dim,
        )),
    }
}

/// Decodes latent rows with fresh base draws of `n_points` each.
pub fn decode_latents(ckpt: &ModelCheckpoint, z: &Array2<f64>, n_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    if n_points == 0 {
        return Err(Error::InvalidParam("n_points must be at least 1".into()));
    }
    let streams = Streams::new(seed);
    z.rows()
        .into_iter()
        .enumerate()
        .map(|(i, zr)| {
            let base = normal_matrix(&mut streams.rng(Purpose::BaseNoise, &[i as u64]), n_points, 3);
            ckpt.vae.decoder.decode_cloud(&base, zr.as_slice().expect("contiguous row"))
        })
        .collect()
}

/// Samples latent codes from the diffusion prior and decodes each into
/// `n_points` points.
pub fn generate(ckpt: &ModelCheckpoint, n_shapes: usize, n_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    generate_with(ckpt, LatentPrior::Diffusion, n_shapes, n_points, seed)
}

pub fn generate_with(ckpt: &ModelCheckpoint, prior: LatentPrior, n_shapes: usize, n_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    let z = sample_latents(ckpt, prior, n_shapes, seed)?;
    decode_latents(ckpt, &z, n_points, seed)
}

/// Decodes the posterior mean of `cloud` with as many points as it has.
pub fn reconstruct(vae: &Vae, cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    let post = vae.encoder.encode(cloud)?;
    let base = normal_matrix(&mut Streams::new(seed).rng(Purpose::BaseNoise, &[0]), cloud.len(), 3);
    vae.decoder.decode_cloud(&base, &post.mu)
}

/// Reads both directories and scores the generated clouds against the
/// reference clouds.
pub fn evaluate(gen_dir: impl AsRef<Path>, ref_dir: impl AsRef<Path>, cfg: &MetricConfig) -> Result<Vec<MetricRow>> {
    let gen = read_cloud_dir(gen_dir)?;
    let reference = read_cloud_dir(ref_dir)?;
    if gen.len() < 2 || reference.len() < 2 {
        return Err(Error::InvalidParam(format!(
            "evaluation needs at least two clouds per side, got {} and {}",
            gen.len(),
            reference.len()
        )));
    }
    evaluate_sets(&gen, &reference, cfg)
}

/// Decodes evenly spaced points on the segment between the posterior means
/// of `a` and `b`, all from the same base draw. A single step decodes the
/// midpoint.
pub fn interpolate(ckpt: &ModelCheckpoint, a: &PointCloud, b: &PointCloud, steps: usize, n_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    if steps == 0 || n_points == 0 {
        return Err(Error::InvalidParam("steps and n_points must be at least 1".into()));
    }
    let za = ckpt.vae.encoder.encode(a)?.mu;
    let zb = ckpt.vae.encoder.encode(b)?.mu;
    let base = normal_matrix(&mut Streams::new(seed).rng(Purpose::BaseNoise, &[0]), n_points, 3);
    (0..steps)
        .map(|k| {
            let t = if steps == 1 { 0.5 } else { k as f64 / (steps - 1) as f64 };
            // exact at both ends, and constant when the endpoints agree
            let z: Vec<f64> = za
                .iter()
                .zip(&zb)
                .map(|(x, y)| if x == y { *x } else { (1.0 - t) * x + t * y })
                .collect();
            ckpt.vae.decoder.decode_cloud(&base, &z)
        })
        .collect()
}

/// Spectrum, rectified spectrum and grid samples of a cloud's
/// representative function.
#[derive(Clone, Debug, PartialEq)]
pub struct RectifyViz {
    pub spectrum: HarmonicSpectrum,
    pub rectified: HarmonicSpectrum,
    /// `(θ, φ, f(θ, φ))` on the quadrature grid.
    pub grid: Vec<(f64, f64, f64)>,
}

pub fn rectify_viz(cloud: &PointCloud, cfg: &FreqRectConfig) -> Result<RectifyViz> {
    let fr = FreqRectifier::new(cfg)?;
    let rep = fr.representative(cloud)?;
    let samples = rep.sample_grid(&fr.grid);
    let spectrum = crate::harmonics::analyze(&samples, &fr.grid)?;
    let rectified = fr.rect.rectify(&spectrum)?;
    let grid = fr.grid.nodes().into_iter().zip(samples).map(|((t, p), f)| (t, p, f)).collect();
    Ok(RectifyViz { spectrum, rectified, grid })
}

impl RectifyViz {
    pub fn grid_csv(&self) -> String {
        let mut s = String::from("theta,phi,f\n");
        for (t, p, f) in &self.grid {
            let _ = writeln!(s, "{t:?},{p:?},{f:?}");
        }
        s
    }

    /// Writes `<prefix>_spectrum.csv`, `<prefix>_rectified.csv` and
    /// `<prefix>_grid.csv`.
    pub fn write(&self, prefix: &str) -> Result<()> {
        self.spectrum.write_csv(format!("{prefix}_spectrum.csv"))?;
        self.rectified.write_csv(format!("{prefix}_rectified.csv"))?;
        let path = format!("{prefix}_grid.csv");
        std::fs::write(&path, self.grid_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests;
