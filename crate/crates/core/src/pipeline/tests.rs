use super::*;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.data.train_shapes = 4;
    cfg.data.test_shapes = 2;
    cfg.data.points = 64;
    cfg.model.latent_dim = 4;
    cfg.model.encoder_widths = vec![8];
    cfg.model.head_width = 8;
    cfg.model.field_width = 8;
    cfg.model.field_layers = 1;
    cfg.model.train_steps = 2;
    cfg.model.eval_steps = 2;
    cfg.model.likelihood_points = 16;
    cfg.freq.l_max = 4;
    cfg.freq.sigma_fre = 4.0;
    cfg.freq.recon_points = 32;
    cfg.diffusion.steps = 10;
    cfg.diffusion.width = 8;
    cfg.diffusion.blocks = 1;
    cfg.diffusion.time_dim = 4;
    cfg.train.vae_epochs = 2;
    cfg.train.ddpm_epochs = 2;
    cfg.train.batch_size = 2;
    cfg.train.ddpm_draws = 2;
    cfg
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn overrides_apply_and_validate() {
    let cfg = RunConfig::from_toml_with_overrides(
        "seed = 1\n[freq]\neta = 2.0\n",
        &["freq.eta=0".into(), "train.vae_epochs=5".into(), "data.path=some/dir".into()],
    )
    .unwrap();
    assert_eq!(cfg.freq.eta, 0.0);
    assert_eq!(cfg.train.vae_epochs, 5);
    assert_eq!(cfg.data.path, "some/dir");
    assert!(RunConfig::from_toml_with_overrides("", &["model.latent_dim=0".into()]).is_err());
    assert!(RunConfig::from_toml_with_overrides("", &["noequals".into()]).is_err());
    assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
}

#[test]
fn synthetic_data_is_deterministic_and_normalized() {
    let cfg = tiny().data;
    let a = synthetic_dataset(&cfg).unwrap();
    assert_eq!(a, synthetic_dataset(&cfg).unwrap());
    assert_eq!((a.train.len(), a.test.len()), (4, 2));
    for c in a.train.iter().chain(&a.test) {
        assert_eq!(c.len(), 64);
        let rmax = c.radii().into_iter().fold(0.0, f64::max);
        assert!((rmax - 1.0).abs() < 1e-12, "{rmax}");
    }
    assert_ne!(a.train[0], a.train[1]);
}

#[test]
fn cloud_dir_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(&tiny().data).unwrap();
    write_cloud_dir(dir.path(), &data.train).unwrap();
    std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
    let back = read_cloud_dir(dir.path()).unwrap();
    assert_eq!(back, data.train);
}

#[test]
fn zero_epochs_equals_initialization() {
    let mut cfg = tiny();
    cfg.train.vae_epochs = 0;
    let (ck, log) = train_vae(&cfg).unwrap();
    assert!(log.is_empty());
    let init = Vae::new(&cfg.model, Streams::new(cfg.seed).seed_for(Purpose::Init, &[0])).unwrap();
    assert!(ck.vae.encoder.params.values_bit_equal(&init.encoder.params));
    assert!(ck.vae.decoder.params.values_bit_equal(&init.decoder.params));
}

#[test]
fn full_pipeline_is_deterministic_and_freezes_the_vae() {
    let cfg = tiny();
    let (s1, log1) = train_vae(&cfg).unwrap();
    let (s1b, _) = train_vae(&cfg).unwrap();
    assert_eq!(s1.to_bytes(), s1b.to_bytes());
    assert_eq!(log1.len(), 2);
    assert!(log1.iter().all(|r| r.terms.objective.is_finite() && r.terms.freq >= 0.0));

    let (s2, log2) = train_ddpm(&cfg, &s1).unwrap();
    assert_eq!(log2.len(), 2);
    assert!(s2.vae.encoder.params.values_bit_equal(&s1.vae.encoder.params));
    assert!(s2.vae.decoder.params.values_bit_equal(&s1.vae.decoder.params));

    let a = generate(&s2, 3, 50, 9).unwrap();
    let b = generate(&s2, 3, 50, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|c| c.len() == 50));
    assert_ne!(a, generate(&s2, 3, 50, 10).unwrap());
}

#[test]
fn stages_are_enforced() {
    let cfg = tiny();
    let mut c = cfg.clone();
    c.train.ddpm_epochs = 1;
    c.train.vae_epochs = 0;
    let (s1, _) = train_vae(&c).unwrap();
    assert!(matches!(generate(&s1, 1, 10, 0), Err(Error::StageMismatch { .. })));
    let (s2, _) = train_ddpm(&c, &s1).unwrap();
    assert!(matches!(train_ddpm(&c, &s2), Err(Error::StageMismatch { .. })));
    // a stage-1 checkpoint still samples from N(0, I)
    assert_eq!(generate_with(&s1, LatentPrior::Gaussian, 2, 10, 0).unwrap().len(), 2);
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = tiny();
    cfg.train.vae_epochs = 1;
    cfg.train.ddpm_epochs = 1;
    let (s1, _) = train_vae(&cfg).unwrap();
    let (s2, _) = train_ddpm(&cfg, &s1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ck in [&s1, &s2] {
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back.stage, ck.stage);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(ModelCheckpoint::load(&path).is_err());
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let mut cfg = tiny();
    cfg.train.vae_epochs = 0;
    let (s1, _) = train_vae(&cfg).unwrap();
    let data = synthetic_dataset(&cfg.data).unwrap();
    let (a, b) = (&data.train[0], &data.train[1]);
    let path = interpolate(&s1, a, b, 3, 20, 1).unwrap();
    assert_eq!(path.len(), 3);
    let base = normal_matrix(&mut Streams::new(1).rng(Purpose::BaseNoise, &[0]), 20, 3);
    let za = s1.vae.encoder.encode(a).unwrap().mu;
    assert_eq!(path[0], s1.vae.decoder.decode_cloud(&base, &za).unwrap());
    let zb = s1.vae.encoder.encode(b).unwrap().mu;
    assert_eq!(path[2], s1.vae.decoder.decode_cloud(&base, &zb).unwrap());
    let mid = interpolate(&s1, a, b, 1, 20, 1).unwrap();
    assert_eq!(mid[0], path[1]);
    assert!(interpolate(&s1, a, b, 0, 20, 1).is_err());
}

#[test]
fn evaluate_reads_directories() {
    let data = synthetic_dataset(&tiny().data).unwrap();
    let (g, r) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_cloud_dir(g.path(), &data.train[..3]).unwrap();
    write_cloud_dir(r.path(), &data.train[1..4]).unwrap();
    let rows = evaluate(g.path(), r.path(), &MetricConfig::default()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.value.is_finite()));
}

#[test]
fn rectify_viz_outputs() {
    let cfg = tiny();
    let data = synthetic_dataset(&cfg.data).unwrap();
    let viz = rectify_viz(&data.train[0], &cfg.freq).unwrap();
    assert_eq!(viz.grid.len(), crate::harmonics::QuadratureGrid::new(cfg.freq.l_max).nodes().len());
    let w = make_rect_weights(&cfg.freq);
    for (i, (r, s)) in viz.rectified.coeffs().iter().zip(viz.spectrum.coeffs()).enumerate() {
        assert!((r - w[i] * s).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("viz");
    viz.write(prefix.to_str().unwrap()).unwrap();
    for suffix in ["_spectrum.csv", "_rectified.csv", "_grid.csv"] {
        assert!(dir.path().join(format!("viz{suffix}")).exists());
    }
}

fn make_rect_weights(cfg: &FreqRectConfig) -> Vec<f64> {
    crate::freq_rect::make_rectifiers(cfg.l_max, cfg.sigma_fre).unwrap().coeff_weights()
}
