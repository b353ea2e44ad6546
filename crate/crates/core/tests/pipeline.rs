use freqcloud::diffusion::ScoreNet;
use freqcloud::freq_rect::make_rectifiers;
use freqcloud::geometry::{synth_shape, Shape};
use freqcloud::metrics::{report_csv, MetricConfig};
use freqcloud::pipeline::*;
use freqcloud::rng::{Purpose, Streams};
use freqcloud::{Error, PointCloud};

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.data.train_shapes = 12;
    cfg.data.test_shapes = 4;
    cfg.data.points = 96;
    cfg.model.latent_dim = 8;
    cfg.model.encoder_widths = vec![16, 32];
    cfg.model.head_width = 32;
    cfg.model.field_width = 16;
    cfg.model.train_steps = 6;
    cfg.model.eval_steps = 10;
    cfg.model.likelihood_points = 48;
    cfg.freq.l_max = 8;
    cfg.freq.sigma_fre = 8.0;
    cfg.diffusion.steps = 40;
    cfg.diffusion.width = 32;
    cfg.diffusion.time_dim = 8;
    cfg.train.vae_epochs = 6;
    cfg.train.ddpm_epochs = 6;
    cfg.train.ddpm_draws = 8;
    cfg.train.ddpm_batch_size = 16;
    cfg
}

#[test]
fn training_improves_both_stages() {
    let cfg = small();
    let (s1, vae_log) = train_vae(&cfg).unwrap();
    let first = vae_log.first().unwrap().terms.objective;
    let last = vae_log.last().unwrap().terms.objective;
    assert!(last > first, "FreELBO {first} -> {last}");

    let (_, ddpm_log) = train_ddpm(&cfg, &s1).unwrap();
    let first = ddpm_log.first().unwrap().loss;
    let last = ddpm_log.last().unwrap().loss;
    assert!(last < first, "DDPM loss {first} -> {last}");
}

#[test]
fn ddpm_with_zero_epochs_keeps_the_initial_prior() {
    let mut cfg = small();
    cfg.train.vae_epochs = 0;
    cfg.train.ddpm_epochs = 0;
    let (s1, _) = train_vae(&cfg).unwrap();
    let (s2, log) = train_ddpm(&cfg, &s1).unwrap();
    assert!(log.is_empty());
    let init = ScoreNet::new(
        cfg.model.latent_dim,
        &cfg.diffusion,
        Streams::new(cfg.seed).seed_for(Purpose::Init, &[1]),
    )
    .unwrap();
    assert!(s2.prior.unwrap().params.values_bit_equal(&init.params));
}

#[test]
fn generation_accepts_any_cardinality() {
    let mut cfg = small();
    cfg.train.vae_epochs = 1;
    cfg.train.ddpm_epochs = 1;
    let (s1, _) = train_vae(&cfg).unwrap();
    let (s2, _) = train_ddpm(&cfg, &s1).unwrap();
    for n in [1, 16, 2048] {
        let clouds = generate(&s2, 2, n, 4).unwrap();
        assert!(clouds.iter().all(|c| c.len() == n));
    }
    assert!(matches!(generate(&s2, 1, 0, 4), Err(Error::InvalidParam(_))));
}

#[test]
fn interpolating_a_cloud_with_itself_is_constant() {
    let mut cfg = small();
    cfg.train.vae_epochs = 1;
    let (s1, _) = train_vae(&cfg).unwrap();
    let x = synth_shape(&Shape::bumpy(0.3), 96, 1).unwrap();
    let path = interpolate(&s1, &x, &x, 4, 50, 2).unwrap();
    assert!(path.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn evaluate_identical_and_disjoint_sets() {
    let data = synthetic_dataset(&small().data).unwrap();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    write_cloud_dir(dirs[0].path(), &data.train[..5]).unwrap();
    let far: Vec<PointCloud> = data.train[5..10]
        .iter()
        .map(|c| PointCloud::new(c.points().iter().map(|p| [p[0] + 50.0, p[1], p[2]]).collect()).unwrap())
        .collect();
    write_cloud_dir(dirs[1].path(), &far).unwrap();
    write_cloud_dir(dirs[2].path(), &data.train[..1]).unwrap();

    let cfg = MetricConfig::default();
    let same = evaluate(dirs[0].path(), dirs[0].path(), &cfg).unwrap();
    for row in &same {
        match row.metric {
            "MMD" => assert_eq!(row.value, 0.0),
            "COV" => assert_eq!(row.value, 1.0),
            _ => {}
        }
    }
    let apart = evaluate(dirs[0].path(), dirs[1].path(), &cfg).unwrap();
    assert!(apart.iter().filter(|r| r.metric == "1-NNA").all(|r| r.value == 100.0));
    assert!(report_csv(&apart).starts_with("metric,base_distance,value\n"));
    assert!(evaluate(dirs[0].path(), dirs[2].path(), &cfg).is_err());
}

#[test]
fn rectify_viz_of_a_sphere() {
    let cfg = small().freq;
    let sphere = synth_shape(&Shape::Sphere { radius: 1.0 }, 400, 3).unwrap();
    let viz = rectify_viz(&sphere, &cfg).unwrap();
    let share = viz.spectrum.get(0, 0).powi(2) / viz.spectrum.energy();
    assert!(share > 0.999, "{share}");

    let bumpy = synth_shape(&Shape::bumpy(0.3), 400, 3).unwrap();
    let viz = rectify_viz(&bumpy, &cfg).unwrap();
    let r = make_rectifiers(cfg.l_max, cfg.sigma_fre).unwrap();
    for (l, m, c) in viz.spectrum.iter() {
        let rc = viz.rectified.get(l, m);
        if l == cfg.l_max {
            assert_eq!(rc, c);
        }
        // the ratio is exactly r_l wherever the coefficient is not tiny
        if c.abs() > 1e-12 {
            assert!((rc / c - r.weights()[l]).abs() < 1e-12);
        }
    }
}
