//! Acceptance gate: one test per criterion, each printing a single
//! `[PASS]`/`[FAIL]` line (visible with `--nocapture`) before asserting.
//! Tolerances are part of the contract — do not loosen them.

#![allow(clippy::field_reassign_with_default)] // configs are mutated builder-style

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use m3s::attention::{
    injected_attention, standard_attention, AttentionFeatures, InjectionConfig, InjectionMode,
    ReferenceFeatures,
};
use m3s::backend::toy::ToyDenoiser;
use m3s::backend::{DenoiserBackend, StandardAttentionHook};
use m3s::cache::FeatureCache;
use m3s::error::M3sError;
use m3s::evaluate::{
    cosine_similarity, gram_distance, gram_matrix, FeatureExtractor, SeededConvExtractor,
};
use m3s::guidance::{combine, omega2_at, GuidanceConfig, OmegaRamp};
use m3s::image_io::{clamp_unit, write_png};
use m3s::modulation::{adain, joint_adain, StyleBlendConfig};
use m3s::pipeline::{
    brighten, prepare, sweep, synthesize, vanilla_sample, RunConfig, SweepAxis,
};
use m3s::reference::invert_reference;
use m3s::regulation::{edge_loss_gradient, image_edge_loss, regulate, RegulationConfig};
use m3s::scheduler::{
    add_noise, ddim_invert_step, ddim_step, default_schedule, timestep_grid, tweedie_estimate,
    LatentState, Role, Timestep, DEFAULT_TRAIN_STEPS,
};

fn report(criterion: usize, what: &str, ok: bool) {
    println!(
        "[{}] criterion {criterion:02}: {what}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {what}");
}

fn max_abs(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn normal3(rng: &mut ChaCha12Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

fn normal2(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn channel_stats(x: &Array3<f64>, c: usize) -> (f64, f64) {
    let plane = x.index_axis(ndarray::Axis(0), c);
    let n = plane.len() as f64;
    let mean = plane.sum() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Write a deterministic toy-decodable reference image and return its path.
fn write_reference(dir: &Path, name: &str, seed: u64, backend: &ToyDenoiser) -> PathBuf {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z = normal3(&mut rng, backend.latent_shape());
    let img = clamp_unit(&backend.decode(&z).unwrap());
    let path = dir.join(name);
    write_png(&path, &img).unwrap();
    path
}

#[test]
fn criterion_01_duplication_identity() {
    // operation level: smoothing with lambda = 1 duplicates the target's
    // own K/V, and softmax duplication invariance keeps the output equal
    // to plain attention across randomized shapes and seeds
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let tq = rng.random_range(1..=6);
        let tk = rng.random_range(1..=6);
        let dk = rng.random_range(1..=6);
        let dv = rng.random_range(1..=6);
        let target = AttentionFeatures::new(
            normal2(&mut rng, tq, dk),
            normal2(&mut rng, tk, dk),
            normal2(&mut rng, tk, dv),
        )
        .unwrap();
        let refs: Vec<ReferenceFeatures> = (0..rng.random_range(1..=3))
            .map(|_| ReferenceFeatures {
                k: normal2(&mut rng, tk, dk),
                v: normal2(&mut rng, tk, dv),
                q: None,
            })
            .collect();
        let cfg = InjectionConfig {
            mode: InjectionMode::ConcatSmoothed,
            lambda: 1.0,
            ..Default::default()
        };
        let injected = injected_attention(&target, &refs, &cfg).unwrap();
        let plain = standard_attention(&target).unwrap();
        let diff = injected
            .iter()
            .zip(plain.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    let op_ok = worst < 1e-6;

    // end to end: a fully smoothed run equals the no-injection run
    let b = ToyDenoiser::default();
    let dir = tempfile::tempdir().unwrap();
    let r0 = write_reference(dir.path(), "r0.png", 7, &b);
    let mut cfg = RunConfig::default();
    cfg.prompt = "a sketch of a fishing boat".into();
    cfg.references = vec![r0];
    cfg.injection.mode = InjectionMode::ConcatSmoothed;
    cfg.injection.lambda = 1.0;
    let smoothed = synthesize(&cfg, &b).unwrap();
    cfg.injection.mode = InjectionMode::None;
    let plain = synthesize(&cfg, &b).unwrap();
    let e2e_diff = max_abs(&smoothed.image, &plain.image);

    report(
        1,
        "full smoothing equals plain attention (op < 1e-6, end-to-end < 1e-5)",
        op_ok && e2e_diff < 1e-5,
    );
}

#[test]
fn criterion_02_cfg_degeneration() {
    // combine with zero style weight is classic classifier-free guidance,
    // bitwise, for a spread of content weights
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut combine_ok = true;
    for w1 in [0.0, 1.0, 7.5, 15.0] {
        let u = normal3(&mut rng, (3, 5, 4));
        let c = normal3(&mut rng, (3, 5, 4));
        let s = normal3(&mut rng, (3, 5, 4));
        let got = combine(&u, &c, &s, w1, 0.0).unwrap();
        let mut classic = u.clone();
        ndarray::Zip::from(&mut classic)
            .and(&c)
            .and(&u)
            .for_each(|o, &cc, &uu| *o += w1 * (cc - uu));
        combine_ok &= got == classic;
    }

    // full pipeline with every style mechanism off reproduces the vanilla
    // sampler bitwise
    let b = ToyDenoiser::default();
    let mut cfg = RunConfig::default();
    cfg.prompt = "a lone oak tree".into();
    cfg.guidance.omega2_max = 0.0;
    let full = synthesize(&cfg, &b).unwrap();
    let plain = vanilla_sample(&cfg, &b).unwrap();

    report(
        2,
        "zero style weight degenerates to classic guidance, bitwise",
        combine_ok && full.image == plain,
    );
}

#[test]
fn criterion_03_adain_statistics() {
    let shapes = [(1, 4, 4), (2, 8, 8), (3, 5, 7), (4, 8, 8), (2, 6, 3)];
    let mut stats_ok = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
        let shape = shapes[seed as usize % shapes.len()];
        let x = normal3(&mut rng, shape);
        let y = normal3(&mut rng, shape);
        let out = adain(&x, &y).unwrap();
        for c in 0..shape.0 {
            let (m_out, s_out) = channel_stats(&out, c);
            let (m_y, s_y) = channel_stats(&y, c);
            stats_ok &= (m_out - m_y).abs() < 1e-5 && (s_out - s_y).abs() < 1e-5;
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(2000);
    let x = normal3(&mut rng, (3, 6, 6));
    let self_ok = max_abs(&adain(&x, &x).unwrap(), &x) < 1e-12;

    // boundary weights collapse to the single-reference restyle, bitwise
    let z = LatentState::new(normal3(&mut rng, (2, 5, 5)), Timestep::Noisy(300), Role::Target)
        .unwrap();
    let r1 = LatentState::new(
        normal3(&mut rng, (2, 5, 5)),
        Timestep::Noisy(300),
        Role::Reference,
    )
    .unwrap();
    let r2 = LatentState::new(
        normal3(&mut rng, (2, 5, 5)),
        Timestep::Noisy(300),
        Role::Reference,
    )
    .unwrap();
    let single = StyleBlendConfig {
        eta: vec![1.0],
        ..Default::default()
    };
    let pair = StyleBlendConfig {
        eta: vec![1.0, 0.0],
        ..Default::default()
    };
    let direct = adain(&z.data, &r1.data).unwrap();
    let via_single = joint_adain(&z, &[&r1], &single).unwrap();
    let via_pair = joint_adain(&z, &[&r1, &r2], &pair).unwrap();
    let boundary_ok = via_single.data == direct && via_pair.data == direct;

    report(
        3,
        "adain matches style statistics (1e-5), self-restyle is identity, boundary weights collapse bitwise",
        stats_ok && self_ok && boundary_ok,
    );
}

#[test]
fn criterion_04_inversion_round_trip() {
    let b = ToyDenoiser::default();
    let schedule = default_schedule(DEFAULT_TRAIN_STEPS).unwrap();
    let grid = timestep_grid(DEFAULT_TRAIN_STEPS, 100).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let img = clamp_unit(&b.decode(&normal3(&mut rng, b.latent_shape())).unwrap());
    let bundle = invert_reference(0, &img, &b, &schedule, &grid).unwrap();
    let null = b.null_conditioning();

    // walk back down the 100-step grid, querying the backbone exactly as
    // the matching ascent did (destination latent, upper timestep)
    let mut cur = bundle
        .state_at(Timestep::Noisy(grid.first()))
        .unwrap()
        .clone();
    for (t_hi, t_lo) in grid.transitions() {
        let anchor = bundle.state_at(t_lo).unwrap();
        let eps = b
            .predict_noise(&anchor.data, t_hi, &null, &mut StandardAttentionHook)
            .unwrap();
        cur = ddim_step(&cur, &eps, t_lo, &schedule).unwrap();
    }
    let clean = bundle.state_at(Timestep::Clean).unwrap();
    let grid_err = max_abs(&cur.data, &clean.data);

    // single invert/step composition under one fixed prediction
    let z = LatentState::new(normal3(&mut rng, (4, 8, 8)), Timestep::Noisy(500), Role::Target)
        .unwrap();
    let eps = normal3(&mut rng, (4, 8, 8));
    let up = ddim_invert_step(&z, &eps, Timestep::Noisy(600), &schedule).unwrap();
    let down = ddim_step(&up, &eps, Timestep::Noisy(500), &schedule).unwrap();
    let single_err = max_abs(&down.data, &z.data);

    report(
        4,
        "inversion round trips (grid < 1e-4, single step < 1e-6)",
        grid_err < 1e-4 && single_err < 1e-6,
    );
}

#[test]
fn criterion_05_tweedie_exactness() {
    let schedule = default_schedule(DEFAULT_TRAIN_STEPS).unwrap();
    let grid = timestep_grid(DEFAULT_TRAIN_STEPS, 100).unwrap();
    let mut ok = true;
    for (i, &t) in grid.steps().iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(3000 + i as u64);
        let z0 = LatentState::new(normal3(&mut rng, (2, 6, 6)), Timestep::Clean, Role::Target)
            .unwrap();
        let eps = normal3(&mut rng, (2, 6, 6));
        let noisy = add_noise(&z0, &eps, Timestep::Noisy(t), &schedule).unwrap();
        let back = tweedie_estimate(&noisy, &eps, &schedule).unwrap();
        ok &= max_abs(&back.data, &z0.data) < 1e-6;
    }
    report(5, "tweedie inverts forward noising at every grid timestep (1e-6)", ok);
}

#[test]
fn criterion_06_regulation_descent() {
    // five smooth low-frequency plates, the kind of soft shading the
    // regulation step is meant to burn off
    let plates: Vec<Array3<f64>> = (0..5)
        .map(|k| {
            let (h, w) = (8usize, 8usize);
            let kf = k as f64;
            let mut img = Array3::zeros((1, h, w));
            for i in 0..h {
                for j in 0..w {
                    let x = j as f64 / (w - 1) as f64;
                    let y = i as f64 / (h - 1) as f64;
                    let ramp = (x + y - 1.0) * (0.9 - 0.1 * kf);
                    let lobe = 0.25 * ((x - 0.3 - 0.1 * kf) * 6.0).tanh();
                    img[[0, i, j]] = (ramp + lobe).clamp(-1.0, 1.0);
                }
            }
            img
        })
        .collect();

    let b = ToyDenoiser::default();
    let cfg = RegulationConfig {
        enabled: true,
        gamma: 60.0,
        clamp: 1e-3,
        active_window: (0.0, 1.0),
    };
    let mut descent_ok = true;
    let mut clamp_ok = true;
    let mut exact_ok = true;
    for img in &plates {
        let z0 = LatentState::new(b.encode(img).unwrap(), Timestep::Clean, Role::Z0Estimate)
            .unwrap();
        let before = image_edge_loss(&b.decode(&z0.data).unwrap()).unwrap();
        let stepped = regulate(&z0, &b, &cfg).unwrap();
        let after = image_edge_loss(&b.decode(&stepped.data).unwrap()).unwrap();
        descent_ok &= after <= before + 1e-9;

        // the clamped image-space gradient is what enters the pullback:
        // recompute the update by hand and verify both the bound and the
        // exact arithmetic
        let decoded = b.decode(&z0.data).unwrap();
        let grad = edge_loss_gradient(&decoded).unwrap();
        let clamped = grad.mapv(|v| v.clamp(-cfg.clamp, cfg.clamp));
        clamp_ok &= clamped.iter().all(|v| v.abs() <= cfg.clamp);
        clamp_ok &= grad.iter().any(|v| v.abs() > cfg.clamp); // the clamp engages
        let pulled = b.decode_vjp(&z0.data, &clamped).unwrap();
        let expected = &z0.data - &pulled.mapv(|v| v * cfg.gamma);
        exact_ok &= stepped.data == expected;
    }

    // gamma = 0 and disabled configurations are bitwise no-ops
    let z0 = LatentState::new(b.encode(&plates[0]).unwrap(), Timestep::Clean, Role::Z0Estimate)
        .unwrap();
    let zero_gamma = RegulationConfig {
        gamma: 0.0,
        ..cfg
    };
    let disabled = RegulationConfig {
        enabled: false,
        ..cfg
    };
    let noop_ok = regulate(&z0, &b, &zero_gamma).unwrap().data == z0.data
        && regulate(&z0, &b, &disabled).unwrap().data == z0.data;

    report(
        6,
        "regulation never raises the edge loss (1e-9), clamps elementwise, gamma 0 is identity",
        descent_ok && clamp_ok && exact_ok && noop_ok,
    );
}

#[test]
fn criterion_07_omega2_ramp_endpoints() {
    let mut ok = true;
    for w2 in [15.0, 25.0] {
        let cfg = GuidanceConfig {
            omega2_max: w2,
            ramp: OmegaRamp::LinearThird,
            ..Default::default()
        };
        ok &= omega2_at(&cfg, 0, 100).unwrap() == w2 / 3.0;
        ok &= omega2_at(&cfg, 99, 100).unwrap() == w2;
    }
    report(7, "style ramp endpoints are exactly w2/3 and w2 for w2 in {15, 25}", ok);
}

#[test]
fn criterion_08_brightening() {
    // pixel grid spanning [-1, 1] in steps of 0.05
    let values: Vec<f64> = (0..=40).map(|i| -1.0 + 0.05 * i as f64).collect();
    let img = Array3::from_shape_vec((1, 1, values.len()), values.clone()).unwrap();
    let lit = brighten(&img, 0.7).unwrap();
    let mut ok = true;
    for (i, &v) in values.iter().enumerate() {
        let expect = if v > 0.7 { 1.0 } else { v };
        ok &= lit[[0, 0, i]] == expect;
    }
    ok &= brighten(&lit, 0.7).unwrap() == lit;
    report(8, "brightening matches the 0.7 threshold rule across [-1, 1] and is idempotent", ok);
}

#[test]
fn criterion_09_determinism() {
    let b = ToyDenoiser::default();
    let dir = tempfile::tempdir().unwrap();
    let r0 = write_reference(dir.path(), "r0.png", 31, &b);
    let r1 = write_reference(dir.path(), "r1.png", 32, &b);
    let mut cfg = RunConfig::default();
    cfg.prompt = "a mountain hut in heavy pencil".into();
    cfg.references = vec![r0, r1];
    cfg.injection.mode = InjectionMode::ConcatSmoothed;
    cfg.blend.eta = vec![0.6, 0.4];

    let out_a = dir.path().join("a.png");
    let out_b = dir.path().join("b.png");
    write_png(&out_a, &synthesize(&cfg, &b).unwrap().image).unwrap();
    write_png(&out_b, &synthesize(&cfg, &b).unwrap().image).unwrap();
    let png_ok = std::fs::read(&out_a).unwrap() == std::fs::read(&out_b).unwrap();

    // feature cache serialization round-trips bitwise, in memory and on disk
    let prepared = prepare(&cfg, &b).unwrap();
    let bytes = prepared.cache.to_bytes();
    let reloaded = FeatureCache::from_bytes(&bytes).unwrap();
    let cache_path = dir.path().join("refs.m3sfc");
    prepared.cache.save(&cache_path).unwrap();
    let from_disk = FeatureCache::load(&cache_path).unwrap();
    let cache_ok = reloaded.to_bytes() == bytes && from_disk.to_bytes() == bytes;

    report(9, "identical configs emit identical PNGs; cache bytes round-trip", png_ok && cache_ok);
}

#[test]
fn criterion_10_sweep_structure() {
    let b = ToyDenoiser::default();
    let dir = tempfile::tempdir().unwrap();
    let r0 = write_reference(dir.path(), "r0.png", 41, &b);
    let r1 = write_reference(dir.path(), "r1.png", 42, &b);
    let mut base = RunConfig::default();
    base.prompt = "a cart on a dirt road".into();
    base.references = vec![r0, r1];
    base.injection.mode = InjectionMode::ConcatSmoothed;
    base.steps = 25;
    let prepared = prepare(&base, &b).unwrap();

    let lambda_values = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 1.0];
    let panels = sweep(&base, SweepAxis::Lambda, &lambda_values, &b, &prepared).unwrap();
    let lambda_ok = panels.len() == 7
        && panels
            .iter()
            .zip(&lambda_values)
            .all(|(p, &v)| p.value == v && p.result.config_echo.injection.lambda == v)
        && panels.windows(2).all(|w| w[0].value < w[1].value);

    let eta_values = [0.0, 0.25, 0.5, 0.75, 1.0];
    let panels = sweep(&base, SweepAxis::Eta, &eta_values, &b, &prepared).unwrap();
    let eta_ok = panels.len() == 5
        && panels
            .iter()
            .zip(&eta_values)
            .all(|(p, &v)| {
                p.value == v && p.result.config_echo.blend.eta == vec![v, 1.0 - v]
            })
        && panels.windows(2).all(|w| w[0].value < w[1].value);

    report(
        10,
        "lambda sweep emits 7 ordered panels and eta sweep 5, with faithful metadata",
        lambda_ok && eta_ok,
    );
}

#[test]
fn criterion_11_metric_sanity() {
    let ex = SeededConvExtractor::default();
    let mut rng = ChaCha12Rng::seed_from_u64(51);
    let a = normal3(&mut rng, (1, 8, 8));
    let b = normal3(&mut rng, (1, 8, 8));

    let self_ok = gram_distance(&a, &a, &ex).unwrap() == 0.0;
    let ab = gram_distance(&a, &b, &ex).unwrap();
    let ba = gram_distance(&b, &a, &ex).unwrap();
    let sym_ok = (ab - ba).abs() < 1e-12 && ab >= 0.0;

    // hand case: feature maps are the images themselves; grams are [[1]]
    // and [[4]], so the distance is 9
    struct Identity;
    impl FeatureExtractor for Identity {
        fn features(&self, image: &Array3<f64>) -> m3s::error::Result<Vec<Array3<f64>>> {
            Ok(vec![image.clone()])
        }
        fn embed(&self, _image: &Array3<f64>) -> m3s::error::Result<Array1<f64>> {
            Ok(Array1::ones(2))
        }
        fn embed_text(&self, _prompt: &str) -> m3s::error::Result<Array1<f64>> {
            Ok(Array1::ones(2))
        }
    }
    let ones = Array3::ones((1, 2, 2));
    let twos = &ones * 2.0;
    let hand_ok = gram_distance(&ones, &twos, &Identity).unwrap() == 9.0
        && gram_matrix(&ones).unwrap()[[0, 0]] == 1.0;

    let x = Array1::from_vec(vec![0.5, -1.5, 2.0]);
    let cos_ok = (cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12
        && (cosine_similarity(&x, &x.mapv(|v| -v)).unwrap() + 1.0).abs() < 1e-12
        && matches!(
            cosine_similarity(&x, &Array1::zeros(3)),
            Err(M3sError::InvalidInput(_))
        );

    report(
        11,
        "gram distance is zero on self, symmetric, matches the hand oracle; cosine endpoints hold",
        self_ok && sym_ok && hand_ok && cos_ok,
    );
}
