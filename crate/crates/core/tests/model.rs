use muse_core::autodiff::Graph;
use muse_core::gradcheck::{grad_check, GradCheckConfig};
use muse_core::kernels::Conv2dOptions;
use muse_core::model::{count_params, ForwardOverrides, ModelConfig, ModelInput, Muse, ShapeLedger};
use muse_core::nn::Conv2d;
use muse_core::params::ParamStore;
use muse_core::spectral::{istft_complex, stft_complex};
use muse_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn run(model: &Muse, store: &ParamStore, wave: &[f64], ov: ForwardOverrides) -> Vec<f64> {
    let input = ModelInput::from_waves(&[wave], &model.cfg.stft).unwrap();
    let mut g = Graph::default();
    g.bind_params(store);
    let out = model.forward(&mut g, &input, &ov).unwrap();
    g.value(out.wave).data().to_vec()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    num / b.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

#[test]
fn layer_parameter_counts() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Conv2d::pointwise(&mut store, &mut rng, "pw", 16, 16);
    assert_eq!(count_params(&store), 272);
    let mut store = ParamStore::new();
    Conv2d::new(&mut store, &mut rng, "dw", 16, 16, (3, 3), Conv2dOptions::default().groups(16), true);
    assert_eq!(count_params(&store), 160);
}

#[test]
fn default_model_fits_parameter_budget() {
    let (_, store) = Muse::new(ModelConfig::default(), 0).unwrap();
    let n = count_params(&store);
    assert!((460_000..=560_000).contains(&n), "{n}");
    let total: usize = store.breakdown(1).iter().map(|(_, c)| c).sum();
    assert_eq!(total, n);
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::default();
    cfg.dilations = vec![1, 2, 4];
    assert!(Muse::new(cfg, 0).is_err());
    let mut cfg = ModelConfig::default();
    cfg.heads = 5;
    assert!(Muse::new(cfg, 0).is_err());
    let mut cfg = ModelConfig::default();
    cfg.stage_multipliers = vec![1, 2];
    assert!(Muse::new(cfg, 0).is_err());
}

#[test]
fn input_encoder_shape_on_full_spectrogram() {
    let (model, store) = Muse::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::default();
    g.bind_params(&store);
    let x = g.constant(rand_tensor(&[1, 2, 308, 256], 2));
    let y = model.encoder.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 308, 256]);
}

#[test]
fn stride_arithmetic_and_ledger_crop() {
    let (model, store) = Muse::new(ModelConfig::micro(), 3).unwrap();
    let mut g = Graph::default();
    g.bind_params(&store);
    let mut ledger = ShapeLedger::default();
    let x0 = g.constant(rand_tensor(&[1, 4, 308, 256], 4));
    ledger.record(0, 308, 256);
    let x1 = model.downsample(&mut g, 1, x0).unwrap();
    assert_eq!(g.shape(x1), &[1, 8, 154, 128]);
    ledger.record(1, 154, 128);
    let x2 = model.downsample(&mut g, 2, x1).unwrap();
    assert_eq!(g.shape(x2), &[1, 12, 77, 64]);
    let u1 = model.upsample(&mut g, 1, x2, &ledger).unwrap();
    assert_eq!(g.shape(u1), &[1, 8, 154, 128]);
    let u0 = model.upsample(&mut g, 0, u1, &ledger).unwrap();
    assert_eq!(g.shape(u0), &[1, 4, 308, 256]);

    // Odd sizes: 77 -> 39 -> 78, cropped back to 77.
    let mut ledger = ShapeLedger::default();
    ledger.record(1, 77, 9);
    let odd = g.constant(rand_tensor(&[1, 8, 77, 9], 5));
    let down = model.downsample(&mut g, 2, odd).unwrap();
    assert_eq!(g.shape(down), &[1, 12, 39, 5]);
    let up = model.upsample(&mut g, 1, down, &ledger).unwrap();
    assert_eq!(g.shape(up), &[1, 8, 77, 9]);

    let missing = model.upsample(&mut g, 0, up, &ledger);
    assert!(matches!(missing, Err(Error::InvalidArgument { .. })));
}

#[test]
fn dense_block_receptive_field_is_31_frames() {
    let (model, store) = Muse::new(ModelConfig::micro(), 6).unwrap();
    let (t, f, c) = (64, 5, 4);
    let centre = 32;
    let response = |x: Tensor| {
        let mut g = Graph::default();
        g.bind_params(&store);
        let xv = g.constant(x);
        // The encoder's dense block sits after its 1×1 conv, norm and PReLU,
        // which are all position-local.
        let y = model.encoder.forward(&mut g, xv).unwrap();
        g.value(y).clone()
    };
    let base = response(Tensor::zeros(&[1, 2, t, f]));
    let mut imp = Tensor::zeros(&[1, 2, t, f]);
    imp.set(&[0, 0, centre, 2], 1.0);
    imp.set(&[0, 1, centre, 2], -0.7);
    let hit = response(imp);
    let touched: Vec<usize> = (0..t)
        .filter(|&tt| (0..c).any(|ch| (0..f).any(|ff| hit.get(&[0, ch, tt, ff]) != base.get(&[0, ch, tt, ff]))))
        .collect();
    assert_eq!(touched.first(), Some(&(centre - 15)));
    assert_eq!(touched.last(), Some(&(centre + 15)));
    assert_eq!(touched.len(), 31);
}

#[test]
fn identity_path_reproduces_round_trip() {
    for (cfg, len) in [(ModelConfig::micro(), 301), (ModelConfig::default(), 2000)] {
        let (model, store) = Muse::new(cfg.clone(), 7).unwrap();
        let wave = noise(len, 8);
        let ov = ForwardOverrides {
            unit_mask: true,
            input_phase: true,
            ..Default::default()
        };
        let out = run(&model, &store, &wave, ov);
        let (spec, frames) = stft_complex(&wave, &cfg.stft).unwrap();
        let re: Vec<f64> = spec.iter().map(|c| c.re).collect();
        let im: Vec<f64> = spec.iter().map(|c| c.im).collect();
        let rt = istft_complex(&re, &im, frames, &cfg.stft, len).unwrap();
        assert_eq!(out.len(), len);
        assert!(max_rel(&out, &rt) < 1e-6, "{}", max_rel(&out, &rt));
    }
}

#[test]
fn output_length_matches_input() {
    let (model, store) = Muse::new(ModelConfig::micro(), 9).unwrap();
    for len in [14, 15, 99, 30700] {
        let out = run(&model, &store, &noise(len, len as u64), ForwardOverrides::default());
        assert_eq!(out.len(), len);
        assert!(out.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn default_model_forward_is_finite_and_silent_on_silence() {
    let (model, store) = Muse::new(ModelConfig::default(), 10).unwrap();
    let out = run(&model, &store, &noise(1600, 11), ForwardOverrides::default());
    assert_eq!(out.len(), 1600);
    assert!(out.iter().all(|v| v.is_finite()));
    let silent = run(&model, &store, &vec![0.0; 1600], ForwardOverrides::default());
    assert!(silent.iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn heads_produce_valid_mask_and_phase() {
    let (model, store) = Muse::new(ModelConfig::micro(), 12).unwrap();
    let input = ModelInput::from_waves(&[&noise(200, 13), &noise(200, 14)], &model.cfg.stft).unwrap();
    let mut g = Graph::default();
    g.bind_params(&store);
    let out = model.forward(&mut g, &input, &ForwardOverrides::default()).unwrap();
    let beta = model.cfg.mask_beta;
    assert!(g.value(out.mask).data().iter().all(|&m| (0.0..=beta).contains(&m)));
    assert!(g.value(out.mag).data().iter().all(|&m| m >= 0.0));
    let pi = std::f64::consts::PI;
    assert!(g.value(out.phase).data().iter().all(|&p| p > -pi && p <= pi));
    assert_eq!(g.shape(out.wave), &[2, 200]);
}

#[test]
fn skip_connections_are_live() {
    let (model, store) = Muse::new(ModelConfig::micro(), 15).unwrap();
    let wave = noise(120, 16);
    let base = run(&model, &store, &wave, ForwardOverrides::default());
    for s in 0..2 {
        let ov = ForwardOverrides {
            drop_skip: Some(s),
            ..Default::default()
        };
        let dropped = run(&model, &store, &wave, ov);
        assert!(max_rel(&dropped, &base) > 1e-6, "skip {s} has no effect");
    }
}

#[test]
fn construction_and_forward_are_deterministic() {
    let (m1, s1) = Muse::new(ModelConfig::micro(), 17).unwrap();
    let (_, s2) = Muse::new(ModelConfig::micro(), 17).unwrap();
    for ((n1, t1), (n2, t2)) in s1.iter().zip(s2.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data());
    }
    let wave = noise(150, 18);
    let a = run(&m1, &s1, &wave, ForwardOverrides::default());
    let b = run(&m1, &s2, &wave, ForwardOverrides::default());
    assert_eq!(a, b);
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let (model, mut store) = Muse::new(ModelConfig::micro(), 19).unwrap();
    // Non-zero offset predictors so that sampling happens off the integer grid.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (name, t) in store.iter_mut() {
        if name.contains(".offset.") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    // 29 samples with hop 4 give T = 8 frames; n_fft 14 gives F = 8 bins.
    let input = ModelInput::from_waves(&[&noise(29, 21)], &model.cfg.stft).unwrap();
    assert_eq!(input.mag_c.shape(), &[1, 8, 8]);
    let target = noise(29, 22);
    let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let rep = grad_check(
        |g, v| {
            g.bind_vars(v);
            let out = model.forward(g, &input, &ForwardOverrides::default())?;
            let tgt = g.constant(Tensor::new(vec![1, 29], target.clone())?);
            let d = g.sub(out.wave, tgt)?;
            let sq = g.square(d)?;
            let wave_loss = g.mean(sq)?;
            let ph = g.sin(out.phase)?;
            let ph = g.mean(ph)?;
            g.add(wave_loss, ph)
        },
        &params,
        &GradCheckConfig {
            tol: 1e-3,
            max_samples: 250,
            seed: 23,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    assert!(rep.checked > 150, "{rep:?}");
}
