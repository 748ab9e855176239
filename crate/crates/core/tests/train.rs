use muse_core::autodiff::Graph;
use muse_core::loss::{composite_loss, CleanTarget, LossWeights};
use muse_core::metrics::{ssnr, SSNR_FRAME, SSNR_HOP};
use muse_core::model::{ForwardOverrides, ModelConfig, ModelInput, Muse};
use muse_core::train::{train_loop, LogRow, TrainConfig, TrainEvent, TrainPair};
use muse_core::Precision;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair(len: usize, seed: u64) -> TrainPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / 16000.0;
            let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
            env * (0.3 * (2.0 * std::f64::consts::PI * 2300.0 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * 5100.0 * t).sin())
        })
        .collect();
    let noisy = clean.iter().map(|c| c + rng.gen_range(-0.15..0.15)).collect();
    TrainPair { clean, noisy }
}

#[test]
fn loss_is_zero_at_identity_and_terms_scale_linearly() {
    let cfg = ModelConfig::micro();
    let (model, store) = Muse::new(cfg.clone(), 1).unwrap();
    let p = pair(200, 2);
    // With unit mask and input phase, feeding the clean wave reproduces it.
    let input = ModelInput::from_waves(&[&p.clean], &cfg.stft).unwrap();
    let target = CleanTarget::from_waves(&[&p.clean], &cfg.stft).unwrap();
    let ov = ForwardOverrides {
        unit_mask: true,
        input_phase: true,
        ..Default::default()
    };
    let mut g = Graph::default();
    g.bind_params(&store);
    let out = model.forward(&mut g, &input, &ov).unwrap();
    let terms = composite_loss(&mut g, &out, &target, &LossWeights::default()).unwrap();
    assert!(g.value(terms.total).data()[0] < 1e-12);

    let noisy = ModelInput::from_waves(&[&p.noisy], &cfg.stft).unwrap();
    let out = model.forward(&mut g, &noisy, &ForwardOverrides::default()).unwrap();
    let w = LossWeights::default();
    let base = composite_loss(&mut g, &out, &target, &w).unwrap();
    let w2 = LossWeights {
        magnitude: 2.0 * w.magnitude,
        ..w
    };
    let doubled = composite_loss(&mut g, &out, &target, &w2).unwrap();
    let v = |x| g.value(x).data()[0];
    assert!(v(base.total) > 0.0);
    let gain = v(doubled.total) - v(base.total);
    assert!((gain - w.magnitude * v(base.magnitude)).abs() < 1e-12);
}

fn smoke_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: std::env::var("SMOKE_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(5e-3),
        lr_decay: 1.0,
        batch_size: 1,
        epochs: steps,
        seed,
        segment_length: 2048,
        ..TrainConfig::default()
    }
}

#[test]
fn overfit_single_pair() {
    let cfg = ModelConfig::micro();
    let (model, mut store) = Muse::new(cfg.clone(), 3).unwrap();
    let data = vec![pair(2048, 4)];
    let steps = 300;
    let mut log = Vec::new();
    let summary = train_loop(&model, &mut store, &data, &smoke_config(steps, 5), Precision::F64, |e| {
        if let TrainEvent::Step(r) = e {
            log.push(*r);
        }
        Ok(())
    })
    .unwrap();
    for r in log.iter().step_by(25) {
        eprintln!("{}", r.csv_row());
    }
    let enhanced = model.enhance(&store, &data[0].noisy, Precision::F64).unwrap();
    let before = ssnr(&data[0].clean, &data[0].noisy, SSNR_FRAME, SSNR_HOP).unwrap();
    let after = ssnr(&data[0].clean, &enhanced, SSNR_FRAME, SSNR_HOP).unwrap();
    eprintln!("loss {} -> {}, ssnr {before} -> {after}", summary.first_loss, summary.last_loss);
    assert_eq!(summary.steps, steps);
    assert!(summary.last_loss <= 0.1 * summary.first_loss);
    assert!(after - before >= 3.0);
}

#[test]
fn seeded_training_is_reproducible() {
    let run = || {
        let (model, mut store) = Muse::new(ModelConfig::micro(), 6).unwrap();
        let data = vec![pair(300, 7), pair(300, 8), pair(300, 9)];
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            ..smoke_config(4, 10)
        };
        let mut rows: Vec<LogRow> = Vec::new();
        train_loop(&model, &mut store, &data, &cfg, Precision::F64, |e| {
            if let TrainEvent::Step(r) = e {
                rows.push(*r);
            }
            Ok(())
        })
        .unwrap();
        let params: Vec<u64> = store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
        (rows.iter().map(LogRow::csv_row).collect::<Vec<_>>(), params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}
