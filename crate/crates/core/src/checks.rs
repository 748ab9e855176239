//! Finite-difference gradient suites, one per layer type plus a full micro
//! model, shared by the test suite and the `gradcheck` command.

use crate::attention::AttentionConfig;
use crate::autodiff::{Graph, Var};
use crate::deform::DeformEmbed;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::kernels::Conv2dOptions;
use crate::met::{MetBlock, MetBlockConfig};
use crate::model::{DenseBlock, ForwardOverrides, ModelConfig, ModelInput, Muse};
use crate::params::ParamStore;
use crate::spectral::StftConfig;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};

pub type SuiteFn = fn(&GradCheckConfig) -> Result<GradCheckReport>;

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// `Σ y ⊙ R` for a fixed random `R`, so that no symmetry hides an error.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(rand_tensor(g.shape(y), seed ^ 0x5eed, 1.0));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn with_params(x: Vec<Tensor>, store: &ParamStore) -> Vec<Tensor> {
    x.into_iter().chain(store.iter().map(|(_, t)| t.clone())).collect()
}

fn matmul(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[2, 3, 4], 1, 1.0), rand_tensor(&[4, 5], 2, 1.0)];
    grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 3)
        },
        &inputs,
        cfg,
    )
}

fn conv2d(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[2, 4, 7, 6], 4, 1.0), rand_tensor(&[6, 2, 3, 3], 5, 0.5), rand_tensor(&[6], 6, 0.5)];
    grad_check(
        |g, v| {
            let opts = Conv2dOptions::default().stride(2, 1).padding(2, 1).dilation(2, 1).groups(2);
            let y = g.conv2d(v[0], v[1], Some(v[2]), opts)?;
            project(g, y, 7)
        },
        &inputs,
        cfg,
    )
}

fn conv_transpose2d(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[1, 4, 3, 5], 8, 1.0), rand_tensor(&[4, 3, 3, 3], 9, 0.5), rand_tensor(&[3], 10, 0.5)];
    grad_check(
        |g, v| {
            let opts = Conv2dOptions::default().stride(2, 2).padding(1, 1);
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), opts, (1, 1))?;
            project(g, y, 11)
        },
        &inputs,
        cfg,
    )
}

fn deform_depthwise(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[1, 3, 5, 6], 12, 1.0), rand_tensor(&[1, 18, 5, 6], 13, 1.4), rand_tensor(&[3, 1, 3, 3], 14, 0.5)];
    grad_check(
        |g, v| {
            let y = g.deform_depthwise(v[0], v[1], v[2])?;
            project(g, y, 15)
        },
        &inputs,
        cfg,
    )
}

fn normalization(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[2, 3, 4, 5], 16, 1.0), rand_tensor(&[5], 17, 1.0), rand_tensor(&[5], 18, 1.0), rand_tensor(&[3], 19, 1.0)];
    grad_check(
        |g, v| {
            let y = g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            let y = g.channel_affine(y, Some(v[3]), Some(v[3]))?;
            let y = g.l2_normalize(y, 1e-12)?;
            let y = g.adaptive_avg_pool(y)?;
            project(g, y, 20)
        },
        &inputs,
        cfg,
    )
}

fn activations(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[2, 3, 4, 4], 21, 4.0), rand_tensor(&[3], 22, 0.5)];
    grad_check(
        |g, v| {
            let mut acc = g.prelu(v[0], v[1])?;
            for f in [Graph::gelu, Graph::hardswish, Graph::sigmoid, Graph::abs, Graph::sin, Graph::cos] {
                let y = f(g, v[0])?;
                acc = g.add(acc, y)?;
            }
            let e = g.scale(v[0], 0.25)?;
            let e = g.exp(e)?;
            let p = g.pow(e, 1.7)?;
            let acc = g.add(acc, p)?;
            project(g, acc, 23)
        },
        &inputs,
        cfg,
    )
}

fn phase_ops(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[3, 7], 24, 2.0), rand_tensor(&[3, 7], 25, 2.0), rand_tensor(&[3, 7], 26, 3.0)];
    grad_check(
        |g, v| {
            let a = g.atan2(v[0], v[1])?;
            let d = g.sub(a, v[2])?;
            let w = g.anti_wrap(d)?;
            project(g, w, 27)
        },
        &inputs,
        cfg,
    )
}

fn shape_ops(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inputs = [rand_tensor(&[2, 3, 4], 28, 1.0), rand_tensor(&[2, 1, 4], 29, 1.0)];
    grad_check(
        |g, v| {
            let b = g.broadcast_to(v[1], &[2, 3, 4])?;
            let c = g.concat(&[v[0], b], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let n = g.narrow(p, 2, 1, 4)?;
            let r = g.reshape(n, &[8, 4])?;
            let s = g.sum_axis(r, 0)?;
            let sq = g.square(s)?;
            let m = g.mean(sq)?;
            let den = positive_like(g, r)?;
            let q = g.div(r, den)?;
            let t = project(g, q, 30)?;
            g.add(m, t)
        },
        &inputs,
        cfg,
    )
}

/// `x² + 2`, a denominator bounded away from zero.
fn positive_like(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.constant(Tensor::full(g.shape(x), 2.0));
    let s = g.square(x)?;
    g.add(s, c)
}

fn istft(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let stft = StftConfig {
        n_fft: 14,
        win_length: 14,
        hop_length: 4,
        ..StftConfig::default()
    };
    let inputs = [rand_tensor(&[1, 8, 8], 31, 1.0), rand_tensor(&[1, 8, 8], 32, 1.0)];
    grad_check(
        |g, v| {
            let y = g.istft(v[0], v[1], &stft, 29)?;
            project(g, y, 33)
        },
        &inputs,
        cfg,
    )
}

fn store_rng() -> (ParamStore, rand_chacha::ChaCha8Rng) {
    (ParamStore::new(), rand_chacha::ChaCha8Rng::seed_from_u64(34))
}

fn met_block(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut store, mut rng) = store_rng();
    let blk = MetBlock::new(&mut store, &mut rng, "met", MetBlockConfig::new(4, AttentionConfig::default(), 2))?;
    let inputs = with_params(vec![rand_tensor(&[1, 4, 3, 4], 35, 1.0)], &store);
    grad_check(
        |g, v| {
            g.bind_vars(&v[1..]);
            let y = blk.forward(g, v[0])?;
            project(g, y, 36)
        },
        &inputs,
        cfg,
    )
}

fn deform_embed(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut store, mut rng) = store_rng();
    let de = DeformEmbed::new(&mut store, &mut rng, "de", 3, 4);
    // Move the offsets off zero so bilinear weights are exercised.
    let w = store.get_mut(de.offset.weight);
    w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
    let inputs = with_params(vec![rand_tensor(&[1, 3, 5, 5], 37, 1.0)], &store);
    grad_check(
        |g, v| {
            g.bind_vars(&v[1..]);
            let y = de.forward(g, v[0])?;
            project(g, y, 38)
        },
        &inputs,
        cfg,
    )
}

fn dense_block(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut store, mut rng) = store_rng();
    let db = DenseBlock::new(&mut store, &mut rng, "dense", 4, &[1, 2, 4, 8], false);
    let inputs = with_params(vec![rand_tensor(&[1, 4, 10, 3], 39, 1.0)], &store);
    grad_check(
        |g, v| {
            g.bind_vars(&v[1..]);
            let y = db.forward(g, v[0])?;
            project(g, y, 40)
        },
        &inputs,
        cfg,
    )
}

/// Whole network at `d = 4` on an 8×8 spectrogram, through the ISTFT.
fn micro_model(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (model, mut store) = Muse::new(ModelConfig::micro(), 41)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    for (name, t) in store.iter_mut() {
        if name.contains(".offset.") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let wave: Vec<f64> = (0..29).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let input = ModelInput::from_waves(&[&wave], &model.cfg.stft)?;
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, v| {
            g.bind_vars(v);
            let out = model.forward(g, &input, &ForwardOverrides::default())?;
            let a = project(g, out.wave, 43)?;
            let b = project(g, out.phase, 44)?;
            g.add(a, b)
        },
        &inputs,
        cfg,
    )
}

/// Every suite by name.
pub fn suites() -> Vec<(&'static str, SuiteFn)> {
    vec![
        ("matmul", matmul),
        ("conv2d", conv2d),
        ("conv_transpose2d", conv_transpose2d),
        ("deform_depthwise", deform_depthwise),
        ("normalization", normalization),
        ("activations", activations),
        ("phase", phase_ops),
        ("shape", shape_ops),
        ("istft", istft),
        ("met_block", met_block),
        ("deform_embed", deform_embed),
        ("dense_block", dense_block),
        ("micro_model", micro_model),
    ]
}

/// Default settings of the suites: central differences with step 1e-4,
/// relative tolerance 1e-3.
pub fn suite_config() -> GradCheckConfig {
    GradCheckConfig {
        tol: 1e-3,
        max_samples: 250,
        ..GradCheckConfig::default()
    }
}
