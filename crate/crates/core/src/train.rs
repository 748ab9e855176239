//! Training loop: seeded epoch shuffling, forward/backward, AdamW updates
//! and per-epoch learning-rate decay.

use crate::autodiff::Graph;
use crate::error::{invalid, Error, Result};
use crate::loss::{composite_loss, CleanTarget, LossWeights};
use crate::model::{ForwardOverrides, ModelInput, Muse};
use crate::optim::{clip_grad_norm, lr_at_epoch, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Precision;
use rand::seq::SliceRandom;
use rand::SeedableRng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub segment_length: usize,
    pub weights: LossWeights,
    pub adam: AdamWConfig,
    /// Global gradient-norm limit; `0` disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (`0`: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_decay: 0.99,
            batch_size: 2,
            epochs: 100,
            seed: 0,
            segment_length: 30700,
            weights: LossWeights::default(),
            adam: AdamWConfig::default(),
            grad_clip: 0.0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid("train config", format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("train config", format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.segment_length == 0 {
            return Err(invalid("train config", "batch_size, epochs and segment_length must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(invalid("train config", "grad_clip must be >= 0"));
        }
        self.weights.validate()?;
        self.adam.validate()
    }
}

/// One clean/noisy training example of fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_mag: f64,
    pub loss_pha: f64,
    pub loss_complex: f64,
    pub loss_time: f64,
    pub lr: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "epoch,step,loss_total,loss_mag,loss_pha,loss_complex,loss_time,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.step, self.loss_total, self.loss_mag, self.loss_pha, self.loss_complex, self.loss_time, self.lr
        )
    }
}

pub enum TrainEvent<'a> {
    Step(&'a LogRow),
    EpochEnd { epoch: usize, store: &'a ParamStore },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub skipped_steps: u64,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Forward + loss + backward on one batch; leaves gradients on `store`.
pub fn loss_and_grads(
    model: &Muse,
    store: &mut ParamStore,
    batch: &[&TrainPair],
    weights: &LossWeights,
    precision: Precision,
) -> Result<[f64; 5]> {
    let noisy: Vec<&[f64]> = batch.iter().map(|p| p.noisy.as_slice()).collect();
    let clean: Vec<&[f64]> = batch.iter().map(|p| p.clean.as_slice()).collect();
    let input = ModelInput::from_waves(&noisy, &model.cfg.stft)?;
    let target = CleanTarget::from_waves(&clean, &model.cfg.stft)?;
    let mut g = Graph::new(precision);
    g.bind_params(store);
    let out = model.forward(&mut g, &input, &ForwardOverrides::default())?;
    let terms = composite_loss(&mut g, &out, &target, weights)?;
    let vals = [terms.total, terms.magnitude, terms.phase, terms.complex, terms.time].map(|v| g.value(v).data()[0]);
    let mut grads = g.backward(terms.total)?;
    store.collect_grads(&g, &mut grads);
    Ok(vals)
}

/// Runs `cfg.epochs` epochs over `data`, reporting every step and epoch end
/// to `observer`.
pub fn train_loop<F>(
    model: &Muse,
    store: &mut ParamStore,
    data: &[TrainPair],
    cfg: &TrainConfig,
    precision: Precision,
    mut observer: F,
) -> Result<TrainSummary>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adam, store)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let (mut first_loss, mut last_loss) = (f64::NAN, f64::NAN);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &data[i]).collect();
            let [total, mag, pha, complex, time] = loss_and_grads(model, store, &batch, &cfg.weights, precision)?;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(store, cfg.grad_clip);
            }
            if opt.step(store, lr)? && precision == Precision::F32 {
                store.iter_mut().for_each(|(_, t)| precision.round_slice(t.data_mut()));
            }
            if step == 0 {
                first_loss = total;
            }
            last_loss = total;
            let row = LogRow {
                epoch,
                step,
                loss_total: total,
                loss_mag: mag,
                loss_pha: pha,
                loss_complex: complex,
                loss_time: time,
                lr,
            };
            observer(TrainEvent::Step(&row))?;
            step += 1;
        }
        observer(TrainEvent::EpochEnd { epoch, store })?;
    }
    store.zero_grads();
    Ok(TrainSummary {
        steps: step,
        skipped_steps: opt.skipped,
        first_loss,
        last_loss,
    })
}
