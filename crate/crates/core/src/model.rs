//! U-Net assembly: dilated dense codec, three resolution stages of deformable
//! embedding + transformer blocks, and separate magnitude and phase heads.

use crate::attention::AttentionConfig;
use crate::autodiff::{Graph, Var};
use crate::deform::DeformEmbed;
use crate::error::{invalid, Error, Result};
use crate::kernels::Conv2dOptions;
use crate::met::{MetBlock, MetBlockConfig};
use crate::nn::{ChannelNorm, Conv2d, ConvTranspose2d, Prelu};
use crate::params::ParamStore;
use crate::spectral::{self, StftConfig};
use crate::tensor::{Precision, Tensor};
use rand::SeedableRng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dense_channels: usize,
    pub stage_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    pub dilations: Vec<usize>,
    /// Also dilate the frequency axis of the dense blocks.
    pub dilate_frequency: bool,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub attention_eps: f64,
    pub normalize_qk: bool,
    pub mask_beta: f64,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dense_channels: 16,
            stage_multipliers: vec![1, 2, 3],
            blocks_per_stage: 6,
            dilations: vec![1, 2, 4, 8],
            dilate_frequency: false,
            heads: 2,
            ffn_expansion: 3,
            attention_eps: 1e-6,
            normalize_qk: true,
            mask_beta: 2.0,
            stft: StftConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Tiny configuration (d = 4, one block per stage, 14-point FFT) used by
    /// gradient checks and smoke tests.
    pub fn micro() -> Self {
        Self {
            dense_channels: 4,
            blocks_per_stage: 1,
            ffn_expansion: 1,
            stft: StftConfig {
                n_fft: 14,
                win_length: 14,
                hop_length: 4,
                ..StftConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stage_multipliers.iter().map(|m| m * self.dense_channels).collect()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            eps: self.attention_eps,
            normalize_qk: self.normalize_qk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "model config";
        if self.dense_channels == 0 {
            return Err(invalid(op, "dense_channels must be positive"));
        }
        if self.stage_multipliers.len() != 3 || self.stage_multipliers.contains(&0) {
            return Err(invalid(op, format!("expected three positive stage multipliers, got {:?}", self.stage_multipliers)));
        }
        if self.dilations != [1, 2, 4, 8] {
            return Err(invalid(op, format!("dilations must be 1,2,4,8, got {:?}", self.dilations)));
        }
        if self.blocks_per_stage == 0 || self.ffn_expansion == 0 {
            return Err(invalid(op, "blocks_per_stage and ffn_expansion must be positive"));
        }
        if !(self.mask_beta > 0.0) {
            return Err(invalid(op, format!("mask_beta must be positive, got {}", self.mask_beta)));
        }
        for w in self.widths() {
            self.attention().head_dim(w)?;
        }
        self.stft.validate()
    }
}

/// Per-stage spatial sizes recorded on the way down, used to crop the
/// upsampled maps on the way up.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeLedger {
    entries: Vec<Option<(usize, usize)>>,
}

impl ShapeLedger {
    pub fn record(&mut self, stage: usize, t: usize, f: usize) {
        if self.entries.len() <= stage {
            self.entries.resize(stage + 1, None);
        }
        self.entries[stage] = Some((t, f));
    }

    pub fn get(&self, stage: usize) -> Result<(usize, usize)> {
        self.entries
            .get(stage)
            .copied()
            .flatten()
            .ok_or_else(|| invalid("upsample", format!("shape ledger has no entry for stage {stage}")))
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    conv: Conv2d,
    norm: ChannelNorm,
    act: Prelu,
}

/// Four 3×3 conv layers with growing dilation along time; layer `i` sees the
/// concatenation of the block input and all earlier layer outputs.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, c: usize, dilations: &[usize], dilate_frequency: bool) -> Self {
        let layers = dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                let df = if dilate_frequency { dil } else { 1 };
                let opts = Conv2dOptions::default().dilation(dil, df).padding(dil, df);
                let n = format!("{name}.{i}");
                DenseLayer {
                    conv: Conv2d::new(store, rng, &format!("{n}.conv"), c * (i + 1), c, (3, 3), opts, true),
                    norm: ChannelNorm::new(store, &format!("{n}.norm"), c),
                    act: Prelu::new(store, &format!("{n}.act"), c),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for layer in &self.layers {
            let input = if feats.len() == 1 { x } else { g.concat(&feats, 1)? };
            let y = layer.conv.forward(g, input)?;
            let y = layer.norm.forward(g, y)?;
            let y = layer.act.forward(g, y)?;
            feats.insert(0, y);
        }
        Ok(feats[0])
    }
}

#[derive(Clone, Debug)]
pub struct InputEncoder {
    conv: Conv2d,
    norm: ChannelNorm,
    act: Prelu,
    dense: DenseBlock,
}

impl InputEncoder {
    fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.dense_channels;
        Self {
            conv: Conv2d::pointwise(store, rng, "encoder.conv", 2, d),
            norm: ChannelNorm::new(store, "encoder.norm", d),
            act: Prelu::new(store, "encoder.act", d),
            dense: DenseBlock::new(store, rng, "encoder.dense", d, &cfg.dilations, cfg.dilate_frequency),
        }
    }

    pub fn forward(&self, g: &mut Graph, packed: Var) -> Result<Var> {
        let y = self.conv.forward(g, packed)?;
        let y = self.norm.forward(g, y)?;
        let y = self.act.forward(g, y)?;
        self.dense.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: DeformEmbed,
    pub blocks: Vec<MetBlock>,
}

impl Stage {
    fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, c: usize, cfg: &ModelConfig) -> Result<Self> {
        let embed = DeformEmbed::new(store, rng, &format!("{name}.embed"), c, c);
        let met = MetBlockConfig::new(c, cfg.attention(), cfg.ffn_expansion);
        let blocks = (0..cfg.blocks_per_stage)
            .map(|i| MetBlock::new(store, rng, &format!("{name}.met{i}"), met))
            .collect::<Result<_>>()?;
        Ok(Self { embed, blocks })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = self.embed.forward(g, x)?;
        for b in &self.blocks {
            y = b.forward(g, y)?;
        }
        Ok(y)
    }

    /// Like [`Stage::forward`], but on inference graphs frees every
    /// intermediate except `keep` after each block to bound memory.
    pub fn forward_retaining(&self, g: &mut Graph, x: Var, keep: &[Var]) -> Result<Var> {
        let mut y = self.embed.forward(g, x)?;
        for b in &self.blocks {
            y = b.forward(g, y)?;
            let mut live = keep.to_vec();
            live.push(y);
            g.release_intermediates(&live);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct MagnitudeDecoder {
    dense: DenseBlock,
    conv: Conv2d,
    beta: f64,
}

impl MagnitudeDecoder {
    /// Mask `β·σ(z)` of shape `[B,T,F]`.
    pub fn mask(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let y = self.dense.forward(g, features)?;
        let z = self.conv.forward(g, y)?;
        let s = g.sigmoid(z)?;
        let m = g.scale(s, self.beta)?;
        squeeze_channel(g, m)
    }
}

#[derive(Clone, Debug)]
pub struct PhaseDecoder {
    dense: DenseBlock,
    real: Conv2d,
    imag: Conv2d,
}

impl PhaseDecoder {
    /// Pseudo real and imaginary parts, each `[B,T,F]`.
    pub fn components(&self, g: &mut Graph, features: Var) -> Result<(Var, Var)> {
        let y = self.dense.forward(g, features)?;
        let r = self.real.forward(g, y)?;
        let i = self.imag.forward(g, y)?;
        Ok((squeeze_channel(g, r)?, squeeze_channel(g, i)?))
    }

    /// Phase in `(-π, π]`.
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let (r, i) = self.components(g, features)?;
        g.atan2(i, r)
    }
}

fn squeeze_channel(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[2], s[3]])
}

/// Network inputs for a batch of equal-length waveforms.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `[B, 2, T, F]`: compressed magnitude and phase planes.
    pub packed: Tensor,
    /// `[B, T, F]` compressed magnitude.
    pub mag_c: Tensor,
    /// `[B, T, F]` phase.
    pub phase: Tensor,
    pub len: usize,
}

impl ModelInput {
    pub fn from_waves(waves: &[&[f64]], stft: &StftConfig) -> Result<Self> {
        let len = match waves.first() {
            Some(w) => w.len(),
            None => return Err(invalid("model input", "empty batch")),
        };
        if waves.iter().any(|w| w.len() != len) {
            return Err(invalid("model input", "waveforms in a batch must have equal length"));
        }
        let mut packed = Vec::new();
        let mut mag_c = Vec::new();
        let mut phase = Vec::new();
        let (mut frames, mut bins) = (0, 0);
        for w in waves {
            let spec = spectral::stft(w, stft)?;
            let p = spectral::pack_input(&spec)?;
            (frames, bins) = (p.frames, p.bins);
            mag_c.extend(p.plane(0));
            phase.extend(p.plane(1));
            packed.extend(p.channel_first());
        }
        let b = waves.len();
        Ok(Self {
            packed: Tensor::new(vec![b, 2, frames, bins], packed)?,
            mag_c: Tensor::new(vec![b, frames, bins], mag_c)?,
            phase: Tensor::new(vec![b, frames, bins], phase)?,
            len,
        })
    }
}

/// Test and diagnostic overrides of the decoder heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOverrides {
    /// Replace the predicted mask by 1.
    pub unit_mask: bool,
    /// Replace the predicted phase by the input phase.
    pub input_phase: bool,
    /// Feed zeros instead of the encoder features into the skip fusion of
    /// this stage.
    pub drop_skip: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub mask: Var,
    /// Compressed estimated magnitude `mask ⊙ Y_m^c`.
    pub mag_c: Var,
    pub mag: Var,
    pub phase: Var,
    /// Compressed complex spectrum `mag_c·e^{jφ}`.
    pub re_c: Var,
    pub im_c: Var,
    /// `[B, len]`.
    pub wave: Var,
}

#[derive(Clone, Debug)]
pub struct Muse {
    pub cfg: ModelConfig,
    pub encoder: InputEncoder,
    pub enc_stages: Vec<Stage>,
    pub downs: Vec<Conv2d>,
    /// Indexed by the stage they produce: `ups[s]` maps stage `s+1` to `s`.
    pub ups: Vec<ConvTranspose2d>,
    pub fuses: Vec<Conv2d>,
    pub dec_stages: Vec<Stage>,
    pub magnitude: MagnitudeDecoder,
    pub phase: PhaseDecoder,
}

impl Muse {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let st = &mut store;
        let w = cfg.widths();
        let d = cfg.dense_channels;
        let down_opts = Conv2dOptions::default().stride(2, 2).padding(1, 1);

        let encoder = InputEncoder::new(st, rng, &cfg);
        let mut enc_stages = Vec::new();
        let mut downs = Vec::new();
        for s in 0..w.len() {
            if s > 0 {
                downs.push(Conv2d::new(st, rng, &format!("down{s}"), w[s - 1], w[s], (3, 3), down_opts, true));
            }
            enc_stages.push(Stage::new(st, rng, &format!("enc{s}"), w[s], &cfg)?);
        }
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut dec_stages = Vec::new();
        for s in (0..w.len() - 1).rev() {
            ups.push(ConvTranspose2d::new(st, rng, &format!("up{s}"), w[s + 1], w[s], (3, 3), down_opts, (1, 1)));
            fuses.push(Conv2d::pointwise(st, rng, &format!("fuse{s}"), 2 * w[s], w[s]));
            dec_stages.push(Stage::new(st, rng, &format!("dec{s}"), w[s], &cfg)?);
        }
        ups.reverse();
        fuses.reverse();
        dec_stages.reverse();
        let magnitude = MagnitudeDecoder {
            dense: DenseBlock::new(st, rng, "mag.dense", d, &cfg.dilations, cfg.dilate_frequency),
            conv: Conv2d::pointwise(st, rng, "mag.out", d, 1),
            beta: cfg.mask_beta,
        };
        let phase = PhaseDecoder {
            dense: DenseBlock::new(st, rng, "pha.dense", d, &cfg.dilations, cfg.dilate_frequency),
            real: Conv2d::pointwise(st, rng, "pha.real", d, 1),
            imag: Conv2d::pointwise(st, rng, "pha.imag", d, 1),
        };
        let model = Self {
            cfg,
            encoder,
            enc_stages,
            downs,
            ups,
            fuses,
            dec_stages,
            magnitude,
            phase,
        };
        Ok((model, store))
    }

    /// Strided 3×3 convolution from stage `to - 1` to stage `to`.
    pub fn downsample(&self, g: &mut Graph, to: usize, x: Var) -> Result<Var> {
        self.downs[to - 1].forward(g, x)
    }

    /// Transposed convolution from stage `to + 1` to stage `to`, cropped to
    /// the recorded size of `to`.
    pub fn upsample(&self, g: &mut Graph, to: usize, x: Var, ledger: &ShapeLedger) -> Result<Var> {
        let (t, f) = ledger.get(to)?;
        let y = self.ups[to].forward(g, x)?;
        let s = g.shape(y).to_vec();
        if s[2] < t || s[3] < f {
            return Err(Error::ShapeMismatch {
                op: "upsample crop",
                lhs: s,
                rhs: vec![t, f],
            });
        }
        let y = g.narrow(y, 2, 0, t)?;
        g.narrow(y, 3, 0, f)
    }

    /// Encoder, U-Net stages and decoder trunk; `[B, d, T, F]` features.
    pub fn features(&self, g: &mut Graph, packed: Var, overrides: &ForwardOverrides) -> Result<Var> {
        let mut x = self.encoder.forward(g, packed)?;
        g.release_intermediates(&[x]);
        let mut ledger = ShapeLedger::default();
        let mut skips = Vec::new();
        for (s, stage) in self.enc_stages.iter().enumerate() {
            if s > 0 {
                x = self.downsample(g, s, x)?;
            }
            let sh = g.shape(x);
            ledger.record(s, sh[2], sh[3]);
            x = stage.forward_retaining(g, x, &skips)?;
            skips.push(x);
        }
        for s in (0..self.dec_stages.len()).rev() {
            let up = self.upsample(g, s, x, &ledger)?;
            let skip = if overrides.drop_skip == Some(s) {
                g.constant(Tensor::zeros(g.shape(skips[s])))
            } else {
                skips[s]
            };
            let cat = g.concat(&[up, skip], 1)?;
            let fused = self.fuses[s].forward(g, cat)?;
            let mut live = skips[..s].to_vec();
            live.push(fused);
            g.release_intermediates(&live);
            x = self.dec_stages[s].forward_retaining(g, fused, &skips[..s])?;
        }
        Ok(x)
    }

    /// Full forward pass on a graph whose parameters are already bound.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput, overrides: &ForwardOverrides) -> Result<ModelOutput> {
        let packed = g.constant(input.packed.clone());
        let y_mag_c = g.constant(input.mag_c.clone());
        let feats = self.features(g, packed, overrides)?;
        let mask = if overrides.unit_mask {
            g.constant(Tensor::ones(&input.mag_c.shape().to_vec()))
        } else {
            self.magnitude.mask(g, feats)?
        };
        g.release_intermediates(&[feats, mask]);
        let phase = if overrides.input_phase {
            g.constant(input.phase.clone())
        } else {
            self.phase.forward(g, feats)?
        };
        g.release_intermediates(&[mask, phase]);
        let mag_c = g.mul(mask, y_mag_c)?;
        let mag = g.pow(mag_c, 1.0 / self.cfg.stft.compression_exponent)?;
        let (cos, sin) = (g.cos(phase)?, g.sin(phase)?);
        let re_c = g.mul(mag_c, cos)?;
        let im_c = g.mul(mag_c, sin)?;
        let re = g.mul(mag, cos)?;
        let im = g.mul(mag, sin)?;
        let wave = g.istft(re, im, &self.cfg.stft, input.len)?;
        Ok(ModelOutput {
            mask,
            mag_c,
            mag,
            phase,
            re_c,
            im_c,
            wave,
        })
    }

    /// Enhances one waveform without recording gradients.
    pub fn enhance(&self, store: &ParamStore, wave: &[f64], precision: Precision) -> Result<Vec<f64>> {
        let input = ModelInput::from_waves(&[wave], &self.cfg.stft)?;
        let mut g = Graph::new(precision);
        g.bind_params(&frozen(store));
        let out = self.forward(&mut g, &input, &ForwardOverrides::default())?;
        Ok(g.value(out.wave).data().to_vec())
    }
}

/// Copy of `store` with gradient tracking switched off.
pub fn frozen(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    s.iter_mut().for_each(|(_, t)| {
        t.requires_grad = false;
        t.grad = None;
    });
    s
}

/// Exact number of trainable scalars.
pub fn count_params(store: &ParamStore) -> usize {
    store.count()
}
