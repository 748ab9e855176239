//! Flat `key = value` run configuration covering the STFT, model and
//! training settings.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn positive<T: FromStr + PartialOrd + Default + Copy>(v: &str) -> std::result::Result<T, String> {
    let x: T = num(v)?;
    if x > T::default() {
        Ok(x)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn unit_open(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if (0.0..1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("must be in [0, 1), got {v}"))
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| positive::<usize>(s.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key in print order.
    pub const KEYS: &'static [&'static str] = &[
        "n_fft",
        "win_length",
        "hop_length",
        "sample_rate",
        "compression_exponent",
        "dense_channels",
        "stage_multipliers",
        "blocks_per_stage",
        "dilations",
        "dilate_frequency",
        "heads",
        "ffn_expansion",
        "attention_eps",
        "normalize_qk",
        "mask_beta",
        "lr",
        "lr_decay",
        "batch_size",
        "epochs",
        "seed",
        "segment_length",
        "loss_mag",
        "loss_pha",
        "loss_complex",
        "loss_time",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "grad_clip",
        "checkpoint_every",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "n_fft" => m.stft.n_fft = positive(v)?,
            "win_length" => m.stft.win_length = positive(v)?,
            "hop_length" => m.stft.hop_length = positive(v)?,
            "sample_rate" => m.stft.sample_rate = positive(v)?,
            "compression_exponent" => m.stft.compression_exponent = positive(v)?,
            "dense_channels" => m.dense_channels = positive(v)?,
            "stage_multipliers" => m.stage_multipliers = list(v)?,
            "blocks_per_stage" => m.blocks_per_stage = positive(v)?,
            "dilations" => m.dilations = list(v)?,
            "dilate_frequency" => m.dilate_frequency = boolean(v)?,
            "heads" => m.heads = positive(v)?,
            "ffn_expansion" => m.ffn_expansion = positive(v)?,
            "attention_eps" => m.attention_eps = positive(v)?,
            "normalize_qk" => m.normalize_qk = boolean(v)?,
            "mask_beta" => m.mask_beta = positive(v)?,
            "lr" => t.lr = positive(v)?,
            "lr_decay" => t.lr_decay = positive(v)?,
            "batch_size" => t.batch_size = positive(v)?,
            "epochs" => t.epochs = positive(v)?,
            "seed" => t.seed = num(v)?,
            "segment_length" => t.segment_length = positive(v)?,
            "loss_mag" => t.weights.magnitude = non_negative(v)?,
            "loss_pha" => t.weights.phase = non_negative(v)?,
            "loss_complex" => t.weights.complex = non_negative(v)?,
            "loss_time" => t.weights.time = non_negative(v)?,
            "adam_beta1" => t.adam.beta1 = unit_open(v)?,
            "adam_beta2" => t.adam.beta2 = unit_open(v)?,
            "adam_eps" => t.adam.eps = positive(v)?,
            "weight_decay" => t.adam.weight_decay = non_negative(v)?,
            "grad_clip" => t.grad_clip = non_negative(v)?,
            "checkpoint_every" => t.checkpoint_every = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "n_fft" => m.stft.n_fft.to_string(),
            "win_length" => m.stft.win_length.to_string(),
            "hop_length" => m.stft.hop_length.to_string(),
            "sample_rate" => m.stft.sample_rate.to_string(),
            "compression_exponent" => m.stft.compression_exponent.to_string(),
            "dense_channels" => m.dense_channels.to_string(),
            "stage_multipliers" => join(&m.stage_multipliers),
            "blocks_per_stage" => m.blocks_per_stage.to_string(),
            "dilations" => join(&m.dilations),
            "dilate_frequency" => m.dilate_frequency.to_string(),
            "heads" => m.heads.to_string(),
            "ffn_expansion" => m.ffn_expansion.to_string(),
            "attention_eps" => m.attention_eps.to_string(),
            "normalize_qk" => m.normalize_qk.to_string(),
            "mask_beta" => m.mask_beta.to_string(),
            "lr" => t.lr.to_string(),
            "lr_decay" => t.lr_decay.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "segment_length" => t.segment_length.to_string(),
            "loss_mag" => t.weights.magnitude.to_string(),
            "loss_pha" => t.weights.phase.to_string(),
            "loss_complex" => t.weights.complex.to_string(),
            "loss_time" => t.weights.time.to_string(),
            "adam_beta1" => t.adam.beta1.to_string(),
            "adam_beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "weight_decay" => t.adam.weight_decay.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |key: &str, msg: String| Error::Config {
                line,
                key: key.to_string(),
                msg,
            };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(content, "expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(key, format!("duplicate key (first set on line {first})")));
            }
            cfg.set(key, value).map_err(|m| err(key, m))?;
            seen.push((key.to_string(), line));
        }
        let line_of = |key: &str| seen.iter().find(|(k, _)| k == key).map_or(0, |(_, l)| *l);
        let whole = |key: &str, e: Error| Error::Config {
            line: line_of(key),
            key: key.to_string(),
            msg: e.to_string(),
        };
        let m = &cfg.model;
        if m.stft.n_fft % 2 != 0 {
            return Err(Error::Config {
                line: line_of("n_fft"),
                key: "n_fft".into(),
                msg: "must be even".into(),
            });
        }
        let stft_key = if m.stft.win_length > m.stft.n_fft { "win_length" } else { "hop_length" };
        m.stft.validate().map_err(|e| whole(stft_key, e))?;
        if m.stage_multipliers.len() != 3 {
            return Err(Error::Config {
                line: line_of("stage_multipliers"),
                key: "stage_multipliers".into(),
                msg: "expected three stage multipliers".into(),
            });
        }
        if m.dilations != [1, 2, 4, 8] {
            return Err(Error::Config {
                line: line_of("dilations"),
                key: "dilations".into(),
                msg: "must be exactly 1,2,4,8".into(),
            });
        }
        m.attention().head_dim(m.dense_channels).map_err(|e| whole("heads", e))?;
        m.validate().map_err(|e| whole("heads", e))?;
        cfg.train.validate().map_err(|e| whole("lr", e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Resolved configuration as `key = value` lines, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }
}
