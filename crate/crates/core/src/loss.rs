//! Composite training objective on compressed spectra, phase and waveform.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::model::ModelOutput;
use crate::spectral::{self, StftConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub magnitude: f64,
    pub phase: f64,
    pub complex: f64,
    pub time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            magnitude: 0.9,
            phase: 0.3,
            complex: 0.1,
            time: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.magnitude, self.phase, self.complex, self.time];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("loss weights", format!("weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Clean-speech references for a batch, in the layouts the model produces.
#[derive(Clone, Debug)]
pub struct CleanTarget {
    /// `[B, T, F]`
    pub mag_c: Tensor,
    pub phase: Tensor,
    pub re_c: Tensor,
    pub im_c: Tensor,
    /// `[B, L]`
    pub wave: Tensor,
}

impl CleanTarget {
    pub fn from_waves(waves: &[&[f64]], stft: &StftConfig) -> Result<Self> {
        let len = waves.first().map(|w| w.len()).ok_or_else(|| invalid("clean target", "empty batch"))?;
        let (mut mag_c, mut phase, mut re_c, mut im_c, mut wave) = (vec![], vec![], vec![], vec![], vec![]);
        let mut dims = (0, 0);
        for w in waves {
            if w.len() != len {
                return Err(invalid("clean target", "waveforms in a batch must have equal length"));
            }
            let spec = spectral::stft(w, stft)?;
            let mc = spectral::compress_magnitude(&spec.magnitude, stft.compression_exponent)?;
            for (m, p) in mc.iter().zip(&spec.phase) {
                re_c.push(m * p.cos());
                im_c.push(m * p.sin());
            }
            mag_c.extend(mc);
            phase.extend(&spec.phase);
            wave.extend_from_slice(w);
            dims = (spec.frames, spec.bins);
        }
        let shape = vec![waves.len(), dims.0, dims.1];
        Ok(Self {
            mag_c: Tensor::new(shape.clone(), mag_c)?,
            phase: Tensor::new(shape.clone(), phase)?,
            re_c: Tensor::new(shape.clone(), re_c)?,
            im_c: Tensor::new(shape, im_c)?,
            wave: Tensor::new(vec![waves.len(), len], wave)?,
        })
    }
}

/// Unweighted terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub magnitude: Var,
    pub phase: Var,
    pub complex: Var,
    pub time: Var,
}

pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let s = g.square(d)?;
    g.mean(s)
}

pub fn l1(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let s = g.abs(d)?;
    g.mean(s)
}

/// Mean anti-wrapped phase distance; invariant to `2πk` shifts of either side.
pub fn anti_wrap_phase_loss(g: &mut Graph, estimate: Var, target: Var) -> Result<Var> {
    let d = g.sub(estimate, target)?;
    let aw = g.anti_wrap(d)?;
    g.mean(aw)
}

pub fn composite_loss(g: &mut Graph, out: &ModelOutput, target: &CleanTarget, w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    if !target.wave.all_finite() || !target.mag_c.all_finite() {
        return Err(Error::NonFinite { op: "composite_loss target" });
    }
    let t_mag = g.constant(target.mag_c.clone());
    let t_pha = g.constant(target.phase.clone());
    let t_re = g.constant(target.re_c.clone());
    let t_im = g.constant(target.im_c.clone());
    let t_wave = g.constant(target.wave.clone());

    let magnitude = mse(g, out.mag_c, t_mag)?;
    let phase = anti_wrap_phase_loss(g, out.phase, t_pha)?;
    let re = mse(g, out.re_c, t_re)?;
    let im = mse(g, out.im_c, t_im)?;
    let complex = g.add(re, im)?;
    let time = l1(g, out.wave, t_wave)?;

    let mut total = g.constant(Tensor::zeros(&[1]));
    for (term, weight) in [(magnitude, w.magnitude), (phase, w.phase), (complex, w.complex), (time, w.time)] {
        if weight > 0.0 {
            let t = g.scale(term, weight)?;
            total = g.add(total, t)?;
        }
    }
    Ok(LossTerms {
        total,
        magnitude,
        phase,
        complex,
        time,
    })
}
