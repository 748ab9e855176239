//! Deformable embedding: a depthwise 3×3 convolution whose taps are moved by
//! per-position offsets predicted from the input, followed by a pointwise
//! projection and Hardswish.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::kernels::Conv2dOptions;
use crate::nn::Conv2d;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

pub const KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct DeformEmbed {
    pub c_in: usize,
    pub c_out: usize,
    /// Predicts `2·k·k` offset planes; zero at initialization so the layer
    /// starts as a regular depthwise convolution.
    pub offset: Conv2d,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub pointwise: Conv2d,
}

impl DeformEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        let k = KERNEL;
        let offset = Conv2d::zeros(
            store,
            &format!("{name}.offset"),
            c_in,
            2 * k * k,
            (k, k),
            Conv2dOptions::default().padding(k / 2, k / 2),
        );
        let fan_in = k * k;
        let dw_weight = store.add_uniform(format!("{name}.dw.weight"), &[c_in, 1, k, k], fan_in, rng);
        let dw_bias = store.add_uniform(format!("{name}.dw.bias"), &[c_in], fan_in, rng);
        let pointwise = Conv2d::pointwise(store, rng, &format!("{name}.pw"), c_in, c_out);
        Self {
            c_in,
            c_out,
            offset,
            dw_weight,
            dw_bias,
            pointwise,
        }
    }

    /// `[B, 2·k·k, T, F]`; channel `2j` is the time offset of tap `j`,
    /// channel `2j+1` the frequency offset.
    pub fn predict_offsets(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.offset.forward(g, x)
    }

    /// Deformable depthwise convolution with the given offsets, plus bias.
    pub fn deform(&self, g: &mut Graph, x: Var, offsets: Var) -> Result<Var> {
        let w = g.param(self.dw_weight);
        let y = g.deform_depthwise(x, offsets, w)?;
        let b = g.param(self.dw_bias);
        g.channel_affine(y, None, Some(b))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let off = self.predict_offsets(g, x)?;
        let y = self.deform(g, x, off)?;
        let y = self.pointwise.forward(g, y)?;
        g.hardswish(y)
    }
}

/// Offsets of `[B, 2·k·k, T, F]` that move every tap by the same `(dt, df)`.
pub fn uniform_offsets(batch: usize, t: usize, f: usize, dt: f64, df: f64) -> Tensor {
    let plane = t * f;
    Tensor::from_fn(&[batch, 2 * KERNEL * KERNEL, t, f], |i| {
        if (i / plane) % 2 == 0 {
            dt
        } else {
            df
        }
    })
}
