//! Parameterized layers. Each layer owns [`ParamId`]s into a [`ParamStore`]
//! and builds its forward pass on a [`Graph`] bound to that store.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::kernels::Conv2dOptions;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        opts: Conv2dOptions,
        bias: bool,
    ) -> Self {
        let fan_in = c_in / opts.groups * kernel.0 * kernel.1;
        let weight = store.add_uniform(format!("{name}.weight"), &[c_out, c_in / opts.groups, kernel.0, kernel.1], fan_in, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng));
        Self { weight, bias, opts }
    }

    /// 1×1 convolution with bias.
    pub fn pointwise(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(store, rng, name, c_in, c_out, (1, 1), Conv2dOptions::default(), true)
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: (usize, usize), opts: Conv2dOptions) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in / opts.groups, kernel.0, kernel.1]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self { weight, bias, opts }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
    pub output_padding: (usize, usize),
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        opts: Conv2dOptions,
        output_padding: (usize, usize),
    ) -> Self {
        let fan_in = c_out / opts.groups * kernel.0 * kernel.1;
        let weight = store.add_uniform(format!("{name}.weight"), &[c_in, c_out / opts.groups, kernel.0, kernel.1], fan_in, rng);
        let bias = Some(store.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng));
        Self {
            weight,
            bias,
            opts,
            output_padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv_transpose2d(x, w, b, self.opts, self.output_padding)
    }
}

/// Layer norm over the channel axis of `[B,C,T,F]`, independently at every
/// time-frequency position.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let channels_last = g.permute(x, &[0, 2, 3, 1])?;
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.layer_norm(channels_last, Some(gamma), Some(beta), NORM_EPS)?;
        g.permute(y, &[0, 3, 1, 2])
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    pub alpha: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            alpha: store.add(format!("{name}.alpha"), Tensor::full(&[channels], 0.25)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = g.param(self.alpha);
        g.prelu(x, a)
    }
}
