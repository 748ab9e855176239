//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op of one forward pass in topological order.
//! [`Graph::backward`] walks the record once in reverse and returns the
//! gradients of all nodes that depend on a trainable leaf. Shapes are checked
//! on every op; the only broadcasting is over leading matmul batch dims and
//! through the explicit [`Graph::broadcast_to`] op.

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, Conv2dOptions, ConvGeom, DeformGeom};
use crate::params::{ParamId, ParamStore};
use crate::spectral::{self, StftConfig};
use crate::tensor::{strides, Precision, Tensor};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Hardswish,
    Sigmoid,
    Abs,
    Square,
    Sin,
    Cos,
    Exp,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Activation),
    Pow(Var, f64),
    Atan2 { y: Var, x: Var },
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    DeformDepthwise { x: Var, offsets: Var, w: Var, geom: DeformGeom },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Broadcast(Var),
    SumAxis { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<f64>, rstd: Vec<f64> },
    ChannelAffine { x: Var, scale: Option<Var>, shift: Option<Var> },
    Prelu { x: Var, alpha: Var },
    AvgPool(Var),
    L2Normalize { x: Var, eps: f64, norms: Vec<f64> },
    AntiWrap(Var),
    Istft { re: Var, im: Var, cfg: StftConfig, frames: usize },
}

#[derive(Clone, Debug)]
struct MatMulPlan {
    m: usize,
    p: usize,
    n: usize,
    /// `(a_batch, b_batch)` matrix offsets for each output batch.
    pairs: Vec<(usize, usize)>,
    a_batches: usize,
    b_batches: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Branch signature of kinked ops, used by the gradient checker to detect
/// perturbations that cross a non-differentiable point.
#[derive(Default)]
struct KinkLog {
    hash: u64,
}

impl KinkLog {
    fn mix(&mut self, v: u64) {
        // FNV-1a over 8-byte words
        self.hash ^= v;
        self.hash = self.hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
    params: Vec<Var>,
    kinks: Option<KinkLog>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            consumed: false,
            params: Vec::new(),
            kinks: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enables recording of branch signatures for kinked ops.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(KinkLog::default());
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|k| k.hash)
    }

    fn kink(&mut self, v: u64) {
        if let Some(k) = self.kinks.as_mut() {
            k.mix(v);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert!(!self.nodes[v.0].value.is_released(), "value of node {} was released", v.0);
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.precision.round_slice(&mut data);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Frees the values of intermediate nodes not listed in `keep`. Only acts
    /// on graphs where nothing requires a gradient (pure inference), where
    /// the values are never needed again; returns the number released.
    pub fn release_intermediates(&mut self, keep: &[Var]) -> usize {
        if self.nodes.iter().any(|n| n.requires_grad) {
            return 0;
        }
        let mut released = 0;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) && !node.value.is_released() && !keep.contains(&Var(i)) {
                node.value.release();
                released += 1;
            }
        }
        released
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        self.precision.round_slice(t.data_mut());
        t.grad = None;
        t.requires_grad = requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every tensor of `store` as a leaf; trainable ones get gradients.
    pub fn bind_params(&mut self, store: &ParamStore) {
        self.params = store
            .iter()
            .map(|(_, t)| {
                let trainable = t.requires_grad;
                self.leaf(t.clone(), trainable)
            })
            .collect();
    }

    /// Uses existing graph nodes as the parameters, in store order. Lets a
    /// caller differentiate with respect to parameters it created itself.
    pub fn bind_vars(&mut self, vars: &[Var]) {
        self.params = vars.to_vec();
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    // -- elementwise --------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), data, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), data, Op::AddScalar(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xs = self.data(x);
        let data: Vec<f64> = xs.iter().map(|&v| activation_forward(kind, v)).collect();
        if self.kinks.is_some() {
            let codes: Vec<u64> = xs.iter().map(|&v| activation_branch(kind, v)).collect();
            codes.into_iter().for_each(|c| self.kink(c));
        }
        let name = match kind {
            Activation::Gelu => "gelu",
            Activation::Hardswish => "hardswish",
            Activation::Sigmoid => "sigmoid",
            Activation::Abs => "abs",
            Activation::Square => "square",
            Activation::Sin => "sin",
            Activation::Cos => "cos",
            Activation::Exp => "exp",
        };
        self.push(name, self.shape(x).to_vec(), data, Op::Unary(x, kind), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn hardswish(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Hardswish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Square)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Cos)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Exp)
    }

    /// `x^p` for non-negative `x`.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let xs = self.data(x);
        if let Some(v) = xs.iter().find(|v| **v < 0.0) {
            return Err(invalid("pow", format!("negative base {v}")));
        }
        let data = xs.iter().map(|v| v.powf(p)).collect();
        self.push("pow", self.shape(x).to_vec(), data, Op::Pow(x, p), &[x])
    }

    /// Elementwise `atan2(y, x)` in `(-π, π]`; defined as 0 where `x = y = 0`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        let shape = self.same_shape("atan2", y, x)?;
        let data: Vec<f64> = self
            .data(y)
            .iter()
            .zip(self.data(x))
            .map(|(&yi, &xi)| {
                if yi == 0.0 && xi == 0.0 {
                    0.0
                } else {
                    spectral::wrap_phase(yi.atan2(xi))
                }
            })
            .collect();
        if self.kinks.is_some() {
            // branch cut on the negative real axis
            let codes: Vec<u64> = self
                .data(y)
                .iter()
                .zip(self.data(x))
                .map(|(&yi, &xi)| u64::from(xi < 0.0) * 2 + u64::from(yi >= 0.0))
                .collect();
            codes.into_iter().for_each(|c| self.kink(c));
        }
        self.push("atan2", shape, data, Op::Atan2 { y, x }, &[y, x])
    }

    /// `|d - 2π·round(d / 2π)|`: distance between angles, insensitive to wrapping.
    pub fn anti_wrap(&mut self, x: Var) -> Result<Var> {
        let xs = self.data(x);
        let data: Vec<f64> = xs.iter().map(|&v| anti_wrap_value(v)).collect();
        if self.kinks.is_some() {
            let codes: Vec<u64> = xs
                .iter()
                .map(|&v| {
                    let r = (v / (2.0 * PI)).round();
                    (r as i64 as u64).wrapping_mul(3) ^ u64::from(v - 2.0 * PI * r >= 0.0)
                })
                .collect();
            codes.into_iter().for_each(|c| self.kink(c));
        }
        self.push("anti_wrap", self.shape(x).to_vec(), data, Op::AntiWrap(x), &[x])
    }

    // -- linear algebra -----------------------------------------------------

    /// Batched matrix product `[.., M, P] × [.., P, N] -> [.., M, N]`.
    ///
    /// Leading batch dims must be equal or 1 (or absent on one side).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (p2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if p != p2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            batch.push(x.max(y));
        }
        let total: usize = batch.iter().product();
        let (sta, stb) = (strides(&pa), strides(&pb));
        let mut pairs = Vec::with_capacity(total);
        for idx in 0..total {
            let (mut rem, mut ia, mut ib) = (idx, 0, 0);
            for d in (0..rank).rev() {
                let c = rem % batch[d];
                rem /= batch[d];
                if pa[d] != 1 {
                    ia += c * sta[d];
                }
                if pb[d] != 1 {
                    ib += c * stb[d];
                }
            }
            pairs.push((ia, ib));
        }
        let plan = MatMulPlan {
            m,
            p,
            n,
            pairs,
            a_batches: pa.iter().product(),
            b_batches: pb.iter().product(),
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; total * m * n];
        for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
            kernels::matmul_into(
                &mut out[bi * m * n..(bi + 1) * m * n],
                &ad[ia * m * p..(ia + 1) * m * p],
                &bd[ib * p * n..(ib + 1) * p * n],
                m,
                p,
                n,
            );
        }
        kernels::count_macs((total * m * p * n) as u64);
        let mut shape = batch;
        shape.extend([m, n]);
        self.push("matmul", shape, out, Op::MatMul { a, b, plan }, &[a, b])
    }

    /// 2-D convolution over `[B,C,T,F]` with weights `[O,C/g,kT,kF]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let geom = ConvGeom::for_conv(self.shape(x), self.shape(w), opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![geom.c_out],
                });
            }
        }
        let out = kernels::conv_forward(&geom, self.data(x), self.data(w), bias.map(|b| self.data(b)));
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv2d", geom.out_shape(), out, Op::Conv2d { x, w, bias, geom }, &inputs)
    }

    /// Transposed convolution, weights `[C_in, C_out/g, kT, kF]`.
    /// `output_padding` extends the bottom/right edge as in the usual definition.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        opts: Conv2dOptions,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let g = opts.groups;
        if sx.len() != 4 || sw.len() != 4 || g == 0 || sw[0] != sx[1] || sx[1] % g != 0 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if output_padding.0 >= opts.stride.0.max(opts.dilation.0) || output_padding.1 >= opts.stride.1.max(opts.dilation.1) {
            return Err(invalid("conv_transpose2d", "output_padding must be smaller than stride or dilation"));
        }
        let c_out = sw[1] * g;
        let out_len = |n: usize, k: usize, s: usize, p: usize, d: usize, op: usize| -> Option<usize> {
            ((n - 1) * s + d * (k - 1) + op + 1).checked_sub(2 * p).filter(|&v| v > 0)
        };
        let t_out = out_len(sx[2], sw[2], opts.stride.0, opts.padding.0, opts.dilation.0, output_padding.0);
        let f_out = out_len(sx[3], sw[3], opts.stride.1, opts.padding.1, opts.dilation.1, output_padding.1);
        let (Some(t_out), Some(f_out)) = (t_out, f_out) else {
            return Err(invalid("conv_transpose2d", "negative output size"));
        };
        // adjoint geometry: a forward conv from the output space back to x
        let geom = ConvGeom {
            batch: sx[0],
            c_in: c_out,
            t_in: t_out,
            f_in: f_out,
            c_out: sx[1],
            kt: sw[2],
            kf: sw[3],
            t_out: sx[2],
            f_out: sx[3],
            opts,
        };
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let mut out = kernels::conv_backward_input(&geom, self.data(w), self.data(x));
        if let Some(b) = bias {
            let plane = t_out * f_out;
            let bd = self.data(b);
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bd[i % c_out];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv_transpose2d", geom.in_shape(), out, Op::ConvTranspose2d { x, w, bias, geom }, &inputs)
    }

    /// Depthwise `k×k` convolution sampling each tap at a learned fractional
    /// offset with bilinear interpolation (zero outside the plane).
    ///
    /// `offsets` is `[B, 2·k·k, T, F]` with `(Δt, Δf)` pairs per tap, shared
    /// across channels; `w` is `[C, 1, k, k]`.
    pub fn deform_depthwise(&mut self, x: Var, offsets: Var, w: Var) -> Result<Var> {
        let (sx, so, sw) = (self.shape(x).to_vec(), self.shape(offsets).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[1] != 1 || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "deform_depthwise",
                lhs: sx,
                rhs: sw,
            });
        }
        let k = sw[2];
        if so != [sx[0], 2 * k * k, sx[2], sx[3]] {
            return Err(Error::ShapeMismatch {
                op: "deform_depthwise offsets",
                lhs: so,
                rhs: vec![sx[0], 2 * k * k, sx[2], sx[3]],
            });
        }
        if self.data(offsets).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "deform_depthwise offsets" });
        }
        let geom = DeformGeom {
            batch: sx[0],
            channels: sx[1],
            t: sx[2],
            f: sx[3],
            k,
        };
        if self.kinks.is_some() {
            let codes: Vec<u64> = self.data(offsets).iter().map(|v| v.floor() as i64 as u64).collect();
            codes.into_iter().for_each(|c| self.kink(c));
        }
        let out = kernels::deform_forward(&geom, self.data(x), self.data(offsets), self.data(w));
        self.push("deform_depthwise", sx, out, Op::DeformDepthwise { x, offsets, w, geom }, &[x, offsets, w])
    }

    // -- shape ops ------------------------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(x), &shape, perm);
        self.push("permute", out_shape, data, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d]) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid("narrow", format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", out_shape, data, Op::Narrow { x, axis, start }, &[x])
    }

    /// Expands size-1 dims to `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if src_shape.len() != shape.len() || src_shape.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src_shape,
                rhs: shape.to_vec(),
            });
        }
        let src_strides = strides(&src_shape);
        let n: usize = shape.iter().product();
        let src = self.data(x);
        let data = (0..n)
            .map(|i| src[broadcast_source(i, shape, &src_shape, &src_strides)])
            .collect();
        self.push("broadcast_to", shape.to_vec(), data, Op::Broadcast(x), &[x])
    }

    // -- reductions -----------------------------------------------------------

    /// Sum over `axis`, keeping it as size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..][..inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        self.push("sum_axis", out_shape, data, Op::SumAxis { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean over the spatial dims of `[B,C,T,F]`, giving `[B,C,1,1]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("adaptive_avg_pool", format!("expected [B,C,T,F], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let data = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push("adaptive_avg_pool", vec![s[0], s[1], 1, 1], data, Op::AvgPool(x), &[x])
    }

    // -- normalization ------------------------------------------------------

    /// Normalizes over the last dim, then applies the optional affine pair.
    /// A zero variance with `eps = 0` collapses the row to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let denom = (var + eps).sqrt();
            let rs = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            rstd[r] = rs;
            for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let gd = gamma.map(|g| self.data(g).to_vec());
        let bd = beta.map(|b| self.data(b).to_vec());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % c;
                h * gd.as_ref().map_or(1.0, |g| g[j]) + bd.as_ref().map_or(0.0, |b| b[j])
            })
            .collect();
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        self.push("layer_norm", shape, data, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &inputs)
    }

    /// `y[b,c,..] = x[b,c,..]·scale[c] + shift[c]` for `x` of rank ≥ 2.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("channel_affine", format!("rank {} < 2", shape.len())));
        }
        let c = shape[1];
        for p in [scale, shift].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "channel_affine",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let inner: usize = shape[2..].iter().product();
        let sd = scale.map(|s| self.data(s));
        let bd = shift.map(|b| self.data(b));
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                v * sd.map_or(1.0, |s| s[ch]) + bd.map_or(0.0, |b| b[ch])
            })
            .collect();
        let mut inputs = vec![x];
        inputs.extend(scale);
        inputs.extend(shift);
        self.push("channel_affine", shape, data, Op::ChannelAffine { x, scale, shift }, &inputs)
    }

    /// Per-channel PReLU over `[B,C,..]` with slopes `alpha: [C]`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(alpha) != [shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: shape,
                rhs: self.shape(alpha).to_vec(),
            });
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let a = self.data(alpha);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a[(i / inner) % c] * v })
            .collect();
        if self.kinks.is_some() {
            let codes: Vec<u64> = self.data(x).iter().map(|&v| u64::from(v >= 0.0)).collect();
            codes.into_iter().for_each(|k| self.kink(k));
        }
        self.push("prelu", shape, data, Op::Prelu { x, alpha }, &[x, alpha])
    }

    /// Rows of the last dim divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let src = self.data(x);
        let norms: Vec<f64> = src.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let data = src
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / d].max(eps))
            .collect();
        self.push("l2_normalize", shape, data, Op::L2Normalize { x, eps, norms }, &[x])
    }

    /// Differentiable inverse STFT of `[B,T,F]` real/imag planes into `[B,out_len]`.
    pub fn istft(&mut self, re: Var, im: Var, cfg: &StftConfig, out_len: usize) -> Result<Var> {
        let shape = self.same_shape("istft", re, im)?;
        if shape.len() != 3 || shape[2] != cfg.n_bins() {
            return Err(Error::ShapeMismatch {
                op: "istft",
                lhs: shape,
                rhs: vec![0, 0, cfg.n_bins()],
            });
        }
        let (batch, frames) = (shape[0], shape[1]);
        let per = frames * shape[2];
        let mut data = Vec::with_capacity(batch * out_len);
        for b in 0..batch {
            let r = &self.data(re)[b * per..(b + 1) * per];
            let i = &self.data(im)[b * per..(b + 1) * per];
            data.extend(spectral::istft_complex(r, i, frames, cfg, out_len)?);
        }
        self.push("istft", vec![batch, out_len], data, Op::Istft { re, im, cfg: *cfg, frames }, &[re, im])
    }

    // -- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Each node is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.numel());
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(db).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.iter().zip(da).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(db).map(|(g, y)| g / y).collect());
                }
                if self.wants(*b) {
                    let g = gy
                        .iter()
                        .zip(da.iter().zip(db))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gy.iter().map(|g| g * c).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::Unary(x, kind) => {
                let g = self
                    .data(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, g)| g * activation_derivative(*kind, v))
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Pow(x, p) => {
                let g = self
                    .data(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, g)| if v == 0.0 && *p < 1.0 { 0.0 } else { g * p * v.powf(p - 1.0) })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Atan2 { y, x } => {
                let (yd, xd) = (self.data(*y), self.data(*x));
                let r2 = |k: usize| xd[k] * xd[k] + yd[k] * yd[k];
                if self.wants(*y) {
                    let g = (0..gy.len()).map(|k| if r2(k) == 0.0 { 0.0 } else { gy[k] * xd[k] / r2(k) }).collect();
                    self.accumulate(grads, *y, g);
                }
                if self.wants(*x) {
                    let g = (0..gy.len()).map(|k| if r2(k) == 0.0 { 0.0 } else { -gy[k] * yd[k] / r2(k) }).collect();
                    self.accumulate(grads, *x, g);
                }
            }
            Op::AntiWrap(x) => {
                let g = self
                    .data(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, g)| {
                        let r = v - 2.0 * PI * (v / (2.0 * PI)).round();
                        if r > 0.0 {
                            *g
                        } else if r < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::MatMul { a, b, plan } => self.matmul_backward(*a, *b, plan, gy, grads),
            Op::Conv2d { x, w, bias, geom } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, kernels::conv_backward_input(geom, self.data(*w), gy));
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, kernels::conv_backward_weight(geom, self.data(*x), gy));
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, kernels::channel_sums(gy, geom.batch, geom.c_out));
                }
            }
            Op::ConvTranspose2d { x, w, bias, geom } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, kernels::conv_forward(geom, gy, self.data(*w), None));
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, kernels::conv_backward_weight(geom, gy, self.data(*x)));
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, kernels::channel_sums(gy, geom.batch, geom.c_in));
                }
            }
            Op::DeformDepthwise { x, offsets, w, geom } => {
                let g = kernels::deform_backward(geom, self.data(*x), self.data(*offsets), self.data(*w), gy);
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *offsets, g.doff);
                self.accumulate(grads, *w, g.dw);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let g = permute_data(gy, node.value.shape(), &inverse);
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            g.extend_from_slice(&gy[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, v, g);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src = self.shape(*x);
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut g = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * src[*axis] + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Broadcast(x) => {
                let src_shape = self.shape(*x).to_vec();
                let src_strides = strides(&src_shape);
                let mut g = vec![0.0; self.value(*x).numel()];
                for (k, gv) in gy.iter().enumerate() {
                    g[broadcast_source(k, node.value.shape(), &src_shape, &src_strides)] += gv;
                }
                self.accumulate(grads, *x, g);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[*axis];
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        g[(o * n + k) * inner..][..inner].copy_from_slice(&gy[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => self.accumulate(grads, *x, vec![gy[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gy[0] / n as f64; n]);
            }
            Op::AvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let g = (0..self.value(*x).numel()).map(|k| gy[k / plane] / plane as f64).collect();
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = *node.value.shape().last().unwrap();
                let gd = gamma.map(|g| self.data(g));
                if self.wants(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let rows = r * c..(r + 1) * c;
                        let dxhat: Vec<f64> = gy[rows.clone()]
                            .iter()
                            .enumerate()
                            .map(|(j, g)| g * gd.map_or(1.0, |gm| gm[j]))
                            .collect();
                        let h = &xhat[rows.clone()];
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in dx[rows].iter_mut().enumerate() {
                            *o = rs * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if let Some(g) = gamma {
                    let mut dg = vec![0.0; c];
                    for (k, (gv, h)) in gy.iter().zip(xhat).enumerate() {
                        dg[k % c] += gv * h;
                    }
                    self.accumulate(grads, *g, dg);
                }
                if let Some(b) = beta {
                    let mut db = vec![0.0; c];
                    for (k, gv) in gy.iter().enumerate() {
                        db[k % c] += gv;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let shape = node.value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let ch = |k: usize| (k / inner) % c;
                if self.wants(*x) {
                    let sd = scale.map(|s| self.data(s));
                    let g = gy.iter().enumerate().map(|(k, g)| g * sd.map_or(1.0, |s| s[ch(k)])).collect();
                    self.accumulate(grads, *x, g);
                }
                if let Some(s) = scale {
                    let xd = self.data(*x);
                    let mut ds = vec![0.0; c];
                    for (k, g) in gy.iter().enumerate() {
                        ds[ch(k)] += g * xd[k];
                    }
                    self.accumulate(grads, *s, ds);
                }
                if let Some(b) = shift {
                    let mut db = vec![0.0; c];
                    for (k, g) in gy.iter().enumerate() {
                        db[ch(k)] += g;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Prelu { x, alpha } => {
                let shape = node.value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let (xd, ad) = (self.data(*x), self.data(*alpha));
                if self.wants(*x) {
                    let g = gy
                        .iter()
                        .enumerate()
                        .map(|(k, g)| if xd[k] >= 0.0 { *g } else { g * ad[(k / inner) % c] })
                        .collect();
                    self.accumulate(grads, *x, g);
                }
                if self.wants(*alpha) {
                    let mut da = vec![0.0; c];
                    for (k, g) in gy.iter().enumerate() {
                        if xd[k] < 0.0 {
                            da[(k / inner) % c] += g * xd[k];
                        }
                    }
                    self.accumulate(grads, *alpha, da);
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                let d = *node.value.shape().last().unwrap();
                let (xd, yd) = (self.data(*x), node.value.data());
                let mut g = vec![0.0; gy.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    if n > *eps {
                        let dot: f64 = gy[rows.clone()].iter().zip(&yd[rows.clone()]).map(|(a, b)| a * b).sum();
                        for k in rows {
                            g[k] = (gy[k] - yd[k] * dot) / n;
                        }
                    } else {
                        for k in rows {
                            g[k] = gy[k] / eps;
                        }
                    }
                }
                let _ = xd;
                self.accumulate(grads, *x, g);
            }
            Op::Istft { re, im, cfg, frames } => {
                let shape = self.shape(*re);
                let per = shape[1] * shape[2];
                let out_len = node.value.shape()[1];
                let mut dre = Vec::with_capacity(shape[0] * per);
                let mut dim = Vec::with_capacity(shape[0] * per);
                for b in 0..shape[0] {
                    let (r, i) = spectral::istft_adjoint(&gy[b * out_len..(b + 1) * out_len], *frames, cfg)?;
                    dre.extend(r);
                    dim.extend(i);
                }
                self.accumulate(grads, *re, dre);
                self.accumulate(grads, *im, dim);
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, plan: &MatMulPlan, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let MatMulPlan { m, p, n, .. } = *plan;
        let (ad, bd) = (self.data(a), self.data(b));
        if self.wants(a) {
            let mut ga = vec![0.0; plan.a_batches * m * p];
            let mut tmp = vec![0.0; m * p];
            for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                let bt = kernels::transpose(&bd[ib * p * n..(ib + 1) * p * n], p, n);
                kernels::matmul_into(&mut tmp, &gy[bi * m * n..(bi + 1) * m * n], &bt, m, n, p);
                ga[ia * m * p..(ia + 1) * m * p].iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
            }
            self.accumulate(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = vec![0.0; plan.b_batches * p * n];
            let mut tmp = vec![0.0; p * n];
            for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                let at = kernels::transpose(&ad[ia * m * p..(ia + 1) * m * p], m, p);
                kernels::matmul_into(&mut tmp, &at, &gy[bi * m * n..(bi + 1) * m * n], p, m, n);
                gb[ib * p * n..(ib + 1) * p * n].iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
            }
            self.accumulate(grads, b, gb);
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = (0..rank).map(|d| idx[d] * src_strides[perm[d]]).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_source(flat: usize, shape: &[usize], src_shape: &[usize], src_strides: &[usize]) -> usize {
    let mut rem = flat;
    let mut off = 0;
    for d in (0..shape.len()).rev() {
        let c = rem % shape[d];
        rem /= shape[d];
        if src_shape[d] != 1 {
            off += c * src_strides[d];
        }
    }
    off
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn activation_forward(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
        Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Abs => x.abs(),
        Activation::Square => x * x,
        Activation::Sin => x.sin(),
        Activation::Cos => x.cos(),
        Activation::Exp => x.exp(),
    }
}

fn activation_derivative(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => {
            let u = GELU_K * (x + GELU_C * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
        }
        Activation::Hardswish => {
            if x < -3.0 {
                0.0
            } else if x > 3.0 {
                1.0
            } else {
                (2.0 * x + 3.0) / 6.0
            }
        }
        Activation::Sigmoid => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 - s)
        }
        Activation::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Activation::Square => 2.0 * x,
        Activation::Sin => x.cos(),
        Activation::Cos => -x.sin(),
        Activation::Exp => x.exp(),
    }
}

fn activation_branch(kind: Activation, x: f64) -> u64 {
    match kind {
        Activation::Hardswish => {
            if x < -3.0 {
                0
            } else if x <= 3.0 {
                1
            } else {
                2
            }
        }
        Activation::Abs => u64::from(x >= 0.0),
        _ => 0,
    }
}

pub(crate) fn anti_wrap_value(x: f64) -> f64 {
    (x - 2.0 * PI * (x / (2.0 * PI)).round()).abs()
}
