//! Multi-path enhanced Taylor transformer block.
//!
//! Three branches read the same channel-normalized input: Taylor multi-head
//! attention over all time-frequency positions, a pooled 1×1 channel mixer,
//! and a pointwise + depthwise spatial path. Their elementwise product is
//! added back to the input, followed by a pre-norm feed-forward residual.

use crate::attention::{AttentionConfig, NORMALIZE_EPS};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::Conv2dOptions;
use crate::nn::{ChannelNorm, Conv2d};
use crate::params::ParamStore;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetBlockConfig {
    pub channels: usize,
    pub attention: AttentionConfig,
    pub ffn_expansion: usize,
    pub spatial_kernel: usize,
}

impl MetBlockConfig {
    pub fn new(channels: usize, attention: AttentionConfig, ffn_expansion: usize) -> Self {
        Self {
            channels,
            attention,
            ffn_expansion,
            spatial_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.head_dim(self.channels)?;
        if self.ffn_expansion == 0 {
            return Err(invalid("met block", "ffn_expansion must be >= 1"));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(invalid("met block", "spatial kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MetBlock {
    pub cfg: MetBlockConfig,
    pub norm1: ChannelNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub channel: Conv2d,
    pub spatial_pw: Conv2d,
    pub spatial_dw: Conv2d,
    pub norm2: ChannelNorm,
    pub ffn_in: Conv2d,
    pub ffn_out: Conv2d,
}

impl MetBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: MetBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let k = cfg.spatial_kernel;
        let hidden = c * cfg.ffn_expansion;
        Ok(Self {
            cfg,
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), c),
            qkv: Conv2d::pointwise(store, rng, &format!("{name}.qkv"), c, 3 * c),
            proj: Conv2d::pointwise(store, rng, &format!("{name}.proj"), c, c),
            channel: Conv2d::pointwise(store, rng, &format!("{name}.channel"), c, c),
            spatial_pw: Conv2d::pointwise(store, rng, &format!("{name}.spatial_pw"), c, c),
            spatial_dw: Conv2d::new(
                store,
                rng,
                &format!("{name}.spatial_dw"),
                c,
                c,
                (k, k),
                Conv2dOptions::default().padding(k / 2, k / 2).groups(c),
                true,
            ),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), c),
            ffn_in: Conv2d::pointwise(store, rng, &format!("{name}.ffn_in"), c, hidden),
            ffn_out: Conv2d::pointwise(store, rng, &format!("{name}.ffn_out"), hidden, c),
        })
    }

    fn dims(&self, g: &Graph, x: Var) -> Result<[usize; 4]> {
        match *g.shape(x) {
            [b, c, t, f] if c == self.cfg.channels => Ok([b, c, t, f]),
            _ => Err(Error::ShapeMismatch {
                op: "met block",
                lhs: g.shape(x).to_vec(),
                rhs: vec![0, self.cfg.channels, 0, 0],
            }),
        }
    }

    /// Taylor multi-head attention over the `T·F` positions of each head.
    pub fn tmsa_branch(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let [b, c, t, f] = self.dims(g, u)?;
        let att = self.cfg.attention;
        let heads = att.heads;
        let d = att.head_dim(c)?;
        let n = t * f;
        let qkv = self.qkv.forward(g, u)?;
        let split = |g: &mut Graph, i: usize| -> Result<Var> {
            let part = g.narrow(qkv, 1, i * c, c)?;
            let r = g.reshape(part, &[b, heads, d, n])?;
            g.permute(r, &[0, 1, 3, 2])
        };
        let (mut q, mut k, v) = (split(g, 0)?, split(g, 1)?, split(g, 2)?);
        if att.normalize_qk {
            q = g.l2_normalize(q, NORMALIZE_EPS)?;
            k = g.l2_normalize(k, NORMALIZE_EPS)?;
        }
        let kt = g.permute(k, &[0, 1, 3, 2])?;
        let kv = g.matmul(kt, v)?;
        let qkv_term = g.matmul(q, kv)?;
        let v_sum = g.sum_axis(v, 2)?;
        let v_sum = g.broadcast_to(v_sum, &[b, heads, n, d])?;
        let num = g.add(qkv_term, v_sum)?;
        let k_sum = g.sum_axis(k, 2)?;
        let k_sum = g.permute(k_sum, &[0, 1, 3, 2])?;
        let qk = g.matmul(q, k_sum)?;
        if !att.normalize_qk {
            let raw = g.value(qk).data().iter().map(|v| v + n as f64).find(|v| v.abs() < att.eps);
            if let Some(value) = raw {
                return Err(Error::DegenerateDenominator { value });
            }
        }
        let den = g.add_scalar(qk, n as f64 + att.eps)?;
        let den = g.broadcast_to(den, &[b, heads, n, d])?;
        let out = g.div(num, den)?;
        let out = g.permute(out, &[0, 1, 3, 2])?;
        let out = g.reshape(out, &[b, c, t, f])?;
        self.proj.forward(g, out)
    }

    /// Global average pool followed by a 1×1 channel mix; `[B,C,1,1]`.
    pub fn channel_branch(&self, g: &mut Graph, u: Var) -> Result<Var> {
        self.dims(g, u)?;
        let pooled = g.adaptive_avg_pool(u)?;
        self.channel.forward(g, pooled)
    }

    /// Pointwise conv, GELU, then depthwise conv; shape preserving.
    pub fn spatial_branch(&self, g: &mut Graph, u: Var) -> Result<Var> {
        self.dims(g, u)?;
        let p = self.spatial_pw.forward(g, u)?;
        let a = g.gelu(p)?;
        self.spatial_dw.forward(g, a)
    }

    pub fn ffn(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ffn_in.forward(g, x)?;
        let h = g.gelu(h)?;
        self.ffn_out.forward(g, h)
    }

    /// Product of the three branches on `LN(x)` (the channel branch is
    /// broadcast over T and F).
    pub fn gated_branches(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = self.dims(g, x)?;
        let u = self.norm1.forward(g, x)?;
        let attn = self.tmsa_branch(g, u)?;
        let chan = self.channel_branch(g, u)?;
        let chan = g.broadcast_to(chan, &shape)?;
        let spat = self.spatial_branch(g, u)?;
        let m = g.mul(attn, chan)?;
        g.mul(m, spat)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let m = self.gated_branches(g, x)?;
        let y1 = g.add(x, m)?;
        let n2 = self.norm2.forward(g, y1)?;
        let h = self.ffn(g, n2)?;
        g.add(y1, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{multi_head, taylor_attention_direct};
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn block(c: usize, attention: AttentionConfig) -> (ParamStore, MetBlock) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let b = MetBlock::new(&mut store, &mut rng, "met", MetBlockConfig::new(c, attention, 2)).unwrap();
        (store, b)
    }

    fn set_identity(store: &mut ParamStore, conv: &Conv2d) {
        let w = store.get_mut(conv.weight);
        let c = w.shape()[0];
        w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i / c == i % c { 1.0 } else { 0.0 });
        if let Some(b) = conv.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    #[test]
    fn parameter_count_formula() {
        for (c, e) in [(4, 1), (16, 2), (48, 3)] {
            let mut store = ParamStore::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            MetBlock::new(&mut store, &mut rng, "m", MetBlockConfig::new(c, AttentionConfig::default(), e)).unwrap();
            assert_eq!(store.count(), (6 + 2 * e) * c * c + (21 + e) * c);
        }
    }

    #[test]
    fn attention_branch_matches_quadratic_oracle() {
        let (b, c, t, f) = (2, 8, 3, 5);
        let (mut store, blk) = block(c, AttentionConfig::default());
        set_identity(&mut store, &blk.proj);
        let u = rand_tensor(&[b, c, t, f], 1);
        let mut g = Graph::default();
        g.bind_params(&store);
        let uv = g.constant(u);
        let out = blk.tmsa_branch(&mut g, uv).unwrap();
        let qkv = blk.qkv.forward(&mut g, uv).unwrap();
        let (qkv, out) = (g.value(qkv).clone(), g.value(out).clone());
        let n = t * f;
        for bi in 0..b {
            // Token-major [N, C] slices of q, k, v for this batch entry.
            let rows = |part: usize| {
                Tensor::from_fn(&[n, c], |i| qkv.get(&[bi, part * c + i % c, (i / c) / f, (i / c) % f]))
            };
            let cfg = blk.cfg.attention;
            let oracle = multi_head(&rows(0), &rows(1), &rows(2), cfg.heads, |q, k, v| {
                taylor_attention_direct(q, k, v, &cfg)
            })
            .unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let got = out.get(&[bi, ch, i / f, i % f]);
                    assert!((got - oracle.get(&[i, ch])).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_spatial_branch_leaves_only_ffn_residual() {
        let (mut store, blk) = block(4, AttentionConfig::default());
        store.get_mut(blk.spatial_dw.weight).data_mut().fill(0.0);
        store.get_mut(blk.spatial_dw.bias.unwrap()).data_mut().fill(0.0);
        let x = rand_tensor(&[1, 4, 3, 4], 2);
        let mut g = Graph::default();
        g.bind_params(&store);
        let xv = g.constant(x.clone());
        let m = blk.gated_branches(&mut g, xv).unwrap();
        assert_eq!(g.value(m).max_abs(), 0.0);
        let y = blk.forward(&mut g, xv).unwrap();
        let n = blk.norm2.forward(&mut g, xv).unwrap();
        let h = blk.ffn(&mut g, n).unwrap();
        let want = g.add(xv, h).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(want)) < 1e-15);
    }

    #[test]
    fn channel_branch_is_spatially_constant() {
        let (store, blk) = block(4, AttentionConfig::default());
        let mut g = Graph::default();
        g.bind_params(&store);
        let u = g.constant(rand_tensor(&[2, 4, 3, 5], 3));
        let ch = blk.channel_branch(&mut g, u).unwrap();
        assert_eq!(g.shape(ch), &[2, 4, 1, 1]);
    }

    #[test]
    fn forward_preserves_shape_and_rejects_wrong_channels() {
        let (store, blk) = block(4, AttentionConfig::default());
        let mut g = Graph::default();
        g.bind_params(&store);
        let x = g.constant(rand_tensor(&[1, 4, 2, 6], 4));
        let y = blk.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 2, 6]);
        let bad = g.constant(rand_tensor(&[1, 3, 2, 6], 5));
        assert!(matches!(blk.forward(&mut g, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_heads_not_dividing_channels() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let att = AttentionConfig { heads: 3, ..Default::default() };
        assert!(MetBlock::new(&mut store, &mut rng, "m", MetBlockConfig::new(4, att, 1)).is_err());
    }

    #[test]
    fn vanishing_normalizer_is_reported() {
        let att = AttentionConfig {
            normalize_qk: false,
            ..Default::default()
        };
        let (mut store, blk) = block(4, att);
        // q = 1 and k = -1/D in every channel, so q·k = -1 per head and the
        // normalizer N + q·Σk is exactly zero.
        store.get_mut(blk.qkv.weight).data_mut().fill(0.0);
        let bias = store.get_mut(blk.qkv.bias.unwrap()).data_mut();
        bias[..4].fill(1.0);
        bias[4..8].fill(-0.5);
        let mut g = Graph::default();
        g.bind_params(&store);
        let u = g.constant(rand_tensor(&[1, 4, 2, 3], 6));
        assert!(matches!(blk.tmsa_branch(&mut g, u), Err(Error::DegenerateDenominator { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, blk) = block(4, AttentionConfig::default());
        let x = rand_tensor(&[1, 4, 3, 4], 7);
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let rep = grad_check(
            |g, v| {
                g.bind_vars(&v[1..]);
                let y = blk.forward(g, v[0])?;
                let sq = g.square(y)?;
                g.mean(sq)
            },
            &inputs,
            &GradCheckConfig {
                max_samples: 300,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
