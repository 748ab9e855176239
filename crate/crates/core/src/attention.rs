//! Softmax attention reference, first-order Taylor attention in quadratic
//! (direct) and linear (reassociated) form, and the analytic cost model of
//! both mechanisms.
//!
//! All functions take row-major `[N, D]` matrices: row `i` of `Q`, `K`, `V`
//! is the query, key and value of token `i`.

use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Denominator guard added to every row normalizer.
    pub eps: f64,
    /// L2-normalize query and key rows so that every weight `1 + q·k` is in `[0, 2]`.
    pub normalize_qk: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            eps: 1e-6,
            normalize_qk: true,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self, channels: usize) -> Result<usize> {
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(invalid(
                "attention",
                format!("{} heads do not divide {channels} channels", self.heads),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("attention", format!("eps must be positive, got {}", self.eps)));
        }
        Ok(channels / self.heads)
    }
}

/// Row-normalization guard used when `normalize_qk` is on.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Softmax,
    Taylor,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Softmax => "msa",
            AttentionKind::Taylor => "tmsa",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "msa" | "softmax" => Ok(Self::Softmax),
            "tmsa" | "taylor" => Ok(Self::Taylor),
            other => Err(format!("unknown attention kind `{other}`")),
        }
    }
}

struct Mats<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    n: usize,
    d: usize,
}

fn check_qkv<'a>(q: &'a Tensor, k: &'a Tensor, v: &'a Tensor) -> Result<Mats<'a>> {
    let s = q.shape();
    if s.len() != 2 || k.shape() != s || v.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: s.to_vec(),
            rhs: if k.shape() != s { k.shape().to_vec() } else { v.shape().to_vec() },
        });
    }
    Ok(Mats {
        q: q.data(),
        k: k.data(),
        v: v.data(),
        n: s[0],
        d: s[1],
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_rows(x: &[f64], d: usize, macs: &mut u64) -> Vec<f64> {
    *macs += x.len() as u64;
    x.chunks(d)
        .flat_map(|r| {
            let n = dot(r, r).sqrt().max(NORMALIZE_EPS);
            r.iter().map(move |v| v / n)
        })
        .collect()
}

/// Row-stochastic weights `softmax_j(q_i·k_j/√D)`, `[N, N]`.
pub fn softmax_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, k)?;
    let mut macs = 0;
    let w = softmax_weights_counted(q.data(), k.data(), q.shape()[0], q.shape()[1], &mut macs);
    Tensor::new(vec![q.shape()[0]; 2], w)
}

fn softmax_weights_counted(q: &[f64], k: &[f64], n: usize, d: usize, macs: &mut u64) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut w[i * n..(i + 1) * n];
        let qi = &q[i * d..(i + 1) * d];
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|r| *r = (*r - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= s);
    }
    *macs += (n * n * d + 2 * n * n) as u64;
    w
}

/// `out_i = Σ_j softmax_j(q_i·k_j/√D) v_j`.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut macs = 0;
    softmax_attention_counted(q, k, v, &mut macs)
}

fn softmax_attention_counted(q: &Tensor, k: &Tensor, v: &Tensor, macs: &mut u64) -> Result<Tensor> {
    let m = check_qkv(q, k, v)?;
    let w = softmax_weights_counted(m.q, m.k, m.n, m.d, macs);
    let out = weighted_sum(&w, m.v, m.n, m.d, macs);
    Tensor::new(vec![m.n, m.d], out)
}

fn weighted_sum(w: &[f64], v: &[f64], n: usize, d: usize, macs: &mut u64) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            let wij = w[i * n + j];
            for (x, vv) in o.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *x += wij * vv;
            }
        }
    }
    *macs += (n * n * d) as u64;
    out
}

fn prepared<'a>(m: &Mats<'a>, cfg: &AttentionConfig, macs: &mut u64) -> (std::borrow::Cow<'a, [f64]>, std::borrow::Cow<'a, [f64]>) {
    if cfg.normalize_qk {
        (normalize_rows(m.q, m.d, macs).into(), normalize_rows(m.k, m.d, macs).into())
    } else {
        (m.q.into(), m.k.into())
    }
}

fn check_denominator(raw: f64, cfg: &AttentionConfig) -> Result<()> {
    if !cfg.normalize_qk && raw.abs() < cfg.eps {
        return Err(Error::DegenerateDenominator { value: raw });
    }
    Ok(())
}

/// First-order Taylor weights `1 + q_i·k_j`, `[N, N]`, after the optional
/// row normalization. Rows are not divided by their sums.
pub fn taylor_weights(q: &Tensor, k: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let m = check_qkv(q, k, k)?;
    let mut macs = 0;
    let (qn, kn) = prepared(&m, cfg, &mut macs);
    let w = (0..m.n * m.n)
        .map(|ij| 1.0 + dot(&qn[(ij / m.n) * m.d..][..m.d], &kn[(ij % m.n) * m.d..][..m.d]))
        .collect();
    Tensor::new(vec![m.n, m.n], w)
}

/// Quadratic evaluation `out_i = Σ_j (1 + q_i·k_j) v_j / (Σ_j (1 + q_i·k_j) + eps)`.
pub fn taylor_attention_direct(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let mut macs = 0;
    taylor_direct_counted(q, k, v, cfg, &mut macs)
}

fn taylor_direct_counted(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig, macs: &mut u64) -> Result<Tensor> {
    let m = check_qkv(q, k, v)?;
    let (qn, kn) = prepared(&m, cfg, macs);
    let mut out = vec![0.0; m.n * m.d];
    for i in 0..m.n {
        let qi = &qn[i * m.d..(i + 1) * m.d];
        let mut den = 0.0;
        let o = &mut out[i * m.d..(i + 1) * m.d];
        for j in 0..m.n {
            let w = 1.0 + dot(qi, &kn[j * m.d..(j + 1) * m.d]);
            den += w;
            for (x, vv) in o.iter_mut().zip(&m.v[j * m.d..(j + 1) * m.d]) {
                *x += w * vv;
            }
        }
        check_denominator(den, cfg)?;
        o.iter_mut().for_each(|x| *x /= den + cfg.eps);
    }
    *macs += (2 * m.n * m.n * m.d + m.n * m.d) as u64;
    Tensor::new(vec![m.n, m.d], out)
}

/// Linear-cost evaluation of the same quantity by reassociating the sums:
/// `out_i = (S_v + q_i·S_kv) / (N + q_i·S_k + eps)` with `S_v = Σ v_j`,
/// `S_kv = Σ k_j v_jᵀ`, `S_k = Σ k_j`. Never forms the `N×N` matrix.
pub fn taylor_attention_linear(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let mut macs = 0;
    taylor_linear_counted(q, k, v, cfg, &mut macs)
}

fn taylor_linear_counted(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig, macs: &mut u64) -> Result<Tensor> {
    let m = check_qkv(q, k, v)?;
    let d = m.d;
    let (qn, kn) = prepared(&m, cfg, macs);
    let mut s_v = vec![0.0; d];
    let mut s_k = vec![0.0; d];
    let mut s_kv = vec![0.0; d * d];
    for j in 0..m.n {
        let kj = &kn[j * d..(j + 1) * d];
        let vj = &m.v[j * d..(j + 1) * d];
        for a in 0..d {
            s_v[a] += vj[a];
            s_k[a] += kj[a];
            let row = &mut s_kv[a * d..(a + 1) * d];
            for (r, vb) in row.iter_mut().zip(vj) {
                *r += kj[a] * vb;
            }
        }
    }
    let mut out = vec![0.0; m.n * d];
    for i in 0..m.n {
        let qi = &qn[i * d..(i + 1) * d];
        let raw = m.n as f64 + dot(qi, &s_k);
        check_denominator(raw, cfg)?;
        let den = raw + cfg.eps;
        let o = &mut out[i * d..(i + 1) * d];
        o.copy_from_slice(&s_v);
        for (a, &qa) in qi.iter().enumerate() {
            for (x, kv) in o.iter_mut().zip(&s_kv[a * d..(a + 1) * d]) {
                *x += qa * kv;
            }
        }
        o.iter_mut().for_each(|x| *x /= den);
    }
    *macs += (2 * m.n * d * d + 4 * m.n * d) as u64;
    Tensor::new(vec![m.n, d], out)
}

/// Splits the channel axis of `[N, H·D]` inputs into `heads` independent
/// problems, runs `f` on each (possibly concurrently) and re-concatenates.
pub fn multi_head<F>(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + Sync + Send,
{
    let m = check_qkv(q, k, v)?;
    if heads == 0 || m.d % heads != 0 {
        return Err(invalid("multi_head", format!("{heads} heads do not divide {} channels", m.d)));
    }
    let hd = m.d / heads;
    let split = |x: &[f64], h: usize| -> Tensor {
        let data = (0..m.n).flat_map(|i| x[i * m.d + h * hd..i * m.d + (h + 1) * hd].iter().copied()).collect();
        Tensor::new(vec![m.n, hd], data).expect("head slice shape")
    };
    let outs = exec::map_indices(heads, |h| f(&split(m.q, h), &split(m.k, h), &split(m.v, h)));
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut data = vec![0.0; m.n * m.d];
    for (h, o) in outs.iter().enumerate() {
        for i in 0..m.n {
            data[i * m.d + h * hd..i * m.d + (h + 1) * hd].copy_from_slice(&o.data()[i * hd..(i + 1) * hd]);
        }
    }
    Tensor::new(vec![m.n, m.d], data)
}

// ---------------------------------------------------------------------------
// cost model

/// Analytic and measured operation counts for one attention invocation over
/// a `t × f` patch grid with head width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub kind: AttentionKind,
    pub t: u64,
    pub f: u64,
    pub d: u64,
    pub analytic_msa: u128,
    pub analytic_tmsa: u128,
    pub measured: u64,
}

impl FlopReport {
    pub fn analytic(&self) -> u128 {
        match self.kind {
            AttentionKind::Softmax => self.analytic_msa,
            AttentionKind::Taylor => self.analytic_tmsa,
        }
    }

    pub const CSV_HEADER: &'static str = "kind,t,f,D,analytic,measured";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.kind.label(),
            self.t,
            self.f,
            self.d,
            self.analytic(),
            self.measured
        )
    }
}

/// `4tfD² + 2t²f²D` for softmax attention, `18tfD + 2tfD²` for Taylor attention.
pub fn complexity_estimate(kind: AttentionKind, t: u64, f: u64, d: u64) -> Result<u128> {
    if t == 0 || f == 0 || d == 0 {
        return Err(invalid("complexity_estimate", "t, f and D must be positive"));
    }
    let (tf, d) = (t as u128 * f as u128, d as u128);
    let v = match kind {
        AttentionKind::Softmax => 4 * tf * d * d + 2 * tf * tf * d,
        AttentionKind::Taylor => 18 * tf * d + 2 * tf * d * d,
    };
    Ok(v)
}

/// Runs the instrumented kernel on random `[t·f, d]` inputs and reports the
/// number of multiply-accumulates it performed.
pub fn measure_flops(kind: AttentionKind, t: u64, f: u64, d: u64, seed: u64) -> Result<FlopReport> {
    let analytic_msa = complexity_estimate(AttentionKind::Softmax, t, f, d)?;
    let analytic_tmsa = complexity_estimate(AttentionKind::Taylor, t, f, d)?;
    let n = (t * f) as usize;
    let d_us = d as usize;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand = || Tensor::from_fn(&[n, d_us], |_| rng.gen_range(-1.0..1.0));
    let (q, k, v) = (rand(), rand(), rand());
    let mut macs = 0;
    match kind {
        AttentionKind::Softmax => softmax_attention_counted(&q, &k, &v, &mut macs)?,
        AttentionKind::Taylor => taylor_linear_counted(&q, &k, &v, &AttentionConfig::default(), &mut macs)?,
    };
    Ok(FlopReport {
        kind,
        t,
        f,
        d,
        analytic_msa,
        analytic_tmsa,
        measured: macs,
    })
}

/// Smallest `tf` (searched up to `limit`) at which the analytic cost of
/// softmax attention exceeds `factor` times that of Taylor attention.
pub fn crossover_tf(d: u64, factor: u128, limit: u64) -> Option<u64> {
    (1..=limit).find(|&tf| {
        let msa = complexity_estimate(AttentionKind::Softmax, tf, 1, d).unwrap();
        let tmsa = complexity_estimate(AttentionKind::Taylor, tf, 1, d).unwrap();
        msa > factor * tmsa
    })
}
