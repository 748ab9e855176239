//! Raw slice kernels behind the differentiable ops: batched matmul, grouped
//! dilated convolution (forward and both adjoints) and bilinear deformable
//! depthwise convolution.
//!
//! Every kernel writes disjoint output chunks with a fixed accumulation
//! order, so results do not depend on the thread count.

use crate::error::{invalid, Error, Result};
use crate::exec;
use std::sync::atomic::{AtomicU64, Ordering};

static MAC_COUNT: AtomicU64 = AtomicU64::new(0);

/// Adds to the global multiply-accumulate counter (used by the flop probes).
#[inline]
pub(crate) fn count_macs(n: u64) {
    MAC_COUNT.fetch_add(n, Ordering::Relaxed);
}

pub fn mac_count() -> u64 {
    MAC_COUNT.load(Ordering::Relaxed)
}

// ---------------------------------------------------------------------------
// matmul

/// `out[m,n] = Σ_p a[m,p] b[p,n]` for one matrix pair.
pub(crate) fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, p: usize, n: usize) {
    exec::for_each_chunk(out, n, |i, row| {
        row.fill(0.0);
        let arow = &a[i * p..(i + 1) * p];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    let _ = m;
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn padding(mut self, t: usize, f: usize) -> Self {
        self.padding = (t, f);
        self
    }
    pub fn stride(mut self, t: usize, f: usize) -> Self {
        self.stride = (t, f);
        self
    }
    pub fn dilation(mut self, t: usize, f: usize) -> Self {
        self.dilation = (t, f);
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// Geometry of a forward convolution `[B,C,T,F] * [O,C/g,kT,kF] -> [B,O,T',F']`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub f_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub kf: usize,
    pub t_out: usize,
    pub f_out: usize,
    pub opts: Conv2dOptions,
}

pub(crate) fn conv_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span || stride == 0 {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

impl ConvGeom {
    pub fn for_conv(x: &[usize], w: &[usize], opts: Conv2dOptions) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let g = opts.groups;
        if g == 0 || x[1] % g != 0 || w[0] % g != 0 {
            return Err(invalid(
                "conv2d",
                format!("groups {g} must divide input channels {} and output channels {}", x[1], w[0]),
            ));
        }
        if w[1] * g != x[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let (st, sf) = opts.stride;
        let (pt, pf) = opts.padding;
        let (dt, df) = opts.dilation;
        let t_out = conv_out_len(x[2], w[2], st, pt, dt);
        let f_out = conv_out_len(x[3], w[3], sf, pf, df);
        match (t_out, f_out) {
            (Some(t_out), Some(f_out)) if dt > 0 && df > 0 => Ok(Self {
                batch: x[0],
                c_in: x[1],
                t_in: x[2],
                f_in: x[3],
                c_out: w[0],
                kt: w[2],
                kf: w[3],
                t_out,
                f_out,
                opts,
            }),
            _ => Err(invalid(
                "conv2d",
                format!("kernel {:?} does not fit padded input {:?} with {opts:?}", &w[2..], &x[2..]),
            )),
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.t_out, self.f_out]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_in, self.t_in, self.f_in]
    }

    fn cpg_in(&self) -> usize {
        self.c_in / self.opts.groups
    }

    fn cpg_out(&self) -> usize {
        self.c_out / self.opts.groups
    }

    /// Input row hit by output row `o` and kernel tap `k` along T.
    #[inline]
    fn src_t(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.opts.stride.0 + k * self.opts.dilation.0) as isize - self.opts.padding.0 as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }

    /// Output columns `[lo, hi)` whose tap `k` lands inside the input along F.
    #[inline]
    fn f_range(&self, k: usize) -> (usize, usize) {
        let (s, p, d) = (self.opts.stride.1, self.opts.padding.1, self.opts.dilation.1);
        let off = k * d;
        let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
        let last = self.f_in + p;
        if last <= off {
            return (0, 0);
        }
        let hi = ((last - 1 - off) / s + 1).min(self.f_out);
        (lo.min(hi), hi)
    }

    #[inline]
    fn src_f(&self, o: usize, k: usize) -> usize {
        o * self.opts.stride.1 + k * self.opts.dilation.1 - self.opts.padding.1
    }

    fn w_index(&self, o: usize, ci: usize, kt: usize, kf: usize) -> usize {
        ((o * self.cpg_in() + ci) * self.kt + kt) * self.kf + kf
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_in = g.t_in * g.f_in;
    let plane_out = g.t_out * g.f_out;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    count_macs((out.len() * g.cpg_in() * g.kt * g.kf) as u64);
    exec::for_each_chunk(&mut out, plane_out, |idx, plane| {
        let (b, o) = (idx / g.c_out, idx % g.c_out);
        let grp = o / g.cpg_out();
        plane.fill(bias.map_or(0.0, |bv| bv[o]));
        for ci in 0..g.cpg_in() {
            let c = grp * g.cpg_in() + ci;
            let xp = &x[(b * g.c_in + c) * plane_in..][..plane_in];
            for kt in 0..g.kt {
                for kf in 0..g.kf {
                    let wv = w[g.w_index(o, ci, kt, kf)];
                    let (lo, hi) = g.f_range(kf);
                    for ot in 0..g.t_out {
                        let Some(it) = g.src_t(ot, kt) else { continue };
                        let xrow = &xp[it * g.f_in..(it + 1) * g.f_in];
                        let orow = &mut plane[ot * g.f_out..(ot + 1) * g.f_out];
                        for of in lo..hi {
                            orow[of] += wv * xrow[g.src_f(of, kf)];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`conv_forward`] with respect to its input (also the forward
/// pass of a transposed convolution).
pub(crate) fn conv_backward_input(g: &ConvGeom, w: &[f64], dy: &[f64]) -> Vec<f64> {
    let plane_in = g.t_in * g.f_in;
    let plane_out = g.t_out * g.f_out;
    let mut dx = vec![0.0; g.batch * g.c_in * plane_in];
    count_macs((dy.len() * g.cpg_in() * g.kt * g.kf) as u64);
    exec::for_each_chunk(&mut dx, plane_in, |idx, plane| {
        let (b, c) = (idx / g.c_in, idx % g.c_in);
        let grp = c / g.cpg_in();
        let ci = c % g.cpg_in();
        for o in grp * g.cpg_out()..(grp + 1) * g.cpg_out() {
            let dyp = &dy[(b * g.c_out + o) * plane_out..][..plane_out];
            for kt in 0..g.kt {
                for kf in 0..g.kf {
                    let wv = w[g.w_index(o, ci, kt, kf)];
                    let (lo, hi) = g.f_range(kf);
                    for ot in 0..g.t_out {
                        let Some(it) = g.src_t(ot, kt) else { continue };
                        let dyrow = &dyp[ot * g.f_out..(ot + 1) * g.f_out];
                        let drow = &mut plane[it * g.f_in..(it + 1) * g.f_in];
                        for of in lo..hi {
                            drow[g.src_f(of, kf)] += wv * dyrow[of];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Adjoint of [`conv_forward`] with respect to the weights.
pub(crate) fn conv_backward_weight(g: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let plane_in = g.t_in * g.f_in;
    let plane_out = g.t_out * g.f_out;
    let per_out = g.cpg_in() * g.kt * g.kf;
    let mut dw = vec![0.0; g.c_out * per_out];
    count_macs((dy.len() * per_out) as u64);
    exec::for_each_chunk(&mut dw, per_out, |o, chunk| {
        let grp = o / g.cpg_out();
        for ci in 0..g.cpg_in() {
            let c = grp * g.cpg_in() + ci;
            for kt in 0..g.kt {
                for kf in 0..g.kf {
                    let (lo, hi) = g.f_range(kf);
                    let mut s = 0.0;
                    for b in 0..g.batch {
                        let xp = &x[(b * g.c_in + c) * plane_in..][..plane_in];
                        let dyp = &dy[(b * g.c_out + o) * plane_out..][..plane_out];
                        for ot in 0..g.t_out {
                            let Some(it) = g.src_t(ot, kt) else { continue };
                            let xrow = &xp[it * g.f_in..(it + 1) * g.f_in];
                            let dyrow = &dyp[ot * g.f_out..(ot + 1) * g.f_out];
                            for of in lo..hi {
                                s += dyrow[of] * xrow[g.src_f(of, kf)];
                            }
                        }
                    }
                    chunk[(ci * g.kt + kt) * g.kf + kf] = s;
                }
            }
        }
    });
    dw
}

/// Per-channel sum over batch and spatial positions of a `[B,C,...]` buffer.
pub(crate) fn channel_sums(dy: &[f64], batch: usize, channels: usize) -> Vec<f64> {
    let plane = dy.len() / (batch * channels);
    let mut out = vec![0.0; channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += dy[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// deformable depthwise convolution

/// Geometry of a deformable depthwise convolution with a square `k×k` kernel,
/// stride 1, padding `(k-1)/2`, one offset group shared by all channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DeformGeom {
    pub batch: usize,
    pub channels: usize,
    pub t: usize,
    pub f: usize,
    pub k: usize,
}

impl DeformGeom {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn plane(&self) -> usize {
        self.t * self.f
    }

    /// Sampling coordinate of tap `tap` at output `(t, f)` for batch `b`.
    #[inline]
    fn coord(&self, off: &[f64], b: usize, tap: usize, t: usize, f: usize) -> (f64, f64) {
        let pad = (self.k - 1) / 2;
        let (kt, kf) = (tap / self.k, tap % self.k);
        let base = (b * 2 * self.taps() + 2 * tap) * self.plane() + t * self.f + f;
        let dt = off[base];
        let df = off[base + self.plane()];
        (
            t as f64 + kt as f64 - pad as f64 + dt,
            f as f64 + kf as f64 - pad as f64 + df,
        )
    }
}

/// Bilinear corner indices and weights; out-of-bounds corners get `None`.
#[inline]
pub(crate) fn bilinear_corners(t_n: usize, f_n: usize, pt: f64, pf: f64) -> [(Option<usize>, f64, f64, f64); 4] {
    let t0 = pt.floor();
    let f0 = pf.floor();
    let lt = pt - t0;
    let lf = pf - f0;
    let (ti, fi) = (t0 as i64, f0 as i64);
    let at = |dt: i64, df: i64| -> Option<usize> {
        let (tt, ff) = (ti + dt, fi + df);
        (tt >= 0 && ff >= 0 && (tt as usize) < t_n && (ff as usize) < f_n).then(|| tt as usize * f_n + ff as usize)
    };
    // (index, weight, d weight / d pt, d weight / d pf)
    [
        (at(0, 0), (1.0 - lt) * (1.0 - lf), -(1.0 - lf), -(1.0 - lt)),
        (at(0, 1), (1.0 - lt) * lf, -lf, 1.0 - lt),
        (at(1, 0), lt * (1.0 - lf), 1.0 - lf, -lt),
        (at(1, 1), lt * lf, lf, lt),
    ]
}

#[inline]
fn sample(plane: &[f64], t_n: usize, f_n: usize, pt: f64, pf: f64) -> f64 {
    bilinear_corners(t_n, f_n, pt, pf)
        .iter()
        .map(|&(i, wgt, _, _)| i.map_or(0.0, |i| wgt * plane[i]))
        .sum()
}

pub(crate) fn deform_forward(g: &DeformGeom, x: &[f64], off: &[f64], w: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let mut out = vec![0.0; g.batch * g.channels * plane];
    exec::for_each_chunk(&mut out, plane, |idx, op| {
        let (b, c) = (idx / g.channels, idx % g.channels);
        let xp = &x[idx * plane..][..plane];
        for t in 0..g.t {
            for f in 0..g.f {
                let mut s = 0.0;
                for tap in 0..g.taps() {
                    let (pt, pf) = g.coord(off, b, tap, t, f);
                    s += w[c * g.taps() + tap] * sample(xp, g.t, g.f, pt, pf);
                }
                op[t * g.f + f] = s;
            }
        }
    });
    out
}

pub(crate) struct DeformGrads {
    pub dx: Vec<f64>,
    pub doff: Vec<f64>,
    pub dw: Vec<f64>,
}

pub(crate) fn deform_backward(g: &DeformGeom, x: &[f64], off: &[f64], w: &[f64], dy: &[f64]) -> DeformGrads {
    let plane = g.plane();
    let taps = g.taps();

    let mut dx = vec![0.0; x.len()];
    exec::for_each_chunk(&mut dx, plane, |idx, dxp| {
        let (b, c) = (idx / g.channels, idx % g.channels);
        let dyp = &dy[idx * plane..][..plane];
        for t in 0..g.t {
            for f in 0..g.f {
                let gy = dyp[t * g.f + f];
                for tap in 0..taps {
                    let (pt, pf) = g.coord(off, b, tap, t, f);
                    let scale = gy * w[c * taps + tap];
                    for (i, wgt, _, _) in bilinear_corners(g.t, g.f, pt, pf) {
                        if let Some(i) = i {
                            dxp[i] += scale * wgt;
                        }
                    }
                }
            }
        }
    });

    let mut dw = vec![0.0; w.len()];
    exec::for_each_chunk(&mut dw, taps, |c, dwc| {
        for b in 0..g.batch {
            let xp = &x[(b * g.channels + c) * plane..][..plane];
            let dyp = &dy[(b * g.channels + c) * plane..][..plane];
            for t in 0..g.t {
                for f in 0..g.f {
                    let gy = dyp[t * g.f + f];
                    for (tap, d) in dwc.iter_mut().enumerate() {
                        let (pt, pf) = g.coord(off, b, tap, t, f);
                        *d += gy * sample(xp, g.t, g.f, pt, pf);
                    }
                }
            }
        }
    });

    let mut doff = vec![0.0; off.len()];
    exec::for_each_chunk(&mut doff, 2 * plane, |idx, chunk| {
        let (b, tap) = (idx / taps, idx % taps);
        let (dt_plane, df_plane) = chunk.split_at_mut(plane);
        for t in 0..g.t {
            for f in 0..g.f {
                let (pt, pf) = g.coord(off, b, tap, t, f);
                let corners = bilinear_corners(g.t, g.f, pt, pf);
                let (mut st, mut sf) = (0.0, 0.0);
                for c in 0..g.channels {
                    let base = (b * g.channels + c) * plane;
                    let scale = dy[base + t * g.f + f] * w[c * taps + tap];
                    for &(i, _, dwt, dwf) in &corners {
                        if let Some(i) = i {
                            st += scale * dwt * x[base + i];
                            sf += scale * dwf * x[base + i];
                        }
                    }
                }
                dt_plane[t * g.f + f] = st;
                df_plane[t * g.f + f] = sf;
            }
        }
    });

    DeformGrads { dx, doff, dw }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_formula() {
        assert_eq!(conv_out_len(7, 3, 1, 2, 2), Some(7));
        assert_eq!(conv_out_len(308, 3, 2, 1, 1), Some(154));
        assert_eq!(conv_out_len(77, 3, 2, 1, 1), Some(39));
        assert_eq!(conv_out_len(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn f_range_matches_bounds_check() {
        for (f_in, k, s, p, d) in [(7, 3, 1, 2, 2), (9, 3, 2, 1, 1), (5, 1, 1, 0, 1), (4, 3, 1, 0, 3)] {
            let Some(f_out) = conv_out_len(f_in, k, s, p, d) else { continue };
            let g = ConvGeom {
                batch: 1,
                c_in: 1,
                t_in: 1,
                f_in,
                c_out: 1,
                kt: 1,
                kf: k,
                t_out: 1,
                f_out,
                opts: Conv2dOptions::default().stride(1, s).padding(0, p).dilation(1, d),
            };
            for kf in 0..k {
                let (lo, hi) = g.f_range(kf);
                for of in 0..f_out {
                    let pos = (of * s + kf * d) as isize - p as isize;
                    let inside = pos >= 0 && (pos as usize) < f_in;
                    assert_eq!(inside, of >= lo && of < hi, "f_in {f_in} k {kf} of {of}");
                }
            }
        }
    }

    #[test]
    fn groups_must_divide() {
        let e = ConvGeom::for_conv(&[1, 3, 4, 4], &[4, 1, 3, 3], Conv2dOptions::default().groups(2));
        assert!(e.is_err());
    }

    #[test]
    fn bilinear_exact_at_integers() {
        let plane: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(sample(&plane, 3, 4, 1.0, 2.0), 6.0);
        assert_eq!(sample(&plane, 3, 4, 1.5, 2.0), 8.0);
        assert_eq!(sample(&plane, 3, 4, -1.0, 0.0), 0.0);
    }
}
