//! STFT front end: centered Hann-windowed framing, magnitude/phase split,
//! power-law magnitude compression, and overlap-add inverse with
//! squared-window normalization.

use crate::error::{invalid, Error, Result};
use crate::exec;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
    pub compression_exponent: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 510,
            win_length: 510,
            hop_length: 100,
            sample_rate: 16_000,
            compression_exponent: 0.3,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "stft config";
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(invalid(op, format!("n_fft must be even and >= 2, got {}", self.n_fft)));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(invalid(op, format!("win_length {} must be in 1..=n_fft", self.win_length)));
        }
        if self.hop_length == 0 || self.hop_length >= self.win_length {
            return Err(invalid(op, format!("hop_length {} must be in 1..win_length", self.hop_length)));
        }
        if !(self.compression_exponent > 0.0 && self.compression_exponent <= 1.0) {
            return Err(invalid(
                op,
                format!("compression exponent {} must be in (0, 1]", self.compression_exponent),
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop_length
    }

    /// Periodic Hann window of `win_length`, zero-padded to `n_fft` and centered.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let left = (self.n_fft - self.win_length) / 2;
        for i in 0..self.win_length {
            w[left + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / self.win_length as f64).cos();
        }
        w
    }
}

/// Magnitude and phase planes, row-major `[frame][bin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        let bins = config.n_bins();
        Self {
            magnitude: vec![0.0; frames * bins],
            phase: vec![0.0; frames * bins],
            frames,
            bins,
            config,
        }
    }

    pub fn real(&self) -> Vec<f64> {
        self.magnitude.iter().zip(&self.phase).map(|(m, p)| m * p.cos()).collect()
    }

    pub fn imag(&self) -> Vec<f64> {
        self.magnitude.iter().zip(&self.phase).map(|(m, p)| m * p.sin()).collect()
    }
}

/// Compressed magnitude and phase interleaved as `[frame][bin][plane]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedInput {
    pub planes: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
}

impl PackedInput {
    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.bins, 2]
    }

    /// Plane `p` as a contiguous `[frame][bin]` buffer.
    pub fn plane(&self, p: usize) -> Vec<f64> {
        self.planes.iter().skip(p).step_by(2).copied().collect()
    }

    /// Channel-first layout `[2][frame][bin]`, ready to become a `[1,2,T,F]` tensor.
    pub fn channel_first(&self) -> Vec<f64> {
        let mut out = self.plane(0);
        out.extend(self.plane(1));
        out
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_phase(p: f64) -> f64 {
    let mut w = p - 2.0 * PI * (p / (2.0 * PI)).round();
    if w <= -PI {
        w += 2.0 * PI;
    }
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn phase_of(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    // atan2(-0.0, x<0) returns -π
    wrap_phase(im.atan2(re))
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

fn reflect_pad(wave: &[f64], pad: usize) -> Vec<f64> {
    let n = wave.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| wave[i]));
    out.extend_from_slice(wave);
    out.extend((1..=pad).map(|i| wave[n - 1 - i]));
    out
}

/// Complex half-spectrum of every frame, `[frame][bin]`.
pub fn stft_complex(wave: &[f64], cfg: &StftConfig) -> Result<(Vec<Complex64>, usize)> {
    cfg.validate()?;
    if wave.is_empty() {
        return Err(invalid("stft", "empty waveform"));
    }
    if wave.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "stft" });
    }
    let pad = cfg.n_fft / 2;
    if wave.len() <= pad {
        return Err(invalid(
            "stft",
            format!("reflect padding of {pad} needs more than {pad} samples, got {}", wave.len()),
        ));
    }
    let padded = reflect_pad(wave, pad);
    let window = cfg.window();
    let frames = cfg.n_frames(wave.len());
    let bins = cfg.n_bins();
    let fft = plans(cfg.n_fft).forward;
    let mut spec = vec![Complex64::new(0.0, 0.0); frames * bins];
    exec::for_each_chunk(&mut spec, bins, |t, row| {
        let start = t * cfg.hop_length;
        let mut buf: Vec<Complex64> = (0..cfg.n_fft)
            .map(|n| Complex64::new(padded[start + n] * window[n], 0.0))
            .collect();
        fft.process(&mut buf);
        row.copy_from_slice(&buf[..bins]);
    });
    Ok((spec, frames))
}

pub fn stft(wave: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    let (spec, frames) = stft_complex(wave, cfg)?;
    Ok(Spectrogram {
        magnitude: spec.iter().map(|c| c.norm()).collect(),
        phase: spec.iter().map(|c| phase_of(c.re, c.im)).collect(),
        frames,
        bins: cfg.n_bins(),
        config: *cfg,
    })
}

/// Squared-window overlap-add envelope over the padded signal.
fn ola_norm(cfg: &StftConfig, frames: usize) -> Vec<f64> {
    let window = cfg.window();
    let mut norm = vec![0.0; (frames - 1) * cfg.hop_length + cfg.n_fft];
    for t in 0..frames {
        for (n, w) in window.iter().enumerate() {
            norm[t * cfg.hop_length + n] += w * w;
        }
    }
    norm
}

const NORM_FLOOR: f64 = 1e-11;

fn check_norm(norm: &[f64], pad: usize, out_len: usize) -> Result<()> {
    if pad + out_len > norm.len() {
        return Err(invalid(
            "istft",
            format!("{} frames cannot cover {out_len} output samples", norm.len()),
        ));
    }
    for j in 0..out_len {
        let v = norm[pad + j];
        if v <= NORM_FLOOR {
            return Err(Error::NormalizerUnderflow { index: j, value: v });
        }
    }
    Ok(())
}

/// Inverse of [`stft_complex`] from separate real and imaginary planes
/// (`[frame][bin]`). Imaginary parts of the DC and Nyquist bins are ignored.
pub fn istft_complex(re: &[f64], im: &[f64], frames: usize, cfg: &StftConfig, out_len: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let bins = cfg.n_bins();
    if re.len() != frames * bins || im.len() != frames * bins || frames == 0 {
        return Err(Error::ShapeMismatch {
            op: "istft",
            lhs: vec![re.len(), im.len()],
            rhs: vec![frames, bins],
        });
    }
    let n = cfg.n_fft;
    let pad = n / 2;
    let norm = ola_norm(cfg, frames);
    check_norm(&norm, pad, out_len)?;
    let window = cfg.window();
    let inverse = plans(n).inverse;

    let mut frames_td = vec![0.0; frames * n];
    exec::for_each_chunk(&mut frames_td, n, |t, out| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..bins {
            let mut c = Complex64::new(re[t * bins + k], im[t * bins + k]);
            if k == 0 || k == n / 2 {
                c.im = 0.0;
            }
            buf[k] = c;
            if k > 0 && k < n / 2 {
                buf[n - k] = c.conj();
            }
        }
        inverse.process(&mut buf);
        for (i, o) in out.iter_mut().enumerate() {
            *o = buf[i].re / n as f64 * window[i];
        }
    });

    let mut acc = vec![0.0; norm.len()];
    for t in 0..frames {
        for i in 0..n {
            acc[t * cfg.hop_length + i] += frames_td[t * n + i];
        }
    }
    Ok((0..out_len).map(|j| acc[pad + j] / norm[pad + j]).collect())
}

pub fn istft(spec: &Spectrogram, cfg: &StftConfig, out_len: usize) -> Result<Vec<f64>> {
    if spec.bins != cfg.n_bins() {
        return Err(Error::ShapeMismatch {
            op: "istft",
            lhs: vec![spec.frames, spec.bins],
            rhs: vec![spec.frames, cfg.n_bins()],
        });
    }
    istft_complex(&spec.real(), &spec.imag(), spec.frames, cfg, out_len)
}

/// Adjoint of [`istft_complex`]: maps a gradient on the output waveform back
/// to gradients on the real and imaginary planes.
pub fn istft_adjoint(grad: &[f64], frames: usize, cfg: &StftConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = cfg.n_fft;
    let pad = n / 2;
    let bins = cfg.n_bins();
    let out_len = grad.len();
    let norm = ola_norm(cfg, frames);
    check_norm(&norm, pad, out_len)?;
    let window = cfg.window();
    let forward = plans(n).forward;

    let mut g_acc = vec![0.0; norm.len()];
    for j in 0..out_len {
        g_acc[pad + j] = grad[j] / norm[pad + j];
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); frames * bins];
    exec::for_each_chunk(&mut spec, bins, |t, row| {
        let mut buf: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(g_acc[t * cfg.hop_length + i] * window[i], 0.0))
            .collect();
        forward.process(&mut buf);
        for (k, r) in row.iter_mut().enumerate() {
            let edge = k == 0 || k == n / 2;
            let c = if edge { 1.0 } else { 2.0 } / n as f64;
            *r = Complex64::new(c * buf[k].re, if edge { 0.0 } else { c * buf[k].im });
        }
    });
    Ok((spec.iter().map(|c| c.re).collect(), spec.iter().map(|c| c.im).collect()))
}

pub fn compress_magnitude(mag: &[f64], c: f64) -> Result<Vec<f64>> {
    power(mag, c, "compress_magnitude")
}

pub fn decompress_magnitude(mag_c: &[f64], c: f64) -> Result<Vec<f64>> {
    power(mag_c, 1.0 / c, "decompress_magnitude")
}

fn power(xs: &[f64], p: f64, op: &'static str) -> Result<Vec<f64>> {
    if !(p > 0.0) {
        return Err(invalid(op, format!("exponent must be positive, got {p}")));
    }
    xs.iter()
        .map(|&x| {
            if x < 0.0 || x.is_nan() {
                Err(invalid(op, format!("negative magnitude {x}")))
            } else {
                Ok(x.powf(p))
            }
        })
        .collect()
}

pub fn pack_input(spec: &Spectrogram) -> Result<PackedInput> {
    let mag_c = compress_magnitude(&spec.magnitude, spec.config.compression_exponent)?;
    let mut planes = Vec::with_capacity(2 * mag_c.len());
    for (m, p) in mag_c.iter().zip(&spec.phase) {
        planes.push(*m);
        planes.push(*p);
    }
    Ok(PackedInput {
        planes,
        frames: spec.frames,
        bins: spec.bins,
    })
}

pub fn unpack_input(packed: &PackedInput, config: StftConfig) -> Result<Spectrogram> {
    Ok(Spectrogram {
        magnitude: decompress_magnitude(&packed.plane(0), config.compression_exponent)?,
        phase: packed.plane(1),
        frames: packed.frames,
        bins: packed.bins,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng_wave(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct O(n²) DFT used as the transform oracle.
    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, v)| {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    (re + v * a.cos(), im + v * a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn default_shape_for_training_segment() {
        let cfg = StftConfig::default();
        let spec = stft(&rng_wave(30_700, 1), &cfg).unwrap();
        assert_eq!((spec.frames, spec.bins), (308, 256));
        let packed = pack_input(&spec).unwrap();
        assert_eq!(packed.shape(), [308, 256, 2]);
    }

    #[test]
    fn zero_wave_has_zero_magnitude_and_inverts_to_zero() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![0.0; 2000], &cfg).unwrap();
        assert!(spec.magnitude.iter().all(|&m| m == 0.0));
        let packed = pack_input(&spec).unwrap();
        assert!(packed.plane(0).iter().all(|&m| m == 0.0));
        let y = istft(&Spectrogram::zeros(spec.frames, cfg), &cfg, 2000).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frames_match_naive_dft() {
        let cfg = StftConfig::default();
        let wave = rng_wave(1200, 2);
        let (spec, frames) = stft_complex(&wave, &cfg).unwrap();
        let padded = reflect_pad(&wave, cfg.n_fft / 2);
        let w = cfg.window();
        for t in [0, frames / 2, frames - 1] {
            let frame: Vec<f64> = (0..cfg.n_fft).map(|n| padded[t * cfg.hop_length + n] * w[n]).collect();
            for (k, (re, im)) in naive_dft(&frame).into_iter().enumerate() {
                let c = spec[t * cfg.n_bins() + k];
                assert!((c.re - re).abs() < 1e-9 && (c.im - im).abs() < 1e-9, "frame {t} bin {k}");
            }
        }
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = StftConfig::default();
        let wave: Vec<f64> = (0..8000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let spec = stft(&wave, &cfg).unwrap();
        let expected = (1000.0 * cfg.n_fft as f64 / 16_000.0).round() as usize;
        for t in 3..spec.frames - 3 {
            let row = &spec.magnitude[t * spec.bins..(t + 1) * spec.bins];
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, expected);
        }
    }

    #[test]
    fn round_trip_and_linearity() {
        let cfg = StftConfig::default();
        let wave = rng_wave(4321, 3);
        let spec = stft(&wave, &cfg).unwrap();
        let back = istft(&spec, &cfg, wave.len()).unwrap();
        let err = wave.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-9, "{err}");

        let mut scaled = spec.clone();
        scaled.magnitude.iter_mut().for_each(|m| *m *= 2.5);
        let y = istft(&scaled, &cfg, wave.len()).unwrap();
        for (a, b) in y.iter().zip(&back) {
            assert!((a - 2.5 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let wave = rng_wave(3000, 4);
        let (spec, frames) = stft_complex(&wave, &cfg).unwrap();
        let padded = reflect_pad(&wave, cfg.n_fft / 2);
        let w = cfg.window();
        let n = cfg.n_fft;
        for t in 0..frames {
            let time: f64 = (0..n).map(|i| (padded[t * cfg.hop_length + i] * w[i]).powi(2)).sum();
            let freq: f64 = (0..cfg.n_bins())
                .map(|k| {
                    let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                    weight * spec[t * cfg.n_bins() + k].norm_sqr()
                })
                .sum::<f64>()
                / n as f64;
            assert!((time - freq).abs() <= 1e-6 * time.max(1e-12), "frame {t}");
        }
    }

    #[test]
    fn adjoint_identity() {
        // <istft(re, im), g> == <re, dre> + <im, dim>
        let cfg = StftConfig {
            n_fft: 14,
            win_length: 14,
            hop_length: 4,
            ..StftConfig::default()
        };
        let frames = 9;
        let len = 33;
        let bins = cfg.n_bins();
        let re = rng_wave(frames * bins, 5);
        let mut im = rng_wave(frames * bins, 6);
        for t in 0..frames {
            im[t * bins] = 0.0;
            im[t * bins + bins - 1] = 0.0;
        }
        let g = rng_wave(len, 7);
        let y = istft_complex(&re, &im, frames, &cfg, len).unwrap();
        let (dre, dim) = istft_adjoint(&g, frames, &cfg).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = re.iter().zip(&dre).map(|(a, b)| a * b).sum::<f64>()
            + im.iter().zip(&dim).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn compression_values() {
        assert_eq!(compress_magnitude(&[0.0, 1.0], 0.3).unwrap(), vec![0.0, 1.0]);
        assert_eq!(compress_magnitude(&[4.0], 0.3).unwrap()[0], 4f64.powf(0.3));
        assert!(compress_magnitude(&[-1.0], 0.3).is_err());
        let xs: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.1).collect();
        let back = decompress_magnitude(&compress_magnitude(&xs, 0.3).unwrap(), 0.3).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pack_unpack_reproduces_spectrogram() {
        let cfg = StftConfig::default();
        let spec = stft(&rng_wave(1000, 8), &cfg).unwrap();
        let back = unpack_input(&pack_input(&spec).unwrap(), cfg).unwrap();
        assert_eq!(back.phase, spec.phase);
        for (a, b) in back.magnitude.iter().zip(&spec.magnitude) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = StftConfig::default();
        assert!(stft(&[], &cfg).is_err());
        assert!(stft(&[0.0, f64::NAN, 0.0], &cfg).is_err());
        let bad = StftConfig { hop_length: 0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn phase_wrapping() {
        assert_eq!(phase_of(-1.0, -0.0), PI);
        assert_eq!(phase_of(0.0, 0.0), 0.0);
        assert!((wrap_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn phase_stays_in_half_open_interval(seed in 0u64..500, len in 600usize..1500) {
            let spec = stft(&rng_wave(len, seed), &StftConfig::default()).unwrap();
            proptest::prop_assert!(spec.phase.iter().all(|&p| p > -PI && p <= PI));
            proptest::prop_assert!(spec.magnitude.iter().all(|&m| m >= 0.0));
        }
    }
}
