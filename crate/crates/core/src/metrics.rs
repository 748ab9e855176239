//! Objective signal metrics: segmental SNR and scale-invariant SDR.

use crate::error::{invalid, Error, Result};

pub const SSNR_FRAME: usize = 512;
pub const SSNR_HOP: usize = 256;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;
/// Frames whose clean mean-square level is below this are ignored.
pub const SILENCE_DBFS: f64 = -60.0;
pub const SI_SDR_CAP_DB: f64 = 60.0;

fn check_lengths(op: &'static str, clean: &[f64], estimate: &[f64]) -> Result<()> {
    if clean.len() != estimate.len() || clean.is_empty() {
        return Err(invalid(op, format!("length mismatch: {} vs {}", clean.len(), estimate.len())));
    }
    if clean.iter().chain(estimate).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// Mean of per-frame SNRs, each clamped to `[-10, 35]` dB, over frames of
/// `frame` samples taken every `hop` samples whose clean level is above the
/// silence threshold. Signals shorter than one frame are a single frame.
pub fn ssnr(clean: &[f64], estimate: &[f64], frame: usize, hop: usize) -> Result<f64> {
    check_lengths("ssnr", clean, estimate)?;
    if frame == 0 || hop == 0 {
        return Err(invalid("ssnr", "frame and hop must be positive"));
    }
    let n = clean.len();
    let starts: Vec<usize> = if n <= frame {
        vec![0]
    } else {
        (0..=(n - frame) / hop).map(|i| i * hop).collect()
    };
    let mut total = 0.0;
    let mut used = 0usize;
    for s in starts {
        let e = (s + frame).min(n);
        let (c, x) = (&clean[s..e], &estimate[s..e]);
        let signal: f64 = c.iter().map(|v| v * v).sum();
        let level = 10.0 * (signal / c.len() as f64).log10();
        if !(level > SILENCE_DBFS) {
            continue;
        }
        let noise: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = if noise == 0.0 {
            SSNR_MAX_DB
        } else {
            10.0 * (signal / noise).log10()
        };
        total += snr.clamp(SSNR_MIN_DB, SSNR_MAX_DB);
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("ssnr: every frame of the reference is silent".into()));
    }
    Ok(total / used as f64)
}

/// Scale-invariant SDR in dB, capped at 60.
pub fn si_sdr(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths("si_sdr", clean, estimate)?;
    let ref_energy: f64 = clean.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::UndefinedMetric("si_sdr: reference is silent".into()));
    }
    let alpha = clean.iter().zip(estimate).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let residual: f64 = clean.iter().zip(estimate).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    let est_energy: f64 = estimate.iter().map(|v| v * v).sum();
    let eps = 1e-12 * est_energy + f64::MIN_POSITIVE;
    let db = 10.0 * ((target + eps) / (residual + eps)).log10();
    Ok(db.min(SI_SDR_CAP_DB))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// `(name, ssnr, si_sdr)` per file.
    pub per_file: Vec<(String, f64, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, clean: &[f64], estimate: &[f64]) -> Result<()> {
        let s = ssnr(clean, estimate, SSNR_FRAME, SSNR_HOP)?;
        let d = si_sdr(clean, estimate)?;
        self.per_file.push((name.into(), s, d));
        Ok(())
    }

    pub fn mean_ssnr(&self) -> Option<f64> {
        self.mean(|r| r.1)
    }

    pub fn mean_si_sdr(&self) -> Option<f64> {
        self.mean(|r| r.2)
    }

    fn mean(&self, f: impl Fn(&(String, f64, f64)) -> f64) -> Option<f64> {
        (!self.per_file.is_empty()).then(|| self.per_file.iter().map(f).sum::<f64>() / self.per_file.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn speechish(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|i| 0.3 * (i as f64 * 0.05).sin() + rng.gen_range(-0.1..0.1)).collect()
    }

    #[test]
    fn identical_signals_hit_the_ceiling() {
        let c = speechish(4096, 1);
        assert_eq!(ssnr(&c, &c, 512, 256).unwrap(), 35.0);
    }

    #[test]
    fn per_frame_ten_db_noise() {
        // Non-overlapping frames (hop = frame) so each frame's noise can be
        // scaled to exactly 10 dB below its signal.
        let c = speechish(512 * 8, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut est = c.clone();
        for (cf, ef) in c.chunks(512).zip(est.chunks_mut(512)) {
            let n: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ps: f64 = cf.iter().map(|v| v * v).sum();
            let pn: f64 = n.iter().map(|v| v * v).sum();
            let g = (ps / pn / 10.0).sqrt();
            ef.iter_mut().zip(&n).for_each(|(e, v)| *e += g * v);
        }
        assert!((ssnr(&c, &est, 512, 512).unwrap() - 10.0).abs() < 0.1);
    }

    #[test]
    fn negated_estimate_is_minus_six_db() {
        let c = speechish(4096, 4);
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        let want = 10.0 * 0.25f64.log10();
        assert!((ssnr(&c, &neg, 512, 256).unwrap() - want).abs() < 0.1);
    }

    #[test]
    fn silence_handling() {
        let z = vec![0.0; 2048];
        assert!(matches!(ssnr(&z, &z, 512, 256), Err(Error::UndefinedMetric(_))));
        assert!(matches!(si_sdr(&z, &z), Err(Error::UndefinedMetric(_))));
        // Silent frames are skipped, loud ones are kept.
        let mut c = vec![0.0; 2048];
        c[1024..].copy_from_slice(&speechish(1024, 5));
        assert_eq!(ssnr(&c, &c, 512, 512).unwrap(), 35.0);
        assert!(ssnr(&[1.0], &[1.0, 2.0], 512, 256).is_err());
    }

    #[test]
    fn si_sdr_anchors() {
        let c = speechish(1000, 6);
        let scaled: Vec<f64> = c.iter().map(|v| 3.0 * v).collect();
        assert_eq!(si_sdr(&c, &scaled).unwrap(), 60.0);

        // Orthogonal estimate via Gram-Schmidt.
        let r = speechish(1000, 7);
        let cc: f64 = c.iter().map(|v| v * v).sum();
        let a = c.iter().zip(&r).map(|(x, y)| x * y).sum::<f64>() / cc;
        let orth: Vec<f64> = r.iter().zip(&c).map(|(y, x)| y - a * x).collect();
        assert!(si_sdr(&c, &orth).unwrap() <= -20.0);

        // clean + e with e ⟂ clean and ‖e‖ = ‖clean‖/10.
        let on: f64 = orth.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = cc.sqrt() / 10.0 / on;
        let est: Vec<f64> = c.iter().zip(&orth).map(|(x, e)| x + g * e).collect();
        assert!((si_sdr(&c, &est).unwrap() - 20.0).abs() < 0.1);
    }

    #[test]
    fn report_means() {
        let c = speechish(2048, 8);
        let mut r = MetricReport::default();
        assert_eq!(r.mean_ssnr(), None);
        r.push("a", &c, &c).unwrap();
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        r.push("b", &c, &neg).unwrap();
        assert!((r.mean_ssnr().unwrap() - (35.0 + 10.0 * 0.25f64.log10()) / 2.0).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn ssnr_stays_in_clamp_range(seed in 0u64..1000, gain in -5.0f64..5.0) {
            let c = speechish(1500, seed);
            let e = speechish(1500, seed + 1).iter().map(|v| v * gain).collect::<Vec<_>>();
            let s = ssnr(&c, &e, 512, 256).unwrap();
            prop_assert!((SSNR_MIN_DB..=SSNR_MAX_DB).contains(&s));
        }
    }
}
