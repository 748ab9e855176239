//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on checked scalar entries across all inputs.
    pub max_samples: usize,
    pub seed: u64,
    /// Absolute difference below which an entry passes regardless of the
    /// relative error (both gradients essentially zero).
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            max_samples: 200,
            seed: 0,
            abs_floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose ±eps perturbation crossed a kink of a piecewise op.
    pub kink_skipped: usize,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= floor {
        return 0.0;
    }
    diff / a.abs().max(n.abs())
}

/// Compares autodiff gradients of the scalar built by `f` with central
/// differences, perturbing up to `cfg.max_samples` randomly chosen entries of
/// `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::default();
        g.track_kinks();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok((v, g.kink_signature().unwrap_or(0)))
    };

    let mut g = Graph::default();
    g.track_kinks();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_sig = g.kink_signature().unwrap_or(0);
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    if analytic.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "grad_check" });
    }

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<usize> = if total <= cfg.max_samples {
        (0..total).collect()
    } else {
        sample(&mut rng, total, cfg.max_samples).into_vec()
    };
    picks.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        kink_skipped: 0,
        worst: None,
        tol: cfg.tol,
    };
    let mut work = inputs.to_vec();
    for flat in picks {
        let (mut which, mut idx) = (0, flat);
        while idx >= work[which].numel() {
            idx -= work[which].numel();
            which += 1;
        }
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + cfg.eps;
        let (plus, sig_p) = eval(&work)?;
        work[which].data_mut()[idx] = orig - cfg.eps;
        let (minus, sig_m) = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        if sig_p != base_sig || sig_m != base_sig {
            report.kink_skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic[which][idx];
        let e = rel_err(a, numeric, cfg.abs_floor);
        report.checked += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((which, idx, a, numeric));
        }
    }
    Ok(report)
}
