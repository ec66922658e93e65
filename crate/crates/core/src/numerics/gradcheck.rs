//! Central finite-difference gradient checker.

use rand::seq::index::sample;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Coordinates checked exhaustively up to this many parameters.
pub const EXHAUSTIVE_LIMIT: usize = 1000;
/// Random coordinates sampled above [`EXHAUSTIVE_LIMIT`].
pub const SAMPLED_COORDS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree, i.e. the step crossed a
    /// ReLU kink. They are not counted in `max_rel_error`.
    pub skipped_kinks: usize,
}

/// Compare the analytic gradient returned by `loss_and_grad` against central
/// differences with step `eps`. Evaluation happens in f64.
pub fn grad_check<F>(loss_and_grad: F, params: &ParamSet, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("grad_check: eps must be > 0".into()));
    }
    let base = params.cast::<f64>();
    let n = base.num_scalars();
    if n == 0 {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        });
    }
    let (f0, grad) = loss_and_grad(&base)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    base.ensure_same_layout(&grad, "grad_check")?;
    let analytic = grad.flatten();
    let flat = base.flatten();

    let coords: Vec<usize> = if n <= EXHAUSTIVE_LIMIT {
        (0..n).collect()
    } else {
        let mut rng = crate::rng::stream(seed, "grad_check", 0);
        let mut v = sample(&mut rng, n, SAMPLED_COORDS).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |k: usize, delta: f64| -> Result<f64> {
        let mut x = flat.clone();
        x[k] += delta;
        let (f, _) = loss_and_grad(&base.unflatten(&x)?)?;
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for k in coords {
        let fp = eval(k, eps)?;
        let fm = eval(k, -eps)?;
        let fwd = (fp - f0) / eps;
        let bwd = (f0 - fm) / eps;
        if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()) + 1e-6 {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
