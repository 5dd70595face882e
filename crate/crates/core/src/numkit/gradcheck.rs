//! Finite-difference verification of tape gradients.

use super::optim::{ParamId, ParamStore};
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on `|analytic - numeric| / max(1, |analytic|)`.
    pub tol: f64,
    /// Coordinates sampled per parameter (all of them when the parameter is smaller).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            samples_per_param: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates dropped because the loss has a kink there; replaced by others.
    pub resampled: usize,
    pub worst: Option<Offender>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|w| w.rel_err < self.tol)
    }

    pub fn into_result(self) -> Result<GradCheckReport> {
        match &self.worst {
            Some(w) if w.rel_err >= self.tol => Err(Error::GradCheck {
                param: w.param.clone(),
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
            }),
            _ => Ok(self),
        }
    }
}

/// Compares tape gradients of the scalar built by `forward` against central
/// differences on a random subsample of every trainable parameter.
///
/// A coordinate whose one-sided slopes disagree (a non-differentiable point
/// such as a max switch) is skipped and another coordinate is drawn instead.
pub fn grad_check<F>(forward: F, params: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let mut analytic = ParamStore::clone(params);
    analytic.zero_grad();
    grads.accumulate_into(&tape, &mut analytic);
    let f0 = tape.scalar(loss);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(&mut t, store)?;
        Ok(t.scalar(l))
    };

    let mut rng = Rng::new(cfg.seed).derive_str("grad_check");
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        tol: cfg.tol,
        ..Default::default()
    };

    for id in params.ids().collect::<Vec<ParamId>>() {
        let p = params.get(id);
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut taken = 0;
        for &i in &order {
            if taken == cfg.samples_per_param {
                break;
            }
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + cfg.h;
            let fp = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - cfg.h;
            let fm = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.h);
            let slope_hi = (fp - f0) / cfg.h;
            let slope_lo = (f0 - fm) / cfg.h;
            if (slope_hi - slope_lo).abs() > 1e-2 * 1f64.max(numeric.abs()) {
                report.resampled += 1;
                continue;
            }
            let a = analytic.get(id).grad.data()[i];
            let rel_err = (a - numeric).abs() / 1f64.max(a.abs());
            taken += 1;
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(Offender {
                    param: p.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}
