//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used for the numeric side, so the check is
//! independent of every backward rule it validates.

use crate::autodiff::{Mode, ParamStore, RngStream, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Magnitude below which differences are compared absolutely rather than relatively.
    pub floor: f64,
    /// Entries sampled per parameter tensor; `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward gradients of `loss_fn` against central differences.
///
/// Gradients in `store` are zeroed first and hold the analytic gradient on return.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    {
        let mut tape = Tape::new(Mode::Grad);
        let loss = loss_fn(&mut tape, store)?;
        tape.backward(&loss, store)?;
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(Mode::NoGrad);
        Ok(loss_fn(&mut tape, store)?.item())
    };

    let mut picker = RngStream::new(opts.seed, 0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.value(id).numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => (0..k).map(|_| picker.below(n as u64) as usize).collect(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + opts.step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - opts.step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = store.grad(id).data()[j];
            let err = relative_error(analytic, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{}[{j}] analytic={analytic:e} numeric={numeric:e}",
                    store.get(id).name
                );
            }
        }
    }
    Ok(report)
}
