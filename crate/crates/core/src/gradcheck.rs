//! Central finite-difference gradient checks (64-bit).
//!
//! The numeric side only ever calls the forward pass, so it is independent
//! of the backward kernels it verifies.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::Result;
use crate::tape::{ParamId, ParamStore, Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-5;
/// Lower bound on the relative-error denominator so coordinates whose true
/// gradient is ~0 are judged by absolute error.
pub const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±ε evaluations straddled a non-smooth point.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn eval<F>(store: &ParamStore<f64>, build: &mut F, train: bool) -> Result<(f64, Vec<bool>)>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new(train).with_kink_trace();
    let out = build(&mut tape, store)?;
    let v = tape.value(out).item();
    Ok((v, tape.kink_trace().unwrap_or_default().to_vec()))
}

/// Compares analytic and numeric gradients of the scalar built by `build`
/// for up to `per_param` random coordinates of every trainable parameter.
pub fn check<F, R>(
    store: &mut ParamStore<f64>,
    train: bool,
    eps: f64,
    per_param: usize,
    rng: &mut R,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    R: Rng,
{
    let mut tape = Tape::new(train).with_kink_trace();
    let out = build(&mut tape, store)?;
    let base_trace = tape.kink_trace().unwrap_or_default().to_vec();
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let numel = store.get(id).value.numel();
        let all: Vec<usize> = (0..numel).collect();
        let coords: Vec<usize> = if numel <= per_param {
            all
        } else {
            all.choose_multiple(rng, per_param).copied().collect()
        };
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let (fp, tp) = eval(store, &mut build, train)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let (fm, tm) = eval(store, &mut build, train)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if tp != base_trace || tm != base_trace {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= report.max_rel_err {
                    report.worst = Some((store.name(id).to_string(), i, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}
