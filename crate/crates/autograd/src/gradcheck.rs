//! Central finite-difference checks of analytic parameter gradients.

use crate::params::{GradStore, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Entries `0, stride, 2*stride, ...` plus the last one, at most `per_tensor`.
fn probe_indices(len: usize, per_tensor: usize) -> Vec<usize> {
    if len <= per_tensor {
        return (0..len).collect();
    }
    let stride = len.div_ceil(per_tensor.max(2) - 1);
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if *idx.last().unwrap() != len - 1 {
        idx.push(len - 1);
    }
    idx
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` on up to
/// `per_tensor` entries of every parameter accepted by `select`.
/// Parameters missing from `analytic` are treated as having zero gradient.
pub fn check_param_grads<E: std::fmt::Debug>(
    params: &ParamStore<f64>,
    analytic: &GradStore<f64>,
    select: impl Fn(&str) -> bool,
    per_tensor: usize,
    step: f64,
    floor: f64,
    f: impl Fn(&ParamStore<f64>) -> Result<f64, E>,
) -> GradCheckReport {
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = params.names().filter(|n| select(n)).map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).expect("listed").len();
        for i in probe_indices(len, per_tensor) {
            let orig = params.get(&name).expect("listed").data()[i];
            work.get_mut(&name).expect("listed").data_mut()[i] = orig + step;
            let up = f(&work).expect("loss evaluation");
            work.get_mut(&name).expect("listed").data_mut()[i] = orig - step;
            let down = f(&work).expect("loss evaluation");
            work.get_mut(&name).expect("listed").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = format!("{name}[{i}] analytic={a:e} numeric={numeric:e}");
            }
        }
    }
    report
}
