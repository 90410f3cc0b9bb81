//! Central finite-difference gradient verification in `f64`.

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`, zero when both vanish. The floor keeps
/// gradients at the finite-difference noise level from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares `analytic` against `(L(p + h) - L(p - h)) / 2h` for every
/// element of every parameter in `store`.
pub fn check_gradients(
    store: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), store.len());
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let id = super::ParamId(pi);
        for j in 0..grad.len() {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = format!("{}[{j}]", store.name(id));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}
