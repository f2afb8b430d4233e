use super::{GradBuffer, ParamStore};

const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a relu.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(parameter, index, analytic, numeric)` at the largest error.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` with central differences of `eval`.
///
/// `eval` returns the loss and a relu on/off signature; coordinates whose
/// perturbation changes the signature sit on a kink and are skipped. With
/// `per_param = Some(k)` only `k` evenly spaced coordinates of each
/// parameter are probed. The relative error is
/// `|a − n| / max(|a|, |n|, 1e-4)`; the floor keeps
/// round-off on analytically zero gradients (a bias feeding a batch-norm)
/// from registering as error.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    analytic: &GradBuffer<f64>,
    h: f64,
    per_param: Option<usize>,
    eval: F,
) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> (f64, Vec<bool>),
{
    let base_sig = eval(store).1;
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let n = p.value.len();
        let stride = match per_param {
            Some(k) if k > 0 && k < n => n / k,
            _ => 1,
        };
        for j in (0..n).step_by(stride.max(1)) {
            let orig = p.value.data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let (lp, sp) = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let (lm, sm) = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.get(id)[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((p.name.clone(), j, a, numeric));
            }
        }
    }
    report
}
