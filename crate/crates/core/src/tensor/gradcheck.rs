use super::{ParamId, ParamStore, Tape, TensorError, Var};

/// Outcome of comparing tape gradients to central finite differences.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks every non-frozen scalar of `store` against the central difference
/// `(f(x + eps) - f(x - eps)) / 2 eps`. `f` must be deterministic and return
/// a `1 x 1` loss.
pub fn grad_check<E, F>(store: &mut ParamStore<f64>, eps: f64, mut f: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let grads = tape.param_grads(store);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pid in 0..store.len() {
        let id = ParamId(pid);
        if store.get(id).frozen {
            continue;
        }
        let n = store.get(id).value.len();
        for k in 0..n {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let err = rel_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = store.get(id).name.clone();
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
