use super::{ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor, in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Relative error used for every entry: `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(tape_grad: f64, fd_grad: f64) -> f64 {
    (tape_grad - fd_grad).abs() / (tape_grad.abs() + fd_grad.abs()).max(1e-8)
}

/// Compares tape gradients with central differences for every parameter entry.
///
/// `loss` records a scalar on the tape it is given and must be deterministic.
pub fn grad_check<F>(params: &ParamSet, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let grads = {
        let mut tape = Tape::new(params);
        let out = loss(&mut tape);
        tape.backward(out)
    };
    let eval = |ps: &ParamSet| -> f64 {
        let mut tape = Tape::new(ps);
        let out = loss(&mut tape);
        tape.value(out).item()
    };

    let mut work = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut entries_checked = 0;
    for id in params.ids() {
        let name = params.name(id).to_string();
        let mut worst_here = 0.0f64;
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&work);
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&work);
            work.get_mut(id).data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteGradCheck {
                    param: name,
                    index: k,
                });
            }
            let fd = (up - down) / (2.0 * eps);
            let err = relative_error(grads.get(id).data()[k], fd);
            entries_checked += 1;
            worst_here = worst_here.max(err);
            if err > max_rel_error {
                max_rel_error = err;
                worst = Some((name.clone(), k));
            }
        }
        per_param.push((name, worst_here));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        worst,
        entries_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, ParamRole};

    #[test]
    fn quadratic_loss_is_exact() {
        let mut ps = ParamSet::new();
        let p = ps.insert(
            "p",
            ParamRole::Weight,
            Matrix::row_vector(vec![0.3, -1.2, 2.5, 0.01]),
        );
        let report = grad_check(&ps, 1e-5, |tape| {
            let v = tape.param(p);
            let s = tape.sum_squares(v);
            tape.scale(s, 0.5)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn constant_direction_reports_zero() {
        let mut ps = ParamSet::new();
        let used = ps.insert("used", ParamRole::Weight, Matrix::scalar(1.5));
        ps.insert("unused", ParamRole::Weight, Matrix::scalar(-3.0));
        let report = grad_check(&ps, 1e-5, |tape| {
            let v = tape.param(used);
            tape.sum_squares(v)
        })
        .unwrap();
        assert_eq!(report.per_param[1], ("unused".to_string(), 0.0));
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut ps = ParamSet::new();
        let p = ps.insert("blowup", ParamRole::Weight, Matrix::scalar(0.0));
        let err = grad_check(&ps, 1e-5, |tape| {
            let v = tape.param(p);
            let x = tape.value(v).item();
            let c = tape.constant(Matrix::scalar(if x != 0.0 { f64::NAN } else { 0.0 }));
            let s = tape.sum_squares(v);
            tape.add(s, c)
        });
        assert!(err.unwrap_err().to_string().contains("blowup"));
    }

    #[test]
    fn eps_range_enforced() {
        let ps = ParamSet::new();
        assert!(grad_check(&ps, 1e-2, |tape| tape.constant(Matrix::scalar(0.0))).is_err());
    }
}
