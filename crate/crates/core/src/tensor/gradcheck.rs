use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|) over checked elements.
    pub max_rel_err: f64,
    /// Element with the largest error.
    pub worst_index: Option<usize>,
    /// Elements where the function or its gradient was not finite.
    pub nan_count: usize,
    pub checked: usize,
}

/// Checks every element of `x`. `f` builds a scalar from the input leaf.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, eps, &all)
}

/// Like [`finite_difference_check`] but only perturbs `indices`.
pub fn finite_difference_check_at<F>(
    f: F,
    x: &Tensor<f64>,
    eps: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.leaf(probe.clone());
        let r = f(&mut t, l)?;
        Ok(t.value(r).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        nan_count: 0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        report.checked += 1;
        if !numeric.is_finite() || !analytic[i].is_finite() {
            report.nan_count += 1;
            continue;
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
