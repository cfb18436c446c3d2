use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` perturbation changes a branch decision
    /// (activation sign, argmax, clamp); the function is not differentiable
    /// there at this step size.
    pub excluded: Vec<usize>,
}

fn evaluate<F>(f: &F, x: &Tensor<f64>, requires_grad: bool) -> Result<(Tape<f64>, Var<f64>, Var<f64>, f64)>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), requires_grad);
    let y = f(&tape, &xv)?;
    let value = y.value().item()?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok((tape, xv, y, value))
}

/// Checks the gradient of the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let (tape, xv, y, _) = evaluate(&f, x, true)?;
    tape.backward(&y)?;
    let analytic = xv
        .grad()
        .unwrap_or_else(|| Tensor::from_parts(vec![0.0; x.numel()], x.shape().to_vec()));
    let base_sig = tape.branch_signature();

    let mut max_rel_error = 0.0f64;
    let mut excluded = Vec::new();
    let mut checked = 0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (tp, _, _, fp) = evaluate(&f, &plus, false)?;
        let (tm, _, _, fm) = evaluate(&f, &minus, false)?;
        if tp.branch_signature() != base_sig || tm.branch_signature() != base_sig {
            excluded.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        max_rel_error = max_rel_error.max((a - numeric).abs() / a.abs().max(1.0));
        checked += 1;
    }
    Ok(GradCheck {
        max_rel_error,
        checked,
        excluded,
    })
}
