use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const REL_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// `‖autodiff − fd‖₂ / (‖fd‖₂ + ε)` for each parameter tensor.
    pub per_param: Vec<f64>,
    /// Largest elementwise absolute discrepancy, for diagnostics.
    pub max_abs_error: f64,
    pub autodiff: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::InvalidShape("grad_check needs a scalar function".into()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step [`FD_STEP`].
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidShape("grad_check needs a scalar function".into()));
    }
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(out)?;
    let autodiff: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    if autodiff.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("autodiff gradient".into()));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut col = Vec::with_capacity(params[pi].numel());
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + FD_STEP;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig - FD_STEP;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig;
            col.push((plus - minus) / (2.0 * FD_STEP));
        }
        numeric.push(col);
    }

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_abs_error = 0.0f64;
    for (a, n) in autodiff.iter().zip(&numeric) {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (x, y) in a.iter().zip(n) {
            diff += (x - y).powi(2);
            norm += y * y;
            max_abs_error = max_abs_error.max((x - y).abs());
        }
        per_param.push(diff.sqrt() / (norm.sqrt() + REL_EPS));
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_param, max_abs_error, autodiff, numeric })
}
