use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function with central differences.
///
/// `f` builds the function on a fresh graph from parameter leaves. Returns the
/// maximum over all parameter entries of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(i, p))
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let out = f(&mut g, &vars)?;
        g.check_finite()?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check".into() });
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let analytic = grads.param(i).expect("registered").clone();
        for j in 0..params[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
