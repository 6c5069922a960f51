use super::{Tape, Tensor, Var, DIV_EPS};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over entries of |analytic − numeric| / (|analytic| + 1e-8)
    pub max_rel_err: f64,
    /// (parameter index, flat element index) of the worst entry
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Checks gradients of a tape-built scalar `f` with respect to `params`.
///
/// `f` receives a fresh tape with every parameter registered as a leaf, in
/// order, and returns the loss node.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };
    check_with(eval, &analytic, params, h)
}

/// Same check for a plain closure and externally computed gradients.
pub fn finite_diff_check_fn<F>(
    f: F,
    analytic: &[Tensor],
    params: &[Tensor],
    h: f64,
) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> f64,
{
    check_with(|ps| Ok(f(ps)), analytic, params, h)
}

fn check_with<F>(f: F, analytic: &[Tensor], params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract("one analytic gradient per parameter required".into()));
    }
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, (p, a)) in params.iter().zip(analytic).enumerate() {
        p.same_shape(a, "gradient check")?;
        for j in 0..p.numel() {
            let x0 = p.data[j];
            let mut at = |dx: f64| -> Result<f64> {
                work[pi].data[j] = x0 + dx;
                f(&work)
            };
            // Fourth-order central stencil: truncation O(h^4), so a moderate h
            // keeps round-off small as well.
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work[pi].data[j] = x0;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let an = a.data[j];
            let rel = (an - numeric).abs() / (an.abs() + DIV_EPS);
            out.checked += 1;
            if rel > out.max_rel_err || out.worst.is_none() {
                out.max_rel_err = out.max_rel_err.max(rel);
                out.worst = Some((pi, j));
                out.worst_analytic = an;
                out.worst_numeric = numeric;
            }
        }
    }
    Ok(out)
}
