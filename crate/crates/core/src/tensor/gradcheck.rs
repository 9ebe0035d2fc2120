//! Central-difference gradient verification.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Worst elementwise disagreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Below this magnitude errors are measured absolutely: a central
/// difference at ε = 1e-5 on an O(1) loss carries ~1e-10 of round-off.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` gradients against `(f(x+ε) - f(x-ε)) / 2ε`, one
/// element at a time.
pub fn finite_diff_check<F>(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    mut loss: F,
) -> Result<GradReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        if grad.dims() != params[p].dims() {
            return Err(Error::shape(
                "finite_diff_check",
                params[p].dims(),
                grad.dims(),
            ));
        }
        let mut worst = ParamReport {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[p].len() {
            let base = params[p].data()[i];
            work[p] = with_element(&params[p], i, base + eps);
            let up = loss(&work)?;
            work[p] = with_element(&params[p], i, base - eps);
            let down = loss(&work)?;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || err.is_nan() {
                worst = ParamReport {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        work[p] = params[p].clone();
        reports.push(worst);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        pass: max_rel_error <= tol,
        params: reports,
        max_rel_error,
        tolerance: tol,
    })
}

/// Runs `build` once on a tape to obtain analytic gradients, then checks
/// them against finite differences of the same function.
pub fn check_graph_gradients<F>(
    params: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| graph.param(t.clone())).collect();
    let root = build(&mut graph, &vars)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| grads.get_or_zeros(v, t.dims()))
        .collect();
    drop(graph);
    finite_diff_check(params, &analytic, eps, tol, |ps| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ps.iter().map(|t| g.constant(t.clone())).collect();
        let r = build(&mut g, &vs)?;
        Ok(g.scalar(r))
    })
}

fn with_element(t: &Tensor<f64>, i: usize, value: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[i] = value;
    Tensor::new(t.dims().to_vec(), data).expect("same dims")
}
