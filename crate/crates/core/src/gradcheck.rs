//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ParamSet, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_relative_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub max_abs_gradient: f64,
    /// Relative error of every element, row-major.
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_relative_error < tolerance)
    }

    pub fn failures(&self, tolerance: f64) -> impl Iterator<Item = &TensorCheck> {
        self.tensors
            .iter()
            .filter(move |t| !(t.max_relative_error < tolerance))
    }
}

/// Evaluates `build` on a fresh graph with every parameter bound as a
/// variable, then back-propagates. Returns the loss value and one gradient
/// per parameter tensor.
pub fn analytic_gradients<F>(build: &F, params: &ParamSet) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let grads = vars.iter().map(|&v| g.grad(v)).collect();
    Ok((g.scalar(loss), grads))
}

fn forward_value<F>(build: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

/// Compares the graph's analytic gradient of the scalar built by `build`
/// against central differences `(f(θ+h) − f(θ−h)) / 2h`.
pub fn finite_difference_check<F>(build: F, params: &ParamSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(&build, params)?;
    compare_gradients(|p| forward_value(&build, p), &analytic, params, step)
}

/// Compares caller-supplied analytic gradients against central differences
/// of `value`.
pub fn compare_gradients<V>(
    mut value: V,
    analytic: &[Tensor],
    params: &ParamSet,
    step: f64,
) -> Result<GradCheckReport>
where
    V: FnMut(&ParamSet) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "compare_gradients",
            left: vec![params.len()],
            right: vec![analytic.len()],
        });
    }
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (p, grad) in analytic.iter().enumerate() {
        let name = params.name(p).to_string();
        let mut check = TensorCheck {
            name: name.clone(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_abs_gradient: 0.0,
            errors: Vec::with_capacity(grad.len()),
        };
        for j in 0..params.tensor(p).len() {
            let original = params.tensor(p).data()[j];
            work.tensor_mut(p).data_mut()[j] = original + step;
            let plus = value(&work)?;
            work.tensor_mut(p).data_mut()[j] = original - step;
            let minus = value(&work)?;
            work.tensor_mut(p).data_mut()[j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective while perturbing {name}[{j}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            check.max_abs_gradient = check.max_abs_gradient.max(a.abs());
            check.errors.push(err);
            if err > check.max_relative_error || err.is_nan() {
                check.max_relative_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.tensors.push(check);
    }
    Ok(report)
}
