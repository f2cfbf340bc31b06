//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub tol: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
        }
    }
}

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Evaluates `f` on fresh graph leaves holding `inputs` and returns the
/// scalar loss value together with the analytic gradient of every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((value, out))
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.value(loss).item()
}

/// Central-difference derivative of `f` w.r.t. every coordinate of
/// `inputs[which]`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], which: usize, step: f64) -> Result<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let n = work[which].numel();
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + step;
        let plus = eval(f, &work)?;
        work[which].data_mut()[idx] = orig - step;
        let minus = eval(f, &work)?;
        work[which].data_mut()[idx] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(work[which].shape().to_vec(), out)
}

/// Compares precomputed analytic gradients against central differences.
pub fn compare_with_numeric<F>(
    f: &F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    opts: &CheckOptions,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut report = CheckReport::default();
    for (which, a) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(f, inputs, which, opts.step)?;
        for (index, (&an, &nu)) in a.data().iter().zip(numeric.data()).enumerate() {
            let rel = relative_error(an, nu);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel <= opts.tol) {
                report.failures.push(Mismatch {
                    input: which,
                    index,
                    analytic: an,
                    numeric: nu,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Checks the reverse-mode gradient of the scalar built by `f` against
/// central differences, coordinate by coordinate, for every input tensor.
///
/// `f` must be deterministic. Failures are reported, not raised.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(&f, inputs)?;
    compare_with_numeric(&f, inputs, &analytic, opts)
}
