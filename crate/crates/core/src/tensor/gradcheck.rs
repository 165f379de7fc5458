use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a − n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the max was attained.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must be scalar-valued, got {:?}", v.shape()),
        ));
    }
    Ok(v.data()[0])
}

fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    grad_check_coords(f, inputs, &coords, eps)
}

/// Checks only the listed `(input, coordinate)` pairs.
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let grads = analytic(&f, inputs)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(i, k) in coords {
        let orig = work[i].data()[k];
        work[i].data_mut()[k] = orig + eps;
        let plus = evaluate(&f, &work)?;
        work[i].data_mut()[k] = orig - eps;
        let minus = evaluate(&f, &work)?;
        work[i].data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                input: i,
                coordinate: k,
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = grads[i].data()[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, k));
        }
        report.checked += 1;
    }
    Ok(report)
}
