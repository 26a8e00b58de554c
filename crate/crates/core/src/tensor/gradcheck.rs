use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference check for one input.
#[derive(Clone, Debug, PartialEq)]
pub enum InputCheck {
    /// `max |analytic − numeric| / max(1, |numeric|)` over the checked
    /// coordinates; `clamped` coordinates sat within `eps` of a log floor
    /// and were skipped.
    Checked { max_rel_error: f64, clamped: usize },
    /// Every coordinate sat at the log floor.
    Clamped,
    /// The op has no analytic gradient for this input.
    NotDifferentiable,
}

impl InputCheck {
    pub fn max_rel_error(&self) -> Option<f64> {
        match self {
            InputCheck::Checked { max_rel_error, .. } => Some(*max_rel_error),
            _ => None,
        }
    }

    pub fn is_clamped(&self) -> bool {
        matches!(self, InputCheck::Clamped)
    }
}

fn validate(point: &[Tensor], eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if point.iter().any(|t| !t.is_finite()) {
        return Err(Error::Contract("check point contains non-finite values".into()));
    }
    Ok(())
}

/// Checks the gradient of an arbitrary scalar function of `point` against
/// central differences. `differentiable[i]` selects which inputs to check;
/// `skip(i, j)` excludes individual coordinates (reported as clamped).
pub fn finite_diff_check_fn<F>(
    f: F,
    point: &[Tensor],
    differentiable: &[bool],
    eps: f64,
    skip: impl Fn(usize, usize) -> bool,
) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    validate(point, eps)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        t.value(r).item()
    };

    let mut results = Vec::with_capacity(point.len());
    for (i, input) in point.iter().enumerate() {
        if !differentiable[i] {
            results.push(InputCheck::NotDifferentiable);
            continue;
        }
        let analytic = grads
            .get(vars[i])
            .ok_or_else(|| Error::Contract(format!("no gradient for input {i}")))?;
        let mut worst: f64 = 0.0;
        let mut clamped = 0;
        let mut checked = 0;
        for j in 0..input.len() {
            if skip(i, j) {
                clamped += 1;
                continue;
            }
            let mut shifted = point.to_vec();
            let mut data = input.to_vec();
            data[j] = input.data()[j] + eps;
            shifted[i] = Tensor::from_vec(input.shape().to_vec(), data.clone())?;
            let up = eval(&shifted)?;
            data[j] = input.data()[j] - eps;
            shifted[i] = Tensor::from_vec(input.shape().to_vec(), data)?;
            let down = eval(&shifted)?;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
        if checked == 0 && clamped > 0 {
            results.push(InputCheck::Clamped);
        } else {
            results.push(InputCheck::Checked {
                max_rel_error: worst,
                clamped,
            });
        }
    }
    Ok(results)
}

/// Fixed pseudo-random weights used to reduce an op's output to a scalar so
/// every output coordinate contributes to the check.
fn projection(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|k| ((k as f64 + 1.0) * 1.618_033_988_75).sin() + 0.25)
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("length matches shape")
}

/// Central-difference check of one primitive at `point`. Returns one entry
/// per input.
pub fn finite_diff_check(op: &OpKind, point: &[Tensor], eps: f64) -> Result<Vec<InputCheck>> {
    let diff = op.differentiable_inputs(point.len());
    if !diff.iter().any(|&d| d) {
        return Err(Error::UnsupportedOp(format!(
            "{} has no analytic gradient",
            op.name()
        )));
    }
    let floor = match op {
        OpKind::Log { floor } => Some(*floor),
        _ => None,
    };
    let skip = |i: usize, j: usize| match floor {
        Some(f) => point[i].data()[j] - eps <= f,
        None => false,
    };
    finite_diff_check_fn(
        |tape, vars| {
            let out = tape.apply(op.clone(), vars)?;
            let w = tape.constant(projection(tape.value(out).shape()));
            tape.dot(out, w)
        },
        point,
        &diff,
        eps,
        skip,
    )
}
