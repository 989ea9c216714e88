//! Gradient verification against central finite differences.
//!
//! Meant to run in 64-bit mode: 32-bit finite differences are too noisy to
//! separate an implementation bug from rounding error.

use super::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("gradcheck eps {eps:e} outside [1e-6, 1e-3]")]
    EpsOutOfRange { eps: f64 },
    #[error("leaf {leaf} has no gradient after backward")]
    MissingGrad { leaf: usize },
    #[error("non-finite analytic gradient at leaf {leaf}, component {index}")]
    NonFiniteAnalytic { leaf: usize, index: usize },
    #[error("non-finite numeric gradient at leaf {leaf}, component {index}")]
    NonFiniteNumeric { leaf: usize, index: usize },
    #[error("forward produced non-finite loss {value}")]
    NonFiniteLoss { value: f64 },
    #[error(transparent)]
    Forward(#[from] TensorError),
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, analytic.abs())
}

/// Check the gradient of a scalar-valued function of one tensor.
///
/// Returns the max over components of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, GradcheckError>
where
    F: Fn(&Tensor<f64>) -> super::Result<Tensor<f64>>,
{
    gradcheck_leaves(|| f(x), std::slice::from_ref(x), eps)
}

/// Check gradients of a scalar-valued function w.r.t. several leaf tensors.
///
/// The closure must rebuild the loss from the leaves' current data on every
/// call; the leaves are perturbed in place between evaluations and restored
/// afterwards.
pub fn gradcheck_leaves<F>(
    f: F,
    leaves: &[Tensor<f64>],
    eps: f64,
) -> Result<f64, GradcheckError>
where
    F: Fn() -> super::Result<Tensor<f64>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(GradcheckError::EpsOutOfRange { eps });
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = f()?;
    let base = loss.item().as_f64();
    if !base.is_finite() {
        return Err(GradcheckError::NonFiniteLoss { value: base });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .enumerate()
        .map(|(li, leaf)| {
            leaf.grad()
                .ok_or(GradcheckError::MissingGrad { leaf: li })
        })
        .collect::<Result<_, _>>()?;
    for (li, grads) in analytic.iter().enumerate() {
        if let Some(index) = grads.iter().position(|v| !v.is_finite()) {
            return Err(GradcheckError::NonFiniteAnalytic { leaf: li, index });
        }
    }
    let eval = |check_finite: bool| -> Result<f64, GradcheckError> {
        let v = f()?.item().as_f64();
        if check_finite && !v.is_finite() {
            return Err(GradcheckError::NonFiniteLoss { value: v });
        }
        Ok(v)
    };
    let mut max_err = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for index in 0..leaf.numel() {
            leaf.nudge(index, eps);
            let plus = eval(false)?;
            leaf.nudge(index, -2.0 * eps);
            let minus = eval(false)?;
            leaf.nudge(index, eps);
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(GradcheckError::NonFiniteNumeric { leaf: li, index });
            }
            let err = relative_error(analytic[li][index], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
