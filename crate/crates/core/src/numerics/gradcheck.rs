//! Central finite-difference verification of reverse-mode gradients.
//!
//! This is the independent oracle used by every loss in the crate: it never
//! touches the backward rules, only repeated forward evaluations.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Relative error as |g_ad - g_fd| / max(1, |g_fd|).
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(1.0)
}

/// Check the autodiff gradient of a scalar-valued function against central
/// finite differences with step `h`. Returns the max relative error over
/// every coordinate of every input.
pub fn grad_check<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    // Autodiff pass.
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&tape, &vars);
    let root_shape = root.shape();
    if !root_shape.is_empty() && root.with_value(|v| v.len()) != 1 {
        return Err(Error::Usage(format!(
            "grad_check target must be scalar, got shape {root_shape:?}"
        )));
    }
    tape.backward(&root);
    let ad_grads: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| v.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    // Finite-difference pass: evaluate f on grad-free tapes.
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let t = Tape::no_grad();
        let vs: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let out = f(&t, &vs).item();
        if !out.is_finite() {
            return Err(Error::Numeric("non-finite value during finite differencing".into()));
        }
        Ok(out)
    };

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (ti, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let orig = point.data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let fp = eval(&work).map_err(|_| {
                Error::Numeric(format!(
                    "non-finite evaluation at input {ti}, coordinate {ci} (+h)"
                ))
            })?;
            work[ti].data_mut()[ci] = orig - h;
            let fm = eval(&work).map_err(|_| {
                Error::Numeric(format!(
                    "non-finite evaluation at input {ti}, coordinate {ci} (-h)"
                ))
            })?;
            work[ti].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = ad_grads[ti].data()[ci];
            max_err = max_err.max(relative_error(ad, fd));
        }
    }
    Ok(max_err)
}

/// Step sizes per the verification protocol: primitives use a finer step
/// than composite losses.
pub const H_PRIMITIVE: f64 = 1e-5;
pub const H_COMPOSITE: f64 = 1e-4;
