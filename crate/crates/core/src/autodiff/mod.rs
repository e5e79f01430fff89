//! Reverse-mode automatic differentiation with nested derivatives.
//!
//! [`Tape`] records scalar (optionally lane-batched) operations. First
//! derivatives come from [`Tape::grad_values`]; derivatives that must be
//! differentiated again are produced by [`Tape::grad_graph`], which records
//! the backward sweep as new nodes. Hessians and parameter gradients of
//! losses containing input derivatives are both built from these two calls.

mod scalar;
mod tape;

pub use scalar::Scalar;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Gradient of a scalar function at `x`.
pub fn grad_input<F>(f: F, x: &[f64]) -> Vec<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let xs = tape.leaves(x);
    let y = f(&xs);
    tape.grad_scalars(y, &xs)
}

/// Dense Hessian of a scalar function at `x` (row `i` is `∂(∂f/∂x_i)/∂x`).
pub fn hessian_input<F>(f: F, x: &[f64]) -> Vec<Vec<f64>>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let xs = tape.leaves(x);
    let y = f(&xs);
    let g = tape.grad_graph(y, &xs);
    g.iter().map(|&gi| tape.grad_scalars(gi, &xs)).collect()
}

/// Value and gradient of a scalar loss with respect to parameters `theta`.
///
/// The loss may internally call [`Tape::grad_graph`] on its own inputs; those
/// derivatives are differentiated through.
pub fn grad_params<F>(loss: F, theta: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let ps = tape.leaves(theta);
    let l = loss(&tape, &ps);
    let value = l.value();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "loss evaluation at {} parameters (value {value})",
                theta.len()
            ),
        });
    }
    let g = tape.grad_scalars(l, &ps);
    if let Some(k) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient entry {k} of loss"),
        });
    }
    Ok((value, g))
}
