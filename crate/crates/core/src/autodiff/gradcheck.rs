//! Central finite-difference gradient checking.
//!
//! The checker re-runs a scalar-valued closure with each input element
//! perturbed by ±h and compares the quotient against the reverse-mode
//! gradient. It never inspects the graph, so it stays independent of the
//! implementation path it verifies. Run it in f64.

use super::{DiffTensor, Scalar};
use crate::error::{Error, Result};

type LossFn<'a, T> = dyn Fn(&[DiffTensor<T>]) -> Result<DiffTensor<T>> + 'a;

/// Numerical gradient of `f` w.r.t. every element of every input.
pub fn finite_difference_gradients<T: Scalar>(
    f: &LossFn<'_, T>,
    inputs: &[DiffTensor<T>],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for input in inputs {
        let base = input.values();
        let mut g = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] = T::from_f64(plus[i].to_f64() + h);
            input.set_values(plus)?;
            let f_plus = f(inputs)?.item()?.to_f64();

            let mut minus = base.clone();
            minus[i] = T::from_f64(minus[i].to_f64() - h);
            input.set_values(minus)?;
            let f_minus = f(inputs)?.item()?.to_f64();

            g.push((f_plus - f_minus) / (2.0 * h));
        }
        input.set_values(base)?;
        grads.push(g);
    }
    Ok(grads)
}

/// Runs one reverse-mode pass and the finite-difference probe, failing if any
/// element disagrees beyond `rel_tol` relative error (with an absolute floor
/// of the same magnitude).
pub fn check_gradients<T: Scalar>(
    f: &LossFn<'_, T>,
    inputs: &[DiffTensor<T>],
    h: f64,
    rel_tol: f64,
) -> Result<()> {
    for input in inputs {
        input.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|p| p.grad_or_zeros().iter().map(|v| v.to_f64()).collect())
        .collect();
    let numeric = finite_difference_gradients(f, inputs, h)?;
    for (pi, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        for (i, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            let scale = 1.0 + av.abs().max(nv.abs());
            if (av - nv).abs() > rel_tol * scale {
                return Err(Error::InvalidInput(format!(
                    "gradient mismatch at input {pi} element {i}: reverse-mode {av:.9e}, \
                     finite-difference {nv:.9e}"
                )));
            }
        }
    }
    Ok(())
}
