//! Central finite-difference gradient checking in 64-bit precision.

use super::array::Array;
use crate::error::Result;

/// Relative error used throughout the gradient checks:
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to entry `index` of input `which`.
pub fn central_difference(
    f: &mut dyn FnMut(&[Array<f64>]) -> Result<f64>,
    inputs: &[Array<f64>],
    which: usize,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let mut probe = inputs.to_vec();
    let x0 = probe[which].data()[index];
    probe[which].data_mut()[index] = x0 + eps;
    let plus = f(&probe)?;
    probe[which].data_mut()[index] = x0 - eps;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Outcome of checking one entry.
#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares analytic gradients against central differences for the given
/// `(input, entry)` pairs.
pub fn check_entries(
    f: &mut dyn FnMut(&[Array<f64>]) -> Result<f64>,
    inputs: &[Array<f64>],
    analytic: &[Array<f64>],
    entries: &[(usize, usize)],
    eps: f64,
    floor: f64,
) -> Result<Vec<EntryCheck>> {
    entries
        .iter()
        .map(|&(input, index)| {
            let numeric = central_difference(f, inputs, input, index, eps)?;
            let a = analytic[input].data()[index];
            Ok(EntryCheck {
                input,
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            })
        })
        .collect()
}
