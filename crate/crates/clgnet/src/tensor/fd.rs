//! Central-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only re-evaluates a black-box
//! scalar function, so it can vouch for the tape's backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-coordinate central difference (f(x+h·e_i) - f(x-h·e_i)) / (2h).
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_grad_at(f, x, h, &coords)?;
    Tensor::from_vec(x.shape(), g)
}

/// Central difference at one coordinate, or `None` when the two one-sided
/// slopes disagree - that reveals a kink (ReLU, |.|, L1 tie) within ±h,
/// where no finite-difference estimate is trustworthy. Gradient checks are
/// only meaningful away from non-smooth points.
pub fn central_diff_if_smooth(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
    coord: usize,
) -> Result<Option<f64>> {
    if h <= 0.0 {
        return Err(Error::contract(format!("finite differences need h > 0, got {h}")));
    }
    let mut work = x.clone();
    let orig = work.data()[coord];
    let f0 = f(&work)?;
    work.data_mut()[coord] = orig + h;
    let fp = f(&work)?;
    work.data_mut()[coord] = orig - h;
    let fm = f(&work)?;
    let d_plus = (fp - f0) / h;
    let d_minus = (f0 - fm) / h;
    let scale = d_plus.abs().max(d_minus.abs()).max(1e-8);
    if (d_plus - d_minus).abs() > 1e-3 * scale {
        return Ok(None);
    }
    Ok(Some((fp - fm) / (2.0 * h)))
}

/// Central differences at selected coordinates only; the caller owns the
/// cost trade-off for large tensors.
pub fn finite_diff_grad_at(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::contract(format!("finite differences need h > 0, got {h}")));
    }
    let mut work = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work.data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}
