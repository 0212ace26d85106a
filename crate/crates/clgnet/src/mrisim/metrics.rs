//! Reconstruction quality metrics: NMSE, PSNR, and mean local SSIM with a
//! 7×7 uniform window.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 7;

fn check_same_shape(x: &Tensor, reference: &Tensor) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(Error::dim(format!(
            "metric inputs differ: {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

/// Squared error normalized by the reference's energy.
pub fn nmse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    check_same_shape(x, reference)?;
    let ref_energy = reference.sq_sum();
    if ref_energy == 0.0 {
        return Err(Error::contract("nmse: reference is all zeros"));
    }
    let err: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(err / ref_energy)
}

/// 10·log10(range² / MSE); +inf when the images are identical.
pub fn psnr(x: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    check_same_shape(x, reference)?;
    let mse: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean local SSIM over all fully interior 7×7 windows, uniform weighting,
/// C1 = (0.01 L)², C2 = (0.03 L)², L = 1.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    check_same_shape(x, reference)?;
    let shape = x.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::dim(format!("ssim expects a single image, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = SSIM_WINDOW;
    let norm = (win * win) as f64;
    let a = x.data();
    let b = reference.data();
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..=h - win {
        for j in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..win {
                let row = (i + di) * w + j;
                for dj in 0..win {
                    let va = a[row + dj];
                    let vb = b[row + dj];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let mu_a = sa / norm;
            let mu_b = sb / norm;
            let var_a = saa / norm - mu_a * mu_a;
            let var_b = sbb / norm - mu_b * mu_b;
            let cov = sab / norm - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}
