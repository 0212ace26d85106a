//! Synthetic MRI data: ellipse phantoms, random cartesian undersampling in
//! centered k-space, zero-filled reconstruction, image-quality metrics, and
//! the on-disk dataset format.
//!
//! The pipeline is magnitude-only: ground truth is a real image in [0, 1],
//! k-space is its full complex FFT with the zero frequency shifted to the
//! grid center, masking keeps whole columns, and the input image is the
//! magnitude of the inverse transform.

mod dataset;
mod metrics;

pub use dataset::{
    generate_dataset, load_manifest, load_pair, load_split, save_pair, DatasetManifest, Split,
};
pub use metrics::{nmse, psnr, ssim};

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::rng::{mix, rng_from};
use crate::spectral::kernels::fft2_inplace;
use crate::spectral::ComplexGrid;
use crate::tensor::Tensor;
use rand::Rng;

// ---- phantom --------------------------------------------------------

/// One additive ellipse in normalized [-1, 1] coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    /// Rotation in radians, counterclockwise.
    pub phi: f64,
    pub amplitude: f64,
}

/// The ten ellipses of the modified Shepp-Logan head phantom.
pub fn standard_ellipses() -> Vec<Ellipse> {
    const DEG: f64 = std::f64::consts::PI / 180.0;
    let rows: [(f64, f64, f64, f64, f64, f64); 10] = [
        (0.69, 0.92, 0.0, 0.0, 0.0, 1.0),
        (0.6624, 0.8740, 0.0, -0.0184, 0.0, -0.8),
        (0.11, 0.31, 0.22, 0.0, -18.0, -0.2),
        (0.16, 0.41, -0.22, 0.0, 18.0, -0.2),
        (0.21, 0.25, 0.0, 0.35, 0.0, 0.1),
        (0.046, 0.046, 0.0, 0.1, 0.0, 0.1),
        (0.046, 0.046, 0.0, -0.1, 0.0, 0.1),
        (0.046, 0.023, -0.08, -0.605, 0.0, 0.1),
        (0.023, 0.023, 0.0, -0.606, 0.0, 0.1),
        (0.023, 0.046, 0.06, -0.605, 0.0, 0.1),
    ];
    rows.iter()
        .map(|&(a, b, x0, y0, deg, amplitude)| Ellipse { a, b, x0, y0, phi: deg * DEG, amplitude })
        .collect()
}

/// Standard ellipses with ±5% seed-controlled jitter: axes and amplitude
/// scale by (1 ± 0.05), centers and rotation shift by ±0.05.
pub fn jittered_ellipses(variant_seed: u64) -> Vec<Ellipse> {
    let mut rng = rng_from(mix(variant_seed, 0x7068_616e));
    let mut jit = || rng.gen_range(-1.0..1.0) * 0.05;
    standard_ellipses()
        .into_iter()
        .map(|e| Ellipse {
            a: e.a * (1.0 + jit()),
            b: e.b * (1.0 + jit()),
            x0: e.x0 + jit(),
            y0: e.y0 + jit(),
            phi: e.phi + jit(),
            amplitude: e.amplitude * (1.0 + jit()),
        })
        .collect()
}

/// Sum the ellipse amplitudes at each pixel center and clip to [0, 1].
/// Pixel (0, 0) is the top-left; y points up in ellipse coordinates.
pub fn rasterize_ellipses(h: usize, w: usize, ellipses: &[Ellipse]) -> Tensor {
    let mut data = vec![0.0; h * w];
    for i in 0..h {
        let y = (h as f64 - 2.0 * (i as f64 + 0.5)) / h as f64;
        for j in 0..w {
            let x = (2.0 * (j as f64 + 0.5) - w as f64) / w as f64;
            let mut v = 0.0;
            for e in ellipses {
                let dx = x - e.x0;
                let dy = y - e.y0;
                let (sin, cos) = e.phi.sin_cos();
                let xr = cos * dx + sin * dy;
                let yr = -sin * dx + cos * dy;
                if (xr / e.a).powi(2) + (yr / e.b).powi(2) <= 1.0 {
                    v += e.amplitude;
                }
            }
            data[i * w + j] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[1, h, w], data).unwrap()
}

/// Seed-jittered Shepp-Logan phantom, [1, H, W] in [0, 1].
pub fn phantom(h: usize, w: usize, variant_seed: u64) -> Result<Tensor> {
    if h < 32 || w < 32 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("phantom needs even H, W >= 32, got {h}x{w}")));
    }
    Ok(rasterize_ellipses(h, w, &jittered_ellipses(variant_seed)))
}

// ---- sampling masks -------------------------------------------------

/// Column-sampling pattern in centered k-space.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub columns: Vec<bool>,
    pub acceleration: u32,
    pub center_fraction: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.columns.iter().filter(|&&c| c).count() as f64 / self.columns.len() as f64
    }

    /// The guaranteed low-frequency block: (start, length).
    pub fn center_block(&self) -> (usize, usize) {
        center_block(self.width(), self.center_fraction)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.columns.len()],
            self.columns.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }
}

/// round(center_fraction * w) columns centered on the DC column w/2.
pub fn center_block(w: usize, center_fraction: f64) -> (usize, usize) {
    let len = ((center_fraction * w as f64).round() as usize).max(1).min(w);
    ((w - len) / 2, len)
}

/// Random cartesian mask: the center block is always kept; every other
/// column is kept i.i.d. with the probability that makes the expected total
/// exactly w/r.
pub fn cartesian_mask(w: usize, r: u32, center_fraction: f64, seed: u64) -> Result<SamplingMask> {
    if w == 0 || r == 0 {
        return Err(Error::config(format!("invalid mask request: w={w}, r={r}")));
    }
    if !(0.0..1.0).contains(&center_fraction) || center_fraction <= 0.0 {
        return Err(Error::config(format!("center_fraction {center_fraction} not in (0, 1)")));
    }
    let (start, len) = center_block(w, center_fraction);
    let target = w as f64 / r as f64;
    if target < len as f64 {
        return Err(Error::config(format!(
            "w/r = {target} cannot cover the {len}-column center block"
        )));
    }
    let rest = (w - len) as f64;
    let p = if rest == 0.0 { 0.0 } else { ((target - len as f64) / rest).min(1.0) };
    let mut rng = rng_from(mix(seed, 0x6d61_736b));
    let columns: Vec<bool> = (0..w)
        .map(|v| {
            if v >= start && v < start + len {
                true
            } else {
                rng.gen_range(0.0..1.0) < p
            }
        })
        .collect();
    Ok(SamplingMask { columns, acceleration: r, center_fraction, seed })
}

// ---- k-space simulation ---------------------------------------------

/// One training/eval example: ground truth, zero-filled input, and the mask
/// that produced it.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub gt: Tensor,
    pub input: Tensor,
    pub mask: SamplingMask,
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim(format!("expected [1,H,W] image, got {s:?}")));
    }
    Ok((s[1], s[2]))
}

fn roll_index(i: usize, shift: usize, n: usize) -> usize {
    (i + shift) % n
}

/// Circularly shift a complex plane so entry (0,0) moves to
/// (dr, dc).
fn roll2(buf: &[Complex<f64>], h: usize, w: usize, dr: usize, dc: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for i in 0..h {
        let ti = roll_index(i, dr, h);
        for j in 0..w {
            out[ti * w + roll_index(j, dc, w)] = buf[i * w + j];
        }
    }
    out
}

/// Full complex spectrum of a [1,H,W] image with the zero frequency at the
/// grid center (row h/2, column w/2).
pub fn centered_kspace(img: &Tensor) -> Result<ComplexGrid> {
    let (h, w) = image_dims(img)?;
    let mut buf: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    let buf = roll2(&buf, h, w, h / 2, w / 2);
    ComplexGrid::new(
        Tensor::from_vec(&[h, w], buf.iter().map(|c| c.re).collect())?,
        Tensor::from_vec(&[h, w], buf.iter().map(|c| c.im).collect())?,
    )
}

/// Centered k-space of the image with unsampled columns zeroed.
pub fn masked_centered_kspace(img: &Tensor, mask: &SamplingMask) -> Result<ComplexGrid> {
    let (_, w) = image_dims(img)?;
    if mask.width() != w {
        return Err(Error::dim(format!("mask width {} vs image width {w}", mask.width())));
    }
    let mut k = centered_kspace(img)?;
    for (idx, keep) in
        (0..k.re.numel()).map(|i| (i, mask.columns[i % w]))
    {
        if !keep {
            k.re.data_mut()[idx] = 0.0;
            k.im.data_mut()[idx] = 0.0;
        }
    }
    Ok(k)
}

/// Complex zero-filled reconstruction: inverse FFT of the masked centered
/// k-space. Returns (re, im) as [1,H,W] tensors.
pub fn zero_filled_complex(img: &Tensor, mask: &SamplingMask) -> Result<(Tensor, Tensor)> {
    let (h, w) = image_dims(img)?;
    let k = masked_centered_kspace(img, mask)?;
    let centered: Vec<Complex<f64>> = k
        .re
        .data()
        .iter()
        .zip(k.im.data())
        .map(|(&re, &im)| Complex::new(re, im))
        .collect();
    // undo the center shift, then the unnormalized inverse transform
    let mut buf = roll2(&centered, h, w, h - h / 2, w - w / 2);
    fft2_inplace(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    Ok((
        Tensor::from_vec(&[1, h, w], buf.iter().map(|c| c.re * scale).collect())?,
        Tensor::from_vec(&[1, h, w], buf.iter().map(|c| c.im * scale).collect())?,
    ))
}

/// Simulate one undersampled example: mask the ground truth's centered
/// k-space and take the magnitude of the inverse transform.
pub fn make_pair(gt: &Tensor, mask: &SamplingMask) -> Result<SamplePair> {
    let (re, im) = zero_filled_complex(gt, mask)?;
    let input = Tensor::from_vec(
        gt.shape(),
        re.data().iter().zip(im.data()).map(|(&a, &b)| (a * a + b * b).sqrt()).collect(),
    )?;
    if !input.is_finite() {
        return Err(Error::numeric("make_pair", "non-finite zero-filled input"));
    }
    Ok(SamplePair { gt: gt.clone(), input, mask: mask.clone() })
}
