//! 2-D spectral transforms: real FFT, orthonormal Haar DWT, and a direct
//! DFT oracle for testing the FFT against.
//!
//! Conventions fixed here and relied on everywhere else:
//! - forward FFT is unnormalized, inverse carries the full 1/(H·W) factor;
//! - the real FFT stores the non-redundant half spectrum, last axis length
//!   `W/2 + 1`;
//! - the Haar filters are orthonormal (low `(1,1)/sqrt(2)`, high
//!   `(1,-1)/sqrt(2)`), applied along rows then columns, so subband energy
//!   equals input energy exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::half_width;

/// Paired real/imaginary planes of a Fourier-domain grid.
///
/// For real-input transforms the last axis holds the half spectrum
/// (`half_width(W)` entries); [`dft2_oracle`] returns the full spectrum.
#[derive(Debug, Clone)]
pub struct ComplexGrid {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexGrid {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::dim(format!(
                "re/im shapes differ: {:?} vs {:?}",
                re.shape(),
                im.shape()
            )));
        }
        Ok(ComplexGrid { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// Sum of squared magnitudes over every stored entry.
    pub fn abs_sq_sum(&self) -> f64 {
        self.re.sq_sum() + self.im.sq_sum()
    }

    /// Sum of squared magnitudes of the half spectrum, counting mirrored
    /// columns twice so the total matches the full spectrum.
    pub fn abs_sq_sum_hermitian(&self, full_width: usize) -> f64 {
        let shape = self.shape();
        let wf = shape[shape.len() - 1];
        debug_assert_eq!(wf, half_width(full_width));
        let mut acc = 0.0;
        for (idx, (&re, &im)) in self.re.data().iter().zip(self.im.data()).enumerate() {
            let v = idx % wf;
            acc += kernels::hermitian_weight(v, full_width) * (re * re + im * im);
        }
        acc
    }
}

/// The four subbands of one orthonormal Haar analysis level.
#[derive(Debug, Clone)]
pub struct WaveletSubbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletSubbands {
    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        for (name, t) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if t.shape() != s {
                return Err(Error::dim(format!(
                    "subband {name} shape {:?} differs from ll {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.ll.sq_sum() + self.lh.sq_sum() + self.hl.sq_sum() + self.hh.sq_sum()
    }
}

fn split_image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("need at least 2 axes, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = shape[..shape.len() - 2].iter().product::<usize>().max(1);
    Ok((planes, h, w))
}

/// Unnormalized forward real FFT over the last two axes.
pub fn rfft2(x: &Tensor) -> Result<ComplexGrid> {
    let (planes, h, w) = split_image_dims(x.shape())?;
    let wf = half_width(w);
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = wf;
    let mut re = vec![0.0; planes * h * wf];
    let mut im = vec![0.0; planes * h * wf];
    for p in 0..planes {
        kernels::rfft2_plane(
            &x.data()[p * h * w..(p + 1) * h * w],
            h,
            w,
            &mut re[p * h * wf..(p + 1) * h * wf],
            &mut im[p * h * wf..(p + 1) * h * wf],
        );
    }
    ComplexGrid::new(Tensor::from_vec(&out_shape, re)?, Tensor::from_vec(&out_shape, im)?)
}

/// Inverse of [`rfft2`] with 1/(H·W) normalization.
pub fn irfft2(grid: &ComplexGrid, out_hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = out_hw;
    let shape = grid.shape();
    let (planes, gh, gwf) = split_image_dims(shape)?;
    if gh != h || gwf != half_width(w) {
        return Err(Error::dim(format!(
            "grid {:?} inconsistent with output {h}x{w} (expect last axes [{h}, {}])",
            shape,
            half_width(w)
        )));
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = w;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        kernels::irfft2_plane(
            &grid.re.data()[p * h * gwf..(p + 1) * h * gwf],
            &grid.im.data()[p * h * gwf..(p + 1) * h * gwf],
            h,
            w,
            &mut out[p * h * w..(p + 1) * h * w],
        );
    }
    Tensor::from_vec(&out_shape, out)
}

/// Literal evaluation of the 2-D DFT double sum. Quadratic cost; test
/// oracle only. Returns the full spectrum.
pub fn dft2_oracle(x: &Tensor) -> Result<ComplexGrid> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("oracle expects a 2-D array, got {shape:?}")));
    }
    let (m, n) = (shape[0], shape[1]);
    let data = x.data();
    let mut re = vec![0.0; m * n];
    let mut im = vec![0.0; m * n];
    for u in 0..m {
        for v in 0..n {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for xi in 0..m {
                for yi in 0..n {
                    let angle = -2.0
                        * std::f64::consts::PI
                        * ((u * xi) as f64 / m as f64 + (v * yi) as f64 / n as f64);
                    let f = data[xi * n + yi];
                    acc_re += f * angle.cos();
                    acc_im += f * angle.sin();
                }
            }
            re[u * n + v] = acc_re;
            im[u * n + v] = acc_im;
        }
    }
    ComplexGrid::new(Tensor::from_vec(&[m, n], re)?, Tensor::from_vec(&[m, n], im)?)
}

/// One-level orthonormal Haar analysis of an [N, C, H, W] tensor.
pub fn dwt2(x: &Tensor) -> Result<WaveletSubbands> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("dwt2 expects [N,C,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("dwt2 needs even spatial dims, got {h}x{w}")));
    }
    let planes = shape[0] * shape[1];
    let (h2, w2) = (h / 2, w / 2);
    let sub_shape = [shape[0], shape[1], h2, w2];
    let mut ll = vec![0.0; planes * h2 * w2];
    let mut lh = ll.clone();
    let mut hl = ll.clone();
    let mut hh = ll.clone();
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = p * h2 * w2..(p + 1) * h2 * w2;
        kernels::dwt2_plane(
            src,
            h,
            w,
            &mut ll[dst.clone()],
            &mut lh[dst.clone()],
            &mut hl[dst.clone()],
            &mut hh[dst],
        );
    }
    Ok(WaveletSubbands {
        ll: Tensor::from_vec(&sub_shape, ll)?,
        lh: Tensor::from_vec(&sub_shape, lh)?,
        hl: Tensor::from_vec(&sub_shape, hl)?,
        hh: Tensor::from_vec(&sub_shape, hh)?,
    })
}

/// Exact synthesis inverse of [`dwt2`].
pub fn idwt2(s: &WaveletSubbands) -> Result<Tensor> {
    s.check()?;
    let shape = s.ll.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("idwt2 expects [N,C,h,w] subbands, got {shape:?}")));
    }
    let (h2, w2) = (shape[2], shape[3]);
    let planes = shape[0] * shape[1];
    let out_shape = [shape[0], shape[1], h2 * 2, w2 * 2];
    let mut out = vec![0.0; planes * h2 * w2 * 4];
    for p in 0..planes {
        let src = p * h2 * w2..(p + 1) * h2 * w2;
        kernels::idwt2_plane(
            &s.ll.data()[src.clone()],
            &s.lh.data()[src.clone()],
            &s.hl.data()[src.clone()],
            &s.hh.data()[src],
            h2,
            w2,
            &mut out[p * h2 * w2 * 4..(p + 1) * h2 * w2 * 4],
        );
    }
    Tensor::from_vec(&out_shape, out)
}

/// Raw per-plane kernels shared by the public functions, the tape ops, and
/// the k-space simulator.
pub(crate) mod kernels {
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;
    use std::cell::RefCell;
    use std::sync::Arc;

    thread_local! {
        static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    }

    fn plan(len: usize, inverse: bool) -> Arc<dyn rustfft::Fft<f64>> {
        PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            if inverse {
                p.plan_fft_inverse(len)
            } else {
                p.plan_fft_forward(len)
            }
        })
    }

    /// Length of the stored half spectrum for a real transform of width `w`.
    pub fn half_width(w: usize) -> usize {
        w / 2 + 1
    }

    /// 2 for columns whose Hermitian mirror is dropped from the half
    /// spectrum, 1 for self-conjugate columns (v = 0, and v = w/2 when w is
    /// even).
    pub(crate) fn hermitian_weight(v: usize, w: usize) -> f64 {
        if v > 0 && v <= w - half_width(w) {
            2.0
        } else {
            1.0
        }
    }

    /// In-place unnormalized 2-D FFT of an h-by-w complex plane.
    pub(crate) fn fft2_inplace(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
        debug_assert_eq!(buf.len(), h * w);
        if w > 1 {
            plan(w, inverse).process(buf);
        }
        if h > 1 {
            let mut t = vec![Complex::new(0.0, 0.0); h * w];
            for r in 0..h {
                for c in 0..w {
                    t[c * h + r] = buf[r * w + c];
                }
            }
            plan(h, inverse).process(&mut t);
            for r in 0..h {
                for c in 0..w {
                    buf[r * w + c] = t[c * h + r];
                }
            }
        }
    }

    /// Forward real FFT of one plane; writes the h-by-half_width(w) half
    /// spectrum into `re`/`im`.
    pub(crate) fn rfft2_plane(x: &[f64], h: usize, w: usize, re: &mut [f64], im: &mut [f64]) {
        let wf = half_width(w);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2_inplace(&mut buf, h, w, false);
        for u in 0..h {
            for v in 0..wf {
                re[u * wf + v] = buf[u * w + v].re;
                im[u * wf + v] = buf[u * w + v].im;
            }
        }
    }

    /// Adjoint of `rfft2_plane`: maps half-spectrum cotangents back to the
    /// input plane. The half grid is zero-extended to the full spectrum and
    /// pushed through the unnormalized inverse transform.
    pub(crate) fn rfft2_adjoint_plane(g_re: &[f64], g_im: &[f64], h: usize, w: usize, gx: &mut [f64]) {
        let wf = half_width(w);
        let mut buf = vec![Complex::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..wf {
                buf[u * w + v] = Complex::new(g_re[u * wf + v], g_im[u * wf + v]);
            }
        }
        fft2_inplace(&mut buf, h, w, true);
        for (dst, src) in gx.iter_mut().zip(&buf) {
            *dst = src.re;
        }
    }

    /// Inverse real FFT of one half-spectrum plane, 1/(h·w) normalized.
    /// Missing columns are reconstructed by Hermitian mirroring before the
    /// full inverse transform; the real part is returned.
    pub(crate) fn irfft2_plane(re: &[f64], im: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let wf = half_width(w);
        let mut buf = vec![Complex::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..wf {
                buf[u * w + v] = Complex::new(re[u * wf + v], im[u * wf + v]);
            }
            for v in wf..w {
                let su = (h - u) % h;
                let sv = w - v;
                buf[u * w + v] = Complex::new(re[su * wf + sv], -im[su * wf + sv]);
            }
        }
        fft2_inplace(&mut buf, h, w, true);
        let scale = 1.0 / (h * w) as f64;
        for (dst, src) in out.iter_mut().zip(&buf) {
            *dst = src.re * scale;
        }
    }

    /// Adjoint of `irfft2_plane`: forward transform of the output cotangent,
    /// with mirrored columns counted twice and the 1/(h·w) factor applied.
    pub(crate) fn irfft2_adjoint_plane(
        g: &[f64],
        h: usize,
        w: usize,
        g_re: &mut [f64],
        g_im: &mut [f64],
    ) {
        let wf = half_width(w);
        let mut buf: Vec<Complex<f64>> = g.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2_inplace(&mut buf, h, w, false);
        let scale = 1.0 / (h * w) as f64;
        for u in 0..h {
            for v in 0..wf {
                let wt = hermitian_weight(v, w) * scale;
                g_re[u * wf + v] = wt * buf[u * w + v].re;
                g_im[u * wf + v] = wt * buf[u * w + v].im;
            }
        }
    }

    /// One-level Haar analysis of a plane, h and w even. Per 2x2 block
    /// [[a, b], [c, d]]: ll=(a+b+c+d)/2, lh=(a+b-c-d)/2, hl=(a-b+c-d)/2,
    /// hh=(a-b-c+d)/2.
    pub(crate) fn dwt2_plane(
        x: &[f64],
        h: usize,
        w: usize,
        ll: &mut [f64],
        lh: &mut [f64],
        hl: &mut [f64],
        hh: &mut [f64],
    ) {
        let w2 = w / 2;
        for i in 0..h / 2 {
            let top = 2 * i * w;
            let bot = top + w;
            for j in 0..w2 {
                let a = x[top + 2 * j];
                let b = x[top + 2 * j + 1];
                let c = x[bot + 2 * j];
                let d = x[bot + 2 * j + 1];
                ll[i * w2 + j] = 0.5 * (a + b + c + d);
                lh[i * w2 + j] = 0.5 * (a + b - c - d);
                hl[i * w2 + j] = 0.5 * (a - b + c - d);
                hh[i * w2 + j] = 0.5 * (a - b - c + d);
            }
        }
    }

    /// Exact synthesis inverse of `dwt2_plane`.
    pub(crate) fn idwt2_plane(
        ll: &[f64],
        lh: &[f64],
        hl: &[f64],
        hh: &[f64],
        h2: usize,
        w2: usize,
        out: &mut [f64],
    ) {
        let w = 2 * w2;
        for i in 0..h2 {
            let top = 2 * i * w;
            let bot = top + w;
            for j in 0..w2 {
                let s = ll[i * w2 + j];
                let v = lh[i * w2 + j];
                let u = hl[i * w2 + j];
                let d = hh[i * w2 + j];
                out[top + 2 * j] = 0.5 * (s + v + u + d);
                out[top + 2 * j + 1] = 0.5 * (s + v - u - d);
                out[bot + 2 * j] = 0.5 * (s - v + u - d);
                out[bot + 2 * j + 1] = 0.5 * (s - v - u + d);
            }
        }
    }
}
