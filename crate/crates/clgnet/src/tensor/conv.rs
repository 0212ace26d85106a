//! Raw cross-correlation kernels behind the tape's conv op.
//!
//! Layout is NCHW row-major throughout. Parallelism is over disjoint output
//! slabs only, so results are bitwise identical for any thread count.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output index range `lo..hi` for which `i*stride + k - pad` stays inside
/// `0..in_len`.
fn valid_range(stride: usize, pad: usize, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k).div_ceil(stride)).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, out: &mut [f64]) {
    let plane = d.out_h * d.out_w;
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let n = idx / d.cout;
        let co = idx % d.cout;
        o.fill(b[co]);
        for ci in 0..d.cin {
            let x_plane = &x[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
            let w_base = ((co * d.cin + ci) * d.kh) * d.kw;
            for ki in 0..d.kh {
                let (ilo, ihi) = valid_range(d.stride, d.pad, ki, d.h, d.out_h);
                for kj in 0..d.kw {
                    let wv = w[w_base + ki * d.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (jlo, jhi) = valid_range(d.stride, d.pad, kj, d.w, d.out_w);
                    for i in ilo..ihi {
                        let src_row = (i * d.stride + ki - d.pad) * d.w;
                        let dst_row = i * d.out_w;
                        if d.stride == 1 {
                            let off = kj as isize - d.pad as isize;
                            let src = &x_plane[(src_row as isize + jlo as isize + off) as usize..]
                                [..jhi - jlo];
                            let dst = &mut o[dst_row + jlo..dst_row + jhi];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv += wv * sv;
                            }
                        } else {
                            for j in jlo..jhi {
                                o[dst_row + j] += wv * x_plane[src_row + j * d.stride + kj - d.pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn grad_input(g: &[f64], w: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let plane = d.h * d.w;
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, gxp)| {
        let n = idx / d.cin;
        let ci = idx % d.cin;
        gxp.fill(0.0);
        for co in 0..d.cout {
            let g_plane = &g[(n * d.cout + co) * d.out_h * d.out_w..][..d.out_h * d.out_w];
            let w_base = ((co * d.cin + ci) * d.kh) * d.kw;
            for ki in 0..d.kh {
                let (ilo, ihi) = valid_range(d.stride, d.pad, ki, d.h, d.out_h);
                for kj in 0..d.kw {
                    let wv = w[w_base + ki * d.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (jlo, jhi) = valid_range(d.stride, d.pad, kj, d.w, d.out_w);
                    for i in ilo..ihi {
                        let dst_row = (i * d.stride + ki - d.pad) * d.w;
                        let src_row = i * d.out_w;
                        if d.stride == 1 {
                            let off = kj as isize - d.pad as isize;
                            let dst = &mut gxp[(dst_row as isize + jlo as isize + off) as usize..]
                                [..jhi - jlo];
                            let src = &g_plane[src_row + jlo..src_row + jhi];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv += wv * sv;
                            }
                        } else {
                            for j in jlo..jhi {
                                gxp[dst_row + j * d.stride + kj - d.pad] +=
                                    wv * g_plane[src_row + j];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn grad_weight(g: &[f64], x: &[f64], d: &ConvDims, gw: &mut [f64]) {
    let per_co = d.cin * d.kh * d.kw;
    gw.par_chunks_mut(per_co).enumerate().for_each(|(co, gwc)| {
        gwc.fill(0.0);
        for n in 0..d.n {
            let g_plane = &g[(n * d.cout + co) * d.out_h * d.out_w..][..d.out_h * d.out_w];
            for ci in 0..d.cin {
                let x_plane = &x[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                for ki in 0..d.kh {
                    let (ilo, ihi) = valid_range(d.stride, d.pad, ki, d.h, d.out_h);
                    for kj in 0..d.kw {
                        let (jlo, jhi) = valid_range(d.stride, d.pad, kj, d.w, d.out_w);
                        let mut acc = 0.0;
                        for i in ilo..ihi {
                            let src_row = (i * d.stride + ki - d.pad) * d.w;
                            let g_row = i * d.out_w;
                            if d.stride == 1 {
                                let off = kj as isize - d.pad as isize;
                                let xs = &x_plane
                                    [(src_row as isize + jlo as isize + off) as usize..]
                                    [..jhi - jlo];
                                let gs = &g_plane[g_row + jlo..g_row + jhi];
                                for (xv, gv) in xs.iter().zip(gs) {
                                    acc += xv * gv;
                                }
                            } else {
                                for j in jlo..jhi {
                                    acc += x_plane[src_row + j * d.stride + kj - d.pad]
                                        * g_plane[g_row + j];
                                }
                            }
                        }
                        gwc[(ci * d.kh + ki) * d.kw + kj] += acc;
                    }
                }
            }
        }
    });
}

pub(crate) fn grad_bias(g: &[f64], d: &ConvDims, gb: &mut [f64]) {
    let plane = d.out_h * d.out_w;
    gb.par_iter_mut().enumerate().for_each(|(co, acc)| {
        *acc = 0.0;
        for n in 0..d.n {
            *acc += g[(n * d.cout + co) * plane..][..plane].iter().sum::<f64>();
        }
    });
}
