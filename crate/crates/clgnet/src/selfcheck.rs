//! Runnable verification suites: the spectral oracles, transform
//! roundtrips, Parseval accounting, a model gradient check, and the
//! receptive-field witness. The CLI prints one PASS/FAIL line per suite.

use rand::Rng;

use crate::layers::{
    clgnet_forward, init_tensor_map, sfl_forward, sfl_specs, BoundParams, ModelParams, NetConfig,
};
use crate::rng::rng_from;
use crate::spectral::{dft2_oracle, dwt2, idwt2, irfft2, rfft2, half_width};
use crate::tensor::{central_diff_if_smooth, rel_err, Tape, Tensor};

/// Hooks for negative-control testing; defaults run the real thing.
#[derive(Debug, Clone)]
pub struct SelfcheckOptions {
    /// Multiplies the forward-transform output inside the Parseval suite.
    /// Any value other than 1.0 simulates a mis-normalized FFT.
    pub fft_scale: f64,
    /// Finite-difference probes per parameter tensor in the gradient suite.
    pub grad_coords_per_tensor: usize,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions { fft_scale: 1.0, grad_coords_per_tensor: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        SuiteResult { name, passed: true, detail: detail.into() }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        SuiteResult { name, passed: false, detail: detail.into() }
    }
}

pub fn all_passed(results: &[SuiteResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Run every suite. Deterministic; independent of thread count.
pub fn run(opts: &SelfcheckOptions) -> Vec<SuiteResult> {
    vec![
        fft_oracle_suite(),
        parseval_suite(opts.fft_scale),
        fft_roundtrip_suite(),
        wavelet_suite(),
        gradient_suite(opts.grad_coords_per_tensor),
        receptive_field_suite(),
    ]
}

fn random2(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn fft_oracle_suite() -> SuiteResult {
    const NAME: &str = "fft-vs-direct-dft";
    let mut worst: f64 = 0.0;
    for h in 1..=8 {
        for w in 1..=8 {
            let x = random2(h, w, (h * 64 + w) as u64);
            let fast = match rfft2(&x) {
                Ok(g) => g,
                Err(e) => return SuiteResult::fail(NAME, format!("rfft2 failed: {e}")),
            };
            let slow = dft2_oracle(&x).unwrap();
            let wf = half_width(w);
            for u in 0..h {
                for v in 0..wf {
                    worst = worst
                        .max((fast.re.data()[u * wf + v] - slow.re.data()[u * w + v]).abs())
                        .max((fast.im.data()[u * wf + v] - slow.im.data()[u * w + v]).abs());
                }
            }
        }
    }
    if worst < 1e-10 {
        SuiteResult::pass(NAME, format!("max abs err {worst:.2e} over all sizes to 8x8"))
    } else {
        SuiteResult::fail(NAME, format!("max abs err {worst:.2e} exceeds 1e-10"))
    }
}

fn parseval_suite(fft_scale: f64) -> SuiteResult {
    const NAME: &str = "parseval";
    let mut worst: f64 = 0.0;
    for &(h, w) in &[(4usize, 4usize), (5, 7), (8, 6), (16, 16), (3, 9), (12, 5)] {
        let x = random2(h, w, (h * 131 + w) as u64);
        let mut g = rfft2(&x).unwrap();
        if fft_scale != 1.0 {
            for v in g.re.data_mut() {
                *v *= fft_scale;
            }
            for v in g.im.data_mut() {
                *v *= fft_scale;
            }
        }
        let lhs = g.abs_sq_sum_hermitian(w);
        let rhs = (h * w) as f64 * x.sq_sum();
        worst = worst.max((lhs - rhs).abs() / rhs.abs());
    }
    if worst < 1e-10 {
        SuiteResult::pass(NAME, format!("max rel err {worst:.2e}"))
    } else {
        SuiteResult::fail(NAME, format!("max rel err {worst:.2e} exceeds 1e-10"))
    }
}

fn fft_roundtrip_suite() -> SuiteResult {
    const NAME: &str = "fft-roundtrip";
    let mut worst: f64 = 0.0;
    for &(h, w) in &[(8usize, 8usize), (17, 17), (5, 12), (32, 32), (1, 9)] {
        let x = random2(h, w, (h * 977 + w) as u64);
        match irfft2(&rfft2(&x).unwrap(), (h, w)) {
            Ok(back) => worst = worst.max(x.max_abs_diff(&back)),
            Err(e) => return SuiteResult::fail(NAME, format!("irfft2 failed: {e}")),
        }
    }
    if worst < 1e-10 {
        SuiteResult::pass(NAME, format!("max abs err {worst:.2e}"))
    } else {
        SuiteResult::fail(NAME, format!("max abs err {worst:.2e} exceeds 1e-10"))
    }
}

fn wavelet_suite() -> SuiteResult {
    const NAME: &str = "wavelet-roundtrip";
    let mut worst_rt: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    for &(h, w) in &[(8usize, 8usize), (16, 16), (32, 10), (6, 20)] {
        let x = random2(h, w, (h * 613 + w) as u64).reshaped(&[1, 1, h, w]).unwrap();
        let bands = match dwt2(&x) {
            Ok(b) => b,
            Err(e) => return SuiteResult::fail(NAME, format!("dwt2 failed: {e}")),
        };
        worst_energy = worst_energy.max((bands.energy() - x.sq_sum()).abs() / x.sq_sum());
        match idwt2(&bands) {
            Ok(back) => worst_rt = worst_rt.max(x.max_abs_diff(&back)),
            Err(e) => return SuiteResult::fail(NAME, format!("idwt2 failed: {e}")),
        }
    }
    if worst_rt < 1e-10 && worst_energy < 1e-9 {
        SuiteResult::pass(
            NAME,
            format!("roundtrip {worst_rt:.2e}, energy drift {worst_energy:.2e}"),
        )
    } else {
        SuiteResult::fail(
            NAME,
            format!("roundtrip {worst_rt:.2e} / energy drift {worst_energy:.2e} out of bounds"),
        )
    }
}

fn gradient_suite(coords_per_tensor: usize) -> SuiteResult {
    const NAME: &str = "tiny-model-gradient";
    let cfg = NetConfig::tiny();
    let params = ModelParams::init(&cfg, 31);
    let mut rng = rng_from(32);
    let input = Tensor::from_vec(
        &[1, 1, 16, 16],
        (0..256).map(|_| rng.gen_range(0.1..0.9)).collect(),
    )
    .unwrap();
    let target = Tensor::from_vec(
        &[1, 1, 16, 16],
        (0..256).map(|_| rng.gen_range(0.1..0.9)).collect(),
    )
    .unwrap();

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, true);
    let x = tape.constant(&input);
    let o = match clgnet_forward(&mut tape, x, &bound, &cfg) {
        Ok(o) => o,
        Err(e) => return SuiteResult::fail(NAME, format!("forward failed: {e}")),
    };
    let t = tape.constant(&target);
    let loss = tape.mean_abs_diff(o, t).unwrap();
    let mut grads = match tape.backward(loss) {
        Ok(g) => g,
        Err(e) => return SuiteResult::fail(NAME, format!("backward failed: {e}")),
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for (path, tensor) in params.tensors() {
        let g_ad = grads.take(bound.var(path).unwrap()).unwrap();
        let mut f = |t: &Tensor| {
            let mut pert = params.clone();
            *pert.get_mut(path).unwrap() = t.clone();
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &pert, false);
            let x = tape.constant(&input);
            let o = clgnet_forward(&mut tape, x, &bound, &cfg)?;
            let tv = tape.constant(&target);
            let loss = tape.mean_abs_diff(o, tv)?;
            tape.value(loss).item()
        };
        for _ in 0..coords_per_tensor.max(1) {
            let c = rng.gen_range(0..tensor.numel());
            match central_diff_if_smooth(&mut f, tensor, 1e-5, c) {
                Ok(Some(fd)) => {
                    worst = worst.max(rel_err(g_ad.data()[c], fd));
                    checked += 1;
                }
                Ok(None) => {} // kink within +-h: not checkable
                Err(e) => return SuiteResult::fail(NAME, format!("probe failed: {e}")),
            }
        }
    }
    if worst < 1e-3 && checked > 0 {
        SuiteResult::pass(NAME, format!("{checked} coords, worst rel err {worst:.2e}"))
    } else {
        SuiteResult::fail(NAME, format!("{checked} coords, worst rel err {worst:.2e}"))
    }
}

fn receptive_field_suite() -> SuiteResult {
    const NAME: &str = "receptive-field";
    let specs = sfl_specs("sfl", 1, 3);
    let map = init_tensor_map(&specs, 11);
    let mut rng = rng_from(33);
    let x0 = Tensor::from_vec(
        &[1, 1, 32, 32],
        (0..1024).map(|_| rng.gen_range(0.25..0.75)).collect(),
    )
    .unwrap();

    let eval = |map: &std::collections::BTreeMap<String, Tensor>, x: &Tensor| -> crate::Result<f64> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_map(&mut tape, map, false);
        let xv = tape.constant(x);
        let y = sfl_forward(&mut tape, xv, &p, "sfl")?;
        Ok(tape.value(y).data()[0])
    };

    let mut x1 = x0.clone();
    let last = x1.numel() - 1;
    x1.data_mut()[last] += 1e-3;

    let full = match (eval(&map, &x0), eval(&map, &x1)) {
        (Ok(a), Ok(b)) => (b - a).abs(),
        _ => return SuiteResult::fail(NAME, "SFL evaluation failed"),
    };
    let mut ablated = map.clone();
    ablated.insert("sfl.fourier.weight".into(), Tensor::zeros(&[2, 2, 1, 1]));
    ablated.insert("sfl.fourier.bias".into(), Tensor::zeros(&[2]));
    let local = match (eval(&ablated, &x0), eval(&ablated, &x1)) {
        (Ok(a), Ok(b)) => (b - a).abs(),
        _ => return SuiteResult::fail(NAME, "ablated SFL evaluation failed"),
    };
    if full > 1e-12 && local == 0.0 {
        SuiteResult::pass(
            NAME,
            format!("corner response {full:.2e} with Fourier branch, 0 without"),
        )
    } else {
        SuiteResult::fail(
            NAME,
            format!("corner response {full:.2e} with branch, {local:.2e} without"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_all_suites() {
        let results = run(&SelfcheckOptions::default());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), 6);
    }

    #[test]
    fn corrupted_fft_normalization_fails_parseval() {
        let results = run(&SelfcheckOptions { fft_scale: 1.01, ..Default::default() });
        let parseval = results.iter().find(|r| r.name == "parseval").unwrap();
        assert!(!parseval.passed, "negative control must fail");
        assert!(!all_passed(&results));
    }
}
