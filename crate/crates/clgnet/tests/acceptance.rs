//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one PASS/FAIL line. Criteria run sequentially so the per-criterion
//! runtime budgets reflect real cost, not scheduler contention.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;

use clgnet::layers::{
    clgnet_forward, init_tensor_map, sfl_forward, sfl_specs, sfrb_forward, sfrb_specs,
    BoundParams, ModelParams, NetConfig,
};
use clgnet::losses::{contrastive_from_features, EPS_DENOM};
use clgnet::mrisim::{cartesian_mask, center_block, make_pair, nmse, phantom, psnr, ssim, SamplePair};
use clgnet::rng::{mix, rng_from};
use clgnet::spectral::{dft2_oracle, dwt2, half_width, idwt2, irfft2, rfft2};
use clgnet::tensor::{central_diff_if_smooth, rel_err, Tape, Tensor};
use clgnet::trainer::{evaluate, train, train_from, loss_csv, TrainConfig, TrainOutput};

const OVERFIT_SEED: u64 = 2024;

struct Overfit {
    train_pairs: Vec<SamplePair>,
    val_pairs: Vec<SamplePair>,
    run_alpha: TrainOutput,
    run_zero: TrainOutput,
    alpha_seconds: f64,
}

fn make_dataset() -> Vec<SamplePair> {
    (0..10)
        .map(|i| {
            let gt = phantom(64, 64, mix(OVERFIT_SEED, 2 * i)).unwrap();
            let mask = cartesian_mask(64, 4, 0.08, mix(OVERFIT_SEED, 2 * i + 1)).unwrap();
            make_pair(&gt, &mask).unwrap()
        })
        .collect()
}

fn overfit_config(alpha: f64) -> TrainConfig {
    TrainConfig { steps: 2000, alpha, seed: OVERFIT_SEED, ..TrainConfig::tiny_preset() }
}

fn run_overfit() -> Overfit {
    let pairs = make_dataset();
    let (train_slice, val_slice) = pairs.split_at(8);
    let model_seed = mix(OVERFIT_SEED, 0x6d6f_64656c);

    let t0 = Instant::now();
    let run_alpha = train(&NetConfig::tiny(), model_seed, &overfit_config(0.05), train_slice)
        .expect("alpha=0.05 overfit run failed");
    let alpha_seconds = t0.elapsed().as_secs_f64();
    let run_zero = train(&NetConfig::tiny(), model_seed, &overfit_config(0.0), train_slice)
        .expect("alpha=0 overfit run failed");

    Overfit {
        train_pairs: train_slice.to_vec(),
        val_pairs: val_slice.to_vec(),
        run_alpha,
        run_zero,
        alpha_seconds,
    }
}

struct Criterion {
    number: usize,
    name: &'static str,
    outcome: Result<String, String>,
}

fn check(number: usize, name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Criterion {
    let outcome = f();
    let (verdict, detail) = match &outcome {
        Ok(d) => ("PASS", d.clone()),
        Err(d) => ("FAIL", d.clone()),
    };
    println!("ACCEPTANCE {number} {name}: {verdict} ({detail})");
    Criterion { number, name, outcome }
}

fn random2(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---- criterion bodies -------------------------------------------------

fn spectral_oracles() -> Result<String, String> {
    let start = Instant::now();
    let mut worst_oracle: f64 = 0.0;
    for h in 1..=8 {
        for w in 1..=8 {
            let x = random2(h, w, (h * 64 + w) as u64);
            let fast = rfft2(&x).map_err(|e| e.to_string())?;
            let slow = dft2_oracle(&x).map_err(|e| e.to_string())?;
            let wf = half_width(w);
            for u in 0..h {
                for v in 0..wf {
                    worst_oracle = worst_oracle
                        .max((fast.re.data()[u * wf + v] - slow.re.data()[u * w + v]).abs())
                        .max((fast.im.data()[u * wf + v] - slow.im.data()[u * w + v]).abs());
                }
            }
        }
    }
    if worst_oracle >= 1e-10 {
        return Err(format!("rfft2 vs direct DFT err {worst_oracle:.2e} >= 1e-10"));
    }

    let mut worst_parseval: f64 = 0.0;
    let mut worst_fft_rt: f64 = 0.0;
    let mut worst_dwt_rt: f64 = 0.0;
    for &(h, w) in &[(4usize, 4usize), (5, 7), (8, 6), (16, 16), (32, 12), (6, 32)] {
        let x = random2(h, w, (h * 131 + w) as u64);
        let g = rfft2(&x).map_err(|e| e.to_string())?;
        let rhs = (h * w) as f64 * x.sq_sum();
        worst_parseval = worst_parseval.max((g.abs_sq_sum_hermitian(w) - rhs).abs() / rhs);
        let back = irfft2(&g, (h, w)).map_err(|e| e.to_string())?;
        worst_fft_rt = worst_fft_rt.max(x.max_abs_diff(&back));
        if h % 2 == 0 && w % 2 == 0 {
            let x4 = x.reshaped(&[1, 1, h, w]).unwrap();
            let bands = dwt2(&x4).map_err(|e| e.to_string())?;
            let back = idwt2(&bands).map_err(|e| e.to_string())?;
            worst_dwt_rt = worst_dwt_rt.max(x4.max_abs_diff(&back));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if worst_parseval >= 1e-10 {
        return Err(format!("Parseval rel err {worst_parseval:.2e} >= 1e-10"));
    }
    if worst_fft_rt >= 1e-10 || worst_dwt_rt >= 1e-10 {
        return Err(format!(
            "roundtrip err fft {worst_fft_rt:.2e} / dwt {worst_dwt_rt:.2e} >= 1e-10"
        ));
    }
    if secs >= 10.0 {
        return Err(format!("runtime {secs:.1}s >= 10s"));
    }
    Ok(format!(
        "oracle {worst_oracle:.1e}, parseval {worst_parseval:.1e}, roundtrips \
         {worst_fft_rt:.1e}/{worst_dwt_rt:.1e}, {secs:.1}s"
    ))
}

/// Input-gradient check of a block against central differences, skipping
/// kink-straddling coordinates.
fn block_gradient_check(
    map: &BTreeMap<String, Tensor>,
    forward: impl Fn(&mut Tape, clgnet::tensor::Var) -> clgnet::Result<clgnet::tensor::Var>,
    x0: &Tensor,
    probes: usize,
    tol: f64,
    seed: u64,
) -> Result<usize, String> {
    let mut tape = Tape::new();
    let _ = map; // bound inside `forward`
    let xv = tape.param(x0);
    let y = forward(&mut tape, xv).map_err(|e| e.to_string())?;
    let loss = tape.sum_all(y).map_err(|e| e.to_string())?;
    let g_ad = tape.backward(loss).map_err(|e| e.to_string())?.take(xv).unwrap();

    let mut f = |t: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(t);
        let y = forward(&mut tape, xv)?;
        let loss = tape.sum_all(y)?;
        tape.value(loss).item()
    };
    let mut rng = rng_from(seed);
    let mut checked = 0;
    for _ in 0..probes {
        let c = rng.gen_range(0..x0.numel());
        if let Some(fd) =
            central_diff_if_smooth(&mut f, x0, 1e-5, c).map_err(|e| e.to_string())?
        {
            let r = rel_err(g_ad.data()[c], fd);
            if r >= tol {
                return Err(format!("coord {c}: ad={} fd={fd} rel={r:.2e}", g_ad.data()[c]));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn differentiation() -> Result<String, String> {
    let start = Instant::now();

    // individual layers at 1e-5
    let sfl_map = init_tensor_map(&sfl_specs("sfl", 2, 3), 41);
    let x0 = random2(8, 8, 42).reshaped(&[1, 1, 8, 8]).unwrap();
    let x0 = Tensor::from_vec(
        &[1, 2, 8, 8],
        x0.data().iter().chain(random2(8, 8, 43).data()).copied().collect(),
    )
    .unwrap();
    let sfl_checked = block_gradient_check(
        &sfl_map,
        |tape, xv| {
            let p = BoundParams::bind_map(tape, &sfl_map, false);
            sfl_forward(tape, xv, &p, "sfl")
        },
        &x0,
        20,
        1e-5,
        44,
    )?;

    let sfrb_map = init_tensor_map(&sfrb_specs("blk", 2, 3), 45);
    let sfrb_checked = block_gradient_check(
        &sfrb_map,
        |tape, xv| {
            let p = BoundParams::bind_map(tape, &sfrb_map, false);
            sfrb_forward(tape, xv, &p, "blk")
        },
        &x0,
        20,
        1e-5,
        46,
    )?;

    // full tiny-config model: 10 coordinates per parameter tensor at 1e-3
    let cfg = NetConfig::tiny();
    let params = ModelParams::init(&cfg, 47);
    let mut rng = rng_from(48);
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
    let o = clgnet_forward(&mut tape, x, &bound, &cfg).map_err(|e| e.to_string())?;
    let t = tape.constant(&target);
    let loss = tape.mean_abs_diff(o, t).map_err(|e| e.to_string())?;
    let mut grads = tape.backward(loss).map_err(|e| e.to_string())?;

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
        for _ in 0..10 {
            let c = rng.gen_range(0..tensor.numel());
            if let Some(fd) =
                central_diff_if_smooth(&mut f, tensor, 1e-5, c).map_err(|e| e.to_string())?
            {
                let r = rel_err(g_ad.data()[c], fd);
                if r >= 1e-3 {
                    return Err(format!(
                        "{path}[{c}]: ad={} fd={fd} rel={r:.2e} >= 1e-3",
                        g_ad.data()[c]
                    ));
                }
                worst = worst.max(r);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if checked < 200 {
        return Err(format!("only {checked} smooth coordinates checked"));
    }
    if secs >= 300.0 {
        return Err(format!("runtime {secs:.0}s >= 300s"));
    }
    Ok(format!(
        "layers {sfl_checked}+{sfrb_checked} coords at 1e-5, model {checked} coords \
         worst {worst:.1e} at 1e-3, {secs:.0}s"
    ))
}

fn global_receptive_field() -> Result<String, String> {
    let start = Instant::now();
    let specs = sfl_specs("sfl", 1, 3);
    let map = init_tensor_map(&specs, 11);
    let mut rng = rng_from(51);
    let x0 = Tensor::from_vec(
        &[1, 1, 32, 32],
        (0..1024).map(|_| rng.gen_range(0.25..0.75)).collect(),
    )
    .unwrap();

    let eval = |map: &BTreeMap<String, Tensor>, x: &Tensor| -> Result<f64, String> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_map(&mut tape, map, false);
        let xv = tape.constant(x);
        let y = sfl_forward(&mut tape, xv, &p, "sfl").map_err(|e| e.to_string())?;
        Ok(tape.value(y).data()[0])
    };

    let mut x1 = x0.clone();
    let last = x1.numel() - 1; // pixel (31,31); output probed at (0,0)
    x1.data_mut()[last] += 1e-3;
    let full = (eval(&map, &x1)? - eval(&map, &x0)?).abs();

    let mut ablated = map.clone();
    ablated.insert("sfl.fourier.weight".into(), Tensor::zeros(&[2, 2, 1, 1]));
    ablated.insert("sfl.fourier.bias".into(), Tensor::zeros(&[2]));
    let local = (eval(&ablated, &x1)? - eval(&ablated, &x0)?).abs();

    let secs = start.elapsed().as_secs_f64();
    if full <= 1e-12 {
        return Err(format!("Fourier-branch response {full:.2e} <= 1e-12"));
    }
    if local != 0.0 {
        return Err(format!("conv-only response {local:.2e} != 0 outside stencil reach"));
    }
    if secs >= 10.0 {
        return Err(format!("runtime {secs:.1}s >= 10s"));
    }
    Ok(format!("response {full:.2e} with branch, exactly 0 without, {secs:.1}s"))
}

fn overfit_run(fix: &Overfit) -> Result<String, String> {
    let final_l1 = fix.run_alpha.log.last().unwrap().l1;
    if !(final_l1 < 0.02) {
        return Err(format!("final train L1 {final_l1:.4} >= 0.02"));
    }
    let report = evaluate(&fix.run_alpha.params, &fix.train_pairs).map_err(|e| e.to_string())?;
    let gain = report.mean_psnr_model - report.mean_psnr_zf;
    if !(gain >= 2.0) {
        return Err(format!(
            "train PSNR gain {gain:.2} dB < 2 dB (model {:.2}, zero-filled {:.2})",
            report.mean_psnr_model, report.mean_psnr_zf
        ));
    }
    if fix.alpha_seconds > 1800.0 {
        return Err(format!("runtime {:.0}s > 1800s", fix.alpha_seconds));
    }
    Ok(format!(
        "final L1 {final_l1:.4}, PSNR {:.2} vs zero-filled {:.2} (+{gain:.2} dB), {:.0}s",
        report.mean_psnr_model, report.mean_psnr_zf, fix.alpha_seconds
    ))
}

fn contrastive_behavior(fix: &Overfit) -> Result<String, String> {
    let first = fix.run_alpha.log.first().unwrap();
    let last = fix.run_alpha.log.last().unwrap();
    assert_eq!(first.step, 0);
    assert_eq!(last.step, 2000);
    if !(last.contrastive < first.contrastive) {
        return Err(format!(
            "contrastive at step 2000 ({}) not below step 0 ({})",
            last.contrastive, first.contrastive
        ));
    }

    // exact monotonicity on constructed features
    let eval = |d_p: f64, d_n: [f64; 3]| -> f64 {
        let mut tape = Tape::new();
        let anchor = tape.constant(&Tensor::from_vec(&[1, 1], vec![0.0]).unwrap());
        let pos = tape.constant(&Tensor::from_vec(&[1, 1], vec![d_p]).unwrap());
        let negs: Vec<Vec<clgnet::tensor::Var>> = d_n
            .iter()
            .map(|&d| vec![tape.constant(&Tensor::from_vec(&[1, 1], vec![d]).unwrap())])
            .collect();
        let (loss, _) =
            contrastive_from_features(&mut tape, &[anchor], &[vec![pos]], &[negs], &[1.0])
                .unwrap();
        tape.value(loss).item().unwrap()
    };
    let base = eval(0.5, [1.0, 2.0, 3.0]);
    let expected = 0.5 / (6.0 + EPS_DENOM);
    if (base - expected).abs() > 1e-12 {
        return Err(format!("constructed ratio {base} != {expected}"));
    }
    if !(eval(0.7, [1.0, 2.0, 3.0]) > base) || !(eval(0.3, [1.0, 2.0, 3.0]) < base) {
        return Err("not strictly increasing in the numerator".into());
    }
    for k in 0..3 {
        let mut up = [1.0, 2.0, 3.0];
        up[k] += 0.25;
        if !(eval(0.5, up) < base) {
            return Err(format!("not strictly decreasing in denominator {k}"));
        }
    }
    Ok(format!(
        "contrastive {:.4} (step 0) -> {:.4} (step 2000); monotonicity exact",
        first.contrastive, last.contrastive
    ))
}

fn loss_ablation(fix: &Overfit) -> Result<String, String> {
    for (name, run) in [("alpha=0.05", &fix.run_alpha), ("alpha=0", &fix.run_zero)] {
        if run.log.len() != 2001 {
            return Err(format!("{name} run incomplete: {} rows", run.log.len()));
        }
        if let Some(row) = run.log.iter().find(|r| !r.total.is_finite()) {
            return Err(format!("{name} run non-finite at step {}", row.step));
        }
    }
    let val_alpha = evaluate(&fix.run_alpha.params, &fix.val_pairs).map_err(|e| e.to_string())?;
    let val_zero = evaluate(&fix.run_zero.params, &fix.val_pairs).map_err(|e| e.to_string())?;
    let delta = val_alpha.mean_psnr_model - val_zero.mean_psnr_model;
    let verdict = if delta >= -1.0 { "within -1 dB or better" } else { "below the -1 dB band" };
    Ok(format!(
        "both runs finite; val PSNR {:.2} (alpha=0.05) vs {:.2} (alpha=0), delta {delta:+.2} dB, \
         {verdict} [report]",
        val_alpha.mean_psnr_model, val_zero.mean_psnr_model
    ))
}

fn mask_statistics() -> Result<String, String> {
    let (start, len) = center_block(256, 0.08);
    if len != 20 {
        return Err(format!("center block is {len} columns, expected 20"));
    }
    let mut acc = 0.0;
    for seed in 0..1000u64 {
        let mask = cartesian_mask(256, 4, 0.08, seed).map_err(|e| e.to_string())?;
        for v in start..start + len {
            if !mask.columns[v] {
                return Err(format!("seed {seed}: center column {v} not sampled"));
            }
        }
        acc += mask.sampled_fraction();
    }
    let mean = acc / 1000.0;
    if (mean - 0.25).abs() >= 0.005 {
        return Err(format!("mean sampled fraction {mean:.4} outside 0.25 +- 0.005"));
    }
    Ok(format!("mean fraction {mean:.4}, all 1000 masks keep the 20 center columns"))
}

fn metric_identities() -> Result<String, String> {
    let x = random2(16, 16, 61).map(|v| 0.5 + 0.4 * v);
    if nmse(&x, &x).map_err(|e| e.to_string())? != 0.0 {
        return Err("nmse(x,x) != 0".into());
    }
    if ssim(&x.reshaped(&[1, 16, 16]).unwrap(), &x.reshaped(&[1, 16, 16]).unwrap())
        .map_err(|e| e.to_string())?
        != 1.0
    {
        return Err("ssim(x,x) != 1".into());
    }
    let shifted = x.map(|v| v + 0.1);
    let db = psnr(&shifted, &x, 1.0).map_err(|e| e.to_string())?;
    if (db - 20.0).abs() > 1e-9 {
        return Err(format!("psnr at uniform 0.1 error is {db}, expected 20 dB"));
    }
    Ok(format!("nmse 0, ssim 1, psnr {db:.12} dB"))
}

fn determinism_and_resume(fix: &Overfit) -> Result<String, String> {
    let cfg = NetConfig::tiny();
    let tc = TrainConfig { steps: 12, ..overfit_config(0.05) };
    let model_seed = mix(OVERFIT_SEED, 7);

    let a = train(&cfg, model_seed, &tc, &fix.train_pairs).map_err(|e| e.to_string())?;
    let b = train(&cfg, model_seed, &tc, &fix.train_pairs).map_err(|e| e.to_string())?;
    if loss_csv(&a.log) != loss_csv(&b.log) {
        return Err("identical seed triples produced different loss logs".into());
    }

    let tc_half = TrainConfig { steps: 6, ..tc.clone() };
    let half = train(&cfg, model_seed, &tc_half, &fix.train_pairs).map_err(|e| e.to_string())?;
    let resumed =
        train_from(half.params, half.adam, &tc, &fix.train_pairs, 6).map_err(|e| e.to_string())?;
    let mut stitched = half.log.clone();
    stitched.extend_from_slice(&resumed.log[1..]);
    if stitched != a.log {
        return Err("resumed log differs from the uninterrupted run".into());
    }
    if resumed.params != a.params {
        return Err("resumed parameters differ from the uninterrupted run".into());
    }
    Ok("bitwise-identical logs; resume matches the uninterrupted run".into())
}

// ---- driver ------------------------------------------------------------

#[test]
fn acceptance() {
    let mut results = Vec::new();
    results.push(check(1, "spectral-oracles", spectral_oracles));
    results.push(check(2, "differentiation", differentiation));
    results.push(check(3, "global-receptive-field", global_receptive_field));

    let fix = run_overfit();
    results.push(check(4, "overfit-run", || overfit_run(&fix)));
    results.push(check(5, "contrastive-behavior", || contrastive_behavior(&fix)));
    results.push(check(6, "loss-ablation", || loss_ablation(&fix)));
    results.push(check(7, "mask-statistics", mask_statistics));
    results.push(check(8, "metric-identities", metric_identities));
    results.push(check(9, "determinism-and-resume", || determinism_and_resume(&fix)));

    let failures: Vec<String> = results
        .iter()
        .filter_map(|c| {
            c.outcome.as_ref().err().map(|e| format!("criterion {} {}: {e}", c.number, c.name))
        })
        .collect();
    assert!(failures.is_empty(), "\n{}", failures.join("\n"));
}
