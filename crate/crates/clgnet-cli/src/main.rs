//! Command-line entry point: dataset generation, training, evaluation, and
//! the self-verification suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure,
//! 4 selfcheck failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use clgnet::layers::NetConfig;
use clgnet::mrisim::{self, DatasetManifest, Split};
use clgnet::trainer::{self, TrainConfig};
use clgnet::{selfcheck, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_SELFCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "clgnet", version, about = "MRI reconstruction at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic undersampled dataset (80/20 train/val split).
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval(EvalArgs),
    /// Run the verification suites; exit 0 only if every suite passes.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total number of pairs (split 80/20 by index).
    #[arg(long)]
    count: usize,
    /// Image size as H W.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Vec<usize>,
    /// Acceleration rate R (1 = fully sampled).
    #[arg(long)]
    accel: u32,
    /// Guaranteed low-frequency fraction; default 0.08 for R < 8, 0.04 after.
    #[arg(long)]
    center_frac: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["tiny", "paper"], default_value = "tiny")]
    preset: String,
    #[arg(long)]
    steps: u64,
    /// Contrastive weight alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Negatives per sample.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write one grayscale PNG triptych (input | output | gt) per pair.
    #[arg(long, default_value_t = false)]
    emit_images: bool,
}

#[derive(Args, Serialize)]
struct SelfcheckArgs {
    /// Negative-control hook: corrupt the FFT normalization so the Parseval
    /// suite must fail.
    #[arg(long, hide = true, default_value_t = false)]
    corrupt_fft_normalization: bool,
}

fn main() -> ExitCode {
    clgnet::configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            })
        }
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

// ---- run manifests ----------------------------------------------------

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    input_hash: String,
    timestamp_unix: u64,
    outputs: Vec<String>,
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    input_hash: String,
    outputs: &[PathBuf],
) -> clgnet::Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        input_hash,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    std::fs::write(dir.join("run_manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a file, or of a directory's sorted (path, file-hash)
/// listing.
fn hash_input(path: &Path) -> clgnet::Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&std::fs::read(path)?));
    }
    let mut listing = Vec::new();
    collect_files(path, path, &mut listing)?;
    listing.sort();
    let mut acc = Sha256::new();
    for (rel, hash) in listing {
        acc.update(rel.as_bytes());
        acc.update(b"\0");
        acc.update(hash.as_bytes());
        acc.update(b"\n");
    }
    Ok(acc.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(
    root: &Path,
    dir: &Path,
    out: &mut Vec<(String, String)>,
) -> clgnet::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).display().to_string();
            out.push((rel, sha256_hex(&std::fs::read(&path)?)));
        }
    }
    Ok(())
}

// ---- gen-data ----------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs) -> clgnet::Result<ExitCode> {
    let [h, w] = args.size[..] else {
        return Ok(usage_error("--size takes exactly two values: H W"));
    };
    if h < 32 || w < 32 || h % 2 != 0 || w % 2 != 0 {
        return Ok(usage_error(&format!("--size must be even and >= 32, got {h} {w}")));
    }
    if args.accel == 0 {
        return Ok(usage_error("--accel must be >= 1"));
    }
    if args.count == 0 {
        return Ok(usage_error("--count must be >= 1"));
    }
    let center_fraction =
        args.center_frac.unwrap_or(if args.accel >= 8 { 0.04 } else { 0.08 });
    if !(0.0..1.0).contains(&center_fraction) || center_fraction <= 0.0 {
        return Ok(usage_error(&format!("--center-frac {center_fraction} not in (0, 1)")));
    }
    if args.out.exists()
        && std::fs::read_dir(&args.out).map(|mut d| d.next().is_some()).unwrap_or(false)
        && !args.force
    {
        return Err(Error::config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            args.out.display()
        )));
    }

    let manifest = DatasetManifest {
        height: h,
        width: w,
        acceleration: args.accel,
        center_fraction,
        seed: args.seed,
        count: args.count,
        train_count: args.count * 8 / 10,
    };
    mrisim::generate_dataset(&args.out, &manifest)?;
    let config = serde_json::to_value(&args)?;
    let input_hash = sha256_hex(serde_json::to_string(&manifest)?.as_bytes());
    write_run_manifest(
        &args.out,
        "gen-data",
        config,
        input_hash,
        &[args.out.join("manifest.json"), args.out.join("pairs")],
    )?;
    println!(
        "wrote {} train / {} val pairs of {h}x{w} at R={} to {}",
        manifest.train_count,
        manifest.count - manifest.train_count,
        manifest.acceleration,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---- train ---------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> clgnet::Result<ExitCode> {
    let (net_cfg, mut tc) = match args.preset.as_str() {
        "paper" => (NetConfig::paper(), TrainConfig::paper_preset()),
        _ => (NetConfig::tiny(), TrainConfig::tiny_preset()),
    };
    tc.steps = args.steps;
    tc.seed = args.seed;
    if let Some(alpha) = args.alpha {
        tc.alpha = alpha;
    }
    if let Some(k) = args.k {
        tc.k_negatives = k;
    }

    let train_pairs = mrisim::load_split(&args.data, Split::Train)?;
    tc.batch_size = tc.batch_size.min(train_pairs.len());
    std::fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.clgc");
    tc.checkpoint_path = Some(ckpt_path.clone());

    let model_seed = clgnet::rng::mix(args.seed, 0x6d6f_64656c);
    let out = trainer::train(&net_cfg, model_seed, &tc, &train_pairs)?;

    let loss_path = args.out.join("loss.csv");
    std::fs::write(&loss_path, trainer::loss_csv(&out.log))?;
    if let Some(last) = out.log.last() {
        println!(
            "step {}: l1 {:.6}, contrastive {:.6}, total {:.6}",
            last.step, last.l1, last.contrastive, last.total
        );
    }
    println!("checkpoint: {}", ckpt_path.display());

    let config = serde_json::json!({
        "args": serde_json::to_value(&args)?,
        "net": net_cfg,
        "train": tc,
        "model_seed": model_seed,
    });
    let input_hash = hash_input(&args.data)?;
    write_run_manifest(&args.out, "train", config, input_hash, &[ckpt_path, loss_path])?;
    Ok(ExitCode::SUCCESS)
}

// ---- eval ------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> clgnet::Result<ExitCode> {
    let (params, _adam) = trainer::load_checkpoint(&args.ckpt)?;
    let pairs = mrisim::load_split(&args.data, Split::Val)?;
    std::fs::create_dir_all(&args.out)?;

    let report = trainer::evaluate(&params, &pairs)?;
    let csv_path = args.out.join("eval.csv");
    std::fs::write(&csv_path, trainer::eval_csv(&report))?;
    let summary = serde_json::json!({
        "pairs": report.rows.len(),
        "mean_nmse_model": report.mean_nmse_model,
        "mean_psnr_model": report.mean_psnr_model,
        "mean_ssim_model": report.mean_ssim_model,
        "mean_nmse_zf": report.mean_nmse_zf,
        "mean_psnr_zf": report.mean_psnr_zf,
        "mean_ssim_zf": report.mean_ssim_zf,
    });
    let summary_path = args.out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    println!(
        "{} pairs: model PSNR {:.3} dB (zero-filled {:.3} dB), model SSIM {:.4}",
        report.rows.len(),
        report.mean_psnr_model,
        report.mean_psnr_zf,
        report.mean_ssim_model
    );

    let mut outputs = vec![csv_path, summary_path];
    if args.emit_images {
        let img_dir = args.out.join("images");
        std::fs::create_dir_all(&img_dir)?;
        for (i, pair) in pairs.iter().enumerate() {
            let shape = pair.input.shape();
            let input4 = pair.input.reshaped(&[1, 1, shape[1], shape[2]])?;
            let model = clgnet::layers::forward_batch(&params, &input4)?;
            let path = img_dir.join(format!("{i}.png"));
            write_triptych(&path, &pair.input, &model.reshaped(pair.gt.shape())?, &pair.gt)?;
        }
        outputs.push(img_dir);
    }

    let config = serde_json::to_value(&args)?;
    let mut hasher = Sha256::new();
    hasher.update(hash_input(&args.data)?.as_bytes());
    hasher.update(hash_input(&args.ckpt)?.as_bytes());
    let input_hash: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    write_run_manifest(&args.out, "eval", config, input_hash, &outputs)?;
    Ok(ExitCode::SUCCESS)
}

/// 8-bit grayscale side-by-side (input | output | gt), scaled jointly by the
/// data range of the three images. Display-only quantization.
fn write_triptych(
    path: &Path,
    input: &clgnet::tensor::Tensor,
    output: &clgnet::tensor::Tensor,
    gt: &clgnet::tensor::Tensor,
) -> clgnet::Result<()> {
    let shape = gt.shape();
    let (h, w) = (shape[1], shape[2]);
    const GAP: usize = 2;
    let total_w = 3 * w + 2 * GAP;
    let vmax = [input, output, gt]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let mut pixels = vec![255u8; total_w * h];
    for (panel, img) in [input, output, gt].iter().enumerate() {
        let x0 = panel * (w + GAP);
        for i in 0..h {
            for j in 0..w {
                let v = (img.data()[i * w + j] / vmax * 255.0).clamp(0.0, 255.0);
                pixels[i * total_w + x0 + j] = v.round() as u8;
            }
        }
    }
    let img = image::GrayImage::from_raw(total_w as u32, h as u32, pixels)
        .ok_or_else(|| Error::contract("triptych buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::config(format!("png write failed: {e}")))?;
    Ok(())
}

// ---- selfcheck -----------------------------------------------------------

fn cmd_selfcheck(args: SelfcheckArgs) -> clgnet::Result<ExitCode> {
    let opts = selfcheck::SelfcheckOptions {
        fft_scale: if args.corrupt_fft_normalization { 1.01 } else { 1.0 },
        ..Default::default()
    };
    let results = selfcheck::run(&opts);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if selfcheck::all_passed(&results) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_SELFCHECK))
    }
}
