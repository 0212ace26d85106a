//! Adam optimization of the network against the combined objective, plus
//! evaluation and checkpointing.
//!
//! Determinism contract: the triple (model seed, dataset, train seed) fully
//! determines the loss log. Batch and negative sampling draw from a fresh
//! stream per step, so a run resumed from a checkpoint at step t replays
//! exactly the steps an uninterrupted run would have taken.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{clgnet_forward, BoundParams, ModelParams, NetConfig};
use crate::losses::{contrastive_from_features, PerceptualExtractor};
use crate::mrisim::{cartesian_mask, make_pair, nmse, psnr, ssim, SamplePair};
use crate::rng::{mix, rng_from};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor};

const EXTRACTOR_SEED_TAG: u64 = 0x7065_7263;
const STEP_SEED_TAG: u64 = 0x7374_6570;
const RESAMPLE_SEED_TAG: u64 = 0x7265_7370;

// ---- Adam ------------------------------------------------------------

/// Bias-corrected Adam state; first/second moments mirror the parameter map.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState { t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let paths: Vec<String> = params.tensors().keys().cloned().collect();
    for path in paths {
        let g = grads
            .get(&path)
            .ok_or_else(|| Error::contract(format!("missing gradient for `{path}`")))?;
        if !g.is_finite() {
            return Err(Error::numeric("adam_step", format!("non-finite gradient at `{path}`")));
        }
        let p = params.get_mut(&path)?;
        if g.shape() != p.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} vs parameter {:?} at `{path}`",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.get_mut(&path).unwrap();
        let v = state.v.get_mut(&path).unwrap();
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---- training --------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub alpha: f64,
    pub k_negatives: usize,
    pub seed: u64,
    pub lr: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Redraw each batch member's mask (and zero-filled input) per step
    /// instead of using the stored pair.
    pub resample_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            steps: 0,
            alpha: 0.05,
            k_negatives: 6,
            seed: 0,
            lr: 1e-4,
            eval_every: 0,
            checkpoint_path: None,
            resample_masks: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: batch 10, alpha 0.05, K 6, lr 1e-4.
    pub fn paper_preset() -> Self {
        TrainConfig::default()
    }

    /// Desk-scale settings: batch 8 (an 8-pair dataset is one batch) and a
    /// faster lr for short runs.
    pub fn tiny_preset() -> Self {
        TrainConfig { batch_size: 8, lr: 5e-3, ..TrainConfig::default() }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub l1: f64,
    pub contrastive: f64,
    pub total: f64,
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub adam: AdamState,
    pub log: Vec<LossRow>,
}

/// Without-replacement sample of `k` items from 0..n (partial Fisher-Yates).
fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Negative positions for batch member `i`: K of the other members, without
/// replacement when the batch allows it, with replacement (and a warning)
/// otherwise.
fn pick_negatives(rng: &mut impl Rng, batch: usize, i: usize, k: usize, warned: &mut bool) -> Vec<usize> {
    let others: Vec<usize> = (0..batch).filter(|&j| j != i).collect();
    if others.len() >= k {
        sample_indices(rng, others.len(), k).into_iter().map(|j| others[j]).collect()
    } else {
        if !*warned {
            eprintln!(
                "warning: batch of {batch} has only {} negatives per sample; \
                 drawing {k} with replacement",
                others.len()
            );
            *warned = true;
        }
        (0..k).map(|_| others[rng.gen_range(0..others.len())]).collect()
    }
}

fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let shape = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::dim("dataset images have inconsistent shapes"));
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(shape);
    Tensor::from_vec(&out_shape, data)
}

/// Train freshly initialized parameters.
pub fn train(
    cfg: &NetConfig,
    model_seed: u64,
    tc: &TrainConfig,
    data: &[SamplePair],
) -> Result<TrainOutput> {
    let params = ModelParams::init(cfg, model_seed);
    let adam = AdamState::new(&params, tc.lr);
    train_from(params, adam, tc, data, 0)
}

/// Continue training from an existing state. `start_step` must equal the
/// number of updates already applied (`adam.t`); the log then continues
/// exactly where the uninterrupted run would be.
pub fn train_from(
    mut params: ModelParams,
    mut adam: AdamState,
    tc: &TrainConfig,
    data: &[SamplePair],
    start_step: u64,
) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::contract("training needs a non-empty dataset"));
    }
    if tc.batch_size == 0 || tc.batch_size > data.len() {
        return Err(Error::contract(format!(
            "batch size {} incompatible with dataset of {}",
            tc.batch_size,
            data.len()
        )));
    }
    if tc.k_negatives == 0 {
        return Err(Error::contract("need at least one negative per sample"));
    }
    if adam.t != start_step {
        return Err(Error::contract(format!(
            "optimizer has applied {} updates but start_step is {start_step}",
            adam.t
        )));
    }
    let cfg = params.cfg().clone();
    let ex = PerceptualExtractor::seeded(mix(tc.seed, EXTRACTOR_SEED_TAG));

    // Ground-truth and input features never change across steps (inputs only
    // when masks are not resampled); extract once.
    let gt_feats: Vec<Vec<Tensor>> = data
        .iter()
        .map(|p| ex.features(&p.gt.reshaped(&[1, 1, p.gt.shape()[1], p.gt.shape()[2]])?))
        .collect::<Result<_>>()?;
    let input_feats: Option<Vec<Vec<Tensor>>> = if tc.resample_masks {
        None
    } else {
        Some(
            data.iter()
                .map(|p| {
                    ex.features(&p.input.reshaped(&[1, 1, p.input.shape()[1], p.input.shape()[2]])?)
                })
                .collect::<Result<_>>()?,
        )
    };

    let mut log = Vec::with_capacity((tc.steps - start_step + 1) as usize);
    let mut warned = false;
    for step in start_step..=tc.steps {
        let mut rng = rng_from(mix(tc.seed, STEP_SEED_TAG ^ step));
        let batch_idx = sample_indices(&mut rng, data.len(), tc.batch_size);

        // per-step inputs (and input features when masks are resampled)
        let mut step_inputs: Vec<Tensor> = Vec::with_capacity(tc.batch_size);
        let mut step_input_feats: Vec<Vec<Tensor>> = Vec::with_capacity(tc.batch_size);
        for (pos, &di) in batch_idx.iter().enumerate() {
            if tc.resample_masks {
                let p = &data[di];
                let w = p.gt.shape()[2];
                let mask = cartesian_mask(
                    w,
                    p.mask.acceleration,
                    p.mask.center_fraction,
                    mix(tc.seed, RESAMPLE_SEED_TAG ^ (step * data.len() as u64 + di as u64)),
                )?;
                let fresh = make_pair(&p.gt, &mask)?;
                let shaped =
                    fresh.input.reshaped(&[1, 1, fresh.input.shape()[1], fresh.input.shape()[2]])?;
                step_input_feats.push(ex.features(&shaped)?);
                step_inputs.push(fresh.input);
            } else {
                step_inputs.push(data[di].input.clone());
                step_input_feats.push(input_feats.as_ref().unwrap()[di].clone());
            }
            let _ = pos;
        }

        let inputs: Vec<&Tensor> = step_inputs.iter().collect();
        let gts: Vec<&Tensor> = batch_idx.iter().map(|&di| &data[di].gt).collect();
        let x = stack_images(&inputs)?;
        let g = stack_images(&gts)?;

        let step_result = (|| -> Result<(LossRow, Option<BTreeMap<String, Tensor>>)> {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params, true);
            let xv = tape.constant(&x);
            let o = clgnet_forward(&mut tape, xv, &bound, &cfg)?;
            let gv = tape.constant(&g);
            let l1 = tape.mean_abs_diff(o, gv)?;

            let anchor = ex.features_on_tape(&mut tape, o)?;
            let mut positives = Vec::with_capacity(tc.batch_size);
            let mut negatives = Vec::with_capacity(tc.batch_size);
            for (pos, &di) in batch_idx.iter().enumerate() {
                positives
                    .push(gt_feats[di].iter().map(|t| tape.constant(t)).collect::<Vec<_>>());
                let neg_positions =
                    pick_negatives(&mut rng, tc.batch_size, pos, tc.k_negatives, &mut warned);
                negatives.push(
                    neg_positions
                        .iter()
                        .map(|&np| {
                            step_input_feats[np]
                                .iter()
                                .map(|t| tape.constant(t))
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>(),
                );
            }
            let (cl, _) =
                contrastive_from_features(&mut tape, &anchor, &positives, &negatives, ex.lambdas())?;
            let scaled = tape.scale(cl, tc.alpha)?;
            let total = tape.add(l1, scaled)?;

            let row = LossRow {
                step,
                l1: tape.value(l1).item()?,
                contrastive: tape.value(cl).item()?,
                total: tape.value(total).item()?,
            };
            if step == tc.steps {
                return Ok((row, None));
            }
            let mut grads = tape.backward(total)?;
            let grad_map: BTreeMap<String, Tensor> = bound
                .vars()
                .iter()
                .map(|(path, &var)| {
                    let g = grads.take(var).unwrap_or_else(|| {
                        Tensor::zeros(params.get(path).unwrap().shape())
                    });
                    (path.clone(), g)
                })
                .collect();
            Ok((row, Some(grad_map)))
        })()
        .map_err(|e| match e {
            Error::Numeric { op, detail } => Error::numeric(
                op,
                format!("{detail} (step {step}, batch indices {batch_idx:?})"),
            ),
            other => other,
        })?;

        let (row, grad_map) = step_result;
        log.push(row);
        let Some(grad_map) = grad_map else { break };
        adam_step(&mut params, &grad_map, &mut adam)?;

        if let Some(path) = &tc.checkpoint_path {
            if tc.eval_every > 0 && (step + 1) % tc.eval_every == 0 {
                save_checkpoint(path, &params, &adam)?;
            }
        }
    }
    if let Some(path) = &tc.checkpoint_path {
        save_checkpoint(path, &params, &adam)?;
    }
    Ok(TrainOutput { params, adam, log })
}

pub fn loss_csv(log: &[LossRow]) -> String {
    let mut out = String::from("step,l1,contrastive,total\n");
    for row in log {
        out.push_str(&format!("{},{},{},{}\n", row.step, row.l1, row.contrastive, row.total));
    }
    out
}

// ---- evaluation ------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct EvalRow {
    pub index: usize,
    pub nmse_model: f64,
    pub psnr_model: f64,
    pub ssim_model: f64,
    pub nmse_zf: f64,
    pub psnr_zf: f64,
    pub ssim_zf: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_nmse_model: f64,
    pub mean_psnr_model: f64,
    pub mean_ssim_model: f64,
    pub mean_nmse_zf: f64,
    pub mean_psnr_zf: f64,
    pub mean_ssim_zf: f64,
}

/// Score per-pair model outputs against ground truth, alongside the
/// zero-filled baseline.
pub fn evaluate_outputs(outputs: &[Tensor], data: &[SamplePair]) -> Result<EvalReport> {
    if outputs.len() != data.len() || data.is_empty() {
        return Err(Error::contract("evaluation needs matching, non-empty outputs and data"));
    }
    let mut rows = Vec::with_capacity(data.len());
    for (index, (out, pair)) in outputs.iter().zip(data).enumerate() {
        let out = out.reshaped(pair.gt.shape())?;
        rows.push(EvalRow {
            index,
            nmse_model: nmse(&out, &pair.gt)?,
            psnr_model: psnr(&out, &pair.gt, 1.0)?,
            ssim_model: ssim(&out, &pair.gt)?,
            nmse_zf: nmse(&pair.input, &pair.gt)?,
            psnr_zf: psnr(&pair.input, &pair.gt, 1.0)?,
            ssim_zf: ssim(&pair.input, &pair.gt)?,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        mean_nmse_model: mean(|r| r.nmse_model),
        mean_psnr_model: mean(|r| r.psnr_model),
        mean_ssim_model: mean(|r| r.ssim_model),
        mean_nmse_zf: mean(|r| r.nmse_zf),
        mean_psnr_zf: mean(|r| r.psnr_zf),
        mean_ssim_zf: mean(|r| r.ssim_zf),
        rows,
    })
}

/// Run the model over every pair and score it.
pub fn evaluate(params: &ModelParams, data: &[SamplePair]) -> Result<EvalReport> {
    let mut outputs = Vec::with_capacity(data.len());
    for pair in data {
        let shape = pair.input.shape();
        let input = pair.input.reshaped(&[1, 1, shape[1], shape[2]])?;
        outputs.push(crate::layers::forward_batch(params, &input)?);
    }
    evaluate_outputs(&outputs, data)
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("index,nmse_model,psnr_model,ssim_model,nmse_zf,psnr_zf,ssim_zf\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index, r.nmse_model, r.psnr_model, r.ssim_model, r.nmse_zf, r.psnr_zf, r.ssim_zf
        ));
    }
    out
}

// ---- checkpointing ----------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"CLGC";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    adam: AdamScalars,
    entries: Vec<CkptEntry>,
    payload_len: u64,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct AdamScalars {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    path: String,
    kind: String,
    offset: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Save parameters and optimizer state: magic, version, JSON header (layer
/// paths to byte offsets, config, optimizer scalars, payload checksum),
/// then the tensors back-to-back in the binary tensor format.
pub fn save_checkpoint(path: &Path, params: &ModelParams, adam: &AdamState) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    let (m, v) = adam.moments();
    for (kind, map) in [("param", params.tensors()), ("m", m), ("v", v)] {
        for (tensor_path, t) in map {
            entries.push(CkptEntry {
                path: tensor_path.clone(),
                kind: kind.to_string(),
                offset: payload.len() as u64,
            });
            write_tensor(&mut payload, t)?;
        }
    }
    let header = CheckpointHeader {
        config: params.cfg().clone(),
        adam: AdamScalars {
            t: adam.t,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        },
        entries,
        payload_len: payload.len() as u64,
        payload_sha256: sha256_hex(&payload),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, AdamState)> {
    let mut f = std::fs::File::open(path)?;
    let mut fixed = [0u8; 16];
    f.read_exact(&mut fixed)
        .map_err(|e| Error::integrity(format!("truncated checkpoint: {e}")))?;
    if &fixed[..4] != CKPT_MAGIC {
        return Err(Error::integrity("bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::integrity(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(fixed[8..16].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|e| Error::integrity(format!("truncated checkpoint header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() as u64 != header.payload_len {
        return Err(Error::integrity(format!(
            "checkpoint payload is {} bytes, header says {}",
            payload.len(),
            header.payload_len
        )));
    }
    if sha256_hex(&payload) != header.payload_sha256 {
        return Err(Error::integrity("checkpoint payload checksum mismatch"));
    }

    let mut param_map = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for entry in &header.entries {
        let t = read_tensor(&mut &payload[entry.offset as usize..])?;
        match entry.kind.as_str() {
            "param" => param_map.insert(entry.path.clone(), t),
            "m" => m.insert(entry.path.clone(), t),
            "v" => v.insert(entry.path.clone(), t),
            other => {
                return Err(Error::integrity(format!("unknown checkpoint entry kind `{other}`")))
            }
        };
    }
    let params = ModelParams::from_parts(header.config, param_map)?;
    if m.len() != params.tensors().len() || v.len() != params.tensors().len() {
        return Err(Error::integrity("checkpoint optimizer moments incomplete"));
    }
    let adam = AdamState {
        t: header.adam.t,
        lr: header.adam.lr,
        beta1: header.adam.beta1,
        beta2: header.adam.beta2,
        eps: header.adam.eps,
        m,
        v,
    };
    Ok((params, adam))
}
