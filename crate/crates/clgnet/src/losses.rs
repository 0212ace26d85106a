//! Training objective: L1 reconstruction loss, a frozen random perceptual
//! feature extractor, the contrastive loss over in-batch negatives, and
//! their weighted combination.
//!
//! The contrastive term pulls the reconstruction toward the ground truth
//! (numerator feature distance) while pushing it away from the batch's
//! undersampled inputs (denominator distances): minimizing the ratio
//! constrains the solution from both sides.

use crate::error::{Error, Result};
use crate::layers::{init_tensor_map, ConvSpec};
use crate::tensor::{Tape, Tensor, Var};

/// Guard added to every denominator; the ratio is undefined when the anchor
/// coincides with a negative.
pub const EPS_DENOM: f64 = 1e-8;

/// Per-stage balancing weights, deepest stage heaviest.
pub const LAYER_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

const STAGE_CHANNELS: [usize; 5] = [8, 16, 16, 32, 32];
const LEAKY_SLOPE: f64 = 0.2;

/// Frozen feature pyramid: five stages of 3×3 conv, leaky ReLU, and 2×2
/// average pooling, with seeded random weights that never train. Gradients
/// still flow through it to the image being scored.
pub struct PerceptualExtractor {
    stages: Vec<(Tensor, Tensor)>,
    lambdas: Vec<f64>,
}

impl PerceptualExtractor {
    pub fn seeded(seed: u64) -> Self {
        let mut specs = Vec::new();
        let mut cin = 1;
        for (j, &cout) in STAGE_CHANNELS.iter().enumerate() {
            specs.push(ConvSpec { path: format!("stage{j}"), cin, cout, k: 3 });
            cin = cout;
        }
        let mut map = init_tensor_map(&specs, seed);
        let stages = (0..STAGE_CHANNELS.len())
            .map(|j| {
                (
                    map.remove(&format!("stage{j}.weight")).unwrap(),
                    map.remove(&format!("stage{j}.bias")).unwrap(),
                )
            })
            .collect();
        PerceptualExtractor { stages, lambdas: LAYER_WEIGHTS.to_vec() }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn stages(&self) -> &[(Tensor, Tensor)] {
        &self.stages
    }

    /// Stage outputs for an [N,1,H,W] image batch; stage j has spatial dims
    /// (H/2^(j+1), W/2^(j+1)), so H and W must divide by 2^stage_count.
    pub fn features_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::dim(format!("extractor input must be [N,1,H,W], got {shape:?}")));
        }
        let div = 1 << self.stages.len();
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::dim(format!(
                "extractor needs H,W divisible by {div}, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (w, b) in &self.stages {
            let wv = tape.constant(w);
            let bv = tape.constant(b);
            let y = tape.conv2d(cur, wv, bv, 1, 1)?;
            let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
            let y = tape.avg_pool2(y)?;
            feats.push(y);
            cur = y;
        }
        Ok(feats)
    }

    /// Feature tensors without gradient tracking.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let feats = self.features_on_tape(&mut tape, xv)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, o: Var, gt: Var) -> Result<Var> {
    tape.mean_abs_diff(o, gt)
}

/// Contrastive ratio loss assembled from already-extracted features.
///
/// `anchor_feats[j]` is the batched stage-j feature of the anchor;
/// `positive_feats[i][j]` and `negative_feats[i][k][j]` are single-sample
/// features (negatives and positives carry no gradient). Per sample and
/// stage the term is mean|a-p| / (sum_k mean|a-n_k| + eps), weighted by
/// lambda_j, summed over stages, averaged over the batch. Also returns the
/// unweighted per-stage mean ratios.
pub fn contrastive_from_features(
    tape: &mut Tape,
    anchor_feats: &[Var],
    positive_feats: &[Vec<Var>],
    negative_feats: &[Vec<Vec<Var>>],
    lambdas: &[f64],
) -> Result<(Var, Vec<f64>)> {
    let stages = anchor_feats.len();
    if lambdas.len() != stages {
        return Err(Error::contract(format!(
            "{} lambdas for {stages} feature stages",
            lambdas.len()
        )));
    }
    let n = positive_feats.len();
    if n == 0 || negative_feats.len() != n {
        return Err(Error::contract("positive/negative feature lists must cover the batch"));
    }
    let mut total: Option<Var> = None;
    let mut ratio_sums = vec![0.0; stages];
    for i in 0..n {
        if negative_feats[i].is_empty() {
            return Err(Error::contract(format!("sample {i} has no negatives")));
        }
        for j in 0..stages {
            let a_ij = tape.slice(anchor_feats[j], 0, i, 1)?;
            let num = tape.mean_abs_diff(a_ij, positive_feats[i][j])?;
            let mut den: Option<Var> = None;
            for neg in &negative_feats[i] {
                let d = tape.mean_abs_diff(a_ij, neg[j])?;
                den = Some(match den {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
            }
            let den = tape.add_const(den.unwrap(), EPS_DENOM)?;
            let ratio = tape.div(num, den)?;
            ratio_sums[j] += tape.value(ratio).item()?;
            let weighted = tape.scale(ratio, lambdas[j])?;
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
    }
    let loss = tape.scale(total.unwrap(), 1.0 / n as f64)?;
    for r in &mut ratio_sums {
        *r /= n as f64;
    }
    Ok((loss, ratio_sums))
}

/// Contrastive loss from images: anchor `o` (tracked), ground truth as
/// positive, and K undersampled images as negatives (both detached).
pub fn contrastive_loss(
    tape: &mut Tape,
    o: Var,
    gt: &Tensor,
    negatives: &[Tensor],
    ex: &PerceptualExtractor,
) -> Result<Var> {
    let (loss, _) = contrastive_loss_with_report(tape, o, gt, negatives, ex)?;
    Ok(loss)
}

fn contrastive_loss_with_report(
    tape: &mut Tape,
    o: Var,
    gt: &Tensor,
    negatives: &[Tensor],
    ex: &PerceptualExtractor,
) -> Result<(Var, Vec<f64>)> {
    if negatives.is_empty() {
        return Err(Error::contract("contrastive loss needs at least one negative"));
    }
    let n = tape.shape(o)[0];
    if gt.shape() != tape.shape(o) {
        return Err(Error::dim(format!(
            "anchor {:?} vs ground truth {:?}",
            tape.shape(o),
            gt.shape()
        )));
    }
    let anchor = ex.features_on_tape(tape, o)?;

    let gt_feat_vars: Vec<Var> =
        ex.features(gt)?.into_iter().map(|t| tape.constant(&t)).collect();
    let mut neg_feat_vars: Vec<Vec<Var>> = Vec::with_capacity(negatives.len());
    for neg in negatives {
        if neg.shape() != gt.shape() {
            return Err(Error::dim(format!(
                "negative {:?} vs ground truth {:?}",
                neg.shape(),
                gt.shape()
            )));
        }
        neg_feat_vars
            .push(ex.features(neg)?.into_iter().map(|t| tape.constant(&t)).collect());
    }

    let mut positive = Vec::with_capacity(n);
    let mut negative = Vec::with_capacity(n);
    for i in 0..n {
        let pos_i: Vec<Var> = gt_feat_vars
            .iter()
            .map(|&f| tape.slice(f, 0, i, 1))
            .collect::<Result<_>>()?;
        positive.push(pos_i);
        let mut negs_i = Vec::with_capacity(negatives.len());
        for k in 0..negatives.len() {
            let neg_ik: Vec<Var> = neg_feat_vars[k]
                .iter()
                .map(|&f| tape.slice(f, 0, i, 1))
                .collect::<Result<_>>()?;
            negs_i.push(neg_ik);
        }
        negative.push(negs_i);
    }
    contrastive_from_features(tape, &anchor, &positive, &negative, ex.lambdas())
}

/// The three scalar terms of one objective evaluation plus the unweighted
/// per-stage contrastive ratios.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l1: f64,
    pub contrastive: f64,
    pub total: f64,
    pub per_layer_ratios: Vec<f64>,
}

/// total = l1 + alpha * contrastive. Returns the differentiable total and
/// the evaluated report.
pub fn total_loss(
    tape: &mut Tape,
    o: Var,
    gt: &Tensor,
    negatives: &[Tensor],
    ex: &PerceptualExtractor,
    alpha: f64,
) -> Result<(Var, LossReport)> {
    let gt_var = tape.constant(gt);
    let l1 = l1_loss(tape, o, gt_var)?;
    let (cl, per_layer_ratios) = contrastive_loss_with_report(tape, o, gt, negatives, ex)?;
    let scaled = tape.scale(cl, alpha)?;
    let total = tape.add(l1, scaled)?;
    let report = LossReport {
        l1: tape.value(l1).item()?,
        contrastive: tape.value(cl).item()?,
        total: tape.value(total).item()?,
        per_layer_ratios,
    };
    Ok((total, report))
}
