//! The reconstruction network: spatial-and-Fourier layers (SFL), their
//! residual blocks (SFRB) and residual-in-residual groups (SFRIR), the
//! wavelet and spatial branches, and the assembled forward pass.
//!
//! Parameters live in a flat map keyed by a stable layer path such as
//! `wavelet.sfrir0.sfrb1.sfl0.local.weight`; the same paths name gradients,
//! optimizer state, and checkpoint entries.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{Tape, Tensor, Var};

/// Architecture hyperparameters. Defaults are the full-size network; `tiny`
/// is the desk-scale preset used by the verification runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    pub sfrir_count: usize,
    pub sfrb_per_sfrir: usize,
    pub kernel_size: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            sfrir_count: 4,
            sfrb_per_sfrir: 3,
            kernel_size: 3,
            activation: Activation::Relu,
        }
    }
}

impl NetConfig {
    pub fn paper() -> Self {
        NetConfig::default()
    }

    pub fn tiny() -> Self {
        NetConfig { base_channels: 4, sfrir_count: 1, sfrb_per_sfrir: 1, ..NetConfig::default() }
    }
}

/// One convolution in the architecture: its layer path and tensor shapes.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub path: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvSpec {
    fn new(path: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec { path: path.into(), cin, cout, k }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.k, self.k]
    }
}

/// The three convolutions of one SFL: a local k×k conv, a 1×1 conv over the
/// stacked re/im spectrum (2C channels), and the k×k fusion conv.
pub fn sfl_specs(prefix: &str, ch: usize, k: usize) -> Vec<ConvSpec> {
    vec![
        ConvSpec::new(format!("{prefix}.local"), ch, ch, k),
        ConvSpec::new(format!("{prefix}.fourier"), 2 * ch, 2 * ch, 1),
        ConvSpec::new(format!("{prefix}.fuse"), 2 * ch, ch, k),
    ]
}

pub fn sfrb_specs(prefix: &str, ch: usize, k: usize) -> Vec<ConvSpec> {
    let mut specs = sfl_specs(&format!("{prefix}.sfl0"), ch, k);
    specs.extend(sfl_specs(&format!("{prefix}.sfl1"), ch, k));
    specs
}

pub fn sfrir_specs(prefix: &str, ch: usize, k: usize, sfrb_count: usize) -> Vec<ConvSpec> {
    let mut specs = Vec::new();
    for j in 0..sfrb_count {
        specs.extend(sfrb_specs(&format!("{prefix}.sfrb{j}"), ch, k));
    }
    specs.push(ConvSpec::new(format!("{prefix}.tail"), ch, ch, k));
    specs
}

/// Every convolution of the full network, in a fixed enumeration order that
/// doubles as the parameter-initialization order.
pub fn clgnet_specs(cfg: &NetConfig) -> Vec<ConvSpec> {
    let c = cfg.base_channels;
    let k = cfg.kernel_size;
    let mut specs = vec![
        ConvSpec::new("pre.conv0", 1, c, k),
        ConvSpec::new("pre.conv1", c, c, k),
    ];
    for i in 0..cfg.sfrir_count {
        specs.extend(sfrir_specs(&format!("wavelet.sfrir{i}"), 4 * c, k, cfg.sfrb_per_sfrir));
    }
    specs.push(ConvSpec::new("spatial.down", c, 4 * c, k));
    for i in 0..cfg.sfrir_count {
        specs.extend(sfrir_specs(&format!("spatial.sfrir{i}"), 4 * c, k, cfg.sfrb_per_sfrir));
    }
    specs.push(ConvSpec::new("spatial.up", 4 * c, c, k));
    specs.push(ConvSpec::new("out.conv", 2 * c, 1, k));
    specs
}

/// Fan-in-scaled uniform weights, zero biases, drawn in spec order from one
/// seeded stream.
pub fn init_tensor_map(specs: &[ConvSpec], seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = rng_from(seed);
    let mut map = BTreeMap::new();
    for spec in specs {
        let fan_in = (spec.cin * spec.k * spec.k) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let shape = spec.weight_shape();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        map.insert(format!("{}.weight", spec.path), Tensor::from_vec(&shape, data).unwrap());
        map.insert(format!("{}.bias", spec.path), Tensor::zeros(&[spec.cout]));
    }
    map
}

pub fn zero_tensor_map(specs: &[ConvSpec]) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    for spec in specs {
        map.insert(format!("{}.weight", spec.path), Tensor::zeros(&spec.weight_shape()));
        map.insert(format!("{}.bias", spec.path), Tensor::zeros(&[spec.cout]));
    }
    map
}

/// All learnable weights of the network plus the config they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    cfg: NetConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Deterministic initialization: same `(cfg, seed)` gives bitwise-equal
    /// parameters.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        ModelParams { cfg: cfg.clone(), tensors: init_tensor_map(&clgnet_specs(cfg), seed) }
    }

    pub fn zeros(cfg: &NetConfig) -> Self {
        ModelParams { cfg: cfg.clone(), tensors: zero_tensor_map(&clgnet_specs(cfg)) }
    }

    /// Rebuild from a config and tensor map, verifying the map matches the
    /// architecture exactly (no missing entries, no orphans, right shapes).
    pub fn from_parts(cfg: NetConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = zero_tensor_map(&clgnet_specs(&cfg));
        if expected.len() != tensors.len() {
            return Err(Error::config(format!(
                "parameter map has {} entries, architecture needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (path, t) in &expected {
            let got = tensors
                .get(path)
                .ok_or_else(|| Error::config(format!("missing parameter `{path}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter `{path}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { cfg, tensors })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors.get(path).ok_or_else(|| Error::config(format!("no parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(path).ok_or_else(|| Error::config(format!("no parameter `{path}`")))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Parameter tensors inserted on a tape, keyed by layer path.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Insert every tensor of a map onto the tape, as trainable params or
    /// frozen constants.
    pub fn bind_map(tape: &mut Tape, map: &BTreeMap<String, Tensor>, trainable: bool) -> Self {
        let vars = map
            .iter()
            .map(|(path, t)| {
                (path.clone(), if trainable { tape.param(t) } else { tape.constant(t) })
            })
            .collect();
        BoundParams { vars }
    }

    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        Self::bind_map(tape, params.tensors(), trainable)
    }

    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::config(format!("no bound parameter `{path}`")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Same-padding convolution by layer path; padding is derived from the
    /// bound kernel size.
    fn conv(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let k = tape.shape(w)[2];
        tape.conv2d(x, w, b, 1, k / 2)
    }
}

/// One spatial-and-Fourier layer.
///
/// Local branch: k×k conv + ReLU. Global branch: the half spectrum of the
/// input (re/im stacked as 2C channels) through a 1×1 conv + ReLU, then back
/// through the inverse transform. A k×k conv fuses the concatenated
/// branches. Shape preserving.
pub fn sfl_forward(tape: &mut Tape, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
    let width = tape.shape(x)[3];
    let local = p.conv(tape, &format!("{prefix}.local"), x)?;
    let f_l = tape.relu(local)?;
    let spec = tape.rfft2_stack(x)?;
    let spec = p.conv(tape, &format!("{prefix}.fourier"), spec)?;
    let spec = tape.relu(spec)?;
    let f_g = tape.irfft2_unstack(spec, width)?;
    let cat = tape.concat(&[f_l, f_g], 1)?;
    p.conv(tape, &format!("{prefix}.fuse"), cat)
}

/// Residual block of two SFLs: y = x + SFL(SFL(x)).
pub fn sfrb_forward(tape: &mut Tape, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
    let y = sfl_forward(tape, x, p, &format!("{prefix}.sfl0"))?;
    let y = sfl_forward(tape, y, p, &format!("{prefix}.sfl1"))?;
    tape.add(x, y)
}

/// Residual-in-residual group: a chain of SFRBs, a trailing conv, and a long
/// skip back to the input.
pub fn sfrir_forward(
    tape: &mut Tape,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    sfrb_count: usize,
) -> Result<Var> {
    let mut y = x;
    for j in 0..sfrb_count {
        y = sfrb_forward(tape, y, p, &format!("{prefix}.sfrb{j}"))?;
    }
    let y = p.conv(tape, &format!("{prefix}.tail"), y)?;
    tape.add(x, y)
}

/// Wavelet branch: analysis into the four stacked subbands (4C channels),
/// the SFRIR chain, synthesis back to C channels. No skip connection.
pub fn wavelet_branch(tape: &mut Tape, f: Var, p: &BoundParams, cfg: &NetConfig) -> Result<Var> {
    let mut y = tape.dwt2_stack(f)?;
    for i in 0..cfg.sfrir_count {
        y = sfrir_forward(tape, y, p, &format!("wavelet.sfrir{i}"), cfg.sfrb_per_sfrir)?;
    }
    tape.idwt2_stack(y)
}

/// Spatial branch: downsample to half resolution at 4C channels, the SFRIR
/// chain, nearest-neighbor upsample + conv back to C, plus the identity skip.
///
/// The downsample is a 2x2 average pool followed by the C->4C conv; a
/// strided odd-kernel conv cannot produce exactly H/2 from an even H under
/// this crate's exact-output-size convolution contract.
pub fn spatial_branch(tape: &mut Tape, f: Var, p: &BoundParams, cfg: &NetConfig) -> Result<Var> {
    let d = tape.avg_pool2(f)?;
    let mut y = p.conv(tape, "spatial.down", d)?;
    for i in 0..cfg.sfrir_count {
        y = sfrir_forward(tape, y, p, &format!("spatial.sfrir{i}"), cfg.sfrb_per_sfrir)?;
    }
    let u = tape.upsample_nearest2(y)?;
    let u = p.conv(tape, "spatial.up", u)?;
    tape.add(u, f)
}

/// Full forward pass: preprocessing (two convs), both branches, and the
/// output conv over their concatenation. [N,1,H,W] -> [N,1,H,W], H and W
/// even.
pub fn clgnet_forward(tape: &mut Tape, input: Var, p: &BoundParams, cfg: &NetConfig) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::dim(format!("network input must be [N,1,H,W], got {shape:?}")));
    }
    if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(Error::dim(format!(
            "network input needs even spatial dims, got {}x{}",
            shape[2], shape[3]
        )));
    }
    let f = p.conv(tape, "pre.conv0", input)?;
    let f = tape.relu(f)?;
    let f = p.conv(tape, "pre.conv1", f)?;
    let f = tape.relu(f)?;
    let o_w = wavelet_branch(tape, f, p, cfg)?;
    let o_s = spatial_branch(tape, f, p, cfg)?;
    let cat = tape.concat(&[o_w, o_s], 1)?;
    p.conv(tape, "out.conv", cat)
}

/// Run the network on a plain tensor with frozen parameters.
pub fn forward_batch(params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let x = tape.constant(input);
    let out = clgnet_forward(&mut tape, x, &bound, params.cfg())?;
    Ok(tape.value(out).clone())
}
