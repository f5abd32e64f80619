//! Pairwise attention: proposal-driven spatial/channel weighting (RSA) and
//! channel attention with a pointwise gate (ECAP) over one mixed feature level.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::detector::{box_window, roi_pool, ConvParams};
use crate::params::{Binding, ParamId, ParamStore};
use crate::synth::BBox;
use crate::tape::{Tape, Var, Window};
use crate::tensor::{Tensor, TensorError};

type Result<T> = core::result::Result<T, TensorError>;

/// Weight assigned to cells outside every proposal.
pub const BACKGROUND_WEIGHT: f64 = 0.5;
const COSINE_EPS: f64 = 1e-8;

/// Attention construction used by both branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Cosine spatial+channel weights with residual, and the gated channel attention.
    Pairwise,
    /// Energy-based SimAM weights and plain ECA channel attention.
    SimamEca,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PamConfig {
    /// Weight of the RSA branch in the fused output.
    pub alpha: f64,
    pub ecap_kernel: usize,
    pub kind: AttentionKind,
    /// Regulariser of the SimAM energy.
    pub simam_lambda: f64,
}

impl Default for PamConfig {
    fn default() -> Self {
        PamConfig {
            alpha: 0.5,
            ecap_kernel: 3,
            kind: AttentionKind::Pairwise,
            simam_lambda: 1e-4,
        }
    }
}

/// Parameters for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct PamParams {
    pub channels: usize,
    /// `C x C x 3 x 3`, bias-free.
    pub rsa_conv: ParamId,
    /// `1 x k` weights of the 1-D convolution across channels.
    pub ecap_conv1d: ParamId,
    pub ecap_pointwise: ConvParams,
}

impl PamParams {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, ecap_kernel: usize, rng: &mut R) -> Self {
        let c = channels;
        let rsa_conv = store.add_he(&format!("{name}.rsa_conv"), &[c, c, 3, 3], c * 9, rng);
        let ecap_conv1d = store.add_normal(&format!("{name}.ecap_conv1d"), &[1, ecap_kernel], 0.3, rng);
        let weight = store.add_normal(&format!("{name}.ecap_pointwise.weight"), &[c, c, 1, 1], 0.01, rng);
        let bias = store.add_zeros(&format!("{name}.ecap_pointwise.bias"), &[c]);
        PamParams {
            channels,
            rsa_conv,
            ecap_conv1d,
            ecap_pointwise: ConvParams { weight, bias },
        }
    }
}

/// Instance features of one image at one level: pooled `K x C x 4 x 4`
/// features and the footprint of each proposal on the level grid.
#[derive(Clone, Debug)]
pub struct RegionFeatures {
    pub features: Option<Var>,
    pub windows: Vec<Window>,
}

impl RegionFeatures {
    /// Pools `boxes` out of the `C x H x W` level map `f` at `stride`.
    pub fn pool(tape: &mut Tape, f: Var, boxes: &[BBox], stride: usize) -> Result<Self> {
        if boxes.is_empty() {
            return Ok(Self::empty());
        }
        let (h, w) = (tape.shape(f)[1], tape.shape(f)[2]);
        Ok(RegionFeatures {
            features: Some(roi_pool(tape, f, boxes, stride)?),
            windows: boxes.iter().map(|b| box_window(b, stride, h, w)).collect(),
        })
    }

    pub fn empty() -> Self {
        RegionFeatures {
            features: None,
            windows: Vec::new(),
        }
    }
}

/// Per-proposal 3-D weights `sigmoid(d(h,w) + g(c))` from a bias-free,
/// edge-replicated 3x3 convolution of the pooled features. `None` for no proposals.
pub fn rsa_weights(tape: &mut Tape, p: &Binding, params: &PamParams, features: Option<Var>) -> Result<Option<Var>> {
    let Some(x) = features else { return Ok(None) };
    let s = tape.shape(x).to_vec();
    let &[k, c, h, w] = s.as_slice() else {
        return Err(TensorError::Dimension {
            op: "rsa_weights",
            detail: format!("features must be K x C x H x W, got {s:?}"),
        });
    };
    let padded = tape.pad_replicate(x, 1)?;
    let z = tape.conv2d(padded, p.var(params.rsa_conv), None, 1, 0)?;

    // Spatial map: each position's channel vector against the proposal's mean channel vector.
    let m = tape.mean_axis(z, 3)?;
    let m = tape.mean_axis(m, 2)?;
    let m = tape.broadcast_to(m, &s)?;
    let d = tape.cosine_similarity(z, m, 1, COSINE_EPS)?;
    let d = tape.reshape(d, &[k, 1, h, w])?;

    // Channel gate: each channel's spatial slice against the channel-averaged slice.
    let a = tape.mean_axis(z, 1)?;
    let a = tape.broadcast_to(a, &s)?;
    let zf = tape.reshape(z, &[k, c, h * w])?;
    let af = tape.reshape(a, &[k, c, h * w])?;
    let g = tape.cosine_similarity(zf, af, 2, COSINE_EPS)?;
    let g = tape.reshape(g, &[k, c, 1, 1])?;

    let sum = tape.add(d, g)?;
    Ok(Some(tape.sigmoid(sum)?))
}

/// Classic SimAM weights `sigmoid((x - mu)^2 / (4 (var + lambda)) + 1/2)` per
/// proposal and channel.
pub fn simam_weights(tape: &mut Tape, features: Option<Var>, lambda: f64) -> Result<Option<Var>> {
    let Some(x) = features else { return Ok(None) };
    let s = tape.shape(x).to_vec();
    let n = (s[2] * s[3]) as f64;
    let mu = tape.mean_axis(x, 3)?;
    let mu = tape.mean_axis(mu, 2)?;
    let centred = tape.sub(x, mu)?;
    let t = tape.mul(centred, centred)?;
    let v = tape.mean_axis(t, 3)?;
    let v = tape.mean_axis(v, 2)?;
    let v = tape.scale(v, 4.0 * n / (n - 1.0))?;
    let v = tape.add_scalar(v, 4.0 * lambda)?;
    let inv = tape.powf(v, -1.0)?;
    let e = tape.mul(t, inv)?;
    let e = tape.add_scalar(e, 0.5)?;
    Ok(Some(tape.sigmoid(e)?))
}

/// Lays per-proposal weight patches over their footprints on a `C x H x W`
/// grid; overlaps take the maximum and uncovered cells hold 0.5.
pub fn scatter_proposal_weights(tape: &mut Tape, weights: Option<Var>, windows: &[Window], level_shape: [usize; 3]) -> Result<Var> {
    let [c, h, w] = level_shape;
    match weights {
        Some(wv) => tape.scatter_max(wv, windows, h, w, BACKGROUND_WEIGHT),
        None => Ok(tape.constant(Tensor::full(&[c, h, w], BACKGROUND_WEIGHT))),
    }
}

fn level_shape(tape: &Tape, mix: Var) -> Result<[usize; 3]> {
    match *tape.shape(mix) {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(TensorError::Dimension {
            op: "pam",
            detail: format!("level map must be C x H x W, got {s:?}"),
        }),
    }
}

/// `mix + W * mix` with `W` the scattered RSA weights.
pub fn rsa_branch(tape: &mut Tape, p: &Binding, params: &PamParams, mix: Var, regions: &RegionFeatures) -> Result<Var> {
    let shape = level_shape(tape, mix)?;
    let weights = rsa_weights(tape, p, params, regions.features)?;
    let map = scatter_proposal_weights(tape, weights, &regions.windows, shape)?;
    let wm = tape.mul(map, mix)?;
    tape.add(mix, wm)
}

/// SimAM counterpart of [`rsa_branch`]: `W * mix`, no residual.
pub fn simam_branch(tape: &mut Tape, mix: Var, regions: &RegionFeatures, lambda: f64) -> Result<Var> {
    let shape = level_shape(tape, mix)?;
    let weights = simam_weights(tape, regions.features, lambda)?;
    let map = scatter_proposal_weights(tape, weights, &regions.windows, shape)?;
    tape.mul(map, mix)
}

/// `k*C x C` selection matrix stacking the `k` zero-padded shifts of a length-`C` vector.
fn shift_stack(c: usize, k: usize) -> Tensor {
    let half = (k / 2) as isize;
    let mut m = vec![0.0; k * c * c];
    for j in 0..k {
        for i in 0..c {
            let src = i as isize + j as isize - half;
            if (0..c as isize).contains(&src) {
                m[(j * c + i) * c + src as usize] = 1.0;
            }
        }
    }
    Tensor::from_parts(vec![k * c, c], m)
}

/// Channel weights `sigmoid(conv1d(GAP(x)))` shaped `C x 1 x 1`.
fn channel_weights(tape: &mut Tape, p: &Binding, params: &PamParams, x: Var) -> Result<Var> {
    let c = tape.shape(x)[0];
    let kw = p.var(params.ecap_conv1d);
    let k = tape.shape(kw)[1];
    if k % 2 == 0 {
        return Err(TensorError::Contract(format!("channel kernel width {k} must be odd")));
    }
    let s = tape.mean_axis(x, 2)?;
    let s = tape.mean_axis(s, 1)?;
    let s = tape.reshape(s, &[c, 1])?;
    let shifts = tape.constant(shift_stack(c, k));
    let stacked = tape.matmul(shifts, s)?;
    let stacked = tape.reshape(stacked, &[k, c])?;
    let y = tape.matmul(kw, stacked)?;
    let y = tape.reshape(y, &[c, 1, 1])?;
    tape.sigmoid(y)
}

/// `mix` plus the raw region features laid over their footprints (zeros elsewhere).
fn combine(tape: &mut Tape, mix: Var, regions: &RegionFeatures) -> Result<Var> {
    let [_, h, w] = level_shape(tape, mix)?;
    match regions.features {
        Some(f) => {
            let placed = tape.scatter_max(f, &regions.windows, h, w, 0.0)?;
            tape.add(mix, placed)
        }
        None => Ok(mix),
    }
}

/// `a * p * combined`: channel weights times the sigmoid 1x1-conv gate times
/// the combined map. The plain variant omits the gate.
pub fn ecap_branch(tape: &mut Tape, p: &Binding, params: &PamParams, mix: Var, regions: &RegionFeatures, gated: bool) -> Result<Var> {
    let combined = combine(tape, mix, regions)?;
    let a = channel_weights(tape, p, params, combined)?;
    let out = tape.mul(combined, a)?;
    if !gated {
        return Ok(out);
    }
    let pw = params.ecap_pointwise;
    let gate = tape.conv2d(combined, p.var(pw.weight), Some(p.var(pw.bias)), 1, 0)?;
    let gate = tape.sigmoid(gate)?;
    tape.mul(out, gate)
}

/// `alpha * att_rsa + (1 - alpha) * att_ecap`.
pub fn fuse_attention(tape: &mut Tape, att_rsa: Var, att_ecap: Var, alpha: f64) -> Result<Var> {
    if tape.shape(att_rsa) != tape.shape(att_ecap) {
        return Err(TensorError::shape("fuse_attention", tape.shape(att_rsa), tape.shape(att_ecap)));
    }
    let a = tape.scale(att_rsa, alpha)?;
    let b = tape.scale(att_ecap, 1.0 - alpha)?;
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutputs {
    /// Absent when `alpha = 0`.
    pub att_rsa: Option<Var>,
    /// Absent when `alpha = 1`.
    pub att_ecap: Option<Var>,
    pub f_att: Var,
}

/// Both branches on one level, fused. A branch with zero weight is not evaluated.
pub fn pam_forward(tape: &mut Tape, p: &Binding, params: &PamParams, cfg: &PamConfig, mix: Var, regions: &RegionFeatures) -> Result<AttentionOutputs> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(TensorError::Contract(format!("attention weight {} outside [0, 1]", cfg.alpha)));
    }
    let att_rsa = if cfg.alpha > 0.0 {
        Some(match cfg.kind {
            AttentionKind::Pairwise => rsa_branch(tape, p, params, mix, regions)?,
            AttentionKind::SimamEca => simam_branch(tape, mix, regions, cfg.simam_lambda)?,
        })
    } else {
        None
    };
    let att_ecap = if cfg.alpha < 1.0 {
        Some(ecap_branch(tape, p, params, mix, regions, cfg.kind == AttentionKind::Pairwise)?)
    } else {
        None
    };
    let f_att = match (att_rsa, att_ecap) {
        (Some(r), Some(e)) => fuse_attention(tape, r, e, cfg.alpha)?,
        (Some(r), None) => r,
        (None, Some(e)) => e,
        (None, None) => unreachable!("alpha selects at least one branch"),
    };
    Ok(AttentionOutputs { att_rsa, att_ecap, f_att })
}
