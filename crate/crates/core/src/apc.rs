//! Adversarial domain alignment: the pyramid-pooling domain classifier,
//! focal domain loss behind gradient reversal, EMA consistency, and the
//! combined objective.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::detector::LinearParams;
use crate::params::{Binding, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

type Result<T> = core::result::Result<T, TensorError>;

/// Side lengths of the pooled grids.
pub const POOL_SCALES: [usize; 4] = [1, 2, 3, 6];
/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct ApcParams {
    pub channels: usize,
    /// `4C x 1` weights and a single bias.
    pub linear: LinearParams,
}

impl ApcParams {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let n_in = POOL_SCALES.len() * channels;
        let weight = store.add_normal(&format!("{name}.weight"), &[n_in, 1], 1.0 / libm::sqrt(n_in as f64), rng);
        let bias = store.add_zeros(&format!("{name}.bias"), &[1]);
        ApcParams {
            channels,
            linear: LinearParams { weight, bias },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Consistency weight.
    pub lambda1: f64,
    /// Domain weight, applied as the gradient-reversal coefficient.
    pub lambda2: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub ema_decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.5,
            ema_decay: 0.99,
        }
    }
}

/// Pools `x` to each scale, restores every grid to `H x W` by nearest
/// upsampling and concatenates them along channels (`4C x H x W`).
pub fn pyramid_maps(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let &[_, h, w] = s.as_slice() else {
        return Err(TensorError::Dimension {
            op: "apc_forward",
            detail: format!("input must be C x H x W, got {s:?}"),
        });
    };
    let mut restored = Vec::with_capacity(POOL_SCALES.len());
    for scale in POOL_SCALES {
        let pooled = tape.adaptive_avg_pool2d(x, scale, scale)?;
        restored.push(tape.upsample_to(pooled, h, w)?);
    }
    tape.concat(&restored, 0)
}

/// Domain logit (scalar) of a `C x H x W` map.
pub fn apc_forward(tape: &mut Tape, p: &Binding, params: &ApcParams, x: Var) -> Result<Var> {
    let maps = pyramid_maps(tape, x)?;
    let s = tape.shape(maps).to_vec();
    let flat = tape.reshape(maps, &[s[0], s[1] * s[2]])?;
    let gap = tape.mean_axis(flat, 1)?;
    let row = tape.reshape(gap, &[1, s[0]])?;
    let y = tape.matmul(row, p.var(params.linear.weight))?;
    let y = tape.reshape(y, &[1])?;
    let y = tape.add(y, p.var(params.linear.bias))?;
    tape.reshape(y, &[])
}

/// `-alpha_t (1 - p_t)^gamma ln p_t` on a clamped probability.
pub fn focal_loss(tape: &mut Tape, p: Var, y: bool, gamma: f64, alpha: f64) -> Result<Var> {
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let (p_t, alpha_t) = if y {
        (p, alpha)
    } else {
        let q = tape.scale(p, -1.0)?;
        (tape.add_scalar(q, 1.0)?, 1.0 - alpha)
    };
    let log_p = tape.log(p_t)?;
    let ce = tape.scale(log_p, -alpha_t)?;
    if gamma == 0.0 {
        return Ok(ce);
    }
    let q = tape.scale(p_t, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let m = tape.powf(q, gamma)?;
    tape.mul(m, ce)
}

/// Attended features of both branches at both levels, finest level first.
#[derive(Clone, Copy, Debug, Default)]
pub struct DomainBatch {
    /// Source-dominant branch, label 0.
    pub f_att_s: Option<[Var; 2]>,
    /// Target-dominant branch, label 1.
    pub f_att_t: Option<[Var; 2]>,
}

/// Identifies one discriminator output for the consistency store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PredictionKey {
    pub pair: u32,
    /// 0 for the source-dominant branch, 1 for the target-dominant branch.
    pub branch: u8,
    pub level: u8,
}

#[derive(Clone, Debug)]
pub struct DomainOutcome {
    pub l_dom: Var,
    /// Discriminator probabilities with their keys (pair id left at 0).
    pub probs: Vec<(PredictionKey, Var)>,
}

/// Mean focal loss over branches and levels of the classifier behind a
/// gradient-reversal layer with coefficient `lambda2`.
pub fn domain_loss(tape: &mut Tape, p: &Binding, apc: &[ApcParams; 2], batch: &DomainBatch, w: &LossWeights) -> Result<DomainOutcome> {
    let (Some(fs), Some(ft)) = (batch.f_att_s, batch.f_att_t) else {
        return Err(TensorError::Contract(String::from("domain loss needs both branches")));
    };
    let mut terms = Vec::with_capacity(4);
    let mut probs = Vec::with_capacity(4);
    for (branch, feats) in [(0u8, fs), (1u8, ft)] {
        for (level, &f) in feats.iter().enumerate() {
            let r = tape.grl(f, w.lambda2)?;
            let logit = apc_forward(tape, p, &apc[level], r)?;
            let prob = tape.sigmoid(logit)?;
            terms.push(focal_loss(tape, prob, branch == 1, w.focal_gamma, w.focal_alpha)?);
            probs.push((
                PredictionKey {
                    pair: 0,
                    branch,
                    level: level as u8,
                },
                prob,
            ));
        }
    }
    let l_dom = mean_of(tape, &terms)?;
    Ok(DomainOutcome { l_dom, probs })
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Exponential moving averages of past discriminator probabilities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmaStore {
    values: BTreeMap<PredictionKey, f64>,
}

impl EmaStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &PredictionKey) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean squared gap between current probabilities and their (constant) EMA
/// teachers; first visits seed the EMA and add 0. Updates the store afterwards.
pub fn consistency_loss(tape: &mut Tape, current: &[(PredictionKey, Var)], ema: &mut EmaStore, decay: f64) -> Result<Var> {
    if current.is_empty() {
        return Err(TensorError::Contract(String::from("consistency loss needs at least one prediction")));
    }
    let mut terms = Vec::with_capacity(current.len());
    for (key, v) in current {
        let term = match ema.get(key) {
            Some(teacher) => {
                let d = tape.add_scalar(*v, -teacher)?;
                tape.mul(d, d)?
            }
            None => tape.constant(crate::tensor::Tensor::scalar(0.0)),
        };
        terms.push(term);
    }
    let l_cr = mean_of(tape, &terms)?;
    for (key, v) in current {
        let now = tape.value(*v).data()[0];
        let next = match ema.get(key) {
            Some(old) => decay * old + (1.0 - decay) * now,
            None => now,
        };
        ema.values.insert(*key, next);
    }
    Ok(l_cr)
}

#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub l_det: Var,
    pub l_dom: Option<Var>,
    pub l_cr: Option<Var>,
    pub total: Var,
}

/// `l_det + lambda1 * l_cr + l_dom`; the reversal inside the domain path
/// already applies `-lambda2` on the generator side. Terms whose weight is
/// zero are left out, so a zero `lambda2` also freezes the classifier.
pub fn total_objective(tape: &mut Tape, l_det: Var, l_dom: Option<Var>, l_cr: Option<Var>, w: &LossWeights) -> Result<LossBundle> {
    let mut total = l_det;
    if let Some(c) = l_cr.filter(|_| w.lambda1 > 0.0) {
        let c = tape.scale(c, w.lambda1)?;
        total = tape.add(total, c)?;
    }
    if let Some(d) = l_dom.filter(|_| w.lambda2 > 0.0) {
        total = tape.add(total, d)?;
    }
    Ok(LossBundle { l_det, l_dom, l_cr, total })
}
