//! Intermediate-domain construction by convex mixing of paired feature pyramids.

use alloc::format;

use crate::detector::FeaturePyramid;
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixConfig {
    /// Weight of the dominant domain, in `[0, 1]`.
    pub lambda: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { lambda: 0.8 }
    }
}

/// Source-dominant and target-dominant mixtures, finest level first.
#[derive(Clone, Copy, Debug)]
pub struct MixedPyramid {
    pub mix_s: [Var; 2],
    pub mix_t: [Var; 2],
    pub lambda_used: f64,
}

/// `lambda * a + (1 - lambda) * b`. At `lambda = 1` this is `a` itself.
pub fn mix(tape: &mut Tape, a: Var, b: Var, lambda: f64) -> Result<Var, TensorError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::shape("mix", tape.shape(a), tape.shape(b)));
    }
    if lambda == 1.0 {
        return Ok(a);
    }
    let x = tape.scale(a, lambda)?;
    let y = tape.scale(b, 1.0 - lambda)?;
    tape.add(x, y)
}

pub fn mix_pyramids(tape: &mut Tape, fs: &FeaturePyramid, ft: &FeaturePyramid, cfg: MixConfig) -> Result<MixedPyramid, TensorError> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(TensorError::Contract(format!("mixing weight {} outside [0, 1]", cfg.lambda)));
    }
    let mut mix_s = [fs.f2; 2];
    let mut mix_t = [ft.f2; 2];
    for k in 0..2 {
        let (s, t) = (fs.level(k), ft.level(k));
        mix_s[k] = mix(tape, s, t, cfg.lambda)?;
        mix_t[k] = mix(tape, t, s, cfg.lambda)?;
    }
    Ok(MixedPyramid {
        mix_s,
        mix_t,
        lambda_used: cfg.lambda,
    })
}
