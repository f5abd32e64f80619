//! Run configuration and the wiring each variant implies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::apc::LossWeights;
use crate::detector::DetectorConfig;
use crate::dommix::MixConfig;
use crate::pam::{AttentionKind, PamConfig};
use crate::synth::DatasetSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoDommix,
    EcapOnly,
    RsaOnly,
    SimamEca,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoDommix,
        Variant::EcapOnly,
        Variant::RsaOnly,
        Variant::SimamEca,
        Variant::SourceOnly,
    ];
    /// Rows of the ablation table.
    pub const ABLATION: [Variant; 5] = [
        Variant::Full,
        Variant::NoDommix,
        Variant::EcapOnly,
        Variant::RsaOnly,
        Variant::SimamEca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDommix => "no_dommix",
            Variant::EcapOnly => "ecap_only",
            Variant::RsaOnly => "rsa_only",
            Variant::SimamEca => "simam_eca",
            Variant::SourceOnly => "source_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub iterations: usize,
    /// The learning rate is divided by 10 once each of these iterations is reached.
    pub lr_drop_iters: Vec<usize>,
    pub warmup_source_only_iters: usize,
    /// Learning-rate multiplier for the attention modules and domain classifiers.
    pub adapt_lr_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            iterations: 3000,
            lr_drop_iters: vec![2400],
            warmup_source_only_iters: 500,
            adapt_lr_scale: 0.3,
        }
    }
}

impl OptimConfig {
    /// Learning rate in effect at 1-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let drops = self.lr_drop_iters.iter().filter(|&&d| it > d).count();
        self.lr / libm::pow(10.0, drops as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds parameter initialisation and sample order.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub mix: MixConfig,
    pub pam: PamConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub detector: DetectorConfig,
    pub eval_every: usize,
    pub variant: Variant,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            mix: MixConfig::default(),
            pam: PamConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            detector: DetectorConfig::default(),
            eval_every: 1000,
            variant: Variant::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("config key `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: &str, reason: impl Into<String>) -> Self {
        ConfigError {
            key: String::from(key),
            reason: reason.into(),
        }
    }
}

/// Module wiring after the variant has been applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wiring {
    /// Whether phase 2 runs the target branch and the domain losses.
    pub adapt: bool,
    pub mix: MixConfig,
    pub pam: PamConfig,
}

fn check(ok: bool, key: &str, reason: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, reason))
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        check(d.n_source > 0, "dataset.n_source", "must be positive")?;
        check(d.n_target > 0, "dataset.n_target", "must be positive")?;
        check(d.n_eval > 0, "dataset.n_eval", "must be positive")?;
        let s = &d.style;
        check(s.palette_shift >= 0.0, "style.palette_shift", "must be non-negative")?;
        check(s.grating_amp >= 0.0, "style.grating_amp", "must be non-negative")?;
        check(s.grating_period > 0.0, "style.grating_period", "must be positive")?;
        check(s.noise_sigma >= 0.0, "style.noise_sigma", "must be non-negative")?;
        check(unit(self.mix.lambda), "dommix.lambda", "must lie in [0, 1]")?;
        check(unit(self.pam.alpha), "pam.alpha", "must lie in [0, 1]")?;
        check(self.pam.ecap_kernel % 2 == 1, "pam.ecap_kernel", "must be odd")?;
        check(self.pam.simam_lambda > 0.0, "pam.simam_lambda", "must be positive")?;
        let l = &self.loss;
        check(l.lambda1 >= 0.0, "loss.lambda1", "must be non-negative")?;
        check(l.lambda2 >= 0.0, "loss.lambda2", "must be non-negative")?;
        check(l.focal_gamma >= 0.0, "loss.focal_gamma", "must be non-negative")?;
        check(l.focal_alpha > 0.0 && l.focal_alpha < 1.0, "loss.focal_alpha", "must lie in (0, 1)")?;
        check(l.ema_decay > 0.0 && l.ema_decay < 1.0, "loss.ema_decay", "must lie in (0, 1)")?;
        let o = &self.optim;
        check(o.lr > 0.0, "optim.lr", "must be positive")?;
        check(o.adapt_lr_scale > 0.0, "optim.adapt_lr_scale", "must be positive")?;
        check(o.iterations > 0, "optim.iterations", "must be positive")?;
        check(
            o.iterations > o.warmup_source_only_iters,
            "optim.warmup_source_only_iters",
            "must be smaller than optim.iterations",
        )?;
        let det = &self.detector;
        check((1..=64).contains(&det.k_max), "detector.k_max", "must lie in 1..=64")?;
        check(det.nms_threshold > 0.0 && det.nms_threshold <= 1.0, "detector.nms_threshold", "must lie in (0, 1]")?;
        check(unit(det.pos_iou) && unit(det.neg_iou), "detector.pos_iou", "IoU thresholds must lie in [0, 1]")?;
        check(det.neg_iou <= det.pos_iou, "detector.neg_iou", "must not exceed detector.pos_iou")?;
        check(self.eval_every > 0, "eval_every", "must be positive")?;
        Ok(())
    }

    pub fn wiring(&self) -> Wiring {
        let mut mix = self.mix;
        let mut pam = self.pam;
        match self.variant {
            Variant::Full | Variant::SourceOnly => {}
            Variant::NoDommix => mix.lambda = 1.0,
            Variant::EcapOnly => pam.alpha = 0.0,
            Variant::RsaOnly => pam.alpha = 1.0,
            Variant::SimamEca => pam.kind = AttentionKind::SimamEca,
        }
        Wiring {
            adapt: self.variant != Variant::SourceOnly,
            mix,
            pam,
        }
    }
}
