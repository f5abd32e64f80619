//! Plain-text run configuration: one `key = value` per line, sections by
//! dotted keys, `#` starts a comment. Every key is optional.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use pdaanet_core::config::{ConfigError, RunConfig, Variant};

use crate::HarnessError;

/// Every accepted key, in the order [`render_config`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "variant",
    "eval_every",
    "dataset.seed",
    "dataset.n_source",
    "dataset.n_target",
    "dataset.n_eval",
    "style.palette_shift",
    "style.grating_amp",
    "style.grating_period",
    "style.blur_radius",
    "style.noise_sigma",
    "dommix.lambda",
    "pam.alpha",
    "pam.ecap_kernel",
    "pam.simam_lambda",
    "pam.feed_detector",
    "loss.lambda1",
    "loss.lambda2",
    "loss.focal_gamma",
    "loss.focal_alpha",
    "loss.ema_decay",
    "optim.lr",
    "optim.iterations",
    "optim.lr_drop_iters",
    "optim.warmup_source_only_iters",
    "optim.adapt_lr_scale",
    "detector.k_max",
    "detector.nms_threshold",
    "detector.pos_iou",
    "detector.neg_iou",
    "detector.score_threshold",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse()
        .map_err(|_| ConfigError::new(key, format!("malformed value `{raw}`")))
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>, ConfigError> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| value(key, v.trim())).collect()
}

/// Applies one assignment to `cfg`.
pub fn set_key(cfg: &mut RunConfig, key: &str, raw: &str) -> Result<(), ConfigError> {
    let style = &mut cfg.dataset.style;
    match key {
        "seed" => cfg.seed = value(key, raw)?,
        "variant" => cfg.variant = raw.parse::<Variant>().map_err(|e| ConfigError::new(key, e))?,
        "eval_every" => cfg.eval_every = value(key, raw)?,
        "dataset.seed" => cfg.dataset.seed = value(key, raw)?,
        "dataset.n_source" => cfg.dataset.n_source = value(key, raw)?,
        "dataset.n_target" => cfg.dataset.n_target = value(key, raw)?,
        "dataset.n_eval" => cfg.dataset.n_eval = value(key, raw)?,
        "style.palette_shift" => style.palette_shift = value(key, raw)?,
        "style.grating_amp" => style.grating_amp = value(key, raw)?,
        "style.grating_period" => style.grating_period = value(key, raw)?,
        "style.blur_radius" => style.blur_radius = value(key, raw)?,
        "style.noise_sigma" => style.noise_sigma = value(key, raw)?,
        "dommix.lambda" => cfg.mix.lambda = value(key, raw)?,
        "pam.alpha" => cfg.pam.alpha = value(key, raw)?,
        "pam.ecap_kernel" => cfg.pam.ecap_kernel = value(key, raw)?,
        "pam.simam_lambda" => cfg.pam.simam_lambda = value(key, raw)?,
        "pam.feed_detector" => {
            // Attended features only feed the domain classifiers; the switch is reserved.
            if value::<bool>(key, raw)? {
                return Err(ConfigError::new(key, "feeding attended features to the detector is not supported"));
            }
        }
        "loss.lambda1" => cfg.loss.lambda1 = value(key, raw)?,
        "loss.lambda2" => cfg.loss.lambda2 = value(key, raw)?,
        "loss.focal_gamma" => cfg.loss.focal_gamma = value(key, raw)?,
        "loss.focal_alpha" => cfg.loss.focal_alpha = value(key, raw)?,
        "loss.ema_decay" => cfg.loss.ema_decay = value(key, raw)?,
        "optim.lr" => cfg.optim.lr = value(key, raw)?,
        "optim.iterations" => cfg.optim.iterations = value(key, raw)?,
        "optim.lr_drop_iters" => cfg.optim.lr_drop_iters = list(key, raw)?,
        "optim.warmup_source_only_iters" => cfg.optim.warmup_source_only_iters = value(key, raw)?,
        "optim.adapt_lr_scale" => cfg.optim.adapt_lr_scale = value(key, raw)?,
        "detector.k_max" => cfg.detector.k_max = value(key, raw)?,
        "detector.nms_threshold" => cfg.detector.nms_threshold = value(key, raw)?,
        "detector.pos_iou" => cfg.detector.pos_iou = value(key, raw)?,
        "detector.neg_iou" => cfg.detector.neg_iou = value(key, raw)?,
        "detector.score_threshold" => cfg.detector.score_threshold = value(key, raw)?,
        _ => return Err(ConfigError::new(key, "unknown key")),
    }
    Ok(())
}

fn get_key(cfg: &RunConfig, key: &str) -> String {
    let style = &cfg.dataset.style;
    match key {
        "seed" => cfg.seed.to_string(),
        "variant" => cfg.variant.to_string(),
        "eval_every" => cfg.eval_every.to_string(),
        "dataset.seed" => cfg.dataset.seed.to_string(),
        "dataset.n_source" => cfg.dataset.n_source.to_string(),
        "dataset.n_target" => cfg.dataset.n_target.to_string(),
        "dataset.n_eval" => cfg.dataset.n_eval.to_string(),
        "style.palette_shift" => style.palette_shift.to_string(),
        "style.grating_amp" => style.grating_amp.to_string(),
        "style.grating_period" => style.grating_period.to_string(),
        "style.blur_radius" => style.blur_radius.to_string(),
        "style.noise_sigma" => style.noise_sigma.to_string(),
        "dommix.lambda" => cfg.mix.lambda.to_string(),
        "pam.alpha" => cfg.pam.alpha.to_string(),
        "pam.ecap_kernel" => cfg.pam.ecap_kernel.to_string(),
        "pam.simam_lambda" => cfg.pam.simam_lambda.to_string(),
        "pam.feed_detector" => "false".into(),
        "loss.lambda1" => cfg.loss.lambda1.to_string(),
        "loss.lambda2" => cfg.loss.lambda2.to_string(),
        "loss.focal_gamma" => cfg.loss.focal_gamma.to_string(),
        "loss.focal_alpha" => cfg.loss.focal_alpha.to_string(),
        "loss.ema_decay" => cfg.loss.ema_decay.to_string(),
        "optim.lr" => cfg.optim.lr.to_string(),
        "optim.iterations" => cfg.optim.iterations.to_string(),
        "optim.lr_drop_iters" => cfg
            .optim
            .lr_drop_iters
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
        "optim.warmup_source_only_iters" => cfg.optim.warmup_source_only_iters.to_string(),
        "optim.adapt_lr_scale" => cfg.optim.adapt_lr_scale.to_string(),
        "detector.k_max" => cfg.detector.k_max.to_string(),
        "detector.nms_threshold" => cfg.detector.nms_threshold.to_string(),
        "detector.pos_iou" => cfg.detector.pos_iou.to_string(),
        "detector.neg_iou" => cfg.detector.neg_iou.to_string(),
        "detector.score_threshold" => cfg.detector.score_threshold.to_string(),
        _ => unreachable!("key list and getter disagree on `{key}`"),
    }
}

/// Parses configuration text on top of the defaults, then validates ranges.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, raw)) = line.split_once('=') else {
            return Err(ConfigError::new(line, format!("line {} is not `key = value`", n + 1)));
        };
        let key = key.trim();
        if seen.contains(&key) {
            return Err(ConfigError::new(key, "assigned twice"));
        }
        seen.push(key);
        set_key(&mut cfg, key, raw.trim())?;
    }
    cfg.validate()?;
    if cfg.detector.score_threshold < 0.0 || cfg.detector.score_threshold >= 1.0 {
        return Err(ConfigError::new("detector.score_threshold", "must lie in [0, 1)"));
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(parse_config_str(&text)?)
}

/// Writes every key; parsing the result gives back `cfg`.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for key in KEYS {
        let _ = writeln!(out, "{key} = {}", get_key(cfg, key));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config_str("").unwrap(), RunConfig::default());
        assert_eq!(parse_config_str("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_set_fields() {
        let cfg = parse_config_str("dommix.lambda = 0.8\nloss.lambda2 = 0.25 # domain weight\nvariant = rsa_only").unwrap();
        assert_eq!(cfg.mix.lambda, 0.8);
        assert_eq!(cfg.loss.lambda2, 0.25);
        assert_eq!(cfg.variant, Variant::RsaOnly);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("dommix.lambda = 1.5", "dommix.lambda"),
            ("loss.lambda3 = 1", "loss.lambda3"),
            ("optim.lr = fast", "optim.lr"),
            ("optim.adapt_lr_scale = 0", "optim.adapt_lr_scale"),
            ("variant = best", "variant"),
            ("pam.feed_detector = true", "pam.feed_detector"),
            ("seed = 1\nseed = 2", "seed"),
            ("optim.iterations = 10\noptim.warmup_source_only_iters = 10", "optim.warmup_source_only_iters"),
        ] {
            assert_eq!(parse_config_str(text).unwrap_err().key, key, "{text}");
        }
        assert!(parse_config_str("pam.feed_detector = false").is_ok());
    }

    #[test]
    fn rendered_config_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.optim.lr_drop_iters = vec![5, 9];
        cfg.optim.lr = 3.3e-4;
        cfg.loss.ema_decay = 0.1 + 0.2;
        cfg.variant = Variant::SimamEca;
        assert_eq!(parse_config_str(&render_config(&cfg)).unwrap(), cfg);
        cfg.optim.lr_drop_iters.clear();
        assert_eq!(parse_config_str(&render_config(&cfg)).unwrap(), cfg);
    }
}
