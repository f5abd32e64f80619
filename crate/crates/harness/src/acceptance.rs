//! The acceptance checks: gradient suite, algebraic invariants, oracle
//! equivalence, and the multi-seed training trends.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use pdaanet_core::apc::{focal_loss, POOL_SCALES};
use pdaanet_core::config::{RunConfig, Variant};
use pdaanet_core::detector::{nms, Detections};
use pdaanet_core::dommix::mix;
use pdaanet_core::metrics::{evaluate_detections, Annotations};
use pdaanet_core::pam::{ecap_branch, pam_forward, rsa_branch, PamConfig, PamParams, RegionFeatures};
use pdaanet_core::params::ParamStore;
use pdaanet_core::synth::{BBox, Dataset};
use pdaanet_core::{pool_bin, Tape, Tensor, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::render_config;
use crate::experiments::{project_features, run_once, RunResult};
use crate::gradsuite::run_suite;
use crate::oracles::{nms_oracle, pr_oracle};
use crate::run::metrics_csv;
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "criterion {} [{verdict}] {}: {}", self.id, self.name, self.detail)
    }
}

fn criterion(id: u8, name: &'static str, failures: Vec<String>, summary: String) -> Criterion {
    let pass = failures.is_empty();
    let detail = if pass { summary } else { format!("{summary}; {}", failures.join("; ")) };
    Criterion { id, name, pass, detail }
}

pub fn check_gradients() -> Criterion {
    let start = Instant::now();
    let results = run_suite();
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let mut failures: Vec<String> = results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} rel err {:e}", r.name, r.max_rel_err))
        .collect();
    if secs >= 120.0 {
        failures.push(format!("took {secs:.1} s"));
    }
    criterion(
        1,
        "gradient suite",
        failures,
        format!("{} cases, worst relative error {worst:.2e}, {secs:.1} s", results.len()),
    )
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn max_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of each invariant over seeded random instances.
fn invariant_gaps(cases: usize) -> Vec<(&'static str, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut conservation, mut homogeneity, mut swap) = (0.0f64, 0.0f64, 0.0f64);
    let (mut endpoints, mut focal, mut grl, mut pooled_mean, mut cosine) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut store = ParamStore::new();
    let pam = PamParams::init(&mut store, "pam", 4, 3, &mut rng);
    for _ in 0..cases {
        let h = rng.random_range(2..12);
        let w = rng.random_range(2..12);
        let lam = rng.random_range(0.0..=1.0);
        let c = rng.random_range(-3.0..3.0);
        let a = random(&mut rng, &[3, h, w], -2.0, 2.0);
        let b = random(&mut rng, &[3, h, w], -2.0, 2.0);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let ab = mix(&mut tape, av, bv, lam).unwrap();
        let ba = mix(&mut tape, bv, av, lam).unwrap();
        let total = tape.add(ab, ba).unwrap();
        let sum = tape.add(av, bv).unwrap();
        conservation = conservation.max(max_gap(tape.value(total), tape.value(sum)));
        let (ca, cb) = (tape.scale(av, c).unwrap(), tape.scale(bv, c).unwrap());
        let scaled = mix(&mut tape, ca, cb, lam).unwrap();
        let expected = tape.scale(ab, c).unwrap();
        homogeneity = homogeneity.max(max_gap(tape.value(scaled), tape.value(expected)));
        let swapped = mix(&mut tape, bv, av, 1.0 - lam).unwrap();
        swap = swap.max(max_gap(tape.value(ab), tape.value(swapped)));

        // Fusion endpoints against the single branches.
        let m = random(&mut rng, &[4, 6, 6], -1.0, 1.0);
        let f = random(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (mv, fv) = (tape.constant(m), tape.constant(f));
        let regions = RegionFeatures {
            features: Some(fv),
            windows: vec![Window { r0: 0, r1: 3, c0: 1, c1: 4 }, Window { r0: 2, r1: 6, c0: 0, c1: 6 }],
        };
        let rsa = rsa_branch(&mut tape, &p, &pam, mv, &regions).unwrap();
        let ecap = ecap_branch(&mut tape, &p, &pam, mv, &regions, true).unwrap();
        for (alpha, branch) in [(1.0, rsa), (0.0, ecap)] {
            let cfg = PamConfig { alpha, ..PamConfig::default() };
            let out = pam_forward(&mut tape, &p, &pam, &cfg, mv, &regions).unwrap();
            endpoints = endpoints.max(max_gap(tape.value(out.f_att), tape.value(branch)));
        }

        let prob = rng.random_range(1e-6..1.0 - 1e-6);
        let y: bool = rng.random();
        let alpha = rng.random_range(0.01..0.99);
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::scalar(prob));
        let l = focal_loss(&mut tape, pv, y, 0.0, alpha).unwrap();
        let (pt, at) = if y { (prob, alpha) } else { (1.0 - prob, 1.0 - alpha) };
        focal = focal.max((tape.value(l).data()[0] + at * pt.ln()).abs());

        let coeff = rng.random_range(0.0..3.0);
        let x = random(&mut rng, &[3, 4], -1.0, 1.0);
        let r = random(&mut rng, &[3, 4], -1.0, 1.0);
        let grad = |with_grl: bool| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let hv = if with_grl { tape.grl(xv, coeff).unwrap() } else { xv };
            let forward = max_gap(tape.value(hv), &x);
            let sq = tape.mul(hv, hv).unwrap();
            let rv = tape.constant(r.clone());
            let yv = tape.mul(sq, rv).unwrap();
            let lv = tape.sum(yv).unwrap();
            (forward, tape.backward(lv).unwrap().get(xv).unwrap().clone())
        };
        let (forward, flipped) = grad(true);
        let (_, plain) = grad(false);
        grl = grl.max(forward).max(max_gap(&flipped, &plain.map(|v| -coeff * v)));

        let (ph, pw) = (rng.random_range(6..20), rng.random_range(6..20));
        let fmap = random(&mut rng, &[2, ph, pw], -3.0, 3.0);
        let mut tape = Tape::new();
        let fv = tape.constant(fmap.clone());
        for s in POOL_SCALES {
            let pooled = tape.adaptive_avg_pool2d(fv, s, s).unwrap();
            let pd = tape.value(pooled).data();
            for ch in 0..2 {
                let mean = fmap.data()[ch * ph * pw..(ch + 1) * ph * pw].iter().sum::<f64>() / (ph * pw) as f64;
                let mut weighted = 0.0;
                for i in 0..s {
                    for j in 0..s {
                        let (r0, r1) = pool_bin(i, ph, s);
                        let (c0, c1) = pool_bin(j, pw, s);
                        weighted += pd[(ch * s + i) * s + j] * ((r1 - r0) * (c1 - c0)) as f64;
                    }
                }
                pooled_mean = pooled_mean.max((weighted / (ph * pw) as f64 - mean).abs());
            }
        }

        let u = random(&mut rng, &[4, 3, 3], -1.0, 1.0);
        let v = random(&mut rng, &[4, 3, 3], -1.0, 1.0);
        let k = rng.random_range(1e-3..1e3);
        let mut tape = Tape::new();
        let (uv, vv) = (tape.constant(u.clone()), tape.constant(v));
        let us = tape.constant(u.map(|x| x * k));
        let base = tape.cosine_similarity(uv, vv, 0, 1e-8).unwrap();
        let scaled = tape.cosine_similarity(us, vv, 0, 1e-8).unwrap();
        cosine = cosine.max(max_gap(tape.value(base), tape.value(scaled)));
    }
    vec![
        ("mixing conservation", conservation, 1e-12),
        ("mixing homogeneity", homogeneity, 1e-12),
        ("mixing swap symmetry", swap, 1e-12),
        ("fusion endpoints", endpoints, 1e-12),
        ("focal at gamma 0", focal, 1e-12),
        ("reversal identity", grl, 1e-12),
        ("pooled mean", pooled_mean, 1e-12),
        ("cosine scale invariance", cosine, 1e-9),
    ]
}

pub fn check_invariants() -> Criterion {
    let gaps = invariant_gaps(200);
    let failures = gaps
        .iter()
        .filter(|(_, gap, tol)| !(gap <= tol))
        .map(|(name, gap, tol)| format!("{name} off by {gap:e} (tolerance {tol:e})"))
        .collect();
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    criterion(2, "algebraic invariants", failures, format!("{} invariants x 200 cases, largest gap {worst:.1e}", gaps.len()))
}

fn small_box(rng: &mut ChaCha8Rng, span: u32) -> BBox {
    let x = rng.random_range(0..span) as f64;
    let y = rng.random_range(0..span) as f64;
    BBox::new(x, y, x + rng.random_range(1..6) as f64, y + rng.random_range(1..6) as f64)
}

pub fn check_oracles() -> Criterion {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nms_bad = 0;
    for case in 0..1000 {
        let n = rng.random_range(0..=6);
        let boxes: Vec<BBox> = (0..n).map(|_| small_box(&mut rng, 8)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
        let t = [0.1, 0.3, 0.5, 0.7][case % 4];
        if nms(&boxes, &scores, t) != nms_oracle(&boxes, &scores, t) {
            nms_bad += 1;
        }
    }
    if nms_bad > 0 {
        failures.push(format!("suppression differs in {nms_bad} of 1000 cases"));
    }

    let mut eval_bad = 0;
    let mut cases = 0;
    while cases < 1000 {
        let n_img = rng.random_range(1..=2);
        let n_det = rng.random_range(0..=5);
        let n_gt = rng.random_range(1..=3);
        let split = |img: usize, total: usize| if n_img == 1 { total } else if img == 0 { total / 2 } else { total - total / 2 };
        let mut dets = Vec::new();
        let mut truth = Vec::new();
        for img in 0..n_img {
            let g = split(img, n_gt);
            truth.push(Annotations {
                boxes: (0..g).map(|_| small_box(&mut rng, 6)).collect(),
                classes: (0..g).map(|_| rng.random_range(0..2)).collect(),
            });
            let d = split(img, n_det);
            dets.push(Detections {
                boxes: (0..d).map(|_| small_box(&mut rng, 6)).collect(),
                scores: (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
                classes: (0..d).map(|_| rng.random_range(0..2)).collect(),
            });
        }
        let report = evaluate_detections(&dets, &truth, 0.5).expect("ground truth is present");
        let (map, recall) = pr_oracle(&dets, &truth, 0.5);
        if (report.map - map).abs() > 1e-12 || (report.recall - recall).abs() > 1e-12 {
            eval_bad += 1;
        }
        cases += 1;
    }
    if eval_bad > 0 {
        failures.push(format!("evaluation differs in {eval_bad} of 1000 cases"));
    }
    let iou = BBox::new(0.0, 0.0, 2.0, 2.0).iou(&BBox::new(1.0, 1.0, 3.0, 3.0));
    if iou != 1.0 / 7.0 {
        failures.push(format!("IoU of offset squares is {iou}"));
    }
    criterion(3, "oracle equivalence", failures, "1000 suppression and 1000 evaluation cases, IoU 1/7 exact".into())
}

/// Results of every training run the trend criteria need, keyed by label and seed.
#[derive(Clone, Debug, Default)]
pub struct TrendRuns {
    pub results: Vec<RunResult>,
    pub metrics: HashMap<(String, u64), String>,
    /// Projected centroid distance after `full` and after `source_only` training.
    pub centroid_distance: HashMap<(String, u64), f64>,
    pub seeds: Vec<u64>,
    pub sweep_values: Vec<f64>,
    /// Whether rerunning a configuration reproduced its metrics file byte for byte.
    pub replay_identical: Option<bool>,
}

pub const SWEEP_VALUES: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];
pub const PROJECTION_SIZE: usize = 50;

fn sweep_label(v: f64) -> String {
    format!("lambda={v}")
}

impl TrendRuns {
    fn mean(&self, label: &str) -> Option<f64> {
        let maps: Vec<f64> = self.results.iter().filter(|r| r.label == label).map(|r| r.map50).collect();
        (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64)
    }

    fn mean_of(&self, label: &str) -> f64 {
        self.mean(label).unwrap_or(f64::NAN)
    }
}

/// Trains every configuration the trend criteria use for each seed, reusing
/// runs whose configurations coincide. `log` receives one line per run.
pub fn run_trends(base: &RunConfig, seeds: &[u64], log: &mut dyn FnMut(&str)) -> Result<TrendRuns, HarnessError> {
    base.validate()?;
    let data = Dataset::generate(&base.dataset);
    let mut out = TrendRuns {
        seeds: seeds.to_vec(),
        sweep_values: SWEEP_VALUES.to_vec(),
        ..TrendRuns::default()
    };
    let mut cases: Vec<(String, RunConfig)> = [Variant::SourceOnly, Variant::Full, Variant::NoDommix, Variant::EcapOnly, Variant::RsaOnly]
        .into_iter()
        .map(|variant| (variant.to_string(), RunConfig { variant, ..base.clone() }))
        .collect();
    for v in SWEEP_VALUES {
        let mut cfg = RunConfig {
            variant: Variant::Full,
            ..base.clone()
        };
        cfg.mix.lambda = v;
        cases.push((sweep_label(v), cfg));
    }
    for &seed in seeds {
        let mut done: HashMap<String, (RunResult, String)> = HashMap::new();
        for (label, cfg) in &cases {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let key = render_config(&cfg);
            let (result, csv) = match done.get(&key) {
                Some((r, csv)) => (RunResult { label: label.clone(), ..r.clone() }, csv.clone()),
                None => {
                    let start = Instant::now();
                    let (result, run) = run_once(label, &cfg, &data)?;
                    let csv = metrics_csv(&run.rows);
                    log(&format!(
                        "  seed {seed} {label:<12} map50 {:.4} recall {:.4} ({:.0} s)",
                        result.map50,
                        result.recall,
                        start.elapsed().as_secs_f64()
                    ));
                    if cfg.variant == Variant::Full && cfg.mix.lambda == base.mix.lambda || cfg.variant == Variant::SourceOnly {
                        let p = project_features(&cfg, &run.model, &data, PROJECTION_SIZE.min(data.source.len()).min(data.target.len()))?;
                        out.centroid_distance.insert((cfg.variant.to_string(), seed), p.centroid_distance);
                    }
                    done.insert(key, (result.clone(), csv.clone()));
                    (result, csv)
                }
            };
            out.metrics.insert((label.clone(), seed), csv);
            out.results.push(result);
        }
    }
    if let Some(&seed) = seeds.first() {
        let cfg = RunConfig {
            seed,
            variant: Variant::SourceOnly,
            ..base.clone()
        };
        let (_, run) = run_once("replay", &cfg, &data)?;
        out.replay_identical = Some(metrics_csv(&run.rows) == out.metrics[&(Variant::SourceOnly.to_string(), seed)]);
    }
    Ok(out)
}

pub fn check_adaptation(t: &TrendRuns) -> Criterion {
    let (full, src) = (t.mean_of("full"), t.mean_of("source_only"));
    let gap = full - src;
    let failures = if gap >= 0.05 { vec![] } else { vec![format!("gap {gap:.4} is below 0.05")] };
    criterion(4, "adaptation trend", failures, format!("mean map50 full {full:.4}, source_only {src:.4}, gap {gap:.4}"))
}

pub fn check_ablation(t: &TrendRuns) -> Criterion {
    let full = t.mean_of("full");
    let mut failures = Vec::new();
    let mut parts = vec![format!("full {full:.4}")];
    for v in ["no_dommix", "ecap_only", "rsa_only"] {
        let m = t.mean_of(v);
        parts.push(format!("{v} {m:.4}"));
        if !(full >= m - 0.01) {
            failures.push(format!("full trails {v} by more than 0.01"));
        }
    }
    let no_mix = t.mean_of("no_dommix");
    if !(full - no_mix >= 0.01) {
        failures.push(format!("no_dommix trails full by {:.4}, needs 0.01", full - no_mix));
    }
    criterion(5, "ablation trend", failures, format!("mean map50 {}", parts.join(", ")))
}

pub fn check_sweep(t: &TrendRuns) -> Criterion {
    let means: Vec<(f64, f64)> = t.sweep_values.iter().map(|&v| (v, t.mean_of(&sweep_label(v)))).collect();
    let at_one = t.mean_of(&sweep_label(1.0));
    let best = means.iter().filter(|(v, _)| *v < 1.0).map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let mut failures = Vec::new();
    if !(best > at_one) {
        failures.push(format!("best mixing value {best:.4} does not beat lambda 1.0 at {at_one:.4}"));
    }
    let equal = t.seeds.iter().all(|&s| {
        let a = t.metrics.get(&(sweep_label(1.0), s));
        a.is_some() && a == t.metrics.get(&("no_dommix".to_string(), s))
    });
    if !equal {
        failures.push("lambda 1.0 runs differ from no_dommix runs".into());
    }
    let curve: Vec<String> = means.iter().map(|(v, m)| format!("{v}: {m:.4}")).collect();
    criterion(6, "sweep trend", failures, format!("mean map50 by lambda {}", curve.join(", ")))
}

pub fn check_alignment(t: &TrendRuns) -> Criterion {
    let mut wins = 0;
    let mut parts = Vec::new();
    for &s in &t.seeds {
        let full = t.centroid_distance.get(&("full".to_string(), s)).copied().unwrap_or(f64::NAN);
        let src = t.centroid_distance.get(&("source_only".to_string(), s)).copied().unwrap_or(f64::NAN);
        if full < src {
            wins += 1;
        }
        parts.push(format!("seed {s} {full:.4} vs {src:.4}"));
    }
    let needed = t.seeds.len() / 2 + 1;
    let failures = if wins >= needed { vec![] } else { vec![format!("full closer in only {wins} seeds, needs {needed}")] };
    criterion(7, "alignment proxy", failures, format!("centroid distance full vs source_only: {}", parts.join(", ")))
}

pub fn check_determinism(t: &TrendRuns) -> Criterion {
    let failures = match t.replay_identical {
        Some(true) => vec![],
        Some(false) => vec!["replayed metrics.csv differs".into()],
        None => vec!["no run was replayed".into()],
    };
    criterion(8, "determinism", failures, "source_only replay reproduces metrics.csv byte for byte".into())
}

/// Every criterion in order. Training failures fail the trend criteria.
pub fn run_all(base: &RunConfig, seeds: &[u64], log: &mut dyn FnMut(&str)) -> Vec<Criterion> {
    let mut out = vec![check_gradients(), check_invariants(), check_oracles()];
    for c in &out {
        log(&c.to_string());
    }
    match run_trends(base, seeds, log) {
        Ok(t) => {
            for c in [check_adaptation(&t), check_ablation(&t), check_sweep(&t), check_alignment(&t), check_determinism(&t)] {
                log(&c.to_string());
                out.push(c);
            }
        }
        Err(e) => {
            let names = ["adaptation trend", "ablation trend", "sweep trend", "alignment proxy", "determinism"];
            for (id, name) in (4..=8).zip(names) {
                let c = Criterion {
                    id,
                    name,
                    pass: false,
                    detail: format!("training failed: {e}"),
                };
                log(&c.to_string());
                out.push(c);
            }
        }
    }
    out
}
