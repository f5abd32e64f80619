//! Multi-seed ablations, parameter sweeps and the feature projection.

use pdaanet_core::config::{ConfigError, RunConfig, Variant};
use pdaanet_core::projection::{centroid_distance, project_2d};
use pdaanet_core::synth::{Dataset, Domain};
use pdaanet_core::train::{attended_embeddings, train, Model, TrainedRun};

use crate::HarnessError;

pub const RESULTS_HEADER: &str = "variant_or_value,seed,map50,recall";
pub const PROJECTION_HEADER: &str = "domain,pc1,pc2";

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub map50: f64,
    pub recall: f64,
}

/// Trains `cfg` on `data` and reads off the final evaluation.
pub fn run_once(label: &str, cfg: &RunConfig, data: &Dataset) -> Result<(RunResult, TrainedRun), HarnessError> {
    let run = train(cfg, data)?;
    let (map50, recall) = run.final_eval().expect("the last iteration is always evaluated");
    let result = RunResult {
        label: label.to_string(),
        seed: cfg.seed,
        map50,
        recall,
    };
    Ok((result, run))
}

/// Runs every `(label, config)` for every seed; the dataset is shared by all runs.
fn grid(base: &RunConfig, cases: &[(String, RunConfig)], seeds: &[u64]) -> Result<Vec<RunResult>, HarnessError> {
    for (_, cfg) in cases {
        cfg.validate()?;
    }
    let data = Dataset::generate(&base.dataset);
    let mut out = Vec::with_capacity(cases.len() * seeds.len());
    for (label, cfg) in cases {
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            out.push(run_once(label, &cfg, &data)?.0);
        }
    }
    Ok(out)
}

/// Every ablation variant of `base` over `seeds`.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<Vec<RunResult>, HarnessError> {
    let cases: Vec<(String, RunConfig)> = Variant::ABLATION
        .iter()
        .map(|&variant| (variant.to_string(), RunConfig { variant, ..base.clone() }))
        .collect();
    grid(base, &cases, seeds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Alpha,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Lambda => "dommix.lambda",
            SweepParam::Alpha => "pam.alpha",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![0.6, 0.7, 0.8, 0.9, 1.0],
            SweepParam::Alpha => vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> RunConfig {
        let mut cfg = cfg.clone();
        match self {
            SweepParam::Lambda => cfg.mix.lambda = value,
            SweepParam::Alpha => cfg.pam.alpha = value,
        }
        cfg
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "alpha" => Ok(SweepParam::Alpha),
            _ => Err(format!("unknown sweep parameter `{s}` (expected lambda or alpha)")),
        }
    }
}

/// One training per value and seed with `param` overridden.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<Vec<RunResult>, HarnessError> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ConfigError::new(param.key(), format!("sweep value {v} is outside [0, 1]")).into());
    }
    let cases: Vec<(String, RunConfig)> = values.iter().map(|&v| (v.to_string(), param.apply(base, v))).collect();
    grid(base, &cases, seeds)
}

/// Mean map50 and recall per label, in order of first appearance.
pub fn summarize(results: &[RunResult]) -> Vec<(String, f64, f64)> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunResult> = results.iter().filter(|r| r.label == label).collect();
            let n = group.len() as f64;
            let map = group.iter().map(|r| r.map50).sum::<f64>() / n;
            let recall = group.iter().map(|r| r.recall).sum::<f64>() / n;
            (label.to_string(), map, recall)
        })
        .collect()
}

/// Per-run rows followed by one `mean` row per group.
pub fn results_csv(results: &[RunResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER.split(',')).expect("in-memory write");
    for r in results {
        w.write_record([r.label.clone(), r.seed.to_string(), r.map50.to_string(), r.recall.to_string()])
            .expect("in-memory write");
    }
    for (label, map, recall) in summarize(results) {
        w.write_record([label, "mean".to_string(), map.to_string(), recall.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// Only the `mean` rows: one line per variant or value.
pub fn summary_csv(results: &[RunResult]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for (label, map, recall) in summarize(results) {
        out.push_str(&format!("{label},mean,{map},{recall}\n"));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub rows: Vec<(Domain, [f64; 2])>,
    /// Distance between the two domain centroids in the projected plane.
    pub centroid_distance: f64,
}

impl Projection {
    pub fn csv(&self) -> String {
        let mut out = format!("{PROJECTION_HEADER}\n");
        for (d, [a, b]) in &self.rows {
            out.push_str(&format!("{},{a},{b}\n", d.name()));
        }
        out
    }
}

/// Projects the globally pooled coarse attended features of the first `n`
/// source and target training images onto their top two principal components.
pub fn project_features(cfg: &RunConfig, model: &Model, data: &Dataset, n: usize) -> Result<Projection, HarnessError> {
    if n < 2 {
        return Err(ConfigError::new("n_per_domain", "must be at least 2").into());
    }
    if n > data.source.len() || n > data.target.len() {
        return Err(ConfigError::new("n_per_domain", "exceeds the training split sizes").into());
    }
    let wiring = cfg.wiring();
    let mut source = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let (s, t) = attended_embeddings(model, &wiring, &cfg.detector, &data.source[i].image, &data.target.get(i).image)?;
        source.push(s);
        target.push(t);
    }
    let all: Vec<Vec<f64>> = source.into_iter().chain(target).collect();
    let points = project_2d(&all);
    let (ps, pt) = points.split_at(n);
    let rows = ps
        .iter()
        .map(|p| (Domain::Source, *p))
        .chain(pt.iter().map(|p| (Domain::Target, *p)))
        .collect();
    Ok(Projection {
        rows,
        centroid_distance: centroid_distance(ps, pt),
    })
}
