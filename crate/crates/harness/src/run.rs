//! Training runs and their persisted artifacts: `metrics.csv`, the
//! parameter file and the resolved configuration.

use std::fs;
use std::path::Path;

use pdaanet_core::config::RunConfig;
use pdaanet_core::synth::Dataset;
use pdaanet_core::train::{train, MetricsRow, Model, TrainedRun};
use pdaanet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{parse_config_str, render_config};
use crate::HarnessError;

pub const METRICS_HEADER: &str = "iteration,l_det,l_dom,l_cr,total,disc_accuracy,map50,recall";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PARAMS_FILE: &str = "params.json";
pub const CONFIG_FILE: &str = "config.txt";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The metrics table; `None` fields are left empty.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.l_det.to_string(),
            r.l_dom.to_string(),
            r.l_cr.to_string(),
            r.total.to_string(),
            opt(r.disc_accuracy),
            opt(r.map50),
            opt(r.recall),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    /// The run configuration in `key = value` form.
    config: String,
    tensors: Vec<StoredTensor>,
}

pub fn params_json(cfg: &RunConfig, model: &Model) -> String {
    let file = ParamsFile {
        config: render_config(cfg),
        tensors: model
            .store
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("plain data serialises")
}

pub fn save_params(path: &Path, cfg: &RunConfig, model: &Model) -> Result<(), HarnessError> {
    fs::write(path, params_json(cfg, model)).map_err(|e| HarnessError::io(path, e))
}

/// Reads a parameter file back into its configuration and model.
pub fn load_params(path: &Path) -> Result<(RunConfig, Model), HarnessError> {
    let bad = |msg: String| HarnessError::Format {
        path: path.display().to_string(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let file: ParamsFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let cfg = parse_config_str(&file.config)?;
    let reference = Model::init(cfg.seed, cfg.pam.ecap_kernel);
    if file.tensors.len() != reference.store.len() {
        return Err(bad(format!("expected {} tensors, found {}", reference.store.len(), file.tensors.len())));
    }
    let mut values = Vec::with_capacity(file.tensors.len());
    for (stored, (name, _)) in file.tensors.into_iter().zip(reference.store.iter()) {
        if stored.name != name {
            return Err(bad(format!("expected tensor `{name}`, found `{}`", stored.name)));
        }
        values.push(Tensor::new(&stored.shape, stored.data).map_err(|e| bad(format!("{name}: {e}")))?);
    }
    let model = Model::with_values(cfg.seed, cfg.pam.ecap_kernel, values).map_err(|e| bad(e.to_string()))?;
    Ok((cfg, model))
}

/// Generates the configured dataset and trains on it.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainedRun, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(&cfg.dataset);
    Ok(train(cfg, &data)?)
}

/// Writes `metrics.csv`, the parameter file and the resolved configuration into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, run: &TrainedRun) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for (name, body) in [
        (METRICS_FILE, metrics_csv(&run.rows)),
        (PARAMS_FILE, params_json(cfg, &run.model)),
        (CONFIG_FILE, render_config(cfg)),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}
