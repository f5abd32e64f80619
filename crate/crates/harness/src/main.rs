use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdaanet::acceptance::run_all;
use pdaanet::config::parse_config;
use pdaanet::data::{export_dataset, load_dataset};
use pdaanet::experiments::{ablate, project_features, results_csv, summary_csv, sweep, SweepParam};
use pdaanet::gradsuite::run_suite;
use pdaanet::run::{load_params, train_from_config, write_run};
use pdaanet::HarnessError;
use pdaanet_core::config::RunConfig;
use pdaanet_core::synth::Dataset;
use pdaanet_core::train::evaluate_run;

#[derive(Parser)]
#[command(name = "pdaanet", version, about = "Domain-adaptive detection on a synthetic two-domain benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the dataset described by a config file as PPM images and labels.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run; writes metrics.csv, params.json and config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained parameters on the target eval split of an exported dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every ablation variant for each seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inclusive range `a..b` or a comma-separated list.
        #[arg(long, default_value = "0..4")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the mixing weight (lambda) or the branch weight (alpha).
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; defaults to five points across the usual range.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "0..4")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project pooled attended features of both domains onto two principal components.
    Project {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Images per domain.
        #[arg(long, default_value_t = 50)]
        n: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Run every acceptance criterion; the exit status reflects the verdict.
    Acceptance {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "0..4")]
        seeds: String,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("cannot read seeds `{s}` (expected a..b or a comma list)");
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn parse_values(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("cannot read sweep value `{v}`")))
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, HarnessError> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, body: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| HarnessError::io(path, e))
}

enum Failure {
    Error(String),
    Verdict,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Error(e.to_string())
    }
}

impl From<String> for Failure {
    fn from(e: String) -> Self {
        Failure::Error(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { spec, out } => {
            let cfg = parse_config(&spec)?;
            let m = export_dataset(&cfg.dataset, &out)?;
            println!("wrote {} images and {} label rows to {}", m.images, m.label_rows, out.display());
        }
        Command::Train { config, out } => {
            let cfg = parse_config(&config)?;
            let run = train_from_config(&cfg)?;
            write_run(&out, &cfg, &run)?;
            if let Some((map, recall)) = run.final_eval() {
                println!("map50 {map:.4} recall {recall:.4}");
            }
        }
        Command::Eval { params, data } => {
            let (cfg, model) = load_params(&params)?;
            let data = load_dataset(&data)?;
            let report = evaluate_run(&model, &data.eval, &cfg.detector).map_err(HarnessError::from)?;
            println!("map50 {:.4} recall {:.4}", report.map, report.recall);
            for (class, ap) in &report.per_class_ap {
                println!("class {class} ap {ap:.4}");
            }
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            let results = ablate(&cfg, &parse_seeds(&seeds)?)?;
            write(&out.join("ablation.csv"), &results_csv(&results))?;
            write(&out.join("ablation_summary.csv"), &summary_csv(&results))?;
            print!("{}", summary_csv(&results));
        }
        Command::Sweep {
            param,
            values,
            config,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let values = match values {
                Some(v) => parse_values(&v)?,
                None => param.default_values(),
            };
            let results = sweep(&cfg, param, &values, &parse_seeds(&seeds)?)?;
            let name = param.key().replace('.', "_");
            write(&out.join(format!("sweep_{name}.csv")), &results_csv(&results))?;
            print!("{}", summary_csv(&results));
        }
        Command::Project { params, out, n } => {
            let (cfg, model) = load_params(&params)?;
            let data = Dataset::generate(&cfg.dataset);
            let p = project_features(&cfg, &model, &data, n)?;
            write(&out, &p.csv())?;
            println!("centroid distance {:.6}", p.centroid_distance);
        }
        Command::Gradcheck => {
            let results = run_suite();
            for r in &results {
                println!("{:<40} {:.3e} {}", r.name, r.max_rel_err, if r.pass { "ok" } else { "FAIL" });
            }
            if results.iter().any(|r| !r.pass) {
                return Err(Failure::Verdict);
            }
        }
        Command::Acceptance { config, seeds } => {
            let cfg = load_config(config.as_deref())?;
            let seeds = parse_seeds(&seeds)?;
            let criteria = run_all(&cfg, &seeds, &mut |line| println!("{line}"));
            if criteria.iter().any(|c| !c.pass) {
                return Err(Failure::Verdict);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verdict) => ExitCode::FAILURE,
        Err(Failure::Error(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
