use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ike_core::harness::selftest::{run_selftest, SelftestOptions};
use ike_core::harness::{run_experiment, worker_count, ExperimentConfig, ORDER_PRESETS};
use ike_core::synth::{generate, write_dataset, SyntheticSpec};
use ike_core::IkeError;

#[derive(Parser)]
#[command(name = "ike-lab", version, about = "Camera-incremental re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, variant, order, sweep point) of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (capped by IKE_LAB_THREADS).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a hyperparameter sweep, e.g. `--axis lambda=0,0.25,0.5,0.75,1`.
    Sweep {
        /// Base config; the default synthetic IKE setup when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites and print a table of maximum errors.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the named camera orders.
    Orders {
        /// One preset (T1..T5); all of them when absent.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Write a synthetic dataset as feature files.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with synthetic spec fields; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &IkeError) -> ExitCode {
    match e {
        IkeError::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, IkeError> {
    ExperimentConfig::from_file(path).map_err(|e| match e {
        IkeError::Io(io) => IkeError::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn execute(mut config: ExperimentConfig, jobs: Option<usize>, out: Option<PathBuf>) -> Result<(), IkeError> {
    if let Some(out) = out {
        config.output = out;
    }
    config.validate()?;
    let workers = worker_count(jobs)?;
    let outcome = run_experiment(&config, workers)?;
    println!(
        "{:<10} {:<14} {:<22} {:>6} {:>17} {:>17}",
        "variant", "order", "sweep", "seeds", "fmAP", "mean-mAP"
    );
    for r in &outcome.summary {
        println!(
            "{:<10} {:<14} {:<22} {:>6} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            r.variant.name(),
            r.order,
            if r.sweep.is_empty() { "-" } else { &r.sweep },
            r.seeds.len(),
            r.fmap_mean,
            r.fmap_std,
            r.mean_map_mean,
            r.mean_map_std
        );
    }
    println!("{} runs written to {}", outcome.runs.len(), outcome.output.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode, IkeError> {
    match cli.command {
        Command::Run { config, jobs, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            execute(cfg, jobs, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, axes, jobs, out } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig {
                    seeds: vec![0, 1, 2],
                    ..Default::default()
                },
            };
            for a in &axes {
                cfg.sweep.set_from_arg(a)?;
            }
            execute(cfg, jobs, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { seed } => {
            let reports = run_selftest(&SelftestOptions {
                seed,
                ..Default::default()
            })?;
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().all(|r| r.passed()) {
                println!("all suites passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("self-test failed");
                Ok(ExitCode::from(1))
            }
        }
        Command::Orders { preset } => {
            let chosen: Vec<_> = ORDER_PRESETS
                .iter()
                .filter(|(n, _)| preset.as_deref().is_none_or(|p| n.eq_ignore_ascii_case(p)))
                .collect();
            if chosen.is_empty() {
                return Err(IkeError::Config(format!("unknown order preset {:?}", preset.unwrap_or_default())));
            }
            for (name, order) in chosen {
                let cams: Vec<String> = order.iter().map(|c| format!("c{c}")).collect();
                let idx: Vec<String> = order.iter().map(|c| (c - 1).to_string()).collect();
                println!("{name}: {}  [{}]", cams.join(" -> "), idx.join(", "));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate { out, spec, seed } => {
            let mut s: SyntheticSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| IkeError::Config(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| IkeError::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let data = generate(&s)?;
            let manifest = write_dataset(&out, &data)?;
            println!("wrote {}", manifest.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> Result<ExitCode, IkeError> {
        let argv = std::iter::once("ike-lab").chain(args.iter().copied());
        dispatch(Cli::try_parse_from(argv).expect("arguments parse"))
    }

    fn write_config(dir: &Path, body: &str) -> String {
        let path = dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path.to_string_lossy().into_owned()
    }

    const ONE_CAMERA: &str = r#"{
        "dataset": {"synthetic": {"n_global": 20, "n_cameras": 1, "ids_per_camera": 10,
                                   "images_per_id": 3, "test_images_per_id": 2}},
        "gallery": "exclude_self",
        "hyper": {"epochs": 1, "batch_size": 16},
        "widths": [8, 8, 8, 8],
        "seeds": [0, 1, 2]
    }"#;

    #[test]
    fn seed_override_runs_one_camera_once() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), ONE_CAMERA);
        let out = dir.path().join("out");
        let code = run(&["run", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap(), "--jobs", "1"]);
        assert_eq!(code.unwrap(), ExitCode::SUCCESS);
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 1, "{csv}");
        assert!(rows[0].contains(",7,"), "{csv}");
        let reports: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(reports[0]["seed"], 7);
    }

    #[test]
    fn configuration_problems_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write_config(dir.path(), r#"{"dataset": {"synthetic": {}}, "hyper": {"tau": -1.0}}"#);
        let err = run(&["run", "--config", &bad]).unwrap_err();
        assert_eq!(exit_code(&err), ExitCode::from(2));

        let unknown = write_config(dir.path(), r#"{"dataset": {"synthetic": {}}, "colour": 3}"#);
        assert_eq!(exit_code(&run(&["run", "--config", &unknown]).unwrap_err()), ExitCode::from(2));

        let missing = dir.path().join("absent.json");
        let err = run(&["run", "--config", missing.to_str().unwrap()]).unwrap_err();
        assert_eq!(exit_code(&err), ExitCode::from(2));

        assert_eq!(exit_code(&run(&["orders", "--preset", "T9"]).unwrap_err()), ExitCode::from(2));
        assert_eq!(exit_code(&run(&["sweep", "--axis", "gamma=1"]).unwrap_err()), ExitCode::from(2));
    }

    #[test]
    fn orders_and_generate() {
        assert_eq!(run(&["orders"]).unwrap(), ExitCode::SUCCESS);
        assert_eq!(run(&["orders", "--preset", "t3"]).unwrap(), ExitCode::SUCCESS);

        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.json");
        std::fs::write(&spec, r#"{"n_global": 12, "n_cameras": 2, "ids_per_camera": 6, "images_per_id": 2}"#).unwrap();
        let out = dir.path().join("feat");
        let code = run(&["generate", "--out", out.to_str().unwrap(), "--spec", spec.to_str().unwrap(), "--seed", "3"]);
        assert_eq!(code.unwrap(), ExitCode::SUCCESS);
        let data = ike_core::synth::load_dataset(&out.join("manifest.json")).unwrap();
        assert_eq!(data.train.len(), 2);
    }

    #[test]
    fn selftest_passes() {
        assert_eq!(run(&["selftest", "--seed", "1"]).unwrap(), ExitCode::SUCCESS);
    }
}
