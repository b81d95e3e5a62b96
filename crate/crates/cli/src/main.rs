mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use superlora::adapter::{init_adapter, save_adapter, SuperLoraConfig};
use superlora::geometry::{analyze, DistanceNorm};
use superlora::grouping::WeightManifest;
use superlora::rng::derive_seed;
use superlora::tensor::sltf;
use superlora::trainer::{train, SyntheticTask, ToyModel, TrainConfig};
use superlora::Error;

use sweep::{run_sweep, Budget, SweepGrid};

#[derive(Parser)]
#[command(
    name = "superlora",
    version,
    about = "Grouped, reshaped and projected low-rank adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count trainable parameters for every point of a hyperparameter grid.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only configs with MIN <= params <= MAX.
        #[arg(long, value_name = "MIN:MAX")]
        budget: Option<Budget>,
    },
    /// Initialize an adapter and write it to disk.
    Materialize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = "SUPERLORA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an adapter on the synthetic transfer task.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long, env = "SUPERLORA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two weight-update matrices stored as SLTF files.
    Analyze {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Norm::Frobenius)]
        norm: Norm,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Frobenius,
    Spectral,
}

/// Failure with its process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible(_) => 3,
            Error::SvdNoConvergence { .. } | Error::Numerical(_) | Error::Diverged { .. } => 4,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn read_input(path: &Path, what: &str) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read {what} {}: {e}", path.display()),
    })
}

fn write_output(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".rejected.csv");
    out.with_file_name(name)
}

fn cmd_sweep(
    manifest: &Path,
    grid: &Path,
    out: &Path,
    budget: Option<Budget>,
) -> Result<(), Failure> {
    let manifest = WeightManifest::from_json(&read_input(manifest, "manifest")?)?;
    let grid = SweepGrid::from_json(&read_input(grid, "grid")?)?;
    let result = run_sweep(&manifest, &grid, budget);
    write_output(out, result.rows_csv())?;
    write_output(&sidecar_path(out), result.rejections_csv())?;
    eprintln!(
        "{} feasible configs, {} rejected",
        result.rows.len(),
        result.rejected.len()
    );
    if result.rows.is_empty() {
        return Err(Failure {
            code: 3,
            message: "no feasible configuration in the grid".into(),
        });
    }
    Ok(())
}

fn cmd_materialize(config: &Path, manifest: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let config = SuperLoraConfig::from_json(&read_input(config, "config")?)?;
    let manifest = WeightManifest::from_json(&read_input(manifest, "manifest")?)?;
    let state = init_adapter(&config, &manifest, seed)?;
    save_adapter(&state, out)?;
    let dims: Vec<&[usize]> = state
        .plan()
        .groups
        .iter()
        .map(|g| g.target_shape.dims())
        .collect();
    let summary = json!({
        "variant": state.variant().name(),
        "params": state.param_count(),
        "groups": state.plan().groups.len(),
        "per_group_dims": dims,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_train_toy(config: &Path, train_cfg: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let config = SuperLoraConfig::from_json(&read_input(config, "config")?)?;
    let mut train_cfg = TrainConfig::from_json(&read_input(train_cfg, "train config")?)?;
    train_cfg.seed = seed;
    let model = ToyModel::new(train_cfg.model.clone(), seed)?;
    let task = SyntheticTask::new(&model, &train_cfg.task, derive_seed(seed, 1))?;
    let mut state = init_adapter(&config, &model.manifest(), derive_seed(seed, 2))?;
    let report = train(&mut state, &model, &task, &train_cfg)?;

    fs::create_dir_all(out).map_err(|e| Failure {
        code: 2,
        message: format!("cannot create {}: {e}", out.display()),
    })?;
    let mut metrics = Vec::new();
    report.write_metrics(&mut metrics)?;
    write_output(&out.join("metrics.jsonl"), metrics)?;
    save_adapter(&state, out.join("adapter.slad"))?;
    let summary = json!({
        "variant": state.variant().name(),
        "params": state.param_count(),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "loss_ratio": report.loss_ratio(),
        "final_eval_acc": report.final_eval_acc,
    });
    write_output(&out.join("summary.json"), format!("{summary}\n"))?;
    println!("{summary}");
    if let Some(limit) = train_cfg.convergence_ratio {
        if report.loss_ratio() > limit {
            return Err(Failure {
                code: 4,
                message: format!(
                    "did not converge: final/initial loss {:.4} exceeds {limit}",
                    report.loss_ratio()
                ),
            });
        }
    }
    Ok(())
}

fn cmd_analyze(a: &Path, b: &Path, k: usize, norm: Norm) -> Result<(), Failure> {
    let wa = sltf::load(a)?;
    let wb = sltf::load(b)?;
    let norm = match norm {
        Norm::Frobenius => DistanceNorm::Frobenius,
        Norm::Spectral => DistanceNorm::Spectral,
    };
    let report = analyze(&wa, &wb, k, norm)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sweep {
            manifest,
            grid,
            out,
            budget,
        } => cmd_sweep(manifest, grid, out, *budget),
        Command::Materialize {
            config,
            manifest,
            seed,
            out,
        } => cmd_materialize(config, manifest, *seed, out),
        Command::TrainToy {
            config,
            train,
            seed,
            out,
        } => cmd_train_toy(config, train, *seed, out),
        Command::Analyze { a, b, k, norm } => cmd_analyze(a, b, *k, *norm),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
