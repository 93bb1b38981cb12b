use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use bimspu::config::{TrainConfig, KEYS};
use bimspu::gradcheck::{self, GradcheckOptions};
use bimspu::pipeline::{self, GenerateOptions, TrainOptions};
use bimspu::report::format_metric_table;
use bimspu::{Error, Result};

/// Point cloud upsampling: data generation, training, inference and evaluation.
#[derive(Parser)]
#[command(name = "bimspu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training patches and held-out test pairs from OFF meshes.
    GenerateData(GenerateArgs),
    /// Train a model on a patch container.
    Train(TrainArgs),
    /// Upsample a point cloud with a trained checkpoint.
    Upsample(UpsampleArgs),
    /// Score predicted clouds against ground truth (units of 1e-3).
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Directory of .off meshes.
    #[arg(long)]
    meshes: PathBuf,
    /// Output directory (train.bpup and test/).
    #[arg(long)]
    out: PathBuf,
    /// Training config; supplies ratio and patch size.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<usize>,
    /// Training input patch size N (default 64, or the config's value).
    #[arg(long)]
    patch_size: Option<usize>,
    /// Points in each sparse test input.
    #[arg(long, default_value_t = 2048)]
    input_points: usize,
    #[arg(long)]
    patches_per_mesh: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Patch container written by generate-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Final checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV (default: the checkpoint path with a .csv extension).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint saved with the same configuration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's ratio (scale weights revert to defaults).
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input XYZ file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected ratio; must match the checkpoint.
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted XYZ file (repeatable).
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth XYZ file, one per --pred.
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Reference OFF mesh for P2F, one per --pred.
    #[arg(long)]
    mesh: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// First seed; `--seeds` consecutive seeds are checked.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Test hook: corrupt the analytic gradient of this op.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn config_help() -> String {
    let mut s = String::from("Config file: one `key = value` per line, `#` starts a comment. Keys:\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<17} {d}\n"));
    }
    s
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData(a) => {
            let (mut ratio, mut patch) = (4, 64);
            if let Some(p) = &a.config {
                let c = TrainConfig::read(p)?;
                (ratio, patch) = (c.ratio, c.patch_size);
            }
            let mut opts = GenerateOptions::new(a.ratio.unwrap_or(ratio), a.patch_size.unwrap_or(patch));
            opts.input_points = a.input_points;
            opts.patches_per_mesh = a.patches_per_mesh;
            opts.seed = a.seed;
            let s = pipeline::cmd_generate_data(&a.meshes, &a.out, &opts)?;
            println!("wrote {} patches to {}", s.patches, s.dataset_path.display());
            for (i, g) in &s.test_files {
                println!("test pair {} {}", i.display(), g.display());
            }
        }
        Command::Train(a) => {
            let mut cfg = TrainConfig::read(&a.config)?;
            if let Some(r) = a.ratio {
                cfg = cfg.with_ratio(r);
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let opts = TrainOptions {
                threads: a.threads,
                log: a.log,
                resume: a.checkpoint,
            };
            let logs = pipeline::cmd_train(&a.data, cfg, &a.out, &opts)?;
            if let Some(l) = logs.last() {
                println!("epoch {} joint loss {}", l.epoch, l.joint);
            }
            println!("checkpoint written to {}", a.out.display());
        }
        Command::Upsample(a) => {
            let up = pipeline::cmd_upsample(&a.checkpoint, &a.input, &a.out, a.ratio, a.threads)?;
            println!("wrote {} points to {}", up.len(), a.out.display());
        }
        Command::Evaluate(a) => {
            let rows = pipeline::cmd_evaluate(&a.pred, &a.gt, &a.mesh)?;
            let table = format_metric_table(&rows);
            print!("{table}");
            if let Some(p) = &a.out {
                std::fs::write(p, &table).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
            }
        }
        Command::Gradcheck(a) => {
            let opts = GradcheckOptions {
                seeds: (a.seed..a.seed + a.seeds.max(1)).collect(),
                corrupt: a.corrupt,
                ..Default::default()
            };
            let reports = gradcheck::run(&opts)?;
            print!("{}", gradcheck::format_report(&reports));
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cmd = Cli::command().mut_subcommand("train", |c| c.after_long_help(config_help()));
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
