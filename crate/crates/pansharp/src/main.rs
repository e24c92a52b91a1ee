//! Command-line front end; all behavior lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pansharp::harness::{self, config::TrainConfig};
use pansharp::isodata::IsodataParams;
use pansharp::raster::{read_raster, ScaleFactor};
use pansharp::Error;

#[derive(Parser)]
#[command(name = "pansharp", version, about = "Pan-sharpening toolbench")]
struct Cli {
    /// Flat `section.key = value` config file (model, loss, train keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop HR inputs into degraded training triples plus an index.
    Degrade {
        #[arg(long)]
        hrms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long, default_value_t = 256)]
        patch: usize,
        #[arg(long, default_value_t = 256)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion network per the config file.
    Train,
    /// Fuse an MS/PAN pair with one method.
    Fuse {
        #[arg(long)]
        method: String,
        #[arg(long)]
        lrms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality metrics for a fusion result (JSON report, optional CSV row).
    Evaluate {
        #[arg(long)]
        fused: PathBuf,
        /// Ground truth; omit for the no-reference protocol.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        lrms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
        /// Append a row to this CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Row label for the CSV table.
        #[arg(long, default_value = "result")]
        label: String,
    },
    /// Per-pixel squared error map against a reference, as PGM + JSON.
    ErrorMap {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// ISODATA classification of a raster.
    Classify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 5)]
        max_iter: usize,
        /// Score label agreement against a previous classification PGM.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-clock comparison of fusion methods.
    Bench {
        /// Comma-separated method list.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        lrms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn model_config(cli: &Cli) -> Result<pansharp::hmcnn::HmcnnConfig, Error> {
    match &cli.config {
        Some(path) => Ok(TrainConfig::load(path)?.model),
        None => Ok(Default::default()),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Degrade { hrms, pan, scale, patch, stride, out } => {
            let index =
                harness::cmd_degrade(hrms, pan, ScaleFactor::new(*scale)?, *patch, *stride, out)?;
            if !cli.quiet {
                println!("wrote {} triples to {}", index.entries.len(), out.display());
            }
        }
        Command::Train => {
            let config = cli
                .config
                .as_deref()
                .ok_or_else(|| Error::Usage("train needs --config <file>".into()))?;
            let (_, manifest) = harness::cmd_train(config, cli.seed, cli.quiet)?;
            if !cli.quiet {
                println!(
                    "trained {} steps; weights at {}",
                    manifest.steps, manifest.weights_path
                );
            }
        }
        Command::Fuse { method, lrms, pan, weights, scale, out } => {
            let outcome = harness::cmd_fuse(
                method,
                lrms,
                pan,
                weights.as_deref(),
                ScaleFactor::new(*scale)?,
                &model_config(cli)?,
                out,
            )?;
            if !cli.quiet {
                println!(
                    "{method}: {:.3}s, {} degenerate pixels -> {}",
                    outcome.wall_seconds,
                    outcome.degenerate_pixels,
                    out.display()
                );
            }
        }
        Command::Evaluate { fused, reference, lrms, pan, scale, out, csv, label } => {
            let report = harness::cmd_evaluate(
                fused,
                reference.as_deref(),
                lrms,
                pan,
                ScaleFactor::new(*scale)?,
                out,
                csv.as_deref().map(|p| (p, label.as_str())),
            )?;
            if !cli.quiet {
                println!(
                    "d_lambda {:.4} d_s {:.4} qnr {:.4} -> {}",
                    report.d_lambda,
                    report.d_s,
                    report.qnr,
                    out.display()
                );
            }
        }
        Command::ErrorMap { fused, reference, out } => {
            let (_, mean) = harness::cmd_error_map(fused, reference, out)?;
            if !cli.quiet {
                println!("mean squared error {mean:.6} -> {}", out.display());
            }
        }
        Command::Classify { input, classes, max_iter, compare, out } => {
            let img = read_raster(input)?;
            let mut params = IsodataParams::defaults(img.range_span());
            params.k_init = *classes;
            params.max_iter = *max_iter;
            params.seed = cli.seed.unwrap_or(0);
            let outcome = harness::cmd_classify(input, &params, out, compare.as_deref())?;
            if !cli.quiet {
                match outcome.agreement {
                    Some(a) => println!(
                        "{} classes, agreement {a:.4} -> {}",
                        outcome.map.k_final,
                        out.display()
                    ),
                    None => println!("{} classes -> {}", outcome.map.k_final, out.display()),
                }
            }
        }
        Command::Bench { methods, lrms, pan, weights, scale, reps, out } => {
            if methods.is_empty() {
                return Err(Error::Usage(format!(
                    "--methods needs at least one of: {}",
                    harness::FUSE_METHODS.join(", ")
                )));
            }
            harness::cmd_bench(
                methods,
                lrms,
                pan,
                weights.as_deref(),
                ScaleFactor::new(*scale)?,
                &model_config(cli)?,
                *reps,
                out,
            )?;
            if !cli.quiet {
                println!("timing table -> {}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
