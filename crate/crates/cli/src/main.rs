use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmii_cli::{exit_code, parse_resolution};
use lmii_core::cost::ReportFormat;
use lmii_core::train::{SyntheticSpec, TrainOptions};
use lmii_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lmii",
    version,
    about = "Lightweight segmentation network: costs, gradient checks, toy training, inference"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Network configuration (JSON). Defaults to the built-in configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configuration seed (and the synthetic data seed for train-toy).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Input resolution for cost reports.
    #[arg(long, global = true, value_name = "WxH", default_value = "1024x512", value_parser = parse_resolution)]
    resolution: (usize, usize),
    /// Training iterations for train-toy.
    #[arg(long, global = true, value_name = "N", default_value_t = 500)]
    iterations: usize,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Test fixture: an op name whose backward rule is corrupted (grad-check),
    /// or `nan:<iter>` to poison a training batch (train-toy).
    #[arg(long, global = true, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter and MAC/FLOP report.
    Summary {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Finite-difference gradient checks at 64-bit.
    GradCheck {
        /// `all`, `ops`, `blocks`, or a single entry name.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Train on synthetic shapes and write history.csv, final.ckpt and samples.
    TrainToy,
    /// Segment one image with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Reflect-pad to a multiple of 8, then crop the prediction back.
        #[arg(long)]
        pad: bool,
    },
    /// Write cost_report.{json,txt} and config.json into --out.
    ExportReport,
}

fn threads() -> Result<()> {
    match std::env::var("LMII_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                log::info!("LMII_THREADS={n}; kernels run on the calling thread");
                Ok(())
            }
            _ => Err(Error::InvalidConfig(vec![format!(
                "LMII_THREADS must be a positive integer, got {v:?}"
            )])),
        },
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Summary { format } => {
            let cfg = lmii_cli::load_config(g.config.as_deref(), g.seed)?;
            let fmt = match format {
                Format::Text => ReportFormat::Text,
                Format::Json => ReportFormat::Json,
            };
            let s = lmii_cli::summary(&cfg, g.resolution, fmt)?;
            println!("{}", s.trim_end());
        }
        Command::ExportReport => {
            let cfg = lmii_cli::load_config(g.config.as_deref(), g.seed)?;
            for p in lmii_cli::export_report(&cfg, g.resolution, &g.out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::GradCheck { scope } => {
            let outcome = lmii_cli::grad_check(&scope, g.inject_fault.as_deref())?;
            print!("{}", outcome.table);
            if !outcome.failed.is_empty() {
                eprintln!("gradient check failed: {}", outcome.failed.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::TrainToy => {
            let cfg = match &g.config {
                Some(p) => lmii_cli::load_config(Some(p), g.seed)?,
                None => lmii_cli::load_config(None, g.seed)?.with_classes(3),
            };
            let mut opts = TrainOptions {
                iterations: g.iterations,
                data: SyntheticSpec {
                    classes: cfg.classes,
                    seed: g.seed.unwrap_or(SyntheticSpec::default().seed),
                    ..SyntheticSpec::default()
                },
                ..TrainOptions::default()
            };
            opts.schedule.max_iteration = g.iterations.max(1);
            if let Some(f) = &g.inject_fault {
                let it = f
                    .strip_prefix("nan:")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| {
                        Error::Usage(format!("train-toy fault must be nan:<iter>, got {f:?}"))
                    })?;
                opts.inject_nan_at = Some(it);
            }
            let t = std::time::Instant::now();
            let outcome = lmii_cli::train_toy(&cfg, &opts, &g.out, |row| {
                if let Some(m) = row.miou {
                    log::info!(
                        "iter {} loss {:.4} lr {:.4e} mIoU {m:.4} ({:.0}s)",
                        row.iter,
                        row.loss,
                        row.lr,
                        t.elapsed().as_secs_f64()
                    );
                }
            })?;
            match outcome.final_miou {
                Some(m) => println!(
                    "final mIoU {m:.4} after {} iterations ({:.1}s)",
                    outcome.history.len(),
                    t.elapsed().as_secs_f64()
                ),
                None => println!(
                    "no iterations run; wrote {}",
                    g.out.join("history.csv").display()
                ),
            }
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            pad,
        } => {
            let expected = match &g.config {
                Some(p) => Some(lmii_cli::load_config(Some(p), None)?),
                None => None,
            };
            let (w, h) = lmii_cli::infer(&checkpoint, &input, &output, expected.as_ref(), pad)?;
            println!("wrote {} ({w}x{h})", output.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
