//! `rmm`: command-line driver for every pipeline stage.

mod commands;
mod outdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rmm_core::config::KEYS;
use rmm_core::RunConfig;

use crate::commands::CliError;

fn keys_help() -> String {
    let mut s = String::from("Configuration keys (set with --set key=value or a --config file):\n");
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    for k in KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        s.push_str(&format!(
            "  {:width$}  default {default}  [{}]  {}\n",
            k.key,
            k.source.label(),
            k.help
        ));
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "rmm", version, about = "Blind face restoration with memorized modulation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed; overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the procedural face set with its component manifest.
    #[command(after_help = keys_help())]
    SynthData {
        out: PathBuf,
        /// Overrides `data.count`.
        #[arg(long)]
        count: Option<usize>,
        /// Overrides `data.resolution`.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Degrade PNG images with sampled blur, downsampling, noise and compression.
    #[command(after_help = keys_help())]
    Degrade {
        /// A PNG file or a directory of PNG files.
        input: PathBuf,
        out: PathBuf,
    },
    /// Train generator, discriminators and wavelet memory.
    #[command(after_help = keys_help())]
    Train {
        out: PathBuf,
        /// Dataset directory from `synth-data`; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Restore low-quality images with a trained checkpoint.
    #[command(after_help = keys_help())]
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Memory bank; defaults to the path recorded in the checkpoint.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// A PNG file or a directory of PNG files.
        input: PathBuf,
        out: PathBuf,
    },
    /// Wavelet packet decomposition of one image.
    #[command(after_help = keys_help())]
    Wpd {
        #[arg(long, default_value_t = 2)]
        levels: usize,
        input: PathBuf,
        out: PathBuf,
    },
    /// Write the per-block attention maps of one restoration pass.
    #[command(after_help = keys_help())]
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        input: PathBuf,
        out: PathBuf,
    },
    /// Inspect a memory bank.
    #[command(after_help = keys_help())]
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// PSNR, SSIM and MS-SSIM between same-named images in two directories.
    #[command(after_help = keys_help())]
    Metrics {
        restored: PathBuf,
        reference: PathBuf,
        /// Also write the machine-readable lines here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable module.
    #[command(after_help = keys_help())]
    Gradcheck {
        /// Coordinates per case.
        #[arg(long, default_value_t = 50)]
        coords: usize,
    },
}

#[derive(Debug, Subcommand)]
enum MemoryAction {
    /// Write keys, values and slot table.
    Dump { bank: PathBuf, out: PathBuf },
    /// Print occupancy and similarity summaries.
    Stats {
        bank: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn effective_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = effective_config(&cli.common)?;
    match cli.command {
        Command::SynthData { out, count, resolution } => {
            if let Some(n) = count {
                cfg.set("data.count", &n.to_string())?;
            }
            if let Some(r) = resolution {
                cfg.set("data.resolution", &r.to_string())?;
            }
            commands::synth_data(&cfg, &out)
        }
        Command::Degrade { input, out } => commands::degrade(&cfg, &input, &out),
        Command::Train { out, data, steps } => {
            if let Some(s) = steps {
                cfg.set("train.steps", &s.to_string())?;
            }
            commands::train(&cfg, data.as_deref(), &out)
        }
        Command::Restore {
            checkpoint,
            bank,
            input,
            out,
        } => commands::restore(&cfg, &checkpoint, bank.as_deref(), &input, &out),
        Command::Wpd { levels, input, out } => commands::wpd(&cfg, levels, &input, &out),
        Command::DumpAttn {
            checkpoint,
            bank,
            input,
            out,
        } => commands::dump_attn(&cfg, &checkpoint, bank.as_deref(), &input, &out),
        Command::Memory { action } => match action {
            MemoryAction::Dump { bank, out } => commands::memory_dump(&cfg, &bank, &out),
            MemoryAction::Stats { bank, bins } => commands::memory_stats(&bank, bins),
        },
        Command::Metrics {
            restored,
            reference,
            out,
        } => commands::metrics(&restored, &reference, out.as_deref()),
        Command::Gradcheck { coords } => commands::gradcheck(&cfg, coords),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("ERR:{}: {}", e.code(), e.to_string().replace('\n', " "));
            if e.is_usage() {
                let _ = <Cli as clap::CommandFactory>::command().print_help();
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
