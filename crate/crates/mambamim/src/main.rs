use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mambamim::commands::{self, AblationAxis};
use mambamim::config::RunConfig;

/// Masked volume pre-training with hybrid CNN / state-space networks.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model seed (overrides seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Further overrides as `--key value`, e.g. `--mask.ratio 0.5`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        // flags written after the first override land in the trailing list
        let mut config = self.config.clone();
        let mut rest = Vec::with_capacity(self.overrides.len());
        let mut it = self.overrides.iter();
        while let Some(a) = it.next() {
            match a.as_str() {
                "--config" => config = it.next().map(PathBuf::from),
                "--out" => rest.extend(["--out_dir".to_string()].into_iter().chain(it.next().cloned())),
                _ => rest.push(a.clone()),
            }
        }
        let mut cfg = match &config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&rest)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic volumes; writes metrics.tsv and checkpoint.mmim
    Pretrain(Common),
    /// Write input, masked input and reconstruction volumes
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain once per setting of an axis: mask_ratio, scan_order or fill
    Ablate {
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    AblationAxis::parse(s).ok_or_else(|| format!("unknown axis {s:?}; expected mask_ratio, scan_order or fill"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = common.resolve()?;
            let s = commands::pretrain(&cfg)?;
            if let (Some(a), Some(b)) = (s.first_loss(), s.final_loss()) {
                println!("steps {}  first loss {a:.6}  final loss {b:.6}", s.records.len());
            }
            println!("metrics    {}", s.metrics.display());
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Reconstruct { checkpoint, common } => {
            let cfg = common.resolve()?;
            let out = commands::reconstruct(&cfg, &checkpoint)?;
            println!("masked mse {:.6}", out.masked_loss);
            for p in [&out.input, &out.masked_input, &out.reconstruction] {
                println!("{}", p.display());
            }
        }
        Command::Gradcheck { corrupt_grad, common } => {
            let cfg = common.resolve()?;
            let report = commands::gradcheck(&cfg, corrupt_grad.as_deref())?;
            print!("{}", commands::format_gradcheck(&report));
            if !report.passed() {
                for g in report.failures() {
                    eprintln!("gradient mismatch in {} (max rel err {:e})", g.name, g.max_rel_err);
                }
                return Ok(false);
            }
        }
        Command::Ablate { axis, common } => {
            let cfg = common.resolve()?;
            let (rows, path) = commands::ablate(&cfg, axis)?;
            for r in &rows {
                println!("{}\t{:.6}\t{:.6}", r.setting, r.first_loss, r.final_loss);
            }
            println!("summary {}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
