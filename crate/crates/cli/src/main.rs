use anyhow::{bail, Context, Result};
use ccfg_cli::commands::{self, DEFAULT_METHODS, DEFAULT_SCALES, EQUIV_TOLERANCE};
use ccfg_cli::config::RunConfig;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

/// Toy diffusion guidance laboratory: train a conditional model on the
/// three-node mixture and compare positive/negative guidance strategies.
#[derive(Parser)]
#[command(name = "ccfg", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the epsilon model and write a checkpoint plus loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples with the configured guidance method.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write a scatter plot colored by the oracle class.
        #[arg(long)]
        svg: bool,
        /// Dump per-chain state trajectories, one CSV per chain.
        #[arg(long)]
        trajectories: bool,
    },
    /// Evaluate methods across a shared guidance-scale grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated scales (default 1,2,4,7.5).
        #[arg(long)]
        scales: Option<String>,
        /// Comma-separated methods (default ncfg,dng,ccfg-neg).
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Exit nonzero if any cell failed (the sweep still completes).
        #[arg(long)]
        strict: bool,
    },
    /// Emit the contrastive coefficient and loss curves.
    Curves {
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        #[arg(long, default_value_t = 7.5)]
        omega: f64,
        /// Grid over squared prediction distance, start:end:step inclusive.
        #[arg(long, default_value = "0:50:0.5")]
        grid: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
    },
    /// Verify the noise-space/posterior-mean trajectory equivalence.
    Equiv {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 7.5)]
        omega: f64,
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        /// Guidance mode, pos or neg.
        #[arg(long, default_value = "neg")]
        mode: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 100)]
        nfe: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit nonzero if the deviation exceeds the tolerance.
        #[arg(long)]
        strict: bool,
        /// Negative control: keep the constant scale in the
        /// posterior-mean loop instead of the matched per-step one.
        #[arg(long)]
        wrong_rho: bool,
    },
}

fn load_config(path: &PathBuf, out: Option<PathBuf>, seed_train: Option<u64>, seed_sample: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut config = RunConfig::parse(&text)?;
    if let Some(dir) = out {
        config.output.dir = dir;
    }
    if let Some(seed) = seed_train {
        config.training.seed = seed;
    }
    if let Some(seed) = seed_sample {
        config.sampling.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|e| anyhow::anyhow!("scale '{part}': {e}"))
        })
        .collect()
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, out, seed } => {
            let cfg = load_config(&config, out, seed, None)?;
            let artifacts = commands::cmd_train(&cfg)?;
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("loss log:   {}", artifacts.loss_log.display());
        }
        Cmd::Sample {
            config,
            ckpt,
            out,
            seed,
            svg,
            trajectories,
        } => {
            let cfg = load_config(&config, out, None, seed)?;
            let path = commands::cmd_sample(&cfg, &ckpt, svg, trajectories)?;
            println!("samples: {}", path.display());
        }
        Cmd::Sweep {
            config,
            ckpt,
            scales,
            methods,
            out,
            seed,
            strict,
        } => {
            let cfg = load_config(&config, out, None, seed)?;
            let scales = match scales {
                Some(list) => parse_list(&list)?,
                None => DEFAULT_SCALES.to_vec(),
            };
            let methods: Vec<String> = match methods {
                Some(list) => list.split(',').map(|m| m.trim().to_string()).collect(),
                None => DEFAULT_METHODS.iter().map(|m| m.to_string()).collect(),
            };
            let outcome = commands::cmd_sweep(&cfg, &ckpt, &scales, &methods)?;
            println!("sweep: {}", outcome.path.display());
            if strict && outcome.failed_cells > 0 {
                bail!("{} sweep cell(s) failed", outcome.failed_cells);
            }
        }
        Cmd::Curves {
            tau,
            omega,
            grid,
            out,
            svg,
        } => {
            let path = commands::cmd_curves(tau, omega, &grid, &out, svg)?;
            println!("curves: {}", path.display());
        }
        Cmd::Equiv {
            ckpt,
            omega,
            tau,
            mode,
            seeds,
            nfe,
            out,
            strict,
            wrong_rho,
        } => {
            let report = commands::cmd_equiv(&ckpt, omega, tau, &mode, seeds, nfe, wrong_rho, &out)?;
            for (seed, dev) in report.per_seed.iter().enumerate() {
                println!("seed {seed}: max deviation {dev:.3e}");
            }
            println!("max over seeds: {:.3e}", report.max_deviation);
            if strict && report.max_deviation > EQUIV_TOLERANCE {
                bail!(
                    "max deviation {:.3e} exceeds tolerance {EQUIV_TOLERANCE:.0e}",
                    report.max_deviation
                );
            }
        }
    }
    Ok(())
}
