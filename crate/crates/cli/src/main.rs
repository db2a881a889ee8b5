use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use connrsfm_cli::{commands, config::RunConfig, CliError};

/// Conformal non-rigid structure-from-motion.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `threads` of the configuration.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `seed` of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic ball sequence: tracks and ground truth.
    Generate(Common),
    /// Reconstruct every frame from a track file.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Overrides `paths.tracks`.
        #[arg(long)]
        tracks: Option<PathBuf>,
        /// Overrides `paths.ground_truth`; needed for analytic warps.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Errors of a reconstruction, or a missing-rate sweep with `--sweep`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Overrides `paths.reconstruction`.
        #[arg(long)]
        recon: Option<PathBuf>,
        /// Overrides `paths.ground_truth`.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Generate, reconstruct and score every rate of `sweep.rates`.
        #[arg(long)]
        sweep: bool,
    },
    /// Identity gaps with and without second-order terms.
    VerifyTheorem(Common),
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick<'a>(
    flag: &'a Option<PathBuf>,
    file: &'a Option<PathBuf>,
    what: &'static str,
) -> Result<&'a Path> {
    flag.as_deref()
        .or(file.as_deref())
        .ok_or_else(|| CliError::MissingInput(what).into())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let written = match &cli.command {
        Command::Generate(common) => {
            let cfg = load(common)?;
            commands::generate(&cfg, &common.out)?
        }
        Command::Reconstruct {
            common,
            tracks,
            ground_truth,
        } => {
            let cfg = load(common)?;
            let tracks = pick(
                tracks,
                &cfg.paths.tracks,
                "track file (--tracks or paths.tracks)",
            )?;
            let gt = ground_truth
                .as_deref()
                .or(cfg.paths.ground_truth.as_deref());
            commands::reconstruct(&cfg, tracks, gt, &common.out)?
        }
        Command::Evaluate {
            common,
            recon,
            ground_truth,
            sweep,
        } => {
            let cfg = load(common)?;
            if *sweep {
                commands::sweep(&cfg, &common.out)?
            } else {
                let recon = pick(
                    recon,
                    &cfg.paths.reconstruction,
                    "reconstruction (--recon or paths.reconstruction)",
                )?;
                let gt = pick(
                    ground_truth,
                    &cfg.paths.ground_truth,
                    "ground truth (--ground-truth or paths.ground_truth)",
                )?;
                commands::evaluate(recon, gt, &common.out)?
            }
        }
        Command::VerifyTheorem(common) => {
            let cfg = load(common)?;
            commands::verify_theorem(&cfg, &common.out)?
        }
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_the_file() {
        let cli =
            Cli::try_parse_from(["connrsfm", "generate", "--seed", "5", "--threads", "2"]).unwrap();
        let Command::Generate(common) = cli.command else {
            panic!("wrong command")
        };
        let cfg = load(&common).unwrap();
        assert_eq!((cfg.seed, cfg.threads), (5, 2));
    }
}
