//! Command-line driver: argument parsing, config loading and dispatch to
//! the workdir stages.

pub mod config;
pub mod error;
pub mod stages;
pub mod workdir;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use igr_core::eval::format_table;
use igr_core::{Arm, PipelineConfig, ProviderMode};

pub use error::{CliError, CliResult};
use stages::Ctx;
use workdir::Workdir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Providers {
    Mock,
    Live,
}

#[derive(Debug, Parser)]
#[command(name = "igr", version, about = "Interest-aware generative recommendation pipeline")]
pub struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed and every seed derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Rerun stages even when inputs are unchanged, and accept artifacts
    /// produced under a different configuration.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum, default_value = "mock")]
    pub providers: Providers,
    /// Ablation arm: full, no_mlim, no_ieid, no_interest_reward, sft_only.
    #[arg(long, global = true)]
    pub arm: Option<String>,
    /// Overrides paths.workdir.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Read review and metadata files into the workdir corpus.
    Ingest,
    /// Generate the synthetic corpus.
    Synth,
    /// Mine item interests with the configured providers.
    Mine,
    /// Embed interest text and item text.
    Embed,
    /// Train codebooks and assign semantic IDs.
    Tokenize,
    /// Supervised training of the generative model.
    Sft,
    /// GRPO fine-tuning from the SFT checkpoint.
    Rl,
    /// Test-split metrics for one arm.
    Eval,
    /// Train and evaluate ablation arms (all of them unless --arm is given).
    Ablate,
    /// Evaluate a trained model on a second corpus.
    Transfer,
    /// Every stage in order for one arm.
    All,
}

impl Cli {
    fn arm(&self) -> CliResult<Option<Arm>> {
        match &self.arm {
            None => Ok(None),
            Some(name) => Arm::parse(name).map(Some).ok_or_else(|| {
                let known: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
                CliError::Config(vec![format!("unknown arm `{name}`; expected one of {}", known.join(", "))])
            }),
        }
    }

    /// The effective configuration after file loading and flag overrides.
    pub fn resolve_config(&self) -> CliResult<PipelineConfig> {
        let cfg = match &self.config {
            Some(p) => config::load(p)?,
            None => PipelineConfig::default(),
        };
        let seed = self.seed.unwrap_or(cfg.seed);
        let mut cfg = cfg.with_seed(seed);
        if let Some(w) = &self.workdir {
            cfg.paths.workdir = w.clone();
        }
        config::check(&cfg)?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let arm = cli.arm()?;
    let cfg = cli.resolve_config()?;
    let wd = Workdir::open(&cfg.paths.workdir)?;
    let ctx = Ctx {
        cfg: &cfg,
        wd: &wd,
        force: cli.force,
        mode: match cli.providers {
            Providers::Mock => ProviderMode::Mock,
            Providers::Live => ProviderMode::Live,
        },
    };
    let one = arm.unwrap_or(Arm::Full);
    let ran = match cli.command {
        Command::Ingest => stages::ingest_files(&ctx)?,
        Command::Synth => stages::synth(&ctx)?,
        Command::Mine => stages::mine_stage(&ctx)?,
        Command::Embed => stages::embed_stage(&ctx)?,
        Command::Tokenize => stages::tokenize_stage(&ctx)?,
        Command::Sft => stages::sft(&ctx, one.sid_source())?,
        Command::Rl => stages::rl(&ctx, one)?,
        Command::Eval => {
            println!("{}", format_table(&[stages::eval(&ctx, one)?]));
            return Ok(());
        }
        Command::Ablate => {
            let arms = arm.map_or(Arm::ALL.to_vec(), |a| vec![a]);
            stages::ablate(&ctx, &arms)?;
            return Ok(());
        }
        Command::Transfer => {
            println!("{}", format_table(&[stages::transfer(&ctx, one)?]));
            return Ok(());
        }
        Command::All => {
            println!("{}", format_table(&[stages::all(&ctx, one)?]));
            return Ok(());
        }
    };
    if ran {
        eprintln!("done");
    } else {
        eprintln!("up to date, skipped");
    }
    Ok(())
}
