use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use surfnet::pricer::InstrumentKind;
use surfnet_cli::commands::{self, SurfaceSource, DEFAULT_MODES};
use surfnet_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "surfnet", version, about = "Volatility-surface VAE and neural option pricer")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; the built-in desk profile when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    AmericanPut,
    AsianCall,
    AsianPut,
}

impl From<Kind> for InstrumentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::AmericanPut => InstrumentKind::AmericanPut,
            Kind::AsianCall => InstrumentKind::AsianCall,
            Kind::AsianPut => InstrumentKind::AsianPut,
        }
    }
}

fn kinds(kind: Option<Kind>) -> Vec<InstrumentKind> {
    kind.map_or_else(|| InstrumentKind::ALL.to_vec(), |k| vec![k.into()])
}

#[derive(Subcommand)]
enum Command {
    /// Build arbitrage-checked surfaces from chain CSVs or the synthetic generator.
    BuildSurfaces {
        /// Generate this many synthetic surfaces instead of reading chains.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Chain CSV directory; defaults to `<data_dir>/chains`.
        #[arg(long, conflicts_with = "synthetic")]
        chains: Option<PathBuf>,
    },
    /// Write Black-Scholes option chains priced off synthetic surfaces.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Singular value spectrum and leading modes of the surface matrix.
    Svd {
        #[arg(long, default_value_t = DEFAULT_MODES)]
        modes: usize,
    },
    /// Oracle-priced train/test records.
    GenPrices {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Run one training stage.
    Train {
        #[arg(value_enum)]
        stage: TrainStage,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Compare the trained pricer with oracle prices on the test records.
    Evaluate {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Price one option from a surface file.
    Predict {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        surface: PathBuf,
        /// Log-moneyness ln(K/S).
        #[arg(long, allow_hyphen_values = true)]
        k: f64,
        /// Maturity in years.
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        spot: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Vae,
    Mlp,
    Finetune,
}

fn load_config(g: &Global) -> CliResult<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => match g.profile {
            Profile::Desk => RunConfig::desk(),
            Profile::Paper => RunConfig::paper(),
        },
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &g.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &g.model_dir {
        cfg.paths.model_dir = d.clone();
    }
    if let Some(d) = &g.output_dir {
        cfg.paths.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::BuildSurfaces { synthetic, chains } => {
            let source = match (synthetic, chains) {
                (Some(n), _) => SurfaceSource::Synthetic(n),
                (None, Some(dir)) => SurfaceSource::Chains(dir),
                (None, None) => SurfaceSource::Chains(commands::Layout::new(&cfg).chains_dir()),
            };
            let report = commands::build_surfaces(&cfg, &source)?;
            println!("built {} surfaces, excluded {}", report.n_surfaces, report.excluded.len());
        }
        Command::Synth { n } => {
            let n = n.unwrap_or(cfg.data.n_synthetic);
            let quotes = commands::synth_chains(&cfg, n)?;
            println!("wrote {quotes} quotes for {n} dates");
        }
        Command::Svd { modes } => {
            let spectrum = commands::svd(&cfg, modes)?;
            if let Some(r) = spectrum.iter().find(|r| r.rank == 10.min(spectrum.len())) {
                println!("rank {} cumulative energy {:.8}", r.rank, r.cumulative_energy);
            }
        }
        Command::GenPrices { kind } => {
            for k in kinds(kind) {
                commands::gen_prices(&cfg, &[k])?;
                println!("priced {k} records");
            }
        }
        Command::Train { stage, kind } => match stage {
            TrainStage::Vae => {
                let log = commands::train_vae_stage(&cfg)?;
                if let (Some(a), Some(b)) = (log.initial(), log.last()) {
                    println!("vae train loss {:.6e} -> {:.6e}, test {:.6e}", a.train_loss, b.train_loss, b.test_loss);
                }
            }
            TrainStage::Mlp => {
                for k in kinds(kind) {
                    let log = commands::train_mlp_stage(&cfg, k)?;
                    if let Some(b) = log.last() {
                        println!("{k} mlp train loss {:.6e}, test {:.6e}", b.train_loss, b.test_loss);
                    }
                }
            }
            TrainStage::Finetune => {
                for k in kinds(kind) {
                    let (log, drift) = commands::fine_tune_stage(&cfg, k)?;
                    if let Some(b) = log.last() {
                        println!(
                            "{k} fine-tune train loss {:.6e}, test {:.6e}; reconstruction {:.3e} -> {:.3e}",
                            b.train_loss, b.test_loss, drift.test_loss_before, drift.test_loss_after
                        );
                    }
                }
            }
        },
        Command::Evaluate { kind } => {
            for k in kinds(kind) {
                let r = commands::evaluate(&cfg, k)?;
                println!(
                    "{k}: n={} mae={:.5} rmse={:.5} r2={:.5} mean_err={:.2e} max_abs={:.5} at (k={:.3}, T={:.3})",
                    r.n, r.mae, r.rmse, r.r2, r.mean_error, r.max_abs_error, r.worst_k, r.worst_t
                );
            }
        }
        Command::Predict { kind, surface, k, t, spot } => {
            let price = commands::predict(&cfg, kind.into(), &surface, k, t, spot)?;
            println!("{price}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit(&e)
        }
    }
}

fn exit(e: &CliError) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
