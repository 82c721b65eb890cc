use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use uavrel_cli::commands::{self, TerrainRequest, EXIT_ERROR};
use uavrel_core::monte_carlo::McConfig;

#[derive(Parser)]
#[command(name = "uavrel", version, about = "Reliability prediction for single-UAV two-way-ranging positioning")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the reliability map; exits 2 when the requirement is not met.
    Predict {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        dem: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find hazardous areas in a map and vote on the SPs behind them.
    Enhance {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        dem: PathBuf,
        /// Signed map written by `predict`.
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo trials at one position.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        dem: PathBuf,
        /// Trial configuration JSON; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic terrain as an ESRI ASCII grid.
    SynthDem {
        /// Terrain JSON: a full grid spec, or a shape fitted to `--scenario`.
        #[arg(long)]
        terrain: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        cell_size: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory of the scenario/DEM/result store.
        #[arg(long, default_value = "uavrel-store")]
        store: PathBuf,
    },
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Predict { scenario, dem, out } => {
            let s = commands::read_scenario(&scenario)?;
            let d = commands::read_dem(&dem, &s)?;
            let map = commands::predict_to_dir(&s, &d, &out, None)?;
            print!("{}", map.summary().render());
            Ok(commands::exit_code(&map))
        }
        Command::Enhance { scenario, dem, map, out } => {
            let s = commands::read_scenario(&scenario)?;
            let d = commands::read_dem(&dem, &s)?;
            let m = commands::read_map(&map)?;
            let report = commands::enhance_to_dir(&s, &d, &m, &out)?;
            print!("{}", report.guidance());
            Ok(commands::EXIT_PASS)
        }
        Command::Simulate { scenario, dem, config, seed, trials, out } => {
            let s = commands::read_scenario(&scenario)?;
            let d = commands::read_dem(&dem, &s)?;
            let mut cfg: McConfig = match config {
                Some(path) => commands::read_json(&path)?,
                None => McConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(trials) = trials {
                cfg.trials = trials;
            }
            let report = commands::simulate_to_dir(&s, &d, &cfg, &out)?;
            print!("{}", report.summary().render());
            Ok(commands::EXIT_PASS)
        }
        Command::SynthDem { terrain, scenario, cell_size, seed, out } => {
            let request: TerrainRequest = commands::read_json(&terrain)?;
            let s = scenario.as_deref().map(commands::read_scenario).transpose()?;
            let grid = commands::synth_dem_to_file(request, s.as_ref(), cell_size, seed, &out)?;
            println!("wrote {} ({} x {} cells)", out.display(), grid.n_cols(), grid.n_rows());
            Ok(commands::EXIT_PASS)
        }
        Command::Serve { bind, store } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(uavrel_cli::service::serve(bind, &store))?;
            Ok(commands::EXIT_PASS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
