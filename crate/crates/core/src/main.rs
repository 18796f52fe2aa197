use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use storage_agg::game::SearchSettings;
use storage_agg::scenario::{self, Command, RunSettings};
use storage_agg::solver::SolverSettings;
use storage_agg::welfare::ComparisonRow;
use storage_agg::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Validate,
    Clear,
    Stackelberg,
    Cooperate,
    Bargain,
    Social,
    Mpmp,
    Compare,
    Sweep,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Validate => Command::Validate,
            Cmd::Clear => Command::Clear,
            Cmd::Stackelberg => Command::Stackelberg,
            Cmd::Cooperate => Command::Cooperate,
            Cmd::Bargain => Command::Bargain,
            Cmd::Social => Command::Social,
            Cmd::Mpmp => Command::Mpmp,
            Cmd::Compare => Command::Compare,
            Cmd::Sweep => Command::Sweep,
        }
    }
}

/// Storage aggregator market simulator.
#[derive(Debug, Parser)]
#[command(name = "aggsim", version)]
struct Cli {
    command: Cmd,
    /// Scenario JSON file.
    scenario: PathBuf,
    /// For `clear`: clear the market with every unit idle.
    #[arg(long)]
    zero_storage: bool,
    /// KKT tolerance of every inner solve.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Final step of the leader price search.
    #[arg(long, default_value_t = 1e-7)]
    grid_res: f64,
    /// Random starts of the leader price search.
    #[arg(long, default_value_t = 6)]
    multistart: usize,
    /// Budget of leader-objective evaluations.
    #[arg(long, default_value_t = 1_000_000)]
    max_evals: usize,
    /// Discount factor, overriding the scenario.
    #[arg(long)]
    delta: Option<f64>,
    /// Directory for the JSON record and CSV files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seed of the randomized search starts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resolution of rasters, frontiers and curves.
    #[arg(long, default_value_t = 41)]
    points: usize,
}

fn run(cli: &Cli) -> Result<(), Error> {
    let scenario = scenario::load_scenario(&cli.scenario).map_err(|e| Error::Stage {
        stage: "load".into(),
        source: Box::new(e),
    })?;
    let settings = RunSettings {
        search: SearchSettings {
            grid_resolution: cli.grid_res,
            multistart: cli.multistart,
            max_evaluations: cli.max_evals,
            seed: cli.seed,
            solver: SolverSettings::with_tolerance(cli.tol),
        },
        discount: cli.delta,
        zero_storage: cli.zero_storage,
        points: cli.points,
    };
    let command = Command::from(cli.command);
    let record = scenario::run_pipeline(&scenario, command, &settings, cli.out_dir.as_deref())?;
    if command == Command::Compare {
        let rows: Vec<ComparisonRow> = serde_json::from_value(record.outputs.clone()).expect("comparison rows");
        print!("{}", scenario::format_comparison(&rows));
    } else {
        for (k, v) in &record.summary {
            println!("{k} = {v:.6}");
        }
    }
    for f in &record.files {
        println!("wrote {f}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
