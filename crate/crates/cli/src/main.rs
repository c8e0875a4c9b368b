//! `ctsnm`: batch frontend for simulation, mimicking processes, g-estimation,
//! G-computation, convergence studies and mimicry validation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use config::{parse_floats, parse_levels, RunConfig};

/// Comma list of numbers, kept as one clap value.
#[derive(Clone, Debug)]
struct Floats(Vec<f64>);

#[derive(Clone, Debug)]
struct Levels(Vec<u32>);

fn floats(s: &str) -> Result<Floats, String> {
    parse_floats(s).map(Floats)
}

fn levels(s: &str) -> Result<Levels, String> {
    parse_levels(s).map(Levels)
}

#[derive(Parser, Debug)]
#[command(name = "ctsnm", version, about = "Mimicking processes and g-estimation for continuous-time structural nested models")]
struct Cli {
    /// Seed for every stochastic command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    overwrite: bool,
    /// JSON run configuration; flags take precedence over its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset with counterfactual oracles.
    Simulate(SimulateArgs),
    /// Solve the mimicking equation for every subject of a dataset.
    Mimic(ModelArgs),
    /// Estimate psi by score-equation search with a test-inversion interval.
    Estimate(EstimateArgs),
    /// Model-free test of no treatment effect.
    Test(TestArgs),
    /// G-computation on a two-decision treatment tree.
    Gcomp(GcompArgs),
    /// Discretization convergence study on the Gaussian onset scenario.
    Converge(ConvergeArgs),
    /// Stratified KS check of X_psi(t) against simulated Y^(t).
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Built-in name (gvhd, pcp, tree, null) or scenario JSON path.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Counterfactual times, comma separated (default: decision times).
    #[arg(long, value_parser = floats)]
    times: Option<Floats>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shift-model JSON (default: the dataset scenario's family).
    #[arg(long)]
    model: Option<PathBuf>,
    /// psi values, comma separated (default: the scenario's true psi).
    #[arg(long, value_parser = floats, allow_hyphen_values = true)]
    psi: Option<Floats>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Level of the test-inversion interval is 1 - alpha.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    search_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    search_hi: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct GcompArgs {
    /// Built-in tree (figure1).
    #[arg(long)]
    builtin: Option<String>,
    /// Tree JSON path.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Build the tree from a simulated two-decision dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// e.g. `azt=1,proph=1`; `obs` follows the observed decision.
    #[arg(long)]
    regime: Option<String>,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    /// `2..8` or a comma list.
    #[arg(long, value_parser = levels)]
    levels: Option<Levels>,
    /// Subjects in the panel.
    #[arg(long)]
    subjects: Option<usize>,
    /// Skip the Gronwall bound.
    #[arg(long)]
    no_bound: bool,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Simulate instead of reading --data.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Check times, comma separated (default: quarter points of the horizon).
    #[arg(long, value_parser = floats)]
    times: Option<Floats>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Discretization level of the strata.
    #[arg(long)]
    level: Option<u32>,
    /// Levels for the sensitivity sweep, `1..3` or a comma list.
    #[arg(long, value_parser = levels)]
    sweep: Option<Levels>,
    /// Smallest stratum sample tested.
    #[arg(long)]
    min_size: Option<usize>,
}

fn put<T: serde::Serialize>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), serde_json::to_value(v).expect("flag serializes"));
    }
}

fn model_flags(m: &mut Map<String, Value>, a: &ModelArgs) {
    put(m, "data", a.data.as_ref());
    put(m, "model", a.model.as_ref());
    put(m, "psi", a.psi.as_ref().map(|v| &v.0));
    put(m, "atol", a.atol);
    put(m, "rtol", a.rtol);
}

fn flag_overlay(cli: &Cli) -> Map<String, Value> {
    let mut m = Map::new();
    put(&mut m, "seed", cli.seed);
    put(&mut m, "out", cli.out.as_ref());
    put(&mut m, "threads", cli.threads);
    if cli.overwrite {
        m.insert("overwrite".into(), Value::Bool(true));
    }
    match &cli.command {
        Command::Simulate(a) => {
            put(&mut m, "scenario", a.scenario.as_ref());
            put(&mut m, "n", a.n);
            put(&mut m, "times", a.times.as_ref().map(|v| &v.0));
        }
        Command::Mimic(a) => model_flags(&mut m, a),
        Command::Estimate(a) => {
            model_flags(&mut m, &a.model);
            put(&mut m, "alpha", a.alpha);
            put(&mut m, "search_lo", a.search_lo);
            put(&mut m, "search_hi", a.search_hi);
            put(&mut m, "grid_points", a.grid_points);
        }
        Command::Test(a) => {
            put(&mut m, "data", a.data.as_ref());
            put(&mut m, "alpha", a.alpha);
        }
        Command::Gcomp(a) => {
            put(&mut m, "builtin", a.builtin.as_ref());
            put(&mut m, "tree", a.tree.as_ref());
            put(&mut m, "data", a.data.as_ref());
            put(&mut m, "regime", a.regime.as_ref());
        }
        Command::Converge(a) => {
            put(&mut m, "levels", a.levels.as_ref().map(|v| &v.0));
            put(&mut m, "subjects", a.subjects);
            if a.no_bound {
                m.insert("bound".into(), Value::Bool(false));
            }
        }
        Command::Validate(a) => {
            model_flags(&mut m, &a.model);
            put(&mut m, "scenario", a.scenario.as_ref());
            put(&mut m, "n", a.n);
            put(&mut m, "times", a.times.as_ref().map(|v| &v.0));
            put(&mut m, "alpha", a.alpha);
            put(&mut m, "level", a.level);
            put(&mut m, "sweep", a.sweep.as_ref().map(|v| &v.0));
            put(&mut m, "min_size", a.min_size);
        }
    }
    m
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = RunConfig::resolve(cli.config.as_deref(), flag_overlay(&cli))
        .map_err(commands::CliError::Config)
        .and_then(|cfg| commands::run(&cli.command.name(), cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Mimic(_) => "mimic",
            Command::Estimate(_) => "estimate",
            Command::Test(_) => "test",
            Command::Gcomp(_) => "gcomp",
            Command::Converge(_) => "converge",
            Command::Validate(_) => "validate",
        }
        .to_string()
    }
}
