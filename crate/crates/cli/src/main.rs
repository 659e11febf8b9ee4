use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ev_trilevel::experiments::{
    compare_profiles, emit_outputs, run_comparison, run_sweep, Method, RunOutputs, SweepSpec, SweptParameter,
};
use ev_trilevel::scenario::{load_scenario, Scenario, ScenarioConfig};
use ev_trilevel::trilevel::trilevel_solve;

mod checks;
mod paths;

/// Environment variable that overrides `--out`.
const OUT_ENV: &str = "EV_TRILEVEL_OUT";

#[derive(Parser)]
#[command(name = "ev-trilevel", version, about = "Trilevel EV charging pricing and supply-contract solver")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON). The bundled Sioux Falls / IEEE 33-bus setup if omitted.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory (overridden by EV_TRILEVEL_OUT).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run seed (annealing and, unless set separately, nonflexible profiles).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Absolute Wardrop gap tolerance in euros.
    #[arg(long, global = true)]
    tol_wardrop: Option<f64>,
    /// Middle-level tolerance ε_mid in euros.
    #[arg(long, global = true)]
    tol_mid: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any configuration key, e.g. `--set trilevel.restarts=20` or `--set ev_share=0.7`.
    #[arg(long = "set", global = true, value_name = "KEY=JSON")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// One trilevel solve.
    Solve,
    /// Parameter sweep described by a spec file.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },
    /// One run of a reference fixed-point method.
    Baseline {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        alpha_tilde: Option<f64>,
    },
    /// Trilevel against both baselines over a list of EV shares.
    Compare {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75])]
        ev_shares: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.03])]
        sc_alpha_tildes: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01])]
        pc_alpha_tildes: Vec<f64>,
    },
    /// Invariant suites: scheduler oracle, power flow, equilibrium uniqueness.
    Check {
        /// Random starts for the uniqueness probe.
        #[arg(long, default_value_t = 10)]
        starts: usize,
        /// Price scale for the uniqueness probe (default: half the upper bound).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Dump the enumerated path set.
    Paths,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Plug and charge.
    Pc,
    /// Grid-aware smart charging.
    Sc,
}

impl From<ModeArg> for Method {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pc => Method::LmpPc,
            ModeArg::Sc => Method::LmpSc,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    let scenario = build_scenario(&cli.common)?;
    let out = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| cli.common.out.clone());
    match cli.command {
        Command::Solve => solve(&scenario, &out),
        Command::Sweep { spec } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = SweepSpec::from_json(&text).with_context(|| format!("in {}", spec.display()))?;
            sweep(&scenario, &spec, &out)
        }
        Command::Baseline { mode, alpha_tilde } => {
            let spec = SweepSpec {
                parameter: SweptParameter::AlphaTilde,
                values: vec![alpha_tilde.unwrap_or(scenario.config.baseline.alpha_tilde)],
                method: mode.into(),
                fixed_fares: Default::default(),
            };
            sweep(&scenario, &spec, &out)
        }
        Command::Compare { ev_shares, sc_alpha_tildes, pc_alpha_tildes } => {
            let rows = run_comparison(&scenario, &ev_shares, &sc_alpha_tildes, &pc_alpha_tildes)?;
            for r in &rows {
                let at = r.alpha_tilde.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
                match &r.error {
                    Some(e) => println!("{:<8} alpha_tilde={at:<6} X_e={:<5} failed: {e}", r.method, r.ev_share),
                    None => println!(
                        "{:<8} alpha_tilde={at:<6} X_e={:<5} grid_cost={:.6} revenue={:.2} converged={}",
                        r.method, r.ev_share, r.grid_cost, r.charging_revenue, r.converged
                    ),
                }
            }
            let outputs = RunOutputs { comparison: Some(rows), ..Default::default() };
            emit(&outputs, &scenario, &out)
        }
        Command::Check { starts, alpha } => {
            let alpha = alpha.unwrap_or(0.5 * scenario.trilevel.alpha_max);
            let report = checks::run_all(&scenario, starts, alpha)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("check.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
            for line in report.lines() {
                println!("{line}");
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Paths => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("paths.csv");
            let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
            paths::write_paths(file, &scenario)?;
            let set = scenario.problem.paths();
            println!("{} routes, {} class paths -> {}", set.routes.len(), set.len(), path.display());
            for w in &set.warnings {
                println!("warning: {w}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn build_scenario(common: &Common) -> Result<Scenario> {
    let (config, base) = match &common.scenario {
        Some(path) => {
            let loaded = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
            (loaded.config, path.parent().unwrap_or(Path::new(".")).to_path_buf())
        }
        None => (ScenarioConfig::default(), PathBuf::from(".")),
    };
    let mut value = serde_json::to_value(&config)?;
    for item in &common.overrides {
        let (key, raw) = item.split_once('=').with_context(|| format!("override `{item}` is not KEY=VALUE"))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
        set_path(&mut value, key, parsed)?;
    }
    if let Some(seed) = common.seed {
        value["seed"] = seed.into();
    }
    if let Some(tol) = common.tol_wardrop {
        value["wardrop"]["tol"] = tol.into();
    }
    if let Some(tol) = common.tol_mid {
        value["trilevel"]["eps_mid"] = tol.into();
    }
    let config = ScenarioConfig::from_json(&value.to_string())?;
    Ok(Scenario::build(config, &base)?)
}

fn set_path(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Some(obj) = node.as_object_mut() else { bail!("`{}` is not a section", parts[..i].join(".")) };
        if i + 1 == parts.len() {
            obj.insert((*part).into(), value);
            return Ok(());
        }
        node = obj.entry(*part).or_insert_with(|| serde_json::json!({}));
        if node.is_null() {
            *node = serde_json::json!({});
        }
    }
    bail!("empty override key")
}

fn solve(scenario: &Scenario, out: &Path) -> Result<ExitCode> {
    let model = scenario.model()?;
    let sol = trilevel_solve(&model, &scenario.trilevel)?;
    let profiles = compare_profiles(scenario, sol.needs())?;
    println!(
        "P* = {:.3} kW, alpha* = {:.6e}, Pi_up = {:.4}, Pi_mid = {:.4}, outer iterations = {}",
        sol.threshold, sol.alpha, sol.payoffs.pi_up, sol.payoffs.pi_mid, sol.bounding.outer_iterations
    );
    for (id, l) in scenario.hub_ids().iter().zip(sol.needs()) {
        println!("  L_{id} = {l:.3} kWh");
    }
    let outputs = RunOutputs { solve: Some((sol, profiles)), ..Default::default() };
    emit(&outputs, scenario, out)
}

fn sweep(scenario: &Scenario, spec: &SweepSpec, out: &Path) -> Result<ExitCode> {
    let results = run_sweep(scenario, spec)?;
    let mut failed = 0;
    for p in &results.points {
        let r = &p.row;
        match &r.error {
            Some(e) => {
                failed += 1;
                println!("{} = {}: failed: {e}", spec.parameter.label(), r.param_value);
            }
            None => println!(
                "{} = {}: Pi_up = {}, Pi_mid = {}, grid_cost = {:.6}, revenue = {:.2}",
                spec.parameter.label(),
                r.param_value,
                r.pi_up.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                r.pi_mid.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                r.grid_cost.unwrap_or(f64::NAN),
                r.revenue.unwrap_or(f64::NAN),
            ),
        }
    }
    let outputs = RunOutputs { sweep: Some(results), ..Default::default() };
    emit(&outputs, scenario, out)?;
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn emit(outputs: &RunOutputs, scenario: &Scenario, out: &Path) -> Result<ExitCode> {
    let manifest = emit_outputs(outputs, scenario, out)?;
    println!("wrote {} files and manifest.json to {}", manifest.files.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
