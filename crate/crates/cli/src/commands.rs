use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde_json::{json, Value};

use ctsnm_core::discrete_mimic::onset_panel_study;
use ctsnm_core::gcomp::{g_compute, naive_compare, Regime, StratumSpec, TreatmentTree};
use ctsnm_core::inference::{estimate_psi, test_no_effect, ScoreSpec, SearchOptions};
use ctsnm_core::mimic_ode::{solve_backward, SolverOptions};
use ctsnm_core::numeric::norm_quantile;
use ctsnm_core::shift_models::ShiftModel;
use ctsnm_core::simulate::{simulate_observed, Dataset, Scenario};
use ctsnm_core::validate::{mimicry_suite, strata_sweep};
use ctsnm_core::Error;

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: a required input is missing.
    Usage(String),
    /// Invalid configuration or unreadable configuration inputs.
    Config(anyhow::Error),
    Module(Error),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Config(e) => write!(f, "configuration: {e:#}"),
            CliError::Module(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) | CliError::Module(Error::Config(_)) => 3,
            CliError::Io(_) | CliError::Module(Error::Io(_) | Error::Csv(_) | Error::Json(_)) => 4,
            CliError::Module(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Module(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Module(Error::Json(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Result files of one command, checked up front so nothing is half written.
struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn prepare(dir: &Path, overwrite: bool, names: &[&str]) -> Result<Self> {
        fs::create_dir_all(dir)?;
        if !overwrite {
            if let Some(name) = names.iter().find(|n| dir.join(n).exists()) {
                return Err(CliError::Io(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!("{} exists; pass --overwrite to replace it", dir.join(name).display()),
                )));
            }
        }
        Ok(Outputs { dir: dir.to_path_buf() })
    }

    fn file(&self, name: &str) -> Result<BufWriter<fs::File>> {
        Ok(BufWriter::new(fs::File::create(self.dir.join(name))?))
    }

    fn json(&self, name: &str, value: &Value) -> Result<()> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub fn run(command: &str, cfg: RunConfig) -> Result<()> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(anyhow::anyhow!("thread pool: {e}")))?;
    }
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let meta_name = format!("{command}.meta.json");
    let out = match command {
        "simulate" => simulate(&cfg, &meta_name)?,
        "mimic" => mimic(&cfg, &meta_name)?,
        "estimate" => estimate(&cfg, &meta_name)?,
        "test" => test(&cfg, &meta_name)?,
        "gcomp" => gcomp(&cfg, &meta_name)?,
        "converge" => converge(&cfg, &meta_name)?,
        "validate" => validate(&cfg, &meta_name)?,
        other => return Err(usage(format!("unknown command {other}"))),
    };
    // Timestamps live only in the sidecar so result files stay byte-identical.
    out.json(
        &meta_name,
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": started,
            "elapsed_seconds": clock.elapsed().as_secs_f64(),
            "config": cfg,
        }),
    )
}

fn require_seed(cfg: &RunConfig, command: &str) -> Result<u64> {
    cfg.seed.ok_or_else(|| usage(format!("{command} is stochastic and needs --seed")))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data.as_ref().ok_or_else(|| usage("no dataset given (--data)"))?;
    Ok(Dataset::read_dir(dir)?)
}

fn load_model(cfg: &RunConfig, scenario: &Scenario) -> Result<ShiftModel> {
    match &cfg.model {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(anyhow::anyhow!("reading model {}: {e}", path.display())))?;
            let model = ShiftModel::from_json(&text).map_err(|e| CliError::Config(anyhow::anyhow!("model {}: {e}", path.display())))?;
            Ok(match &cfg.psi {
                Some(psi) => model.with_psi(psi.clone()),
                None => model,
            })
        }
        None => Ok(scenario.shift_model(cfg.psi.clone().unwrap_or_else(|| scenario.true_psi.clone()))?),
    }
}

fn solver_options(cfg: &RunConfig) -> SolverOptions {
    SolverOptions {
        atol: cfg.atol,
        rtol: cfg.rtol,
        ..SolverOptions::default()
    }
}

fn scenario_arg(cfg: &RunConfig) -> Result<Scenario> {
    if cfg.scenario.is_none() {
        return Err(usage("no scenario given (--scenario)"));
    }
    cfg.scenario().map_err(|e| match e.downcast::<Error>() {
        Ok(core) => CliError::Module(core),
        Err(other) => CliError::Config(other),
    })
}

fn simulate(cfg: &RunConfig, meta: &str) -> Result<Outputs> {
    let seed = require_seed(cfg, "simulate")?;
    let scenario = scenario_arg(cfg)?;
    let n = cfg.n.ok_or_else(|| usage("simulate needs --n"))?;
    let out = Outputs::prepare(
        &cfg.out,
        cfg.overwrite,
        &["paths.csv", "outcomes.csv", "dataset.json", "counterfactuals.csv", meta],
    )?;
    let data = simulate_observed(&scenario, n, seed)?;
    data.write_dir(&cfg.out, true)?;
    let times = cfg.times.clone().unwrap_or_else(|| scenario.decision_times());
    let mut w = out.file("counterfactuals.csv")?;
    data.write_counterfactuals(&mut w, &times)?;
    w.flush()?;
    println!("simulated {n} subjects ({:?}) into {}", scenario.kind, cfg.out.display());
    Ok(out)
}

fn mimic(cfg: &RunConfig, meta: &str) -> Result<Outputs> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data.scenario)?;
    let out = Outputs::prepare(&cfg.out, cfg.overwrite, &["trajectories.csv", "mimic_summary.json", meta])?;
    let opts = solver_options(cfg);
    let solved = data
        .subjects
        .par_iter()
        .map(|s| {
            let traj = solve_backward(&model, &s.path, s.y, &opts)?;
            let mut dev: Option<f64> = None;
            for (&t, &x) in traj.mesh.iter().zip(&traj.values) {
                if let Some(a) = model.analytic_x(&s.path, s.y, t)? {
                    dev = Some(dev.unwrap_or(0.0).max((x - a).abs()));
                }
            }
            Ok((s.id, s.y, traj, dev))
        })
        .collect::<std::result::Result<Vec<_>, Error>>()?;
    let mut w = csv_writer(out.file("trajectories.csv")?);
    w.write_record(["subject_id", "t", "x"]).map_err(Error::from)?;
    let (mut accepted, mut rejected, mut max_err, mut max_move) = (0, 0, 0.0f64, 0.0f64);
    let mut max_dev: Option<f64> = None;
    for (id, y, traj, dev) in &solved {
        for (t, x) in traj.mesh.iter().zip(&traj.values) {
            w.write_record([id.to_string(), t.to_string(), x.to_string()]).map_err(Error::from)?;
            max_move = max_move.max((x - y).abs());
        }
        accepted += traj.report.accepted_steps;
        rejected += traj.report.rejected_steps;
        max_err = max_err.max(traj.report.max_error_estimate);
        if let Some(d) = dev {
            max_dev = Some(max_dev.unwrap_or(0.0).max(*d));
        }
    }
    w.flush()?;
    let summary = json!({
        "n_subjects": solved.len(),
        "family": model.family,
        "psi": model.psi,
        "accepted_steps": accepted,
        "rejected_steps": rejected,
        "max_error_estimate": max_err,
        "max_abs_x_minus_y": max_move,
        "max_abs_deviation_from_analytic": max_dev,
    });
    out.json("mimic_summary.json", &summary)?;
    println!(
        "solved {} trajectories; max |X - Y| = {max_move:e}; max deviation from analytic X = {}",
        solved.len(),
        max_dev.map_or("n/a".to_string(), |d| format!("{d:e}"))
    );
    Ok(out)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn z_crit(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Config(anyhow::anyhow!("alpha = {alpha} outside (0, 1)")));
    }
    Ok(norm_quantile(1.0 - alpha / 2.0))
}

fn score_spec(cfg: &RunConfig, data: &Dataset) -> ScoreSpec {
    let mut spec = ScoreSpec::for_scenario(&data.scenario);
    spec.solver = solver_options(cfg);
    spec
}

fn estimate(cfg: &RunConfig, meta: &str) -> Result<Outputs> {
    let data = load_data(cfg)?;
    let template = load_model(cfg, &data.scenario)?;
    let alpha = cfg.alpha.unwrap_or(0.05);
    let opts = SearchOptions {
        lo: cfg.search_lo,
        hi: cfg.search_hi,
        grid_points: cfg.grid_points,
        z_crit: z_crit(alpha)?,
        ..SearchOptions::default()
    };
    let out = Outputs::prepare(&cfg.out, cfg.overwrite, &["estimate.json", "score_curve.csv", meta])?;
    let est = estimate_psi(&data, &template, &score_spec(cfg, &data), &opts)?;
    let mut value = serde_json::to_value(&est)?;
    value["alpha"] = json!(alpha);
    out.json("estimate.json", &value)?;
    let mut w = out.file("score_curve.csv")?;
    est.write_curve_csv(&mut w)?;
    w.flush()?;
    let show = |v: Option<f64>| v.map_or("bound".to_string(), |x| format!("{x:.4}"));
    println!(
        "psi_hat = {:?}; {:.0}% interval [{}, {}]",
        est.psi_hat,
        100.0 * (1.0 - alpha),
        show(est.ci.0),
        show(est.ci.1)
    );
    Ok(out)
}

fn test(cfg: &RunConfig, meta: &str) -> Result<Outputs> {
    let data = load_data(cfg)?;
    let alpha = cfg.alpha.unwrap_or(0.05);
    z_crit(alpha)?;
    let out = Outputs::prepare(&cfg.out, cfg.overwrite, &["test.json", meta])?;
    let result = test_no_effect(&data, &score_spec(cfg, &data))?;
    let mut value = serde_json::to_value(&result)?;
    value["alpha"] = json!(alpha);
    value["reject"] = json!(result.p_value < alpha);
    out.json("test.json", &value)?;
    println!("z = {:.4}, p = {:.4}", result.z, result.p_value);
    Ok(out)
}

fn gcomp(cfg: &RunConfig, meta: &str) -> Result<Outputs> {
    let tree = match (&cfg.builtin, &cfg.tree, &cfg.data) {
        (Some(b), None, None) if b == "figure1" => TreatmentTree::figure1(),
        (Some(b), None, None) => return Err(CliError::Config(anyhow::anyhow!("unknown built-in tree `{b}`"))),
        (None, Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(anyhow::anyhow!("reading tree {}: {e}", path.display())))?;
            TreatmentTree::from_json(&text)?
        }
        (None, None, Some(_)) => TreatmentTree::from_dataset(&load_data(cfg)?)?,
        _ => return Err(usage("give exactly one of --builtin, --tree, --data")),
    };
    let regime = Regime::parse(cfg.regime.as_deref().ok_or_else(|| usage("gcomp needs --regime"))?)?;
    let out = Outputs::prepare(&cfg.out, cfg.overwrite, &["gcomp.json", meta])?;
    let g = g_compute(&tree, regime)?;
    let naive = |spec: StratumSpec| -> Value {
        match naive_compare(&tree, spec) {
            Ok(arms) => serde_json::to_value(arms).expect("arms serialize"),
            Err(_) => Value::Null,
        }
    };
    let value = json!({
        "result": g.to_json(),
        "naive": {
            "marginal": naive(StratumSpec::default()),
            "a1_equals_1": naive(StratumSpec { l1: None, a1: Some(1) }),
            "l1_equals_1": naive(StratumSpec { l1: Some(1), a1: None }),
        },
    });
    out.json("gcomp.json", &value)?;
    println!(
        "regime {}: expected survivors {} of {} (survival {})",
        g.regime, g.expected_survivors, g.population, g.survival
    );
    Ok(out)
}

fn converge(cfg: &RunConfig, meta: &str) -> Result<Outputs> {
    let seed = require_seed(cfg, "converge")?;
    let out = Outputs::prepare(&cfg.out, cfg.overwrite, &["converge.csv", "converge.json", meta])?;
    let panel = onset_panel_study(&cfg.onset, cfg.subjects, seed, &cfg.levels, None, cfg.bound)?;
    let mut w = out.file("converge.csv")?;
    panel.combined.write_csv(&mut w)?;
    w.flush()?;
    out.json(
        "converge.json",
        &json!({
            "scenario": cfg.onset,
            "subjects": cfg.subjects,
            "nonincreasing": panel.combined.nonincreasing,
            "points": panel.combined.points,
        }),
    )?;
    for p in &panel.combined.points {
        println!("level {}: sup gap {:.3e}", p.level, p.sup_gap);
    }
    println!("nonincreasing: {:?}", panel.combined.nonincreasing);
    Ok(out)
}

fn validate(cfg: &RunConfig, meta: &str) -> Result<Outputs> {
    let data = match (&cfg.data, &cfg.scenario) {
        (Some(_), None) => load_data(cfg)?,
        (None, Some(_)) => {
            let seed = require_seed(cfg, "validate")?;
            let n = cfg.n.ok_or_else(|| usage("validate with --scenario needs --n"))?;
            simulate_observed(&scenario_arg(cfg)?, n, seed)?
        }
        _ => return Err(usage("give exactly one of --data, --scenario")),
    };
    let sc = &data.scenario;
    let model = load_model(cfg, sc)?;
    let times = cfg
        .times
        .clone()
        .unwrap_or_else(|| [0.25, 0.5, 0.75].iter().map(|f| f * sc.horizon).collect());
    let alpha = cfg.alpha.unwrap_or(0.01);
    let out = Outputs::prepare(&cfg.out, cfg.overwrite, &["strata.csv", "sweep.csv", "validate.json", meta])?;
    let (status, alive) = (sc.treatment_coord(), sc.alive_coord());
    let suite = mimicry_suite(&data, &model, &times, status, alive, cfg.level, alpha, cfg.min_size)?;
    let sweep = strata_sweep(&data, &model, &times, status, alive, &cfg.sweep, alpha, cfg.min_size)?;
    let mut w = out.file("strata.csv")?;
    suite.write_csv(&mut w)?;
    w.flush()?;
    let mut w = csv_writer(out.file("sweep.csv")?);
    w.write_record(["level", "n_strata", "pass_rate"]).map_err(Error::from)?;
    for r in &sweep {
        w.write_record([r.level.to_string(), r.n_strata.to_string(), r.pass_rate.to_string()])
            .map_err(Error::from)?;
    }
    w.flush()?;
    let mut summary = suite.summary_json();
    summary["level"] = json!(cfg.level);
    summary["times"] = json!(times);
    summary["skipped_strata"] = json!(suite.skipped);
    out.json("validate.json", &summary)?;
    println!(
        "{} strata tested at alpha = {alpha}; pass rate {:.3}",
        suite.reports.len(),
        suite.pass_rate()
    );
    Ok(out)
}
