use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};
use slowfast::config::Config;
use slowfast::models::{self, MODEL_NAMES};
use slowfast::ode::Tolerances;
use slowfast::orbit::{find_singular_orbit, OrbitError, OrbitOptions};
use slowfast::simulate::{convergence_study, run, SimOptions, StudyOptions};
use slowfast::system::{check_assumptions, ManifoldChain, SlowFastSystem};

#[derive(Parser)]
#[command(name = "slowfast", version, about = "Relaxation oscillations in slow-fast systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Locate the singular orbit of a config and classify its stability.
    Analyze {
        config: PathBuf,
        /// Report destination; `-` for standard output.
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Integrate the full system at a positive eps and write a CSV trajectory.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        eps: f64,
        /// Initial state, comma separated: slow variables then fast variables.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        init: Vec<f64>,
        #[arg(long, default_value_t = 200.0)]
        tmax: f64,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Distance of simulated cycles to the singular orbit for decreasing eps.
    Verify {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        eps_list: Vec<f64>,
        /// Initial state; defaults to the first landing point slightly off its face.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        init: Option<Vec<f64>>,
        #[arg(long, default_value_t = 200.0)]
        tmax: f64,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// List the built-in models or export one as a config file.
    Catalog {
        #[arg(long)]
        export: Option<String>,
        /// Destination for the export; defaults to `<name>.json`.
        #[arg(long)]
        out: Option<String>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Assumptions,
    Solver(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Analyze { config, out } => analyze(&config, &out),
        Command::Simulate {
            config,
            eps,
            init,
            tmax,
            out,
        } => simulate(&config, eps, &init, tmax, &out),
        Command::Verify {
            config,
            eps_list,
            init,
            tmax,
            out,
        } => verify(&config, &eps_list, init, tmax, &out),
        Command::Catalog { export, out } => catalog(export, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Assumptions) => ExitCode::from(2),
        Err(Failure::Solver(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load(path: &Path) -> anyhow::Result<Config> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Config::from_json_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn write_out(dest: &str, text: &str) -> anyhow::Result<()> {
    if dest == "-" {
        io::stdout().write_all(text.as_bytes())?;
        Ok(())
    } else {
        fs::write(dest, text).with_context(|| format!("writing {dest}"))
    }
}

fn orbit_options(cfg: &Config) -> OrbitOptions {
    let mut opts = OrbitOptions::default();
    if let Some(t) = &cfg.tolerances {
        if let Some(r) = t.rtol {
            opts.solver.tol.rtol = r;
        }
        if let Some(a) = t.atol {
            opts.solver.tol.atol = a;
        }
        if let Some(nt) = t.newton {
            opts.newton_tol = nt;
        }
    }
    opts
}

fn matrix(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<f64>>())
        .collect::<Vec<_>>())
}

fn analyze(path: &Path, out: &str) -> Result<(), Failure> {
    let cfg = load(path)?;
    let sys = cfg.system().map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let chain = cfg.chain();
    let opts = orbit_options(&cfg);

    let pre = check_assumptions(&sys, &chain, None);
    if !pre.all_passed() {
        let report = json!({ "assumption_report": pre });
        write_out(out, &pretty(&report))?;
        for c in pre.failures() {
            eprintln!("assumption {} failed: {}", c.assumption, c.detail);
        }
        return Err(Failure::Assumptions);
    }
    let sol = match find_singular_orbit(&sys, &chain, &opts) {
        Ok(sol) => sol,
        Err(e) => {
            let probe = slowfast::orbit::probe_chain(&sys, &chain, &opts.solver);
            let failed_assumption = !probe.all_passed() || matches!(e, OrbitError::PlanarCondition { .. });
            let report = json!({ "error": e.to_string(), "assumption_report": probe });
            write_out(out, &pretty(&report))?;
            return Err(if failed_assumption {
                eprintln!("error: {e}");
                Failure::Assumptions
            } else {
                Failure::Solver(e.into())
            });
        }
    };
    let post = check_assumptions(&sys, &chain, Some(&sol.orbit));
    let report = report_json(&sys, &chain, &sol, &post);
    write_out(out, &pretty(&report))?;
    if !post.all_passed() {
        for c in post.failures() {
            eprintln!("assumption {} failed: {}", c.assumption, c.detail);
        }
        return Err(Failure::Assumptions);
    }
    Ok(())
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialises");
    s.push('\n');
    s
}

fn report_json(
    sys: &dyn SlowFastSystem,
    chain: &ManifoldChain,
    sol: &slowfast::orbit::OrbitSolution,
    assumptions: &slowfast::system::AssumptionReport,
) -> Value {
    let legs: Vec<Value> = sol
        .orbit
        .legs
        .iter()
        .enumerate()
        .map(|(i, leg)| {
            json!({
                "leg": i + 1,
                "z": chain.leg(i).z,
                "A": leg.entry_p,
                "B": leg.exit_p,
                "tau": leg.tau,
                "zeta": leg.entry_d.iter().map(|d| -d).collect::<Vec<f64>>(),
                "exit_residual": leg.exit_residual,
            })
        })
        .collect();
    let jumps: Vec<Value> = sol
        .orbit
        .jumps
        .iter()
        .enumerate()
        .map(|(i, j)| {
            json!({
                "from_leg": i + 1,
                "to_leg": (i + 1) % chain.len() + 1,
                "landing": j.landing_p,
                "vertical": j.vertical,
            })
        })
        .collect();
    let jac: Vec<Value> = sol
        .leg_jacobians
        .iter()
        .zip(&sol.jump_jacobians)
        .enumerate()
        .map(|(i, (l, j))| {
            json!({
                "leg": i + 1,
                "DQ": matrix(&l.dq),
                "DQhat": matrix(&l.dqhat),
                "mu": l.mu.as_slice(),
                "Dpi": matrix(&j.dpi),
            })
        })
        .collect();
    let r = &sol.report;
    json!({
        "dimensions": { "n": sys.n(), "m": sys.m() },
        "orbit": {
            "legs": legs,
            "jumps": jumps,
            "section_point": sol.orbit.section,
            "newton_residual": sol.orbit.residual,
            "newton_iterations": sol.orbit.iterations,
        },
        "jacobians": jac,
        "DP": matrix(&r.dp),
        "eigenvalues": r.eigenvalues.iter().map(|z| json!({ "re": z.re, "im": z.im, "abs": z.norm() })).collect::<Vec<_>>(),
        "spectral_radius": r.spectral_radius,
        "det_DP_minus_I": r.det_dp_minus_i,
        "classification": r.classification.as_str(),
        "assumption_report": assumptions,
    })
}

fn csv_number(x: f64) -> String {
    format!("{x:.16e}")
}

fn simulate(path: &Path, eps: f64, init: &[f64], tmax: f64, out: &str) -> Result<(), Failure> {
    let cfg = load(path)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(anyhow!("--eps must be positive; use `analyze` for the eps = 0 limit").into());
    }
    if !(tmax > 0.0 && tmax.is_finite()) {
        return Err(anyhow!("--tmax must be positive").into());
    }
    let sys = cfg.system().map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if init.len() != sys.n() + sys.m() {
        return Err(anyhow!("--init needs {} values, got {}", sys.n() + sys.m(), init.len()).into());
    }
    let opts = sim_options(&cfg);
    let traj = run(&sys, eps, init, tmax, &opts).map_err(|e| match e {
        slowfast::simulate::SimError::InvalidInit(_) | slowfast::simulate::SimError::InvalidEps(_) => {
            Failure::Usage(e.into())
        }
        other => Failure::Solver(other.into()),
    })?;
    let mut text = String::from("tau");
    for v in cfg.slow_vars.iter().chain(&cfg.fast_vars) {
        text.push(',');
        text.push_str(v);
    }
    text.push('\n');
    for (k, t) in traj.times().iter().enumerate() {
        text.push_str(&csv_number(*t));
        for v in traj.state(k) {
            text.push(',');
            text.push_str(&csv_number(v));
        }
        text.push('\n');
    }
    write_out(out, &text)?;
    Ok(())
}

fn sim_options(cfg: &Config) -> SimOptions {
    let mut opts = SimOptions::default();
    if let Some(t) = &cfg.tolerances {
        opts.tol = Tolerances::new(t.rtol.unwrap_or(opts.tol.rtol), t.atol.unwrap_or(opts.tol.atol));
    }
    opts
}

fn default_init(sys: &dyn SlowFastSystem, chain: &ManifoldChain, a1: &[f64]) -> Vec<f64> {
    let mut init = a1.to_vec();
    for (j, &(lo, hi)) in sys.z_bounds().iter().enumerate() {
        let z = chain.leg(0).z[j];
        let step = 0.25 * (hi - lo).min(1.0);
        init.push(if z == lo { z + step } else if z == hi { z - step } else { z });
    }
    init
}

fn verify(path: &Path, eps_list: &[f64], init: Option<Vec<f64>>, tmax: f64, out: &str) -> Result<(), Failure> {
    let cfg = load(path)?;
    if eps_list.iter().any(|e| !(*e > 0.0)) || eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(anyhow!("--eps-list must be positive and strictly descending").into());
    }
    let sys = cfg.system().map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let chain = cfg.chain();
    let opts = orbit_options(&cfg);
    let sol = find_singular_orbit(&sys, &chain, &opts).map_err(|e| Failure::Solver(e.into()))?;
    let init = match init {
        Some(v) if v.len() != sys.n() + sys.m() => {
            return Err(anyhow!("--init needs {} values, got {}", sys.n() + sys.m(), v.len()).into())
        }
        Some(v) => v,
        None => default_init(&sys, &chain, &sol.orbit.legs[0].entry_p),
    };
    let study_opts = StudyOptions {
        t_max: tmax,
        sim: sim_options(&cfg),
        ..StudyOptions::default()
    };
    let study = convergence_study(&sys, &chain, &sol.orbit, eps_list, &init, &study_opts)
        .map_err(|e| Failure::Solver(e.into()))?;
    let mut text = String::from("eps,hausdorff_distance,cycle_period\n");
    for row in &study.rows {
        text.push_str(&format!(
            "{},{},{}\n",
            csv_number(row.eps),
            csv_number(row.distance),
            csv_number(row.period)
        ));
    }
    write_out(out, &text)?;
    Ok(())
}

fn catalog(export: Option<String>, out: Option<String>) -> Result<(), Failure> {
    match export {
        None => {
            let mut text = String::new();
            for e in models::catalog() {
                text.push_str(&format!("{:<12} {}\n", e.name, e.description));
            }
            write_out("-", &text)?;
            Ok(())
        }
        Some(name) => {
            let e = models::entry(&name).ok_or_else(|| {
                anyhow!("unknown model `{name}`; available: {}", MODEL_NAMES.join(", "))
            })?;
            let dest = out.unwrap_or_else(|| format!("{name}.json"));
            write_out(&dest, &e.to_config().to_json_string())?;
            Ok(())
        }
    }
}
