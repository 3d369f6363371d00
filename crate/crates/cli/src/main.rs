//! Command-line driver: solve scenarios, print horizon bounds, simulate and
//! evaluate policies, and export plot-ready CSV data.
//!
//! Exit codes: 0 on success, 1 on input or I/O errors, 2 when an iterative
//! solve stopped at its iteration cap (results are still written, flagged in
//! the manifest).

mod contour;

use clap::{Args, Parser, Subcommand};
use oopdmp::chain::Anchor;
use oopdmp::eikonal::{horizon_bound, solve_min_time};
use oopdmp::results::{read_results, write_results, Manifest};
use oopdmp::scenario::{parse_scenario, Overrides, Scenario};
use oopdmp::sim::{derive_seed, mc_evaluate, trace_trajectory, SimTrace, TraceConfig};
use oopdmp::solver::{cost_bounds, solve, AnchorKey, Observations, Problem, SolveResult};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "oopdmp",
    about = "Optimal control with occasionally observed mode switches",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario description (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Artifact directory: solve writes here, later commands read from here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the grid subdivisions per axis.
    #[arg(long = "J")]
    j: Option<usize>,
    /// Override the iteration stopping threshold.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the horizon / period / truncation time.
    #[arg(long)]
    horizon: Option<f64>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to OOPDMP_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the scenario and write value fields plus a manifest.
    Solve(CommonArgs),
    /// Print the minimum-time horizon bound for exit-time scenarios.
    Bound(CommonArgs),
    /// Trace trajectories under the solved policy and write them.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of traces to generate.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Monte Carlo estimate of the realized cost versus the solved value.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of Monte Carlo runs.
        #[arg(long, default_value_t = 1000)]
        runs: usize,
    },
    /// Export value slices, observation-region contours, and trajectories
    /// as CSV.
    ExportPolicy {
        #[command(flatten)]
        common: CommonArgs,
        /// Observation layer to export.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Anchor to export: a mode index or "q" for the initial distribution.
        #[arg(long)]
        anchor: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Solve(common) => cmd_solve(common),
        Command::Bound(common) => cmd_bound(common),
        Command::Simulate { common, runs } => cmd_simulate(common, runs),
        Command::Evaluate { common, runs } => cmd_evaluate(common, runs),
        Command::ExportPolicy {
            common,
            layer,
            anchor,
        } => cmd_export(common, layer, anchor),
    }
}

fn setup_threads(requested: Option<usize>) {
    let threads = requested.or_else(|| {
        std::env::var("OOPDMP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

struct Loaded {
    scenario: Scenario,
    overrides: Overrides,
    base_dir: PathBuf,
}

fn load(common: &CommonArgs) -> Result<Loaded, Box<dyn std::error::Error>> {
    setup_threads(common.threads);
    let text = std::fs::read_to_string(&common.scenario)
        .map_err(|e| format!("{}: {e}", common.scenario.display()))?;
    let scenario = parse_scenario(&text)?;
    let overrides = Overrides {
        j: common.j,
        tol: common.tol,
        horizon: common.horizon,
        seed: common.seed,
    };
    let base_dir = common
        .scenario
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    Ok(Loaded {
        scenario,
        overrides,
        base_dir,
    })
}

fn out_dir(common: &CommonArgs) -> Result<PathBuf, Box<dyn std::error::Error>> {
    common
        .out
        .clone()
        .ok_or_else(|| "this command needs --out".into())
}

fn cmd_solve(common: CommonArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let out = out_dir(&common)?;
    let loaded = load(&common)?;
    let problem = loaded.scenario.build(&loaded.base_dir, &loaded.overrides)?;
    let result = solve(&problem)?;
    write_results(&out, &loaded.scenario, &loaded.overrides, &result, &[])?;
    let last = result.residual_history.last().copied().unwrap_or(0.0);
    println!(
        "iterations {} residual {:.3e} horizon {:.4} dt {:.6} converged {}",
        result.iterations_used, last, result.horizon_used, result.dt, result.converged
    );
    Ok(if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_bound(common: CommonArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let loaded = load(&common)?;
    let problem = loaded.scenario.build(&loaded.base_dir, &loaded.overrides)?;
    let (k_min, k_max, psi_max, _) = cost_bounds(&problem);
    let z = solve_min_time(&problem.grid, &problem.speed)?;
    let bound = horizon_bound(&z, k_min, k_max, psi_max)?;
    println!(
        "horizon {:.4} (max time-to-target {:.4}, K range [{:.4}, {:.4}], psi max {:.4})",
        bound,
        z.max_finite().unwrap_or(f64::NAN),
        k_min,
        k_max,
        psi_max
    );
    Ok(ExitCode::SUCCESS)
}

fn reload(
    common: &CommonArgs,
) -> Result<(PathBuf, Manifest, SolveResult, Problem), Box<dyn std::error::Error>> {
    setup_threads(common.threads);
    let out = out_dir(common)?;
    let (manifest, result) = read_results(&out)?;
    let base_dir = common
        .scenario
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let problem = manifest.scenario.build(&base_dir, &manifest.overrides)?;
    Ok((out, manifest, result, problem))
}

fn sim_start(manifest: &Manifest) -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let sim = manifest
        .scenario
        .sim
        .as_ref()
        .ok_or("scenario has no sim block (start point needed)")?;
    Ok((sim.start[0], sim.start[1]))
}

fn cmd_simulate(common: CommonArgs, runs: usize) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let (out, manifest, result, problem) = reload(&common)?;
    let start = sim_start(&manifest)?;
    let sim = manifest.scenario.sim.clone().unwrap();
    let seed = common.seed.unwrap_or(manifest.scenario.seed);
    let mut traces: Vec<SimTrace> = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut cfg = TraceConfig::new(start, derive_seed(seed, run as u64));
        cfg.stochastic = sim.stochastic;
        cfg.scripted_observations = sim.scripted_observations.clone();
        cfg.max_time = sim.max_time;
        traces.push(trace_trajectory(&problem, &result, &cfg)?);
    }
    for (i, t) in traces.iter().enumerate() {
        println!(
            "trace {i}: cost {:.6} events {} diverged {}",
            t.realized_cost,
            t.events.len(),
            t.diverged
        );
    }
    write_results(
        &out,
        &manifest.scenario,
        &manifest.overrides,
        &result,
        &traces,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(common: CommonArgs, runs: usize) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let (_, manifest, result, problem) = reload(&common)?;
    let start = sim_start(&manifest)?;
    let seed = common.seed.unwrap_or(manifest.scenario.seed);
    let summary = mc_evaluate(&problem, &result, start, runs, seed)?;
    let anchor_key = match &problem.spec.anchor {
        Anchor::Mode(m) => AnchorKey::Mode(*m),
        Anchor::Distribution(_) => AnchorKey::Distribution,
    };
    let value = result
        .field(anchor_key, 0)
        .map(|f| f.sample(start.0, start.1, 0.0))
        .unwrap_or(f64::NAN);
    println!(
        "mean {:.6} stderr {:.6} value {:.6} runs {} diverged {}",
        summary.mean, summary.std_error, value, summary.runs, summary.diverged
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_anchor(text: Option<&str>, problem: &Problem) -> Result<AnchorKey, String> {
    match text {
        None => Ok(match &problem.spec.anchor {
            Anchor::Mode(m) => AnchorKey::Mode(*m),
            Anchor::Distribution(_) => AnchorKey::Distribution,
        }),
        Some("q") => Ok(AnchorKey::Distribution),
        Some(s) => s
            .parse::<usize>()
            .map(AnchorKey::Mode)
            .map_err(|_| format!("anchor must be a mode index or \"q\", got {s:?}")),
    }
}

fn cmd_export(
    common: CommonArgs,
    layer: usize,
    anchor: Option<String>,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let (out, manifest, result, problem) = reload(&common)?;
    let anchor_key = parse_anchor(anchor.as_deref(), &problem)?;
    let field = result
        .field(anchor_key, layer)
        .ok_or_else(|| format!("no field for anchor {anchor_key:?}, layer {layer}"))?;
    let export = out.join("export");
    std::fs::create_dir_all(&export)?;

    // Time-zero value slice.
    let slice = field.slice0();
    let n = slice.n();
    let h = 1.0 / (n - 1) as f64;
    let mut csv = String::from("i,j,x,y,value\n");
    for jy in 0..n {
        for ix in 0..n {
            csv.push_str(&format!(
                "{ix},{jy},{:.6},{:.6},{}\n",
                ix as f64 * h,
                jy as f64 * h,
                slice.at(ix, jy)
            ));
        }
    }
    std::fs::write(export.join("value_slice0.csv"), csv)?;

    // Observation-region outline: zero contour of the branch difference
    // V - (C + Theta) (paid) or V - Theta (bounded) at t = 0.
    let branch = match &problem.spec.observations {
        Observations::Paid(price) => {
            let theta = expected_next_layer(&problem, &result, anchor_key, layer)?;
            Some((theta, Some(price.clone())))
        }
        Observations::Bounded(l) if layer < *l => {
            let theta = expected_next_layer(&problem, &result, anchor_key, layer + 1)?;
            Some((theta, None))
        }
        _ => None,
    };
    let mut contour_csv = String::from("x0,y0,x1,y1\n");
    if let Some((theta, price)) = branch {
        // On the contact set the two branches are equal, so offset the level
        // slightly below zero to get a drawable crossing at its edge.
        let margin = (10.0 * manifest.scenario.tol).max(1e-9);
        let mut diff = vec![0.0f64; n * n];
        for (idx, d) in diff.iter_mut().enumerate() {
            let v = slice.data()[idx];
            let mut obstacle = theta[idx];
            if let Some(p) = &price {
                obstacle += p.data()[idx];
            }
            *d = if v >= oopdmp::grid::INF_SENTINEL || obstacle >= oopdmp::grid::INF_SENTINEL {
                oopdmp::grid::INF_SENTINEL
            } else {
                v - obstacle + margin
            };
        }
        for ((x0, y0), (x1, y1)) in
            contour::zero_contour_segments(&diff, n, oopdmp::grid::INF_SENTINEL)
        {
            contour_csv.push_str(&format!("{x0:.6},{y0:.6},{x1:.6},{y1:.6}\n"));
        }
    }
    std::fs::write(export.join("observation_region.csv"), contour_csv)?;

    // Trajectories recorded in the manifest.
    let mut wrote = 0usize;
    for record in &manifest.files {
        if !record.path.starts_with("traces/") {
            continue;
        }
        let trace: SimTrace =
            serde_json::from_str(&std::fs::read_to_string(out.join(&record.path))?)?;
        let mut csv = String::from("t,x,y\n");
        for (t, x, y) in &trace.path {
            csv.push_str(&format!("{t},{x},{y}\n"));
        }
        let name = Path::new(&record.path)
            .file_stem()
            .unwrap()
            .to_string_lossy()
            .into_owned();
        std::fs::write(export.join(format!("{name}.csv")), csv)?;
        wrote += 1;
    }
    println!(
        "exported value slice, observation-region contour, {wrote} trajectories to {}",
        export.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Belief-weighted combination of the coupled layer's time-zero slices at
/// the anchor's belief, evaluated at t = 0.
fn expected_next_layer(
    problem: &Problem,
    result: &SolveResult,
    anchor: AnchorKey,
    coupled_layer: usize,
) -> Result<Vec<f64>, Box<dyn std::error::Error>> {
    let modes = problem.chain.modes();
    let b = match anchor {
        AnchorKey::Mode(m) => {
            let mut e = vec![0.0; modes];
            e[m] = 1.0;
            e
        }
        AnchorKey::Distribution => problem.spec.anchor.as_belief(modes),
    };
    let slice0s = result
        .slice0s(coupled_layer, modes)
        .ok_or("missing coupled-layer fields for export")?;
    let len = slice0s[0].data().len();
    let mut out = vec![0.0f64; len];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut sentinel = false;
        for (m, s) in slice0s.iter().enumerate() {
            let v = s.data()[idx];
            if v >= oopdmp::grid::INF_SENTINEL {
                sentinel = true;
                break;
            }
            acc += b[m] * v;
        }
        *o = if sentinel {
            oopdmp::grid::INF_SENTINEL
        } else {
            acc
        };
    }
    Ok(out)
}
