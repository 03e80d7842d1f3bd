mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use vimpc::approximator::{MonomialBasis, ValueApproximator};
use vimpc::closed_loop::{
    check_value_decrease, compare_runs, performance_sum, run_closed_loop, write_comparison_csv,
    Artifacts, ClosedLoopTrace, Controller, SimConfig,
};
use vimpc::horizon_cert::{
    compute_horizons, estimate_epsilon, estimate_gamma, estimate_v_bar, horizon_sweep,
    write_sweep_csv, HorizonCertificate,
};
use vimpc::models::{LqrBaseline, SystemModel};
use vimpc::value_iteration::{estimate_region_radius, vi_run};
use vimpc::{plot, Vector};

use config::RunConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_NONCONVERGENCE: u8 = 2;
const EXIT_CERTIFICATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "vimpc",
    version,
    about = "Learned terminal costs for MPC via approximate value iteration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Approximator JSON (default `<out>/approximator.json`).
    #[arg(long, global = true)]
    approximator: Option<PathBuf>,
    /// Certificate JSON (default `<out>/certificate.json` when present).
    #[arg(long, global = true)]
    certificate: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run approximate value iteration and save the approximator.
    ViTrain,
    /// Estimate the certificate constants and stabilizing horizons.
    Certify,
    /// Simulate one closed-loop run.
    Simulate,
    /// Simulate several controllers from the same state and tabulate them.
    Compare,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CmdResult<T = ()> = Result<T, Failure>;

trait ExitWith<T> {
    fn exit_code(self, code: u8) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_code(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ViSummary {
    iterations: usize,
    converged: bool,
    c_e: f64,
    c_delta: f64,
    c_e_plus_c_delta: f64,
    features: usize,
    seed: u64,
}

struct Session {
    cfg: RunConfig,
    model: Box<dyn SystemModel>,
    out: PathBuf,
    approximator: Option<PathBuf>,
    certificate: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{:#}", f.error);
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            config::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    cfg.vi.rng_seed = cfg.seed;
    cfg.certificate.epsilon.seed = cfg.seed;
    Ok(cfg)
}

fn init_logging(out: &Path) -> anyhow::Result<()> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("run.log"))
        .context("opening run.log")?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(file)))
        .try_init()
        .ok();
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let cfg = load_config(&cli).exit_code(EXIT_USAGE)?;
    if cli.print_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).exit_code(EXIT_USAGE)?
        );
        return Ok(());
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(anyhow!("--jobs must be at least 1")).exit_code(EXIT_USAGE);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .ok();
    }
    let model = cfg.model.build().exit_code(EXIT_USAGE)?;
    let out = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .exit_code(EXIT_USAGE)?;
    init_logging(&out).exit_code(EXIT_USAGE)?;
    log::info!("vimpc {:?} with seed {}", cli.command, cfg.seed);
    let ctx = Session {
        cfg,
        model,
        out,
        approximator: cli.approximator.clone(),
        certificate: cli.certificate.clone(),
    };
    match cli.command {
        Command::ViTrain => cmd_vi_train(&ctx),
        Command::Certify => cmd_certify(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Compare => cmd_compare(&ctx),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .exit_code(EXIT_USAGE)
}

fn write_with<F>(path: &Path, f: F) -> CmdResult
where
    F: FnOnce(&mut Vec<u8>) -> vimpc::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).exit_code(EXIT_USAGE)?;
    write(path, buf)
}

fn to_json<T: Serialize>(v: &T) -> CmdResult<String> {
    let mut s = serde_json::to_string_pretty(v).exit_code(EXIT_USAGE)?;
    s.push('\n');
    Ok(s)
}

impl Session {
    fn approximator_path(&self) -> PathBuf {
        self.approximator
            .clone()
            .unwrap_or_else(|| self.out.join("approximator.json"))
    }

    fn load_approximator(&self) -> CmdResult<ValueApproximator> {
        let path = self.approximator_path();
        let text = fs::read_to_string(&path)
            .with_context(|| {
                format!(
                    "missing approximator {}; run vi-train first or pass --approximator",
                    path.display()
                )
            })
            .exit_code(EXIT_USAGE)?;
        let v = ValueApproximator::from_json(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .exit_code(EXIT_USAGE)?;
        if v.state_dim() != self.model.state_dim() {
            return Err(anyhow!(
                "approximator dimension {} does not match the model",
                v.state_dim()
            ))
            .exit_code(EXIT_USAGE);
        }
        Ok(v)
    }

    fn load_certificate(&self) -> CmdResult<Option<HorizonCertificate>> {
        let path = match &self.certificate {
            Some(p) => p.clone(),
            None => {
                let p = self.out.join("certificate.json");
                if !p.exists() {
                    return Ok(None);
                }
                p
            }
        };
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading certificate {}", path.display()))
            .exit_code(EXIT_USAGE)?;
        let cert = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .exit_code(EXIT_USAGE)?;
        Ok(Some(cert))
    }

    fn sim_config(&self, controller: Controller, horizon: usize) -> SimConfig {
        SimConfig {
            controller,
            horizon,
            x0: self.cfg.simulate.x0.clone(),
            steps: self.cfg.simulate.steps,
            warm_start: self.cfg.mpc.warm_start,
            ocp: self.cfg.mpc.ocp.clone(),
            inner: self.cfg.inner.clone(),
        }
    }
}

fn cmd_vi_train(ctx: &Session) -> CmdResult {
    let model = ctx.model.as_ref();
    let basis =
        MonomialBasis::new(model.state_dim(), &ctx.cfg.basis_degrees).exit_code(EXIT_USAGE)?;
    ctx.cfg
        .vi
        .validate(model, basis.len())
        .exit_code(EXIT_USAGE)?;
    let v0 = ValueApproximator::zero(basis, ctx.cfg.vi.domain.clone()).exit_code(EXIT_USAGE)?;
    let res = vi_run(model, &ctx.cfg.vi, &ctx.cfg.inner, &v0).exit_code(EXIT_NONCONVERGENCE)?;
    let summary = ViSummary {
        iterations: res.iterations,
        converged: res.converged,
        c_e: res.c_e_measured,
        c_delta: res.c_delta_measured,
        c_e_plus_c_delta: res.c_e_measured + res.c_delta_measured,
        features: res.approximator.basis().len(),
        seed: ctx.cfg.seed,
    };
    write(
        &ctx.out.join("approximator.json"),
        res.approximator.to_json().exit_code(EXIT_USAGE)? + "\n",
    )?;
    write_with(&ctx.out.join("vi_history.csv"), |w| {
        res.write_history_csv(w)
    })?;
    write(&ctx.out.join("vi_summary.json"), to_json(&summary)?)?;
    log::info!(
        "value iteration: {} iterations, converged {}, c_e {:e}, c_delta {:e}",
        res.iterations,
        res.converged,
        res.c_e_measured,
        res.c_delta_measured
    );
    println!("{}", to_json(&summary)?.trim_end());
    if !res.converged {
        return Err(anyhow!(
            "value iteration hit max_iterations = {}",
            ctx.cfg.vi.max_iterations
        ))
        .exit_code(EXIT_NONCONVERGENCE);
    }
    Ok(())
}

fn read_vi_summary(approx_path: &Path) -> CmdResult<ViSummary> {
    let path = approx_path.with_file_name("vi_summary.json");
    let text = fs::read_to_string(&path)
        .with_context(|| {
            format!(
                "missing {}; provide certificate.overrides.c_e and c_delta",
                path.display()
            )
        })
        .exit_code(EXIT_USAGE)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .exit_code(EXIT_USAGE)
}

fn cmd_certify(ctx: &Session) -> CmdResult {
    let model = ctx.model.as_ref();
    let cc = &ctx.cfg.certificate;
    let o = &cc.overrides;
    let needs_approx = o.gamma.is_none() || o.epsilon.is_none() || o.v_bar.is_none();
    let approx = if needs_approx {
        Some(ctx.load_approximator()?)
    } else {
        None
    };
    let (c_e, c_delta) = match (o.c_e, o.c_delta) {
        (Some(a), Some(b)) => (a, b),
        (a, b) => {
            let s = read_vi_summary(&ctx.approximator_path())?;
            (a.unwrap_or(s.c_e), b.unwrap_or(s.c_delta))
        }
    };
    let inner = &ctx.cfg.inner;
    let gamma = match (o.gamma, &approx) {
        (Some(g), _) => g,
        (None, Some(v)) => {
            let samples = v.domain().sample_seeded(cc.gamma_samples, ctx.cfg.seed);
            let est = estimate_gamma(
                v,
                model,
                v.domain(),
                cc.n_roll,
                &samples,
                inner,
                ctx.cfg.vi.origin_guard,
            )
            .exit_code(EXIT_CERTIFICATION)?;
            log::info!("gamma estimate {:?}", est);
            est.gamma
        }
        (None, None) => unreachable!("approximator loaded when gamma is estimated"),
    };
    let epsilon = match (o.epsilon, &approx) {
        (Some(e), _) => e,
        (None, Some(v)) => estimate_epsilon(v, model, v.domain(), inner, &cc.epsilon)
            .exit_code(EXIT_CERTIFICATION)?,
        (None, None) => unreachable!("approximator loaded when epsilon is estimated"),
    };
    let v_bar = match (o.v_bar, &approx) {
        (Some(v), _) => v,
        (None, Some(v)) => {
            let states: Vec<Vector> = if cc.v_bar_states.is_empty() {
                vec![Vector::from_vec(ctx.cfg.simulate.x0.clone())]
            } else {
                cc.v_bar_states
                    .iter()
                    .map(|s| Vector::from_vec(s.clone()))
                    .collect()
            };
            if states.iter().any(|s| s.len() != model.state_dim()) {
                return Err(anyhow!(
                    "certificate.v_bar_states entries must have the state dimension"
                ))
                .exit_code(EXIT_USAGE);
            }
            estimate_v_bar(v, model, &states, cc.n_roll, inner).exit_code(EXIT_CERTIFICATION)?
        }
        (None, None) => unreachable!("approximator loaded when V_bar is estimated"),
    };
    let mut cert =
        compute_horizons(gamma, epsilon, v_bar, c_e, c_delta).exit_code(EXIT_CERTIFICATION)?;
    if let (Some(v), true) = (&approx, cc.region_grid_density > 1) {
        match estimate_region_radius(v, v.domain(), cc.region_grid_density) {
            Ok(r) => cert.region_radius = Some(r),
            Err(e) => log::warn!("region radius unavailable: {e}"),
        }
    }
    write(&ctx.out.join("certificate.json"), to_json(&cert)?)?;
    if cc.sweep {
        let [lo, hi] = cc.sweep_range;
        let rows = horizon_sweep(&cert, lo, hi, cc.sweep_points).exit_code(EXIT_CERTIFICATION)?;
        write_with(&ctx.out.join("horizon_sweep.csv"), |w| {
            write_sweep_csv(&rows, w)
        })?;
    }
    log::info!(
        "certificate: gamma {}, epsilon {}, V_bar {}, N_0 {}, N_Omega {}, N_Vbar {}, alpha {}",
        cert.gamma,
        cert.epsilon,
        cert.v_bar,
        cert.n_0,
        cert.n_omega,
        cert.n_vbar,
        cert.alpha
    );
    println!("{}", to_json(&cert)?.trim_end());
    Ok(())
}

struct Loaded {
    approx: Option<ValueApproximator>,
    cert: Option<HorizonCertificate>,
    lqr: Option<LqrBaseline>,
}

fn load_artifacts(ctx: &Session, controllers: &[Controller]) -> CmdResult<Loaded> {
    let needs = |c: Controller| controllers.contains(&c);
    let approx = if needs(Controller::AdpMpc) || needs(Controller::RawPolicy) {
        Some(ctx.load_approximator()?)
    } else {
        None
    };
    let lqr = if needs(Controller::LqrTerminal) {
        Some(LqrBaseline::from_model(ctx.model.as_ref()).exit_code(EXIT_USAGE)?)
    } else {
        None
    };
    Ok(Loaded {
        approx,
        cert: ctx.load_certificate()?,
        lqr,
    })
}

impl Loaded {
    fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            approximator: self.approx.as_ref(),
            certificate: self.cert.as_ref(),
            lqr: self.lqr.as_ref(),
        }
    }
}

fn trace_summary(
    model: &dyn SystemModel,
    t: &ClosedLoopTrace,
    cert: Option<&HorizonCertificate>,
) -> serde_json::Value {
    let feasible = t.feasible.iter().filter(|f| **f).count();
    let decrease = match (cert, t.controller) {
        (Some(c), ctl) if ctl != Controller::RawPolicy => check_value_decrease(t, Some(c))
            .ok()
            .map(|r| r.violations.len()),
        _ => None,
    };
    json!({
        "controller": t.controller,
        "horizon": t.horizon,
        "x0": t.x0().as_slice(),
        "steps": t.steps(),
        "sum_stage_cost": performance_sum(t),
        "final_norm": t.final_state().norm(),
        "final_stage_cost": model.state_cost(t.final_state()),
        "feasible_steps": feasible,
        "infeasible_steps": t.steps() - feasible,
        "epsilon": t.epsilon,
        "terminal_in_B_eps_steps": t.terminal_in_b_eps.iter().filter(|b| **b).count(),
        "value_decrease_violations": decrease,
    })
}

fn cmd_simulate(ctx: &Session) -> CmdResult {
    let model = ctx.model.as_ref();
    let mpc = &ctx.cfg.mpc;
    let loaded = load_artifacts(ctx, &[mpc.controller])?;
    let sim = ctx.sim_config(mpc.controller, mpc.horizon);
    let trace = run_closed_loop(model, &sim, &loaded.artifacts()).exit_code(EXIT_USAGE)?;
    write_with(&ctx.out.join("trace.csv"), |w| trace.write_csv(w))?;
    let summary = trace_summary(model, &trace, loaded.cert.as_ref());
    write(&ctx.out.join("sim_summary.json"), to_json(&summary)?)?;
    if ctx.cfg.output.plots {
        let svg = plot::trace_figure(
            std::slice::from_ref(&trace),
            &[mpc.controller.label().to_string()],
        );
        write(&ctx.out.join("trace.svg"), svg)?;
    }
    log::info!("simulation finished: {summary}");
    println!("{}", to_json(&summary)?.trim_end());
    Ok(())
}

fn cmd_compare(ctx: &Session) -> CmdResult {
    let model = ctx.model.as_ref();
    let runs = &ctx.cfg.compare.runs;
    if runs.len() < 2 {
        return Err(anyhow!("compare.runs needs at least two entries")).exit_code(EXIT_USAGE);
    }
    let controllers: Vec<Controller> = runs.iter().map(|r| r.controller).collect();
    let loaded = load_artifacts(ctx, &controllers)?;
    let art = loaded.artifacts();
    let traces: Vec<ClosedLoopTrace> = runs
        .par_iter()
        .map(|r| run_closed_loop(model, &ctx.sim_config(r.controller, r.horizon), &art))
        .collect::<vimpc::Result<_>>()
        .exit_code(EXIT_USAGE)?;
    let labels: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
    let rows = compare_runs(model, &traces, &labels).exit_code(EXIT_USAGE)?;
    write_with(&ctx.out.join("comparison.csv"), |w| {
        write_comparison_csv(&rows, w)
    })?;
    for (t, label) in traces.iter().zip(&labels) {
        write_with(&ctx.out.join(format!("trace_{label}.csv")), |w| {
            t.write_csv(w)
        })?;
    }
    if ctx.cfg.output.plots {
        write(
            &ctx.out.join("comparison.svg"),
            plot::trace_figure(&traces, &labels),
        )?;
    }
    for r in &rows {
        log::info!(
            "{}: sum l {}, final norm {}",
            r.label,
            r.performance,
            r.final_norm
        );
    }
    println!("{}", to_json(&rows)?.trim_end());
    Ok(())
}
