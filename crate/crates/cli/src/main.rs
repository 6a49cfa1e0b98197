//! `ope`: oracle queries, single estimates, data simulation and Monte-Carlo
//! experiments for tabular MDPs.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, or every replication of
//! some experiment cell failed), 2 usage or parse error, 3 identifiability
//! error, 4 infeasible fitting scheme.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use ope_core::estimators::{
    default_omega, estimate_dm, estimate_drl_m1, estimate_drl_m2, estimate_drl_m3, estimate_is, estimate_mis,
    estimate_snis, fit_step_q_by_folds, EstimateReport, FittingScheme, StepNuisance,
};
use ope_core::experiments::{self, EstimatorKind, ExperimentConfig, RowStatus};
use ope_core::mdp::text::{read_mdp, read_policies, read_qfunction, read_wfunction};
use ope_core::mdp::{
    density_ratio_eta, exact_q, marginal_ratio_mu, oracle_w, stationary_distribution, DenominatorKind, Policy,
    QFunction, TabularMdp, WFunction,
};
use ope_core::nuisance::{
    fit_q_lstdq, fit_q_model_based, fit_q_truncated_model_based, fit_w_linear, EmpiricalModel, FeatureMap,
    FitOptions, Moments,
};
use ope_core::oracle::{bound_report, curse_diagnostic, BoundReport, DEFAULT_TOL};
use ope_core::sampling::{
    check_indices, read_transitions_csv, sample_trajectories, sample_transitions,
    trajectory_to_transitions, write_transitions_csv, InitRegime, TrajectoryDataset, TransitionDataset,
    DEFAULT_BURN_IN,
};
use ope_core::OpeError;

#[derive(Parser)]
#[command(name = "ope", version, about = "Off-policy evaluation for tabular MDPs")]
struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// True value, efficiency bounds and the curse-of-horizon diagnostic.
    Oracle {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        /// State distribution the transition data are drawn from.
        #[arg(long, value_enum, default_value_t = Denominator::Stationary)]
        denominator: Denominator,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Bound report CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run estimators on a dataset.
    Estimate {
        /// Dataset CSV with columns traj_id,t,s,a,r,s_next.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        #[arg(long = "estimators", alias = "estimator", value_delimiter = ',', required = true, value_parser = parse_estimator)]
        estimators: Vec<EstimatorKind>,
        #[arg(long, default_value = "adaptive", value_parser = parse_scheme)]
        scheme: FittingScheme,
        /// `oracle`, `fitted`, or a w-function file.
        #[arg(long, default_value = "fitted")]
        w: String,
        /// `oracle`, `fitted` (model based), `lstdq`, or a q-function file.
        #[arg(long, default_value = "fitted")]
        q: String,
        /// Reference distribution for an oracle w.
        #[arg(long, value_enum, default_value_t = Denominator::Stationary)]
        denominator: Denominator,
        /// Step cap for trajectory estimators.
        #[arg(long)]
        truncation: Option<usize>,
        #[arg(long = "alpha-ci", default_value_t = 0.05)]
        alpha_ci: f64,
        /// Upper clip for fitted w.
        #[arg(long)]
        clip_w: Option<f64>,
        /// Recorded in the output rows.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a dataset from the behavior policy.
    Simulate {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        /// Number of trajectories.
        #[arg(long = "n-traj", default_value_t = 1)]
        n_traj: usize,
        /// Steps per trajectory (or transitions per unit with --iid).
        #[arg(long)]
        horizon: usize,
        #[arg(long, value_enum, default_value_t = Init::Stationary)]
        init: Init,
        /// Independent transitions from the behavior stationary distribution.
        #[arg(long)]
        iid: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo MSE study; writes mse_table.csv and plot data.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Interval coverage study; writes coverage_table.csv.
    Coverage {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides master_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Print the cell grid and exit.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Option<Vec<EstimatorKind>>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<FittingScheme>,
    #[arg(long = "alpha-ci")]
    alpha_ci: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Denominator {
    Initial,
    Stationary,
}

impl From<Denominator> for DenominatorKind {
    fn from(d: Denominator) -> Self {
        match d {
            Denominator::Initial => DenominatorKind::InitialDist,
            Denominator::Stationary => DenominatorKind::StationaryDist,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Stationary,
    BurnIn,
    Arbitrary,
}

impl From<Init> for InitRegime {
    fn from(i: Init) -> Self {
        match i {
            Init::Stationary => InitRegime::StationaryInit,
            Init::BurnIn => InitRegime::ErgodicBurnIn,
            Init::Arbitrary => InitRegime::ArbitraryInit,
        }
    }
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    EstimatorKind::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown estimator `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_scheme(s: &str) -> Result<FittingScheme, String> {
    FittingScheme::from_name(s)
        .ok_or_else(|| format!("unknown scheme `{s}` (expected adaptive, cross-trajectory, cross-time, oracle)"))
}

enum Failure {
    Core(OpeError),
    Usage(String),
    Runtime(String),
}

impl From<OpeError> for Failure {
    fn from(e: OpeError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(OpeError::Io(e))
    }
}

fn exit_code(e: &OpeError) -> u8 {
    match e {
        OpeError::Parse { .. } | OpeError::Csv(_) => 2,
        OpeError::Fold { source, .. } => exit_code(source),
        OpeError::Infeasible(_) => 4,
        e if e.is_identifiability() => 3,
        _ => 1,
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Parse errors are reported with the file they came from.
fn in_file<T>(path: &Path, r: ope_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        OpeError::Parse { .. } => Failure::Usage(format!("{}: {e}", path.display())),
        other => Failure::Core(other),
    })
}

fn load_problem(mdp: &Path, policies: &Path) -> CliResult<(TabularMdp, Policy, Policy)> {
    let m = in_file(mdp, read_mdp(&read_text(mdp)?))?;
    let (pe, pb) = in_file(policies, read_policies(&read_text(policies)?))?;
    pe.check_shape(&m)?;
    pb.check_shape(&m)?;
    Ok((m, pe, pb))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Failure::Core(OpeError::Io(e.error)))?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(OpeError::from)?;
    for r in rows {
        w.write_record(r).map_err(OpeError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_oracle(mdp: &Path, policies: &Path, denom: Denominator, tol: f64, out: Option<&Path>) -> CliResult<()> {
    let (m, pe, pb) = load_problem(mdp, policies)?;
    let report = bound_report(&m, &pe, &pb, denom.into(), tol)?;
    let curse = curse_diagnostic(&m, &pe, &pb, m.gamma())?;
    eprintln!("rho = {:.17e}", report.rho);
    eprintln!("eb_m1 = {}  eb_m2 = {}  eb_m3 = {:.17e}", report.eb_m1, report.eb_m2, report.eb_m3);
    eprintln!(
        "E[log eta] = {:.6}  -log gamma = {:.6}  curse condition {}",
        curse.expected_log_eta,
        curse.neg_log_gamma,
        if curse.curse_condition { "holds" } else { "does not hold" }
    );
    emit(out, &csv_text(&BoundReport::CSV_HEADER, &[report.csv_record()])?)
}

struct EstimateInputs<'a> {
    mdp: &'a TabularMdp,
    pe: &'a Policy,
    pb: &'a Policy,
    data: &'a TransitionDataset,
    scheme: FittingScheme,
    w: &'a str,
    q: &'a str,
    denom: DenominatorKind,
    clip_w: Option<f64>,
    alpha: f64,
}

impl EstimateInputs<'_> {
    fn moments(&self, d: &TransitionDataset) -> ope_core::Result<Moments> {
        Moments::empirical(d, self.mdp.n_states(), self.mdp.n_actions())
    }

    fn w_on(&self, d: &TransitionDataset) -> ope_core::Result<WFunction> {
        match self.w {
            "oracle" => oracle_w(self.mdp, self.pe, self.pb, self.denom),
            "fitted" => {
                let eta = density_ratio_eta(self.pe, self.pb)?;
                let f = FeatureMap::tabular(self.mdp.n_states(), self.mdp.n_actions());
                let opts = FitOptions { clip_w: self.clip_w, ..FitOptions::default() };
                Ok(fit_w_linear(&self.moments(d)?, &f, &eta, self.pe.initial_dist(), self.mdp.gamma(), &opts)?.w)
            }
            path => read_wfunction(&fs::read_to_string(path)?),
        }
    }

    fn q_on(&self, d: &TransitionDataset) -> ope_core::Result<QFunction> {
        let g = self.mdp.gamma();
        match self.q {
            "oracle" => exact_q(self.mdp, self.pe),
            "fitted" => fit_q_model_based(&self.moments(d)?, self.pe, g, self.mdp.r_max()),
            "lstdq" => {
                let f = FeatureMap::tabular(self.mdp.n_states(), self.mdp.n_actions());
                let opts = FitOptions { clip_q: Some(self.mdp.q_max()), ..FitOptions::default() };
                Ok(fit_q_lstdq(&self.moments(d)?, &f, self.pe, g, &opts)?.q)
            }
            path => read_qfunction(&fs::read_to_string(path)?),
        }
    }

    fn step_q(&self, trajs: &TrajectoryDataset, omega: usize) -> ope_core::Result<StepNuisance> {
        let g = self.mdp.gamma();
        fit_step_q_by_folds(trajs, self.scheme, |td: &TrajectoryDataset| match self.q {
            "oracle" => Ok(EmpiricalModel::from_mdp(self.mdp).truncated_q(self.pe, g, omega)),
            "fitted" => {
                let m = self.moments(&trajectory_to_transitions(td))?;
                Ok(fit_q_truncated_model_based(&m, self.pe, g, self.mdp.r_max(), omega))
            }
            other => Err(OpeError::Infeasible(format!(
                "per-step q-functions must be `oracle` or `fitted`, got `{other}`"
            ))),
        })
    }

    fn run(&self, kind: EstimatorKind, trajs: &mut Option<TrajectoryDataset>, truncation: Option<usize>) -> ope_core::Result<EstimateReport> {
        let (pe, pb, g, alpha) = (self.pe, self.pb, self.mdp.gamma(), self.alpha);
        if kind.needs_trajectories() && trajs.is_none() {
            *trajs = Some(TrajectoryDataset::from_transitions(self.data, InitRegime::StationaryInit)?);
        }
        let omega = |t: &TrajectoryDataset| {
            truncation.unwrap_or_else(|| default_omega(t.n_traj(), t.horizon)).min(t.horizon.saturating_sub(1))
        };
        match kind {
            EstimatorKind::Dm => {
                let mut rep = estimate_dm(&self.q_on(self.data)?, pe, g);
                rep.n_traj = self.data.traj_ids().len();
                rep.horizon = self.data.time_span();
                rep.n_effective = self.data.len();
                if matches!(self.q, "fitted" | "lstdq") {
                    rep.scheme = FittingScheme::Adaptive;
                }
                Ok(rep)
            }
            EstimatorKind::Mis => {
                let mut rep = estimate_mis(self.data, &self.w_on(self.data)?, pe, pb, alpha)?;
                if self.w == "fitted" {
                    rep.scheme = FittingScheme::Adaptive;
                }
                Ok(rep)
            }
            EstimatorKind::DrlM3 => {
                let wf = |d: &TransitionDataset| self.w_on(d);
                let qf = |d: &TransitionDataset| self.q_on(d);
                estimate_drl_m3(self.data, self.scheme, &wf, &qf, pe, pb, g, alpha)
            }
            EstimatorKind::Is => {
                let t = trajs.as_ref().unwrap();
                estimate_is(t, pe, pb, g, omega(t), alpha)
            }
            EstimatorKind::Snis => {
                let t = trajs.as_ref().unwrap();
                estimate_snis(t, pe, pb, g, omega(t))
            }
            EstimatorKind::DrlM1 => {
                let t = trajs.as_ref().unwrap();
                let om = omega(t);
                estimate_drl_m1(t, pe, pb, g, om, &self.step_q(t, om)?, alpha)
            }
            EstimatorKind::DrlM2 => {
                let t = trajs.as_ref().unwrap();
                let om = omega(t);
                let mu = marginal_ratio_mu(self.mdp, pe, pb, om)?.mu;
                estimate_drl_m2(t, pe, pb, g, om, &mu, &self.step_q(t, om)?, alpha)
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    data: &Path,
    mdp: &Path,
    policies: &Path,
    estimators: &[EstimatorKind],
    scheme: FittingScheme,
    w: &str,
    q: &str,
    denom: Denominator,
    truncation: Option<usize>,
    alpha: f64,
    clip_w: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> CliResult<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Failure::Usage(format!("--alpha-ci must lie in (0, 1), got {alpha}")));
    }
    let (m, pe, pb) = load_problem(mdp, policies)?;
    let file = fs::File::open(data).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", data.display())))?;
    let ds = in_file(data, read_transitions_csv(file))?;
    check_indices(&ds, m.n_states(), m.n_actions())?;
    let inputs = EstimateInputs {
        mdp: &m,
        pe: &pe,
        pb: &pb,
        data: &ds,
        scheme,
        w,
        q,
        denom: denom.into(),
        clip_w,
        alpha,
    };
    let mut trajs = None;
    let mut rows = Vec::new();
    for &k in estimators {
        let mut rep = inputs.run(k, &mut trajs, truncation)?;
        rep.seed = seed;
        rows.push(rep.csv_record());
    }
    emit(out, &csv_text(&EstimateReport::CSV_HEADER, &rows)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(mdp: &Path, policies: &Path, n_traj: usize, horizon: usize, init: Init, iid: bool, seed: u64, out: &Path) -> CliResult<()> {
    let (m, _, pb) = load_problem(mdp, policies)?;
    let ds = if iid {
        let stat = stationary_distribution(&m, &pb)?;
        sample_transitions(&m, &pb, &stat, n_traj * horizon, seed)?
    } else {
        trajectory_to_transitions(&sample_trajectories(&m, &pb, n_traj, horizon, init.into(), DEFAULT_BURN_IN, seed)?)
    };
    let mut buf = Vec::new();
    write_transitions_csv(&ds, &mut buf)?;
    write_atomic(out, &buf)?;
    eprintln!("wrote {} transitions to {}", ds.len(), out.display());
    Ok(())
}

fn load_config(run: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = in_file(&run.config, ExperimentConfig::parse(&read_text(&run.config)?))?;
    if let Some(s) = run.seed {
        cfg.master_seed = s;
    }
    if let Some(w) = run.workers {
        cfg.workers = w;
    }
    if let Some(e) = &run.estimators {
        cfg.estimators = e.clone();
    }
    if let Some(s) = run.scheme {
        cfg.scheme = s;
    }
    if let Some(a) = run.alpha_ci {
        if !(a > 0.0 && a < 1.0) {
            return Err(Failure::Usage(format!("--alpha-ci must lie in (0, 1), got {a}")));
        }
        cfg.alpha_ci = a;
    }
    Ok(cfg)
}

fn print_grid(cfg: &ExperimentConfig) {
    println!("estimator,setting,N,T,replications");
    for (k, s, n, t) in cfg.grid() {
        println!("{k},{s},{n},{t},{}", cfg.replications);
    }
}

fn cmd_experiment(run: &RunArgs) -> CliResult<()> {
    let cfg = load_config(run)?;
    if run.dry_run {
        print_grid(&cfg);
        return Ok(());
    }
    let table = experiments::run_replications(&cfg)?;
    write_atomic(&run.out.join("mse_table.csv"), table.to_csv()?.as_bytes())?;
    for (name, text) in table.plot_data(cfg.alpha_ci)? {
        write_atomic(&run.out.join(name), text.as_bytes())?;
    }
    let failed: Vec<String> = table
        .rows
        .iter()
        .filter(|r| r.status == RowStatus::Failed)
        .map(|r| format!("{} {} N={} T={}: {}", r.estimator, r.setting, r.n_traj, r.horizon, r.reason))
        .collect();
    for r in table.rows.iter().filter(|r| r.status == RowStatus::Skipped) {
        log::warn!("skipped {} {} N={} T={}: {}", r.estimator, r.setting, r.n_traj, r.horizon, r.reason);
    }
    eprintln!("wrote {}", run.out.join("mse_table.csv").display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("every replication failed in:\n  {}", failed.join("\n  "))))
    }
}

fn cmd_coverage(run: &RunArgs) -> CliResult<()> {
    let cfg = load_config(run)?;
    if run.dry_run {
        print_grid(&cfg);
        return Ok(());
    }
    let table = experiments::run_coverage(&cfg)?;
    let path = run.out.join("coverage_table.csv");
    write_atomic(&path, table.to_csv()?.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Oracle {
            mdp,
            policies,
            denominator,
            tol,
            out,
        } => cmd_oracle(&mdp, &policies, denominator, tol, out.as_deref()),
        Command::Estimate {
            data,
            mdp,
            policies,
            estimators,
            scheme,
            w,
            q,
            denominator,
            truncation,
            alpha_ci,
            clip_w,
            seed,
            out,
        } => cmd_estimate(
            &data,
            &mdp,
            &policies,
            &estimators,
            scheme,
            &w,
            &q,
            denominator,
            truncation,
            alpha_ci,
            clip_w,
            seed,
            out.as_deref(),
        ),
        Command::Simulate {
            mdp,
            policies,
            n_traj,
            horizon,
            init,
            iid,
            seed,
            out,
        } => cmd_simulate(&mdp, &policies, n_traj, horizon, init, iid, seed, &out),
        Command::Experiment { run } => cmd_experiment(&run),
        Command::Coverage { run } => cmd_coverage(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            let mut cmd = Cli::command();
            cmd.build();
            let sub = std::env::args().skip(1).find(|a| cmd.find_subcommand(a).is_some());
            let usage = match sub {
                Some(name) => cmd.find_subcommand_mut(&name).expect("found above").render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            return ExitCode::from(2);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
