//! Monte-Carlo harness: environments, policy pairs, misspecification
//! settings, replication loops and the resulting MSE and coverage tables.
//!
//! Every replication draws its data from a seed derived from
//! `(master_seed, replication, N, T)`, so all estimators and settings in a
//! cell see the same data and results do not depend on the worker count.

mod config;
mod env;
mod table;

use std::time::Instant;

use rayon::prelude::*;

pub use config::{
    EstimatorKind, ExperimentConfig, PolicyPairKind, QModel, SamplingMode, Setting, TargetStart,
};
pub use env::{
    build_env, make_chain, make_gridworld, make_greedy_vs_uniform, make_policy_pair, make_random_mdp,
    suboptimal_policy, EnvSpec, GridRewards, DEFAULT_SWEEPS, SOFTENING,
};
pub use table::{coverage_fraction, CoverageRow, CoverageTable, MseRow, MseTable, Outcome, RowStatus};

use crate::error::{OpeError, Result};
use crate::estimators::{
    estimate_dm, estimate_drl_m1, estimate_drl_m2, estimate_drl_m3, estimate_is, estimate_mis, estimate_snis,
    fit_step_q_by_folds, EstimateReport, FittingScheme, StepNuisance,
};
use crate::mdp::{
    density_ratio_eta, exact_policy_value, exact_q, marginal_ratio_mu, oracle_w_against, stationary_distribution,
    Policy, QFunction, SaTable, TabularMdp, WFunction,
};
use crate::nuisance::{
    corrupt_q, corrupt_w, fit_q_lstdq, fit_q_model_based, fit_q_truncated_model_based, fit_w_linear, EmpiricalModel,
    FeatureMap, FitOptions, Moments, NuisancePair,
};
use crate::rng::Seed;
use crate::sampling::{
    sample_trajectories, sample_transitions, trajectory_to_transitions, InitRegime, TrajectoryDataset,
    TransitionDataset, DEFAULT_BURN_IN,
};

/// Noise injected into a misspecified nuisance and the clipping applied
/// afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub mean: f64,
    pub sd: f64,
    /// `q` is clipped into `[0, q_max]` when set.
    pub q_max: Option<f64>,
    /// `w` is clipped into `[0, c_w]`; negative values always become 0.
    pub c_w: Option<f64>,
}

impl Corruption {
    /// `N(1, 1)` noise.
    pub fn standard(q_max: Option<f64>, c_w: Option<f64>) -> Self {
        Corruption {
            mean: 1.0,
            sd: 1.0,
            q_max,
            c_w,
        }
    }
}

/// Corrupts the nuisance that `setting` declares misspecified.
pub fn apply_setting(pair: &NuisancePair, setting: Setting, corruption: &Corruption, seed: impl Into<Seed>) -> NuisancePair {
    let seed = seed.into();
    let mut out = pair.clone();
    match setting {
        Setting::BothCorrect => {}
        Setting::OnlyWCorrect => out.q = setting_q(&pair.q, setting, corruption, seed),
        Setting::OnlyQCorrect => out.w = setting_w(&pair.w, setting, corruption, seed),
    }
    out
}

fn setting_q(q: &QFunction, setting: Setting, c: &Corruption, seed: Seed) -> QFunction {
    if setting == Setting::OnlyWCorrect {
        corrupt_q(q, c.mean, c.sd, seed.child(1), c.q_max).0
    } else {
        q.clone()
    }
}

fn setting_w(w: &WFunction, setting: Setting, c: &Corruption, seed: Seed) -> WFunction {
    if setting == Setting::OnlyQCorrect {
        corrupt_w(w, c.mean, c.sd, seed.child(2), Some(c.c_w.unwrap_or(f64::INFINITY))).0
    } else {
        w.clone()
    }
}

/// Environment, policies and oracle quantities shared by all replications.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mdp: TabularMdp,
    pub pi_e: Policy,
    pub pi_b: Policy,
    /// Exact policy value of `pi_e` from its initial distribution.
    pub rho: f64,
    /// Stationary distribution of the behavior chain.
    pub stationary: Vec<f64>,
    pub eta: SaTable,
    /// Oracle `w` against the behavior stationary distribution.
    pub w_oracle: WFunction,
    pub q_oracle: QFunction,
    pub features: FeatureMap,
}

/// Builds the environment and policies of `cfg`. The behavior initial
/// distribution is the distribution the data actually start from; the
/// target initial distribution follows `cfg.target_start`.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let mdp = build_env(&cfg.env, cfg.gamma)?;
    let (pe, pb) = match cfg.policy_pair {
        PolicyPairKind::Mixture => make_policy_pair(&mdp, cfg.alpha_mix, cfg.policy_seed, cfg.sweeps)?,
        PolicyPairKind::GreedyVsUniform => make_greedy_vs_uniform(&mdp, cfg.sweeps)?,
    };
    let stationary = stationary_distribution(&mdp, &pb)?;
    let n = mdp.n_states();
    let uniform = vec![1.0 / n as f64; n];
    let p0_b = match cfg.sampling {
        SamplingMode::Transitions | SamplingMode::Trajectories(InitRegime::StationaryInit) => stationary.clone(),
        SamplingMode::Trajectories(_) => uniform.clone(),
    };
    let p0_e = match cfg.target_start {
        TargetStart::BehaviorStationary => stationary.clone(),
        TargetStart::Uniform => uniform,
    };
    let pi_e = pe.with_initial(p0_e)?;
    let pi_b = pb.with_initial(p0_b)?;
    Ok(Problem {
        rho: exact_policy_value(&mdp, &pi_e)?,
        eta: density_ratio_eta(&pi_e, &pi_b)?,
        w_oracle: oracle_w_against(&mdp, &pi_e, &stationary)?,
        q_oracle: exact_q(&mdp, &pi_e)?,
        features: FeatureMap::tabular(mdp.n_states(), mdp.n_actions()),
        stationary,
        mdp,
        pi_e,
        pi_b,
    })
}

/// Raw outcomes for one `(N, T)` cell, indexed
/// `[replication][setting * n_estimators + estimator]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResults {
    pub n_traj: usize,
    pub horizon: usize,
    pub outcomes: Vec<Vec<Outcome>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResults {
    pub rho: f64,
    pub estimators: Vec<EstimatorKind>,
    pub settings: Vec<Setting>,
    pub alpha_ci: f64,
    pub cells: Vec<CellResults>,
}

impl RawResults {
    fn column<'a>(&self, cell: &'a CellResults, si: usize, ei: usize) -> Vec<&'a Outcome> {
        let idx = si * self.estimators.len() + ei;
        cell.outcomes.iter().map(|rep| &rep[idx]).collect()
    }

    /// Rows ordered by `(N, T)`, then setting, then estimator, as in the config.
    pub fn mse_table(&self) -> MseTable {
        let mut rows = Vec::new();
        for cell in &self.cells {
            for (si, &s) in self.settings.iter().enumerate() {
                for (ei, &e) in self.estimators.iter().enumerate() {
                    rows.push(table::mse_row(e, s, cell.n_traj, cell.horizon, self.rho, &self.column(cell, si, ei)));
                }
            }
        }
        MseTable { rows }
    }

    pub fn coverage_table(&self) -> CoverageTable {
        let mut rows = Vec::new();
        for cell in &self.cells {
            for (si, &s) in self.settings.iter().enumerate() {
                for (ei, &e) in self.estimators.iter().enumerate() {
                    let col = self.column(cell, si, ei);
                    rows.push(table::coverage_row(e, s, cell.n_traj, cell.horizon, self.rho, self.alpha_ci, &col));
                }
            }
        }
        CoverageTable { rows }
    }
}

/// Per-cell quantities that do not depend on the replication.
struct CellShared {
    omega: usize,
    mu: Option<std::result::Result<Vec<SaTable>, String>>,
    q_steps_oracle: Option<Vec<QFunction>>,
}

fn cell_seed(cfg: &ExperimentConfig, rep: usize, n: usize, t: usize) -> Seed {
    Seed::new(cfg.master_seed).replication(rep as u64).child(((n as u64) << 32) | t as u64)
}

/// Corruption seed for nuisances fitted on `data`: the fold is identified
/// by its first transition.
fn fold_seed(cell: Seed, data: &TransitionDataset) -> Seed {
    let tag = data.transitions.first().map_or(0, |tr| ((tr.traj_id as u64) << 32) | tr.t as u64);
    cell.child(tag)
}

fn step_fold_seed(cell: Seed, trajs: &TrajectoryDataset) -> Seed {
    let tag = trajs
        .trajectories
        .first()
        .map_or(0, |tr| tr.rewards.first().map_or(0, |r| r.to_bits()) ^ ((tr.states[0] as u64) << 48));
    cell.child(tag ^ trajs.n_traj() as u64)
}

fn outcome(res: Result<EstimateReport>) -> Outcome {
    match res {
        Ok(rep) => Outcome::Estimate {
            rho_hat: rep.rho_hat,
            ci: rep.ci,
        },
        Err(OpeError::Infeasible(m)) => Outcome::Infeasible(m),
        Err(OpeError::Fold { source, .. }) if matches!(*source, OpeError::Infeasible(_)) => {
            Outcome::Infeasible(source.to_string())
        }
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

struct Replication<'a> {
    p: &'a Problem,
    cfg: &'a ExperimentConfig,
    shared: &'a CellShared,
    seed: Seed,
    corruption: Corruption,
    trans: TransitionDataset,
    trajs: Option<TrajectoryDataset>,
}

impl Replication<'_> {
    fn oracle(&self) -> bool {
        self.cfg.scheme == FittingScheme::OracleNuisance
    }

    fn moments(&self, data: &TransitionDataset) -> Result<Moments> {
        Moments::empirical(data, self.p.mdp.n_states(), self.p.mdp.n_actions())
    }

    fn w_on(&self, data: &TransitionDataset, setting: Setting) -> Result<WFunction> {
        let w = if self.oracle() {
            self.p.w_oracle.clone()
        } else {
            let opts = FitOptions {
                clip_w: self.cfg.clip_w,
                ..FitOptions::default()
            };
            let m = self.moments(data)?;
            fit_w_linear(&m, &self.p.features, &self.p.eta, self.p.pi_e.initial_dist(), self.cfg.gamma, &opts)?.w
        };
        Ok(setting_w(&w, setting, &self.corruption, fold_seed(self.seed, data)))
    }

    fn q_on(&self, data: &TransitionDataset, setting: Setting) -> Result<QFunction> {
        let q = if self.oracle() {
            self.p.q_oracle.clone()
        } else {
            let m = self.moments(data)?;
            match self.cfg.q_model {
                QModel::ModelBased => fit_q_model_based(&m, &self.p.pi_e, self.cfg.gamma, self.p.mdp.r_max())?,
                QModel::Lstdq => {
                    let opts = FitOptions {
                        clip_q: Some(self.p.mdp.q_max()),
                        ..FitOptions::default()
                    };
                    fit_q_lstdq(&m, &self.p.features, &self.p.pi_e, self.cfg.gamma, &opts)?.q
                }
            }
        };
        Ok(setting_q(&q, setting, &self.corruption, fold_seed(self.seed, data)))
    }

    fn step_q(&self, setting: Setting) -> Result<StepNuisance> {
        let trajs = self.trajs.as_ref().expect("checked by caller");
        let omega = self.shared.omega;
        fit_step_q_by_folds(trajs, self.cfg.scheme, |td: &TrajectoryDataset| {
            let qs = match &self.shared.q_steps_oracle {
                Some(qs) => qs.clone(),
                None => {
                    let m = self.moments(&trajectory_to_transitions(td))?;
                    fit_q_truncated_model_based(&m, &self.p.pi_e, self.cfg.gamma, self.p.mdp.r_max(), omega)
                }
            };
            if setting != Setting::OnlyWCorrect {
                return Ok(qs);
            }
            let seed = step_fold_seed(self.seed, td);
            Ok(qs
                .iter()
                .enumerate()
                .map(|(t, q)| setting_q(q, setting, &self.corruption, seed.child(t as u64)))
                .collect())
        })
    }

    fn run(&self, kind: EstimatorKind, setting: Setting) -> Outcome {
        let (p, cfg) = (self.p, self.cfg);
        let (pe, pb, g, alpha) = (&p.pi_e, &p.pi_b, cfg.gamma, cfg.alpha_ci);
        if kind.needs_trajectories() && self.trajs.is_none() {
            return Outcome::Infeasible(format!("{} needs trajectory sampling", kind.name()));
        }
        let res = match kind {
            EstimatorKind::Dm => self.q_on(&self.trans, setting).map(|q| estimate_dm(&q, pe, g)),
            EstimatorKind::Mis => self.w_on(&self.trans, setting).and_then(|w| estimate_mis(&self.trans, &w, pe, pb, alpha)),
            EstimatorKind::DrlM3 => {
                let wf = |d: &TransitionDataset| self.w_on(d, setting);
                let qf = |d: &TransitionDataset| self.q_on(d, setting);
                estimate_drl_m3(&self.trans, cfg.scheme, &wf, &qf, pe, pb, g, alpha)
            }
            EstimatorKind::Is => estimate_is(self.trajs.as_ref().unwrap(), pe, pb, g, self.shared.omega, alpha),
            EstimatorKind::Snis => estimate_snis(self.trajs.as_ref().unwrap(), pe, pb, g, self.shared.omega),
            EstimatorKind::DrlM1 => self.step_q(setting).and_then(|nuis| {
                estimate_drl_m1(self.trajs.as_ref().unwrap(), pe, pb, g, self.shared.omega, &nuis, alpha)
            }),
            EstimatorKind::DrlM2 => match self.shared.mu.as_ref().expect("computed for drl-m2") {
                Err(m) => return Outcome::Failed(m.clone()),
                Ok(mu) => self.step_q(setting).and_then(|nuis| {
                    estimate_drl_m2(self.trajs.as_ref().unwrap(), pe, pb, g, self.shared.omega, mu, &nuis, alpha)
                }),
            },
        };
        outcome(res)
    }
}

fn replicate(p: &Problem, cfg: &ExperimentConfig, shared: &CellShared, n: usize, t: usize, rep: usize) -> Vec<Outcome> {
    let seed = cell_seed(cfg, rep, n, t);
    let width = cfg.settings.len() * cfg.estimators.len();
    let data = match cfg.sampling {
        SamplingMode::Trajectories(init) => sample_trajectories(&p.mdp, &p.pi_b, n, t, init, DEFAULT_BURN_IN, seed)
            .map(|tr| (trajectory_to_transitions(&tr), Some(tr))),
        SamplingMode::Transitions => sample_transitions(&p.mdp, &p.pi_b, &p.stationary, n * t, seed).map(|d| (d, None)),
    };
    let (trans, trajs) = match data {
        Ok(d) => d,
        Err(e) => return vec![Outcome::Failed(e.to_string()); width],
    };
    let r = Replication {
        p,
        cfg,
        shared,
        seed,
        corruption: Corruption {
            mean: cfg.corruption_mean,
            sd: cfg.corruption_sd,
            q_max: Some(p.mdp.q_max()),
            c_w: cfg.clip_w,
        },
        trans,
        trajs,
    };
    let mut out = Vec::with_capacity(width);
    for &s in &cfg.settings {
        for &k in &cfg.estimators {
            out.push(r.run(k, s));
        }
    }
    out
}

fn cell_shared(p: &Problem, cfg: &ExperimentConfig, t: usize) -> CellShared {
    let omega = cfg.truncation.map_or(t - 1, |k| k.min(t - 1));
    let wants = |k: EstimatorKind| cfg.estimators.contains(&k) && matches!(cfg.sampling, SamplingMode::Trajectories(_));
    let steps = wants(EstimatorKind::DrlM1) || wants(EstimatorKind::DrlM2);
    CellShared {
        omega,
        mu: wants(EstimatorKind::DrlM2).then(|| {
            marginal_ratio_mu(&p.mdp, &p.pi_e, &p.pi_b, omega)
                .map(|r| r.mu)
                .map_err(|e| e.to_string())
        }),
        q_steps_oracle: (steps && cfg.scheme == FittingScheme::OracleNuisance)
            .then(|| EmpiricalModel::from_mdp(&p.mdp).truncated_q(&p.pi_e, cfg.gamma, omega)),
    }
}

/// Runs every replication of every cell and keeps the raw outcomes.
pub fn run(cfg: &ExperimentConfig) -> Result<RawResults> {
    let p = build_problem(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| OpeError::InvalidModel(format!("cannot start worker pool: {e}")))?;
    let mut cells = Vec::new();
    for (n, t) in cfg.cells() {
        let start = Instant::now();
        let shared = cell_shared(&p, cfg, t);
        let outcomes: Vec<Vec<Outcome>> = pool.install(|| {
            (0..cfg.replications)
                .into_par_iter()
                .map(|rep| replicate(&p, cfg, &shared, n, t, rep))
                .collect()
        });
        log::info!(
            "cell N={n} T={t}: {} replications in {:.1}s",
            cfg.replications,
            start.elapsed().as_secs_f64()
        );
        cells.push(CellResults {
            n_traj: n,
            horizon: t,
            outcomes,
        });
    }
    Ok(RawResults {
        rho: p.rho,
        estimators: cfg.estimators.clone(),
        settings: cfg.settings.clone(),
        alpha_ci: cfg.alpha_ci,
        cells,
    })
}

/// MSE, squared bias, variance and coverage per `(estimator, setting, N, T)`.
pub fn run_replications(cfg: &ExperimentConfig) -> Result<MseTable> {
    Ok(run(cfg)?.mse_table())
}

/// Fraction of replications whose interval covers the true value.
pub fn run_coverage(cfg: &ExperimentConfig) -> Result<CoverageTable> {
    Ok(run(cfg)?.coverage_table())
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (crate::linalg::mean(&lx), crate::linalg::mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
