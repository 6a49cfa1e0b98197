//! Flat `key = value` experiment configuration.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment that runs
//! to the end of the line; blank lines are ignored; keys may appear once.
//! Lists are comma separated. Every key is optional; see
//! [`ExperimentConfig::default`] for the defaults.
//!
//! | key | values |
//! |-----|--------|
//! | `env` | `gridworld`, `random`, `chain` |
//! | `grid_width`, `grid_height` | cells per side (`gridworld`) |
//! | `slip_prob` | probability in `[0, 1]` (`gridworld`, `chain`) |
//! | `goal_reward`, `step_reward`, `reward_sd`, `reset_from_goal` | gridworld rewards |
//! | `random_states`, `random_actions`, `env_seed` | `random` |
//! | `chain_length` | `chain` |
//! | `gamma` | discount in `(0, 1)` |
//! | `alpha_mix` | weight of the target policy in the behavior mixture |
//! | `policy_pair` | `mixture` or `greedy-vs-uniform` |
//! | `policy_seed`, `sweeps` | policy construction |
//! | `sampling` | `trajectories` or `transitions` |
//! | `init` | `stationary`, `burn-in`, `arbitrary` (trajectory start) |
//! | `target_start` | `behavior-stationary` or `uniform` |
//! | `Ns`, `Ts` | integer lists |
//! | `estimators` | list of `is`, `snis`, `dm`, `mis`, `drl-m1`, `drl-m2`, `drl-m3` |
//! | `settings` | list of `both-correct`, `only-w-correct`, `only-q-correct` |
//! | `scheme` | `adaptive`, `cross-trajectory`, `cross-time`, `oracle` |
//! | `q_model` | `model-based` or `lstdq` |
//! | `truncation` | `full` or an integer step cap for trajectory estimators |
//! | `replications`, `master_seed`, `workers` | run control (`workers = 0`: all cores) |
//! | `alpha_ci` | interval level is `1 - alpha_ci` |
//! | `clip_w` | `none` or an upper clip for `w` |
//! | `corruption_mean`, `corruption_sd` | noise added under misspecified settings |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::env::{EnvSpec, GridRewards, DEFAULT_SWEEPS};
use crate::error::{OpeError, Result};
use crate::estimators::FittingScheme;
use crate::sampling::InitRegime;

/// Which nuisance, if any, is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    BothCorrect,
    /// `q` is corrupted.
    OnlyWCorrect,
    /// `w` is corrupted.
    OnlyQCorrect,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::BothCorrect => "both-correct",
            Setting::OnlyWCorrect => "only-w-correct",
            Setting::OnlyQCorrect => "only-q-correct",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "both-correct" | "1" => Some(Setting::BothCorrect),
            "only-w-correct" | "2" => Some(Setting::OnlyWCorrect),
            "only-q-correct" | "3" => Some(Setting::OnlyQCorrect),
            _ => None,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Is,
    Snis,
    Dm,
    Mis,
    DrlM1,
    DrlM2,
    DrlM3,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Is,
        EstimatorKind::Snis,
        EstimatorKind::Dm,
        EstimatorKind::Mis,
        EstimatorKind::DrlM1,
        EstimatorKind::DrlM2,
        EstimatorKind::DrlM3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Is => "is",
            EstimatorKind::Snis => "snis",
            EstimatorKind::Dm => "dm",
            EstimatorKind::Mis => "mis",
            EstimatorKind::DrlM1 => "drl-m1",
            EstimatorKind::DrlM2 => "drl-m2",
            EstimatorKind::DrlM3 => "drl-m3",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "is" => Some(EstimatorKind::Is),
            "snis" => Some(EstimatorKind::Snis),
            "dm" => Some(EstimatorKind::Dm),
            "mis" => Some(EstimatorKind::Mis),
            "drl-m1" | "drl1" => Some(EstimatorKind::DrlM1),
            "drl-m2" | "drl2" => Some(EstimatorKind::DrlM2),
            "drl-m3" | "drl3" => Some(EstimatorKind::DrlM3),
            _ => None,
        }
    }

    /// Whether the estimator consumes whole trajectories.
    pub fn needs_trajectories(self) -> bool {
        matches!(self, EstimatorKind::Is | EstimatorKind::Snis | EstimatorKind::DrlM1 | EstimatorKind::DrlM2)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyPairKind {
    /// Softened optimal target, behavior mixed with a softened suboptimal policy.
    Mixture,
    /// Deterministic greedy target against the uniform behavior policy.
    GreedyVsUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// `N` trajectories of `T` steps.
    Trajectories(InitRegime),
    /// `N * T` iid transitions from the behavior stationary distribution.
    Transitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetStart {
    BehaviorStationary,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QModel {
    ModelBased,
    Lstdq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub gamma: f64,
    pub alpha_mix: f64,
    pub policy_pair: PolicyPairKind,
    pub policy_seed: u64,
    pub sweeps: usize,
    pub sampling: SamplingMode,
    pub target_start: TargetStart,
    pub ns: Vec<usize>,
    pub ts: Vec<usize>,
    pub estimators: Vec<EstimatorKind>,
    pub settings: Vec<Setting>,
    pub scheme: FittingScheme,
    pub q_model: QModel,
    /// Step cap for trajectory estimators; `None` uses `T - 1`.
    pub truncation: Option<usize>,
    pub replications: usize,
    pub master_seed: u64,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    pub alpha_ci: f64,
    pub clip_w: Option<f64>,
    pub corruption_mean: f64,
    pub corruption_sd: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::Random {
                n_states: 5,
                n_actions: 3,
                seed: 0,
                noise_sd: 0.1,
            },
            gamma: 0.98,
            alpha_mix: 0.4,
            policy_pair: PolicyPairKind::Mixture,
            policy_seed: 0,
            sweeps: DEFAULT_SWEEPS,
            sampling: SamplingMode::Trajectories(InitRegime::StationaryInit),
            target_start: TargetStart::BehaviorStationary,
            ns: vec![1],
            ts: vec![1000],
            estimators: vec![EstimatorKind::Dm, EstimatorKind::Mis, EstimatorKind::DrlM3],
            settings: vec![Setting::BothCorrect],
            scheme: FittingScheme::Adaptive,
            q_model: QModel::ModelBased,
            truncation: None,
            replications: 100,
            master_seed: 0,
            workers: 0,
            alpha_ci: 0.05,
            clip_w: None,
            corruption_mean: 1.0,
            corruption_sd: 1.0,
        }
    }
}

const KEYS: &[&str] = &[
    "env",
    "grid_width",
    "grid_height",
    "slip_prob",
    "goal_reward",
    "step_reward",
    "reward_sd",
    "reset_from_goal",
    "random_states",
    "random_actions",
    "env_seed",
    "chain_length",
    "gamma",
    "alpha_mix",
    "policy_pair",
    "policy_seed",
    "sweeps",
    "sampling",
    "init",
    "target_start",
    "Ns",
    "Ts",
    "estimators",
    "settings",
    "scheme",
    "q_model",
    "truncation",
    "replications",
    "master_seed",
    "workers",
    "alpha_ci",
    "clip_w",
    "corruption_mean",
    "corruption_sd",
];

struct Entry {
    line: usize,
    column: usize,
    value: String,
}

struct Entries(BTreeMap<String, Entry>);

impl Entries {
    fn raw(&self, key: &str) -> Option<&Entry> {
        self.0.get(key)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| OpeError::parse(e.line, e.column, format!("bad value `{}` for {key}", e.value))),
        }
    }

    fn named<T>(&self, key: &str, default: T, from: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => from(&e.value).ok_or_else(|| OpeError::parse(e.line, e.column, format!("unknown {key} `{}`", e.value))),
        }
    }

    fn list<T>(&self, key: &str, default: Vec<T>, from: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
        let Some(e) = self.raw(key) else {
            return Ok(default);
        };
        let mut out = Vec::new();
        let mut offset = 0;
        for item in e.value.split(',') {
            let trimmed = item.trim();
            let col = e.column + offset + (item.len() - item.trim_start().len());
            offset += item.len() + 1;
            out.push(from(trimmed).ok_or_else(|| OpeError::parse(e.line, col, format!("bad {key} entry `{trimmed}`")))?);
        }
        Ok(out)
    }

    fn check(&self, key: &str, ok: bool, what: &str) -> Result<()> {
        match (ok, self.raw(key)) {
            (true, _) => Ok(()),
            (false, Some(e)) => Err(OpeError::parse(e.line, e.column, format!("{key} {what}"))),
            (false, None) => Err(OpeError::parse(0, 0, format!("{key} {what}"))),
        }
    }
}

impl ExperimentConfig {
    /// Parses the flat configuration format described in the module docs.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                let col = content.len() - content.trim_start().len() + 1;
                return Err(OpeError::parse(line, col, "expected `key = value`"));
            };
            let key = k.trim();
            let key_col = k.len() - k.trim_start().len() + 1;
            if !KEYS.contains(&key) {
                return Err(OpeError::parse(line, key_col, format!("unknown key `{key}`")));
            }
            let value = v.trim();
            if value.is_empty() {
                return Err(OpeError::parse(line, k.len() + 2, format!("missing value for {key}")));
            }
            let column = k.len() + 2 + (v.len() - v.trim_start().len());
            let entry = Entry {
                line,
                column,
                value: value.to_string(),
            };
            if map.insert(key.to_string(), entry).is_some() {
                return Err(OpeError::parse(line, key_col, format!("duplicate key `{key}`")));
            }
        }
        Self::from_entries(&Entries(map))
    }

    fn from_entries(e: &Entries) -> Result<Self> {
        let d = ExperimentConfig::default();
        let noise_sd = e.get("reward_sd", 0.1)?;
        let slip_prob = e.get("slip_prob", 0.1)?;
        let env = match e.get("env", "random".to_string())?.as_str() {
            "gridworld" => EnvSpec::Gridworld {
                width: e.get("grid_width", 5)?,
                height: e.get("grid_height", 5)?,
                slip_prob,
                rewards: GridRewards {
                    goal_mean: e.get("goal_reward", 0.8)?,
                    step_mean: e.get("step_reward", 0.1)?,
                    noise_sd,
                    reset_from_goal: e.get("reset_from_goal", true)?,
                },
            },
            "random" => EnvSpec::Random {
                n_states: e.get("random_states", 5)?,
                n_actions: e.get("random_actions", 3)?,
                seed: e.get("env_seed", 0)?,
                noise_sd,
            },
            "chain" => EnvSpec::Chain {
                length: e.get("chain_length", 5)?,
                slip_prob,
                noise_sd,
            },
            other => {
                let en = e.raw("env").expect("env present when not default");
                return Err(OpeError::parse(en.line, en.column, format!("unknown env `{other}`")));
            }
        };
        let init = e.named("init", InitRegime::StationaryInit, InitRegime::from_name)?;
        let sampling = e.named("sampling", SamplingMode::Trajectories(init), |s| match s {
            "trajectories" => Some(SamplingMode::Trajectories(init)),
            "transitions" => Some(SamplingMode::Transitions),
            _ => None,
        })?;
        let positive = |s: &str| s.parse::<usize>().ok().filter(|&x| x > 0);
        let cfg = ExperimentConfig {
            env,
            gamma: e.get("gamma", d.gamma)?,
            alpha_mix: e.get("alpha_mix", d.alpha_mix)?,
            policy_pair: e.named("policy_pair", d.policy_pair, |s| match s {
                "mixture" => Some(PolicyPairKind::Mixture),
                "greedy-vs-uniform" => Some(PolicyPairKind::GreedyVsUniform),
                _ => None,
            })?,
            policy_seed: e.get("policy_seed", d.policy_seed)?,
            sweeps: e.get("sweeps", d.sweeps)?,
            sampling,
            target_start: e.named("target_start", d.target_start, |s| match s {
                "behavior-stationary" => Some(TargetStart::BehaviorStationary),
                "uniform" => Some(TargetStart::Uniform),
                _ => None,
            })?,
            ns: e.list("Ns", d.ns.clone(), positive)?,
            ts: e.list("Ts", d.ts.clone(), positive)?,
            estimators: e.list("estimators", d.estimators.clone(), EstimatorKind::from_name)?,
            settings: e.list("settings", d.settings.clone(), Setting::from_name)?,
            scheme: e.named("scheme", d.scheme, FittingScheme::from_name)?,
            q_model: e.named("q_model", d.q_model, |s| match s {
                "model-based" => Some(QModel::ModelBased),
                "lstdq" => Some(QModel::Lstdq),
                _ => None,
            })?,
            truncation: e.named("truncation", None, |s| match s {
                "full" => Some(None),
                _ => s.parse().ok().map(Some),
            })?,
            replications: e.get("replications", d.replications)?,
            master_seed: e.get("master_seed", d.master_seed)?,
            workers: e.get("workers", d.workers)?,
            alpha_ci: e.get("alpha_ci", d.alpha_ci)?,
            clip_w: e.named("clip_w", None, |s| match s {
                "none" => Some(None),
                _ => s.parse::<f64>().ok().filter(|c| *c > 0.0).map(Some),
            })?,
            corruption_mean: e.get("corruption_mean", d.corruption_mean)?,
            corruption_sd: e.get("corruption_sd", d.corruption_sd)?,
        };
        e.check("gamma", cfg.gamma > 0.0 && cfg.gamma < 1.0, "must lie in (0, 1)")?;
        e.check("alpha_mix", (0.0..=1.0).contains(&cfg.alpha_mix), "must lie in [0, 1]")?;
        e.check("alpha_ci", cfg.alpha_ci > 0.0 && cfg.alpha_ci < 1.0, "must lie in (0, 1)")?;
        e.check("replications", cfg.replications >= 1, "must be at least 1")?;
        e.check("estimators", !cfg.estimators.is_empty(), "must not be empty")?;
        e.check("corruption_sd", cfg.corruption_sd >= 0.0 && cfg.corruption_sd.is_finite(), "must be finite and nonnegative")?;
        e.check("slip_prob", (0.0..=1.0).contains(&slip_prob), "must lie in [0, 1]")?;
        Ok(cfg)
    }

    /// The `(N, T)` grid in run order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.ns.iter().flat_map(|&n| self.ts.iter().map(move |&t| (n, t))).collect()
    }

    /// Every `(estimator, setting, N, T)` row the run will produce.
    pub fn grid(&self) -> Vec<(EstimatorKind, Setting, usize, usize)> {
        let mut out = Vec::new();
        for (n, t) in self.cells() {
            for &s in &self.settings {
                for &k in &self.estimators {
                    out.push((k, s, n, t));
                }
            }
        }
        out
    }
}
