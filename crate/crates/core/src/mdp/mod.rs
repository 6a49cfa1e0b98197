//! Tabular MDPs, policies, and exact dynamic-programming quantities.
//!
//! All tables are stored row-major in flat `Vec<f64>`s. A state-action
//! table is indexed `s * n_actions + a`; the transition tensor is indexed
//! `(s * n_actions + a) * n_states + s_next`.

mod dp;
mod ratios;
pub mod text;

pub use dp::{
    bellman_residual, discounted_visitation, exact_policy_value, exact_q, exact_v,
    stationary_distribution, state_kernel,
};
pub use ratios::{
    cumulative_ratio_nu, density_ratio_eta, initial_ratio, marginal_ratio_mu, marginals,
    oracle_w, oracle_w_against, DenominatorKind, RatioTables,
};

use crate::error::{OpeError, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Law of the reward around its conditional mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardNoise {
    /// `r ~ N(mean, var)`.
    Gaussian,
    /// `r = mean ± sqrt(var)` with probability 1/2 each.
    TwoPoint,
}

impl RewardNoise {
    pub fn name(self) -> &'static str {
        match self {
            RewardNoise::Gaussian => "gaussian",
            RewardNoise::TwoPoint => "two-point",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(RewardNoise::Gaussian),
            "two-point" | "twopoint" => Some(RewardNoise::TwoPoint),
            _ => None,
        }
    }
}

/// A finite MDP with discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward_mean: Vec<f64>,
    reward_var: Vec<f64>,
    reward_noise: RewardNoise,
    gamma: f64,
    r_max: f64,
}

fn check_distribution(row: &[f64], what: impl Fn() -> String) -> std::result::Result<(), String> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(format!("{} has a negative or non-finite entry", what()));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("{} sums to {total}, not 1", what()));
    }
    Ok(())
}

impl TabularMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward_mean: Vec<f64>,
        reward_var: Vec<f64>,
        reward_noise: RewardNoise,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        let bad = |m: String| Err(OpeError::InvalidModel(m));
        if n_states == 0 || n_actions == 0 {
            return bad("n_states and n_actions must be positive".into());
        }
        let sa = n_states * n_actions;
        if transition.len() != sa * n_states {
            return bad(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                sa * n_states
            ));
        }
        if reward_mean.len() != sa || reward_var.len() != sa {
            return bad(format!("reward tables must have {sa} entries"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return bad(format!("gamma must lie strictly inside (0,1), got {gamma}"));
        }
        if !(r_max.is_finite() && r_max >= 0.0) {
            return bad(format!("r_max must be finite and nonnegative, got {r_max}"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            let (s, a) = (i / n_actions, i % n_actions);
            check_distribution(row, || format!("transition row (s={s}, a={a})"))
                .map_err(OpeError::InvalidModel)?;
        }
        for (i, (&m, &v)) in reward_mean.iter().zip(&reward_var).enumerate() {
            let (s, a) = (i / n_actions, i % n_actions);
            if !(m.is_finite() && (0.0..=r_max).contains(&m)) {
                return bad(format!("reward mean {m} at (s={s}, a={a}) outside [0, {r_max}]"));
            }
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("reward variance {v} at (s={s}, a={a}) is negative"));
            }
            if reward_noise == RewardNoise::TwoPoint {
                let sd = v.sqrt();
                if m - sd < -1e-12 || m + sd > r_max + 1e-12 {
                    return bad(format!(
                        "two-point reward support [{}, {}] at (s={s}, a={a}) leaves [0, {r_max}]",
                        m - sd,
                        m + sd
                    ));
                }
            }
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward_mean,
            reward_var,
            reward_noise,
            gamma,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn reward_noise(&self) -> RewardNoise {
        self.reward_noise
    }

    /// Upper bound `r_max / (1 - gamma)` on any q-function.
    pub fn q_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    #[inline]
    pub fn r_mean(&self, s: usize, a: usize) -> f64 {
        self.reward_mean[s * self.n_actions + a]
    }

    #[inline]
    pub fn r_var(&self, s: usize, a: usize) -> f64 {
        self.reward_var[s * self.n_actions + a]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward_mean(&self) -> &[f64] {
        &self.reward_mean
    }

    pub fn reward_var(&self) -> &[f64] {
        &self.reward_var
    }

    /// Same dynamics with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut m = self.clone();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(OpeError::InvalidModel(format!(
                "gamma must lie strictly inside (0,1), got {gamma}"
            )));
        }
        m.gamma = gamma;
        Ok(m)
    }
}

/// A stochastic policy together with its initial state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    action_probs: Vec<f64>,
    initial_dist: Vec<f64>,
}

impl Policy {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        action_probs: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let bad = |m: String| Err(OpeError::InvalidPolicy(m));
        if n_states == 0 || n_actions == 0 {
            return bad("n_states and n_actions must be positive".into());
        }
        if action_probs.len() != n_states * n_actions {
            return bad(format!(
                "action_probs has {} entries, expected {}",
                action_probs.len(),
                n_states * n_actions
            ));
        }
        if initial_dist.len() != n_states {
            return bad(format!(
                "initial_dist has {} entries, expected {n_states}",
                initial_dist.len()
            ));
        }
        for (s, row) in action_probs.chunks(n_actions).enumerate() {
            check_distribution(row, || format!("action row for state {s}"))
                .map_err(OpeError::InvalidPolicy)?;
        }
        check_distribution(&initial_dist, || "initial_dist".to_string())
            .map_err(OpeError::InvalidPolicy)?;
        Ok(Policy {
            n_states,
            n_actions,
            action_probs,
            initial_dist,
        })
    }

    /// Uniform over actions, with the given initial distribution.
    pub fn uniform(n_states: usize, n_actions: usize, initial_dist: Vec<f64>) -> Result<Self> {
        Policy::new(
            n_states,
            n_actions,
            vec![1.0 / n_actions as f64; n_states * n_actions],
            initial_dist,
        )
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize], initial_dist: Vec<f64>) -> Result<Self> {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(OpeError::InvalidPolicy(format!(
                    "action {a} out of range in state {s}"
                )));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Policy::new(n_states, n_actions, probs, initial_dist)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.action_probs[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.action_probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn action_probs(&self) -> &[f64] {
        &self.action_probs
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Same action probabilities, different initial distribution.
    pub fn with_initial(&self, initial_dist: Vec<f64>) -> Result<Self> {
        Policy::new(self.n_states, self.n_actions, self.action_probs.clone(), initial_dist)
    }

    /// `weight * self + (1 - weight) * other`, action rows and initial
    /// distributions alike.
    pub fn mix(&self, other: &Policy, weight: f64) -> Result<Self> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(OpeError::Dimension("policies of different shape".into()));
        }
        let lerp = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(y)
                .map(|(a, b)| weight * a + (1.0 - weight) * b)
                .collect()
        };
        let mut probs = lerp(&self.action_probs, &other.action_probs);
        let mut init = lerp(&self.initial_dist, &other.initial_dist);
        renormalize_rows(&mut probs, self.n_actions);
        renormalize_rows(&mut init, self.n_states);
        Policy::new(self.n_states, self.n_actions, probs, init)
    }

    /// Errors unless the policy has the MDP's state and action counts.
    pub fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(OpeError::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Divides each row by its sum so rounding in convex combinations does not
/// trip the stochasticity check.
pub(crate) fn renormalize_rows(values: &mut [f64], width: usize) {
    for row in values.chunks_mut(width) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
}

/// A real-valued table over state-action pairs (used for η and μ_t).
#[derive(Debug, Clone, PartialEq)]
pub struct SaTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl SaTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        SaTable {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        SaTable {
            n_states,
            n_actions,
            values: vec![value; n_states * n_actions],
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Where a nuisance estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Oracle,
    Fitted,
    Corrupted,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Oracle => "oracle",
            Provenance::Fitted => "fitted",
            Provenance::Corrupted => "corrupted",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(Provenance::Oracle),
            "fitted" => Some(Provenance::Fitted),
            "corrupted" => Some(Provenance::Corrupted),
            _ => None,
        }
    }
}

/// A q-function over state-action pairs, in units of discounted cumulative
/// reward.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub table: SaTable,
    pub provenance: Provenance,
}

impl QFunction {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_states * n_actions);
        QFunction {
            table: SaTable {
                n_states,
                n_actions,
                values,
            },
            provenance: Provenance::Fitted,
        }
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QFunction::new(n_states, n_actions, vec![0.0; n_states * n_actions])
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn n_states(&self) -> usize {
        self.table.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.table.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.table.get(s, a)
    }

    pub fn values(&self) -> &[f64] {
        &self.table.values
    }

    /// Clamps every entry into `[0, q_max]`; returns how many entries moved.
    pub fn clip(&mut self, q_max: f64) -> usize {
        let mut moved = 0;
        for v in self.table.values.iter_mut() {
            let c = v.clamp(0.0, q_max);
            if c != *v {
                moved += 1;
                *v = c;
            }
        }
        moved
    }

    /// Every entry shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut q = self.clone();
        for v in q.table.values.iter_mut() {
            *v += delta;
        }
        q
    }
}

/// A stationary density ratio over states.
#[derive(Debug, Clone, PartialEq)]
pub struct WFunction {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl WFunction {
    pub fn new(values: Vec<f64>) -> Self {
        WFunction {
            values,
            provenance: Provenance::Fitted,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    #[inline]
    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Clamps into `[0, c_w]`; returns how many entries moved.
    pub fn clip(&mut self, c_w: f64) -> usize {
        let mut moved = 0;
        for v in self.values.iter_mut() {
            let c = v.clamp(0.0, c_w);
            if c != *v {
                moved += 1;
                *v = c;
            }
        }
        moved
    }
}
