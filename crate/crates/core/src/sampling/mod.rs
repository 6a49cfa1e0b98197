//! Data generation under the two sampling regimes: independent transitions,
//! and trajectories from the behavior chain.

mod csvio;

pub use csvio::{check_indices, read_transitions_csv, write_transitions_csv};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{OpeError, Result};
use crate::mdp::{stationary_distribution, Policy, RewardNoise, TabularMdp};
use crate::rng::{Seed, Stream};

/// Default number of discarded steps for [`InitRegime::ErgodicBurnIn`].
pub const DEFAULT_BURN_IN: usize = 1000;

/// One `(s, a, r, s')` quadruplet with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub traj_id: usize,
    pub t: usize,
}

/// A single trajectory with `T` steps: `states` has `T + 1` entries (the
/// last is the final next-state), `actions` and `rewards` have `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// How the first state of each trajectory was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRegime {
    /// From the behavior chain's invariant distribution.
    StationaryInit,
    /// From `pi_b`'s initial distribution followed by discarded burn-in steps.
    ErgodicBurnIn,
    /// From `pi_b`'s initial distribution, no burn-in.
    ArbitraryInit,
}

impl InitRegime {
    pub fn name(self) -> &'static str {
        match self {
            InitRegime::StationaryInit => "stationary",
            InitRegime::ErgodicBurnIn => "burn-in",
            InitRegime::ArbitraryInit => "arbitrary",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "stationary" => Some(InitRegime::StationaryInit),
            "burn-in" | "burnin" => Some(InitRegime::ErgodicBurnIn),
            "arbitrary" => Some(InitRegime::ArbitraryInit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    /// Steps per trajectory.
    pub horizon: usize,
    pub regime: InitRegime,
}

impl TrajectoryDataset {
    pub fn n_traj(&self) -> usize {
        self.trajectories.len()
    }

    /// Total number of transitions, `N * T`.
    pub fn n_transitions(&self) -> usize {
        self.n_traj() * self.horizon
    }

    /// Rebuilds trajectories from transitions carrying `(traj_id, t)`.
    pub fn from_transitions(data: &TransitionDataset, regime: InitRegime) -> Result<Self> {
        if data.is_empty() {
            return Err(OpeError::EmptyData);
        }
        let mut sorted: Vec<&Transition> = data.transitions.iter().collect();
        sorted.sort_by_key(|tr| (tr.traj_id, tr.t));
        let mut trajectories = Vec::new();
        let mut horizon = None;
        for group in sorted.chunk_by(|x, y| x.traj_id == y.traj_id) {
            let mut traj = Trajectory {
                states: Vec::with_capacity(group.len() + 1),
                actions: Vec::with_capacity(group.len()),
                rewards: Vec::with_capacity(group.len()),
            };
            for (k, tr) in group.iter().enumerate() {
                if tr.t != k {
                    return Err(OpeError::InvalidModel(format!(
                        "trajectory {} is missing step {k}",
                        tr.traj_id
                    )));
                }
                if k > 0 && traj.states[k] != tr.s {
                    return Err(OpeError::InvalidModel(format!(
                        "trajectory {} breaks at step {k}: previous next-state {} but state {}",
                        tr.traj_id, traj.states[k], tr.s
                    )));
                }
                if k == 0 {
                    traj.states.push(tr.s);
                }
                traj.actions.push(tr.a);
                traj.rewards.push(tr.r);
                traj.states.push(tr.s_next);
            }
            match horizon {
                None => horizon = Some(group.len()),
                Some(h) if h != group.len() => {
                    return Err(OpeError::InvalidModel(format!(
                        "trajectories have different lengths ({h} and {})",
                        group.len()
                    )))
                }
                _ => {}
            }
            trajectories.push(traj);
        }
        Ok(TrajectoryDataset {
            trajectories,
            horizon: horizon.unwrap_or(0),
            regime,
        })
    }
}

/// Whether transitions were drawn independently or cut from trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionSource {
    Iid,
    FromTrajectories,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub source: TransitionSource,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Subset by index, keeping provenance.
    pub fn select(&self, keep: impl Fn(usize, &Transition) -> bool) -> TransitionDataset {
        TransitionDataset {
            transitions: self
                .transitions
                .iter()
                .enumerate()
                .filter(|(i, tr)| keep(*i, tr))
                .map(|(_, tr)| *tr)
                .collect(),
            source: self.source,
        }
    }

    /// Distinct trajectory ids in ascending order.
    pub fn traj_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.transitions.iter().map(|t| t.traj_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// One past the largest time index.
    pub fn time_span(&self) -> usize {
        self.transitions.iter().map(|t| t.t + 1).max().unwrap_or(0)
    }
}

/// Draws an index from a probability row.
#[inline]
pub(crate) fn draw_index<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[inline]
pub(crate) fn draw_reward<R: Rng + ?Sized>(mdp: &TabularMdp, s: usize, a: usize, rng: &mut R) -> f64 {
    let mean = mdp.r_mean(s, a);
    let var = mdp.r_var(s, a);
    if var == 0.0 {
        return mean;
    }
    let sd = var.sqrt();
    match mdp.reward_noise() {
        RewardNoise::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            mean + sd * z
        }
        RewardNoise::TwoPoint => {
            if rng.random::<bool>() {
                mean + sd
            } else {
                mean - sd
            }
        }
    }
}

fn check_dist(dist: &[f64], n: usize, what: &str) -> Result<()> {
    if dist.len() != n {
        return Err(OpeError::Dimension(format!("{what} has {} entries, expected {n}", dist.len())));
    }
    if dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(OpeError::InvalidPolicy(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// Samples `n_traj` trajectories of `horizon` steps from the behavior chain.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    pi_b: &Policy,
    n_traj: usize,
    horizon: usize,
    init: InitRegime,
    burn_in: usize,
    seed: impl Into<Seed>,
) -> Result<TrajectoryDataset> {
    pi_b.check_shape(mdp)?;
    if horizon == 0 {
        return Err(OpeError::InvalidModel("trajectory horizon must be at least 1".into()));
    }
    let start = match init {
        InitRegime::StationaryInit => stationary_distribution(mdp, pi_b)?,
        _ => pi_b.initial_dist().to_vec(),
    };
    let burn = if init == InitRegime::ErgodicBurnIn { burn_in } else { 0 };
    let mut rng = seed.into().rng(Stream::Data);
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut s = draw_index(&start, &mut rng);
        for _ in 0..burn {
            let a = draw_index(pi_b.row(s), &mut rng);
            let _ = draw_reward(mdp, s, a, &mut rng);
            s = draw_index(mdp.next_dist(s, a), &mut rng);
        }
        let mut traj = Trajectory {
            states: Vec::with_capacity(horizon + 1),
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
        };
        traj.states.push(s);
        for _ in 0..horizon {
            let a = draw_index(pi_b.row(s), &mut rng);
            let r = draw_reward(mdp, s, a, &mut rng);
            s = draw_index(mdp.next_dist(s, a), &mut rng);
            traj.actions.push(a);
            traj.rewards.push(r);
            traj.states.push(s);
        }
        trajectories.push(traj);
    }
    Ok(TrajectoryDataset {
        trajectories,
        horizon,
        regime: init,
    })
}

/// Samples `n` iid quadruplets with `s ~ state_dist`, `a ~ pi_b(.|s)`.
/// Each transition gets its own `traj_id` and `t = 0`.
pub fn sample_transitions(
    mdp: &TabularMdp,
    pi_b: &Policy,
    state_dist: &[f64],
    n: usize,
    seed: impl Into<Seed>,
) -> Result<TransitionDataset> {
    pi_b.check_shape(mdp)?;
    check_dist(state_dist, mdp.n_states(), "state_dist")?;
    let mut rng = seed.into().rng(Stream::Data);
    let transitions = (0..n)
        .map(|i| {
            let s = draw_index(state_dist, &mut rng);
            let a = draw_index(pi_b.row(s), &mut rng);
            let r = draw_reward(mdp, s, a, &mut rng);
            let s_next = draw_index(mdp.next_dist(s, a), &mut rng);
            Transition {
                s,
                a,
                r,
                s_next,
                traj_id: i,
                t: 0,
            }
        })
        .collect();
    Ok(TransitionDataset {
        transitions,
        source: TransitionSource::Iid,
    })
}

/// Flattens trajectories into transitions ordered by `(traj_id, t)`.
pub fn trajectory_to_transitions(ds: &TrajectoryDataset) -> TransitionDataset {
    let mut transitions = Vec::with_capacity(ds.n_transitions());
    for (j, traj) in ds.trajectories.iter().enumerate() {
        for t in 0..traj.len() {
            transitions.push(Transition {
                s: traj.states[t],
                a: traj.actions[t],
                r: traj.rewards[t],
                s_next: traj.states[t + 1],
                traj_id: j,
                t,
            });
        }
    }
    TransitionDataset {
        transitions,
        source: TransitionSource::FromTrajectories,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic_cycle() -> (TabularMdp, Policy) {
        // 3-state cycle 0 -> 1 -> 2 -> 0 under action 0; action 1 stays.
        let mut p = vec![0.0; 3 * 2 * 3];
        for s in 0..3 {
            p[(s * 2) * 3 + (s + 1) % 3] = 1.0;
            p[(s * 2 + 1) * 3 + s] = 1.0;
        }
        let mdp = TabularMdp::new(
            3,
            2,
            p,
            vec![0.5, 0.0, 0.25, 0.0, 1.0, 0.0],
            vec![0.0; 6],
            RewardNoise::Gaussian,
            0.9,
            1.0,
        )
        .unwrap();
        let pi = Policy::deterministic(2, &[0, 0, 0], vec![1.0, 0.0, 0.0]).unwrap();
        (mdp, pi)
    }

    #[test]
    fn minimal_trajectory() {
        let (mdp, pi) = deterministic_cycle();
        let ds = sample_trajectories(&mdp, &pi, 1, 1, InitRegime::ArbitraryInit, 0, 1).unwrap();
        let tr = trajectory_to_transitions(&ds);
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.transitions[0], Transition { s: 0, a: 0, r: 0.5, s_next: 1, traj_id: 0, t: 0 });
    }

    #[test]
    fn deterministic_path_is_unique() {
        let (mdp, pi) = deterministic_cycle();
        let ds = sample_trajectories(&mdp, &pi, 2, 5, InitRegime::ArbitraryInit, 0, 3).unwrap();
        for traj in &ds.trajectories {
            assert_eq!(traj.states, vec![0, 1, 2, 0, 1, 2]);
            assert_eq!(traj.rewards, vec![0.5, 0.25, 1.0, 0.5, 0.25]);
        }
    }

    #[test]
    fn zero_horizon_rejected() {
        let (mdp, pi) = deterministic_cycle();
        assert!(sample_trajectories(&mdp, &pi, 1, 0, InitRegime::ArbitraryInit, 0, 1).is_err());
    }

    #[test]
    fn periodic_chain_rejected_under_stationary_init() {
        let (mdp, pi) = deterministic_cycle();
        assert!(matches!(
            sample_trajectories(&mdp, &pi, 1, 3, InitRegime::StationaryInit, 0, 1),
            Err(OpeError::Periodic { .. })
        ));
    }

    #[test]
    fn counting_and_provenance() {
        let (mdp, pi) = deterministic_cycle();
        let ds = sample_trajectories(&mdp, &pi, 3, 5, InitRegime::ArbitraryInit, 0, 1).unwrap();
        let tr = trajectory_to_transitions(&ds);
        assert_eq!(tr.len(), 15);
        assert_eq!(tr.traj_ids(), vec![0, 1, 2]);
        let two = sample_trajectories(&mdp, &pi, 1, 2, InitRegime::ArbitraryInit, 0, 1).unwrap();
        let tr2 = trajectory_to_transitions(&two);
        assert_eq!(tr2.transitions.iter().map(|x| x.t).collect::<Vec<_>>(), vec![0, 1]);
        let back = TrajectoryDataset::from_transitions(&tr, InitRegime::ArbitraryInit).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_and_point_mass_transitions() {
        let (mdp, pi) = deterministic_cycle();
        let empty = sample_transitions(&mdp, &pi, &[1.0, 0.0, 0.0], 0, 9).unwrap();
        assert!(empty.is_empty());
        let ds = sample_transitions(&mdp, &pi, &[0.0, 1.0, 0.0], 4, 9).unwrap();
        assert!(ds.transitions.iter().all(|t| (t.s, t.a, t.r, t.s_next) == (1, 0, 0.25, 2)));
        assert!(sample_transitions(&mdp, &pi, &[0.5, 0.1, 0.0], 4, 9).is_err());
    }

    #[test]
    fn two_point_rewards_stay_on_support() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.5], vec![0.25], RewardNoise::TwoPoint, 0.5, 1.0)
            .unwrap();
        let pi = Policy::uniform(1, 1, vec![1.0]).unwrap();
        let ds = sample_transitions(&mdp, &pi, &[1.0], 200, 4).unwrap();
        assert!(ds.transitions.iter().all(|t| t.r == 0.0 || t.r == 1.0));
        assert!(ds.transitions.iter().any(|t| t.r == 0.0));
        assert!(ds.transitions.iter().any(|t| t.r == 1.0));
    }
}
