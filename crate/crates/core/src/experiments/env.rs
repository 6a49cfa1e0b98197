//! Environments and the target/behavior policy construction.

use rand::Rng;

use crate::error::{OpeError, Result};
use crate::mdp::{renormalize_rows, Policy, RewardNoise, TabularMdp};
use crate::rng::{Seed, Stream};

/// Mixing weight of the uniform policy in each softened greedy policy.
pub const SOFTENING: f64 = 0.05;
/// Value-iteration sweeps used for the optimal policy.
pub const DEFAULT_SWEEPS: usize = 1000;

/// Which environment to build.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Gridworld {
        width: usize,
        height: usize,
        slip_prob: f64,
        rewards: GridRewards,
    },
    /// Dense random MDP; every transition row has full support.
    Random {
        n_states: usize,
        n_actions: usize,
        seed: u64,
        noise_sd: f64,
    },
    /// Line of states, action 0 moves left and 1 moves right; the move
    /// fails with probability `slip_prob`. Reward is paid at the right end.
    Chain {
        length: usize,
        slip_prob: f64,
        noise_sd: f64,
    },
}

/// Gridworld rewards: mean `goal_mean` in the goal cell (bottom right) and
/// `step_mean` elsewhere, with two-point noise of standard deviation
/// `noise_sd`. With `reset_from_goal` every action in the goal cell moves to
/// the start cell (top left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRewards {
    pub goal_mean: f64,
    pub step_mean: f64,
    pub noise_sd: f64,
    pub reset_from_goal: bool,
}

impl Default for GridRewards {
    fn default() -> Self {
        GridRewards {
            goal_mean: 0.8,
            step_mean: 0.1,
            noise_sd: 0.1,
            reset_from_goal: true,
        }
    }
}

/// Builds the MDP for `spec` with discount `gamma`.
pub fn build_env(spec: &EnvSpec, gamma: f64) -> Result<TabularMdp> {
    match *spec {
        EnvSpec::Gridworld {
            width,
            height,
            slip_prob,
            rewards,
        } => make_gridworld(width, height, slip_prob, rewards, gamma),
        EnvSpec::Random {
            n_states,
            n_actions,
            seed,
            noise_sd,
        } => make_random_mdp(n_states, n_actions, noise_sd, gamma, seed),
        EnvSpec::Chain {
            length,
            slip_prob,
            noise_sd,
        } => make_chain(length, slip_prob, noise_sd, gamma),
    }
}

fn check_prob(x: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(OpeError::InvalidModel(format!("{what} must lie in [0, 1], got {x}")));
    }
    Ok(())
}

/// `width x height` grid with actions up, right, down, left. The intended
/// move happens with probability `1 - slip_prob`; the slip mass is split
/// between the two lateral moves. Moves into a wall stay put.
pub fn make_gridworld(width: usize, height: usize, slip_prob: f64, rewards: GridRewards, gamma: f64) -> Result<TabularMdp> {
    if width == 0 || height == 0 || width * height > 400 {
        return Err(OpeError::InvalidModel(format!("grid {width}x{height} must have between 1 and 400 cells")));
    }
    check_prob(slip_prob, "slip_prob")?;
    let n = width * height;
    let goal = n - 1;
    let moves: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
    let target = |s: usize, dir: usize| -> usize {
        let (x, y) = ((s % width) as isize, (s / width) as isize);
        let (nx, ny) = (x + moves[dir].0, y + moves[dir].1);
        if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
            s
        } else {
            ny as usize * width + nx as usize
        }
    };
    let mut p = vec![0.0; n * 4 * n];
    let mut mean = vec![rewards.step_mean; n * 4];
    for s in 0..n {
        for a in 0..4 {
            let row = &mut p[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            if rewards.reset_from_goal && s == goal && n > 1 {
                row[0] = 1.0;
            } else {
                row[target(s, a)] += 1.0 - slip_prob;
                row[target(s, (a + 1) % 4)] += slip_prob / 2.0;
                row[target(s, (a + 3) % 4)] += slip_prob / 2.0;
            }
            if s == goal {
                mean[s * 4 + a] = rewards.goal_mean;
            }
        }
    }
    let var = vec![rewards.noise_sd * rewards.noise_sd; n * 4];
    TabularMdp::new(n, 4, p, mean, var, RewardNoise::TwoPoint, gamma, 1.0)
}

/// Dense random MDP: transition rows are normalized `0.05 + U(0,1)` draws,
/// reward means are `U(0.1, 0.9)`, two-point reward noise.
pub fn make_random_mdp(n_states: usize, n_actions: usize, noise_sd: f64, gamma: f64, seed: u64) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(OpeError::InvalidModel("random MDP needs at least one state and action".into()));
    }
    let mut rng = Seed::new(seed).rng(Stream::Environment);
    let mut p: Vec<f64> = (0..n_states * n_actions * n_states).map(|_| 0.05 + rng.random::<f64>()).collect();
    renormalize_rows(&mut p, n_states);
    let mean: Vec<f64> = (0..n_states * n_actions).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
    let var = vec![noise_sd * noise_sd; n_states * n_actions];
    TabularMdp::new(n_states, n_actions, p, mean, var, RewardNoise::TwoPoint, gamma, 1.0)
}

/// Chain of `length` states.
pub fn make_chain(length: usize, slip_prob: f64, noise_sd: f64, gamma: f64) -> Result<TabularMdp> {
    if length == 0 {
        return Err(OpeError::InvalidModel("chain length must be positive".into()));
    }
    check_prob(slip_prob, "slip_prob")?;
    let n = length;
    let mut p = vec![0.0; n * 2 * n];
    let mut mean = vec![0.1; n * 2];
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        for (a, (go, back)) in [(left, right), (right, left)].into_iter().enumerate() {
            let row = &mut p[(s * 2 + a) * n..(s * 2 + a + 1) * n];
            row[go] += 1.0 - slip_prob;
            row[back] += slip_prob;
        }
    }
    mean[(n - 1) * 2] = 0.8;
    mean[(n - 1) * 2 + 1] = 0.8;
    let var = vec![noise_sd * noise_sd; n * 2];
    TabularMdp::new(n, 2, p, mean, var, RewardNoise::TwoPoint, gamma, 1.0)
}

/// `sweeps` rounds of optimal q-iteration from `q`.
fn q_iteration(mdp: &TabularMdp, mut q: Vec<f64>, sweeps: usize) -> Vec<f64> {
    let (n, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    for _ in 0..sweeps {
        let v: Vec<f64> = q.chunks(na).map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        q = (0..n * na)
            .map(|i| {
                let (s, a) = (i / na, i % na);
                mdp.r_mean(s, a) + g * mdp.next_dist(s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
            })
            .collect();
    }
    q
}

/// Greedy policy softened with [`SOFTENING`] uniform mass; ties go to the
/// lowest action index.
fn softened_greedy(q: &[f64], n: usize, na: usize, init: Vec<f64>) -> Result<Policy> {
    let mut probs = vec![SOFTENING / na as f64; n * na];
    for s in 0..n {
        let row = &q[s * na..(s + 1) * na];
        let best = (0..na).fold(0, |b, a| if row[a] > row[b] { a } else { b });
        probs[s * na + best] += 1.0 - SOFTENING;
    }
    renormalize_rows(&mut probs, na);
    Policy::new(n, na, probs, init)
}

/// Target and behavior policies. The target is the softened greedy policy
/// after `sweeps` of q-iteration from zero; the second policy is the
/// softened greedy policy after `ceil(sweeps / 6)` sweeps from a seeded
/// random start, and the behavior policy mixes them with weight `alpha` on
/// the target. Both start from the uniform state distribution.
pub fn make_policy_pair(mdp: &TabularMdp, alpha: f64, seed: u64, sweeps: usize) -> Result<(Policy, Policy)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(OpeError::InvalidPolicy(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let init = vec![1.0 / n as f64; n];
    let q_star = q_iteration(mdp, vec![0.0; n * na], sweeps);
    let mut rng = Seed::new(seed).rng(Stream::Policy);
    let q0: Vec<f64> = (0..n * na).map(|_| rng.random::<f64>() * mdp.q_max()).collect();
    let q_plus = q_iteration(mdp, q0, sweeps.div_ceil(6));
    let pi_e = softened_greedy(&q_star, n, na, init.clone())?;
    let pi_plus = softened_greedy(&q_plus, n, na, init)?;
    let pi_b = pi_e.mix(&pi_plus, alpha)?;
    Ok((pi_e, pi_b))
}

/// Deterministic greedy target (after `sweeps` of q-iteration) against the
/// uniform behavior policy. With `A` actions `eta` takes only the values
/// `A` and 0, so `E[log eta] = log A` under the target.
pub fn make_greedy_vs_uniform(mdp: &TabularMdp, sweeps: usize) -> Result<(Policy, Policy)> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let q = q_iteration(mdp, vec![0.0; n * na], sweeps);
    let actions: Vec<usize> = q
        .chunks(na)
        .map(|row| (0..na).fold(0, |b, a| if row[a] > row[b] { a } else { b }))
        .collect();
    let init = vec![1.0 / n as f64; n];
    Ok((Policy::deterministic(na, &actions, init.clone())?, Policy::uniform(n, na, init)?))
}

/// The second policy of [`make_policy_pair`] alone (for inspection).
pub fn suboptimal_policy(mdp: &TabularMdp, seed: u64, sweeps: usize) -> Result<Policy> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = Seed::new(seed).rng(Stream::Policy);
    let q0: Vec<f64> = (0..n * na).map(|_| rng.random::<f64>() * mdp.q_max()).collect();
    softened_greedy(&q_iteration(mdp, q0, sweeps.div_ceil(6)), n, na, vec![1.0 / n as f64; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cell_grid_self_loops() {
        let mdp = make_gridworld(1, 1, 0.2, GridRewards::default(), 0.9).unwrap();
        assert_eq!((mdp.n_states(), mdp.n_actions()), (1, 4));
        assert!(mdp.transition().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn no_slip_is_deterministic() {
        let r = GridRewards { reset_from_goal: false, ..GridRewards::default() };
        let mdp = make_gridworld(3, 2, 0.0, r, 0.9).unwrap();
        assert!(mdp.transition().iter().all(|&p| p == 0.0 || p == 1.0));
        // right from the top-left cell
        assert_eq!(mdp.p(0, 1, 1), 1.0);
        // up from the top row hits the wall
        assert_eq!(mdp.p(2, 0, 2), 1.0);
    }

    #[test]
    fn slip_mass_goes_sideways() {
        let r = GridRewards { reset_from_goal: false, ..GridRewards::default() };
        let mdp = make_gridworld(3, 3, 0.2, r, 0.9).unwrap();
        // centre cell, action right: right 0.8, up 0.1, down 0.1
        assert!((mdp.p(4, 1, 5) - 0.8).abs() < 1e-15);
        assert!((mdp.p(4, 1, 1) - 0.1).abs() < 1e-15);
        assert!((mdp.p(4, 1, 7) - 0.1).abs() < 1e-15);
        assert!(make_gridworld(21, 20, 0.1, r, 0.9).is_err());
    }

    #[test]
    fn policy_pair_extremes() {
        let mdp = make_random_mdp(5, 3, 0.1, 0.98, 4).unwrap();
        let (pe, pb) = make_policy_pair(&mdp, 1.0, 1, 1000).unwrap();
        assert_eq!(pe, pb);
        let (_, pb0) = make_policy_pair(&mdp, 0.0, 1, 1000).unwrap();
        assert_eq!(pb0, suboptimal_policy(&mdp, 1, 1000).unwrap());
        let (pe, pb) = make_policy_pair(&mdp, 0.4, 1, 1000).unwrap();
        let plus = suboptimal_policy(&mdp, 1, 1000).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                let want = 0.4 * pe.prob(s, a) + 0.6 * plus.prob(s, a);
                assert!((pb.prob(s, a) - want).abs() < 1e-15);
                assert!(pe.prob(s, a) >= SOFTENING / 3.0 - 1e-15);
            }
        }
    }

    #[test]
    fn chain_shape() {
        let mdp = make_chain(4, 0.1, 0.05, 0.9).unwrap();
        assert!((mdp.p(0, 0, 0) - 0.9).abs() < 1e-15);
        assert!((mdp.p(3, 1, 3) - 0.9).abs() < 1e-15);
        assert_eq!(mdp.r_mean(3, 0), 0.8);
    }
}
