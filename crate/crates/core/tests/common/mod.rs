//! Shared fixtures for the integration tests: seeded random problems and
//! brute-force reference computations that avoid the library's solvers.

#![allow(dead_code)]

use ope_core::mdp::{Policy, RewardNoise, TabularMdp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simplex(rng: &mut ChaCha8Rng, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| floor + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Dense random MDP with positive transitions, rewards in `[0, 1]`.
pub fn random_mdp(seed: u64, n: usize, na: usize, gamma: f64) -> TabularMdp {
    let mut r = rng(seed);
    let mut p = Vec::with_capacity(n * na * n);
    for _ in 0..n * na {
        p.extend(simplex(&mut r, n, 0.05));
    }
    let mean: Vec<f64> = (0..n * na).map(|_| 0.2 + 0.6 * r.random::<f64>()).collect();
    let var: Vec<f64> = mean.iter().map(|m| r.random::<f64>() * (m.min(1.0 - m)).powi(2)).collect();
    TabularMdp::new(n, na, p, mean, var, RewardNoise::TwoPoint, gamma, 1.0).unwrap()
}

/// Random policy with every action probability at least `floor / (na (1 + floor))`.
pub fn random_policy(seed: u64, n: usize, na: usize, init: Vec<f64>) -> Policy {
    let mut r = rng(seed ^ 0x5bd1_e995);
    let mut probs = Vec::with_capacity(n * na);
    for _ in 0..n {
        probs.extend(simplex(&mut r, na, 0.2));
    }
    Policy::new(n, na, probs, init).unwrap()
}

pub fn random_dist(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    simplex(&mut r, n, 0.1)
}

/// Random (shape, seed) for the suite: `S <= 6`, `A <= 3`.
pub fn suite_problem(i: u64) -> (TabularMdp, Policy, Policy) {
    let mut r = rng(1000 + i);
    let n = r.random_range(1..=6);
    let na = r.random_range(1..=3);
    let gamma = 0.5 + 0.45 * r.random::<f64>();
    let mdp = random_mdp(2000 + i, n, na, gamma);
    let pe = random_policy(3000 + i, n, na, random_dist(4000 + i, n));
    let pb = random_policy(5000 + i, n, na, random_dist(6000 + i, n));
    (mdp, pe, pb)
}

/// Target value by value iteration to machine precision.
pub fn value_iteration(mdp: &TabularMdp, pi: &Policy) -> Vec<f64> {
    let (n, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut v = vec![0.0; n];
    loop {
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..na {
                let ev: f64 = (0..n).map(|s2| mdp.p(s, a, s2) * v[s2]).sum();
                next[s] += pi.prob(s, a) * (mdp.r_mean(s, a) + g * ev);
            }
        }
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff < 1e-15 {
            return v;
        }
    }
}

/// `q(s,a) = R + gamma P v` from a value-iteration `v`.
pub fn q_from_v(mdp: &TabularMdp, v: &[f64]) -> Vec<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            q[s * na + a] = mdp.r_mean(s, a) + mdp.gamma() * (0..n).map(|s2| mdp.p(s, a, s2) * v[s2]).sum::<f64>();
        }
    }
    q
}

/// Discounted visitation `d_e` by summing `(1-gamma) gamma^t p_t` until the tail is negligible.
pub fn visitation_by_series(mdp: &TabularMdp, pi: &Policy) -> Vec<f64> {
    let (n, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut p = pi.initial_dist().to_vec();
    let mut d = vec![0.0; n];
    let mut disc = 1.0 - g;
    while disc > 1e-18 {
        for s in 0..n {
            d[s] += disc * p[s];
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..na {
                for s2 in 0..n {
                    next[s2] += p[s] * pi.prob(s, a) * mdp.p(s, a, s2);
                }
            }
        }
        p = next;
        disc *= g;
    }
    d
}

/// Stationary distribution of the behavior chain by power iteration.
pub fn stationary_by_power(mdp: &TabularMdp, pi: &Policy) -> Vec<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..na {
                for s2 in 0..n {
                    next[s2] += p[s] * pi.prob(s, a) * mdp.p(s, a, s2);
                }
            }
        }
        let diff = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        if diff < 1e-16 {
            break;
        }
    }
    p
}

/// Conditional variance of `r + gamma v(s')` from a value-iteration `v`.
pub fn sigma2(mdp: &TabularMdp, pi_e: &Policy) -> Vec<f64> {
    let v = value_iteration(mdp, pi_e);
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let m: f64 = (0..n).map(|x| mdp.p(s, a, x) * v[x]).sum();
            let second: f64 = (0..n).map(|x| mdp.p(s, a, x) * v[x] * v[x]).sum();
            out[s * na + a] = mdp.r_var(s, a) + mdp.gamma().powi(2) * (second - m * m);
        }
    }
    out
}

/// Every behavior path `(s_0, a_0, ..., s_k, a_k)` with its probability
/// under `pi` started from `pi`'s own initial distribution.
pub fn paths(mdp: &TabularMdp, pi: &Policy, k: usize) -> Vec<(Vec<(usize, usize)>, f64)> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut out: Vec<(Vec<(usize, usize)>, f64)> = Vec::new();
    for s in 0..n {
        for a in 0..na {
            out.push((vec![(s, a)], pi.initial_dist()[s] * pi.prob(s, a)));
        }
    }
    for _ in 0..k {
        let mut next = Vec::new();
        for (path, p) in &out {
            let (s, a) = *path.last().unwrap();
            for s2 in 0..n {
                for a2 in 0..na {
                    let mut q = path.clone();
                    q.push((s2, a2));
                    next.push((q, p * mdp.p(s, a, s2) * pi.prob(s2, a2)));
                }
            }
        }
        out = next;
    }
    out
}
