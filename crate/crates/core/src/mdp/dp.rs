use nalgebra::{DMatrix, DVector};

use super::{Policy, QFunction, TabularMdp};
use crate::error::{OpeError, Result};
use crate::linalg;

/// State-to-state kernel `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`, row-major.
pub fn state_kernel(mdp: &TabularMdp, pi: &Policy) -> Vec<f64> {
    let n = mdp.n_states();
    let mut k = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let pa = pi.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (dst, &p) in k[s * n..(s + 1) * n].iter_mut().zip(mdp.next_dist(s, a)) {
                *dst += pa * p;
            }
        }
    }
    k
}

/// Solves the Bellman equation `q = R + gamma P Pi_e q` directly.
///
/// The state-value system `(I - gamma P_pi) v = R_pi` is solved first, then
/// `q = R + gamma P v`.
pub fn exact_q(mdp: &TabularMdp, pi_e: &Policy) -> Result<QFunction> {
    pi_e.check_shape(mdp)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let kernel = state_kernel(mdp, pi_e);
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        for s2 in 0..n {
            a[(s, s2)] -= gamma * kernel[s * n + s2];
        }
        b[s] = (0..na).map(|act| pi_e.prob(s, act) * mdp.r_mean(s, act)).sum();
    }
    let v = linalg::solve(&a, &b)?.x;
    let mut q = vec![0.0; n * na];
    for s in 0..n {
        for act in 0..na {
            let ev: f64 = mdp
                .next_dist(s, act)
                .iter()
                .zip(v.iter())
                .map(|(p, vv)| p * vv)
                .sum();
            q[s * na + act] = mdp.r_mean(s, act) + gamma * ev;
        }
    }
    Ok(QFunction::new(n, na, q).with_provenance(super::Provenance::Oracle))
}

/// `v(s) = sum_a pi(a|s) q(s,a)`.
pub fn exact_v(q: &QFunction, pi_e: &Policy) -> Vec<f64> {
    assert_eq!(q.n_states(), pi_e.n_states(), "state count mismatch");
    assert_eq!(q.n_actions(), pi_e.n_actions(), "action count mismatch");
    (0..q.n_states())
        .map(|s| {
            pi_e.row(s)
                .iter()
                .enumerate()
                .map(|(a, p)| p * q.get(s, a))
                .sum()
        })
        .collect()
}

/// Max-norm residual of `q - (R + gamma P Pi_e q)`.
pub fn bellman_residual(mdp: &TabularMdp, pi_e: &Policy, q: &QFunction) -> f64 {
    let v = exact_v(q, pi_e);
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let ev: f64 = mdp.next_dist(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            let r = q.get(s, a) - mdp.r_mean(s, a) - mdp.gamma() * ev;
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Normalized policy value `(1 - gamma) sum_s p0_e(s) v(s)`.
pub fn exact_policy_value(mdp: &TabularMdp, pi_e: &Policy) -> Result<f64> {
    let q = exact_q(mdp, pi_e)?;
    let v = exact_v(&q, pi_e);
    let ev: f64 = pi_e.initial_dist().iter().zip(&v).map(|(p, x)| p * x).sum();
    Ok((1.0 - mdp.gamma()) * ev)
}

/// Normalized discounted state visitation: the solution of
/// `d = (1 - gamma) p0 + gamma P_pi^T d`.
pub fn discounted_visitation(mdp: &TabularMdp, pi: &Policy) -> Result<Vec<f64>> {
    pi.check_shape(mdp)?;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let kernel = state_kernel(mdp, pi);
    let mut a = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for s2 in 0..n {
            a[(s2, s)] -= gamma * kernel[s * n + s2];
        }
    }
    let b = DVector::from_iterator(n, pi.initial_dist().iter().map(|p| (1.0 - gamma) * p));
    let d = linalg::solve(&a, &b)?.x;
    Ok(d.iter().map(|x| x.max(0.0)).collect())
}

/// Invariant distribution of the state chain induced by `pi_b`.
///
/// The chain must be irreducible and aperiodic; otherwise the error names
/// the communicating classes or the period.
pub fn stationary_distribution(mdp: &TabularMdp, pi_b: &Policy) -> Result<Vec<f64>> {
    pi_b.check_shape(mdp)?;
    let n = mdp.n_states();
    let kernel = state_kernel(mdp, pi_b);
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|s| (0..n).filter(|&t| kernel[s * n + t] > 0.0).collect())
        .collect();
    let classes = strongly_connected_components(&adj);
    if classes.len() > 1 {
        return Err(OpeError::Reducible { classes });
    }
    let period = chain_period(&adj);
    if period > 1 {
        return Err(OpeError::Periodic { period });
    }
    // (P^T - I) d = 0 with the last equation replaced by sum(d) = 1.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for s in 0..n {
        for t in 0..n {
            a[(t, s)] = kernel[s * n + t];
        }
        a[(s, s)] -= 1.0;
    }
    for s in 0..n {
        a[(n - 1, s)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let d = linalg::solve(&a, &b)?.x;
    Ok(d.iter().map(|x| x.max(0.0)).collect())
}

/// Tarjan's algorithm, iterative. Classes are returned with sorted members,
/// ordered by smallest member.
fn strongly_connected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next_index = 0;
    let mut out = Vec::new();
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut child)) = call.last_mut() {
            if *child < adj[v].len() {
                let w = adj[v][*child];
                *child += 1;
                if index[w] == usize::MAX {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    while let Some(w) = stack.pop() {
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    out.push(comp);
                }
            }
        }
    }
    out.sort_by_key(|c| c[0]);
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Period of an irreducible chain: gcd of `level(u) + 1 - level(v)` over
/// all edges, with BFS levels from state 0.
fn chain_period(adj: &[Vec<usize>]) -> usize {
    let n = adj.len();
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g = 0;
    for u in 0..n {
        for &v in &adj[u] {
            let diff = (level[u] + 1).abs_diff(level[v]);
            g = gcd(g, diff);
        }
    }
    g.max(1)
}
