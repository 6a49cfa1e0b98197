//! Nuisance estimation: the stationary density ratio `w` by linear
//! estimating equations, the q-function by LSTDQ or by solving an empirical
//! MDP, and controlled corruption of fitted functions.
//!
//! Every fitter consumes [`Moments`], a weighted list of `(s, a, s')` cells.
//! Built from data the weights are `1/n` per observation; built from a known
//! MDP they are exact probabilities, which turns each fitter into its
//! population counterpart.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use crate::error::{OpeError, Result};
use crate::linalg;
use crate::mdp::{Policy, Provenance, QFunction, SaTable, TabularMdp, WFunction};
use crate::rng::{Seed, Stream};
use crate::sampling::TransitionDataset;

pub use crate::mdp::exact_v as v_from_q;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Tabular,
    Custom,
}

/// State features `psi(s)` for `w` and state-action features `psi(s,a)` for `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    n_states: usize,
    n_actions: usize,
    dim_s: usize,
    dim_sa: usize,
    state: Vec<f64>,
    pair: Vec<f64>,
}

impl FeatureMap {
    /// One-hot features of dimension `n_states` and `n_states * n_actions`.
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let mut state = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            state[s * n_states + s] = 1.0;
        }
        let np = n_states * n_actions;
        let mut pair = vec![0.0; np * np];
        for i in 0..np {
            pair[i * np + i] = 1.0;
        }
        FeatureMap {
            kind: FeatureKind::Tabular,
            n_states,
            n_actions,
            dim_s: n_states,
            dim_sa: np,
            state,
            pair,
        }
    }

    /// Arbitrary features given row by row; every row of a kind must have the
    /// same length.
    pub fn custom(
        n_states: usize,
        n_actions: usize,
        state_rows: &[Vec<f64>],
        pair_rows: &[Vec<f64>],
    ) -> Result<Self> {
        let flatten = |rows: &[Vec<f64>], expect: usize, what: &str| -> Result<(usize, Vec<f64>)> {
            if rows.len() != expect {
                return Err(OpeError::Dimension(format!(
                    "{what} features: {} rows, expected {expect}",
                    rows.len()
                )));
            }
            let dim = rows.first().map_or(0, Vec::len);
            if dim == 0 || rows.iter().any(|r| r.len() != dim) {
                return Err(OpeError::Dimension(format!("{what} features must share one positive dimension")));
            }
            Ok((dim, rows.concat()))
        };
        let (dim_s, state) = flatten(state_rows, n_states, "state")?;
        let (dim_sa, pair) = flatten(pair_rows, n_states * n_actions, "state-action")?;
        Ok(FeatureMap {
            kind: FeatureKind::Custom,
            n_states,
            n_actions,
            dim_s,
            dim_sa,
            state,
            pair,
        })
    }

    pub fn dim_s(&self) -> usize {
        self.dim_s
    }

    pub fn dim_sa(&self) -> usize {
        self.dim_sa
    }

    #[inline]
    pub fn psi_s(&self, s: usize) -> &[f64] {
        &self.state[s * self.dim_s..(s + 1) * self.dim_s]
    }

    #[inline]
    pub fn psi_sa(&self, s: usize, a: usize) -> &[f64] {
        let i = s * self.n_actions + a;
        &self.pair[i * self.dim_sa..(i + 1) * self.dim_sa]
    }
}

/// One aggregated `(s, a, s')` cell: its probability weight and the
/// weight-scaled reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub weight: f64,
    pub reward: f64,
}

/// A discrete measure over transitions, either empirical or exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n_states: usize,
    pub n_actions: usize,
    pub cells: Vec<Cell>,
}

impl Moments {
    /// Empirical measure: each observed transition carries weight `1/n`.
    pub fn empirical(data: &TransitionDataset, n_states: usize, n_actions: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(OpeError::EmptyData);
        }
        crate::sampling::check_indices(data, n_states, n_actions)?;
        let mut agg: BTreeMap<(usize, usize, usize), (usize, Vec<f64>)> = BTreeMap::new();
        for tr in &data.transitions {
            let e = agg.entry((tr.s, tr.a, tr.s_next)).or_default();
            e.0 += 1;
            e.1.push(tr.r);
        }
        let n = data.len() as f64;
        let cells = agg
            .into_iter()
            .map(|((s, a, s_next), (count, rewards))| Cell {
                s,
                a,
                s_next,
                weight: count as f64 / n,
                reward: linalg::pairwise_sum(&rewards) / n,
            })
            .collect();
        Ok(Moments {
            n_states,
            n_actions,
            cells,
        })
    }

    /// Exact measure `denom(s) pi_b(a|s) P(s'|s,a)` with mean rewards.
    pub fn exact(mdp: &TabularMdp, pi_b: &Policy, denom: &[f64]) -> Result<Self> {
        pi_b.check_shape(mdp)?;
        if denom.len() != mdp.n_states() {
            return Err(OpeError::Dimension("state distribution has wrong length".into()));
        }
        let mut cells = Vec::new();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let m = denom[s] * pi_b.prob(s, a);
                if m == 0.0 {
                    continue;
                }
                for (s_next, &p) in mdp.next_dist(s, a).iter().enumerate() {
                    if p > 0.0 {
                        let weight = m * p;
                        cells.push(Cell {
                            s,
                            a,
                            s_next,
                            weight,
                            reward: weight * mdp.r_mean(s, a),
                        });
                    }
                }
            }
        }
        Ok(Moments {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            cells,
        })
    }

    /// Total weight per state-action pair.
    pub fn pair_weights(&self) -> SaTable {
        let mut t = SaTable::zeros(self.n_states, self.n_actions);
        for c in &self.cells {
            let i = c.s * self.n_actions + c.a;
            t.values[i] += c.weight;
        }
        t
    }
}

/// Options shared by the linear fitters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct FitOptions {
    /// Retry a singular system with ridge `1e-8 * trace / dim`.
    pub ridge: bool,
    /// Upper clip for `w`; negative values are always set to 0.
    pub clip_w: Option<f64>,
    /// Clip `q` into `[0, q_max]`.
    pub clip_q: Option<f64>,
}


#[derive(Debug, Clone, PartialEq)]
pub struct WFit {
    pub w: WFunction,
    pub beta: Vec<f64>,
    pub rcond: f64,
    pub negative_clipped: usize,
    pub upper_clipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFit {
    pub q: QFunction,
    pub beta: Vec<f64>,
    pub rcond: f64,
    pub clipped: usize,
}

fn solve_guarded(a: DMatrix<f64>, b: DVector<f64>, ridge: bool, detail: impl Fn() -> String) -> Result<linalg::Solved> {
    match linalg::solve(&a, &b) {
        Ok(x) => Ok(x),
        Err(OpeError::Singular { rcond, .. }) if ridge => {
            let dim = a.nrows().max(1) as f64;
            let lambda = 1e-8 * a.trace().abs().max(f64::MIN_POSITIVE) / dim;
            log::warn!("moment matrix singular (rcond {rcond:.3e}); retrying with ridge {lambda:.3e}");
            let mut reg = a;
            for i in 0..reg.nrows() {
                reg[(i, i)] += lambda;
            }
            linalg::solve(&reg, &b).map_err(|e| match e {
                OpeError::Singular { rcond, .. } => OpeError::Singular { rcond, detail: detail() },
                other => other,
            })
        }
        Err(OpeError::Singular { rcond, .. }) => Err(OpeError::Singular { rcond, detail: detail() }),
        Err(e) => Err(e),
    }
}

fn expect_dims(m: &Moments, fmap: &FeatureMap) -> Result<()> {
    if m.n_states != fmap.n_states || m.n_actions != fmap.n_actions {
        return Err(OpeError::Dimension(format!(
            "features are for {}x{}, data for {}x{}",
            fmap.n_states, fmap.n_actions, m.n_states, m.n_actions
        )));
    }
    Ok(())
}

/// Solves `P_n[psi(s)(gamma eta psi(s') - psi(s))^T] beta + (1-gamma) E_{p0_e}[psi] = 0`
/// for `w(s) = beta^T psi(s)`.
pub fn fit_w_linear(
    m: &Moments,
    fmap: &FeatureMap,
    eta: &SaTable,
    p0_e: &[f64],
    gamma: f64,
    opts: &FitOptions,
) -> Result<WFit> {
    expect_dims(m, fmap)?;
    let d = fmap.dim_s();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for c in &m.cells {
        let ge = gamma * eta.get(c.s, c.a);
        let (ps, pn) = (fmap.psi_s(c.s), fmap.psi_s(c.s_next));
        for j in 0..d {
            let u = c.weight * (ge * pn[j] - ps[j]);
            if u == 0.0 {
                continue;
            }
            for k in 0..d {
                a[(j, k)] += u * ps[k];
            }
        }
    }
    let mut b = DVector::<f64>::zeros(d);
    for (s, &p) in p0_e.iter().enumerate() {
        for (j, f) in fmap.psi_s(s).iter().enumerate() {
            b[j] -= (1.0 - gamma) * p * f;
        }
    }
    let solved = solve_guarded(a, b, opts.ridge, || {
        let mut seen = vec![0.0; m.n_states];
        for c in &m.cells {
            seen[c.s] += c.weight;
        }
        let missing: Vec<usize> = (0..m.n_states).filter(|&s| seen[s] == 0.0).collect();
        format!("w moment matrix; states never visited: {missing:?}")
    })?;
    let beta: Vec<f64> = solved.x.iter().copied().collect();
    let mut values: Vec<f64> = (0..m.n_states)
        .map(|s| fmap.psi_s(s).iter().zip(&beta).map(|(f, b)| f * b).sum())
        .collect();
    let mut negative_clipped = 0;
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            negative_clipped += 1;
        }
    }
    if negative_clipped > 0 {
        log::warn!("fitted w negative at {negative_clipped} states; set to 0");
    }
    let mut w = WFunction::new(values);
    let upper_clipped = opts.clip_w.map_or(0, |c| w.clip(c));
    Ok(WFit {
        w,
        beta,
        rcond: solved.rcond,
        negative_clipped,
        upper_clipped,
    })
}

/// Empirical moment vector `P_n[gamma w(s) eta f(s') - w(s) f(s)] + (1-gamma) E_{p0_e}[f]`
/// for the state features of `f`.
pub fn residual_l(m: &Moments, w: &WFunction, f: &FeatureMap, eta: &SaTable, p0_e: &[f64], gamma: f64) -> Vec<f64> {
    let d = f.dim_s();
    let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(m.cells.len()); d];
    for c in &m.cells {
        let ws = w.get(c.s);
        let (fs, fn_) = (f.psi_s(c.s), f.psi_s(c.s_next));
        for j in 0..d {
            terms[j].push(c.weight * ws * (gamma * eta.get(c.s, c.a) * fn_[j] - fs[j]));
        }
    }
    terms
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let init: f64 = p0_e.iter().enumerate().map(|(s, p)| p * f.psi_s(s)[j]).sum();
            linalg::pairwise_sum(t) + (1.0 - gamma) * init
        })
        .collect()
}

/// LSTDQ: `sum psi(s,a)[psi(s,a) - gamma E_{a'~pi_e} psi(s',a')]^T beta = sum r psi(s,a)`.
pub fn fit_q_lstdq(m: &Moments, fmap: &FeatureMap, pi_e: &Policy, gamma: f64, opts: &FitOptions) -> Result<QFit> {
    expect_dims(m, fmap)?;
    let d = fmap.dim_sa();
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut next = vec![0.0; d];
    for c in &m.cells {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (a2, &p) in pi_e.row(c.s_next).iter().enumerate() {
            if p > 0.0 {
                for (x, f) in next.iter_mut().zip(fmap.psi_sa(c.s_next, a2)) {
                    *x += p * f;
                }
            }
        }
        let phi = fmap.psi_sa(c.s, c.a);
        for j in 0..d {
            if phi[j] == 0.0 {
                continue;
            }
            let u = c.weight * phi[j];
            for k in 0..d {
                a[(j, k)] += u * (phi[k] - gamma * next[k]);
            }
            b[j] += c.reward * phi[j];
        }
    }
    let solved = solve_guarded(a, b, opts.ridge, || {
        let visits = m.pair_weights();
        let mut missing = Vec::new();
        for s in 0..m.n_states {
            for a in 0..m.n_actions {
                if visits.get(s, a) == 0.0 {
                    missing.push((s, a));
                }
            }
        }
        format!("LSTDQ moment matrix; unvisited (s,a) pairs: {missing:?}")
    })?;
    let beta: Vec<f64> = solved.x.iter().copied().collect();
    let mut values = Vec::with_capacity(m.n_states * m.n_actions);
    for s in 0..m.n_states {
        for a in 0..m.n_actions {
            values.push(fmap.psi_sa(s, a).iter().zip(&beta).map(|(f, b)| f * b).sum());
        }
    }
    let mut q = QFunction::new(m.n_states, m.n_actions, values);
    let clipped = opts.clip_q.map_or(0, |c| q.clip(c));
    Ok(QFit {
        q,
        beta,
        rcond: solved.rcond,
        clipped,
    })
}

/// Transition and mean-reward tables, possibly estimated from data.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    /// Pairs with no data, given a self-loop with reward `r_max / 2`.
    pub imputed: Vec<(usize, usize)>,
}

impl EmpiricalModel {
    pub fn from_moments(m: &Moments, r_max: f64) -> Self {
        let (n, na) = (m.n_states, m.n_actions);
        let mut transition = vec![0.0; n * na * n];
        let mut reward = vec![0.0; n * na];
        let mut mass = vec![0.0; n * na];
        for c in &m.cells {
            let i = c.s * na + c.a;
            transition[i * n + c.s_next] += c.weight;
            reward[i] += c.reward;
            mass[i] += c.weight;
        }
        let mut imputed = Vec::new();
        for i in 0..n * na {
            let row = &mut transition[i * n..(i + 1) * n];
            if mass[i] > 0.0 {
                row.iter_mut().for_each(|p| *p /= mass[i]);
                reward[i] /= mass[i];
            } else {
                let s = i / na;
                row[s] = 1.0;
                reward[i] = r_max / 2.0;
                imputed.push((s, i % na));
            }
        }
        if !imputed.is_empty() {
            log::info!(
                "empirical model: {} unvisited pairs imputed as self-loops with reward {}",
                imputed.len(),
                r_max / 2.0
            );
        }
        EmpiricalModel {
            n_states: n,
            n_actions: na,
            transition,
            reward,
            imputed,
        }
    }

    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        EmpiricalModel {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            transition: mdp.transition().to_vec(),
            reward: mdp.reward_mean().to_vec(),
            imputed: Vec::new(),
        }
    }

    fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    /// `sum_{s'} P(s'|s,a) v(s')`.
    fn backup(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.next_dist(s, a).iter().zip(v).map(|(p, x)| p * x).sum()
    }

    /// Exact q of this model under `pi_e`.
    pub fn q(&self, pi_e: &Policy, gamma: f64) -> Result<QFunction> {
        let (n, na) = (self.n_states, self.n_actions);
        let mut a = DMatrix::<f64>::identity(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for s in 0..n {
            for act in 0..na {
                let pa = pi_e.prob(s, act);
                if pa == 0.0 {
                    continue;
                }
                b[s] += pa * self.reward[s * na + act];
                for (s2, p) in self.next_dist(s, act).iter().enumerate() {
                    a[(s, s2)] -= gamma * pa * p;
                }
            }
        }
        let v: Vec<f64> = linalg::solve(&a, &b)?.x.iter().copied().collect();
        let mut q = Vec::with_capacity(n * na);
        for s in 0..n {
            for act in 0..na {
                q.push(self.reward[s * na + act] + gamma * self.backup(s, act, &v));
            }
        }
        Ok(QFunction::new(n, na, q))
    }

    /// Finite-horizon q-functions `q_0, ..., q_omega` with `q_omega = R` and
    /// `q_t = R + gamma P Pi_e q_{t+1}`.
    pub fn truncated_q(&self, pi_e: &Policy, gamma: f64, omega: usize) -> Vec<QFunction> {
        let (n, na) = (self.n_states, self.n_actions);
        let mut out = vec![QFunction::new(n, na, self.reward.clone()); omega + 1];
        for t in (0..omega).rev() {
            let v = v_from_q(&out[t + 1], pi_e);
            let values = (0..n * na)
                .map(|i| self.reward[i] + gamma * self.backup(i / na, i % na, &v))
                .collect();
            out[t] = QFunction::new(n, na, values);
        }
        out
    }

    /// Max-norm Bellman residual of `q` on this model.
    pub fn bellman_residual(&self, pi_e: &Policy, gamma: f64, q: &QFunction) -> f64 {
        let v = v_from_q(q, pi_e);
        let mut worst: f64 = 0.0;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let r = q.get(s, a) - self.reward[s * self.n_actions + a] - gamma * self.backup(s, a, &v);
                worst = worst.max(r.abs());
            }
        }
        worst
    }
}

/// q of the empirical MDP built from `m`.
pub fn fit_q_model_based(m: &Moments, pi_e: &Policy, gamma: f64, r_max: f64) -> Result<QFunction> {
    EmpiricalModel::from_moments(m, r_max).q(pi_e, gamma)
}

/// Per-step q-functions `q_0..q_omega` of the empirical MDP.
pub fn fit_q_truncated_model_based(m: &Moments, pi_e: &Policy, gamma: f64, r_max: f64, omega: usize) -> Vec<QFunction> {
    EmpiricalModel::from_moments(m, r_max).truncated_q(pi_e, gamma, omega)
}

fn add_noise(values: &mut [f64], mean: f64, sd: f64, seed: Seed) {
    let normal = Normal::new(mean, sd).expect("noise sd must be finite and nonnegative");
    let mut rng = seed.rng(Stream::Corruption);
    for v in values.iter_mut() {
        *v += normal.sample(&mut rng);
    }
}

/// Adds one `N(mean, sd^2)` draw per entry, then clips into `[0, q_max]`.
/// Returns the corrupted function and the number of clipped entries.
pub fn corrupt_q(q: &QFunction, mean: f64, sd: f64, seed: impl Into<Seed>, q_max: Option<f64>) -> (QFunction, usize) {
    let mut out = q.clone();
    add_noise(&mut out.table.values, mean, sd, seed.into());
    out.provenance = Provenance::Corrupted;
    let clipped = q_max.map_or(0, |c| out.clip(c));
    (out, clipped)
}

/// Adds one `N(mean, sd^2)` draw per entry, then clips into `[0, c_w]`.
pub fn corrupt_w(w: &WFunction, mean: f64, sd: f64, seed: impl Into<Seed>, c_w: Option<f64>) -> (WFunction, usize) {
    let mut out = w.clone();
    add_noise(&mut out.values, mean, sd, seed.into());
    out.provenance = Provenance::Corrupted;
    let clipped = c_w.map_or(0, |c| out.clip(c));
    (out, clipped)
}

/// A `(w, q)` pair, optionally tagged with the fold it was fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePair {
    pub w: WFunction,
    pub q: QFunction,
    pub fold_id: Option<usize>,
}

impl NuisancePair {
    /// `Corrupted` if either part is, else `Fitted` if either is, else `Oracle`.
    pub fn provenance(&self) -> Provenance {
        let ps = [self.w.provenance, self.q.provenance];
        if ps.contains(&Provenance::Corrupted) {
            Provenance::Corrupted
        } else if ps.contains(&Provenance::Fitted) {
            Provenance::Fitted
        } else {
            Provenance::Oracle
        }
    }
}
