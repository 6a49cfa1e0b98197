//! Exact efficiency bounds and the true policy value for tabular MDPs.
//!
//! The trajectory-model bounds are series over time. For a tabular MDP each
//! term is a second moment of a density ratio weighted by the one-step
//! conditional variance
//! `sigma^2(s,a) = Var(r | s,a) + gamma^2 Var(v(s') | s,a)`,
//! and the moments obey linear recursions:
//!
//! * cumulative ratios: `m_0(s,a) = p0_b(s) pi_b(a|s) (p0_e(s)/p0_b(s))^2 eta(s,a)^2`
//!   and `m_j(s,a) = pi_b(a|s) eta(s,a)^2 sum P(s | s-, a-) m_{j-1}(s-, a-)`,
//!   so `E_b[nu_j^2 g(s_j,a_j)] = sum m_j g`;
//! * marginal ratios: `E_b[mu_j^2 g] = sum p_e^(j)(s,a)^2 / p_b^(j)(s,a) g`.

use std::fmt;

use crate::error::{OpeError, Result};
use crate::linalg;
use crate::mdp::{
    density_ratio_eta, exact_policy_value, exact_q, exact_v, initial_ratio, oracle_w_against,
    stationary_distribution, DenominatorKind, Policy, SaTable, TabularMdp,
};

/// Default truncation tolerance for the series bounds.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Iterations used to estimate the growth factor of a moment recursion.
pub const GROWTH_ITERATIONS: usize = 200;
const DIVERGENCE_MARGIN: f64 = 1e-6;
const MAX_TERMS: usize = 1_000_000;

/// A bound that may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Finite(f64),
    Divergent,
}

impl Bound {
    pub fn value(self) -> Option<f64> {
        match self {
            Bound::Finite(x) => Some(x),
            Bound::Divergent => None,
        }
    }

    pub fn is_divergent(self) -> bool {
        matches!(self, Bound::Divergent)
    }

    pub fn verdict(self) -> &'static str {
        match self {
            Bound::Finite(_) => "finite",
            Bound::Divergent => "divergent",
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Finite(x) => write!(f, "{x:.17e}"),
            Bound::Divergent => f.write_str("inf"),
        }
    }
}

/// A series bound together with how it was evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesBound {
    pub bound: Bound,
    /// Number of series terms summed.
    pub terms: usize,
    /// Estimated remainder after the last term.
    pub tail_bound: f64,
    /// Per-step growth factor of the second-moment recursion.
    pub growth: f64,
}

/// `Var(r | s,a) + gamma^2 Var(v(s') | s,a)` for the target value `v`.
pub fn conditional_variance(mdp: &TabularMdp, v: &[f64]) -> SaTable {
    let g2 = mdp.gamma() * mdp.gamma();
    let mut out = SaTable::zeros(mdp.n_states(), mdp.n_actions());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let row = mdp.next_dist(s, a);
            let mean: f64 = row.iter().zip(v).map(|(p, x)| p * x).sum();
            let var: f64 = row.iter().zip(v).map(|(p, x)| p * (x - mean) * (x - mean)).sum();
            out.set(s, a, mdp.r_var(s, a) + g2 * var);
        }
    }
    out
}

fn target_sigma2(mdp: &TabularMdp, pi_e: &Policy) -> Result<SaTable> {
    let q = exact_q(mdp, pi_e)?;
    Ok(conditional_variance(mdp, &exact_v(&q, pi_e)))
}

/// `E_b[w^2 eta^2 (r + gamma v(s') - q(s,a))^2]` with `s ~ denom`.
pub fn eb_m3(mdp: &TabularMdp, pi_e: &Policy, pi_b: &Policy, denom: &[f64]) -> Result<f64> {
    pi_b.check_shape(mdp)?;
    let w = oracle_w_against(mdp, pi_e, denom)?;
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let sigma2 = target_sigma2(mdp, pi_e)?;
    let mut terms = Vec::with_capacity(mdp.n_pairs());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let we = w.get(s) * eta.get(s, a);
            terms.push(denom[s] * pi_b.prob(s, a) * we * we * sigma2.get(s, a));
        }
    }
    Ok(linalg::pairwise_sum(&terms))
}

/// Linear map pushing a state-action measure one step forward, then
/// reweighting by `weight(s,a)`.
fn step(mdp: &TabularMdp, m: &SaTable, weight: &SaTable) -> SaTable {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut state = vec![0.0; n];
    for s in 0..n {
        for a in 0..na {
            let x = m.get(s, a);
            if x != 0.0 {
                for (dst, p) in state.iter_mut().zip(mdp.next_dist(s, a)) {
                    *dst += x * p;
                }
            }
        }
    }
    let mut out = SaTable::zeros(n, na);
    for s in 0..n {
        for a in 0..na {
            out.set(s, a, state[s] * weight.get(s, a));
        }
    }
    out
}

fn dot(a: &SaTable, b: &SaTable) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
}

fn total(a: &SaTable) -> f64 {
    a.values.iter().sum()
}

/// Source of the per-step second moments `M_j(s,a)` for the series
/// `(1-gamma)^2 sum_j gamma^{2j} sum M_j sigma^2`.
trait MomentSequence {
    fn next(&mut self) -> Result<SaTable>;
    /// Multiplies every later term by `c`.
    fn rescale(&mut self, _c: f64) {}
}

struct Cumulative<'a> {
    mdp: &'a TabularMdp,
    weight: SaTable,
    current: Option<SaTable>,
    first: SaTable,
}

impl<'a> Cumulative<'a> {
    fn new(mdp: &'a TabularMdp, pi_e: &Policy, pi_b: &Policy) -> Result<Self> {
        pi_e.check_shape(mdp)?;
        pi_b.check_shape(mdp)?;
        let eta = density_ratio_eta(pi_e, pi_b)?;
        let init = initial_ratio(pi_e, pi_b)?;
        let mut weight = SaTable::zeros(mdp.n_states(), mdp.n_actions());
        let mut first = SaTable::zeros(mdp.n_states(), mdp.n_actions());
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let e = eta.get(s, a);
                let wsa = pi_b.prob(s, a) * e * e;
                weight.set(s, a, wsa);
                first.set(s, a, pi_b.initial_dist()[s] * init[s] * init[s] * wsa);
            }
        }
        Ok(Cumulative { mdp, weight, current: None, first })
    }
}

impl MomentSequence for Cumulative<'_> {
    fn next(&mut self) -> Result<SaTable> {
        let m = match &self.current {
            None => self.first.clone(),
            Some(prev) => step(self.mdp, prev, &self.weight),
        };
        self.current = Some(m.clone());
        Ok(m)
    }

    fn rescale(&mut self, c: f64) {
        if let Some(m) = self.current.as_mut() {
            m.values.iter_mut().for_each(|x| *x *= c);
        }
    }
}

struct Marginal<'a> {
    mdp: &'a TabularMdp,
    pe_w: SaTable,
    pb_w: SaTable,
    pe: Option<SaTable>,
    pb: Option<SaTable>,
    init_e: Vec<f64>,
    init_b: Vec<f64>,
    t: usize,
}

impl<'a> Marginal<'a> {
    fn new(mdp: &'a TabularMdp, pi_e: &Policy, pi_b: &Policy) -> Result<Self> {
        pi_e.check_shape(mdp)?;
        pi_b.check_shape(mdp)?;
        let table = |pi: &Policy| SaTable {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            values: pi.action_probs().to_vec(),
        };
        Ok(Marginal {
            mdp,
            pe_w: table(pi_e),
            pb_w: table(pi_b),
            pe: None,
            pb: None,
            init_e: pi_e.initial_dist().to_vec(),
            init_b: pi_b.initial_dist().to_vec(),
            t: 0,
        })
    }
}

impl MomentSequence for Marginal<'_> {
    fn next(&mut self) -> Result<SaTable> {
        let advance = |cur: &Option<SaTable>, w: &SaTable, init: &[f64]| match cur {
            None => {
                let mut m = w.clone();
                for s in 0..m.n_states {
                    for a in 0..m.n_actions {
                        m.set(s, a, init[s] * w.get(s, a));
                    }
                }
                m
            }
            Some(prev) => step(self.mdp, prev, w),
        };
        let pe = advance(&self.pe, &self.pe_w, &self.init_e);
        let pb = advance(&self.pb, &self.pb_w, &self.init_b);
        let mut out = SaTable::zeros(pe.n_states, pe.n_actions);
        for i in 0..out.values.len() {
            let (x, y) = (pe.values[i], pb.values[i]);
            if y > 0.0 {
                out.values[i] = x * x / y;
            } else if x > 0.0 {
                let na = out.n_actions;
                return Err(OpeError::Support { t: self.t, state: i / na, action: i % na });
            }
        }
        self.pe = Some(pe);
        self.pb = Some(pb);
        self.t += 1;
        Ok(out)
    }
}

/// Per-step growth of `sum M_j` over [`GROWTH_ITERATIONS`] steps, measured
/// on the second half to skip transients.
fn growth_factor(mut seq: impl MomentSequence) -> Result<f64> {
    let half = GROWTH_ITERATIONS / 2;
    let mut log_scale = 0.0;
    let mut log_mid = 0.0;
    let mut log_last = 0.0;
    for j in 0..=GROWTH_ITERATIONS {
        let t = total(&seq.next()?);
        if !(t > 0.0) {
            return Ok(0.0);
        }
        log_last = log_scale + t.ln();
        if j == half {
            log_mid = log_last;
        }
        if !(1e-100..=1e100).contains(&t) {
            seq.rescale(1.0 / t);
            log_scale += t.ln();
        }
    }
    Ok(((log_last - log_mid) / (GROWTH_ITERATIONS - half) as f64).exp())
}

fn sum_series(mdp: &TabularMdp, mut seq: impl MomentSequence, sigma2: &SaTable, growth: f64, tol: f64) -> Result<SeriesBound> {
    let g2 = mdp.gamma() * mdp.gamma();
    let scale = (1.0 - mdp.gamma()).powi(2);
    let mut disc = 1.0;
    let mut sum = 0.0;
    let mut prev_term: Option<f64> = None;
    let mut terms = 0;
    let mut tail = f64::INFINITY;
    while terms < MAX_TERMS {
        let m = seq.next()?;
        let term = scale * disc * dot(&m, sigma2);
        sum += term;
        terms += 1;
        disc *= g2;
        let mass = scale * disc * total(&m) * sigma2.max_abs();
        let ratio = match prev_term {
            Some(p) if p > 0.0 => (term / p).max(growth * g2),
            _ => growth * g2,
        };
        prev_term = Some(term);
        if ratio < 1.0 {
            tail = mass.max(term) * ratio / (1.0 - ratio);
            if terms > 1 && tail < tol {
                break;
            }
        }
    }
    Ok(SeriesBound { bound: Bound::Finite(sum), terms, tail_bound: tail, growth })
}

fn series_bound<S: MomentSequence>(
    mdp: &TabularMdp,
    pi_e: &Policy,
    make: impl Fn() -> Result<S>,
    tol: f64,
) -> Result<SeriesBound> {
    let sigma2 = target_sigma2(mdp, pi_e)?;
    if sigma2.values.iter().all(|&x| x <= 0.0) {
        return Ok(SeriesBound { bound: Bound::Finite(0.0), terms: 0, tail_bound: 0.0, growth: 0.0 });
    }
    let growth = growth_factor(make()?)?;
    let g2 = mdp.gamma() * mdp.gamma();
    if growth * g2 >= 1.0 - DIVERGENCE_MARGIN {
        return Ok(SeriesBound { bound: Bound::Divergent, terms: GROWTH_ITERATIONS, tail_bound: f64::INFINITY, growth });
    }
    sum_series(mdp, make()?, &sigma2, growth, tol)
}

/// Efficiency bound in the non-Markov model, via the cumulative-ratio
/// recursion. Initial distributions are taken from the two policies.
pub fn eb_m1(mdp: &TabularMdp, pi_e: &Policy, pi_b: &Policy, tol: f64) -> Result<SeriesBound> {
    series_bound(mdp, pi_e, || Cumulative::new(mdp, pi_e, pi_b), tol)
}

/// Efficiency bound in the time-varying Markov model, via marginal ratios.
pub fn eb_m2(mdp: &TabularMdp, pi_e: &Policy, pi_b: &Policy, tol: f64) -> Result<SeriesBound> {
    series_bound(mdp, pi_e, || Marginal::new(mdp, pi_e, pi_b), tol)
}

fn partial_sums(mdp: &TabularMdp, mut seq: impl MomentSequence, sigma2: &SaTable, k_max: usize) -> Result<Vec<f64>> {
    let g2 = mdp.gamma() * mdp.gamma();
    let scale = (1.0 - mdp.gamma()).powi(2);
    let mut disc = 1.0;
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(k_max + 1);
    for _ in 0..=k_max {
        let m = seq.next()?;
        sum += scale * disc * dot(&m, sigma2);
        disc *= g2;
        out.push(sum);
    }
    Ok(out)
}

/// Partial sums of the cumulative-ratio series over `j = 0..=k_max`.
pub fn eb_m1_partial_sums(mdp: &TabularMdp, pi_e: &Policy, pi_b: &Policy, k_max: usize) -> Result<Vec<f64>> {
    let sigma2 = target_sigma2(mdp, pi_e)?;
    partial_sums(mdp, Cumulative::new(mdp, pi_e, pi_b)?, &sigma2, k_max)
}

/// Partial sums of the marginal-ratio series over `j = 0..=k_max`.
pub fn eb_m2_partial_sums(mdp: &TabularMdp, pi_e: &Policy, pi_b: &Policy, k_max: usize) -> Result<Vec<f64>> {
    let sigma2 = target_sigma2(mdp, pi_e)?;
    partial_sums(mdp, Marginal::new(mdp, pi_e, pi_b)?, &sigma2, k_max)
}

/// The three bounds and the true value for one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub rho: f64,
    pub eb_m1: Bound,
    pub eb_m2: Bound,
    pub eb_m3: f64,
    pub truncation_k: usize,
    pub tail_bound: f64,
    /// `gamma * sqrt(growth)` of the cumulative-ratio recursion; the M1
    /// series diverges when this reaches 1.
    pub gamma_c_product: f64,
}

impl BoundReport {
    pub const CSV_HEADER: [&'static str; 9] = [
        "rho", "eb_m1", "eb_m1_verdict", "eb_m2", "eb_m2_verdict", "eb_m3", "truncation_k", "tail_bound", "gamma_c",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            format!("{:.17e}", self.rho),
            self.eb_m1.to_string(),
            self.eb_m1.verdict().to_string(),
            self.eb_m2.to_string(),
            self.eb_m2.verdict().to_string(),
            format!("{:.17e}", self.eb_m3),
            self.truncation_k.to_string(),
            format!("{:.17e}", self.tail_bound),
            format!("{:.17e}", self.gamma_c_product),
        ]
    }

    pub fn from_csv_record(rec: &[&str]) -> Result<Self> {
        if rec.len() != Self::CSV_HEADER.len() {
            return Err(OpeError::parse(1, 1, format!("expected {} fields", Self::CSV_HEADER.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|_| OpeError::parse(1, i + 1, format!("bad number `{}`", rec[i])))
        };
        let bound = |i: usize| -> Result<Bound> {
            match rec[i + 1].trim() {
                "divergent" => Ok(Bound::Divergent),
                "finite" => Ok(Bound::Finite(num(i)?)),
                other => Err(OpeError::parse(1, i + 2, format!("bad verdict `{other}`"))),
            }
        };
        Ok(BoundReport {
            rho: num(0)?,
            eb_m1: bound(1)?,
            eb_m2: bound(3)?,
            eb_m3: num(5)?,
            truncation_k: rec[6].trim().parse().map_err(|_| OpeError::parse(1, 7, "bad truncation_k"))?,
            tail_bound: num(7)?,
            gamma_c_product: num(8)?,
        })
    }
}

/// Every bound plus the true value. `denom` selects the reference
/// distribution for `w` in the MDP bound.
pub fn bound_report(mdp: &TabularMdp, pi_e: &Policy, pi_b: &Policy, denom: DenominatorKind, tol: f64) -> Result<BoundReport> {
    let reference = match denom {
        DenominatorKind::InitialDist => pi_b.initial_dist().to_vec(),
        DenominatorKind::StationaryDist => stationary_distribution(mdp, pi_b)?,
    };
    let m1 = eb_m1(mdp, pi_e, pi_b, tol)?;
    let m2 = eb_m2(mdp, pi_e, pi_b, tol)?;
    let tail = [m1, m2].iter().filter(|b| !b.bound.is_divergent()).map(|b| b.tail_bound).fold(0.0, f64::max);
    Ok(BoundReport {
        rho: exact_policy_value(mdp, pi_e)?,
        eb_m1: m1.bound,
        eb_m2: m2.bound,
        eb_m3: eb_m3(mdp, pi_e, pi_b, &reference)?,
        truncation_k: m1.terms.max(m2.terms),
        tail_bound: tail,
        gamma_c_product: mdp.gamma() * m1.growth.sqrt(),
    })
}

/// Curse-of-horizon check.
#[derive(Debug, Clone, PartialEq)]
pub struct CurseReport {
    /// `E[log eta]` with `s` from the behavior stationary distribution and
    /// `a ~ pi_e`, i.e. the expected per-step KL divergence.
    pub expected_log_eta: f64,
    pub neg_log_gamma: f64,
    /// True when `expected_log_eta >= -log gamma`.
    pub curse_condition: bool,
    pub eb_m1: Bound,
    pub eb_m2: Bound,
    pub eb_m3: f64,
}

pub fn curse_diagnostic(mdp: &TabularMdp, pi_e: &Policy, pi_b: &Policy, gamma: f64) -> Result<CurseReport> {
    let mdp = mdp.with_gamma(gamma)?;
    let stat = stationary_distribution(&mdp, pi_b)?;
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let mut terms = Vec::new();
    for (s, &d) in stat.iter().enumerate() {
        for a in 0..mdp.n_actions() {
            let pe = pi_e.prob(s, a);
            if pe > 0.0 {
                terms.push(d * pe * eta.get(s, a).ln());
            }
        }
    }
    let expected_log_eta = linalg::pairwise_sum(&terms);
    let neg_log_gamma = -gamma.ln();
    Ok(CurseReport {
        expected_log_eta,
        neg_log_gamma,
        curse_condition: expected_log_eta >= neg_log_gamma,
        eb_m1: eb_m1(&mdp, pi_e, pi_b, DEFAULT_TOL)?.bound,
        eb_m2: eb_m2(&mdp, pi_e, pi_b, DEFAULT_TOL)?.bound,
        eb_m3: eb_m3(&mdp, pi_e, pi_b, &stat)?,
    })
}
