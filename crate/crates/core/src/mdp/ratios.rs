use super::{discounted_visitation, stationary_distribution, Policy, Provenance, SaTable, TabularMdp, WFunction};
use crate::error::{OpeError, Result};
use crate::sampling::Trajectory;

/// Which distribution sits in the denominator of the stationary ratio `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenominatorKind {
    /// The behavior policy's initial distribution `p0_b`.
    InitialDist,
    /// The undiscounted stationary distribution of the behavior chain.
    StationaryDist,
}

/// Policy ratio and tabulated marginal ratios `mu_0 .. mu_{t_max}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTables {
    pub eta: SaTable,
    pub mu: Vec<SaTable>,
}

/// `eta(s,a) = pi_e(a|s) / pi_b(a|s)`, zero where both vanish.
pub fn density_ratio_eta(pi_e: &Policy, pi_b: &Policy) -> Result<SaTable> {
    if pi_e.n_states() != pi_b.n_states() || pi_e.n_actions() != pi_b.n_actions() {
        return Err(OpeError::Dimension("target and behavior policies differ in shape".into()));
    }
    let mut eta = SaTable::zeros(pi_e.n_states(), pi_e.n_actions());
    for s in 0..pi_e.n_states() {
        for a in 0..pi_e.n_actions() {
            let (pe, pb) = (pi_e.prob(s, a), pi_b.prob(s, a));
            if pb > 0.0 {
                eta.set(s, a, pe / pb);
            } else if pe > 0.0 {
                return Err(OpeError::Overlap { state: s, action: a });
            }
        }
    }
    Ok(eta)
}

/// `p0_e(s) / p0_b(s)`, zero where both vanish.
pub fn initial_ratio(pi_e: &Policy, pi_b: &Policy) -> Result<Vec<f64>> {
    pi_e.initial_dist()
        .iter()
        .zip(pi_b.initial_dist())
        .enumerate()
        .map(|(s, (&pe, &pb))| {
            if pb > 0.0 {
                Ok(pe / pb)
            } else if pe > 0.0 {
                Err(OpeError::Support { t: 0, state: s, action: 0 })
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

/// Oracle stationary density ratio `w(s) = d_e^gamma(s) / denom(s)`.
pub fn oracle_w(
    mdp: &TabularMdp,
    pi_e: &Policy,
    pi_b: &Policy,
    denom: DenominatorKind,
) -> Result<WFunction> {
    let reference = match denom {
        DenominatorKind::InitialDist => pi_b.initial_dist().to_vec(),
        DenominatorKind::StationaryDist => stationary_distribution(mdp, pi_b)?,
    };
    oracle_w_against(mdp, pi_e, &reference)
}

/// Oracle `w` against an explicit reference distribution over states.
pub fn oracle_w_against(mdp: &TabularMdp, pi_e: &Policy, reference: &[f64]) -> Result<WFunction> {
    if reference.len() != mdp.n_states() {
        return Err(OpeError::Dimension("reference distribution has wrong length".into()));
    }
    if let Some(state) = reference.iter().position(|&p| !(p > 0.0)) {
        return Err(OpeError::ZeroMass { state });
    }
    let d = discounted_visitation(mdp, pi_e)?;
    Ok(WFunction::new(d.iter().zip(reference).map(|(x, p)| x / p).collect())
        .with_provenance(Provenance::Oracle))
}

/// State-action marginals `p_pi^{(t)}(s,a)` for `t = 0..=t_max`, starting
/// from `pi`'s initial distribution.
pub fn marginals(mdp: &TabularMdp, pi: &Policy, t_max: usize) -> Vec<SaTable> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut state = pi.initial_dist().to_vec();
    let mut out = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        let mut sa = SaTable::zeros(n, na);
        for s in 0..n {
            for a in 0..na {
                sa.set(s, a, state[s] * pi.prob(s, a));
            }
        }
        if t < t_max {
            let mut next = vec![0.0; n];
            for s in 0..n {
                for a in 0..na {
                    let m = sa.get(s, a);
                    if m == 0.0 {
                        continue;
                    }
                    for (dst, p) in next.iter_mut().zip(mdp.next_dist(s, a)) {
                        *dst += m * p;
                    }
                }
            }
            state = next;
        }
        out.push(sa);
    }
    out
}

/// Marginal ratios `mu_t = p_e^{(t)} / p_b^{(t)}` for `t = 0..=t_max`.
pub fn marginal_ratio_mu(
    mdp: &TabularMdp,
    pi_e: &Policy,
    pi_b: &Policy,
    t_max: usize,
) -> Result<RatioTables> {
    pi_e.check_shape(mdp)?;
    pi_b.check_shape(mdp)?;
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let pe = marginals(mdp, pi_e, t_max);
    let pb = marginals(mdp, pi_b, t_max);
    let mut mu = Vec::with_capacity(t_max + 1);
    for (t, (e, b)) in pe.iter().zip(&pb).enumerate() {
        let mut m = SaTable::zeros(mdp.n_states(), mdp.n_actions());
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let (x, y) = (e.get(s, a), b.get(s, a));
                if y > 0.0 {
                    m.set(s, a, x / y);
                } else if x > 0.0 {
                    return Err(OpeError::Support { t, state: s, action: a });
                }
            }
        }
        mu.push(m);
    }
    Ok(RatioTables { eta, mu })
}

/// Cumulative ratio `nu_t = (p0_e(s_0)/p0_b(s_0)) * prod_{k<=t} eta(s_k, a_k)`.
///
/// With matched initial distributions the leading factor is 1.
pub fn cumulative_ratio_nu(traj: &Trajectory, pi_e: &Policy, pi_b: &Policy, t: usize) -> Result<f64> {
    if t >= traj.actions.len() {
        return Err(OpeError::Dimension(format!(
            "t={t} beyond trajectory of {} steps",
            traj.actions.len()
        )));
    }
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let init = initial_ratio(pi_e, pi_b)?;
    let mut nu = init[traj.states[0]];
    for k in 0..=t {
        nu *= eta.get(traj.states[k], traj.actions[k]);
    }
    Ok(nu)
}
