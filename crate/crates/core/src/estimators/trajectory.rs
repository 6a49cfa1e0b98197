//! Estimators that use whole trajectories: IS, SNIS, DRL(M1), DRL(M2).

use std::time::Instant;

use super::{even_sizes, EstimateReport, FittingScheme};
use crate::error::{OpeError, Result};
use crate::linalg;
use crate::mdp::{density_ratio_eta, initial_ratio, Policy, QFunction, SaTable};
use crate::nuisance::v_from_q;
use crate::sampling::TrajectoryDataset;

/// `min(T - 1, ceil(ln(N + 2)^1.5))`.
pub fn default_omega(n_traj: usize, horizon: usize) -> usize {
    let w = ((n_traj as f64 + 2.0).ln().powf(1.5)).ceil() as usize;
    w.min(horizon.saturating_sub(1))
}

/// `c_H = 1 / sum_{t <= H} gamma^t`.
fn normalizer(gamma: f64, horizon: usize) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for _ in 0..=horizon {
        total += disc;
        disc *= gamma;
    }
    1.0 / total
}

fn check_horizon(trajs: &TrajectoryDataset, horizon: usize) -> Result<()> {
    if trajs.trajectories.is_empty() {
        return Err(OpeError::EmptyData);
    }
    if let Some(short) = trajs.trajectories.iter().find(|t| t.len() <= horizon) {
        return Err(OpeError::Dimension(format!(
            "horizon {horizon} needs at least {} steps per trajectory, found {}",
            horizon + 1,
            short.len()
        )));
    }
    Ok(())
}

/// Cumulative ratios `nu_0..nu_horizon` for every trajectory, each
/// including the initial-distribution ratio at `s_0`.
pub fn importance_weights(trajs: &TrajectoryDataset, pi_e: &Policy, pi_b: &Policy, horizon: usize) -> Result<Vec<Vec<f64>>> {
    check_horizon(trajs, horizon)?;
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let init = initial_ratio(pi_e, pi_b)?;
    Ok(trajs
        .trajectories
        .iter()
        .map(|traj| {
            let mut nu = init[traj.states[0]];
            (0..=horizon)
                .map(|t| {
                    nu *= eta.get(traj.states[t], traj.actions[t]);
                    nu
                })
                .collect()
        })
        .collect())
}

/// Per-trajectory IS scores `c_H sum_t gamma^t nu_t r_t`.
pub fn is_from_weights(trajs: &TrajectoryDataset, nu: &[Vec<f64>], gamma: f64, horizon: usize) -> Vec<f64> {
    let c = normalizer(gamma, horizon);
    trajs
        .trajectories
        .iter()
        .zip(nu)
        .map(|(traj, w)| {
            let mut acc = 0.0;
            let mut disc = 1.0;
            for t in 0..=horizon {
                acc += disc * (w[t] * traj.rewards[t]);
                disc *= gamma;
            }
            c * acc
        })
        .collect()
}

/// `c_H sum_t gamma^t P_N[nu_t r_t] / P_N[nu_t]`.
pub fn snis_from_weights(trajs: &TrajectoryDataset, nu: &[Vec<f64>], gamma: f64, horizon: usize) -> Result<f64> {
    let c = normalizer(gamma, horizon);
    let mut acc = 0.0;
    let mut disc = 1.0;
    let mut num = Vec::with_capacity(nu.len());
    let mut den = Vec::with_capacity(nu.len());
    for t in 0..=horizon {
        num.clear();
        den.clear();
        for (traj, w) in trajs.trajectories.iter().zip(nu) {
            num.push(w[t] * traj.rewards[t]);
            den.push(w[t]);
        }
        let d = linalg::pairwise_sum(&den);
        if !(d > 0.0) {
            return Err(OpeError::ZeroNormalizer { t });
        }
        acc += disc * (linalg::pairwise_sum(&num) / d);
        disc *= gamma;
    }
    Ok(c * acc)
}

fn summarize(name: &str, scheme: FittingScheme, trajs: &TrajectoryDataset, scores: &[f64], alpha: f64, start: Instant) -> EstimateReport {
    let rho = linalg::mean(scores);
    let mut rep = EstimateReport::new(name, scheme, rho);
    if scores.len() >= 2 {
        rep = rep.with_variance(linalg::centered_second_moment(scores, rho), scores.len(), alpha);
    }
    rep.n_traj = trajs.n_traj();
    rep.horizon = trajs.horizon;
    rep.n_effective = trajs.n_transitions();
    rep.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    rep
}

/// Importance sampling truncated at `horizon` (steps `0..=horizon`).
pub fn estimate_is(
    trajs: &TrajectoryDataset,
    pi_e: &Policy,
    pi_b: &Policy,
    gamma: f64,
    horizon: usize,
    alpha: f64,
) -> Result<EstimateReport> {
    let start = Instant::now();
    let nu = importance_weights(trajs, pi_e, pi_b, horizon)?;
    let scores = is_from_weights(trajs, &nu, gamma, horizon);
    let mut rep = summarize("is", FittingScheme::OracleNuisance, trajs, &scores, alpha, start);
    rep.note("truncation", horizon);
    Ok(rep)
}

/// Self-normalized importance sampling truncated at `horizon`.
pub fn estimate_snis(trajs: &TrajectoryDataset, pi_e: &Policy, pi_b: &Policy, gamma: f64, horizon: usize) -> Result<EstimateReport> {
    let start = Instant::now();
    let nu = importance_weights(trajs, pi_e, pi_b, horizon)?;
    let rho = snis_from_weights(trajs, &nu, gamma, horizon)?;
    let mut rep = EstimateReport::new("snis", FittingScheme::OracleNuisance, rho);
    rep.n_traj = trajs.n_traj();
    rep.horizon = trajs.horizon;
    rep.n_effective = trajs.n_transitions();
    rep.note("truncation", horizon);
    rep.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(rep)
}

/// Per-step q-functions `q_0..q_omega`, possibly one set per fold.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNuisance {
    pub scheme: FittingScheme,
    pub q_sets: Vec<Vec<QFunction>>,
    /// Which set scores trajectory `i`.
    pub set_of_traj: Vec<usize>,
}

impl StepNuisance {
    /// One set shared by all `n_traj` trajectories.
    pub fn shared(q: Vec<QFunction>, n_traj: usize, scheme: FittingScheme) -> Self {
        StepNuisance {
            scheme,
            q_sets: vec![q],
            set_of_traj: vec![0; n_traj],
        }
    }
}

/// Fits per-step q-functions under `scheme`. Cross-trajectory fitting uses
/// contiguous halves of the trajectories; cross-time fitting has no
/// per-step analogue and is rejected.
pub fn fit_step_q_by_folds<F>(trajs: &TrajectoryDataset, scheme: FittingScheme, fit: F) -> Result<StepNuisance>
where
    F: Fn(&TrajectoryDataset) -> Result<Vec<QFunction>>,
{
    let n = trajs.n_traj();
    match scheme {
        FittingScheme::Adaptive | FittingScheme::OracleNuisance => Ok(StepNuisance::shared(fit(trajs)?, n, scheme)),
        FittingScheme::CrossTrajectory2 => {
            if n < 2 {
                return Err(OpeError::Infeasible(format!(
                    "cross-trajectory fitting requires N >= 2 trajectories, found {n}"
                )));
            }
            let first = even_sizes(n, 2)[0];
            let part = |range: std::ops::Range<usize>| TrajectoryDataset {
                trajectories: trajs.trajectories[range].to_vec(),
                horizon: trajs.horizon,
                regime: trajs.regime,
            };
            // set j is fitted on the other half and scores half j
            let q0 = fit(&part(first..n)).map_err(|e| OpeError::Fold { fold: 0, source: Box::new(e) })?;
            let q1 = fit(&part(0..first)).map_err(|e| OpeError::Fold { fold: 1, source: Box::new(e) })?;
            Ok(StepNuisance {
                scheme,
                q_sets: vec![q0, q1],
                set_of_traj: (0..n).map(|i| usize::from(i >= first)).collect(),
            })
        }
        FittingScheme::CrossTime4 => Err(OpeError::Infeasible(
            "cross-time fitting applies to DRL(M3) only; per-step q-functions need whole trajectories".into(),
        )),
    }
}

/// `v_t = E_{pi_e}[q_t]` for every set and step.
fn step_values(nuis: &StepNuisance, pi_e: &Policy, omega: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    nuis.q_sets
        .iter()
        .map(|qs| {
            if qs.len() <= omega {
                return Err(OpeError::Dimension(format!(
                    "need {} per-step q-functions, got {}",
                    omega + 1,
                    qs.len()
                )));
            }
            Ok(qs[..=omega].iter().map(|q| v_from_q(q, pi_e)).collect())
        })
        .collect()
}

fn check_sets(trajs: &TrajectoryDataset, nuis: &StepNuisance) -> Result<()> {
    if nuis.set_of_traj.len() != trajs.n_traj() || nuis.set_of_traj.iter().any(|&k| k >= nuis.q_sets.len()) {
        return Err(OpeError::Dimension("per-trajectory nuisance assignment does not match the data".into()));
    }
    Ok(())
}

/// DRL(M1): `c_omega sum_{t<=omega} gamma^t (nu_t (r_t - q_t) + nu_{t-1} v_t)`
/// averaged over trajectories, with `nu_{-1}` the initial ratio.
pub fn estimate_drl_m1(
    trajs: &TrajectoryDataset,
    pi_e: &Policy,
    pi_b: &Policy,
    gamma: f64,
    omega: usize,
    nuis: &StepNuisance,
    alpha: f64,
) -> Result<EstimateReport> {
    let start = Instant::now();
    check_horizon(trajs, omega)?;
    check_sets(trajs, nuis)?;
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let init = initial_ratio(pi_e, pi_b)?;
    let values = step_values(nuis, pi_e, omega)?;
    let c = normalizer(gamma, omega);
    let scores: Vec<f64> = trajs
        .trajectories
        .iter()
        .zip(&nuis.set_of_traj)
        .map(|(traj, &k)| {
            let (qs, vs) = (&nuis.q_sets[k], &values[k]);
            let mut nu_prev = init[traj.states[0]];
            let mut acc = 0.0;
            let mut disc = 1.0;
            for t in 0..=omega {
                let (s, a) = (traj.states[t], traj.actions[t]);
                let nu = nu_prev * eta.get(s, a);
                acc += disc * (nu * (traj.rewards[t] - qs[t].get(s, a)) + nu_prev * vs[t][s]);
                disc *= gamma;
                nu_prev = nu;
            }
            c * acc
        })
        .collect();
    let mut rep = summarize("drl-m1", nuis.scheme, trajs, &scores, alpha, start);
    rep.note("truncation", omega);
    Ok(rep)
}

/// DRL(M2): as DRL(M1) with marginal ratios `mu_t(s_t, a_t)` in place of
/// `nu_t`; `mu` must hold `mu_0..mu_omega`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_drl_m2(
    trajs: &TrajectoryDataset,
    pi_e: &Policy,
    pi_b: &Policy,
    gamma: f64,
    omega: usize,
    mu: &[SaTable],
    nuis: &StepNuisance,
    alpha: f64,
) -> Result<EstimateReport> {
    let start = Instant::now();
    check_horizon(trajs, omega)?;
    check_sets(trajs, nuis)?;
    if mu.len() <= omega {
        return Err(OpeError::Dimension(format!("need {} marginal ratios, got {}", omega + 1, mu.len())));
    }
    let init = initial_ratio(pi_e, pi_b)?;
    let values = step_values(nuis, pi_e, omega)?;
    let c = normalizer(gamma, omega);
    let scores: Vec<f64> = trajs
        .trajectories
        .iter()
        .zip(&nuis.set_of_traj)
        .map(|(traj, &k)| {
            let (qs, vs) = (&nuis.q_sets[k], &values[k]);
            let mut mu_prev = init[traj.states[0]];
            let mut acc = 0.0;
            let mut disc = 1.0;
            for t in 0..=omega {
                let (s, a) = (traj.states[t], traj.actions[t]);
                let m = mu[t].get(s, a);
                acc += disc * (m * (traj.rewards[t] - qs[t].get(s, a)) + mu_prev * vs[t][s]);
                disc *= gamma;
                mu_prev = m;
            }
            c * acc
        })
        .collect();
    let mut rep = summarize("drl-m2", nuis.scheme, trajs, &scores, alpha, start);
    rep.note("truncation", omega);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{marginal_ratio_mu, RewardNoise, TabularMdp};
    use crate::nuisance::EmpiricalModel;
    use crate::sampling::{sample_trajectories, InitRegime, Trajectory};

    fn chain() -> (TabularMdp, Policy, Policy) {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.7, 0.3, 0.2, 0.8, 0.4, 0.6, 0.9, 0.1],
            vec![1.0, 0.0, 0.5, 0.25],
            vec![0.0; 4],
            RewardNoise::Gaussian,
            0.8,
            1.0,
        )
        .unwrap();
        let pe = Policy::new(2, 2, vec![0.9, 0.1, 0.3, 0.7], vec![0.6, 0.4]).unwrap();
        let pb = Policy::new(2, 2, vec![0.5, 0.5, 0.6, 0.4], vec![0.5, 0.5]).unwrap();
        (mdp, pe, pb)
    }

    #[test]
    fn on_policy_constant_reward() {
        let mdp = TabularMdp::new(2, 2, vec![0.5; 8], vec![0.7; 4], vec![0.0; 4], RewardNoise::Gaussian, 0.9, 1.0).unwrap();
        let pi = Policy::uniform(2, 2, vec![0.5, 0.5]).unwrap();
        let data = sample_trajectories(&mdp, &pi, 5, 6, InitRegime::ArbitraryInit, 0, 3).unwrap();
        let is = estimate_is(&data, &pi, &pi, 0.9, 5, 0.05).unwrap();
        assert!((is.rho_hat - 0.7).abs() < 1e-12);
        let snis = estimate_snis(&data, &pi, &pi, 0.9, 5).unwrap();
        assert!((snis.rho_hat - 0.7).abs() < 1e-12);
        let h0 = estimate_is(&data, &pi, &pi, 0.9, 0, 0.05).unwrap();
        assert!((h0.rho_hat - 0.7).abs() < 1e-12);
    }

    #[test]
    fn single_trajectory_snis_is_discounted_average() {
        let (_, pe, pb) = chain();
        let data = TrajectoryDataset {
            trajectories: vec![Trajectory { states: vec![0, 1, 0], actions: vec![0, 1], rewards: vec![1.0, 0.25] }],
            horizon: 2,
            regime: InitRegime::ArbitraryInit,
        };
        let rep = estimate_snis(&data, &pe, &pb, 0.5, 1).unwrap();
        assert!((rep.rho_hat - (1.0 + 0.5 * 0.25) / 1.5).abs() < 1e-15);
    }

    #[test]
    fn snis_is_scale_invariant() {
        let (mdp, pe, pb) = chain();
        let data = sample_trajectories(&mdp, &pb, 30, 5, InitRegime::ArbitraryInit, 0, 8).unwrap();
        let nu = importance_weights(&data, &pe, &pb, 4).unwrap();
        let scaled: Vec<Vec<f64>> = nu.iter().map(|w| w.iter().map(|x| 7.0 * x).collect()).collect();
        let a = snis_from_weights(&data, &nu, 0.8, 4).unwrap();
        let b = snis_from_weights(&data, &scaled, 0.8, 4).unwrap();
        assert!((a - b).abs() < 1e-12);
        let ia = linalg::mean(&is_from_weights(&data, &nu, 0.8, 4));
        let ib = linalg::mean(&is_from_weights(&data, &scaled, 0.8, 4));
        assert!((ib - 7.0 * ia).abs() < 1e-12);
    }

    #[test]
    fn zero_normalizer() {
        let (_, pe, _) = chain();
        let det = Policy::deterministic(2, &[0, 0], vec![0.5, 0.5]).unwrap();
        let pb = Policy::new(2, 2, vec![0.5, 0.5, 0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let data = TrajectoryDataset {
            trajectories: vec![Trajectory { states: vec![0, 0], actions: vec![1], rewards: vec![1.0] }],
            horizon: 1,
            regime: InitRegime::ArbitraryInit,
        };
        assert!(matches!(estimate_snis(&data, &det, &pb, 0.9, 0), Err(OpeError::ZeroNormalizer { t: 0 })));
        let _ = pe;
    }

    #[test]
    fn drl_m1_with_zero_q_is_truncated_is() {
        let (mdp, pe, pb) = chain();
        let data = sample_trajectories(&mdp, &pb, 20, 6, InitRegime::ArbitraryInit, 0, 4).unwrap();
        let zeros = StepNuisance::shared(vec![QFunction::zeros(2, 2); 6], 20, FittingScheme::Adaptive);
        let drl = estimate_drl_m1(&data, &pe, &pb, 0.8, 5, &zeros, 0.05).unwrap();
        let is = estimate_is(&data, &pe, &pb, 0.8, 5, 0.05).unwrap();
        assert_eq!(drl.rho_hat.to_bits(), is.rho_hat.to_bits());
    }

    #[test]
    fn on_policy_drl_m1_oracle_q_has_zero_variance() {
        // deterministic transitions and start state, stochastic policy
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.5, 0.25],
            vec![0.0; 4],
            RewardNoise::Gaussian,
            0.8,
            1.0,
        )
        .unwrap();
        let pi = Policy::new(2, 2, vec![0.5, 0.5, 0.6, 0.4], vec![1.0, 0.0]).unwrap();
        let data = sample_trajectories(&mdp, &pi, 10, 4, InitRegime::ArbitraryInit, 0, 5).unwrap();
        let qs = EmpiricalModel::from_mdp(&mdp).truncated_q(&pi, 0.8, 3);
        let truth = normalizer(0.8, 3) * v_from_q(&qs[0], &pi)[0];
        let nuis = StepNuisance::shared(qs, 10, FittingScheme::OracleNuisance);
        let rep = estimate_drl_m1(&data, &pi, &pi, 0.8, 3, &nuis, 0.05).unwrap();
        assert!((rep.rho_hat - truth).abs() < 1e-12);
        assert!(rep.variance_hat.unwrap() < 1e-24);
    }

    #[test]
    fn drl_m2_with_unit_mu_on_policy_equals_m1() {
        let (mdp, _, pb) = chain();
        let data = sample_trajectories(&mdp, &pb, 12, 5, InitRegime::ArbitraryInit, 0, 6).unwrap();
        let qs = EmpiricalModel::from_mdp(&mdp).truncated_q(&pb, 0.8, 4);
        let nuis = StepNuisance::shared(qs, 12, FittingScheme::OracleNuisance);
        let tables = marginal_ratio_mu(&mdp, &pb, &pb, 4).unwrap();
        assert!(tables.mu.iter().all(|m| m.values.iter().all(|&x| x == 1.0)));
        let a = estimate_drl_m1(&data, &pb, &pb, 0.8, 4, &nuis, 0.05).unwrap();
        let b = estimate_drl_m2(&data, &pb, &pb, 0.8, 4, &tables.mu, &nuis, 0.05).unwrap();
        assert!((a.rho_hat - b.rho_hat).abs() < 1e-12);
    }

    #[test]
    fn cross_fitting_needs_two_trajectories() {
        let (mdp, _, pb) = chain();
        let data = sample_trajectories(&mdp, &pb, 1, 5, InitRegime::ArbitraryInit, 0, 6).unwrap();
        let fit = |_: &TrajectoryDataset| Ok(vec![QFunction::zeros(2, 2); 5]);
        assert!(matches!(
            fit_step_q_by_folds(&data, FittingScheme::CrossTrajectory2, fit),
            Err(OpeError::Infeasible(_))
        ));
        let data = sample_trajectories(&mdp, &pb, 5, 5, InitRegime::ArbitraryInit, 0, 6).unwrap();
        let n = fit_step_q_by_folds(&data, FittingScheme::CrossTrajectory2, fit).unwrap();
        assert_eq!(n.set_of_traj, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn default_truncation() {
        assert_eq!(default_omega(1, 100), 2);
        assert_eq!(default_omega(1000, 100), 19);
        assert_eq!(default_omega(1000, 5), 4);
    }
}
