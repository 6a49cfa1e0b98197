//! Estimators built on the stationary density ratio: DM, MIS and DRL(M3).

use std::time::Instant;

use super::{make_folds, EstimateReport, FittingScheme};
use crate::error::{OpeError, Result};
use crate::linalg;
use crate::mdp::{density_ratio_eta, Policy, QFunction, SaTable, TabularMdp, WFunction};
use crate::nuisance::{v_from_q, Moments};
use crate::sampling::{Transition, TransitionDataset};

/// Produces `w` from a training subset.
pub trait WFitter {
    fn fit_w(&self, data: &TransitionDataset) -> Result<WFunction>;
}

/// Produces `q` from a training subset.
pub trait QFitter {
    fn fit_q(&self, data: &TransitionDataset) -> Result<QFunction>;
}

impl<F: Fn(&TransitionDataset) -> Result<WFunction>> WFitter for F {
    fn fit_w(&self, data: &TransitionDataset) -> Result<WFunction> {
        self(data)
    }
}

impl<F: Fn(&TransitionDataset) -> Result<QFunction>> QFitter for F {
    fn fit_q(&self, data: &TransitionDataset) -> Result<QFunction> {
        self(data)
    }
}

fn dm_value(v: &[f64], p0_e: &[f64], gamma: f64) -> f64 {
    (1.0 - gamma) * p0_e.iter().zip(v).map(|(p, x)| p * x).sum::<f64>()
}

/// The estimating function for one `(w, q)` pair with `v` and the
/// initial-distribution term precomputed.
#[derive(Debug, Clone)]
pub struct Psi<'a> {
    w: &'a WFunction,
    q: &'a QFunction,
    eta: &'a SaTable,
    v: Vec<f64>,
    gamma: f64,
    dm: f64,
}

impl<'a> Psi<'a> {
    pub fn new(w: &'a WFunction, q: &'a QFunction, eta: &'a SaTable, pi_e: &Policy, gamma: f64) -> Self {
        let v = v_from_q(q, pi_e);
        let dm = dm_value(&v, pi_e.initial_dist(), gamma);
        Psi { w, q, eta, v, gamma, dm }
    }

    /// `(1 - gamma) E_{p0_e}[v]`.
    pub fn dm_term(&self) -> f64 {
        self.dm
    }

    /// The correction `w(s) eta(s,a) (r + gamma v(s') - q(s,a))` alone.
    #[inline]
    pub fn correction(&self, s: usize, a: usize, r: f64, s_next: usize) -> f64 {
        self.w.get(s) * self.eta.get(s, a) * (r + self.gamma * self.v[s_next] - self.q.get(s, a))
    }

    #[inline]
    pub fn eval(&self, tr: &Transition) -> f64 {
        self.dm + self.correction(tr.s, tr.a, tr.r, tr.s_next)
    }
}

/// `psi` at one transition; `dm_term` must be `(1 - gamma) E_{p0_e}[v]` for
/// the same `q`.
pub fn psi_eval(
    tr: &Transition,
    w: &WFunction,
    q: &QFunction,
    pi_e: &Policy,
    pi_b: &Policy,
    gamma: f64,
    dm_term: f64,
) -> Result<f64> {
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let v_next: f64 = pi_e.row(tr.s_next).iter().enumerate().map(|(a, p)| p * q.get(tr.s_next, a)).sum();
    Ok(dm_term + w.get(tr.s) * eta.get(tr.s, tr.a) * (tr.r + gamma * v_next - q.get(tr.s, tr.a)))
}

/// Exact expectation of `psi` when `s ~ denom`, `a ~ pi_b`, `s' ~ P` and
/// `r` has its conditional mean.
pub fn psi_mean_exact(
    mdp: &TabularMdp,
    pi_e: &Policy,
    pi_b: &Policy,
    denom: &[f64],
    w: &WFunction,
    q: &QFunction,
) -> Result<f64> {
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let psi = Psi::new(w, q, &eta, pi_e, mdp.gamma());
    let m = Moments::exact(mdp, pi_b, denom)?;
    let terms: Vec<f64> = m
        .cells
        .iter()
        .map(|c| {
            let wt = psi.w.get(c.s) * psi.eta.get(c.s, c.a);
            wt * (c.reward + c.weight * (psi.gamma * psi.v[c.s_next] - psi.q.get(c.s, c.a)))
        })
        .collect();
    let mass: f64 = linalg::pairwise_sum(&m.cells.iter().map(|c| c.weight).collect::<Vec<_>>());
    Ok(psi.dm * mass + linalg::pairwise_sum(&terms))
}

/// Direct method `(1 - gamma) E_{p0_e}[v_hat]`.
pub fn estimate_dm(q: &QFunction, pi_e: &Policy, gamma: f64) -> EstimateReport {
    let start = Instant::now();
    let v = v_from_q(q, pi_e);
    let mut rep = EstimateReport::new("dm", FittingScheme::OracleNuisance, dm_value(&v, pi_e.initial_dist(), gamma));
    rep.note("q_provenance", q.provenance.name());
    rep.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    rep
}

fn dataset_shape(rep: &mut EstimateReport, data: &TransitionDataset) {
    rep.n_traj = data.traj_ids().len();
    rep.horizon = data.time_span();
    rep.n_effective = data.len();
}

/// Marginalized importance sampling `P_n[w(s) eta(s,a) r]`.
pub fn estimate_mis(
    data: &TransitionDataset,
    w: &WFunction,
    pi_e: &Policy,
    pi_b: &Policy,
    alpha: f64,
) -> Result<EstimateReport> {
    let start = Instant::now();
    if data.is_empty() {
        return Err(OpeError::EmptyData);
    }
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let scores: Vec<f64> = data
        .transitions
        .iter()
        .map(|tr| w.get(tr.s) * eta.get(tr.s, tr.a) * tr.r)
        .collect();
    let rho = linalg::mean(&scores);
    let mut rep = EstimateReport::new("mis", FittingScheme::OracleNuisance, rho).with_variance(
        linalg::centered_second_moment(&scores, rho),
        scores.len(),
        alpha,
    );
    dataset_shape(&mut rep, data);
    rep.note("w_provenance", w.provenance.name());
    rep.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(rep)
}

/// DRL(M3): `P_n[psi(.; w^(i), q^(i))]` with nuisances paired to data by
/// `scheme`. The variance estimate is the sample variance of the scored
/// `psi` values.
#[allow(clippy::too_many_arguments)]
pub fn estimate_drl_m3(
    data: &TransitionDataset,
    scheme: FittingScheme,
    w_fitter: &dyn WFitter,
    q_fitter: &dyn QFitter,
    pi_e: &Policy,
    pi_b: &Policy,
    gamma: f64,
    alpha: f64,
) -> Result<EstimateReport> {
    let start = Instant::now();
    let folds = make_folds(data, scheme)?;
    let eta = density_ratio_eta(pi_e, pi_b)?;
    let mut fits: Vec<Option<(WFunction, QFunction)>> = vec![None; folds.n_folds];
    for &k in &folds.nuisance_fold_for {
        if fits[k].is_some() {
            continue;
        }
        let wrap = |e: OpeError| if folds.n_folds > 1 { OpeError::Fold { fold: k, source: Box::new(e) } } else { e };
        let pair = if folds.n_folds == 1 {
            (w_fitter.fit_w(data).map_err(wrap)?, q_fitter.fit_q(data).map_err(wrap)?)
        } else {
            let train = folds.subset(data, k);
            (w_fitter.fit_w(&train).map_err(wrap)?, q_fitter.fit_q(&train).map_err(wrap)?)
        };
        fits[k] = Some(pair);
    }
    let psis: Vec<Option<Psi>> = fits
        .iter()
        .map(|f| f.as_ref().map(|(w, q)| Psi::new(w, q, &eta, pi_e, gamma)))
        .collect();
    let scores: Vec<f64> = data
        .transitions
        .iter()
        .zip(&folds.fold_of)
        .map(|(tr, &j)| psis[folds.nuisance_fold_for[j]].as_ref().expect("fitted").eval(tr))
        .collect();
    let rho = linalg::mean(&scores);
    let mut rep = EstimateReport::new("drl-m3", scheme, rho).with_variance(
        linalg::centered_second_moment(&scores, rho),
        scores.len(),
        alpha,
    );
    dataset_shape(&mut rep, data);
    let sizes: Vec<String> = folds.fold_sizes().iter().map(|s| s.to_string()).collect();
    rep.note("fold_sizes", sizes.join(";"));
    rep.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_policy_value, exact_q, oracle_w, stationary_distribution, DenominatorKind, RewardNoise};
    use crate::sampling::{sample_trajectories, sample_transitions, trajectory_to_transitions, InitRegime};

    fn setup() -> (TabularMdp, Policy, Policy) {
        let mdp = TabularMdp::new(
            3,
            2,
            vec![0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4, 0.5, 0.25, 0.25, 0.2, 0.7, 0.1],
            vec![0.1, 0.9, 0.4, 0.3, 0.0, 1.0],
            vec![0.05; 6],
            RewardNoise::Gaussian,
            0.9,
            1.0,
        )
        .unwrap();
        let pb = Policy::new(3, 2, vec![0.5, 0.5, 0.4, 0.6, 0.7, 0.3], vec![0.3, 0.3, 0.4]).unwrap();
        let stat = stationary_distribution(&mdp, &pb).unwrap();
        let pb = pb.with_initial(stat.clone()).unwrap();
        let pe = Policy::new(3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5], stat).unwrap();
        (mdp, pe, pb)
    }

    #[test]
    fn dm_examples() {
        let (mdp, pe, _) = setup();
        let q = exact_q(&mdp, &pe).unwrap();
        let rho = exact_policy_value(&mdp, &pe).unwrap();
        assert!((estimate_dm(&q, &pe, 0.9).rho_hat - rho).abs() < 1e-12);
        assert_eq!(estimate_dm(&QFunction::zeros(3, 2), &pe, 0.9).rho_hat, 0.0);
        assert!((estimate_dm(&q.shifted(1.0), &pe, 0.9).rho_hat - rho - 0.1).abs() < 1e-12);
    }

    #[test]
    fn oracle_psi_mean_is_rho() {
        let (mdp, pe, pb) = setup();
        let stat = pb.initial_dist().to_vec();
        let w = oracle_w(&mdp, &pe, &pb, DenominatorKind::StationaryDist).unwrap();
        let q = exact_q(&mdp, &pe).unwrap();
        let rho = exact_policy_value(&mdp, &pe).unwrap();
        assert!((psi_mean_exact(&mdp, &pe, &pb, &stat, &w, &q).unwrap() - rho).abs() < 1e-12);
        assert!((psi_mean_exact(&mdp, &pe, &pb, &stat, &w, &QFunction::zeros(3, 2)).unwrap() - rho).abs() < 1e-12);
        let wrong_w = WFunction::new(vec![0.3, 2.0, 1.1]);
        assert!((psi_mean_exact(&mdp, &pe, &pb, &stat, &wrong_w, &q).unwrap() - rho).abs() < 1e-12);
    }

    #[test]
    fn psi_eval_agrees_with_psi() {
        let (mdp, pe, pb) = setup();
        let w = WFunction::new(vec![1.0, 0.5, 2.0]);
        let q = exact_q(&mdp, &pe).unwrap();
        let eta = density_ratio_eta(&pe, &pb).unwrap();
        let psi = Psi::new(&w, &q, &eta, &pe, 0.9);
        let tr = Transition { s: 2, a: 1, r: 0.7, s_next: 0, traj_id: 0, t: 0 };
        let x = psi_eval(&tr, &w, &q, &pe, &pb, 0.9, psi.dm_term()).unwrap();
        assert!((x - psi.eval(&tr)).abs() < 1e-15);
    }

    #[test]
    fn zero_q_drl_is_mis_bit_for_bit() {
        let (mdp, pe, pb) = setup();
        let data = sample_transitions(&mdp, &pb, pb.initial_dist(), 500, 1).unwrap();
        let w = oracle_w(&mdp, &pe, &pb, DenominatorKind::StationaryDist).unwrap();
        let wf = |_: &TransitionDataset| Ok(w.clone());
        let qf = |_: &TransitionDataset| Ok(QFunction::zeros(3, 2));
        let drl = estimate_drl_m3(&data, FittingScheme::Adaptive, &wf, &qf, &pe, &pb, 0.9, 0.05).unwrap();
        let mis = estimate_mis(&data, &w, &pe, &pb, 0.05).unwrap();
        assert_eq!(drl.rho_hat.to_bits(), mis.rho_hat.to_bits());
        assert_eq!(estimate_mis(&data, &WFunction::new(vec![0.0; 3]), &pe, &pb, 0.05).unwrap().rho_hat, 0.0);
    }

    #[test]
    fn cross_time_on_single_trajectory() {
        let (mdp, pe, pb) = setup();
        let traj = sample_trajectories(&mdp, &pb, 1, 400, InitRegime::StationaryInit, 0, 2).unwrap();
        let data = trajectory_to_transitions(&traj);
        let w = oracle_w(&mdp, &pe, &pb, DenominatorKind::StationaryDist).unwrap();
        let q = exact_q(&mdp, &pe).unwrap();
        let wf = |_: &TransitionDataset| Ok(w.clone());
        let qf = |_: &TransitionDataset| Ok(q.clone());
        let a = estimate_drl_m3(&data, FittingScheme::CrossTime4, &wf, &qf, &pe, &pb, 0.9, 0.05).unwrap();
        let b = estimate_drl_m3(&data, FittingScheme::OracleNuisance, &wf, &qf, &pe, &pb, 0.9, 0.05).unwrap();
        // identical nuisances in every fold: same scores
        assert_eq!(a.rho_hat, b.rho_hat);
        assert_eq!(a.diagnostics["fold_sizes"], "100;100;100;100");
        let (lo, hi) = a.ci.unwrap();
        assert!(lo <= a.rho_hat && a.rho_hat <= hi);
        let err = estimate_drl_m3(&data, FittingScheme::CrossTrajectory2, &wf, &qf, &pe, &pb, 0.9, 0.05).unwrap_err();
        assert!(matches!(err, OpeError::Infeasible(_)));
    }

    #[test]
    fn fitter_failures_name_the_fold() {
        let (mdp, pe, pb) = setup();
        let data = sample_transitions(&mdp, &pb, pb.initial_dist(), 20, 1).unwrap();
        let wf = |d: &TransitionDataset| -> Result<WFunction> {
            if d.transitions[0].traj_id == 0 { Err(OpeError::EmptyData) } else { Ok(WFunction::new(vec![1.0; 3])) }
        };
        let qf = |_: &TransitionDataset| Ok(QFunction::zeros(3, 2));
        match estimate_drl_m3(&data, FittingScheme::CrossTrajectory2, &wf, &qf, &pe, &pb, 0.9, 0.05) {
            Err(OpeError::Fold { fold: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
