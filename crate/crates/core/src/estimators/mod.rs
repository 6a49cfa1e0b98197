//! Policy-value estimators, fold construction for cross-fitting, and
//! normal confidence intervals.

mod stationary;
mod trajectory;

use std::collections::BTreeMap;
use std::fmt;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{OpeError, Result};
use crate::sampling::TransitionDataset;

pub use stationary::{
    estimate_dm, estimate_drl_m3, estimate_mis, psi_eval, psi_mean_exact, Psi, QFitter, WFitter,
};
pub use trajectory::{
    default_omega, estimate_drl_m1, estimate_drl_m2, estimate_is, estimate_snis, fit_step_q_by_folds,
    importance_weights, is_from_weights, snis_from_weights, StepNuisance,
};

/// How nuisances are paired with the data points they score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FittingScheme {
    /// Fit once on all data and score all data.
    Adaptive,
    /// Two halves of the trajectories; each scored with the other's fit.
    CrossTrajectory2,
    /// Four contiguous time quarters; quarter `j` scored with the fit on `(j+2) mod 4`.
    CrossTime4,
    /// Nuisances supplied directly; no fitting.
    OracleNuisance,
}

impl FittingScheme {
    pub fn name(self) -> &'static str {
        match self {
            FittingScheme::Adaptive => "adaptive",
            FittingScheme::CrossTrajectory2 => "cross-trajectory",
            FittingScheme::CrossTime4 => "cross-time",
            FittingScheme::OracleNuisance => "oracle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "adaptive" => Some(FittingScheme::Adaptive),
            "cross-trajectory" | "cross-trajectory2" => Some(FittingScheme::CrossTrajectory2),
            "cross-time" | "cross-time4" => Some(FittingScheme::CrossTime4),
            "oracle" => Some(FittingScheme::OracleNuisance),
            _ => None,
        }
    }
}

impl fmt::Display for FittingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Output of one estimator run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimator: String,
    pub scheme: FittingScheme,
    pub n_traj: usize,
    pub horizon: usize,
    pub n_effective: usize,
    pub rho_hat: f64,
    pub variance_hat: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub seed: Option<u64>,
    pub wall_ms: f64,
    pub diagnostics: BTreeMap<String, String>,
}

impl EstimateReport {
    pub(crate) fn new(estimator: &str, scheme: FittingScheme, rho_hat: f64) -> Self {
        EstimateReport {
            estimator: estimator.to_string(),
            scheme,
            n_traj: 0,
            horizon: 0,
            n_effective: 0,
            rho_hat,
            variance_hat: None,
            ci: None,
            seed: None,
            wall_ms: 0.0,
            diagnostics: BTreeMap::new(),
        }
    }

    /// Attaches a variance estimate computed from `units` scores and the
    /// matching interval.
    pub(crate) fn with_variance(mut self, variance: f64, units: usize, alpha: f64) -> Self {
        self.variance_hat = Some(variance);
        self.ci = Some(confidence_interval(self.rho_hat, variance, units, alpha));
        self.diagnostics.insert("ci_units".into(), units.to_string());
        self
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.diagnostics.insert(key.to_string(), value.to_string());
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "estimator", "scheme", "N", "T", "n", "rho_hat", "var_hat", "ci_low", "ci_high", "seed", "wall_ms",
    ];

    /// One CSV record; absent optional values are empty fields.
    pub fn csv_record(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.17e}")).unwrap_or_default();
        vec![
            self.estimator.clone(),
            self.scheme.name().to_string(),
            self.n_traj.to_string(),
            self.horizon.to_string(),
            self.n_effective.to_string(),
            format!("{:.17e}", self.rho_hat),
            opt(self.variance_hat),
            opt(self.ci.map(|c| c.0)),
            opt(self.ci.map(|c| c.1)),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            format!("{:.3}", self.wall_ms),
        ]
    }
}

/// `rho_hat -/+ z_{1-alpha/2} sqrt(variance / n)`.
pub fn confidence_interval(rho_hat: f64, variance: f64, n: usize, alpha: f64) -> (f64, f64) {
    assert!(variance >= 0.0 && n >= 1, "variance must be nonnegative and n positive");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let half = z * (variance / n as f64).sqrt();
    (rho_hat - half, rho_hat + half)
}

/// Fold membership of each transition and the fold whose nuisances it uses.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub scheme: FittingScheme,
    pub n_folds: usize,
    /// Fold id per transition, by index into the dataset.
    pub fold_of: Vec<usize>,
    /// `nuisance_fold_for[j]` is the fold whose fit scores fold `j`.
    pub nuisance_fold_for: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// Transitions belonging to fold `j`.
    pub fn subset(&self, data: &TransitionDataset, j: usize) -> TransitionDataset {
        data.select(|i, _| self.fold_of[i] == j)
    }
}

/// Sizes of an even partition of `len` items into `k` parts, earlier parts
/// taking the remainder.
pub(crate) fn even_sizes(len: usize, k: usize) -> Vec<usize> {
    (0..k).map(|j| len / k + usize::from(j < len % k)).collect()
}

/// Index of the part containing position `i` for [`even_sizes`].
fn part_of(i: usize, sizes: &[usize]) -> usize {
    let mut acc = 0;
    for (j, &s) in sizes.iter().enumerate() {
        acc += s;
        if i < acc {
            return j;
        }
    }
    sizes.len() - 1
}

pub fn make_folds(data: &TransitionDataset, scheme: FittingScheme) -> Result<FoldAssignment> {
    if data.is_empty() {
        return Err(OpeError::EmptyData);
    }
    match scheme {
        FittingScheme::Adaptive | FittingScheme::OracleNuisance => Ok(FoldAssignment {
            scheme,
            n_folds: 1,
            fold_of: vec![0; data.len()],
            nuisance_fold_for: vec![0],
        }),
        FittingScheme::CrossTrajectory2 => {
            let ids = data.traj_ids();
            if ids.len() < 2 {
                return Err(OpeError::Infeasible(format!(
                    "cross-trajectory fitting requires N >= 2 trajectories, found {}",
                    ids.len()
                )));
            }
            let sizes = even_sizes(ids.len(), 2);
            let fold_of = data
                .transitions
                .iter()
                .map(|tr| part_of(ids.binary_search(&tr.traj_id).expect("id present"), &sizes))
                .collect();
            Ok(FoldAssignment {
                scheme,
                n_folds: 2,
                fold_of,
                nuisance_fold_for: vec![1, 0],
            })
        }
        FittingScheme::CrossTime4 => {
            let span = data.time_span();
            if span < 8 {
                return Err(OpeError::Infeasible(format!(
                    "cross-time fitting requires T >= 8 time steps, found {span}"
                )));
            }
            let sizes = even_sizes(span, 4);
            Ok(FoldAssignment {
                scheme,
                n_folds: 4,
                fold_of: data.transitions.iter().map(|tr| part_of(tr.t, &sizes)).collect(),
                nuisance_fold_for: (0..4).map(|j| (j + 2) % 4).collect(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{Transition, TransitionSource};

    fn grid(n_traj: usize, t: usize) -> TransitionDataset {
        let mut transitions = Vec::new();
        for j in 0..n_traj {
            for k in 0..t {
                transitions.push(Transition { s: 0, a: 0, r: 0.0, s_next: 0, traj_id: j, t: k });
            }
        }
        TransitionDataset { transitions, source: TransitionSource::FromTrajectories }
    }

    #[test]
    fn interval_examples() {
        assert_eq!(confidence_interval(0.3, 0.0, 10, 0.05), (0.3, 0.3));
        let (lo, hi) = confidence_interval(1.0, 4.0, 400, 0.05);
        assert!((lo - 0.8040036).abs() < 1e-6 && (hi - 1.1959964).abs() < 1e-6);
        let z = Normal::standard().inverse_cdf(0.975);
        assert!((z - 1.959964).abs() < 5e-7);
        let (lo, _) = confidence_interval(0.0, 1.0, 1, 0.32);
        assert!((lo + 0.994458).abs() < 1e-5);
    }

    #[test]
    fn cross_time_quarters() {
        let f = make_folds(&grid(1, 8), FittingScheme::CrossTime4).unwrap();
        assert_eq!(f.fold_of, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(f.nuisance_fold_for, vec![2, 3, 0, 1]);
        let f = make_folds(&grid(2, 10), FittingScheme::CrossTime4).unwrap();
        assert_eq!(f.fold_sizes(), vec![6, 6, 4, 4]);
        assert!(matches!(make_folds(&grid(3, 7), FittingScheme::CrossTime4), Err(OpeError::Infeasible(_))));
    }

    #[test]
    fn cross_trajectory_halves() {
        let f = make_folds(&grid(4, 3), FittingScheme::CrossTrajectory2).unwrap();
        assert_eq!(f.fold_sizes(), vec![6, 6]);
        assert_eq!(f.nuisance_fold_for, vec![1, 0]);
        let f = make_folds(&grid(5, 1), FittingScheme::CrossTrajectory2).unwrap();
        assert_eq!(f.fold_of, vec![0, 0, 0, 1, 1]);
        let err = make_folds(&grid(1, 9), FittingScheme::CrossTrajectory2).unwrap_err();
        assert!(err.to_string().contains("N >= 2"));
    }

    #[test]
    fn csv_record_shape() {
        let r = EstimateReport::new("dm", FittingScheme::OracleNuisance, 0.5).with_variance(1.0, 100, 0.05);
        let rec = r.csv_record();
        assert_eq!(rec.len(), EstimateReport::CSV_HEADER.len());
        assert_eq!(rec[5].parse::<f64>().unwrap(), 0.5);
        assert!(rec[7].parse::<f64>().unwrap() < 0.5);
    }
}
