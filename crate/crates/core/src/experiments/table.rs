//! Aggregated results: the MSE table, the coverage table and plot data.

use statrs::distribution::{ContinuousCDF, Normal};

use super::config::{EstimatorKind, Setting};
use crate::error::{OpeError, Result};

/// Result of one estimator on one replication.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Estimate { rho_hat: f64, ci: Option<(f64, f64)> },
    /// The estimator cannot run under this configuration.
    Infeasible(String),
    Failed(String),
}

/// Fraction of intervals containing `rho`; `None` for no intervals.
pub fn coverage_fraction(intervals: &[(f64, f64)], rho: f64) -> Option<f64> {
    if intervals.is_empty() {
        return None;
    }
    let hit = intervals.iter().filter(|(lo, hi)| *lo <= rho && rho <= *hi).count();
    Some(hit as f64 / intervals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// Every replication was infeasible.
    Skipped,
    /// Every replication failed.
    Failed,
}

impl RowStatus {
    pub fn name(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Skipped => "skipped",
            RowStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub estimator: EstimatorKind,
    pub setting: Setting,
    pub n_traj: usize,
    pub horizon: usize,
    pub mse: f64,
    pub bias2: f64,
    pub variance: f64,
    pub coverage: Option<f64>,
    /// Successful replications.
    pub replications: usize,
    pub failed: usize,
    /// Standard error of `mse` across replications.
    pub mse_se: f64,
    pub rho: f64,
    pub mean_estimate: f64,
    pub status: RowStatus,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub estimator: EstimatorKind,
    pub setting: Setting,
    pub n_traj: usize,
    pub horizon: usize,
    pub alpha: f64,
    pub coverage: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub replications: usize,
}

fn mean(xs: &[f64]) -> f64 {
    crate::linalg::mean(xs)
}

/// Aggregates one estimator's outcomes over replications.
pub(crate) fn mse_row(
    estimator: EstimatorKind,
    setting: Setting,
    n_traj: usize,
    horizon: usize,
    rho: f64,
    outcomes: &[&Outcome],
) -> MseRow {
    let mut est = Vec::new();
    let mut cis = Vec::new();
    let mut infeasible = None;
    let mut failure = None;
    let mut n_with_ci = 0;
    for o in outcomes {
        match o {
            Outcome::Estimate { rho_hat, ci } => {
                est.push(*rho_hat);
                if let Some(c) = ci {
                    cis.push(*c);
                    n_with_ci += 1;
                }
            }
            Outcome::Infeasible(m) => infeasible = infeasible.or(Some(m.clone())),
            Outcome::Failed(m) => failure = failure.or(Some(m.clone())),
        }
    }
    let failed = outcomes.len() - est.len();
    let (status, reason) = if !est.is_empty() {
        (RowStatus::Ok, failure.or(infeasible).unwrap_or_default())
    } else if let Some(m) = failure {
        (RowStatus::Failed, m)
    } else {
        (RowStatus::Skipped, infeasible.unwrap_or_default())
    };
    if est.is_empty() {
        return MseRow {
            estimator,
            setting,
            n_traj,
            horizon,
            mse: f64::NAN,
            bias2: f64::NAN,
            variance: f64::NAN,
            coverage: None,
            replications: 0,
            failed,
            mse_se: f64::NAN,
            rho,
            mean_estimate: f64::NAN,
            status,
            reason,
        };
    }
    let m = mean(&est);
    let sq: Vec<f64> = est.iter().map(|x| (x - rho).powi(2)).collect();
    let mse = mean(&sq);
    let variance = mean(&est.iter().map(|x| (x - m).powi(2)).collect::<Vec<_>>());
    let r = est.len() as f64;
    let mse_se = if est.len() > 1 {
        (sq.iter().map(|x| (x - mse).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt()
    } else {
        0.0
    };
    // coverage is reported only when every successful run produced an interval
    let coverage = if n_with_ci == est.len() { coverage_fraction(&cis, rho) } else { None };
    MseRow {
        estimator,
        setting,
        n_traj,
        horizon,
        mse,
        bias2: (m - rho).powi(2),
        variance,
        coverage,
        replications: est.len(),
        failed,
        mse_se,
        rho,
        mean_estimate: m,
        status,
        reason,
    }
}

pub(crate) fn coverage_row(
    estimator: EstimatorKind,
    setting: Setting,
    n_traj: usize,
    horizon: usize,
    rho: f64,
    alpha: f64,
    outcomes: &[&Outcome],
) -> CoverageRow {
    let cis: Vec<(f64, f64)> = outcomes
        .iter()
        .filter_map(|o| match o {
            Outcome::Estimate { ci: Some(c), .. } => Some(*c),
            _ => None,
        })
        .collect();
    let widths: Vec<f64> = cis.iter().map(|(lo, hi)| hi - lo).collect();
    CoverageRow {
        estimator,
        setting,
        n_traj,
        horizon,
        alpha,
        coverage: coverage_fraction(&cis, rho),
        mean_ci_width: (!widths.is_empty()).then(|| mean(&widths)),
        replications: cis.len(),
    }
}

fn float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.17e}")
    } else {
        String::new()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

fn to_csv(version_line: &str, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| OpeError::Io(e.into_error()))?)
        .expect("csv output is utf-8");
    Ok(format!("{version_line}\n{body}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseTable {
    pub rows: Vec<MseRow>,
}

impl MseTable {
    pub const VERSION_LINE: &'static str = "# mse-table v1";
    pub const CSV_HEADER: [&'static str; 15] = [
        "estimator",
        "setting",
        "N",
        "T",
        "mse",
        "bias2",
        "variance",
        "coverage",
        "replications",
        "failed",
        "mse_se",
        "rho",
        "mean_estimate",
        "status",
        "reason",
    ];

    pub fn row(&self, estimator: EstimatorKind, setting: Setting, n_traj: usize, horizon: usize) -> Option<&MseRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.setting == setting && r.n_traj == n_traj && r.horizon == horizon)
    }

    /// CSV text: a version comment line, the header, then one record per row.
    pub fn to_csv(&self) -> Result<String> {
        to_csv(
            Self::VERSION_LINE,
            &Self::CSV_HEADER,
            self.rows.iter().map(|r| {
                vec![
                    r.estimator.name().to_string(),
                    r.setting.name().to_string(),
                    r.n_traj.to_string(),
                    r.horizon.to_string(),
                    float(r.mse),
                    float(r.bias2),
                    float(r.variance),
                    opt(r.coverage),
                    r.replications.to_string(),
                    r.failed.to_string(),
                    float(r.mse_se),
                    float(r.rho),
                    float(r.mean_estimate),
                    r.status.name().to_string(),
                    r.reason.clone(),
                ]
            }),
        )
    }

    /// Plot files, one per `(estimator, setting, N)`: columns `x` (T), `y`
    /// (MSE) and a normal interval for the MSE at level `1 - alpha`.
    pub fn plot_data(&self, alpha: f64) -> Result<Vec<(String, String)>> {
        let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
        let mut keys: Vec<(EstimatorKind, Setting, usize)> = Vec::new();
        for r in &self.rows {
            let k = (r.estimator, r.setting, r.n_traj);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(e, s, n)| {
                let rows = self
                    .rows
                    .iter()
                    .filter(|r| r.estimator == e && r.setting == s && r.n_traj == n && r.status == RowStatus::Ok);
                let text = to_csv(
                    "# plot-data v1",
                    &["x", "y", "ci_low", "ci_high"],
                    rows.map(|r| {
                        vec![
                            r.horizon.to_string(),
                            float(r.mse),
                            float(r.mse - z * r.mse_se),
                            float(r.mse + z * r.mse_se),
                        ]
                    }),
                )?;
                Ok((format!("mse_{}_{}_N{}.csv", e.name(), s.name(), n), text))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
}

impl CoverageTable {
    pub const VERSION_LINE: &'static str = "# coverage-table v1";
    pub const CSV_HEADER: [&'static str; 8] =
        ["estimator", "setting", "N", "T", "alpha", "coverage", "mean_ci_width", "replications"];

    pub fn row(&self, estimator: EstimatorKind, setting: Setting, n_traj: usize, horizon: usize) -> Option<&CoverageRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.setting == setting && r.n_traj == n_traj && r.horizon == horizon)
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(
            Self::VERSION_LINE,
            &Self::CSV_HEADER,
            self.rows.iter().map(|r| {
                vec![
                    r.estimator.name().to_string(),
                    r.setting.name().to_string(),
                    r.n_traj.to_string(),
                    r.horizon.to_string(),
                    float(r.alpha),
                    opt(r.coverage),
                    opt(r.mean_ci_width),
                    r.replications.to_string(),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(x: f64) -> Outcome {
        Outcome::Estimate { rho_hat: x, ci: Some((x - 0.1, x + 0.1)) }
    }

    #[test]
    fn mse_decomposes() {
        let os = [est(1.0), est(1.5), est(0.7), Outcome::Failed("boom".into())];
        let refs: Vec<&Outcome> = os.iter().collect();
        let r = mse_row(EstimatorKind::Dm, Setting::BothCorrect, 1, 10, 1.1, &refs);
        assert_eq!((r.replications, r.failed, r.status), (3, 1, RowStatus::Ok));
        assert!((r.mse - (r.bias2 + r.variance)).abs() < 1e-12);
        let direct = ((1.0f64 - 1.1).powi(2) + 0.4f64.powi(2) + 0.4f64.powi(2)) / 3.0;
        assert!((r.mse - direct).abs() < 1e-15);
        assert_eq!(r.coverage, Some(1.0 / 3.0));
    }

    #[test]
    fn skipped_and_failed_rows() {
        let os = [Outcome::Infeasible("needs N >= 2".into())];
        let r = mse_row(EstimatorKind::DrlM3, Setting::BothCorrect, 1, 10, 0.0, &[&os[0]]);
        assert_eq!(r.status, RowStatus::Skipped);
        assert_eq!(r.reason, "needs N >= 2");
        let os = [Outcome::Failed("singular".into())];
        assert_eq!(mse_row(EstimatorKind::Mis, Setting::BothCorrect, 1, 10, 0.0, &[&os[0]]).status, RowStatus::Failed);
    }

    #[test]
    fn coverage_directions() {
        assert_eq!(coverage_fraction(&[], 0.0), None);
        assert_eq!(coverage_fraction(&[(-1e300, 1e300); 5], 3.0), Some(1.0));
        assert_eq!(coverage_fraction(&[(0.0, 1.0), (2.0, 3.0)], 0.5), Some(0.5));
    }

    #[test]
    fn csv_has_version_and_header() {
        let os = [est(1.0)];
        let t = MseTable { rows: vec![mse_row(EstimatorKind::Dm, Setting::BothCorrect, 1, 10, 1.0, &[&os[0]])] };
        let text = t.to_csv().unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(MseTable::VERSION_LINE));
        assert_eq!(lines.next().unwrap(), MseTable::CSV_HEADER.join(","));
        let plots = t.plot_data(0.05).unwrap();
        assert_eq!(plots.len(), 1);
        assert_eq!(plots[0].0, "mse_dm_both-correct_N1.csv");
    }
}
