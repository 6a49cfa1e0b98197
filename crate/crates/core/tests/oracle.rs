mod common;

use common::{paths, q_from_v, random_dist, random_mdp, random_policy, sigma2, suite_problem, value_iteration};
use ope_core::estimators::Psi;
use ope_core::mdp::{density_ratio_eta, exact_q, oracle_w, DenominatorKind, Policy, RewardNoise, TabularMdp};
use ope_core::oracle::{
    bound_report, curse_diagnostic, eb_m1, eb_m1_partial_sums, eb_m2, eb_m2_partial_sums, eb_m3, Bound, BoundReport,
    DEFAULT_TOL,
};
use ope_core::sampling::sample_transitions;

#[test]
fn cumulative_recursion_matches_path_enumeration() {
    for seed in 0..6 {
        let mdp = random_mdp(seed, 3, 2, 0.85);
        let pe = random_policy(seed + 10, 3, 2, random_dist(seed + 20, 3));
        let pb = random_policy(seed + 30, 3, 2, random_dist(seed + 40, 3));
        let sig = sigma2(&mdp, &pe);
        let g = mdp.gamma();
        let mut expected = Vec::new();
        let mut acc = 0.0;
        for k in 0..=4 {
            let mut term = 0.0;
            for (path, p) in paths(&mdp, &pb, k) {
                let s0 = path[0].0;
                let mut nu = pe.initial_dist()[s0] / pb.initial_dist()[s0];
                for &(s, a) in &path {
                    nu *= pe.prob(s, a) / pb.prob(s, a);
                }
                let (s, a) = *path.last().unwrap();
                term += p * nu * nu * sig[s * 2 + a];
            }
            acc += (1.0 - g).powi(2) * g.powi(2 * k as i32) * term;
            expected.push(acc);
        }
        let got = eb_m1_partial_sums(&mdp, &pe, &pb, 4).unwrap();
        for (x, y) in got.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-10, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn marginal_recursion_matches_path_enumeration() {
    for seed in 0..6 {
        let mdp = random_mdp(seed + 100, 3, 2, 0.8);
        let pe = random_policy(seed + 110, 3, 2, random_dist(seed + 120, 3));
        let pb = random_policy(seed + 130, 3, 2, random_dist(seed + 140, 3));
        let sig = sigma2(&mdp, &pe);
        let g = mdp.gamma();
        let mut acc = 0.0;
        let got = eb_m2_partial_sums(&mdp, &pe, &pb, 4).unwrap();
        for k in 0..=4 {
            let marg = |pi: &Policy| {
                let mut m = [0.0; 6];
                for (path, p) in paths(&mdp, pi, k) {
                    let (s, a) = *path.last().unwrap();
                    m[s * 2 + a] += p;
                }
                m
            };
            let (me, mb) = (marg(&pe), marg(&pb));
            let term: f64 = (0..6).map(|i| me[i] * me[i] / mb[i] * sig[i]).sum();
            acc += (1.0 - g).powi(2) * g.powi(2 * k as i32) * term;
            assert!((got[k] - acc).abs() < 1e-10, "seed {seed} k {k}");
        }
    }
}

#[test]
fn bounds_are_ordered_and_partial_sums_monotone() {
    for i in 0..50 {
        let (mdp, pe, pb) = suite_problem(i);
        let m1 = eb_m1(&mdp, &pe, &pb, DEFAULT_TOL).unwrap();
        let m2 = eb_m2(&mdp, &pe, &pb, DEFAULT_TOL).unwrap();
        if let (Bound::Finite(a), Bound::Finite(b)) = (m1.bound, m2.bound) {
            assert!(b <= a + 1e-9, "suite {i}: eb_m2 {b} > eb_m1 {a}");
        }
        assert!(!m2.bound.is_divergent() || m1.bound.is_divergent(), "suite {i}");
        for sums in [eb_m1_partial_sums(&mdp, &pe, &pb, 30).unwrap(), eb_m2_partial_sums(&mdp, &pe, &pb, 30).unwrap()] {
            assert!(sums.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}

#[test]
fn on_policy_bounds_coincide() {
    let mdp = random_mdp(7, 4, 2, 0.9);
    let pi = random_policy(8, 4, 2, random_dist(9, 4));
    let a = eb_m1(&mdp, &pi, &pi, DEFAULT_TOL).unwrap();
    let b = eb_m2(&mdp, &pi, &pi, DEFAULT_TOL).unwrap();
    let (x, y) = (a.bound.value().unwrap(), b.bound.value().unwrap());
    assert!((x - y).abs() < 1e-12 * x.max(1.0));
    // on-policy the series is (1-gamma)^2 sum gamma^{2j} E_b[sigma^2(s_j, a_j)]
    let sums = eb_m1_partial_sums(&mdp, &pi, &pi, 2000).unwrap();
    assert!((sums[2000] - x).abs() < 1e-10);
    assert!(a.tail_bound < 1e-11);
}

#[test]
fn deterministic_problems_have_zero_bounds() {
    let mdp = TabularMdp::new(2, 2, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0.3, 0.5, 0.9, 0.1], vec![0.0; 4], RewardNoise::Gaussian, 0.9, 1.0)
        .unwrap();
    let pe = Policy::deterministic(2, &[0, 1], vec![0.5, 0.5]).unwrap();
    let pb = Policy::uniform(2, 2, vec![0.5, 0.5]).unwrap();
    assert_eq!(eb_m1(&mdp, &pe, &pb, DEFAULT_TOL).unwrap().bound, Bound::Finite(0.0));
    assert_eq!(eb_m2(&mdp, &pe, &pb, DEFAULT_TOL).unwrap().bound, Bound::Finite(0.0));
    assert_eq!(eb_m3(&mdp, &pe, &pb, &[0.5, 0.5]).unwrap(), 0.0);
}

#[test]
fn eb_m3_on_policy_closed_form() {
    // deterministic cycle, constant reward variance
    let sigma2 = 0.04;
    let mdp = TabularMdp::new(3, 1, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0], vec![0.5, 0.3, 0.6], vec![sigma2; 3], RewardNoise::TwoPoint, 0.9, 1.0)
        .unwrap();
    let stat = vec![1.0 / 3.0; 3];
    let pi = Policy::uniform(3, 1, stat.clone()).unwrap();
    assert!((eb_m3(&mdp, &pi, &pi, &stat).unwrap() - sigma2).abs() < 1e-12);
}

#[test]
fn eb_m3_matches_monte_carlo_variance_of_psi() {
    let mdp = random_mdp(21, 4, 2, 0.9);
    let pb = random_policy(22, 4, 2, vec![0.25; 4]);
    let stat = common::stationary_by_power(&mdp, &pb);
    let pb = pb.with_initial(stat.clone()).unwrap();
    let pe = random_policy(23, 4, 2, random_dist(24, 4));
    let bound = eb_m3(&mdp, &pe, &pb, &stat).unwrap();
    let w = oracle_w(&mdp, &pe, &pb, DenominatorKind::StationaryDist).unwrap();
    let q = exact_q(&mdp, &pe).unwrap();
    let eta = density_ratio_eta(&pe, &pb).unwrap();
    let psi = Psi::new(&w, &q, &eta, &pe, mdp.gamma());
    let data = sample_transitions(&mdp, &pb, &stat, 1_000_000, 77).unwrap();
    let xs: Vec<f64> = data.transitions.iter().map(|t| psi.eval(t)).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!((var / bound - 1.0).abs() < 0.02, "mc {var} vs bound {bound}");
}

#[test]
fn value_iteration_agrees_with_direct_solve() {
    let mdp = random_mdp(31, 5, 3, 0.95);
    let pe = random_policy(32, 5, 3, random_dist(33, 5));
    let q = exact_q(&mdp, &pe).unwrap();
    for (x, y) in q.values().iter().zip(q_from_v(&mdp, &value_iteration(&mdp, &pe))) {
        assert!((x - y).abs() < 1e-10);
    }
}

/// Four actions, deterministic target, uniform behavior: `eta` is 4 or 0.
fn curse_problem() -> (TabularMdp, Policy, Policy) {
    let mdp = random_mdp(41, 4, 4, 0.98);
    let stat = vec![0.25; 4];
    let pe = Policy::deterministic(4, &[0, 1, 2, 3], stat.clone()).unwrap();
    let pb = Policy::uniform(4, 4, stat).unwrap();
    (mdp, pe, pb)
}

#[test]
fn curse_of_horizon_is_flagged() {
    let (mdp, pe, pb) = curse_problem();
    let rep = curse_diagnostic(&mdp, &pe, &pb, 0.98).unwrap();
    assert!((rep.expected_log_eta - 4f64.ln()).abs() < 1e-12);
    assert!(rep.curse_condition);
    assert!(rep.eb_m1.is_divergent());
    assert!(!rep.eb_m2.is_divergent());
    assert!(rep.eb_m3.is_finite() && rep.eb_m3 > 0.0);

    let on = curse_diagnostic(&mdp, &pb, &pb, 0.98).unwrap();
    assert_eq!(on.expected_log_eta, 0.0);
    assert!(!on.curse_condition && !on.eb_m1.is_divergent());
}

#[test]
fn bound_report_csv_round_trip() {
    for (mdp, pe, pb) in [suite_problem(3), curse_problem()] {
        let rep = bound_report(&mdp, &pe, &pb, DenominatorKind::InitialDist, DEFAULT_TOL).unwrap();
        let rec = rep.csv_record();
        let refs: Vec<&str> = rec.iter().map(String::as_str).collect();
        assert_eq!(BoundReport::from_csv_record(&refs).unwrap(), rep);
    }
}
