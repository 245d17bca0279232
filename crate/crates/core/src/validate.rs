//! Property suite run by `qclt validate`: every deterministic invariant of
//! the model, chain, engine, oracle and harness, evaluated on one fixture.
//!
//! Monte Carlo properties whose tolerance depends on the replica budget
//! (covariance and W₁ convergence, endpoint means) live in the `clt` and
//! `fclt` reports instead.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chain::{mixing_time, stationary_distribution, THRESHOLD_GRID, TV_FLOOR};
use crate::engine::{default_zeta_grid, RunConfig};
use crate::harness::{endpoint_matrix, paths_from_records, Experiment};
use crate::linalg;
use crate::mdp::{bellman_apply, greedy_policy, random_q, PolicyMatrix, QTable};
use crate::oracle::{self, centered_noise, f_bar_definitional, f_bar_matrix_form, POISSON_TOL};
use crate::rng::{self, Purpose};
use crate::stats;

/// Absolute slack for identities that hold exactly in real arithmetic.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub module: String,
    pub property: String,
    pub passed: bool,
    pub observed: f64,
    pub bound: f64,
}

impl PropertyCheck {
    fn at_most(module: &str, property: &str, observed: f64, bound: f64) -> Self {
        Self {
            module: module.into(),
            property: property.into(),
            passed: observed <= bound,
            observed,
            bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    /// Random tables (or pairs of tables) per sampled property.
    pub samples: usize,
    /// Horizon of the engine runs.
    pub horizon: usize,
    /// Length of the martingale-difference trajectory.
    pub mds_steps: usize,
    /// Replicas for the harness algebra checks.
    pub replicas: usize,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            horizon: 10_000,
            mds_steps: 1_000_000,
            replicas: 100,
            seed: 0,
        }
    }
}

pub fn all_passed(checks: &[PropertyCheck]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn validate_experiment(exp: &Experiment, opts: &ValidationOptions) -> Vec<PropertyCheck> {
    let mut out = Vec::new();
    mdp_checks(exp, opts, &mut out);
    chain_checks(exp, &mut out);
    engine_checks(exp, opts, &mut out);
    oracle_checks(exp, opts, &mut out);
    harness_checks(exp, opts, &mut out);
    out
}

fn probe_tables(exp: &Experiment, n: usize, seed: u64, index: u64) -> Vec<QTable> {
    let m = &exp.model;
    let mut rng = rng::stream(seed, Purpose::Probe, index);
    let hi = m.value_bound().max(1.0);
    (0..n).map(|_| random_q(m, &mut rng, -hi, hi)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mdp_checks(exp: &Experiment, opts: &ValidationOptions, out: &mut Vec<PropertyCheck>) {
    let m = &exp.model;
    let gamma = m.discount();
    let left = probe_tables(exp, opts.samples, opts.seed, 0);
    let right = probe_tables(exp, opts.samples, opts.seed, 1);

    let mut ratio = 0.0_f64;
    let mut order = f64::NEG_INFINITY;
    for (q1, q2) in left.iter().zip(&right) {
        let dist = q1.sup_distance(q2);
        if dist > 0.0 {
            let t = bellman_apply(q1, m).sup_distance(&bellman_apply(q2, m));
            ratio = ratio.max(t / dist);
        }
        // q1 ≤ upper elementwise
        let upper = QTable::from_vec(
            m.n_states(),
            m.n_actions(),
            q1.as_slice().iter().zip(q2.as_slice()).map(|(a, b)| a + b.abs()).collect(),
        );
        let (t1, t2) = (bellman_apply(q1, m), bellman_apply(&upper, m));
        for (a, b) in t1.as_slice().iter().zip(t2.as_slice()) {
            order = order.max(a - b);
        }
    }
    out.push(PropertyCheck::at_most("mdp", "bellman_contraction", ratio, gamma + IDENTITY_TOL));
    out.push(PropertyCheck::at_most("mdp", "bellman_monotone", order.max(0.0), IDENTITY_TOL));

    let o = &exp.oracle;
    let p_star = o.pi_star.induced_kernel(m);
    let q_star = o.q_star.to_dvector();
    let (mut iterate_sign, mut optimum_sign, mut identity) = (0.0_f64, 0.0_f64, 0.0_f64);
    for q in &left {
        let pi = greedy_policy(q);
        let p_k = pi.induced_kernel(m);
        let diff = &p_k - &p_star;
        let qv = q.to_dvector();
        iterate_sign = iterate_sign.max((-(&diff * &qv).min()).max(0.0));
        optimum_sign = optimum_sign.max((&diff * &q_star).max().max(0.0));
        for policy in [&pi, &PolicyMatrix::stochastic(m.n_states(), m.n_actions(), m.behavior().to_vec())] {
            let direct = policy.induced_kernel(m) * &qv;
            let values = policy.state_values(q);
            let via_values: Vec<f64> = (0..m.n_states())
                .flat_map(|s| (0..m.n_actions()).map(move |a| (s, a)))
                .map(|(s, a)| m.transition_row(s, a).iter().zip(&values).map(|(p, v)| p * v).sum())
                .collect();
            identity = identity.max(max_abs_diff(direct.as_slice(), &via_values));
        }
    }
    out.push(PropertyCheck::at_most("mdp", "greedy_sign_at_iterate", iterate_sign, IDENTITY_TOL));
    out.push(PropertyCheck::at_most("mdp", "greedy_sign_at_optimum", optimum_sign, IDENTITY_TOL));
    out.push(PropertyCheck::at_most("mdp", "induced_kernel_identity", identity, IDENTITY_TOL));
}

fn chain_checks(exp: &Experiment, out: &mut Vec<PropertyCheck>) {
    let m = &exp.model;
    let c = &exp.chain;

    let times: Vec<usize> = THRESHOLD_GRID
        .iter()
        .map(|t| mixing_time(c, *t).unwrap_or(usize::MAX))
        .collect();
    let inversions = times.windows(2).filter(|w| w[0] > w[1]).count();
    out.push(PropertyCheck::at_most("chain", "mixing_time_monotone", inversions as f64, 0.0));

    let mut marginal = vec![0.0; m.n_pairs()];
    for (t, p) in c.triples().iter().zip(c.stationary()) {
        marginal[m.pair(t.s, t.a)] += p;
    }
    let total: f64 = c.visitation().iter().sum();
    let gap = max_abs_diff(&marginal, c.visitation()).max((total - 1.0).abs());
    out.push(PropertyCheck::at_most("chain", "visitation_is_marginal", gap, IDENTITY_TOL));
    out.push(PropertyCheck::at_most("chain", "rho_bound", c.rho(), 1.0 / m.n_pairs() as f64));

    let behavior_gap = match stationary_distribution(&m.behavior_state_kernel()) {
        Ok(mu_b) => {
            let product: Vec<f64> = (0..m.n_states())
                .flat_map(|s| m.behavior_row(s).iter().map(move |p| (s, *p)))
                .map(|(s, p)| mu_b[s] * p)
                .collect();
            max_abs_diff(&product, c.visitation())
        }
        Err(_) => f64::INFINITY,
    };
    out.push(PropertyCheck::at_most("chain", "behavior_product_form", behavior_gap, 1e-10));

    let mc = c.mixing_constants();
    let worst = c
        .tv_profile(mc.horizon)
        .iter()
        .enumerate()
        .filter(|(_, tv)| **tv > TV_FLOOR)
        .map(|(t, tv)| tv / (mc.c0 * mc.kappa.powi(t as i32)))
        .fold(0.0, f64::max);
    out.push(PropertyCheck::at_most("chain", "mixing_envelope", worst, 1.0 + 1e-9));
}

fn engine_checks(exp: &Experiment, opts: &ValidationOptions, out: &mut Vec<PropertyCheck>) {
    let m = &exp.model;
    let k = opts.horizon;
    let checkpoints: Vec<usize> = (0..=10).map(|i| i * k / 10).collect();
    let cfg = RunConfig::new(k).with_checkpoints(checkpoints).with_initial_state(exp.initial_state);

    // [min(0, r_min), max(0, r_max)] / (1 - γ) holds for any reward range.
    let scale = 1.0 / (1.0 - m.discount());
    let r_min = m.rewards().iter().copied().fold(0.0, f64::min) * scale;
    let r_max = m.rewards().iter().copied().fold(0.0, f64::max) * scale;
    let first = exp.run(&cfg, opts.seed, 0);
    let excess = match &first {
        Ok(rec) => rec
            .iterates_kept
            .iter()
            .flat_map(|c| c.q.iter())
            .map(|q| (r_min - q).max(q - r_max).max(0.0))
            .fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    };
    out.push(PropertyCheck::at_most("engine", "iterate_bounds", excess, 0.0));

    let second = exp.run(&cfg, opts.seed, 0);
    let same = matches!((&first, &second), (Ok(a), Ok(b)) if a == b);
    out.push(PropertyCheck::at_most("engine", "determinism", if same { 0.0 } else { 1.0 }, 0.0));

    let left = probe_tables(exp, opts.samples, opts.seed, 2);
    let right = probe_tables(exp, opts.samples, opts.seed, 3);
    let mut ratio = 0.0_f64;
    for (q1, q2) in left.iter().zip(&right) {
        let dist = q1.sup_distance(q2);
        for y in exp.chain.triples() {
            let f1 = oracle::f_operator(q1, *y, m);
            let f2 = oracle::f_operator(q2, *y, m);
            ratio = ratio.max(f1.sup_distance(&f2) / dist);
        }
    }
    out.push(PropertyCheck::at_most("engine", "lipschitz_f", ratio, 2.0));

    let tracked = RunConfig::new(k).with_sandwich(true).with_initial_state(exp.initial_state);
    let violations = match exp.run(&tracked, opts.seed, 1) {
        Ok(rec) => rec.sandwich_violation_count as f64,
        Err(_) => 1.0,
    };
    out.push(PropertyCheck::at_most("engine", "sandwich_order", violations, 0.0));
}

fn oracle_checks(exp: &Experiment, opts: &ValidationOptions, out: &mut Vec<PropertyCheck>) {
    let m = &exp.model;
    let c = &exp.chain;
    let o = &exp.oracle;

    let fbar_star = f_bar_matrix_form(&o.q_star, c.visitation(), m);
    let g = centered_noise(&o.q_star, &fbar_star, c, m);
    let tol = POISSON_TOL * g.amax().max(1.0);
    out.push(PropertyCheck::at_most("oracle", "poisson_residual", o.poisson.residual, tol));
    out.push(PropertyCheck::at_most("oracle", "a_inverse_bound", o.a_inv_norm, o.a_inv_bound));

    let fixed = fbar_star.sup_distance(&o.q_star);
    out.push(PropertyCheck::at_most(
        "oracle",
        "f_bar_fixed_point",
        fixed,
        1e-11 * o.q_star.sup_norm().max(1.0),
    ));

    let mut identity = 0.0_f64;
    for q in probe_tables(exp, opts.samples, opts.seed, 4) {
        let a = f_bar_definitional(&q, c, m);
        let b = f_bar_matrix_form(&q, c.visitation(), m);
        identity = identity.max(a.sup_distance(&b));
    }
    out.push(PropertyCheck::at_most("oracle", "f_bar_identity", identity, IDENTITY_TOL));

    let min_eig = linalg::min_eigenvalue(&o.limit_cov);
    out.push(PropertyCheck::at_most("oracle", "limit_cov_psd", -min_eig, -oracle::PSD_FLOOR));
    let ratio = if o.x_bound_ratio.is_finite() { 0.0 } else { 1.0 };
    out.push(PropertyCheck::at_most("oracle", "poisson_bound_ratio_finite", ratio, 0.0));

    let mds = oracle::mds_diagnostics(o, c, m, opts.mds_steps, opts.seed);
    out.push(PropertyCheck::at_most("oracle", "mds_mean", mds.mean_sup, mds.mean_bound));
    out.push(PropertyCheck::at_most(
        "oracle",
        "mds_lag1",
        mds.lag1_frobenius,
        0.02 * mds.sigma_frobenius,
    ));
}

/// Largest `|Cov(Φ₃ - Φ₁) - [Cov(Φ₃ - Φ₂) + Cov(Φ₂ - Φ₁) + C + Cᵀ]|` over
/// consecutive grid triples, relative to the left-hand side's scale.
pub fn additivity_defect(paths: &[DMatrix<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for w in paths.windows(3) {
        let (a, b, c) = (&w[0], &w[1], &w[2]);
        let whole = stats::covariance(&(c - a));
        let (late, early) = (c - b, b - a);
        let cross = stats::cross_covariance(&late, &early);
        let parts = stats::covariance(&late) + stats::covariance(&early) + &cross + cross.transpose();
        let scale = whole.amax().max(f64::MIN_POSITIVE);
        worst = worst.max((whole - parts).amax() / scale);
    }
    worst
}

fn harness_checks(exp: &Experiment, opts: &ValidationOptions, out: &mut Vec<PropertyCheck>) {
    let horizon = (opts.horizon / 10).max(10);
    let cfg = RunConfig::new(horizon)
        .with_zeta_grid(default_zeta_grid())
        .with_initial_state(exp.initial_state);
    let base = exp.replicate(&cfg, opts.replicas, opts.seed, 0);
    let defect = match &base {
        Ok(recs) => {
            let mut paths = vec![DMatrix::zeros(recs.len(), exp.dim())];
            paths.extend(paths_from_records(recs));
            additivity_defect(&paths)
        }
        Err(_) => f64::INFINITY,
    };
    out.push(PropertyCheck::at_most("harness", "fclt_additivity", defect, IDENTITY_TOL));

    // Rewards live in [0, 1], so the base model is the fixture at half scale
    // and the fixture itself is its c = 2 image (halving and doubling are exact).
    let half = exp
        .model
        .with_scaled_rewards(0.5)
        .ok()
        .and_then(|m| Experiment::new(m, exp.schedule).ok())
        .map(|e| e.with_initial_state(exp.initial_state).with_parallelism(exp.parallelism));
    let deviation = match (&base, half) {
        (Ok(recs), Some(e_half)) => match e_half.replicate(&cfg, opts.replicas, opts.seed, 0) {
            Ok(recs_half) => scale_deviation(
                &e_half,
                exp,
                &endpoint_matrix(&recs_half),
                &endpoint_matrix(recs),
            ),
            Err(_) => f64::INFINITY,
        },
        _ => f64::INFINITY,
    };
    out.push(PropertyCheck::at_most("harness", "scale_equivariance", deviation, 1e-9));
}

/// Largest relative departure from exact doubling under `r ↦ 2r`, over `Q*`,
/// the limit root, the endpoint samples and the covariance error.
fn scale_deviation(e1: &Experiment, e2: &Experiment, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a * 2.0 - b).amax() / b.amax().max(f64::MIN_POSITIVE);
    let q1 = DMatrix::from_column_slice(e1.dim(), 1, e1.oracle.q_star.as_slice());
    let q2 = DMatrix::from_column_slice(e2.dim(), 1, e2.oracle.q_star.as_slice());
    let err1 = linalg::frobenius_rel(&stats::covariance(s1), &e1.oracle.limit_cov);
    let err2 = linalg::frobenius_rel(&stats::covariance(s2), &e2.oracle.limit_cov);
    rel(&q1, &q2)
        .max(rel(&e1.oracle.limit_sqrt, &e2.oracle.limit_sqrt))
        .max(rel(s1, s2))
        .max((err1 - err2).abs())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{default_fixture, default_schedule};

    #[test]
    fn shipped_fixture_passes_every_property() {
        let exp = Experiment::new(default_fixture(), default_schedule()).unwrap();
        let checks = validate_experiment(&exp, &ValidationOptions::default());
        for c in &checks {
            println!("{}/{}: {:.3e} <= {:.3e}", c.module, c.property, c.observed, c.bound);
        }
        assert!(all_passed(&checks));
        assert_eq!(checks.len(), 24);
    }

    #[test]
    fn additivity_defect_of_exact_sums_is_round_off() {
        let a = DMatrix::from_fn(50, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let b = &a + DMatrix::from_fn(50, 2, |i, j| ((i * 5 + j) % 13) as f64 - 6.0);
        let c = &b + DMatrix::from_fn(50, 2, |i, j| ((i * 3 + 2 * j) % 7) as f64);
        assert!(additivity_defect(&[a, b, c]) < 1e-13);
    }
}
