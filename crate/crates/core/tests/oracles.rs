//! Independent re-computations of the library's central quantities.

use nalgebra::{DMatrix, DVector};
use qclt::chain::{build_joint_chain, mixing_time};
use qclt::engine::{default_zeta_grid, InitialState, RunConfig};
use qclt::fixture::{decay_schedule, default_fixture, default_schedule, generate_mdp, RandomMdpSpec};
use qclt::harness::{diagnostics_terms, w1_normal, w1_projected, probe_directions, Experiment};
use qclt::linalg;
use qclt::oracle::{self, mds_diagnostics, psi_diagnostics};
use qclt::rng::{self, Purpose};
use qclt::stats::ExactSum;
use qclt::{JointChain, MdpModel, QTable, TheoryOracle};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn random_fixtures() -> Vec<MdpModel> {
    let shapes = [(2, 2), (3, 2), (2, 3), (4, 2), (3, 3), (4, 3), (5, 2), (6, 2), (3, 4), (4, 4)];
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(ns, na))| {
            let mut spec = RandomMdpSpec::new(ns, na, 0.3 + 0.06 * i as f64, 100 + i as u64);
            spec.sparsity = 0.7;
            generate_mdp(&spec).unwrap()
        })
        .collect()
}

fn cdf(p: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = p
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    let last = p.iter().rposition(|x| *x > 0.0).unwrap();
    c[last..].iter_mut().for_each(|x| *x = 1.0);
    c
}

fn draw(c: &[f64], u: f64) -> usize {
    c.iter().position(|x| u < *x).unwrap()
}

/// Plain loop: no lazy sums, no emission grid, one exact sum per entry fed
/// with every `Δ_k`.
fn reference_endpoint(exp: &Experiment, horizon: usize, seed: u64, replica: u64) -> Vec<f64> {
    let m = &exp.model;
    let (ns, na) = (m.n_states(), m.n_actions());
    let q_star = exp.oracle.q_star.as_slice();
    let mut rng = rng::stream(seed, Purpose::Trajectory, replica);
    let mut s = draw(&cdf(&exp.chain.state_marginal()), rng.random::<f64>());
    let mut q = vec![0.0; ns * na];
    let mut sums = vec![ExactSum::default(); ns * na];
    for k in 0..horizon {
        let a = draw(&cdf(m.behavior_row(s)), rng.random::<f64>());
        let next = draw(&cdf(m.transition_row(s, a)), rng.random::<f64>());
        let v = q[next * na..(next + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let i = s * na + a;
        let target = m.reward(s, a) + m.discount() * v;
        q[i] += exp.schedule.at(k) * (target - q[i]);
        for (j, sum) in sums.iter_mut().enumerate() {
            sum.add(q[j] - q_star[j]);
        }
        s = next;
    }
    let scale = 1.0 / (horizon as f64).sqrt();
    sums.iter().map(|x| x.value() * scale).collect()
}

#[test]
fn engine_matches_reference_loop_bit_for_bit() {
    let exp = Experiment::new(default_fixture(), default_schedule()).unwrap();
    let cfg = RunConfig::new(10_000).with_zeta_grid(default_zeta_grid());
    for replica in [0, 1, 17] {
        let rec = exp.run(&cfg, 2024, replica).unwrap();
        let reference = reference_endpoint(&exp, 10_000, 2024, replica);
        assert_eq!(rec.final_averaged_error, reference);
        assert_eq!(rec.delta_partial_sums.last().unwrap(), &reference);
    }
}

fn power_iteration(kernel: &DMatrix<f64>, steps: usize) -> DVector<f64> {
    let n = kernel.nrows();
    let mut mu = DVector::from_element(n, 1.0 / n as f64).transpose();
    for _ in 0..steps {
        mu = &mu * kernel;
    }
    mu.transpose()
}

#[test]
fn stationary_law_matches_power_iteration() {
    for m in std::iter::once(default_fixture()).chain(random_fixtures()) {
        let chain = build_joint_chain(&m).unwrap();
        let mu = power_iteration(chain.kernel(), 20_000);
        let gap = mu.iter().zip(chain.stationary()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12, "power iteration differs by {gap:e}");
    }
}

fn tv_scan(chain: &JointChain, threshold: f64) -> usize {
    let k = chain.kernel();
    let mu = chain.stationary();
    let mut p = DMatrix::<f64>::identity(k.nrows(), k.nrows());
    for t in 0.. {
        let worst = (0..p.nrows())
            .map(|i| 0.5 * p.row(i).iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if worst <= threshold {
            return t;
        }
        p = &p * k;
    }
    unreachable!()
}

#[test]
fn mixing_time_matches_tv_scan() {
    let sched = default_schedule();
    for m in std::iter::once(default_fixture()).chain(random_fixtures()) {
        let chain = build_joint_chain(&m).unwrap();
        for threshold in [0.5, 0.1, 1e-3, sched.at(100_000)] {
            assert_eq!(mixing_time(&chain, threshold).unwrap(), tv_scan(&chain, threshold));
        }
    }
}

/// `Ψ_i^K = α_i Σ_{k=i}^{K-1} Π_{j=i+1}^{k} (I - α_j A)`, by explicit products.
fn psi_direct(a: &DMatrix<f64>, alphas: &[f64], i: usize, horizon: usize) -> DMatrix<f64> {
    let d = a.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let mut total = DMatrix::<f64>::zeros(d, d);
    for k in i..horizon {
        let mut prod = id.clone();
        for alpha in &alphas[i + 1..=k] {
            prod = (&id - a * *alpha) * prod;
        }
        total += prod;
    }
    total * alphas[i]
}

#[test]
fn psi_recursion_matches_direct_summation() {
    let exp = Experiment::new(default_fixture(), default_schedule()).unwrap();
    let o = &exp.oracle;
    let horizon = 300;
    let alphas = exp.schedule.table(horizon + 1);
    let probes = [0, 1, 5, 50, 150, 299];
    let rows = psi_diagnostics(&exp.schedule, &o.a_matrix, horizon, &probes, o.rho, o.discount);
    let a_inv = o.a_inverse();
    for (row, &i) in rows.iter().zip(&probes) {
        assert_eq!(row.i, i);
        let psi = psi_direct(&o.a_matrix, &alphas, i, horizon);
        let gap = linalg::inf_norm(&(&psi - &a_inv));
        assert!((row.gap - gap).abs() <= 1e-10 * gap.max(1.0), "i={i}: {} vs {gap}", row.gap);
        if i + 1 < horizon {
            let next = psi_direct(&o.a_matrix, &alphas, i + 1, horizon);
            let diff = linalg::inf_norm(&(&next - &psi));
            assert!((row.step_difference - diff).abs() <= 1e-10 * diff.max(1.0));
        }
    }
}

/// Midpoint rule in probability space with 4096 nodes:
/// `∫₀¹ |F_n⁻¹(u) - σΦ⁻¹(u)| du`.
fn w1_quadrature(samples: &[f64], sigma: f64) -> f64 {
    const NODES: usize = 4096;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..NODES)
        .map(|j| {
            let u = (j as f64 + 0.5) / NODES as f64;
            let empirical = xs[((u * n as f64) as usize).min(n - 1)];
            (empirical - sigma * normal.inverse_cdf(u)).abs()
        })
        .sum::<f64>()
        / NODES as f64
}

#[test]
fn exact_w1_agrees_with_quadrature() {
    let mut rng = rng::stream(9, Purpose::Synthetic, 0);
    for (n, sigma, shift) in [(64, 1.0, 0.0), (128, 0.3, 0.2), (256, 2.0, -1.0), (32, 1.5, 3.0)] {
        let xs: Vec<f64> = (0..n).map(|_| shift + 1.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let exact = w1_normal(&xs, sigma);
        let quad = w1_quadrature(&xs, sigma);
        assert!((exact - quad).abs() < 2e-3 * sigma.max(1.0), "n={n}: {exact} vs {quad}");
    }
}

#[test]
fn w1_is_small_for_samples_from_the_limit_law() {
    let exp = Experiment::new(default_fixture(), default_schedule()).unwrap();
    let l = &exp.oracle.limit_sqrt;
    let d = exp.dim();
    let n = 20_000;
    let mut rng = rng::stream(3, Purpose::Synthetic, 1);
    let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let samples = z * l.transpose();
    let dirs = probe_directions(d, 32, 3);
    let w = w1_projected(&samples, l, &dirs);
    assert!(w.max / w.max_sd < 0.03, "normalized W1 {}", w.max / w.max_sd);

    // A mean shift of c along a coordinate is seen as W₁ ≥ c.
    let shifted = samples.map_with_location(|_, j, v| if j == 0 { v + 0.5 } else { v });
    let w = w1_projected(&shifted, l, &dirs);
    assert!(w.per_direction[0] > 0.47, "{}", w.per_direction[0]);
}

#[test]
fn empirical_noise_covariance_within_two_percent() {
    let exp = Experiment::new(default_fixture(), default_schedule()).unwrap();
    let r = mds_diagnostics(&exp.oracle, &exp.chain, &exp.model, 10_000_000, 77);
    assert!(r.sigma_rel_error <= 0.02, "{}", r.sigma_rel_error);
}

#[test]
fn poisson_solution_satisfies_its_equation_pointwise() {
    for m in std::iter::once(default_fixture()).chain(random_fixtures()) {
        let chain = build_joint_chain(&m).unwrap();
        let o = TheoryOracle::build(&m, &chain).unwrap();
        let x = &o.poisson.x;
        let fbar = oracle::f_bar_definitional(&o.q_star, &chain, &m);
        for (i, y) in chain.triples().iter().enumerate() {
            let f = oracle::f_operator(&o.q_star, *y, &m);
            for c in 0..m.n_pairs() {
                let px: f64 = (0..chain.len()).map(|j| chain.kernel()[(i, j)] * x[(j, c)]).sum();
                let lhs = f.as_slice()[c] - fbar.as_slice()[c];
                assert!((lhs - (x[(i, c)] - px)).abs() <= 1e-10, "triple {y}, pair {c}");
            }
        }
    }
}

#[test]
fn sigma_matches_second_moment_identity() {
    // Under stationarity E[MMᵀ] = E[XXᵀ] - E[(P̃X)(P̃X)ᵀ].
    for m in std::iter::once(default_fixture()).chain(random_fixtures()) {
        let chain = build_joint_chain(&m).unwrap();
        let o = TheoryOracle::build(&m, &chain).unwrap();
        let x = &o.poisson.x;
        let px = chain.kernel() * x;
        let d = m.n_pairs();
        let mut sigma = DMatrix::<f64>::zeros(d, d);
        for (i, w) in chain.stationary().iter().enumerate() {
            let xi = x.row(i).transpose();
            let pi = px.row(i).transpose();
            sigma += (&xi * xi.transpose() - &pi * pi.transpose()) * *w;
        }
        let scale = o.sigma.amax().max(1e-300);
        assert!((&sigma - &o.sigma).amax() <= 1e-10 * scale.max(1.0));
    }
}

#[test]
fn limit_law_matches_lyapunov_form() {
    // The limit covariance solves A L Aᵀ = Σ and its square root squares back.
    for m in std::iter::once(default_fixture()).chain(random_fixtures()) {
        let chain = build_joint_chain(&m).unwrap();
        let o = TheoryOracle::build(&m, &chain).unwrap();
        let back = &o.a_matrix * &o.limit_cov * o.a_matrix.transpose();
        assert!((&back - &o.sigma).amax() <= 1e-10 * o.sigma.amax().max(1.0));
        let sq = &o.limit_sqrt * &o.limit_sqrt;
        assert!((&sq - &o.limit_cov).amax() <= 1e-8 * o.limit_cov.amax().max(1.0));
    }
}

#[test]
fn sandwich_holds_over_twenty_seeds() {
    let exp = Experiment::new(default_fixture(), default_schedule()).unwrap().with_sandwich(true);
    let cfg = RunConfig::new(1_000).with_sandwich(true);
    for seed in 0..20 {
        let rec = exp.run(&cfg, seed, 0).expect("no sandwich violation");
        assert_eq!(rec.sandwich_violation_count, 0);
    }
    // A fixed start state exercises a different transient.
    let cfg = cfg.with_initial_state(InitialState::Fixed(2));
    exp.run(&cfg, 5, 0).unwrap();
}

#[test]
fn vanishing_terms_shrink_and_decomposition_closes() {
    // With β = 2/3 the Poisson-difference term decays like K^{-1/6} behind a
    // few-thousand-step transient; β = 0.9 makes the trend visible by 10⁵.
    let exp = Experiment::new(default_fixture(), decay_schedule()).unwrap();
    const PATHS: u64 = 16;
    let mut means = Vec::new();
    for k in [1_000, 10_000, 100_000] {
        let mut acc = [0.0; 7];
        for r in 0..PATHS {
            let t = diagnostics_terms(&exp, k, 31, r).unwrap();
            assert!(t.closure_gap <= 1e-10 * t.upper_sum.max(1.0), "closure {}", t.closure_gap);
            for (a, (_, v)) in acc.iter_mut().zip(t.vanishing()) {
                *a += v / PATHS as f64;
            }
        }
        means.push(acc);
    }
    let names = ["term1", "term2", "term3a", "term3b", "term4", "term5a", "term5b"];
    for (j, name) in names.iter().enumerate() {
        assert!(
            means[0][j] > means[1][j] && means[1][j] > means[2][j],
            "{name}: {} {} {}",
            means[0][j],
            means[1][j],
            means[2][j]
        );
    }
}

#[test]
fn zero_reward_runs_are_identically_zero() {
    let m = default_fixture();
    let zero = MdpModel::new(
        m.n_states(),
        m.n_actions(),
        m.transitions().to_vec(),
        vec![0.0; m.n_pairs()],
        m.discount(),
        m.behavior().to_vec(),
    )
    .unwrap();
    let exp = Experiment::new(zero, default_schedule()).unwrap();
    assert_eq!(exp.oracle.q_star, QTable::for_model(&exp.model));
    let rec = exp.run(&RunConfig::new(500).with_sandwich(true), 1, 0).unwrap();
    assert!(rec.final_averaged_error.iter().all(|x| *x == 0.0));
    let t = diagnostics_terms(&exp, 200, 1, 0).unwrap();
    assert_eq!(t.term1, 0.0);
}
