use nalgebra::DMatrix;
use proptest::prelude::*;
use qclt::chain::build_joint_chain;
use qclt::engine::{replay_path, simulate_path, InitialState, RunConfig, StepsizeSchedule};
use qclt::fixture::{default_fixture, generate_mdp, RandomMdpSpec};
use qclt::harness::Experiment;
use qclt::mdp::{bellman_apply, random_q};
use qclt::oracle::f_operator;
use qclt::rng::{self, Purpose};
use qclt::stats::ExactSum;
use qclt::validate::additivity_defect;
use qclt::{MdpModel, QTable};
use rand::Rng;

fn mdp() -> impl Strategy<Value = MdpModel> {
    (1usize..=5, 1usize..=4, 0.0f64..0.95, any::<u64>(), 0.2f64..=1.0).prop_filter_map(
        "generator gave up",
        |(ns, na, gamma, seed, sparsity)| {
            let mut spec = RandomMdpSpec::new(ns, na, gamma, seed);
            spec.sparsity = sparsity;
            generate_mdp(&spec).ok()
        },
    )
}

fn table(m: &MdpModel, seed: u64, lo: f64, hi: f64) -> QTable {
    random_q(m, &mut rng::stream(seed, Purpose::Probe, 0), lo, hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bellman_is_a_gamma_contraction(m in mdp(), s1: u64, s2: u64) {
        let (q1, q2) = (table(&m, s1, -5.0, 5.0), table(&m, s2, -5.0, 5.0));
        let lhs = bellman_apply(&q1, &m).sup_distance(&bellman_apply(&q2, &m));
        prop_assert!(lhs <= m.discount() * q1.sup_distance(&q2) + 1e-12);
    }

    #[test]
    fn bellman_is_monotone(m in mdp(), s1: u64, s2: u64) {
        let q1 = table(&m, s1, -5.0, 5.0);
        let bump = table(&m, s2, 0.0, 3.0);
        let q2 = QTable::from_vec(
            m.n_states(),
            m.n_actions(),
            q1.as_slice().iter().zip(bump.as_slice()).map(|(a, b)| a + b).collect(),
        );
        let (t1, t2) = (bellman_apply(&q1, &m), bellman_apply(&q2, &m));
        for (a, b) in t1.as_slice().iter().zip(t2.as_slice()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn sampled_operator_is_lipschitz(m in mdp(), s1: u64, s2: u64, pick: u64) {
        let (q1, q2) = (table(&m, s1, -5.0, 5.0), table(&m, s2, -5.0, 5.0));
        let chain = build_joint_chain(&m).unwrap();
        let y = chain.triples()[(pick % chain.len() as u64) as usize];
        let lhs = f_operator(&q1, y, &m).sup_distance(&f_operator(&q2, y, &m));
        let rhs = q1.sup_distance(&q2);
        prop_assert!(lhs <= 2.0 * rhs);
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn chain_invariants(m in mdp()) {
        let chain = build_joint_chain(&m).unwrap();
        let mu = chain.stationary();
        prop_assert!(mu.iter().all(|p| *p >= 0.0));
        prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let kernel = chain.kernel();
        for i in 0..chain.len() {
            prop_assert!((kernel.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let shifted = DMatrix::from_row_slice(1, mu.len(), mu) * kernel;
        for (a, b) in shifted.iter().zip(mu) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // Visitation weights are the (s, a) marginal of μ̃.
        let mut marginal = vec![0.0; m.n_pairs()];
        for (y, p) in chain.triples().iter().zip(mu) {
            marginal[m.pair(y.s, y.a)] += p;
        }
        for (a, b) in marginal.iter().zip(chain.visitation()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(chain.rho() > 0.0 && chain.rho() <= 1.0);
    }

    #[test]
    fn iterates_stay_in_the_value_range(m in mdp(), seed: u64) {
        let chain = build_joint_chain(&m).unwrap();
        let sched = StepsizeSchedule::polynomial(1.0, 1.0, 0.7).unwrap();
        let path = simulate_path(&m, &chain, InitialState::Stationary, 500, seed, 0);
        let hi = 1.0 / (1.0 - m.discount());
        for q in replay_path(&m, &path, &sched.table(500)) {
            prop_assert!(q.as_slice().iter().all(|x| *x >= 0.0 && *x <= hi));
        }
    }

    #[test]
    fn stepsizes_decay_but_not_too_fast(
        alpha in 0.01f64..10.0, b in 1.0f64..500.0, beta in 0.51f64..0.99, k in 0usize..1_000_000
    ) {
        let s = StepsizeSchedule::Polynomial { alpha, b, beta };
        prop_assert!(s.at(k + 1) < s.at(k));
        prop_assert!((k + 1) as f64 * s.at(k + 1) > k as f64 * s.at(k));
    }

    #[test]
    fn exact_sum_ignores_order(xs in prop::collection::vec(-1e30f64..1e30, 1..64), seed: u64) {
        let mut shuffled = xs.clone();
        let mut rng = rng::stream(seed, Purpose::Probe, 1);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let total = |v: &[f64]| {
            let mut s = ExactSum::default();
            v.iter().for_each(|x| s.add(*x));
            s.value()
        };
        prop_assert_eq!(total(&xs).to_bits(), total(&shuffled).to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn runs_are_deterministic_and_scale_with_rewards(seed: u64, replica in 0u64..1000) {
        let base = default_fixture();
        let half = base.with_scaled_rewards(0.5).unwrap();
        let sched = StepsizeSchedule::polynomial(1.0, 1.0, 0.7).unwrap();
        let cfg = RunConfig::new(2_000).with_checkpoints(vec![10, 2_000]);
        let exp = Experiment::new(base, sched).unwrap();
        let a = exp.run(&cfg, seed, replica).unwrap();
        prop_assert_eq!(&a, &exp.run(&cfg, seed, replica).unwrap());
        // Halving every reward halves every error exactly.
        let b = Experiment::new(half, sched).unwrap().run(&cfg, seed, replica).unwrap();
        for (x, y) in a.final_averaged_error.iter().zip(&b.final_averaged_error) {
            prop_assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn partial_sums_are_additive(seed: u64) {
        let exp = Experiment::new(default_fixture(), StepsizeSchedule::polynomial(1.0, 1.0, 0.7).unwrap()).unwrap();
        let grid = vec![0.25, 0.5, 0.75, 1.0];
        let cfg = RunConfig::new(4_000).with_zeta_grid(grid.clone());
        let d = exp.dim();
        let recs: Vec<_> = (0..8).map(|r| exp.run(&cfg, seed, r).unwrap()).collect();
        let mut paths = vec![DMatrix::zeros(recs.len(), d)];
        for g in 0..grid.len() {
            paths.push(DMatrix::from_fn(recs.len(), d, |r, c| recs[r].delta_partial_sums[g][c]));
        }
        prop_assert!(additivity_defect(&paths) < 1e-10);
        for r in &recs {
            prop_assert_eq!(r.delta_partial_sums.last().unwrap(), &r.final_averaged_error);
        }
    }
}
