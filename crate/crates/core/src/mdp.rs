//! Finite MDPs, Q tables, policies and the Bellman optimality operator.
//!
//! State-action pairs are flattened as `s * n_actions + a` everywhere; every
//! matrix indexed by pairs (`D`, `P^π`, `A`, `Σ`) uses this convention.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::{self, Purpose};

/// Row sums must match 1 to this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Value-iteration sweep cap.
pub const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("{field}: expected length {expected}, found {found}")]
    Shape {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("n_states and n_actions must be positive")]
    Empty,
    #[error("transition row (s={state}, a={action}) {reason}")]
    Transition {
        state: usize,
        action: usize,
        reason: String,
    },
    #[error("behavior_policy row s={state} {reason}")]
    Behavior { state: usize, reason: String },
    #[error("reward (s={state}, a={action}) = {value} lies outside [0, 1]")]
    Reward {
        state: usize,
        action: usize,
        value: f64,
    },
    #[error("gamma = {0} lies outside [0, 1)")]
    Discount(f64),
    #[error("value iteration did not converge within {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
}

impl MdpError {
    /// Name of the fixture field the error refers to.
    pub fn field(&self) -> &'static str {
        match self {
            MdpError::Shape { field, .. } => field,
            MdpError::Empty => "n_states",
            MdpError::Transition { .. } => "transition",
            MdpError::Behavior { .. } => "behavior_policy",
            MdpError::Reward { .. } => "reward",
            MdpError::Discount(_) => "gamma",
            MdpError::NoConvergence { .. } => "gamma",
        }
    }
}

/// A finite discounted MDP together with the behavior policy that generates
/// the sample trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpModel {
    n_states: usize,
    n_actions: usize,
    /// `P(s'|s,a)` at `(s * n_actions + a) * n_states + s'`.
    transition: Vec<f64>,
    /// `r(s,a)` at `s * n_actions + a`.
    reward: Vec<f64>,
    discount: f64,
    /// `π_b(a|s)` at `s * n_actions + a`.
    behavior: Vec<f64>,
}

fn check_distribution(row: &[f64]) -> Result<(), String> {
    if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(format!("has invalid entry {x}"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("sums to {total}, not 1"));
    }
    Ok(())
}

impl MdpModel {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        behavior: Vec<f64>,
    ) -> Result<Self, MdpError> {
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Empty);
        }
        let pairs = n_states * n_actions;
        for (field, expected, found) in [
            ("transition", pairs * n_states, transition.len()),
            ("reward", pairs, reward.len()),
            ("behavior_policy", pairs, behavior.len()),
        ] {
            if expected != found {
                return Err(MdpError::Shape {
                    field,
                    expected,
                    found,
                });
            }
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::Discount(discount));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let i = s * n_actions + a;
                check_distribution(&transition[i * n_states..(i + 1) * n_states]).map_err(
                    |reason| MdpError::Transition {
                        state: s,
                        action: a,
                        reason,
                    },
                )?;
                if !(0.0..=1.0).contains(&reward[i]) {
                    return Err(MdpError::Reward {
                        state: s,
                        action: a,
                        value: reward[i],
                    });
                }
            }
            check_distribution(&behavior[s * n_actions..(s + 1) * n_actions])
                .map_err(|reason| MdpError::Behavior { state: s, reason })?;
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            behavior,
        })
    }

    /// Uniform behavior policy over all actions.
    pub fn uniform_behavior(n_states: usize, n_actions: usize) -> Vec<f64> {
        vec![1.0 / n_actions as f64; n_states * n_actions]
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    #[inline]
    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let i = s * self.n_actions + a;
        &self.transition[i * self.n_states..(i + 1) * self.n_states]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    #[inline]
    pub fn behavior_row(&self, s: usize) -> &[f64] {
        &self.behavior[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn behavior(&self) -> &[f64] {
        &self.behavior
    }

    /// Upper end of the range every Q-learning iterate stays in.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    /// The same model with every reward multiplied by `c`.
    pub fn with_scaled_rewards(&self, c: f64) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.iter().map(|r| r * c).collect(),
            self.discount,
            self.behavior.clone(),
        )
    }

    /// The same model with a different behavior policy.
    pub fn with_behavior(&self, behavior: Vec<f64>) -> Result<Self, MdpError> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.discount,
            behavior,
        )
    }

    /// State-to-state kernel under the behavior policy.
    pub fn behavior_state_kernel(&self) -> DMatrix<f64> {
        let n = self.n_states;
        DMatrix::from_fn(n, n, |s, t| {
            (0..self.n_actions)
                .map(|a| self.behavior_row(s)[a] * self.transition_row(s, a)[t])
                .sum()
        })
    }
}

/// Q-function table indexed by `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_states * n_actions, "QTable shape mismatch");
        Self {
            n_states,
            n_actions,
            values,
        }
    }

    pub fn for_model(m: &MdpModel) -> Self {
        Self::zeros(m.n_states(), m.n_actions())
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn from_dvector(n_states: usize, n_actions: usize, v: &DVector<f64>) -> Self {
        Self::from_vec(n_states, n_actions, v.as_slice().to_vec())
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `V(s) = max_a Q(s,a)`.
    #[inline]
    pub fn state_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action at `s`, lowest index on ties.
    #[inline]
    pub fn argmax(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }

    /// Elementwise `self - other`.
    pub fn minus(&self, other: &QTable) -> QTable {
        QTable::from_vec(
            self.n_states,
            self.n_actions,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn sup_norm(&self) -> f64 {
        linalg::sup_norm(&self.values)
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A stationary policy `π(a|s)`; deterministic policies are point masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMatrix {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyMatrix {
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            assert!(a < n_actions, "action {a} out of range");
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn stochastic(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), n_states * n_actions);
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Selected actions if the policy is deterministic.
    pub fn actions(&self) -> Option<Vec<usize>> {
        (0..self.n_states)
            .map(|s| {
                let row = &self.probs[s * self.n_actions..(s + 1) * self.n_actions];
                row.iter().position(|p| *p == 1.0)
            })
            .collect()
    }

    /// `(πQ)(s) = Σ_a π(a|s) Q(s,a)`.
    pub fn state_values(&self, q: &QTable) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.prob(s, a) * q.get(s, a)).sum())
            .collect()
    }

    /// `P^π` with `P^π((s,a),(s',a')) = P(s'|s,a) π(a'|s')`, so that
    /// `P^π Q = P(πQ)`.
    pub fn induced_kernel(&self, m: &MdpModel) -> DMatrix<f64> {
        let (ns, na) = (m.n_states(), m.n_actions());
        let d = ns * na;
        let mut k = DMatrix::zeros(d, d);
        for s in 0..ns {
            for a in 0..na {
                let row = m.transition_row(s, a);
                for (s2, p) in row.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    for a2 in 0..na {
                        k[(s * na + a, s2 * na + a2)] += p * self.prob(s2, a2);
                    }
                }
            }
        }
        k
    }
}

/// `[𝒯(Q)](s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) max_{a'} Q(s',a')`.
pub fn bellman_apply(q: &QTable, m: &MdpModel) -> QTable {
    let v: Vec<f64> = (0..m.n_states()).map(|s| q.state_value(s)).collect();
    let gamma = m.discount();
    let mut out = QTable::for_model(m);
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            let ev: f64 = m.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            out.set(s, a, m.reward(s, a) + gamma * ev);
        }
    }
    out
}

/// Deterministic greedy policy, lowest action index on ties.
pub fn greedy_policy(q: &QTable) -> PolicyMatrix {
    let actions: Vec<usize> = (0..q.n_states()).map(|s| q.argmax(s)).collect();
    PolicyMatrix::deterministic(q.n_actions(), &actions)
}

/// `Q^π` for a policy by solving `(I - γP^π)Q = r`.
pub fn evaluate_policy(m: &MdpModel, pi: &PolicyMatrix) -> Option<QTable> {
    let d = m.n_pairs();
    let lhs = DMatrix::identity(d, d) - pi.induced_kernel(m) * m.discount();
    let r = DVector::from_column_slice(m.rewards());
    linalg::solve_vec(&lhs, &r).map(|q| QTable::from_dvector(m.n_states(), m.n_actions(), &q))
}

/// Optimal Q-function by value iteration followed by one exact policy
/// evaluation of the greedy policy (kept when it lowers the Bellman residual).
///
/// On return `‖𝒯(Q) - Q‖∞ ≤ tol·(1-γ)/(2γ)`, hence `‖Q - Q*‖∞ ≤ tol`.
pub fn solve_q_star(m: &MdpModel, tol: f64) -> Result<(QTable, PolicyMatrix), MdpError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let gamma = m.discount();
    let requested = if gamma == 0.0 {
        0.0
    } else {
        tol * (1.0 - gamma) / (2.0 * gamma)
    };
    // Residuals below a few ulps of the value scale are not attainable.
    let floor = 16.0 * f64::EPSILON * m.value_bound();
    let threshold = requested.max(floor);

    let mut q = QTable::for_model(m);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let next = bellman_apply(&q, m);
        residual = next.sup_distance(&q);
        q = next;
        if residual <= threshold {
            let polished = evaluate_policy(m, &greedy_policy(&q));
            if let Some(p) = polished {
                if p.is_finite() && bellman_apply(&p, m).sup_distance(&p) <= residual {
                    q = p;
                }
            }
            let pi = greedy_policy(&q);
            return Ok((q, pi));
        }
    }
    Err(MdpError::NoConvergence {
        sweeps: MAX_SWEEPS,
        residual,
    })
}

/// Sampled lower estimate of the Lipschitz constant `L` in
/// `‖(P^π - P^{π*})(Q - Q*)‖∞ ≤ L‖Q - Q*‖²∞`.
///
/// This is never a certificate: it is the largest ratio seen over the probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub sampled_lower_bound: f64,
    pub samples_used: usize,
    pub samples_skipped: usize,
    /// No usable probe produced a nonzero ratio.
    pub degenerate: bool,
}

/// Ratio `‖(P^π - P^{π*})(Q - Q*)‖∞ / ‖Q - Q*‖²∞` with π greedy for `q`;
/// `None` when `q = q*`.
pub fn lipschitz_ratio(m: &MdpModel, q_star: &QTable, pi_star: &[usize], q: &QTable) -> Option<f64> {
    let delta = q.minus(q_star);
    let norm = delta.sup_norm();
    if norm == 0.0 {
        return None;
    }
    let greedy: Vec<usize> = (0..m.n_states()).map(|s| q.argmax(s)).collect();
    let diff: Vec<f64> = (0..m.n_states())
        .map(|s| delta.get(s, greedy[s]) - delta.get(s, pi_star[s]))
        .collect();
    let mut worst = 0.0_f64;
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            let v: f64 = m.transition_row(s, a).iter().zip(&diff).map(|(p, d)| p * d).sum();
            worst = worst.max(v.abs());
        }
    }
    Some(worst / (norm * norm))
}

/// Largest Lipschitz ratio over an explicit probe set.
pub fn lipschitz_from_probes<'a>(
    m: &MdpModel,
    q_star: &QTable,
    pi_star: &PolicyMatrix,
    probes: impl IntoIterator<Item = &'a QTable>,
) -> LipschitzEstimate {
    let actions = pi_star.actions().expect("π* must be deterministic");
    let mut est = LipschitzEstimate {
        sampled_lower_bound: 0.0,
        samples_used: 0,
        samples_skipped: 0,
        degenerate: true,
    };
    for q in probes {
        match lipschitz_ratio(m, q_star, &actions, q) {
            Some(r) => {
                est.samples_used += 1;
                if r > est.sampled_lower_bound {
                    est.sampled_lower_bound = r;
                    est.degenerate = false;
                }
            }
            None => est.samples_skipped += 1,
        }
    }
    est
}

/// Lipschitz lower estimate from `n_samples` uniform tables in
/// `[0, 1/(1-γ)]^{|S|×|A|}`.
pub fn estimate_lipschitz_l(
    m: &MdpModel,
    q_star: &QTable,
    pi_star: &PolicyMatrix,
    n_samples: usize,
    seed: u64,
) -> LipschitzEstimate {
    assert!(n_samples >= 1);
    let mut rng = rng::stream(seed, Purpose::Probe, 0);
    let hi = m.value_bound();
    let probes: Vec<QTable> = (0..n_samples)
        .map(|_| {
            QTable::from_vec(
                m.n_states(),
                m.n_actions(),
                (0..m.n_pairs()).map(|_| rng.random::<f64>() * hi).collect(),
            )
        })
        .collect();
    lipschitz_from_probes(m, q_star, pi_star, &probes)
}

/// Random Q table with entries uniform in `[lo, hi)`.
pub fn random_q(m: &MdpModel, rng: &mut impl Rng, lo: f64, hi: f64) -> QTable {
    QTable::from_vec(
        m.n_states(),
        m.n_actions(),
        (0..m.n_pairs()).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
    )
}
