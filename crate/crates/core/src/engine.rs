//! Asynchronous Q-learning with polynomial stepsizes and Polyak-Ruppert
//! partial sums.
//!
//! RNG stream discipline (one ChaCha8 stream per trajectory, see
//! [`crate::rng`]): when the initial state is drawn from the stationary state
//! law one uniform is consumed first; every step then consumes one uniform for
//! the action, one for the next state, and, when reward noise is enabled, one
//! for the noise. Uniforms are `f64` in `[0, 1)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{JointChain, Triple};
use crate::mdp::{MdpModel, QTable};
use crate::oracle::{self, TheoryOracle};
use crate::rng::{self, Purpose, StreamRng};
use crate::stats::ExactSum;

/// Elementwise slack allowed in the sandwich ordering.
pub const SANDWICH_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid stepsize schedule: {0}")]
    Schedule(String),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(
        "sandwich violated at k={k}, pair {pair}: lower {lower:e}, value {value:e}, upper {upper:e}"
    )]
    SandwichViolation {
        k: usize,
        pair: usize,
        lower: f64,
        value: f64,
        upper: f64,
        delta_down: Vec<f64>,
        delta: Vec<f64>,
        delta_up: Vec<f64>,
    },
}

/// Stepsize rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepsizeSchedule {
    /// `α_k = α (k + b)^{-β}`.
    Polynomial { alpha: f64, b: f64, beta: f64 },
    /// `α_k = α`. Diagnostics only; never admissible for CLT experiments.
    Constant { alpha: f64 },
}

impl StepsizeSchedule {
    /// Polynomial schedule with `α, b > 0`, `β ∈ (0, 1]` and `α_0 ≤ 1`.
    pub fn polynomial(alpha: f64, b: f64, beta: f64) -> Result<Self, EngineError> {
        let s = StepsizeSchedule::Polynomial { alpha, b, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(alpha: f64) -> Result<Self, EngineError> {
        let s = StepsizeSchedule::Constant { alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        match *self {
            StepsizeSchedule::Polynomial { alpha, b, beta } => {
                if !(alpha > 0.0 && b > 0.0 && alpha.is_finite() && b.is_finite()) {
                    return Err(EngineError::Schedule(format!(
                        "alpha = {alpha} and b = {b} must be positive"
                    )));
                }
                if !(beta > 0.0 && beta <= 1.0) {
                    return Err(EngineError::Schedule(format!("beta = {beta} outside (0, 1]")));
                }
            }
            StepsizeSchedule::Constant { alpha } => {
                if !(alpha > 0.0) {
                    return Err(EngineError::Schedule(format!("alpha = {alpha} must be positive")));
                }
            }
        }
        let a0 = self.at(0);
        if a0 > 1.0 {
            return Err(EngineError::Schedule(format!(
                "initial stepsize α_0 = {a0} exceeds 1"
            )));
        }
        Ok(())
    }

    /// Polynomial with `β ∈ (0.5, 1)`; the only schedules CLT reports accept.
    pub fn validate_for_clt(&self) -> Result<(), EngineError> {
        self.validate()?;
        match *self {
            StepsizeSchedule::Polynomial { beta, .. } if beta > 0.5 && beta < 1.0 => Ok(()),
            StepsizeSchedule::Polynomial { beta, .. } => Err(EngineError::Schedule(format!(
                "beta = {beta} outside (0.5, 1) required for CLT experiments"
            ))),
            StepsizeSchedule::Constant { .. } => Err(EngineError::Schedule(
                "constant stepsizes are diagnostics-only and cannot produce CLT reports".into(),
            )),
        }
    }

    /// `α_k`.
    #[inline]
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepsizeSchedule::Polynomial { alpha, b, beta } => alpha * (k as f64 + b).powf(-beta),
            StepsizeSchedule::Constant { alpha } => alpha,
        }
    }

    /// `[α_0, …, α_{n-1}]`.
    pub fn table(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.at(k)).collect()
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            StepsizeSchedule::Polynomial { beta, .. } => Some(beta),
            StepsizeSchedule::Constant { .. } => None,
        }
    }
}

/// Where `s_0` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Drawn from the behavior policy's stationary state law.
    #[default]
    Stationary,
    Fixed(usize),
}

/// Default FCLT grid `{0.1, 0.2, …, 1.0}`.
pub fn default_zeta_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// `⌊ζK⌋`, treating products within a few ulps of an integer as that integer.
pub fn zeta_index(zeta: f64, horizon: usize) -> usize {
    let x = zeta * horizon as f64;
    let r = x.round();
    if (x - r).abs() <= 8.0 * f64::EPSILON * x.abs().max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Number of updates `K`.
    pub horizon: usize,
    /// Points `ζ ∈ [0, 1]`, ascending, at which `Φ_K(ζ)` is emitted.
    pub zeta_grid: Vec<f64>,
    /// Iteration indices `k ∈ [0, K]` at which `Q_k` is kept.
    pub checkpoints: Vec<usize>,
    pub track_sandwich: bool,
    pub initial_state: InitialState,
    /// Half-width of additive uniform reward noise; 0 disables it.
    pub reward_noise: f64,
}

impl RunConfig {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            zeta_grid: vec![1.0],
            checkpoints: Vec::new(),
            track_sandwich: false,
            initial_state: InitialState::Stationary,
            reward_noise: 0.0,
        }
    }

    pub fn with_zeta_grid(mut self, grid: Vec<f64>) -> Self {
        self.zeta_grid = grid;
        self
    }

    pub fn with_checkpoints(mut self, ks: Vec<usize>) -> Self {
        self.checkpoints = ks;
        self
    }

    pub fn with_sandwich(mut self, on: bool) -> Self {
        self.track_sandwich = on;
        self
    }

    pub fn with_initial_state(mut self, init: InitialState) -> Self {
        self.initial_state = init;
        self
    }

    pub fn validate(&self, n_states: usize) -> Result<(), EngineError> {
        if self.horizon == 0 {
            return Err(EngineError::Config("horizon K must be at least 1".into()));
        }
        if self.zeta_grid.iter().any(|z| !(0.0..=1.0).contains(z)) {
            return Err(EngineError::Config("zeta grid must lie in [0, 1]".into()));
        }
        if self.zeta_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(EngineError::Config("zeta grid must be ascending".into()));
        }
        if self.checkpoints.iter().any(|&k| k > self.horizon) {
            return Err(EngineError::Config("checkpoints must lie in [0, K]".into()));
        }
        if let InitialState::Fixed(s) = self.initial_state {
            if s >= n_states {
                return Err(EngineError::Config(format!("initial state {s} out of range")));
            }
        }
        if !(self.reward_noise >= 0.0 && self.reward_noise.is_finite()) {
            return Err(EngineError::Config("reward_noise must be a finite half-width ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub k: usize,
    pub sup_error: f64,
    pub q: Vec<f64>,
}

/// One trajectory's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub replica: u64,
    pub horizon: usize,
    pub iterates_kept: Vec<Checkpoint>,
    pub zeta_grid: Vec<f64>,
    /// `Φ_K(ζ)` for each grid point, each a vector over pairs.
    pub delta_partial_sums: Vec<Vec<f64>>,
    /// `K^{-1/2} Σ_{k=1}^K Δ_k`.
    pub final_averaged_error: Vec<f64>,
    pub sandwich_violation_count: usize,
}

impl RunRecord {
    /// `(k, ‖Δ_k‖∞)` at the checkpoints.
    pub fn sup_error_trace(&self) -> Vec<(usize, f64)> {
        self.iterates_kept.iter().map(|c| (c.k, c.sup_error)).collect()
    }
}

/// Inverse-CDF sampler for actions and next states.
#[derive(Debug, Clone)]
pub struct Sampler {
    n_states: usize,
    n_actions: usize,
    behavior_cdf: Vec<f64>,
    transition_cdf: Vec<f64>,
}

fn cdf_of(probs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        out.push(acc);
    }
    // Everything from the last positive entry on is pinned to 1 so a uniform
    // in [0, 1) never falls through or lands on a zero-probability tail.
    if let Some(last) = probs.iter().rposition(|p| *p > 0.0) {
        for c in &mut out[last..] {
            *c = 1.0;
        }
    }
    out
}

#[inline]
fn pick(cdf: &[f64], u: f64) -> usize {
    let mut i = 0;
    while u >= cdf[i] {
        i += 1;
    }
    i
}

impl Sampler {
    pub fn new(m: &MdpModel) -> Self {
        let (ns, na) = (m.n_states(), m.n_actions());
        let mut behavior_cdf = Vec::with_capacity(ns * na);
        let mut transition_cdf = Vec::with_capacity(ns * na * ns);
        for s in 0..ns {
            behavior_cdf.extend(cdf_of(m.behavior_row(s)));
            for a in 0..na {
                transition_cdf.extend(cdf_of(m.transition_row(s, a)));
            }
        }
        Self {
            n_states: ns,
            n_actions: na,
            behavior_cdf,
            transition_cdf,
        }
    }

    /// Draws `a ~ π_b(·|s)` then `s' ~ P(·|s,a)`.
    #[inline]
    pub fn step(&self, s: usize, rng: &mut StreamRng) -> (usize, usize) {
        let na = self.n_actions;
        let a = pick(&self.behavior_cdf[s * na..(s + 1) * na], rng.random::<f64>());
        let i = (s * na + a) * self.n_states;
        let next = pick(&self.transition_cdf[i..i + self.n_states], rng.random::<f64>());
        (a, next)
    }

    pub fn initial_state(
        &self,
        init: InitialState,
        chain: &JointChain,
        rng: &mut StreamRng,
    ) -> usize {
        match init {
            InitialState::Fixed(s) => s,
            InitialState::Stationary => pick(&cdf_of(&chain.state_marginal()), rng.random::<f64>()),
        }
    }
}

/// `α_k = α(k+b)^{-β}` (or the constant rate).
pub fn stepsize_at(s: &StepsizeSchedule, k: usize) -> f64 {
    s.at(k)
}

/// One asynchronous update in place: only `(y.s, y.a)` changes, by
/// `α_k (r + γ max_{a'} Q(s',a') - Q(s,a))`.
#[inline]
pub fn async_q_step_in_place(q: &mut QTable, y: Triple, alpha: f64, m: &MdpModel) {
    let target = m.reward(y.s, y.a) + m.discount() * q.state_value(y.next);
    let cur = q.get(y.s, y.a);
    q.set(y.s, y.a, cur + alpha * (target - cur));
}

pub fn async_q_step(q: &QTable, y: Triple, alpha: f64, m: &MdpModel) -> QTable {
    let mut out = q.clone();
    async_q_step_in_place(&mut out, y, alpha, m);
    out
}

/// Sandwich bounds `Δ↓_k ≤ Δ_k ≤ Δ↑_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichState {
    pub delta_up: DVector<f64>,
    pub delta_down: DVector<f64>,
}

impl SandwichState {
    pub fn new(delta0: &DVector<f64>) -> Self {
        Self {
            delta_up: delta0.clone(),
            delta_down: delta0.clone(),
        }
    }

    /// First pair index where the ordering is broken by more than `tol`.
    pub fn violation(&self, delta: &DVector<f64>, tol: f64) -> Option<usize> {
        (0..delta.len()).find(|&i| {
            self.delta_down[i] > delta[i] + tol || delta[i] > self.delta_up[i] + tol
        })
    }
}

/// `γD(P^π - P^{π*})Δ` with π greedy for `Q* + Δ`.
pub fn greedy_gap_term(delta: &DVector<f64>, oracle: &TheoryOracle, m: &MdpModel) -> DVector<f64> {
    let (ns, na) = (m.n_states(), m.n_actions());
    let q = QTable::from_vec(
        ns,
        na,
        delta.iter().zip(oracle.q_star.as_slice()).map(|(d, s)| d + s).collect(),
    );
    let pi_star = &oracle.pi_star_actions;
    let diff: Vec<f64> = (0..ns)
        .map(|s| delta[s * na + q.argmax(s)] - delta[s * na + pi_star[s]])
        .collect();
    let gamma = m.discount();
    let p = &oracle.visitation;
    DVector::from_fn(ns * na, |i, _| {
        let (s, a) = (i / na, i % na);
        let v: f64 = m.transition_row(s, a).iter().zip(&diff).map(|(t, d)| t * d).sum();
        gamma * p[i] * v
    })
}

/// Advances both sandwich sequences:
/// `Δ↑ ← (I - α_k A)Δ↑ + α_k γD(P^{π_k} - P^{π*})Δ_k + α_k noise`,
/// `Δ↓ ← (I - α_k A)Δ↓ + α_k noise`, with `noise = F_k - F̄_k`.
pub fn sandwich_step(
    state: &SandwichState,
    delta: &DVector<f64>,
    alpha: f64,
    oracle: &TheoryOracle,
    m: &MdpModel,
    noise: &DVector<f64>,
) -> SandwichState {
    if alpha == 0.0 {
        return state.clone();
    }
    let a = &oracle.a_matrix;
    let gap = greedy_gap_term(delta, oracle, m);
    let up = &state.delta_up - (a * &state.delta_up) * alpha + gap * alpha + noise * alpha;
    let down = &state.delta_down - (a * &state.delta_down) * alpha + noise * alpha;
    SandwichState {
        delta_up: up,
        delta_down: down,
    }
}

/// Simulates one trajectory of `cfg.horizon` updates from `Q_0 = 0`.
pub fn run_trajectory(
    m: &MdpModel,
    chain: &JointChain,
    oracle: &TheoryOracle,
    sched: &StepsizeSchedule,
    cfg: &RunConfig,
    seed: u64,
    replica: u64,
) -> Result<RunRecord, EngineError> {
    sched.validate()?;
    let alphas = sched.table(cfg.horizon);
    run_trajectory_with_steps(m, chain, oracle, &alphas, cfg, seed, replica)
}

/// [`run_trajectory`] with a precomputed stepsize table `[α_0, …, α_{K-1}]`.
pub fn run_trajectory_with_steps(
    m: &MdpModel,
    chain: &JointChain,
    oracle: &TheoryOracle,
    alphas: &[f64],
    cfg: &RunConfig,
    seed: u64,
    replica: u64,
) -> Result<RunRecord, EngineError> {
    cfg.validate(m.n_states())?;
    let horizon = cfg.horizon;
    if alphas.len() < horizon {
        return Err(EngineError::Config("stepsize table shorter than K".into()));
    }
    if let Some(a) = alphas[..horizon].iter().find(|a| !(**a >= 0.0 && **a <= 1.0)) {
        return Err(EngineError::Schedule(format!("stepsize {a} outside [0, 1]")));
    }

    let (ns, na) = (m.n_states(), m.n_actions());
    let d = ns * na;
    let gamma = m.discount();
    let rewards = m.rewards();
    let q_star = oracle.q_star.as_slice();
    let sampler = Sampler::new(m);
    let mut rng = rng::stream(seed, Purpose::Trajectory, replica);
    let scale = 1.0 / (horizon as f64).sqrt();

    // Emission points ⌊ζK⌋ in grid order (the grid is ascending).
    let emit_at: Vec<usize> = cfg.zeta_grid.iter().map(|z| zeta_index(*z, horizon)).collect();
    let mut partial = vec![Vec::new(); emit_at.len()];
    let mut next_emit = 0usize;
    let mut checkpoints: Vec<usize> = cfg.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut kept = Vec::with_capacity(checkpoints.len());
    let mut next_ck = 0usize;

    let mut q = QTable::for_model(m);
    // Lazily accumulated Σ_{j=1}^{last[i]} Δ_j(i).
    let mut acc = vec![ExactSum::default(); d];
    let mut last = vec![0usize; d];

    let snapshot = |q: &QTable, acc: &[ExactSum], last: &[usize], n: usize| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let mut s = acc[i].clone();
                s.add_product(q.as_slice()[i] - q_star[i], n - last[i]);
                s.value() * scale
            })
            .collect()
    };
    let keep = |q: &QTable, k: usize| Checkpoint {
        k,
        sup_error: q.sup_distance(&oracle.q_star),
        q: q.as_slice().to_vec(),
    };

    while next_emit < emit_at.len() && emit_at[next_emit] == 0 {
        partial[next_emit] = vec![0.0; d];
        next_emit += 1;
    }
    while next_ck < checkpoints.len() && checkpoints[next_ck] == 0 {
        kept.push(keep(&q, 0));
        next_ck += 1;
    }

    let mut sandwich = cfg
        .track_sandwich
        .then(|| SandwichState::new(&DVector::from_iterator(d, q_star.iter().map(|x| -x))));

    let mut s = sampler.initial_state(cfg.initial_state, chain, &mut rng);
    for (k, &alpha) in alphas[..horizon].iter().enumerate() {
        let (a, next) = sampler.step(s, &mut rng);
        let noise = if cfg.reward_noise > 0.0 {
            cfg.reward_noise * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            0.0
        };
        let i = s * na + a;

        let pre = sandwich.as_ref().map(|_| q.clone());

        let cur = q.as_slice()[i];
        acc[i].add_product(cur - q_star[i], k - last[i]);
        last[i] = k;
        let target = rewards[i] + noise + gamma * q.state_value(next);
        q.as_mut_slice()[i] = cur + alpha * (target - cur);

        if let (Some(state), Some(pre)) = (sandwich.as_mut(), pre) {
            let y = Triple { s, a, next };
            let delta_k = DVector::from_iterator(
                d,
                pre.as_slice().iter().zip(q_star).map(|(x, y)| x - y),
            );
            let mut f = oracle::f_operator(&pre, y, m);
            f.as_mut_slice()[i] += noise;
            let fbar = oracle::f_bar_matrix_form(&pre, &oracle.visitation, m);
            let noise_vec = DVector::from_iterator(
                d,
                f.as_slice().iter().zip(fbar.as_slice()).map(|(x, y)| x - y),
            );
            *state = sandwich_step(state, &delta_k, alpha, oracle, m, &noise_vec);
            let delta_next = DVector::from_iterator(
                d,
                q.as_slice().iter().zip(q_star).map(|(x, y)| x - y),
            );
            if let Some(pair) = state.violation(&delta_next, SANDWICH_TOL) {
                return Err(EngineError::SandwichViolation {
                    k: k + 1,
                    pair,
                    lower: state.delta_down[pair],
                    value: delta_next[pair],
                    upper: state.delta_up[pair],
                    delta_down: state.delta_down.iter().copied().collect(),
                    delta: delta_next.iter().copied().collect(),
                    delta_up: state.delta_up.iter().copied().collect(),
                });
            }
        }

        s = next;
        let n = k + 1;
        while next_emit < emit_at.len() && emit_at[next_emit] == n {
            partial[next_emit] = snapshot(&q, &acc, &last, n);
            next_emit += 1;
        }
        while next_ck < checkpoints.len() && checkpoints[next_ck] == n {
            kept.push(keep(&q, n));
            next_ck += 1;
        }
    }

    Ok(RunRecord {
        seed,
        replica,
        horizon,
        iterates_kept: kept,
        zeta_grid: cfg.zeta_grid.clone(),
        delta_partial_sums: partial,
        final_averaged_error: snapshot(&q, &acc, &last, horizon),
        sandwich_violation_count: 0,
    })
}

/// The joint-chain path `y_0, …, y_{n-1}` under the same stream discipline as
/// [`run_trajectory`] (without reward noise).
pub fn simulate_path(
    m: &MdpModel,
    chain: &JointChain,
    init: InitialState,
    n: usize,
    seed: u64,
    replica: u64,
) -> Vec<Triple> {
    let sampler = Sampler::new(m);
    let mut rng = rng::stream(seed, Purpose::Trajectory, replica);
    let mut s = sampler.initial_state(init, chain, &mut rng);
    (0..n)
        .map(|_| {
            let (a, next) = sampler.step(s, &mut rng);
            let y = Triple { s, a, next };
            s = next;
            y
        })
        .collect()
}

/// Replays Q-learning along a fixed path; returns `Q_0, …, Q_n`.
pub fn replay_path(m: &MdpModel, path: &[Triple], alphas: &[f64]) -> Vec<QTable> {
    let mut q = QTable::for_model(m);
    let mut out = Vec::with_capacity(path.len() + 1);
    out.push(q.clone());
    for (y, a) in path.iter().zip(alphas) {
        async_q_step_in_place(&mut q, *y, *a, m);
        out.push(q.clone());
    }
    out
}

/// `I - αA` as a dense matrix.
pub fn step_matrix(a: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    DMatrix::identity(a.nrows(), a.ncols()) - a * alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stepsize_arithmetic() {
        let s = StepsizeSchedule::polynomial(0.5, 1.0, 2.0 / 3.0).unwrap();
        assert_eq!(stepsize_at(&s, 0), 0.5);
        assert_relative_eq!(stepsize_at(&s, 7), 0.125, max_relative = 1e-15);
    }

    #[test]
    fn stepsize_matches_extended_precision() {
        // 1·(10^6 + 1)^{-0.51}, evaluated with 50-digit arithmetic.
        let expect = 8.709631457649851e-4;
        let s = StepsizeSchedule::polynomial(1.0, 1.0, 0.51).unwrap();
        assert_relative_eq!(s.at(1_000_000), expect, max_relative = 1e-14);
    }

    #[test]
    fn schedule_validation() {
        assert!(StepsizeSchedule::polynomial(2.0, 1.0, 0.6).is_err());
        assert!(StepsizeSchedule::polynomial(4.0, 8.0, 2.0 / 3.0).is_ok());
        assert!(StepsizeSchedule::polynomial(1.0, 0.0, 0.6).is_err());
        let c = StepsizeSchedule::constant(0.1).unwrap();
        assert!(c.validate_for_clt().is_err());
        let p = StepsizeSchedule::polynomial(1.0, 1.0, 0.5).unwrap();
        assert!(p.validate_for_clt().is_err());
        let p = StepsizeSchedule::polynomial(1.0, 1.0, 0.9).unwrap();
        assert!(p.validate_for_clt().is_ok());
    }

    #[test]
    fn schedule_is_monotone() {
        let s = StepsizeSchedule::polynomial(1.0, 2.0, 2.0 / 3.0).unwrap();
        for k in 0..1000 {
            assert!(s.at(k + 1) < s.at(k));
            assert!(((k + 2) as f64) * s.at(k + 2) > ((k + 1) as f64) * s.at(k + 1));
        }
    }

    fn unit_model(r: f64, gamma: f64) -> MdpModel {
        MdpModel::new(1, 1, vec![1.0], vec![r], gamma, vec![1.0]).unwrap()
    }

    #[test]
    fn async_step_cases() {
        let m = unit_model(1.0, 0.5);
        let y = Triple { s: 0, a: 0, next: 0 };
        let q = QTable::zeros(1, 1);
        assert_eq!(async_q_step(&q, y, 1.0, &m).as_slice(), &[1.0]);
        assert_eq!(async_q_step(&q, y, 0.0, &m), q);
    }

    #[test]
    fn async_step_touches_one_entry() {
        let m = MdpModel::new(
            2,
            2,
            vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1],
            vec![0.1, 0.9, 0.4, 0.3],
            0.8,
            vec![0.5, 0.5, 0.3, 0.7],
        )
        .unwrap();
        let q = QTable::from_vec(2, 2, vec![1.0, 2.0, 3.0, 0.5]);
        let y = Triple { s: 1, a: 0, next: 0 };
        let out = async_q_step(&q, y, 0.25, &m);
        let expect = 3.0 + 0.25 * (0.4 + 0.8 * 2.0 - 3.0);
        assert_eq!(out.as_slice(), &[1.0, 2.0, expect, 0.5]);
    }

    #[test]
    fn zeta_index_floors_with_ulp_guard() {
        assert_eq!(zeta_index(0.29, 100), 29);
        assert_eq!(zeta_index(0.1, 100_000), 10_000);
        assert_eq!(zeta_index(0.55, 11), 6);
        assert_eq!(zeta_index(0.5, 3), 1);
        assert_eq!(zeta_index(0.0, 3), 0);
        assert_eq!(zeta_index(1.0, 7), 7);
    }

    #[test]
    fn cdf_pins_tail() {
        let c = cdf_of(&[0.0, 0.3, 0.7, 0.0]);
        assert_eq!(c, vec![0.0, 0.3, 1.0, 1.0]);
        assert_eq!(pick(&c, 0.0), 1);
        assert_eq!(pick(&c, 0.999_999), 2);
    }
}
