//! The joint chain `y_k = (s_k, a_k, s_{k+1})` driven by the behavior policy.
//!
//! Only reachable triples (`π_b(a|s) > 0` and `P(s'|s,a) > 0`) are states of
//! the chain. Construction validates irreducibility, aperiodicity and full
//! state-action coverage, and refuses to build a chain that fails any of them.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::mdp::MdpModel;

/// `‖μ̃P̃ - μ̃‖₁` accepted from the direct solve.
pub const STATIONARY_RESIDUAL_TOL: f64 = 1e-12;

/// Hard cap on matrix powers when searching for a mixing time.
pub const MIXING_CAP: usize = 100_000;

/// Default probe horizon for the geometric envelope.
pub const ENVELOPE_HORIZON: usize = 200;

/// Total-variation values at or below this are round-off.
pub const TV_FLOOR: f64 = 1e-13;

/// Lower bound on the reported `κ`.
pub const KAPPA_FLOOR: f64 = 1e-6;

/// Multiplicative inflation applied to the second-largest eigenvalue modulus.
pub const KAPPA_INFLATION: f64 = 1.01;

const KAPPA_CAP: f64 = 1.0 - 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error(
        "joint chain is reducible: triple {unreached} is not mutually reachable with {anchor} \
         (communicating class of {anchor} has {class_size} of {n_triples} triples)"
    )]
    Reducible {
        anchor: Triple,
        unreached: Triple,
        class_size: usize,
        n_triples: usize,
    },
    #[error("joint chain is periodic with period {period}")]
    Periodic { period: usize },
    #[error("state-action pair (s={state}, a={action}) is never visited under the behavior policy")]
    Unexplored { state: usize, action: usize },
    #[error("stationary distribution failed: {0}")]
    Stationary(String),
    #[error("mixing time exceeds cap {cap}; worst-case TV at the cap is {tv:e}")]
    MixingCap { cap: usize, tv: f64 },
    #[error("threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("geometric envelope failed: {0}")]
    Envelope(String),
}

/// One joint-chain state `(s, a, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub s: usize,
    pub a: usize,
    pub next: usize,
}

impl std::fmt::Display for Triple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.s, self.a, self.next)
    }
}

/// Geometric mixing envelope `max_i TV(P̃^t(i,·), μ̃) ≤ c₀ κ^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingConstants {
    pub c0: f64,
    pub kappa: f64,
    /// Second-largest eigenvalue modulus before inflation.
    pub slem: f64,
    /// Largest `t` at which the envelope was checked.
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct JointChain {
    n_states: usize,
    n_actions: usize,
    triples: Vec<Triple>,
    /// Flat `(s * A + a) * S + s'` → triple index.
    lookup: Vec<Option<usize>>,
    kernel: DMatrix<f64>,
    stationary: Vec<f64>,
    visitation: Vec<f64>,
    rho: f64,
    mixing: MixingConstants,
}

impl JointChain {
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn index_of(&self, t: Triple) -> Option<usize> {
        self.lookup[(t.s * self.n_actions + t.a) * self.n_states + t.next]
    }

    /// Row-stochastic transition matrix over triples.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Diagonal of `D`: `p(s,a) = Σ_{s'} μ̃(s,a,s')`, flattened by pair.
    pub fn visitation(&self) -> &[f64] {
        &self.visitation
    }

    pub fn visitation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.visitation))
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn mixing_constants(&self) -> MixingConstants {
        self.mixing
    }

    /// Stationary law of `s_k` (the behavior policy's state distribution).
    pub fn state_marginal(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.n_states];
        for (t, p) in self.triples.iter().zip(&self.stationary) {
            mu[t.s] += p;
        }
        mu
    }

    /// Worst-case total variation `max_i TV(P̃^t(i,·), μ̃)` for `t = 0..=horizon`.
    pub fn tv_profile(&self, horizon: usize) -> Vec<f64> {
        tv_profile(&self.kernel, &self.stationary, horizon)
    }
}

/// Builds the joint chain and validates it. Mixing constants use
/// [`ENVELOPE_HORIZON`].
pub fn build_joint_chain(m: &MdpModel) -> Result<JointChain, ChainError> {
    let (ns, na) = (m.n_states(), m.n_actions());
    for s in 0..ns {
        for a in 0..na {
            if m.behavior_row(s)[a] == 0.0 {
                return Err(ChainError::Unexplored {
                    state: s,
                    action: a,
                });
            }
        }
    }

    let mut triples = Vec::new();
    let mut lookup = vec![None; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            for (next, p) in m.transition_row(s, a).iter().enumerate() {
                if *p > 0.0 {
                    lookup[(s * na + a) * ns + next] = Some(triples.len());
                    triples.push(Triple { s, a, next });
                }
            }
        }
    }

    let n = triples.len();
    let mut kernel = DMatrix::zeros(n, n);
    for (i, t) in triples.iter().enumerate() {
        let u = t.next;
        for b in 0..na {
            let pb = m.behavior_row(u)[b];
            for (u2, p) in m.transition_row(u, b).iter().enumerate() {
                if *p > 0.0 {
                    let j = lookup[(u * na + b) * ns + u2].expect("reachable triple");
                    kernel[(i, j)] += pb * p;
                }
            }
        }
    }

    validate_support(&kernel, &triples)?;
    let stationary = stationary_distribution(&kernel)?;

    let mut visitation = vec![0.0; ns * na];
    for (t, p) in triples.iter().zip(&stationary) {
        visitation[t.s * na + t.a] += p;
    }
    let rho = visitation.iter().copied().fold(f64::INFINITY, f64::min);
    if let Some(i) = visitation.iter().position(|p| *p <= 0.0) {
        return Err(ChainError::Unexplored {
            state: i / na,
            action: i % na,
        });
    }

    let mixing = geometric_mixing_constants(&kernel, &stationary, ENVELOPE_HORIZON)?;
    Ok(JointChain {
        n_states: ns,
        n_actions: na,
        triples,
        lookup,
        kernel,
        stationary,
        visitation,
        rho,
        mixing,
    })
}

fn successors(kernel: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..kernel.nrows())
        .map(|i| (0..kernel.ncols()).filter(|&j| kernel[(i, j)] > 0.0).collect())
        .collect()
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].expect("queued nodes have levels");
        for &v in &adj[u] {
            if level[v].is_none() {
                level[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Strong connectivity of the support graph plus aperiodicity via the gcd of
/// `level(u) + 1 - level(v)` over all edges of a BFS from triple 0.
fn validate_support(kernel: &DMatrix<f64>, triples: &[Triple]) -> Result<(), ChainError> {
    let adj = successors(kernel);
    let mut rev = vec![Vec::new(); adj.len()];
    for (u, vs) in adj.iter().enumerate() {
        for &v in vs {
            rev[v].push(u);
        }
    }
    let fwd = bfs_levels(&adj, 0);
    let bwd = bfs_levels(&rev, 0);
    let in_class = |i: usize| fwd[i].is_some() && bwd[i].is_some();
    if let Some(bad) = (0..adj.len()).find(|&i| !in_class(i)) {
        return Err(ChainError::Reducible {
            anchor: triples[0],
            unreached: triples[bad],
            class_size: (0..adj.len()).filter(|&i| in_class(i)).count(),
            n_triples: adj.len(),
        });
    }
    let mut period = 0;
    for (u, vs) in adj.iter().enumerate() {
        let lu = fwd[u].expect("strongly connected");
        for &v in vs {
            let lv = fwd[v].expect("strongly connected");
            period = gcd(period, (lu + 1).abs_diff(lv));
        }
    }
    if period != 1 {
        return Err(ChainError::Periodic { period });
    }
    Ok(())
}

/// Solves `μ(P - I) = 0`, `Σμ = 1` directly; falls back to power iteration
/// when the direct residual is above [`STATIONARY_RESIDUAL_TOL`].
pub fn stationary_distribution(kernel: &DMatrix<f64>) -> Result<Vec<f64>, ChainError> {
    let n = kernel.nrows();
    let mut system = kernel.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        system[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    if let Some(mu) = linalg::solve_vec(&system, &rhs) {
        let mu: Vec<f64> = mu.iter().copied().collect();
        if stationary_residual(kernel, &mu) <= STATIONARY_RESIDUAL_TOL
            && mu.iter().all(|p| *p >= -1e-15)
        {
            return Ok(mu.into_iter().map(|p| p.max(0.0)).collect());
        }
    }
    power_iteration(kernel)
}

fn power_iteration(kernel: &DMatrix<f64>) -> Result<Vec<f64>, ChainError> {
    let n = kernel.nrows();
    // Lazy chain (P + I)/2 has the same stationary law and is aperiodic.
    let lazy = (kernel + DMatrix::identity(n, n)) * 0.5;
    let mut mu = DVector::from_element(n, 1.0 / n as f64).transpose();
    for _ in 0..1_000_000 {
        let next = &mu * &lazy;
        let delta: f64 = (&next - &mu).iter().map(|x| x.abs()).sum();
        mu = next;
        if delta <= 1e-15 {
            let total = mu.sum();
            let out: Vec<f64> = mu.iter().map(|p| p / total).collect();
            let res = stationary_residual(kernel, &out);
            if res <= STATIONARY_RESIDUAL_TOL {
                return Ok(out);
            }
            return Err(ChainError::Stationary(format!(
                "direct solve and power iteration both failed (residual {res:e})"
            )));
        }
    }
    Err(ChainError::Stationary("power iteration did not settle".into()))
}

/// `‖μP - μ‖₁`.
pub fn stationary_residual(kernel: &DMatrix<f64>, mu: &[f64]) -> f64 {
    let row = DVector::from_column_slice(mu).transpose();
    (&row * kernel - &row).iter().map(|x| x.abs()).sum()
}

pub fn tv_profile(kernel: &DMatrix<f64>, mu: &[f64], horizon: usize) -> Vec<f64> {
    let n = kernel.nrows();
    let mut power = DMatrix::identity(n, n);
    let mut out = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        if t > 0 {
            power = &power * kernel;
        }
        out.push(worst_tv(&power, mu));
    }
    out
}

fn worst_tv(power: &DMatrix<f64>, mu: &[f64]) -> f64 {
    power
        .row_iter()
        .map(|row| 0.5 * row.iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest `t ≥ 0` with `max_i TV(P̃^t(i,·), μ̃) ≤ threshold`.
pub fn mixing_time(chain: &JointChain, threshold: f64) -> Result<usize, ChainError> {
    mixing_time_with_cap(chain.kernel(), chain.stationary(), threshold, MIXING_CAP)
}

pub fn mixing_time_with_cap(
    kernel: &DMatrix<f64>,
    mu: &[f64],
    threshold: f64,
    cap: usize,
) -> Result<usize, ChainError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ChainError::Threshold(threshold));
    }
    let n = kernel.nrows();
    let mut power = DMatrix::identity(n, n);
    let mut tv = worst_tv(&power, mu);
    for t in 0..=cap {
        if tv <= threshold {
            return Ok(t);
        }
        if t < cap {
            power = &power * kernel;
            tv = worst_tv(&power, mu);
        }
    }
    Err(ChainError::MixingCap { cap, tv })
}

/// Second-largest eigenvalue modulus: drop the eigenvalue closest to 1, take
/// the largest modulus of the rest.
pub fn slem(kernel: &DMatrix<f64>) -> f64 {
    if kernel.nrows() == 1 {
        return 0.0;
    }
    let eig = kernel.complex_eigenvalues();
    let perron = eig
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1 - nalgebra::Complex::new(1.0, 0.0)).norm();
            let db = (b.1 - nalgebra::Complex::new(1.0, 0.0)).norm();
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .expect("nonempty spectrum");
    eig.iter()
        .enumerate()
        .filter(|(i, _)| *i != perron)
        .map(|(_, z)| z.norm())
        .fold(0.0, f64::max)
}

/// `κ = min(1.01·SLEM, 1 - 1e-9)` floored at [`KAPPA_FLOOR`];
/// `c₀ = max_{t ≤ horizon} TV_max(t)/κ^t` over non-round-off TV values, then
/// re-checked at every probed `t`.
pub fn geometric_mixing_constants(
    kernel: &DMatrix<f64>,
    mu: &[f64],
    horizon: usize,
) -> Result<MixingConstants, ChainError> {
    assert!(horizon >= 2, "envelope horizon must be at least 2");
    let slem = slem(kernel);
    let kappa = (slem * KAPPA_INFLATION).clamp(KAPPA_FLOOR, KAPPA_CAP);
    if kappa >= 1.0 {
        return Err(ChainError::Envelope(format!("κ = {kappa} is not below 1")));
    }
    let profile = tv_profile(kernel, mu, horizon);
    let mut c0 = profile[0];
    for (t, tv) in profile.iter().enumerate().skip(1) {
        if *tv > TV_FLOOR {
            c0 = c0.max(tv / kappa.powi(t as i32));
        }
    }
    if c0 <= 0.0 {
        c0 = 1.0;
    }
    for (t, tv) in profile.iter().enumerate() {
        let bound = c0 * kappa.powi(t as i32);
        if *tv > bound + TV_FLOOR || !bound.is_finite() {
            return Err(ChainError::Envelope(format!(
                "TV {tv:e} exceeds c0·κ^t = {bound:e} at t = {t}"
            )));
        }
    }
    Ok(MixingConstants {
        c0,
        kappa,
        slem,
        horizon,
    })
}

/// Structured chain-analysis summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub n_triples: usize,
    pub rho: f64,
    pub visitation: Vec<f64>,
    pub stationary_residual: f64,
    pub c0: f64,
    pub kappa: f64,
    pub slem: f64,
    pub envelope_horizon: usize,
    pub mixing_times: Vec<MixingTimeRow>,
    pub irreducible_aperiodic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingTimeRow {
    pub threshold: f64,
    pub mixing_time: usize,
}

/// Default threshold grid for the mixing-time table.
pub const THRESHOLD_GRID: [f64; 6] = [0.5, 0.25, 0.1, 1e-2, 1e-3, 1e-4];

pub fn chain_report(chain: &JointChain) -> Result<ChainReport, ChainError> {
    let mixing_times = THRESHOLD_GRID
        .iter()
        .map(|&threshold| {
            mixing_time(chain, threshold).map(|mixing_time| MixingTimeRow {
                threshold,
                mixing_time,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mc = chain.mixing_constants();
    Ok(ChainReport {
        n_triples: chain.len(),
        rho: chain.rho(),
        visitation: chain.visitation().to_vec(),
        stationary_residual: stationary_residual(chain.kernel(), chain.stationary()),
        c0: mc.c0,
        kappa: mc.kappa,
        slem: mc.slem,
        envelope_horizon: mc.horizon,
        mixing_times,
        irreducible_aperiodic: "pass".into(),
    })
}
