//! Closed-form limiting objects: `F̄`, `A`, the Poisson solution `X`, the
//! martingale noise covariance `Σ`, the limit covariance `A⁻¹ΣA⁻ᵀ` and its
//! square root, and the `Ψ_i^K` diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{JointChain, Triple};
use crate::engine::{InitialState, Sampler, StepsizeSchedule};
use crate::linalg;
use crate::mdp::{self, MdpError, MdpModel, PolicyMatrix, QTable};
use crate::rng::{self, Purpose};

pub const FBAR_TOL: f64 = 1e-12;
pub const POISSON_TOL: f64 = 1e-10;
pub const PSD_FLOOR: f64 = -1e-10;
pub const ASYMMETRY_TOL: f64 = 1e-12;
pub const SQRT_TOL: f64 = 1e-8;
/// `∞`-norm condition number beyond which `A` is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e13;
/// Value-iteration tolerance for `Q*`.
pub const Q_STAR_TOL: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("F̄ matrix form and definitional sum disagree by {gap:e}")]
    FBarMismatch { gap: f64 },
    #[error(
        "Poisson residual {plus:e} (+ sign) / {minus:e} (- sign) exceeds {POISSON_TOL:e}; condition {condition:e}"
    )]
    Poisson { plus: f64, minus: f64, condition: f64 },
    #[error("Σ asymmetry {asymmetry:e} before symmetrization")]
    Asymmetric { asymmetry: f64 },
    #[error("{what} has eigenvalue {eigenvalue:e} below {PSD_FLOOR:e}")]
    NotPsd { what: &'static str, eigenvalue: f64 },
    #[error("A is numerically singular (condition {condition:e}; ρ(1-γ) = {scale:e})")]
    Singular { condition: f64, scale: f64 },
    #[error("‖A⁻¹‖∞ = {norm} exceeds 1/((1-γ)ρ) = {bound}")]
    InverseBound { norm: f64, bound: f64 },
    #[error("square root reproduces the covariance only to {error:e}")]
    SqrtMismatch { error: f64 },
    #[error("malformed oracle dump: {0}")]
    Dump(String),
}

/// `F(Q, y)`: `Q` with the visited entry replaced by its TD target.
pub fn f_operator(q: &QTable, y: Triple, m: &MdpModel) -> QTable {
    let mut out = q.clone();
    out.set(y.s, y.a, m.reward(y.s, y.a) + m.discount() * q.state_value(y.next));
    out
}

/// `D𝒯(Q) + (I - D)Q` for visitation weights `p`.
pub fn f_bar_matrix_form(q: &QTable, p: &[f64], m: &MdpModel) -> QTable {
    let t = mdp::bellman_apply(q, m);
    let values = q
        .as_slice()
        .iter()
        .zip(t.as_slice())
        .zip(p)
        .map(|((qi, ti), pi)| pi * ti + (1.0 - pi) * qi)
        .collect();
    QTable::from_vec(q.n_states(), q.n_actions(), values)
}

/// `Σ_y μ̃(y) F(Q, y)` summed over every reachable triple.
pub fn f_bar_definitional(q: &QTable, chain: &JointChain, m: &MdpModel) -> QTable {
    let mut acc = vec![0.0; q.as_slice().len()];
    for (y, w) in chain.triples().iter().zip(chain.stationary()) {
        let f = f_operator(q, *y, m);
        for (a, v) in acc.iter_mut().zip(f.as_slice()) {
            *a += w * v;
        }
    }
    QTable::from_vec(q.n_states(), q.n_actions(), acc)
}

/// `F̄(Q)`, cross-checked against the definitional sum.
pub fn f_bar(q: &QTable, chain: &JointChain, m: &MdpModel) -> Result<QTable, OracleError> {
    let matrix = f_bar_matrix_form(q, chain.visitation(), m);
    let direct = f_bar_definitional(q, chain, m);
    let gap = matrix.sup_distance(&direct);
    if gap > FBAR_TOL * q.sup_norm().max(1.0) {
        return Err(OracleError::FBarMismatch { gap });
    }
    Ok(matrix)
}

/// `A = D - γ D P^{π*}`.
pub fn a_matrix(m: &MdpModel, visitation: &[f64], pi_star: &PolicyMatrix) -> DMatrix<f64> {
    let p = pi_star.induced_kernel(m);
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(visitation));
    &d - (&d * p) * m.discount()
}

/// Sign of the rank-one term in the fundamental matrix `(I - P̃ ± 1μ̃ᵀ)⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FundamentalSign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    /// Row `i` is `X(i)` for triple `i`.
    pub x: DMatrix<f64>,
    pub sign: FundamentalSign,
    pub residual: f64,
    pub residual_plus: f64,
    pub residual_minus: f64,
    /// `∞`-norm condition number of `I - P̃ + 1μ̃ᵀ`.
    pub condition: f64,
}

/// `(I - P̃ ± 1μ̃ᵀ)`.
pub fn fundamental_system(chain: &JointChain, sign: FundamentalSign) -> DMatrix<f64> {
    let n = chain.len();
    let mu = chain.stationary();
    let s = match sign {
        FundamentalSign::Plus => 1.0,
        FundamentalSign::Minus => -1.0,
    };
    DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - chain.kernel()[(i, j)] + s * mu[j]
    })
}

/// Rows `F(Q, j) - F̄(Q)` over the chain's triples.
pub fn centered_noise(q: &QTable, fbar: &QTable, chain: &JointChain, m: &MdpModel) -> DMatrix<f64> {
    let d = q.as_slice().len();
    let mut g = DMatrix::zeros(chain.len(), d);
    for (j, y) in chain.triples().iter().enumerate() {
        let f = f_operator(q, *y, m);
        for c in 0..d {
            g[(j, c)] = f.as_slice()[c] - fbar.as_slice()[c];
        }
    }
    g
}

/// `max_{i,c} |G(i,c) - (X(i,c) - (P̃X)(i,c))|`.
pub fn poisson_residual(chain: &JointChain, g: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let px = chain.kernel() * x;
    (g - (x - px)).amax()
}

/// Solves `F(Q*, i) - F̄(Q*) = X(i) - E[X(Y₁) | Y₀ = i]` with both sign
/// conventions and keeps the smaller residual, preferring `+` on ties.
pub fn poisson_solution(
    chain: &JointChain,
    q_star: &QTable,
    fbar_star: &QTable,
    m: &MdpModel,
) -> Result<PoissonSolution, OracleError> {
    let g = centered_noise(q_star, fbar_star, chain, m);
    let attempt = |sign| {
        let sys = fundamental_system(chain, sign);
        linalg::solve(&sys, &g).map(|x| {
            let r = poisson_residual(chain, &g, &x);
            (x, r)
        })
    };
    let plus = attempt(FundamentalSign::Plus);
    let minus = attempt(FundamentalSign::Minus);
    let condition = linalg::condition_inf(&fundamental_system(chain, FundamentalSign::Plus));
    let rp = plus.as_ref().map_or(f64::INFINITY, |p| p.1);
    let rm = minus.as_ref().map_or(f64::INFINITY, |p| p.1);
    let scale = g.amax().max(1.0);
    let (x, sign, residual) = match (plus, minus) {
        (Some((x, r)), _) if r <= rm => (x, FundamentalSign::Plus, r),
        (_, Some((x, r))) => (x, FundamentalSign::Minus, r),
        (Some((x, r)), None) => (x, FundamentalSign::Plus, r),
        (None, None) => {
            return Err(OracleError::Poisson {
                plus: rp,
                minus: rm,
                condition,
            })
        }
    };
    if !(residual <= POISSON_TOL * scale) {
        return Err(OracleError::Poisson {
            plus: rp,
            minus: rm,
            condition,
        });
    }
    Ok(PoissonSolution {
        x,
        sign,
        residual,
        residual_plus: rp,
        residual_minus: rm,
        condition,
    })
}

/// `Σ = Σ_{i,j} μ̃(i) P̃(i,j) (X(j) - (P̃X)(i)) (X(j) - (P̃X)(i))ᵀ`, symmetrized
/// and checked to be PSD.
pub fn noise_covariance(chain: &JointChain, x: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    let d = x.ncols();
    let px = chain.kernel() * x;
    let mut sigma = DMatrix::zeros(d, d);
    let mu = chain.stationary();
    for i in 0..chain.len() {
        for j in 0..chain.len() {
            let w = mu[i] * chain.kernel()[(i, j)];
            if w == 0.0 {
                continue;
            }
            let v = (x.row(j) - px.row(i)).transpose();
            sigma += (&v * v.transpose()) * w;
        }
    }
    let asymmetry = linalg::asymmetry(&sigma);
    if asymmetry > ASYMMETRY_TOL * sigma.amax().max(1.0) {
        return Err(OracleError::Asymmetric { asymmetry });
    }
    let sigma = linalg::symmetrize(&sigma);
    if d > 0 {
        let min = linalg::min_eigenvalue(&sigma);
        if min < PSD_FLOOR {
            return Err(OracleError::NotPsd {
                what: "Σ",
                eigenvalue: min,
            });
        }
    }
    Ok(sigma)
}

/// `(A⁻¹ΣA⁻ᵀ, (A⁻¹ΣA⁻ᵀ)^{1/2})` via two LU solves and a symmetric
/// eigendecomposition.
pub fn limit_law(
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    scale: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), OracleError> {
    let condition = linalg::condition_inf(a);
    let singular = OracleError::Singular { condition, scale };
    if !(condition < SINGULAR_CONDITION) {
        return Err(singular);
    }
    let left = linalg::solve(a, sigma).ok_or(OracleError::Singular { condition, scale })?;
    let cov = linalg::solve(a, &left.transpose()).ok_or(singular)?;
    let cov = linalg::symmetrize(&cov);
    let root = linalg::psd_sqrt(&cov, -PSD_FLOOR).map_err(|e| OracleError::NotPsd {
        what: "limit covariance",
        eigenvalue: e,
    })?;
    let error = linalg::frobenius_rel(&(&root * root.transpose()), &cov);
    let tol = if cov.norm() == 0.0 { 1e-300 } else { SQRT_TOL };
    if error > tol {
        return Err(OracleError::SqrtMismatch { error });
    }
    Ok((cov, root))
}

/// Every limiting object for one model and its joint chain.
#[derive(Debug, Clone)]
pub struct TheoryOracle {
    pub q_star: QTable,
    pub pi_star: PolicyMatrix,
    pub pi_star_actions: Vec<usize>,
    pub visitation: Vec<f64>,
    pub rho: f64,
    pub discount: f64,
    pub a_matrix: DMatrix<f64>,
    pub a_inv_norm: f64,
    pub a_inv_bound: f64,
    pub a_condition: f64,
    pub poisson: PoissonSolution,
    pub sigma: DMatrix<f64>,
    pub limit_cov: DMatrix<f64>,
    pub limit_sqrt: DMatrix<f64>,
    /// `‖X‖∞ (1-γ)(1-κ)`, reported only.
    pub x_bound_ratio: f64,
}

impl TheoryOracle {
    pub fn build(m: &MdpModel, chain: &JointChain) -> Result<Self, OracleError> {
        let (q_star, pi_star) = mdp::solve_q_star(m, Q_STAR_TOL)?;
        let pi_star_actions = pi_star.actions().expect("greedy policy is deterministic");
        let visitation = chain.visitation().to_vec();
        let rho = chain.rho();
        let gamma = m.discount();

        let fbar_star = f_bar(&q_star, chain, m)?;
        let a = a_matrix(m, &visitation, &pi_star);
        let scale = rho * (1.0 - gamma);
        let a_condition = linalg::condition_inf(&a);
        if !(a_condition < SINGULAR_CONDITION) {
            return Err(OracleError::Singular {
                condition: a_condition,
                scale,
            });
        }
        let a_inv = linalg::solve(&a, &DMatrix::identity(a.nrows(), a.ncols())).ok_or(
            OracleError::Singular {
                condition: a_condition,
                scale,
            },
        )?;
        let a_inv_norm = linalg::inf_norm(&a_inv);
        let a_inv_bound = 1.0 / scale;
        if a_inv_norm > a_inv_bound * (1.0 + 1e-9) {
            return Err(OracleError::InverseBound {
                norm: a_inv_norm,
                bound: a_inv_bound,
            });
        }

        let poisson = poisson_solution(chain, &q_star, &fbar_star, m)?;
        let sigma = noise_covariance(chain, &poisson.x)?;
        let (limit_cov, limit_sqrt) = limit_law(&a, &sigma, scale)?;
        let kappa = chain.mixing_constants().kappa;
        let x_bound_ratio = poisson.x.amax() * (1.0 - gamma) * (1.0 - kappa);

        Ok(Self {
            q_star,
            pi_star,
            pi_star_actions,
            visitation,
            rho,
            discount: gamma,
            a_matrix: a,
            a_inv_norm,
            a_inv_bound,
            a_condition,
            poisson,
            sigma,
            limit_cov,
            limit_sqrt,
            x_bound_ratio,
        })
    }

    /// Limit law when every observed reward carries independent
    /// `Uniform[-h, h]` noise: the martingale noise gains `(h²/3) D`.
    pub fn with_reward_noise(&self, half_width: f64) -> Result<Self, OracleError> {
        let mut out = self.clone();
        if half_width == 0.0 {
            return Ok(out);
        }
        let var = half_width * half_width / 3.0;
        let extra = DMatrix::from_diagonal(&DVector::from_iterator(
            self.visitation.len(),
            self.visitation.iter().map(|p| p * var),
        ));
        out.sigma = &self.sigma + extra;
        let (cov, root) = limit_law(&self.a_matrix, &out.sigma, self.rho * (1.0 - self.discount))?;
        out.limit_cov = cov;
        out.limit_sqrt = root;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.a_matrix.nrows()
    }

    /// `A⁻¹` (for diagnostics; the limit law never forms it).
    pub fn a_inverse(&self) -> DMatrix<f64> {
        let d = self.dim();
        linalg::solve(&self.a_matrix, &DMatrix::identity(d, d)).expect("A checked invertible")
    }

    /// Poisson solution at an arbitrary `Q` using the stored sign convention.
    pub fn poisson_at(&self, q: &QTable, chain: &JointChain, m: &MdpModel) -> DMatrix<f64> {
        let fbar = f_bar_matrix_form(q, &self.visitation, m);
        let g = centered_noise(q, &fbar, chain, m);
        let sys = fundamental_system(chain, self.poisson.sign);
        linalg::solve(&sys, &g).expect("fundamental matrix checked invertible")
    }

    pub fn dump(&self) -> OracleDump {
        OracleDump {
            n_states: self.q_star.n_states(),
            n_actions: self.q_star.n_actions(),
            discount: self.discount,
            rho: self.rho,
            q_star: self.q_star.as_slice().to_vec(),
            pi_star: self.pi_star_actions.clone(),
            visitation: self.visitation.clone(),
            a: rows(&self.a_matrix),
            a_inv_norm: self.a_inv_norm,
            a_inv_bound: self.a_inv_bound,
            a_condition: self.a_condition,
            poisson_sign: self.poisson.sign,
            poisson_residual: self.poisson.residual,
            poisson_residual_plus: self.poisson.residual_plus,
            poisson_residual_minus: self.poisson.residual_minus,
            fundamental_condition: self.poisson.condition,
            poisson_x: rows(&self.poisson.x),
            sigma: rows(&self.sigma),
            limit_cov: rows(&self.limit_cov),
            limit_sqrt: rows(&self.limit_sqrt),
            x_bound_ratio: self.x_bound_ratio,
        }
    }

    pub fn from_dump(d: &OracleDump) -> Result<Self, OracleError> {
        let n = d.n_states * d.n_actions;
        if d.q_star.len() != n || d.pi_star.len() != d.n_states || d.visitation.len() != n {
            return Err(OracleError::Dump("vector lengths disagree with shape".into()));
        }
        if d.pi_star.iter().any(|a| *a >= d.n_actions) {
            return Err(OracleError::Dump("pi_star action out of range".into()));
        }
        let sq = |r: &[Vec<f64>], name: &str| -> Result<DMatrix<f64>, OracleError> {
            matrix(r, Some(n), n).ok_or_else(|| OracleError::Dump(format!("{name} must be {n}×{n}")))
        };
        let x = matrix(&d.poisson_x, None, n)
            .ok_or_else(|| OracleError::Dump(format!("poisson_x rows must have {n} entries")))?;
        Ok(Self {
            q_star: QTable::from_vec(d.n_states, d.n_actions, d.q_star.clone()),
            pi_star: PolicyMatrix::deterministic(d.n_actions, &d.pi_star),
            pi_star_actions: d.pi_star.clone(),
            visitation: d.visitation.clone(),
            rho: d.rho,
            discount: d.discount,
            a_matrix: sq(&d.a, "a")?,
            a_inv_norm: d.a_inv_norm,
            a_inv_bound: d.a_inv_bound,
            a_condition: d.a_condition,
            poisson: PoissonSolution {
                x,
                sign: d.poisson_sign,
                residual: d.poisson_residual,
                residual_plus: d.poisson_residual_plus,
                residual_minus: d.poisson_residual_minus,
                condition: d.fundamental_condition,
            },
            sigma: sq(&d.sigma, "sigma")?,
            limit_cov: sq(&d.limit_cov, "limit_cov")?,
            limit_sqrt: sq(&d.limit_sqrt, "limit_sqrt")?,
            x_bound_ratio: d.x_bound_ratio,
        })
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(r: &[Vec<f64>], nrows: Option<usize>, ncols: usize) -> Option<DMatrix<f64>> {
    if nrows.is_some_and(|n| n != r.len()) || r.iter().any(|row| row.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(r.len(), ncols, |i, j| r[i][j]))
}

/// Serializable snapshot of a [`TheoryOracle`]; matrices are row lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDump {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub rho: f64,
    pub q_star: Vec<f64>,
    pub pi_star: Vec<usize>,
    pub visitation: Vec<f64>,
    pub a_inv_norm: f64,
    pub a_inv_bound: f64,
    pub a_condition: f64,
    pub poisson_sign: FundamentalSign,
    pub poisson_residual: f64,
    pub poisson_residual_plus: f64,
    pub poisson_residual_minus: f64,
    pub fundamental_condition: f64,
    pub x_bound_ratio: f64,
    pub a: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub limit_cov: Vec<Vec<f64>>,
    pub limit_sqrt: Vec<Vec<f64>>,
    pub poisson_x: Vec<Vec<f64>>,
}

/// One probe of `Ψ_i^K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiRow {
    pub i: usize,
    /// `‖Ψ_i^K - A⁻¹‖∞`.
    pub gap: f64,
    /// `‖Ψ_{i+1}^K - Ψ_i^K‖∞` (0 at `i = K`).
    pub step_difference: f64,
    /// Gap envelope with every hidden constant set to 1.
    pub gap_envelope: f64,
    /// `i^{-β}`, the step-difference envelope with unit constant.
    pub difference_envelope: f64,
}

/// `Ψ_i^K = α_i S_i` with `S_K = 0` and `S_i = I + (I - α_{i+1}A) S_{i+1}`,
/// reported at the requested probes in `[0, K]`.
pub fn psi_diagnostics(
    sched: &StepsizeSchedule,
    a: &DMatrix<f64>,
    horizon: usize,
    probes: &[usize],
    rho: f64,
    gamma: f64,
) -> Vec<PsiRow> {
    let d = a.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let a_inv = linalg::solve(a, &id).expect("A invertible");
    let a_inv_norm = linalg::inf_norm(&a_inv);
    let beta = sched.beta().unwrap_or(0.0);
    let c = rho * (1.0 - gamma);
    let alpha_k = sched.at(horizon);
    let envelope = |i: usize| {
        if i == 0 {
            return f64::INFINITY;
        }
        let i_f = i as f64;
        let first = if beta < 1.0 {
            1.0 / (i_f * c.powf((2.0 - beta) / (1.0 - beta)))
        } else {
            f64::INFINITY
        };
        let second = (i_f - 1.0).powf(beta) / (i_f * rho * rho * (1.0 - gamma).powi(2));
        let third = (1.0 - c * alpha_k).max(0.0).powf((horizon - i + 1) as f64) / c;
        first + second + third
    };

    let mut wanted: Vec<usize> = probes.iter().copied().filter(|p| *p <= horizon).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let mut out = Vec::with_capacity(wanted.len());
    let mut s = DMatrix::<f64>::zeros(d, d);
    let mut psi_next = DMatrix::<f64>::zeros(d, d);
    let mut have_next = false;
    for i in (0..=horizon).rev() {
        if i < horizon {
            s = &id + (&id - a * sched.at(i + 1)) * &s;
        }
        let psi = &s * sched.at(i);
        if wanted.binary_search(&i).is_ok() {
            let gap = linalg::inf_norm(&(&psi - &a_inv));
            let step_difference = if have_next {
                linalg::inf_norm(&(&psi_next - &psi))
            } else {
                0.0
            };
            out.push(PsiRow {
                i,
                gap: if i == horizon { a_inv_norm } else { gap },
                step_difference,
                gap_envelope: envelope(i),
                difference_envelope: if i == 0 { f64::INFINITY } else { (i as f64).powf(-beta) },
            });
        }
        psi_next = psi;
        have_next = true;
    }
    out.reverse();
    out
}

/// Empirical martingale-difference checks along a stationary trajectory of
/// `M_k = X(Y_{k+1}) - E[X(Y_{k+1}) | Y_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsReport {
    pub steps: usize,
    pub mean_sup: f64,
    /// `5 σ_max / √n`.
    pub mean_bound: f64,
    pub lag1_frobenius: f64,
    pub sigma_frobenius: f64,
    /// `‖Σ̂‖ - Σ` relative Frobenius distance of the time-averaged `M_k M_kᵀ`.
    pub sigma_rel_error: f64,
}

impl MdsReport {
    pub fn mean_ok(&self) -> bool {
        self.mean_sup <= self.mean_bound
    }

    pub fn lag1_ok(&self) -> bool {
        self.lag1_frobenius <= 0.02 * self.sigma_frobenius
    }
}

/// Walks `n` steps of the joint chain from stationarity and accumulates
/// mean, lag-1 autocovariance and second moment of `M_k`.
pub fn mds_diagnostics(
    oracle: &TheoryOracle,
    chain: &JointChain,
    m: &MdpModel,
    n: usize,
    seed: u64,
) -> MdsReport {
    let d = oracle.dim();
    let x = &oracle.poisson.x;
    let px = chain.kernel() * x;
    let sampler = Sampler::new(m);
    let mut rng = rng::stream(seed, Purpose::Trajectory, u64::MAX);
    let mut s = sampler.initial_state(InitialState::Stationary, chain, &mut rng);
    let mut draw = |s: &mut usize| {
        let (a, next) = sampler.step(*s, &mut rng);
        let y = Triple { s: *s, a, next };
        *s = next;
        chain.index_of(y).expect("sampled triple is reachable")
    };

    let mut prev_idx = draw(&mut s);
    let mut sum = DVector::<f64>::zeros(d);
    let mut second = DMatrix::<f64>::zeros(d, d);
    let mut lag = DMatrix::<f64>::zeros(d, d);
    let mut prev_m: Option<DVector<f64>> = None;
    for _ in 0..n {
        let idx = draw(&mut s);
        let mk = (x.row(idx) - px.row(prev_idx)).transpose();
        sum += &mk;
        second.ger(1.0, &mk, &mk, 1.0);
        if let Some(p) = &prev_m {
            lag.ger(1.0, p, &mk, 1.0);
        }
        prev_m = Some(mk);
        prev_idx = idx;
    }
    let nf = n as f64;
    let mean = &sum / nf;
    // Lag-1 autocovariance around the sample mean.
    let lag = lag / (nf - 1.0) - &mean * mean.transpose();
    let second = linalg::symmetrize(&(second / nf));
    let sigma_max = (0..d).map(|i| oracle.sigma[(i, i)]).fold(0.0, f64::max).sqrt();
    MdsReport {
        steps: n,
        mean_sup: mean.amax(),
        mean_bound: 5.0 * sigma_max / nf.sqrt(),
        lag1_frobenius: lag.norm(),
        sigma_frobenius: oracle.sigma.norm(),
        sigma_rel_error: linalg::frobenius_rel(&second, &oracle.sigma),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_joint_chain;
    use approx::assert_abs_diff_eq;

    fn two_by_two() -> MdpModel {
        MdpModel::new(
            2,
            2,
            vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1],
            vec![0.1, 0.9, 0.4, 0.3],
            0.8,
            vec![0.5, 0.5, 0.3, 0.7],
        )
        .unwrap()
    }

    #[test]
    fn f_operator_touches_only_visited_pair() {
        let m = two_by_two();
        let q = QTable::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let f = f_operator(&q, Triple { s: 0, a: 1, next: 1 }, &m);
        assert_eq!(f.as_slice(), &[1.0, 0.9 + 0.8 * 4.0, 3.0, 4.0]);
    }

    #[test]
    fn f_bar_fixed_point_at_q_star() {
        let m = two_by_two();
        let chain = build_joint_chain(&m).unwrap();
        let (q, _) = mdp::solve_q_star(&m, 1e-14).unwrap();
        let fb = f_bar(&q, &chain, &m).unwrap();
        assert!(fb.sup_distance(&q) < 1e-12);
    }

    #[test]
    fn scalar_limit_law() {
        // |S| = |A| = 1: A = [1-γ], limit = σ²/(1-γ)².
        let a = DMatrix::from_element(1, 1, 0.25);
        let sigma = DMatrix::from_element(1, 1, 0.5);
        let (cov, root) = limit_law(&a, &sigma, 0.25).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(root[(0, 0)], 8.0_f64.sqrt(), epsilon = 1e-12);
        let (cov, root) = limit_law(&a, &DMatrix::zeros(1, 1), 0.25).unwrap();
        assert_eq!(cov[(0, 0)], 0.0);
        assert_eq!(root[(0, 0)], 0.0);
    }

    #[test]
    fn constant_poisson_input_gives_zero() {
        // Zero rewards: Q* = 0 and F(Q*, ·) ≡ 0.
        let m = MdpModel::new(
            2,
            2,
            vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1],
            vec![0.0; 4],
            0.8,
            vec![0.5; 4],
        )
        .unwrap();
        let chain = build_joint_chain(&m).unwrap();
        let o = TheoryOracle::build(&m, &chain).unwrap();
        assert_eq!(o.poisson.x.amax(), 0.0);
        assert_eq!(o.sigma.amax(), 0.0);
        assert_eq!(o.limit_cov.amax(), 0.0);
    }

    #[test]
    fn single_state_oracle() {
        let m = MdpModel::new(1, 1, vec![1.0], vec![1.0], 0.5, vec![1.0]).unwrap();
        let chain = build_joint_chain(&m).unwrap();
        let o = TheoryOracle::build(&m, &chain).unwrap();
        assert_eq!(o.rho, 1.0);
        assert_abs_diff_eq!(o.a_matrix[(0, 0)], 0.5, epsilon = 1e-15);
        // Deterministic reward and a single triple: no noise at all.
        assert!(o.sigma.amax() < 1e-20);
    }

    #[test]
    fn both_signs_solve_centered_poisson_equation() {
        let m = two_by_two();
        let chain = build_joint_chain(&m).unwrap();
        let o = TheoryOracle::build(&m, &chain).unwrap();
        assert!(o.poisson.residual_plus < 1e-12);
        assert!(o.poisson.residual_minus < 1e-12);
        assert_eq!(o.poisson.sign, FundamentalSign::Plus);
    }

    #[test]
    fn psi_boundary_and_geometric_series() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let s = StepsizeSchedule::constant(0.1).unwrap();
        let rows = psi_diagnostics(&s, &a, 10_000, &[0, 5000, 9990, 10_000], 1.0, 0.0);
        assert_eq!(rows[3].i, 10_000);
        assert_eq!(rows[3].gap, 1.0);
        for r in &rows[..3] {
            let bound = 0.9_f64.powi((10_000 - r.i) as i32);
            assert!(r.gap <= bound * (1.0 + 1e-9) + 1e-12, "i={} gap={} bound={bound}", r.i, r.gap);
        }
        assert!(rows[0].gap < 1e-12);
    }

    #[test]
    fn dump_round_trips() {
        let m = two_by_two();
        let chain = build_joint_chain(&m).unwrap();
        let o = TheoryOracle::build(&m, &chain).unwrap();
        let d = o.dump();
        let back = TheoryOracle::from_dump(&d).unwrap();
        assert_eq!(back.dump(), d);
    }
}
