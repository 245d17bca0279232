//! Replicated experiments: endpoint samples, projected Wasserstein distances,
//! rate fits, FCLT increments and the error-term diagnostics of a single
//! instrumented run.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::chain::{self, build_joint_chain, ChainError, JointChain};
use crate::engine::{
    self, EngineError, InitialState, RunConfig, RunRecord, SandwichState, StepsizeSchedule,
};
use crate::linalg;
use crate::mdp::MdpModel;
use crate::oracle::{self, OracleError, TheoryOracle};
use crate::rng::{self, Purpose};
use crate::stats;

/// Minimum replica count for any asserted statistic.
pub const MIN_REPLICAS: usize = 100;
/// Random probe directions added to the coordinate axes.
pub const RANDOM_DIRECTIONS: usize = 32;
/// Reference Brownian paths for running-maximum laws.
pub const BROWNIAN_PATHS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Config(String),
}

/// A model together with everything derived from it, shared read-only by all
/// replicas.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: MdpModel,
    pub chain: JointChain,
    pub oracle: TheoryOracle,
    pub schedule: StepsizeSchedule,
    pub initial_state: InitialState,
    pub reward_noise: f64,
    /// Track the sandwich sequences in every replica (aborts on violation).
    pub track_sandwich: bool,
    /// Worker threads for replicas; results never depend on it.
    pub parallelism: usize,
}

impl Experiment {
    pub fn new(model: MdpModel, schedule: StepsizeSchedule) -> Result<Self, HarnessError> {
        schedule.validate()?;
        let chain = build_joint_chain(&model)?;
        let oracle = TheoryOracle::build(&model, &chain)?;
        Ok(Self {
            model,
            chain,
            oracle,
            schedule,
            initial_state: InitialState::Stationary,
            reward_noise: 0.0,
            track_sandwich: false,
            parallelism: default_parallelism(),
        })
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn with_schedule(mut self, schedule: StepsizeSchedule) -> Result<Self, HarnessError> {
        schedule.validate()?;
        self.schedule = schedule;
        Ok(self)
    }

    pub fn with_initial_state(mut self, init: InitialState) -> Self {
        self.initial_state = init;
        self
    }

    pub fn with_sandwich(mut self, on: bool) -> Self {
        self.track_sandwich = on;
        self
    }

    /// Enables `Uniform[-h, h]` reward noise and adjusts the limit law.
    pub fn with_reward_noise(mut self, half_width: f64) -> Result<Self, HarnessError> {
        let base = if self.reward_noise == 0.0 {
            self.oracle.clone()
        } else {
            TheoryOracle::build(&self.model, &self.chain)?
        };
        self.oracle = base.with_reward_noise(half_width)?;
        self.reward_noise = half_width;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.model.n_pairs()
    }

    fn config(&self, horizon: usize) -> RunConfig {
        let mut cfg = RunConfig::new(horizon)
            .with_initial_state(self.initial_state)
            .with_sandwich(self.track_sandwich);
        cfg.reward_noise = self.reward_noise;
        cfg
    }

    pub fn run(&self, cfg: &RunConfig, seed: u64, replica: u64) -> Result<RunRecord, EngineError> {
        engine::run_trajectory(
            &self.model,
            &self.chain,
            &self.oracle,
            &self.schedule,
            cfg,
            seed,
            replica,
        )
    }

    /// Runs replicas `first..first + count` concurrently; the output is in
    /// replica order regardless of scheduling.
    pub fn replicate(
        &self,
        cfg: &RunConfig,
        count: usize,
        seed: u64,
        first: u64,
    ) -> Result<Vec<RunRecord>, HarnessError> {
        let alphas = self.schedule.table(cfg.horizon);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        let out: Result<Vec<_>, EngineError> = pool.install(|| {
            (0..count as u64)
                .into_par_iter()
                .map(|i| {
                    engine::run_trajectory_with_steps(
                        &self.model,
                        &self.chain,
                        &self.oracle,
                        &alphas,
                        cfg,
                        seed,
                        first + i,
                    )
                })
                .collect()
        });
        Ok(out?)
    }

    /// `R × d` matrix of endpoints `K^{-1/2} Σ_{k=1}^K Δ_k`.
    pub fn replicate_endpoint(
        &self,
        horizon: usize,
        replicas: usize,
        seed: u64,
        first: u64,
    ) -> Result<DMatrix<f64>, HarnessError> {
        if replicas < 2 {
            return Err(HarnessError::Config("at least 2 replicas are required".into()));
        }
        let recs = self.replicate(&self.config(horizon), replicas, seed, first)?;
        Ok(endpoint_matrix(&recs))
    }
}

pub fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn endpoint_matrix(recs: &[RunRecord]) -> DMatrix<f64> {
    let d = recs.first().map_or(0, |r| r.final_averaged_error.len());
    DMatrix::from_fn(recs.len(), d, |i, j| recs[i].final_averaged_error[j])
}

/// Coordinate axes followed by `n_random` seeded Gaussian directions, all
/// of unit Euclidean norm.
pub fn probe_directions(d: usize, n_random: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = (0..d)
        .map(|i| DVector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 }))
        .collect();
    let mut rng = rng::stream(seed, Purpose::Directions, 0);
    while out.len() < d + n_random {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-8 {
            out.push(v / n);
        }
    }
    out
}

/// Exact `W₁` between the empirical law of `samples` and `N(0, σ²)`,
/// integrating `|F_n - Φ_σ|` piecewise in closed form. With `σ = 0` the
/// reference is the point mass at zero.
pub fn w1_normal(samples: &[f64], sigma: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    if sigma == 0.0 {
        return samples.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let cdf = |x: f64| normal.cdf(x / sigma);
    let pdf = |x: f64| (-0.5 * (x / sigma).powi(2)).exp() / (2.0 * std::f64::consts::PI).sqrt();
    // ∫_{-∞}^x Φ_σ and ∫_x^∞ (1 - Φ_σ).
    let lower = |x: f64| x * cdf(x) + sigma * pdf(x);
    let upper = |x: f64| -x * normal.sf(x / sigma) + sigma * pdf(x);
    // ∫_a^b |c - Φ_σ| for a ≤ b, crossing at σΦ⁻¹(c).
    let segment = |a: f64, b: f64, c: f64| -> f64 {
        let xc = sigma * normal.inverse_cdf(c);
        let piece = |lo: f64, hi: f64| -> f64 {
            if hi <= lo {
                return 0.0;
            }
            // Φ_σ ≤ c below the crossing, ≥ c above.
            if hi <= xc {
                c * (hi - lo) - (lower(hi) - lower(lo))
            } else {
                (lower(hi) - lower(lo)) - c * (hi - lo)
            }
        };
        let mid = xc.clamp(a, b);
        piece(a, mid) + piece(mid, b)
    };
    let mut total = lower(xs[0]) + upper(xs[n - 1]);
    for i in 1..n {
        total += segment(xs[i - 1], xs[i], i as f64 / n as f64);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedW1 {
    /// Maximum over directions; a lower bound on the multivariate `W₁`.
    pub max: f64,
    pub per_direction: Vec<f64>,
    /// `max_u (uᵀ L u)^{1/2}` for normalizing.
    pub max_sd: f64,
}

/// Max over `directions` of the 1-D `W₁` between projected samples and the
/// projected limit Gaussian `N(0, uᵀ L u)` with `L = limit_sqrt²`.
pub fn w1_projected(
    samples: &DMatrix<f64>,
    limit_sqrt: &DMatrix<f64>,
    directions: &[DVector<f64>],
) -> ProjectedW1 {
    let mut per = Vec::with_capacity(directions.len());
    let mut max_sd = 0.0_f64;
    for u in directions {
        let proj: Vec<f64> = (samples * u).iter().copied().collect();
        let sd = (limit_sqrt.transpose() * u).norm();
        max_sd = max_sd.max(sd);
        per.push(w1_normal(&proj, sd));
    }
    ProjectedW1 {
        max: per.iter().copied().fold(0.0, f64::max),
        per_direction: per,
        max_sd,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual of the fit in natural-log units.
    pub residual: f64,
    /// Horizons dropped for nonpositive values.
    pub excluded: Vec<usize>,
}

/// Least-squares fit of `ln w1` against `ln K`.
pub fn rate_fit(values: &[f64], k_grid: &[usize]) -> Result<RateFit, HarnessError> {
    if values.len() != k_grid.len() {
        return Err(HarnessError::Config("values and K grid differ in length".into()));
    }
    let mut excluded = Vec::new();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (v, k) in values.iter().zip(k_grid) {
        if *v > 0.0 && v.is_finite() {
            x.push((*k as f64).ln());
            y.push(v.ln());
        } else {
            excluded.push(*k);
        }
    }
    let span = match (k_grid.iter().min(), k_grid.iter().max()) {
        (Some(lo), Some(hi)) if *lo > 0 => (*hi as f64 / *lo as f64).log10(),
        _ => 0.0,
    };
    if k_grid.len() < 4 || span < 2.0 - 1e-12 {
        return Err(HarnessError::Config(
            "rate fit needs at least 4 horizons spanning 2 decades".into(),
        ));
    }
    if x.len() < 2 {
        return Err(HarnessError::Config("fewer than 2 positive values to fit".into()));
    }
    let (slope, intercept, residual) = stats::linear_fit(&x, &y);
    Ok(RateFit {
        slope,
        intercept,
        residual,
        excluded,
    })
}

/// Per-horizon summary inside a [`CltReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub horizon: usize,
    pub replicas: usize,
    /// Replica stream ids `[first, last]` under the master seed.
    pub replica_range: (u64, u64),
    pub empirical_mean: Vec<f64>,
    pub empirical_cov: Vec<Vec<f64>>,
    pub cov_rel_error: f64,
    pub mean_sup: f64,
    /// `4 max_i L_ii^{1/2} / √R`.
    pub mean_bound: f64,
    pub w1_projected: f64,
    pub w1_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub fixture_id: String,
    pub master_seed: u64,
    pub k_grid: Vec<usize>,
    pub horizons: Vec<HorizonStats>,
    pub w1_fit: Option<RateFit>,
    pub metric: String,
}

/// Endpoint statistics over a horizon grid; replica ids are disjoint across
/// horizons so every entry uses fresh trajectories.
pub fn clt_experiment(
    exp: &Experiment,
    fixture_id: &str,
    k_grid: &[usize],
    replicas: usize,
    seed: u64,
    mut on_samples: impl FnMut(usize, &DMatrix<f64>),
) -> Result<CltReport, HarnessError> {
    if replicas < 2 {
        return Err(HarnessError::Config("replicas must be at least 2".into()));
    }
    exp.schedule.validate_for_clt()?;
    let limit = &exp.oracle.limit_cov;
    let dirs = probe_directions(exp.dim(), RANDOM_DIRECTIONS, seed);
    let max_diag = (0..exp.dim()).map(|i| limit[(i, i)]).fold(0.0, f64::max);
    let mut horizons = Vec::with_capacity(k_grid.len());
    for (slot, &k) in k_grid.iter().enumerate() {
        let first = (slot * replicas) as u64;
        let samples = exp.replicate_endpoint(k, replicas, seed, first)?;
        on_samples(k, &samples);
        let mean = stats::mean(&samples);
        let cov = stats::covariance(&samples);
        let w1 = w1_projected(&samples, &exp.oracle.limit_sqrt, &dirs);
        horizons.push(HorizonStats {
            horizon: k,
            replicas,
            replica_range: (first, first + replicas as u64 - 1),
            empirical_mean: mean.iter().copied().collect(),
            empirical_cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            cov_rel_error: linalg::frobenius_rel(&cov, limit),
            mean_sup: mean.amax(),
            mean_bound: 4.0 * max_diag.sqrt() / (replicas as f64).sqrt(),
            w1_projected: w1.max,
            w1_normalized: if w1.max_sd > 0.0 { w1.max / w1.max_sd } else { w1.max },
        });
    }
    let w1: Vec<f64> = horizons.iter().map(|h| h.w1_projected).collect();
    let w1_fit = rate_fit(&w1, k_grid).ok();
    Ok(CltReport {
        fixture_id: fixture_id.to_string(),
        master_seed: seed,
        k_grid: k_grid.to_vec(),
        horizons,
        w1_fit,
        metric: "projected W1 (lower bound), Euclidean unit directions".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementStat {
    pub from: f64,
    pub to: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossStat {
    pub first: usize,
    pub second: usize,
    /// `‖Cov(ΔΦ_i, ΔΦ_j)‖_F / ‖L‖_F`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalStat {
    pub direction: usize,
    /// KS distance between the grid running maximum of the normalized
    /// projection and that of standard Brownian motion.
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcltReport {
    pub horizon: usize,
    pub replicas: usize,
    pub zeta_grid: Vec<f64>,
    pub increments: Vec<IncrementStat>,
    pub cross: Vec<CrossStat>,
    pub functionals: Vec<FunctionalStat>,
    pub degenerate: bool,
    /// Endpoint covariance error at `ζ = 1`.
    pub endpoint_rel_error: f64,
}

impl FcltReport {
    pub fn max_increment_error(&self) -> f64 {
        self.increments.iter().map(|i| i.rel_error).fold(0.0, f64::max)
    }

    pub fn max_cross(&self) -> f64 {
        self.cross.iter().map(|c| c.relative).fold(0.0, f64::max)
    }

    pub fn max_ks(&self) -> f64 {
        self.functionals.iter().map(|f| f.ks).fold(0.0, f64::max)
    }
}

/// `paths[j]` is the `R × d` matrix of `Φ_K(ζ_j)` across replicas.
pub fn paths_from_records(recs: &[RunRecord]) -> Vec<DMatrix<f64>> {
    let g = recs.first().map_or(0, |r| r.delta_partial_sums.len());
    (0..g)
        .map(|j| {
            let d = recs[0].delta_partial_sums[j].len();
            DMatrix::from_fn(recs.len(), d, |i, c| recs[i].delta_partial_sums[j][c])
        })
        .collect()
}

/// Grid running maxima `max_j B(ζ_j)` for `n` standard Brownian paths.
pub fn brownian_running_max(zeta_grid: &[f64], n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, Purpose::Brownian, 0);
    (0..n)
        .map(|_| {
            let (mut t, mut b, mut best) = (0.0, 0.0_f64, f64::NEG_INFINITY);
            for &z in zeta_grid {
                let dt = z - t;
                if dt > 0.0 {
                    b += dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
                t = z;
                best = best.max(b);
            }
            best
        })
        .collect()
}

/// Finite-dimensional FCLT checks on grid paths `Φ_K(ζ_j)`.
pub fn fclt_statistics(
    horizon: usize,
    zeta_grid: &[f64],
    paths: &[DMatrix<f64>],
    limit_cov: &DMatrix<f64>,
    limit_sqrt: &DMatrix<f64>,
    reference_max: &[f64],
) -> Result<FcltReport, HarnessError> {
    if zeta_grid.len() < 2 {
        return Err(HarnessError::Config("zeta grid needs at least 2 points".into()));
    }
    if zeta_grid.last() != Some(&1.0) || zeta_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config("zeta grid must be ascending and end at 1".into()));
    }
    if paths.len() != zeta_grid.len() {
        return Err(HarnessError::Config("one path matrix per grid point expected".into()));
    }
    let r = paths[0].nrows();
    let d = paths[0].ncols();
    let scale = limit_cov.norm();
    let degenerate = scale == 0.0;

    // Increments from ζ = 0 (where Φ vanishes) through the grid.
    let mut edges = vec![0.0];
    edges.extend_from_slice(zeta_grid);
    let mut incs = Vec::with_capacity(zeta_grid.len());
    let mut prev = DMatrix::<f64>::zeros(r, d);
    for p in paths {
        incs.push(p - &prev);
        prev = p.clone();
    }
    let increments = incs
        .iter()
        .enumerate()
        .filter(|(j, _)| edges[j + 1] > edges[*j])
        .map(|(j, inc)| {
            let target = limit_cov * (edges[j + 1] - edges[j]);
            IncrementStat {
                from: edges[j],
                to: edges[j + 1],
                rel_error: linalg::frobenius_rel(&stats::covariance(inc), &target),
            }
        })
        .collect();
    let mut cross = Vec::new();
    for i in 0..incs.len() {
        for j in i + 1..incs.len() {
            let c = stats::cross_covariance(&incs[i], &incs[j]).norm();
            cross.push(CrossStat {
                first: i,
                second: j,
                relative: if degenerate { c } else { c / scale },
            });
        }
    }

    let mut functionals = Vec::new();
    if !degenerate {
        for c in 0..d {
            let u = DVector::from_fn(d, |j, _| if j == c { 1.0 } else { 0.0 });
            let sd = (limit_sqrt.transpose() * &u).norm();
            if sd == 0.0 {
                continue;
            }
            let maxima: Vec<f64> = (0..r)
                .map(|i| {
                    paths
                        .iter()
                        .map(|p| p[(i, c)] / sd)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            functionals.push(FunctionalStat {
                direction: c,
                ks: stats::ks_distance(&maxima, reference_max),
            });
        }
    }
    let endpoint_rel_error =
        linalg::frobenius_rel(&stats::covariance(paths.last().unwrap()), limit_cov);
    Ok(FcltReport {
        horizon,
        replicas: r,
        zeta_grid: zeta_grid.to_vec(),
        increments,
        cross,
        functionals,
        degenerate,
        endpoint_rel_error,
    })
}

/// Simulates `R` replicas at horizon `K` and evaluates [`fclt_statistics`].
pub fn fclt_marginals(
    exp: &Experiment,
    horizon: usize,
    replicas: usize,
    zeta_grid: &[f64],
    seed: u64,
    brownian_paths: usize,
) -> Result<(FcltReport, Vec<RunRecord>), HarnessError> {
    exp.schedule.validate_for_clt()?;
    let cfg = exp.config(horizon).with_zeta_grid(zeta_grid.to_vec());
    cfg.validate(exp.model.n_states())?;
    let recs = exp.replicate(&cfg, replicas, seed, 0)?;
    let paths = paths_from_records(&recs);
    let reference = brownian_running_max(zeta_grid, brownian_paths, seed);
    let report = fclt_statistics(
        horizon,
        zeta_grid,
        &paths,
        &exp.oracle.limit_cov,
        &exp.oracle.limit_sqrt,
        &reference,
    )?;
    Ok((report, recs))
}

/// `K^{-1/2}`-scaled sup norms of the error decomposition along one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMagnitudes {
    pub horizon: usize,
    pub term1: f64,
    pub term2: f64,
    pub term3a: f64,
    pub term3b: f64,
    pub term3c: f64,
    pub term4: f64,
    pub term5a: f64,
    pub term5b: f64,
    pub term5c: f64,
    /// `K^{-1/2}‖Σ terms - Σ_{k=1}^K Δ↑_k‖∞`.
    pub closure_gap: f64,
    /// `K^{-1/2}‖Σ_{k=1}^K Δ↑_k‖∞`.
    pub upper_sum: f64,
}

impl TermMagnitudes {
    /// The magnitudes expected to vanish as `K` grows.
    pub fn vanishing(&self) -> [(&'static str, f64); 7] {
        [
            ("term1", self.term1),
            ("term2", self.term2),
            ("term3a", self.term3a),
            ("term3b", self.term3b),
            ("term4", self.term4),
            ("term5a", self.term5a),
            ("term5b", self.term5b),
        ]
    }
}

/// `Σ_{k=1}^K u_k` for `u_0 = 0`, `u_{k+1} = (I - α_k A) u_k + α_k v_k`,
/// which equals `Σ_{i<K} Ψ_i^K v_i`.
fn psi_weighted_sum(a: &DMatrix<f64>, alphas: &[f64], v: &[DVector<f64>]) -> DVector<f64> {
    let d = a.nrows();
    let mut u = DVector::<f64>::zeros(d);
    let mut total = DVector::<f64>::zeros(d);
    for (alpha, vk) in alphas.iter().zip(v) {
        u = &u - (a * &u) * *alpha + vk * *alpha;
        total += &u;
    }
    total
}

/// Decomposes `Σ_{k=1}^K Δ↑_k` into the terms of the error expansion along
/// one simulated path, with `X_k` the Poisson solution at `Q_k`.
pub fn diagnostics_terms(
    exp: &Experiment,
    horizon: usize,
    seed: u64,
    replica: u64,
) -> Result<TermMagnitudes, HarnessError> {
    let m = &exp.model;
    let o = &exp.oracle;
    let chain = &exp.chain;
    let d = exp.dim();
    let alphas = exp.schedule.table(horizon);
    let path = engine::simulate_path(m, chain, exp.initial_state, horizon + 1, seed, replica);
    let qs = engine::replay_path(m, &path[..horizon], &alphas);
    let q_star = o.q_star.to_dvector();
    let a_inv = o.a_inverse();
    let kernel = chain.kernel();
    let idx: Vec<usize> = path
        .iter()
        .map(|y| chain.index_of(*y).expect("sampled triple is reachable"))
        .collect();

    let deltas: Vec<DVector<f64>> = qs.iter().map(|q| q.to_dvector() - &q_star).collect();
    let mut z = Vec::with_capacity(horizon);
    let mut zp = Vec::with_capacity(horizon);
    // Poisson pieces: X_k(Y_k), X_k(Y_{k+1}), E[X_k(Y_{k+1}) | Y_k].
    let mut x_now = Vec::with_capacity(horizon + 1);
    let mut x_next = Vec::with_capacity(horizon);
    let mut x_cond = Vec::with_capacity(horizon);
    let mut sandwich = SandwichState::new(&deltas[0]);
    let mut upper_sum = DVector::<f64>::zeros(d);
    for k in 0..=horizon {
        let xk = o.poisson_at(&qs[k], chain, m);
        x_now.push(xk.row(idx[k]).transpose());
        if k == horizon {
            break;
        }
        let pxk = kernel.row(idx[k]) * &xk;
        x_next.push(xk.row(idx[k + 1]).transpose());
        x_cond.push(pxk.transpose());

        let f = oracle::f_operator(&qs[k], path[k], m).to_dvector();
        let fbar = oracle::f_bar_matrix_form(&qs[k], &o.visitation, m).to_dvector();
        let noise = f - fbar;
        z.push(engine::greedy_gap_term(&deltas[k], o, m));
        sandwich = engine::sandwich_step(&sandwich, &deltas[k], alphas[k], o, m, &noise);
        zp.push(noise);
        upper_sum += &sandwich.delta_up;
    }

    let sum = |v: &[DVector<f64>]| v.iter().fold(DVector::<f64>::zeros(d), |acc, x| acc + x);
    let psi_minus_ainv = |v: &[DVector<f64>]| psi_weighted_sum(&o.a_matrix, &alphas, v) - &a_inv * sum(v);

    let mut t1 = DVector::<f64>::zeros(d);
    let mut w = deltas[0].clone();
    for alpha in &alphas {
        w = &w - (&o.a_matrix * &w) * *alpha;
        t1 += &w;
    }
    let t2 = &a_inv * sum(&z);
    let t3a = &a_inv * (&x_now[0] - &x_now[horizon]);
    let v3b: Vec<DVector<f64>> = (0..horizon).map(|k| &x_now[k + 1] - &x_next[k]).collect();
    let v3c: Vec<DVector<f64>> = (0..horizon).map(|k| &x_next[k] - &x_cond[k]).collect();
    let v5a: Vec<DVector<f64>> = (0..horizon).map(|k| &x_now[k] - &x_now[k + 1]).collect();
    let t3b = &a_inv * sum(&v3b);
    let t3c = &a_inv * sum(&v3c);
    let t4 = psi_minus_ainv(&z);
    let t5a = psi_minus_ainv(&v5a);
    let t5b = psi_minus_ainv(&v3b);
    let t5c = psi_minus_ainv(&v3c);

    let total = &t1 + &t2 + &t3a + &t3b + &t3c + &t4 + &t5a + &t5b + &t5c;
    let s = 1.0 / (horizon as f64).sqrt();
    let n = |v: &DVector<f64>| v.amax() * s;
    Ok(TermMagnitudes {
        horizon,
        term1: n(&t1),
        term2: n(&t2),
        term3a: n(&t3a),
        term3b: n(&t3b),
        term3c: n(&t3c),
        term4: n(&t4),
        term5a: n(&t5a),
        term5b: n(&t5b),
        term5c: n(&t5c),
        closure_gap: n(&(total - &upper_sum)),
        upper_sum: n(&upper_sum),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub k: usize,
    pub mean_sup_error: f64,
    pub mixing_time: usize,
    /// `mean_sup_error · k^{1/2} / t_k^{1/2}`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub replicas: usize,
    pub rows: Vec<DecayRow>,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
}

/// Mean `‖Q_k - Q*‖∞` over replicas at each checkpoint, with a log-log fit.
pub fn error_decay(
    exp: &Experiment,
    checkpoints: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<DecayReport, HarnessError> {
    let horizon = *checkpoints
        .iter()
        .max()
        .ok_or_else(|| HarnessError::Config("no checkpoints".into()))?;
    if checkpoints.contains(&0) {
        return Err(HarnessError::Config("checkpoints must be positive".into()));
    }
    let cfg = exp.config(horizon).with_checkpoints(checkpoints.to_vec());
    let recs = exp.replicate(&cfg, replicas, seed, 0)?;
    let mut ks: Vec<usize> = checkpoints.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::with_capacity(ks.len());
    for (j, &k) in ks.iter().enumerate() {
        let mean = recs.iter().map(|r| r.iterates_kept[j].sup_error).sum::<f64>() / replicas as f64;
        let t = chain::mixing_time(&exp.chain, exp.schedule.at(k))?.max(1);
        rows.push(DecayRow {
            k,
            mean_sup_error: mean,
            mixing_time: t,
            normalized: mean * (k as f64).sqrt() / (t as f64).sqrt(),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.k as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_sup_error.ln()).collect();
    let (slope, intercept, residual) = stats::linear_fit(&x, &y);
    Ok(DecayReport {
        replicas,
        rows,
        slope,
        intercept,
        residual,
    })
}
