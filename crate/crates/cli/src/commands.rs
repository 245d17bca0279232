//! Subcommands. Each one is a deterministic composition of library calls;
//! only the sidecar timestamp differs between identical invocations.

use nalgebra::DMatrix;
use qclt::chain::{chain_report, mixing_time};
use qclt::fixture::{self, generate_mdp};
use qclt::harness::{self, clt_experiment, diagnostics_terms, fclt_marginals, Experiment};
use qclt::mdp::estimate_lipschitz_l;
use qclt::oracle::{psi_diagnostics, FundamentalSign, OracleDump};
use qclt::validate::{all_passed, validate_experiment, ValidationOptions};
use qclt::{MdpModel, TheoryOracle};
use serde::Serialize;

use crate::config::{config_hash, LoadedConfig};
use crate::error::CliError;
use crate::output::{Cell, Csv, OutputDir};

/// Longest horizon for the `Ψ` backward recursion in `analyze`.
pub const PSI_HORIZON_CAP: usize = 100_000;

/// Settings from the command line that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub emit_samples: bool,
}

struct Context {
    loaded: LoadedConfig,
    fixture_id: String,
    model: MdpModel,
    out: OutputDir,
    parallelism: usize,
}

impl Context {
    fn new(mut loaded: LoadedConfig, ov: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = ov.seed {
            loaded.config.master_seed = seed;
        }
        if ov.emit_samples {
            loaded.config.modes.emit_samples = true;
        }
        let (fixture_id, model) = loaded.model()?;
        Self::with_model(loaded, fixture_id, model, ov)
    }

    fn with_model(
        loaded: LoadedConfig,
        fixture_id: String,
        model: MdpModel,
        ov: &Overrides,
    ) -> Result<Self, CliError> {
        let dir = loaded.output_dir()?;
        let hash = config_hash(&loaded.config, &model);
        let parallelism = ov.parallelism.unwrap_or_else(harness::default_parallelism);
        if parallelism == 0 {
            return Err(CliError::config("--parallelism", "must be at least 1"));
        }
        Ok(Self {
            loaded,
            fixture_id,
            model,
            out: OutputDir::new(dir, &hash),
            parallelism,
        })
    }

    fn experiment(&self) -> Result<Experiment, CliError> {
        let c = &self.loaded.config;
        Ok(Experiment::new(self.model.clone(), c.schedule.schedule()?)?
            .with_parallelism(self.parallelism)
            .with_sandwich(c.modes.track_sandwich))
    }
}

fn samples_csv(samples: &DMatrix<f64>) -> Csv {
    let cols: Vec<String> = (0..samples.ncols()).map(|j| format!("x{j}")).collect();
    let mut names = vec!["replica"];
    names.extend(cols.iter().map(String::as_str));
    let mut t = Csv::new(&names);
    for (i, row) in samples.row_iter().enumerate() {
        let mut cells = vec![Cell::Int(i as u64)];
        cells.extend(row.iter().map(|v| Cell::Float(*v)));
        t.row(&cells);
    }
    t
}

#[derive(Serialize)]
struct AnalysisSummary {
    fixture_id: String,
    n_states: usize,
    n_actions: usize,
    discount: f64,
    rho: f64,
    a_inv_norm: f64,
    a_inv_bound: f64,
    a_condition: f64,
    poisson_sign: FundamentalSign,
    poisson_residual: f64,
    poisson_residual_plus: f64,
    poisson_residual_minus: f64,
    x_bound_ratio: f64,
    lipschitz_lower_bound: f64,
    lipschitz_samples: usize,
    horizon: usize,
    alpha_at_horizon: f64,
    mixing_time_at_horizon: usize,
}

/// Oracle dump, chain report and `Ψ` diagnostics. Fails unless the dump
/// reloads and re-serializes to the same bytes.
pub fn cmd_analyze(loaded: LoadedConfig, ov: &Overrides) -> Result<OutputDir, CliError> {
    loaded.config.validate()?;
    let mut ctx = Context::new(loaded, ov)?;
    let exp = ctx.experiment()?;
    let o = &exp.oracle;
    let c = &ctx.loaded.config;

    let dump_text = toml::to_string(&o.dump()).map_err(|e| CliError::Internal(e.to_string()))?;
    let reread: OracleDump = toml::from_str(&dump_text).map_err(|e| CliError::Internal(e.to_string()))?;
    let rebuilt = TheoryOracle::from_dump(&reread)?;
    let again = toml::to_string(&rebuilt.dump()).map_err(|e| CliError::Internal(e.to_string()))?;
    if again != dump_text {
        return Err(CliError::Internal("oracle dump does not reload bit-identically".into()));
    }
    ctx.out.write("oracle_dump.toml", &dump_text)?;
    ctx.out.write_toml("chain_report.toml", &chain_report(&exp.chain)?)?;

    let horizon = c.max_horizon();
    let alpha_k = exp.schedule.at(horizon);
    let lipschitz = estimate_lipschitz_l(&exp.model, &o.q_star, &o.pi_star, 10_000, c.master_seed);
    let summary = AnalysisSummary {
        fixture_id: ctx.fixture_id.clone(),
        n_states: exp.model.n_states(),
        n_actions: exp.model.n_actions(),
        discount: o.discount,
        rho: o.rho,
        a_inv_norm: o.a_inv_norm,
        a_inv_bound: o.a_inv_bound,
        a_condition: o.a_condition,
        poisson_sign: o.poisson.sign,
        poisson_residual: o.poisson.residual,
        poisson_residual_plus: o.poisson.residual_plus,
        poisson_residual_minus: o.poisson.residual_minus,
        x_bound_ratio: o.x_bound_ratio,
        lipschitz_lower_bound: lipschitz.sampled_lower_bound,
        lipschitz_samples: lipschitz.samples_used,
        horizon,
        alpha_at_horizon: alpha_k,
        mixing_time_at_horizon: mixing_time(&exp.chain, alpha_k.min(1.0))?,
    };
    ctx.out.write_toml("analysis.toml", &summary)?;

    let psi_k = horizon.min(PSI_HORIZON_CAP);
    let mut probes = vec![0, 1];
    let mut p = 10;
    while p < psi_k {
        probes.push(p);
        p *= 10;
    }
    probes.push(psi_k);
    let rows = psi_diagnostics(&exp.schedule, &o.a_matrix, psi_k, &probes, o.rho, o.discount);
    let mut t = Csv::new(&["horizon", "i", "gap", "step_difference", "gap_envelope", "difference_envelope"]);
    for r in rows {
        t.row(&[
            Cell::Int(psi_k as u64),
            Cell::Int(r.i as u64),
            Cell::Float(r.gap),
            Cell::Float(r.step_difference),
            Cell::Float(r.gap_envelope),
            Cell::Float(r.difference_envelope),
        ]);
    }
    ctx.out.write_csv("psi_diagnostics.csv", &t)?;
    ctx.out.write_sidecar("analyze")?;
    Ok(ctx.out)
}

pub fn cmd_clt(loaded: LoadedConfig, ov: &Overrides) -> Result<OutputDir, CliError> {
    loaded.config.validate_for_clt()?;
    let mut ctx = Context::new(loaded, ov)?;
    let exp = ctx.experiment()?;
    let c = ctx.loaded.config.clone();

    let mut emitted = Vec::new();
    let report = clt_experiment(&exp, &ctx.fixture_id, &c.k_grid, c.replicas, c.master_seed, |k, s| {
        if c.modes.emit_samples {
            emitted.push((k, samples_csv(s)));
        }
    })?;
    ctx.out.write_toml("clt_report.toml", &report)?;

    let mut t = Csv::new(&[
        "horizon",
        "replicas",
        "first_replica",
        "last_replica",
        "cov_rel_error",
        "w1_projected",
        "w1_normalized",
        "mean_sup",
        "mean_bound",
    ]);
    for h in &report.horizons {
        t.row(&[
            Cell::Int(h.horizon as u64),
            Cell::Int(h.replicas as u64),
            Cell::Int(h.replica_range.0),
            Cell::Int(h.replica_range.1),
            Cell::Float(h.cov_rel_error),
            Cell::Float(h.w1_projected),
            Cell::Float(h.w1_normalized),
            Cell::Float(h.mean_sup),
            Cell::Float(h.mean_bound),
        ]);
    }
    ctx.out.write_csv("clt_horizons.csv", &t)?;
    for (k, csv) in &emitted {
        ctx.out.write_csv(&format!("samples_K{k}.csv"), csv)?;
    }

    if c.modes.instrumented_terms {
        let mut t = Csv::new(&[
            "horizon", "term1", "term2", "term3a", "term3b", "term3c", "term4", "term5a", "term5b", "term5c",
            "closure_gap", "upper_sum",
        ]);
        for &k in &c.k_grid {
            let m = diagnostics_terms(&exp, k, c.master_seed, 0)?;
            t.row(&[
                Cell::Int(k as u64),
                Cell::Float(m.term1),
                Cell::Float(m.term2),
                Cell::Float(m.term3a),
                Cell::Float(m.term3b),
                Cell::Float(m.term3c),
                Cell::Float(m.term4),
                Cell::Float(m.term5a),
                Cell::Float(m.term5b),
                Cell::Float(m.term5c),
                Cell::Float(m.closure_gap),
                Cell::Float(m.upper_sum),
            ]);
        }
        ctx.out.write_csv("terms.csv", &t)?;
    }
    ctx.out.write_sidecar("clt")?;
    Ok(ctx.out)
}

/// Functional CLT statistics at the largest horizon of the grid.
pub fn cmd_fclt(loaded: LoadedConfig, ov: &Overrides) -> Result<OutputDir, CliError> {
    loaded.config.validate_for_clt()?;
    let mut ctx = Context::new(loaded, ov)?;
    let exp = ctx.experiment()?;
    let c = ctx.loaded.config.clone();
    let horizon = c.max_horizon();
    let (report, recs) = fclt_marginals(
        &exp,
        horizon,
        c.replicas,
        &c.zeta_grid,
        c.master_seed,
        harness::BROWNIAN_PATHS,
    )?;
    ctx.out.write_toml("fclt_report.toml", &report)?;

    let mut t = Csv::new(&["from", "to", "rel_error"]);
    for i in &report.increments {
        t.row(&[Cell::Float(i.from), Cell::Float(i.to), Cell::Float(i.rel_error)]);
    }
    ctx.out.write_csv("fclt_increments.csv", &t)?;
    let mut t = Csv::new(&["first", "second", "relative"]);
    for x in &report.cross {
        t.row(&[Cell::Int(x.first as u64), Cell::Int(x.second as u64), Cell::Float(x.relative)]);
    }
    ctx.out.write_csv("fclt_cross.csv", &t)?;
    let mut t = Csv::new(&["direction", "ks"]);
    for f in &report.functionals {
        t.row(&[Cell::Int(f.direction as u64), Cell::Float(f.ks)]);
    }
    ctx.out.write_csv("fclt_functionals.csv", &t)?;

    if c.modes.emit_samples {
        for (j, path) in harness::paths_from_records(&recs).iter().enumerate() {
            ctx.out.write_csv(&format!("fclt_path_{j}.csv"), &samples_csv(path))?;
        }
    }
    ctx.out.write_sidecar("fclt")?;
    Ok(ctx.out)
}

/// Runs the property suite; fails after writing the verdict if any
/// property fails.
pub fn cmd_validate(loaded: LoadedConfig, ov: &Overrides) -> Result<OutputDir, CliError> {
    loaded.config.validate()?;
    let mut ctx = Context::new(loaded, ov)?;
    let exp = ctx.experiment()?;
    let opts = ValidationOptions {
        seed: ctx.loaded.config.master_seed,
        ..ValidationOptions::default()
    };
    let checks = validate_experiment(&exp, &opts);
    let mut t = Csv::new(&["module", "property", "status", "observed", "bound"]);
    for ch in &checks {
        t.row(&[
            Cell::Text(&ch.module),
            Cell::Text(&ch.property),
            Cell::Text(if ch.passed { "pass" } else { "fail" }),
            Cell::Float(ch.observed),
            Cell::Float(ch.bound),
        ]);
    }
    ctx.out.write_csv("verdict.csv", &t)?;
    ctx.out.write_sidecar("validate")?;
    if !all_passed(&checks) {
        let failed: Vec<String> = checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}/{}", c.module, c.property))
            .collect();
        return Err(CliError::Internal(format!("properties failed: {}", failed.join(", "))));
    }
    Ok(ctx.out)
}

/// Writes `fixture.toml` from the `[generator]` table.
pub fn cmd_gen_mdp(loaded: LoadedConfig, ov: &Overrides) -> Result<OutputDir, CliError> {
    let spec = loaded
        .config
        .generator
        .clone()
        .ok_or_else(|| CliError::config("generator", "gen-mdp needs a [generator] table"))?;
    let model = generate_mdp(&spec)?;
    let mut ctx = Context::with_model(loaded, "generated".into(), model, ov)?;
    ctx.out.write("fixture.toml", &fixture::write_fixture(&ctx.model))?;
    ctx.out.write_sidecar("gen-mdp")?;
    Ok(ctx.out)
}
