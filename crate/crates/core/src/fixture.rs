//! MDP fixture files (TOML) and seeded random fixture generation.
//!
//! ```toml
//! n_states = 2
//! n_actions = 2
//! gamma = 0.8
//! # transition[s][a][s']
//! transition = [[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.9, 0.1]]]
//! reward = [[0.1, 0.9], [0.4, 0.3]]
//! behavior_policy = "uniform"   # or [[π(0|0), π(1|0)], ...]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::chain::build_joint_chain;
use crate::engine::StepsizeSchedule;
use crate::mdp::{MdpError, MdpModel};
use crate::rng::{self, Purpose};

/// The shipped 3-state, 2-action fixture.
pub const DEFAULT_FIXTURE: &str = include_str!("../fixtures/default.toml");
pub const DEFAULT_FIXTURE_ID: &str = "default";
/// Regeneration attempts before random generation gives up.
pub const MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("line {line}, column {column}: {field}: {message}")]
    Invalid {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("no valid MDP after {attempts} attempts: {last}")]
    Exhausted { attempts: u64, last: String },
    #[error("invalid generator spec: {0}")]
    Spec(String),
}

impl FixtureError {
    pub fn line(&self) -> Option<usize> {
        match self {
            FixtureError::Invalid { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BehaviorSpec {
    /// Only `"uniform"` is accepted.
    Named(String),
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFixture {
    n_states: Spanned<usize>,
    n_actions: Spanned<usize>,
    gamma: Spanned<f64>,
    transition: Spanned<Vec<Vec<Vec<f64>>>>,
    reward: Spanned<Vec<Vec<f64>>>,
    behavior_policy: Spanned<BehaviorSpec>,
}

fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn invalid(text: &str, offset: usize, field: &str, message: impl Into<String>) -> FixtureError {
    let (line, column) = position(text, offset);
    FixtureError::Invalid {
        line,
        column,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses and validates a fixture; every error names a line.
pub fn parse_fixture(text: &str) -> Result<MdpModel, FixtureError> {
    let raw: RawFixture = toml::from_str(text).map_err(|e| {
        let offset = e.span().map_or(0, |s| s.start);
        invalid(text, offset, "document", e.message().trim().to_string())
    })?;
    let ns = *raw.n_states.get_ref();
    let na = *raw.n_actions.get_ref();

    let tr = raw.transition.get_ref();
    if tr.len() != ns || tr.iter().any(|row| row.len() != na || row.iter().any(|p| p.len() != ns)) {
        return Err(invalid(
            text,
            raw.transition.span().start,
            "transition",
            format!("expected shape [{ns}][{na}][{ns}]"),
        ));
    }
    let rw = raw.reward.get_ref();
    if rw.len() != ns || rw.iter().any(|row| row.len() != na) {
        return Err(invalid(
            text,
            raw.reward.span().start,
            "reward",
            format!("expected shape [{ns}][{na}]"),
        ));
    }
    let behavior = match raw.behavior_policy.get_ref() {
        BehaviorSpec::Named(n) if n == "uniform" => MdpModel::uniform_behavior(ns, na),
        BehaviorSpec::Named(n) => {
            return Err(invalid(
                text,
                raw.behavior_policy.span().start,
                "behavior_policy",
                format!("unknown policy {n:?}; use \"uniform\" or an explicit table"),
            ))
        }
        BehaviorSpec::Explicit(rows) => {
            if rows.len() != ns || rows.iter().any(|r| r.len() != na) {
                return Err(invalid(
                    text,
                    raw.behavior_policy.span().start,
                    "behavior_policy",
                    format!("expected shape [{ns}][{na}]"),
                ));
            }
            rows.concat()
        }
    };
    let transition: Vec<f64> = tr.iter().flatten().flatten().copied().collect();
    let reward: Vec<f64> = rw.concat();
    MdpModel::new(ns, na, transition, reward, *raw.gamma.get_ref(), behavior).map_err(|e| {
        let offset = match e.field() {
            "n_states" => raw.n_states.span().start,
            "n_actions" => raw.n_actions.span().start,
            "gamma" => raw.gamma.span().start,
            "transition" => raw.transition.span().start,
            "reward" => raw.reward.span().start,
            "behavior_policy" => raw.behavior_policy.span().start,
            _ => 0,
        };
        invalid(text, offset, e.field(), e.to_string())
    })
}

pub fn default_fixture() -> MdpModel {
    parse_fixture(DEFAULT_FIXTURE).expect("shipped fixture is valid")
}

/// CLT schedule for the shipped fixture: α_k = 32 (k + 182)^{-2/3}.
///
/// The large shift keeps α_k near 1 early while the tail relaxes within a
/// small fraction of K = 10⁵ (1/(α_K ρ (1-γ)) ≈ 2.8·10³ steps).
pub fn default_schedule() -> StepsizeSchedule {
    StepsizeSchedule::polynomial(32.0, 182.0, 2.0 / 3.0).expect("valid schedule")
}

/// Faster-decaying schedule used for the error-decay experiment.
pub fn decay_schedule() -> StepsizeSchedule {
    StepsizeSchedule::polynomial(63.0, 100.0, 0.9).expect("valid schedule")
}

#[derive(Serialize)]
struct OutFixture {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    behavior_policy: Vec<Vec<f64>>,
}

/// Serializes a model in fixture form (behavior always explicit).
pub fn write_fixture(m: &MdpModel) -> String {
    let (ns, na) = (m.n_states(), m.n_actions());
    let out = OutFixture {
        n_states: ns,
        n_actions: na,
        gamma: m.discount(),
        transition: (0..ns)
            .map(|s| (0..na).map(|a| m.transition_row(s, a).to_vec()).collect())
            .collect(),
        reward: m.rewards().chunks(na).map(|c| c.to_vec()).collect(),
        behavior_policy: m.behavior().chunks(na).map(|c| c.to_vec()).collect(),
    };
    toml::to_string(&out).expect("fixture serializes")
}

/// Seeded random MDP family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Probability that any given `s'` is in the support of `P(·|s,a)`.
    pub sparsity: f64,
    pub reward_seed: u64,
    pub transition_seed: u64,
    pub gamma: f64,
    #[serde(default = "uniform_behavior")]
    pub behavior: BehaviorSpec,
}

fn uniform_behavior() -> BehaviorSpec {
    BehaviorSpec::Named("uniform".into())
}

impl RandomMdpSpec {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Self {
        Self {
            n_states,
            n_actions,
            sparsity: 1.0,
            reward_seed: seed,
            transition_seed: seed,
            gamma,
            behavior: uniform_behavior(),
        }
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(FixtureError::Spec("n_states and n_actions must be positive".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(FixtureError::Spec(format!("sparsity {} outside (0, 1]", self.sparsity)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(FixtureError::Spec(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if let BehaviorSpec::Named(n) = &self.behavior {
            if n != "uniform" {
                return Err(FixtureError::Spec(format!("unknown behavior {n:?}")));
            }
        }
        Ok(())
    }
}

fn sample_model(spec: &RandomMdpSpec, attempt: u64) -> Result<MdpModel, MdpError> {
    let (ns, na) = (spec.n_states, spec.n_actions);
    let mut trng = rng::stream(spec.transition_seed.wrapping_add(attempt), Purpose::Fixture, 0);
    let mut rrng = rng::stream(spec.reward_seed.wrapping_add(attempt), Purpose::Fixture, 1);
    let mut transition = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let mut row: Vec<f64> = (0..ns)
            .map(|_| {
                let keep = trng.random::<f64>() < spec.sparsity;
                let w = trng.random::<f64>();
                if keep {
                    w
                } else {
                    0.0
                }
            })
            .collect();
        if row.iter().all(|w| *w == 0.0) {
            let s = trng.random_range(0..ns);
            row[s] = 1.0;
        }
        let total: f64 = row.iter().sum();
        transition.extend(row.iter().map(|w| w / total));
    }
    let reward: Vec<f64> = (0..ns * na).map(|_| rrng.random::<f64>()).collect();
    let behavior = match &spec.behavior {
        BehaviorSpec::Named(_) => MdpModel::uniform_behavior(ns, na),
        BehaviorSpec::Explicit(rows) => rows.concat(),
    };
    MdpModel::new(ns, na, transition, reward, spec.gamma, behavior)
}

/// Draws a model that passes validation and whose joint chain is
/// irreducible, aperiodic and explores every pair, bumping both seeds by one
/// per failed attempt.
pub fn generate_mdp(spec: &RandomMdpSpec) -> Result<MdpModel, FixtureError> {
    spec.validate()?;
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let m = match sample_model(spec, attempt) {
            Ok(m) => m,
            Err(e @ (MdpError::Behavior { .. } | MdpError::Shape { .. })) => {
                return Err(FixtureError::Spec(e.to_string()))
            }
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        match build_joint_chain(&m) {
            Ok(_) => return Ok(m),
            Err(e) => last = e.to_string(),
        }
    }
    Err(FixtureError::Exhausted {
        attempts: MAX_ATTEMPTS,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
n_states = 2
n_actions = 2
gamma = 0.8
transition = [[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.9, 0.1]]]
reward = [[0.1, 0.9], [0.4, 0.3]]
behavior_policy = "uniform"
"#;

    #[test]
    fn parses_small_fixture() {
        let m = parse_fixture(SMALL).unwrap();
        assert_eq!(m.n_pairs(), 4);
        assert_eq!(m.transition_row(1, 1), &[0.9, 0.1]);
        assert_eq!(m.behavior_row(0), &[0.5, 0.5]);
    }

    #[test]
    fn errors_point_at_offending_line() {
        let bad = SMALL.replace("[0.9, 0.1]", "[0.9, 0.2]");
        let e = parse_fixture(&bad).unwrap_err();
        assert_eq!(e.line(), Some(5), "{e}");
        let bad = SMALL.replace("gamma = 0.8", "gamma = 1.0");
        assert_eq!(parse_fixture(&bad).unwrap_err().line(), Some(4));
        let bad = SMALL.replace("reward = [[0.1, 0.9], [0.4, 0.3]]", "reward = [[0.1, 0.9]]");
        assert_eq!(parse_fixture(&bad).unwrap_err().line(), Some(6));
        let bad = SMALL.replace("gamma = 0.8", "gamma = \"x\"");
        assert_eq!(parse_fixture(&bad).unwrap_err().line(), Some(4));
        let bad = SMALL.replace("\"uniform\"", "\"greedy\"");
        assert_eq!(parse_fixture(&bad).unwrap_err().line(), Some(7));
    }

    #[test]
    fn write_then_parse_is_identity() {
        let m = parse_fixture(SMALL).unwrap();
        let text = write_fixture(&m);
        let back = parse_fixture(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_fixture(&back), text);
    }

    #[test]
    fn shipped_fixture_is_valid() {
        let m = default_fixture();
        assert_eq!((m.n_states(), m.n_actions()), (3, 2));
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let mut spec = RandomMdpSpec::new(4, 3, 0.7, 11);
        spec.sparsity = 0.5;
        let a = generate_mdp(&spec).unwrap();
        let b = generate_mdp(&spec).unwrap();
        assert_eq!(a, b);
        assert!(build_joint_chain(&a).is_ok());
        spec.reward_seed = 12;
        assert_ne!(generate_mdp(&spec).unwrap(), a);
    }
}
