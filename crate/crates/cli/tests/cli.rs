use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qclt::fixture::parse_fixture;
use qclt::oracle::OracleDump;
use qclt::TheoryOracle;
use qclt_cli::config::ExperimentConfig;

const BASE: &str = r#"master_seed = 11
replicas = 40
k_grid = [300, 1000]
output_dir = "out"

[schedule]
alpha = 32.0
b = 182.0
beta = 0.6666666666666666

[generator]
n_states = 4
n_actions = 3
sparsity = 0.6
reward_seed = 1
transition_seed = 2
gamma = 0.7
"#;

fn setup(config: &str, files: &[(&str, &str)]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, config).unwrap();
    for (name, body) in files {
        std::fs::write(dir.path().join(name), body).unwrap();
    }
    (dir, cfg)
}

fn qclt(args: &[&str], cfg: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qclt"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env_remove("QCLT_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn zero_replicas_is_a_config_error() {
    let (_d, cfg) = setup(&BASE.replace("replicas = 40", "replicas = 0"), &[]);
    let o = qclt(&["clt"], &cfg);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("replicas"));
}

#[test]
fn malformed_config_and_arguments_are_config_errors() {
    let (_d, cfg) = setup(&format!("{BASE}\nunknown_key = 1\n"), &[]);
    assert_eq!(code(&qclt(&["analyze"], &cfg)), 3);
    let (_d, cfg) = setup(BASE, &[]);
    assert_eq!(code(&qclt(&["no-such-command"], &cfg)), 3);
    let (_d, cfg) = setup(&BASE.replace("beta = 0.6666666666666666", "beta = 0.4"), &[]);
    assert_eq!(code(&qclt(&["clt"], &cfg)), 3);
}

#[test]
fn reducible_fixture_is_an_assumption_violation() {
    let fixture = "n_states = 2\nn_actions = 1\ngamma = 0.5\n\
                   transition = [[[1.0, 0.0]], [[0.0, 1.0]]]\n\
                   reward = [[1.0], [0.0]]\nbehavior_policy = \"uniform\"\n";
    let (_d, cfg) = setup(&format!("fixture_path = \"two.toml\"\n{BASE}"), &[("two.toml", fixture)]);
    let o = qclt(&["analyze"], &cfg);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_state_fixture_has_the_closed_form_limits() {
    let fixture = "n_states = 1\nn_actions = 1\ngamma = 0.3\ntransition = [[[1.0]]]\n\
                   reward = [[0.5]]\nbehavior_policy = \"uniform\"\n";
    let (d, cfg) = setup(&format!("fixture_path = \"one.toml\"\n{BASE}"), &[("one.toml", fixture)]);
    assert_eq!(code(&qclt(&["analyze"], &cfg)), 0);
    let dump: OracleDump = toml::from_str(&read(d.path(), "oracle_dump.toml")).unwrap();
    assert_eq!(dump.rho, 1.0);
    assert!((dump.a[0][0] - 0.7).abs() < 1e-15);
    assert!((dump.q_star[0] - 0.5 / 0.7).abs() < 1e-12);
    assert_eq!(dump.sigma, vec![vec![0.0]]);
}

#[test]
fn oracle_dump_round_trips() {
    let (d, cfg) = setup(BASE, &[]);
    assert_eq!(code(&qclt(&["analyze"], &cfg)), 0);
    let text = read(d.path(), "oracle_dump.toml");
    let body = text.split_once('\n').unwrap().1;
    let dump: OracleDump = toml::from_str(body).unwrap();
    let rebuilt = TheoryOracle::from_dump(&dump).unwrap();
    assert_eq!(toml::to_string(&rebuilt.dump()).unwrap(), body);
}

#[test]
fn generated_fixtures_are_deterministic_and_loadable() {
    let (d1, cfg1) = setup(BASE, &[]);
    let (d2, cfg2) = setup(BASE, &[]);
    assert_eq!(code(&qclt(&["gen-mdp"], &cfg1)), 0);
    assert_eq!(code(&qclt(&["gen-mdp"], &cfg2)), 0);
    let a = read(d1.path(), "fixture.toml");
    assert_eq!(a, read(d2.path(), "fixture.toml"));
    let m = parse_fixture(&a).unwrap();
    assert_eq!((m.n_states(), m.n_actions()), (4, 3));

    // The generated file is usable as a fixture.
    let (d3, cfg3) = setup(&format!("fixture_path = \"gen.toml\"\n{BASE}"), &[("gen.toml", &a)]);
    assert_eq!(code(&qclt(&["analyze"], &cfg3)), 0);
    assert!(read(d3.path(), "analysis.toml").contains("fixture_id = \"gen\""));
}

#[test]
fn validate_passes_on_the_shipped_fixture() {
    let (d, cfg) = setup(BASE, &[]);
    let o = qclt(&["validate"], &cfg);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let verdict = read(d.path(), "verdict.csv");
    let rows: Vec<&str> = verdict.lines().skip(2).collect();
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("pass")), "{verdict}");
}

#[test]
fn config_round_trips_through_its_canonical_form() {
    let c = ExperimentConfig::parse(BASE).unwrap();
    let text = c.to_toml();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    assert_eq!(ExperimentConfig::parse(&text).unwrap().to_toml(), text);
}

#[test]
fn output_dir_falls_back_to_the_environment() {
    let (d, cfg) = setup(&BASE.replace("output_dir = \"out\"\n", ""), &[]);
    assert_eq!(code(&qclt(&["gen-mdp"], &cfg)), 3);
    let target = d.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_qclt"))
        .args(["gen-mdp", "--config"])
        .arg(&cfg)
        .env("QCLT_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(target.join("fixture.toml").exists());
}

#[test]
fn every_result_file_carries_the_header() {
    let (d, cfg) = setup(&BASE.replace("replicas = 40", "replicas = 20"), &[]);
    for cmd in ["analyze", "clt", "fclt"] {
        let o = qclt(&[cmd, "--emit-samples"], &cfg);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let mut headers = Vec::new();
    for entry in std::fs::read_dir(d.path().join("out")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "timestamp") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        headers.push(text.lines().next().unwrap().to_string());
    }
    assert!(headers.len() >= 10);
    assert!(headers.iter().all(|h| h == &headers[0]));
    assert!(headers[0].starts_with("# qclt ") && headers[0].contains(" config="));
}
