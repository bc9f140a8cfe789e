//! Config parsing, CSV determinism, and exit-code behavior of the binary.

use std::path::PathBuf;
use std::process::Command;

use fbsde_cli::config::{parse_config, JobKind};

const MINIMAL_EVALUATE: &str = r#"
job = "evaluate"

[problem]
catalog = "heat-1d"

[start]
s = 0.0
x = [0.0]

[solver]
steps = 50
paths = 1000
seed = 42
"#;

#[test]
fn minimal_config_parses_with_defaults() {
    let config = parse_config(MINIMAL_EVALUATE).unwrap();
    assert_eq!(config.job, JobKind::Evaluate);
    let solver = config.solver.to_solver_config(None);
    assert_eq!(solver.n_steps, 50);
    assert_eq!(solver.n_paths, 1000);
    assert_eq!(solver.seed, 42);
    assert_eq!(solver.picard_max, 30);
    assert_eq!(solver.picard_tol, 1e-4);
    assert_eq!(solver.basis_degree, 2);
    assert_eq!(solver.ridge, 1e-10);
    assert!(solver.beta.is_none());
    assert!(solver.basis_state.is_none());
}

#[test]
fn misspelled_job_kind_cites_allowed_kinds() {
    let text = MINIMAL_EVALUATE.replace("\"evaluate\"", "\"evaluat\"");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("evaluat"), "{err}");
    for kind in ["evaluate", "grid", "convergence", "compare", "scalar-crosscheck", "validate"] {
        assert!(err.contains(kind), "missing `{kind}` in: {err}");
    }
}

#[test]
fn unknown_key_is_reported_with_path() {
    let text = format!("{MINIMAL_EVALUATE}\n[solver.extra]\nfoo = 1\n");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("solver"), "{err}");

    let text = MINIMAL_EVALUATE.replace("steps = 50", "stepz = 50");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("stepz") || err.contains("steps"), "{err}");
}

#[test]
fn missing_required_block_is_an_error() {
    let text = MINIMAL_EVALUATE.replace("x = [0.0]", "");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("start.x"), "{err}");

    let text = MINIMAL_EVALUATE.replace("job = \"evaluate\"", "job = \"grid\"");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("grid"), "{err}");

    let text = MINIMAL_EVALUATE.replace("job = \"evaluate\"", "job = \"convergence\"");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("refinements"), "{err}");
}

#[test]
fn inline_compare_config_round_trips() {
    let text = r#"
job = "compare"

[problem.inline]
d = 1
d1 = 2
horizon = 1.0
a = { constant = [0.1] }
c = { affine = { base = [[0.0, 0.5], [0.5, 0.0]], slopes = [[[0.1, 0.0], [0.0, 0.1]]] } }
coupling = [ { constant = [[0.0, 0.25], [0.25, 0.0]] } ]
g = { affine-u = { matrix = [[0.0, 0.1], [0.1, 0.0]], offset = [0.0, 0.0] } }
u0 = { trig = { amplitude = [1.0, 1.0], wave = [[1.0], [1.0]], phase = [0.0, 0.0], offset = [0.0, 0.0] } }

[problem2.inline]
d = 1
d1 = 2
horizon = 1.0
g = "zero"
u0 = { quadratic = { quad = [1.0, 0.0], linear = [[0.0], [1.0]], offset = [1.0, 1.0] } }

[start]
s = 0.0
x = [0.2]

[solver]
steps = 20
paths = 500
seed = 7

[compare]
seeds = 3
"#;
    let config = parse_config(text).unwrap();
    assert_eq!(config.job, JobKind::Compare);
    assert!(config.problem2.is_some());
    // Both inline problems construct cleanly.
    config.problem.build().unwrap();
    config.problem2.as_ref().unwrap().build().unwrap();

    let serialized = toml::to_string(&config).unwrap();
    let reparsed = parse_config(&serialized).unwrap();
    assert_eq!(config, reparsed);
}

#[test]
fn inline_shape_errors_name_the_key() {
    let text = MINIMAL_EVALUATE.replace(
        "catalog = \"heat-1d\"",
        "inline = { d = 1, d1 = 1, horizon = 1.0, a = { constant = [0.0, 1.0] }, u0 = { quadratic = { quad = [1.0], linear = [[0.0]], offset = [0.0] } } }",
    );
    let config = parse_config(&text).unwrap();
    let err = config.problem.build().unwrap_err().to_string();
    assert!(err.contains("problem.inline.a.constant"), "{err}");
}

#[test]
fn exactly_one_problem_source() {
    let text = MINIMAL_EVALUATE.replace(
        "catalog = \"heat-1d\"",
        "catalog = \"heat-1d\"\ninline = { d = 1, d1 = 1, horizon = 1.0, u0 = { quadratic = { quad = [1.0], linear = [[0.0]], offset = [0.0] } } }",
    );
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("exactly one"), "{err}");
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
}

fn temp_path(name: &str) -> PathBuf {
    let mut dir = std::env::temp_dir();
    dir.push(format!("fbsde-cli-test-{}-{name}", std::process::id()));
    dir
}

#[test]
fn evaluate_job_writes_expected_csv() {
    let config_path = temp_path("eval.toml");
    let out_path = temp_path("eval.csv");
    std::fs::write(&config_path, MINIMAL_EVALUATE).unwrap();
    let status = binary()
        .arg("solve")
        .arg(&config_path)
        .arg("--out")
        .arg(&out_path)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "s,x1,component,value,stderr,steps,paths,seed,oracle,abs_error"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 10);
    let value: f64 = row[3].parse().unwrap();
    let stderr: f64 = row[4].parse().unwrap();
    assert!((value - 1.0).abs() <= 3.0 * stderr + 0.02);
    assert!(stderr >= 0.0 && stderr.is_finite());
    std::fs::remove_file(&config_path).ok();
    std::fs::remove_file(&out_path).ok();
}

#[test]
fn reruns_and_thread_counts_are_byte_identical() {
    let config_path = temp_path("det.toml");
    std::fs::write(&config_path, MINIMAL_EVALUATE).unwrap();
    let mut outputs = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "2"), ("c", "1")] {
        let out_path = temp_path(&format!("det-{tag}.csv"));
        let status = binary()
            .arg("solve")
            .arg(&config_path)
            .arg("--out")
            .arg(&out_path)
            .arg("--threads")
            .arg(threads)
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push(std::fs::read(&out_path).unwrap());
        std::fs::remove_file(&out_path).ok();
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    std::fs::remove_file(&config_path).ok();
}

#[test]
fn seed_override_changes_the_draws() {
    let config_path = temp_path("seed.toml");
    std::fs::write(&config_path, MINIMAL_EVALUATE).unwrap();
    let mut values = Vec::new();
    for (tag, seed) in [("s1", "42"), ("s2", "43")] {
        let out_path = temp_path(&format!("seed-{tag}.csv"));
        let status = binary()
            .arg("solve")
            .arg(&config_path)
            .arg("--seed")
            .arg(seed)
            .arg("--out")
            .arg(&out_path)
            .status()
            .unwrap();
        assert!(status.success());
        values.push(std::fs::read_to_string(&out_path).unwrap());
        std::fs::remove_file(&out_path).ok();
    }
    assert_ne!(values[0], values[1]);
    std::fs::remove_file(&config_path).ok();
}

#[test]
fn missing_config_file_exits_3() {
    let status = binary()
        .arg("solve")
        .arg("/nonexistent/fbsde-config.toml")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn malformed_config_exits_2() {
    let config_path = temp_path("bad.toml");
    std::fs::write(&config_path, "job = \"evaluat\"\n").unwrap();
    let status = binary().arg("solve").arg(&config_path).status().unwrap();
    assert_eq!(status.code(), Some(2));
    std::fs::remove_file(&config_path).ok();
}

#[test]
fn unsatisfied_hypotheses_warn_but_exit_zero() {
    // problem2 sits below problem1, so the ordered-terminal hypothesis
    // fails; the report is exploratory with exit code 0.
    let text = r#"
job = "compare"

[problem]
catalog = "heat-1d"

[problem2.inline]
d = 1
d1 = 1
horizon = 1.0
u0 = { quadratic = { quad = [1.0], linear = [[0.0]], offset = [-1.0] } }

[start]
s = 0.0
x = [0.0]

[solver]
steps = 10
paths = 500
seed = 3

[compare]
seeds = 2
"#;
    let config_path = temp_path("explore.toml");
    let out_path = temp_path("explore.csv");
    std::fs::write(&config_path, text).unwrap();
    let output = binary()
        .arg("solve")
        .arg(&config_path)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("exploratory"), "stderr: {stderr}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("exploratory"), "stdout: {stdout}");
    std::fs::remove_file(&config_path).ok();
    std::fs::remove_file(&out_path).ok();
}
