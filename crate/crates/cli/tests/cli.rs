use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_stgrape"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// Data rows of a CSV artifact, skipping config comment lines.
fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn toml_value(path: &Path) -> toml::Value {
    let text = std::fs::read_to_string(path).unwrap();
    text.parse::<toml::Table>().unwrap().into()
}

fn out(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join("out").join(name)
}

#[test]
fn missing_field_exits_with_config_code() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "[system]\nqubits = 2\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("control"));
    let o = run(dir.path(), "[system]\nqubits = 2\n[control]\nsteps = 4\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt_ns"));
}

#[test]
fn unknown_field_exits_with_config_code() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "[system]\nqubits = 2\nspin = 3\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spin"));
}

const SIM3: &str = r#"
seed = 5
[system]
qubits = 3
[control]
dt_ns = 0.5
steps = 20
[robustness]
order = 1
[simulate]
backends = ["expm", "trotter"]
"#;

#[test]
fn simulate_reports_small_trotter_error_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), SIM3, &["simulate"]));
    let (header, rows) = table(&out(&dir, "simulate_summary.csv"));
    assert_eq!(header, ["backend", "reference", "delta", "trace_zero_order", "max_hermitian_error"]);
    let trotter = rows.iter().find(|r| r[0] == "trotter").unwrap();
    let delta: f64 = trotter[2].parse().unwrap();
    assert!(delta > 0.0 && delta < 0.02, "delta {delta}");
    let (_, blocks) = table(&out(&dir, "simulate_blocks.csv"));
    assert_eq!(blocks.len(), 2 * 3);

    let first = std::fs::read(out(&dir, "simulate_blocks.csv")).unwrap();
    ok(&run(dir.path(), SIM3, &["simulate"]));
    assert_eq!(first, std::fs::read(out(&dir, "simulate_blocks.csv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("# seed = 5"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), SIM3, &["simulate", "--seed", "9"]));
    let text = std::fs::read_to_string(out(&dir, "simulate_summary.csv")).unwrap();
    assert!(text.starts_with("# seed = 9"));
}

const STATE_PREP: &str = r#"
seed = 2
[system]
qubits = 2
[control]
dt_ns = 0.5
steps = 20
[robustness]
order = 1
lambda = 0.01
[task]
kind = "state_prep"
target = "hadamard_transform"
[optimizer]
method = "stgrape"
max_iters = 40
monitor_interval = 10
"#;

#[test]
fn stgrape_state_prep_writes_checkpoints_reproducibly() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), STATE_PREP, &["optimize", "--workers", "2"]));
    let report = toml_value(&out(&dir, "report.toml"));
    let cps = report["checkpoints"].as_array().unwrap();
    assert!(cps.len() >= 2);
    let its: Vec<i64> = cps.iter().map(|c| c["iteration"].as_integer().unwrap()).collect();
    assert!(its.windows(2).all(|w| w[1] > w[0]));
    assert!(report["summary"]["state_overlap"].as_float().unwrap() > 0.5);
    assert_eq!(report["config"]["seed"].as_integer(), Some(2));

    let (header, rows) = table(&out(&dir, "pulse.csv"));
    assert_eq!(header, ["t_ns", "u_1", "u_2", "u_3", "u_4"]);
    assert_eq!(rows.len(), 20);
    for r in &rows {
        for v in &r[1..] {
            let x: f64 = v.parse().unwrap();
            assert!(x.abs() <= 100.0 + 1e-9);
        }
    }

    let report1 = std::fs::read(out(&dir, "report.toml")).unwrap();
    let pulse1 = std::fs::read(out(&dir, "pulse.csv")).unwrap();
    ok(&run(dir.path(), STATE_PREP, &["optimize"]));
    assert_eq!(report1, std::fs::read(out(&dir, "report.toml")).unwrap());
    assert_eq!(pulse1, std::fs::read(out(&dir, "pulse.csv")).unwrap());
}

#[test]
fn grape_cnot_reaches_high_fidelity() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"
seed = 1
[system]
qubits = 2
uncertainty = "none"
[control]
dt_ns = 0.5
steps = 40
[task]
kind = "gate"
target = "cnot"
[optimizer]
method = "grape"
max_iters = 500
"#;
    ok(&run(dir.path(), cfg, &["optimize"]));
    let report = toml_value(&out(&dir, "report.toml"));
    let f = report["summary"]["gate_fidelity"].as_float().unwrap();
    assert!(f >= 0.99, "F_agf {f}");
}

#[test]
fn sweep_rejects_zero_count_and_bad_pulse() {
    let dir = TempDir::new().unwrap();
    let base = r#"
[system]
qubits = 1
[control]
dt_ns = 0.5
steps = 4
[robustness]
sigmas_mhz = [2.0]
[task]
kind = "gate"
target = "hadamard_transform"
"#;
    let pulse = dir.path().join("p.csv");
    std::fs::write(&pulse, "t_ns,u_1,u_2\n0,1,2\n0.5,1,2\n1,1,2\n1.5,1,2\n").unwrap();
    let p = pulse.to_str().unwrap();
    let o = run(dir.path(), &format!("{base}[sweep]\ncount = 0\n"), &["sweep", "--pulse", p]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&pulse, "t_ns,u_1\n0,1\n").unwrap();
    let o = run(dir.path(), &format!("{base}[sweep]\ncount = 5\n"), &["sweep", "--pulse", p]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pulse"));
}

fn sweep_stats(dir: &TempDir) -> (f64, Vec<f64>) {
    let summary = toml_value(&out(dir, "sweep_summary.toml"));
    let (_, rows) = table(&out(dir, "sweep_cdf.csv"));
    let cdf = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    (summary["mean_error"].as_float().unwrap(), cdf)
}

#[test]
fn robust_pulse_wins_paired_sweep() {
    let common = r#"
seed = 3
[system]
qubits = 1
[control]
dt_ns = 0.25
steps = 40
[robustness]
sigmas_mhz = [2.0]
[task]
kind = "gate"
target = "hadamard_transform"
[sweep]
count = 300
noise_seed = 11
thresholds = [0.001, 0.002, 0.005, 0.01, 0.02]
"#;
    let plain = TempDir::new().unwrap();
    let robust = TempDir::new().unwrap();
    let plain_cfg = format!("{common}[optimizer]\nmethod = \"grape\"\nmax_iters = 300\n");
    let robust_cfg = common.replace("[robustness]\n", "[robustness]\norder = 1\nlambda = 0.3\n")
        + "[optimizer]\nmethod = \"stgrape\"\nmax_iters = 600\n";
    ok(&run(plain.path(), &plain_cfg, &["optimize"]));
    ok(&run(robust.path(), &robust_cfg, &["optimize"]));
    for d in [&plain, &robust] {
        let p = out(d, "pulse.csv");
        let cfg = if d.path() == plain.path() { &plain_cfg } else { &robust_cfg };
        ok(&run(d.path(), cfg, &["sweep", "--pulse", p.to_str().unwrap()]));
        let (header, rows) = table(&out(d, "sweep_samples.csv"));
        assert_eq!(header, ["sample", "eps_1_mhz", "fidelity", "error"]);
        assert_eq!(rows.len(), 300);
    }
    let (e0, c0) = sweep_stats(&plain);
    let (e1, c1) = sweep_stats(&robust);
    assert!(e1 < e0, "robust {e1} vs plain {e0}");
    for (a, b) in c0.iter().zip(&c1) {
        assert!(b >= a, "cdf {c1:?} vs {c0:?}");
    }
}

#[test]
fn benchmark_writes_schema() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"
[benchmark]
qubits = [1, 2]
orders = [0, 1]
repeats = 2
"#;
    ok(&run(dir.path(), cfg, &["benchmark"]));
    let (header, rows) = table(&out(&dir, "benchmark.csv"));
    assert_eq!(header, ["backend", "n_q", "n", "d_aug", "median_ns", "mean_ns"]);
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert!(r[4].parse::<f64>().unwrap() > 0.0);
    }
}
