use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use tempfile::TempDir;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

fn aggsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value_of(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in\n{out}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn zero_storage_clear_costs_twelve_and_a_half() {
    let o = aggsim(&["clear", scenario("example1").to_str().unwrap(), "--zero-storage"]);
    assert!(o.status.success());
    assert!((value_of(&stdout(&o), "system_cost") - 12.5).abs() < 1e-6);
}

#[test]
fn compare_prints_both_rows() {
    let o = aggsim(&["compare", scenario("example1").to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row = |label: &str| -> Vec<f64> {
        let line = out.lines().find(|l| l.starts_with(label)).expect("row");
        line[label.len()..].split_whitespace().map(|v| v.parse().unwrap()).collect()
    };
    let social = row("social optimum");
    let market = row("market clearing");
    for (got, want) in social.iter().zip([1.8962, 9.6525, 20.25]) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
    for (got, want) in market.iter().zip([1.9766, 9.8646, 21.0469]) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn bargain_reports_agreed_spread() {
    let dir = TempDir::new().unwrap();
    let o = aggsim(&[
        "bargain",
        scenario("example1").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!((value_of(&stdout(&o), "spread") + 1.3112).abs() < 1e-3);
    assert!(dir.path().join("bargain.json").exists());
    let csv = fs::read_to_string(dir.path().join("frontier.csv")).unwrap();
    assert!(csv.starts_with("pi_s,pi_a,on_pareto_line,on_symmetry_line"));
}

#[test]
fn every_fixture_passes_every_command() {
    let commands = [
        "validate",
        "clear",
        "stackelberg",
        "cooperate",
        "bargain",
        "social",
        "mpmp",
        "compare",
        "sweep",
    ];
    for name in ["example1", "twobus", "threeperiod"] {
        let dir = TempDir::new().unwrap();
        for c in commands {
            let o = aggsim(&[
                c,
                scenario(name).to_str().unwrap(),
                "--out-dir",
                dir.path().to_str().unwrap(),
                "--points",
                "7",
                "--multistart",
                "2",
            ]);
            assert!(
                o.status.success(),
                "{c} {name}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
            assert!(dir.path().join(format!("{c}.json")).exists());
        }
        for csv in ["curve.csv", "frontier.csv", "region.csv"] {
            if name == "example1" || csv != "region.csv" {
                assert!(dir.path().join(csv).exists(), "{name} {csv}");
            }
        }
    }
}

#[test]
fn csv_output_is_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let o = aggsim(&[
            "sweep",
            scenario("example1").to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
            "--points",
            "15",
        ]);
        assert!(o.status.success());
    }
    for csv in ["curve.csv", "region.csv", "frontier.csv"] {
        let x = fs::read(a.path().join(csv)).unwrap();
        let y = fs::read(b.path().join(csv)).unwrap();
        assert_eq!(x, y, "{csv}");
    }
}

fn write_temp(dir: &TempDir, text: &str) -> String {
    let p = dir.path().join("s.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = TempDir::new().unwrap();
    let base = fs::read_to_string(scenario("example1")).unwrap();

    let o = aggsim(&["validate", &write_temp(&dir, "")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parse error"));

    let o = aggsim(&["validate", &write_temp(&dir, &base.replace("\"eta_minus\": 0.95", "\"eta_minus\": 1.5"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eta_minus"));

    let o = aggsim(&["validate", &write_temp(&dir, &base.replace("\"schema_version\": 1", "\"schema_version\": 7"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema_version 7"));

    let o = aggsim(&["stackelberg", scenario("example1").to_str().unwrap(), "--max-evals", "5"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stackelberg"));

    let o = aggsim(&["validate", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_code_mapping_looks_through_stages() {
    use storage_agg::Error;
    let infeasible = Error::InfeasibleDispatch {
        period: 0,
        reason: "test".into(),
    };
    assert_eq!(infeasible.exit_code(), 3);
    let wrapped = Error::Stage {
        stage: "clear".into(),
        source: Box::new(infeasible),
    };
    assert_eq!(wrapped.exit_code(), 3);
    assert!(wrapped.to_string().starts_with("clear: "));
    assert_eq!(Error::EmptyBargainingSet { unit: 0 }.exit_code(), 3);
    assert_eq!(Error::PreconditionViolated("x".into()).exit_code(), 2);
}
