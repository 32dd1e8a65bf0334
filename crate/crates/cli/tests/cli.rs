use std::path::Path;
use std::process::Command;

use meanfield_cli::config::{self, Overrides};
use meanfield_cli::{prepare_from, validate};
use meanfield_core::thermo;

fn cfg(text: &str, out: &Path) -> config::ExperimentConfig {
    let mut c = config::parse(text).unwrap();
    c.output = Some(out.to_path_buf());
    c
}

fn run(recipe: &str, text: &str, out: &Path, threads: Option<usize>) -> std::path::PathBuf {
    let ov = Overrides {
        threads,
        ..Default::default()
    };
    prepare_from(recipe, cfg(text, out), &ov)
        .unwrap()
        .run()
        .unwrap()
        .dir
}

#[test]
fn fixed_point_artifact_matches_macro_limit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(
        "thermo-fixed-point",
        "seed = 4\n[grid]\neps = 15.0\n",
        tmp.path(),
        None,
    );
    let text = std::fs::read_to_string(dir.join("data.csv")).unwrap();
    let primary = text.lines().skip(1).find(|l| l.ends_with(",true")).unwrap();
    let phi: f64 = primary.split(',').nth(1).unwrap().parse().unwrap();
    let t = thermo::run_macro(15.0, 2000, &thermo::DensityRep::uniform()).unwrap();
    assert!((phi - t.phi.last().unwrap()).abs() < 1e-8);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    for key in [
        "recipe",
        "config",
        "seed",
        "runtime_s",
        "artifact_checksums",
    ] {
        assert!(manifest.get(key).is_some(), "{key}");
    }
}

const SMALL_SWEEP: &str = "seed = 9
[ensemble]
M = 400
N = 700
burn_in = 100
realizations = 3
[grid]
J = 40
";

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = run("sweep-uncoupled", SMALL_SWEEP, a.path(), Some(1));
    let db = run("sweep-uncoupled", SMALL_SWEEP, b.path(), Some(3));
    assert_eq!(da.file_name(), db.file_name());
    assert_eq!(
        std::fs::read(da.join("data.csv")).unwrap(),
        std::fs::read(db.join("data.csv")).unwrap()
    );
}

#[test]
fn lrt_test_reads_a_sweep_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run("sweep-uncoupled", SMALL_SWEEP, tmp.path(), None);
    let text = format!("seed = 1\n[analysis]\ninput = {:?}\n", dir.join("data.csv"));
    let out = run("lrt-test", &text, tmp.path(), None);
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    let p = r["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn validate_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let p = tmp.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    };
    let ov = Overrides::default();
    let ok = validate::validate(
        &write("ok.toml", "experiment = \"sweep-uncoupled\"\nseed = 1\n"),
        &ov,
    )
    .unwrap();
    assert!(ok.to_string().starts_with("OK"));
    assert_eq!(ok.grid_points, 128);

    let small = write(
        "j2.toml",
        "experiment = \"sweep-uncoupled\"\nseed = 1\n[grid]\nJ = 2\n",
    );
    let e = validate::validate(&small, &ov).unwrap_err();
    assert!(e.to_string().contains("grid size ≥ 4"), "{e}");

    let big = write(
        "big.toml",
        "experiment = \"sweep-coupled\"\nseed = 1\n[ensemble]\nM = 1000000000\n",
    );
    let r = validate::validate(&big, &ov).unwrap();
    assert!(r.warnings.iter().any(|w| w.contains("memory")), "{r}");

    let broken = write(
        "broken.toml",
        "experiment = \"sweep-coupled\"\nseed = 1\n[ensemble\nM = 3\n",
    );
    let e = validate::validate(&broken, &ov).unwrap_err();
    assert!(format!("{e:#}").contains("line 3"), "{e:#}");

    let noseed = write("noseed.toml", "experiment = \"noisy-scan\"\n");
    assert!(validate::validate(&noseed, &ov).is_err());
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.toml");
    std::fs::write(&p, "seed = 2\n").unwrap();
    let bin = env!("CARGO_BIN_EXE_meanfield");
    let out = Command::new(bin)
        .args(["no-such-recipe", "--config"])
        .arg(&p)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("unknown recipe"));
    assert!(err.lines().any(|l| l.starts_with("{\"error\"")));

    std::fs::write(
        &p,
        "experiment = \"thermo-lyapunov\"\nseed = 2\n[thermo]\nn_exp = 12\n",
    )
    .unwrap();
    let out = Command::new(bin)
        .args(["validate", "--config"])
        .arg(&p)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
