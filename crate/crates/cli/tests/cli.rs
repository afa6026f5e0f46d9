use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const MECHANISMS: [&str; 5] = ["sqm", "identity", "workload", "timm", "tamm"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dp-sumquery"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A small but complete run: coarse buckets and few trials.
fn quick_run(dir: &Path, out_dir: &str, extra: &[&str]) -> Output {
    seeded_run(dir, out_dir, "7", extra)
}

fn seeded_run(dir: &Path, out_dir: &str, seed: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--workload",
        "Q3",
        "--bucket-width",
        "8000",
        "--trials",
        "6",
        "--synthetic",
        "--synthetic-n",
        "3000",
        "--seed",
        seed,
        "--out-dir",
        out_dir,
    ];
    args.extend_from_slice(extra);
    run_in(dir, &args)
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_one_table_per_mechanism() {
    let tmp = TempDir::new().unwrap();
    let out = quick_run(tmp.path(), "out", &["--trunc", "svt"]);
    assert_ok(&out);
    let dir = tmp.path().join("out");
    for m in MECHANISMS {
        let text = read(dir.join(format!("{m}.csv")));
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "query_threshold,true_answer,mean_answer,mean_rel_err,p5_rel_err,p95_rel_err"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 10, "{m}");
        for row in rows {
            let fields: Vec<f64> = row.split(',').map(|f| f.parse().unwrap()).collect();
            assert_eq!(fields.len(), 6);
            assert!(fields.iter().all(|v| v.is_finite()), "{m}: {row}");
            assert!(fields[4] <= fields[5], "{m}: {row}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["records"], 3000);
    assert_eq!(manifest["mechanisms"].as_object().unwrap().len(), 5);
    assert!(dir.join("config.toml").exists());
}

#[test]
fn mechanism_subset_writes_only_those_tables() {
    let tmp = TempDir::new().unwrap();
    let out = quick_run(tmp.path(), "out", &["--mechanisms", "identity,tamm", "--trunc", "none"]);
    assert_ok(&out);
    assert_eq!(csv_files(&tmp.path().join("out")), ["identity.csv", "tamm.csv"]);
}

#[test]
fn same_seed_gives_identical_tables() {
    let tmp = TempDir::new().unwrap();
    assert_ok(&quick_run(tmp.path(), "a", &[]));
    assert_ok(&quick_run(tmp.path(), "b", &[]));
    for m in MECHANISMS {
        let file = format!("{m}.csv");
        assert_eq!(
            read(tmp.path().join("a").join(&file)),
            read(tmp.path().join("b").join(&file)),
            "{m}"
        );
    }
    assert_ok(&seeded_run(tmp.path(), "c", "8", &[]));
    assert_ne!(
        read(tmp.path().join("a/identity.csv")),
        read(tmp.path().join("c/identity.csv"))
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let mut one = bin();
    one.current_dir(tmp.path()).env("DP_SUMQUERY_THREADS", "1");
    let args = [
        "run",
        "--workload",
        "Q2",
        "--bucket-width",
        "8000",
        "--trials",
        "5",
        "--synthetic",
        "--synthetic-n",
        "2000",
        "--out-dir",
    ];
    assert_ok(&one.args(args).arg("single").output().unwrap());
    let mut many = bin();
    many.current_dir(tmp.path()).env("DP_SUMQUERY_THREADS", "4");
    assert_ok(&many.args(args).arg("multi").output().unwrap());
    for m in MECHANISMS {
        let file = format!("{m}.csv");
        assert_eq!(
            read(tmp.path().join("single").join(&file)),
            read(tmp.path().join("multi").join(&file)),
            "{m}"
        );
    }

    let mut bad = bin();
    bad.current_dir(tmp.path()).env("DP_SUMQUERY_THREADS", "zero");
    let out = bad.args(args).arg("bad").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn recorded_config_replays_the_run() {
    let tmp = TempDir::new().unwrap();
    assert_ok(&quick_run(tmp.path(), "first", &["--trunc", "recursive"]));
    let config = tmp.path().join("first/config.toml");
    let out = run_in(
        tmp.path(),
        &["run", "--config", config.to_str().unwrap(), "--out-dir", "replay"],
    );
    assert_ok(&out);
    for m in MECHANISMS {
        let file = format!("{m}.csv");
        assert_eq!(
            read(tmp.path().join("first").join(&file)),
            read(tmp.path().join("replay").join(&file)),
            "{m}"
        );
    }
}

#[test]
fn config_file_and_data_file() {
    let tmp = TempDir::new().unwrap();
    let values: String = (0..500).map(|i| format!("{}\n", (i * 997) % 790_000)).collect();
    fs::write(tmp.path().join("incomes.csv"), format!("income\n{values}")).unwrap();
    fs::write(
        tmp.path().join("exp.toml"),
        "workload = \"Q1\"\nbucket_width = 800.0\ntrials = 4\nmechanisms = [\"identity\", \"sqm\"]\n\
         trunc = \"none\"\ndata = \"incomes.csv\"\n",
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &["run", "--config", "exp.toml", "--trials", "3", "--out-dir", "res"],
    );
    assert_ok(&out);
    assert_eq!(csv_files(&tmp.path().join("res")), ["identity.csv", "sqm.csv"]);
    let manifest: serde_json::Value = serde_json::from_str(&read(tmp.path().join("res/manifest.json"))).unwrap();
    assert_eq!(manifest["records"], 500);
    assert_eq!(manifest["config"]["trials"], 3);
}

#[test]
fn gen_data_is_seeded() {
    let tmp = TempDir::new().unwrap();
    let gen = |name: &str, seed: &str| run_in(tmp.path(), &["gen-data", "--n", "40000", "--seed", seed, "--out", name]);
    assert_ok(&gen("a.csv", "3"));
    assert_ok(&gen("b.csv", "3"));
    assert_ok(&gen("c.csv", "4"));
    let a = read(tmp.path().join("a.csv"));
    assert_eq!(a.lines().next(), Some("income"));
    assert_eq!(a.lines().count(), 40_001);
    assert!(a
        .lines()
        .skip(1)
        .all(|l| l.parse::<f64>().is_ok_and(|v| (0.0..=8e5).contains(&v))));
    assert_eq!(a, read(tmp.path().join("b.csv")));
    assert_ne!(a, read(tmp.path().join("c.csv")));

    let out = run_in(tmp.path(), &["gen-data", "--n", "0", "--out", "empty.csv"]);
    assert!(!out.status.success());
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    for extra in [
        &["--epsilon", "-1"][..],
        &["--rho", "1.5"],
        &["--mechanisms", "laplace"],
        &["--trunc", "sometimes"],
        &["--trials", "0"],
    ] {
        let out = quick_run(tmp.path(), "out", extra);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{extra:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    }
    fs::write(tmp.path().join("typo.toml"), "epsilonn = 0.1\n").unwrap();
    let out = run_in(tmp.path(), &["run", "--config", "typo.toml", "--synthetic"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("out").exists() || csv_files(&tmp.path().join("out")).is_empty());
}

#[test]
fn data_errors_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        ("negative.csv", "income\n10\n-4\n"),
        ("text.csv", "10\nabc\n"),
        ("too_large.csv", "10\n900000\n"),
    ];
    for (name, body) in cases {
        fs::write(tmp.path().join(name), body).unwrap();
        let out = run_in(
            tmp.path(),
            &["run", "--data", name, "--trials", "2", "--out-dir", "out"],
        );
        assert_eq!(
            out.status.code(),
            Some(3),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = run_in(tmp.path(), &["run", "--data", "missing.csv", "--out-dir", "out"]);
    assert_eq!(out.status.code(), Some(3));
}
