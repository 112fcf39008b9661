//! End-to-end runs of the binary against the bundled fixtures.

use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treepot"))
        .args(args)
        .env("TREEPOT_FIXTURES", concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("json on stderr")
}

#[test]
fn verify_inverse_on_f1() {
    let o = run(&["tree", "verify-inverse", "--spec", "f1.json", "--depth", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["residual"], 0.0);
    assert_eq!(v["certified"], true);
}

#[test]
fn f1_potential_csv() {
    let o = run(&["tree", "potential", "--spec", "f1.json", "--depth", "1", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect();
    let want = [[2.0, 1.0, 2.0], [1.0, 2.0, 1.0], [2.0, 1.0, 5.0]];
    for (r, w) in rows.iter().zip(want) {
        for (a, b) in r.iter().zip(w) {
            assert!((a - b / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn f4_generator_check() {
    let o = run(&["ultra", "generator", "--matrix", "f4.csv", "--check", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.last(), Some(&"QU=-I certified"));
    assert_eq!(lines[1], "1,2.5000000000000000e0,-1.0000000000000000e0,-5.0000000000000000e-1");
}

#[test]
fn non_ultrametric_matrix_is_a_hypothesis_error() {
    let dir = std::env::temp_dir().join(format!("treepot-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join("bad.csv");
    std::fs::write(&p, "1,0.3,0.5\n0.3,1,0.4\n0.5,0.4,1\n").unwrap();
    let o = run(&["ultra", "check", "--matrix", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let e = stderr_json(&o);
    assert_eq!(e["module"], "cli");
    assert_eq!(e["code"], 4);
    assert_eq!((e["context"]["i"].as_str(), e["context"]["j"].as_str()), (Some("1"), Some("2")));
}

#[test]
fn error_schema_and_codes() {
    let o = run(&["boundary", "simulate", "--spec", "homog2.json", "--paths", "10"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    for k in ["code", "module", "message", "context"] {
        assert!(e.get(k).is_some(), "{k}");
    }
    let o = run(&["tree", "potential", "--spec", "does-not-exist.json"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["boundary", "simulate", "--reflected", "--spec", "homog2.json", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(7));
    let o = run(&["martin", "kernel", "--spec", "homog2.json", "--node", "0.x", "--ray", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn boundary_simulation_is_reproducible() {
    let args = ["boundary", "simulate", "--spec", "homog2.json", "--resolution", "4", "--paths", "20000", "--seed", "7"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let v = stdout_json(&a);
    let ci = &v["lifetime"]["ci95"];
    let (lo, hi) = (ci[0].as_f64().unwrap(), ci[1].as_f64().unwrap());
    assert!(lo < 5.0 / 3.0 && 5.0 / 3.0 < hi, "{lo} {hi}");
}

#[test]
fn spine_ray_report() {
    let o = run(&["martin", "ray", "--spec", "figure2.json", "--ray", ""]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["summary"], "irregular but accessible");
}

#[test]
fn word_family_two_is_flagged_empty() {
    let o = run(&["ultra", "boundary", "--spec", "word2.json"]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["empty"], true);
    assert_eq!(v["lemma_consistent"], false);
}
