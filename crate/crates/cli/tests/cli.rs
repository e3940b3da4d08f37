use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn adl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adl")).args(args).output().expect("binary runs")
}

fn adl_threads(threads: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adl")).env("ADL_THREADS", threads).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("adl-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(dir: &PathBuf, file: &str, text: &str) -> String {
    let p = dir.join(file);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn report(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stdout).expect("stdout is JSON");
    v["report"].clone()
}

const ZERO_NET: &str = r#"{"dims":[2,3,1],"activation":"softplus","layers":[[0,0,0,0,0,0],[0,0,0]],"r":1,"R":1}"#;
const DATA: &str = "x0,x1\n1,0\n0.5,-0.5\n";

#[test]
fn enum_brackets_csv() {
    let out = adl(&["enum-brackets", "--n", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text,
        "parameter,measured,bound,se,pass\n1,2.0,32.0,0.0,true\n2,6.0,1024.0,0.0,true\n3,30.0,32768.0,0.0,true\n"
    );
}

#[test]
fn unknown_suite_is_usage_error() {
    let out = adl(&["verify", "--suite", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_is_deterministic_across_thread_counts() {
    let args = ["verify", "--suite", "median", "--trials", "2000", "--seed", "3"];
    let a = adl_threads("1", &args);
    let b = adl_threads("3", &args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(report(&a)["passed"], Value::Bool(true));
}

#[test]
fn verify_writes_csv() {
    let dir = scratch("verify-csv");
    let csv = dir.join("checks.csv");
    let out = adl(&["verify", "--suite", "estimators", "--trials", "1000", "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("parameter,measured,bound,se,pass\n"));
    assert!(text.lines().count() > 2);
}

#[test]
fn zero_difference_compress_passes() {
    let dir = scratch("zero");
    let net = write(&dir, "net.json", ZERO_NET);
    let data = write(&dir, "data.csv", DATA);
    let out = adl(&["compress", "--net", &net, "--data", &data, "--draws", "300", "--persist", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert_eq!(r["draws"], 300);
    assert_eq!(r["persisted"].as_array().unwrap().len(), 3);
    assert!(r["variance"]["mean_error_inf"].as_f64().unwrap() < 1e-9);
}

#[test]
fn zero_draws_is_theoretical_only() {
    let dir = scratch("theory");
    let net = write(&dir, "net.json", ZERO_NET);
    let data = write(&dir, "data.csv", DATA);
    let out = adl(&["compress", "--net", &net, "--data", &data, "--draws", "0"]);
    assert!(out.status.success());
    let r = report(&out);
    assert!(r.get("variance").is_none());
    assert!(r["theoretical"]["n"].as_f64().unwrap() > 0.0);
}

#[test]
fn malformed_network_names_field() {
    let dir = scratch("malformed");
    let net = write(&dir, "net.json", r#"{"dims":[2,1],"activation":"softplus","layers":[[1,"x"]],"r":1,"R":1}"#);
    let data = write(&dir, "data.csv", DATA);
    let out = adl(&["compress", "--net", &net, "--data", &data]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers[0][1]"));
}

#[test]
fn missing_file_is_usage_error() {
    let out = adl(&["compress", "--net", "/nonexistent/net.json", "--data", "/nonexistent/d.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bound_report() {
    let dir = scratch("bound");
    let net = write(&dir, "net.json", ZERO_NET);
    let out = adl(&["bound", "--net", &net, "--m", "100", "--lipschitz", "1", "--loss-bound", "1", "--delta", "0.05"]);
    assert!(out.status.success());
    let r = report(&out);
    let e = r["expected_representativeness"].as_f64().unwrap();
    let h = r["high_probability_representativeness"].as_f64().unwrap();
    assert!(e > 0.0 && h >= e);
    let bad = adl(&["bound", "--net", &net, "--m", "100", "--lipschitz", "1", "--loss-bound", "1", "--delta", "2"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn shatter_square_case() {
    let out = adl(&["shatter", "--d", "8", "--k", "8", "--points", "3", "--labelings", "5", "--relu-checks", "2"]);
    assert!(out.status.success());
    let r = report(&out);
    assert_eq!(r["feasible_count"], 5);
}

#[test]
fn shatter_oversized_reports_infeasible() {
    let out = adl(&["shatter", "--d", "8", "--k", "2", "--points", "40", "--labelings", "5", "--relu-checks", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert!(r["feasible_count"].as_u64().unwrap() < 5);
}

#[test]
fn shatter_dumps_loadable_network() {
    let dir = scratch("dump");
    let path = dir.join("relu.json");
    let out = adl(&[
        "shatter", "--d", "8", "--k", "8", "--points", "3", "--labelings", "2", "--relu-checks", "1", "--dump-net",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let net: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(net["activation"], "relu");
}
