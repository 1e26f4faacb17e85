use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn forklab(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_forklab"));
    c.args(args).env_remove("FORKLAB_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn scenario(rel: &str) -> String {
    corpus().join(rel).display().to_string()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn run_passes_when_outcome_matches_file() {
    let out = run(&mut forklab(&["run", &scenario("secret-query/vulnerable-cloning.toml")]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["outcome"]["cell"], "Succeeds");
}

#[test]
fn expect_mismatch_exits_one() {
    let out = run(&mut forklab(&["run", &scenario("secret-query/patched-cloning.toml"), "--expect", "succeeds"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected Succeeds, got Fails"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&mut forklab(&["run", &scenario("pouw/vulnerable-cloning.toml"), "--format", "xml"])).status.code(), Some(2));
    assert_eq!(run(&mut forklab(&["run", "/nonexistent.toml"])).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "protocol = \"pouw\"\nvariant = \"vulnerable\"\nattack = \"cloning\"\nseed = 1\n[params]\nclonez = 2\n").unwrap();
    let out = run(&mut forklab(&["run", bad.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("params.clonez"));
    let out = run(&mut forklab(&["run", &scenario("trials/ten-c2-m8.toml"), "--trials", "100", "--expect", "fails"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_precedence_is_file_env_flag() {
    let file = scenario("phala-worker/vulnerable-cloning.toml");
    assert_eq!(json(&run(&mut forklab(&["run", &file])))["seed"], 1);
    assert_eq!(json(&run(forklab(&["run", &file]).env("FORKLAB_SEED", "42")))["seed"], 42);
    assert_eq!(json(&run(forklab(&["run", &file, "--seed", "7"]).env("FORKLAB_SEED", "42")))["seed"], 7);
    assert_eq!(run(forklab(&["run", &file]).env("FORKLAB_SEED", "soon")).status.code(), Some(2));
}

#[test]
fn trials_report_frequency() {
    let out = run(&mut forklab(&["run", &scenario("trials/ten-c2-m8.toml"), "--trials", "400", "--format", "csv"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let row = rows.records().next().unwrap().unwrap();
    assert_eq!(&row[5], "400");
    let f: f64 = row[9].parse().unwrap();
    assert!((0.1..0.3).contains(&f), "{f}");
}

#[test]
fn matrix_writes_file_and_lists_all_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("matrix.csv");
    let corpus = corpus().display().to_string();
    let out = run(&mut forklab(&["matrix", "--corpus", &corpus, "--format", "csv", "--out", out_path.to_str().unwrap(), "--expect"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_path).unwrap();
    assert_eq!(text.lines().count(), 19);
    let listed = String::from_utf8(run(&mut forklab(&["list"])).stdout).unwrap();
    for id in ["pouw", "bite", "ten", "state-machine"] {
        assert!(listed.contains(id), "{listed}");
    }
}

#[test]
fn incomplete_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(corpus().join("pouw/vulnerable-cloning.toml"), dir.path().join("a.toml")).unwrap();
    let out = run(&mut forklab(&["matrix", "--corpus", dir.path().to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}
