use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_lastrank");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn lastrank")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus trained evaluator and actor, built once per test binary.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn model_args(&self) -> Vec<String> {
        vec![
            "--actor".into(),
            s(&self.path("actor.json")).into(),
            "--evaluator".into(),
            s(&self.path("eval.json")).into(),
        ]
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        run_ok(&["gen-data", "--out", s(&data), "--train", "300", "--test", "60", "--seed", "7"]);
        run_ok(&[
            "train",
            "--target",
            "evaluator",
            "--data",
            s(&data.join("train.jsonl")),
            "--out",
            s(&root.join("eval.json")),
            "--epochs",
            "2",
        ]);
        run_ok(&[
            "train",
            "--target",
            "actor",
            "--data",
            s(&data.join("train.jsonl")),
            "--out",
            s(&root.join("actor.json")),
            "--evaluator",
            s(&root.join("eval.json")),
            "--epochs",
            "2",
        ]);
        Fixture { _dir: dir, root }
    })
}

fn args<'a>(head: &[&'a str], owned: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(owned.iter().map(String::as_str)).collect()
}

#[test]
fn gen_data_is_deterministic_and_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&["gen-data", "--out", s(out), "--train", "50", "--test", "10", "--seed", "3"]);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["test.jsonl", "train.jsonl", "world.json"]);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap());
    }
}

#[test]
fn gen_data_rejects_list_longer_than_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", s(dir.path()), "-m", "3", "-n", "5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n <= m"));
}

#[test]
fn learned_reward_needs_evaluator_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--target",
        "actor",
        "--reward",
        "learned",
        "--data",
        s(&f.path("data/train.jsonl")),
        "--out",
        s(&dir.path().join("a.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--evaluator"));
    assert!(!dir.path().join("a.json").exists());
}

#[test]
fn training_is_reproducible_and_curve_has_one_row_per_epoch() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        run_ok(&[
            "train",
            "--target",
            "actor",
            "--reward",
            "ndcg",
            "--data",
            s(&f.path("data/train.jsonl")),
            "--out",
            s(&out),
            "--epochs",
            "3",
            "--seed",
            "11",
        ]);
        bytes.push(std::fs::read(&out).unwrap());
        let curve = std::fs::read_to_string(dir.path().join(format!("{name}.curve.csv"))).unwrap();
        let lines: Vec<_> = curve.lines().collect();
        assert_eq!(lines[0], "epoch,heldout_reward");
        assert_eq!(lines.len(), 1 + 3);
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn eval_reports_equal_budgets_and_is_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let owned = f.model_args();
    let data = f.path("data/test.jsonl");
    let cmd = args(&["eval", "--data", s(&data), "--budget", "7", "--out", s(&csv)], &owned);
    let first = run_ok(&cmd);
    let second = run_ok(&cmd);
    assert_eq!(first, second);

    let text = std::fs::read_to_string(&csv).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header[..7],
        ["policy", "map@5", "map@10", "ndcg@5", "ndcg@10", "evaluator@5", "evaluator@10"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let col = |policy: &str, name: &str| -> String {
        let i = header.iter().position(|h| h == name).unwrap();
        rows.iter().find(|r| &r[0] == policy).unwrap()[i].to_string()
    };
    let eval5 = |p: &str| col(p, "evaluator@5").parse::<f64>().unwrap();
    assert!(eval5("last") >= eval5("greedy"));
    assert_eq!(col("last", "lists_generated"), "420");
    assert_eq!(col("sampling", "lists_generated"), "420");
    assert_eq!(col("greedy", "lists_generated"), "60");
    assert_eq!(col("last", "p_vs_last"), "");
    let p: f64 = col("greedy", "p_vs_last").parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn eval_rejects_unknown_policy() {
    let f = fixture();
    let owned = f.model_args();
    let out = run(&args(
        &["eval", "--data", s(&f.path("data/test.jsonl")), "--policies", "greedy,oracle"],
        &owned,
    ));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("oracle"));
}

#[test]
fn sweeps() {
    let f = fixture();
    let owned = f.model_args();
    let data = f.path("data/test.jsonl");
    let steps = run_ok(&args(
        &["sweep", "--data", s(&data), "--param", "steps", "--values", "1,3,5,7,9,11"],
        &owned,
    ));
    let means: Vec<f64> = steps
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(means.len(), 6);
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");

    let alpha = run_ok(&args(
        &["sweep", "--data", s(&data), "--param", "alpha", "--values", "0.001,0.005,0.01,0.05,0.1"],
        &owned,
    ));
    assert_eq!(alpha.lines().next(), Some("alpha,mean_score"));
    assert_eq!(alpha.lines().count(), 6);

    let empty = run(&args(&["sweep", "--data", s(&data), "--param", "alpha", "--values"], &owned));
    assert!(!empty.status.success());
    let bad = run(&args(&["sweep", "--data", s(&data), "--param", "beta", "--values", "1"], &owned));
    assert!(!bad.status.success());
}

fn serve_requests() -> String {
    let f = fixture();
    let test = std::fs::read_to_string(f.path("data/test.jsonl")).unwrap();
    let mut lines = Vec::new();
    for (i, line) in test.lines().take(6).enumerate() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        let req = serde_json::json!({"user": r["user"], "candidates": r["items"], "n": 3 + i % 3});
        lines.push(req.to_string());
    }
    lines.insert(2, "{not json".into());
    lines.join("\n") + "\n"
}

#[test]
fn serve_streams_one_response_per_request() {
    let f = fixture();
    let owned = f.model_args();
    let input = serve_requests();
    for mode in ["greedy", "sampling", "last", "cascade"] {
        let cmd = args(&["serve", "--mode", mode], &owned);
        let out = run_with_stdin(&cmd, &input);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[2].get("error").is_some());
        for (i, v) in lines.iter().enumerate().filter(|(i, _)| *i != 2) {
            let k = if i < 2 { i } else { i - 1 };
            assert_eq!(v["order"].as_array().unwrap().len(), 3 + k % 3);
            assert!(v["eta_star"].is_number());
            assert!(v["score"].is_number());
        }
        // replay gives identical bytes
        let again = run_with_stdin(&cmd, &input);
        assert_eq!(text.as_bytes(), &again.stdout[..]);
    }
}

#[test]
fn serve_edge_cases() {
    let f = fixture();
    let owned = f.model_args();
    let cmd = args(&["serve", "--mode", "last"], &owned);
    let before = std::fs::read(f.path("actor.json")).unwrap();

    let out = run_with_stdin(&cmd, "");
    assert!(out.status.success());
    assert!(out.stdout.is_empty());

    let single = serde_json::json!({"user": vec![0.1; 8], "candidates": [vec![0.2; 8]], "n": 1});
    let out = run_with_stdin(&cmd, &format!("{single}\n"));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["order"], serde_json::json!([0]));

    let wrong = serde_json::json!({"user": [0.1], "candidates": [[0.2]], "n": 1});
    let out = run_with_stdin(&cmd, &format!("{wrong}\n{single}\n"));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("error"));
    assert!(lines[1].contains("order"));

    assert_eq!(std::fs::read(f.path("actor.json")).unwrap(), before);
}
