use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn exforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exforge")).current_dir(dir).args(args).env_remove("EXFORGE_SEED").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = exforge(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_victim(dir: &Path) {
    ok(dir, &["train-victim", "--family", "spirals", "--n", "600", "--epochs", "20", "--hidden", "16", "--seed", "1", "--out", "v.json"]);
}

struct Server(Child, String);

impl Server {
    fn start(dir: &Path, budget: u64) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_exforge"))
            .current_dir(dir)
            .args(["serve", "--victim", "v.json", "--budget", &budget.to_string(), "--port", "0"])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.split_whitespace().nth(2).unwrap().to_string();
        Server(child, addr)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gen-data", "--family", "spirals", "--n", "3000", "--k", "3", "--seed", "7", "--out", "ds.json"]);
    assert!(stdout.contains("3000 rows"));
    let ds = json(&dir.path().join("ds.json"));
    assert_eq!(ds["labels"].as_array().unwrap().len(), 3000);
    let m = json(&dir.path().join("ds.manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["spec"]["family"], "spirals");
    let bytes = std::fs::read(dir.path().join("ds.json")).unwrap();
    let hash = m["outputs"][0]["blob_sha256"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);

    // The manifest alone regenerates the same bytes.
    let spec = m["config"]["spec"].to_string();
    std::fs::write(dir.path().join("spec.json"), spec).unwrap();
    ok(dir.path(), &["gen-data", "--config", "spec.json", "--out", "again.json"]);
    assert_eq!(std::fs::read(dir.path().join("again.json")).unwrap(), bytes);
    assert_eq!(json(&dir.path().join("again.manifest.json"))["outputs"][0]["blob_sha256"], hash.as_str());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exforge(dir.path(), &["gen-data", "--family", "spirals", "--bogus", "1", "--out", "x.json"]).status.code(), Some(1));
    assert_eq!(exforge(dir.path(), &["nonsense"]).status.code(), Some(1));
    assert_eq!(exforge(dir.path(), &["gen-data", "--family", "spirals", "--d", "3", "--out", "x.json"]).status.code(), Some(1));
    assert_eq!(exforge(dir.path(), &["gen-data", "--out", "x.json"]).status.code(), Some(1));
    assert_eq!(exforge(dir.path(), &["--help"]).status.code(), Some(0));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn attack_config_precedence_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_victim(dir.path());
    std::fs::write(dir.path().join("cfg.json"), r#"{"budget": 7000, "batch": 10, "seed": 4, "fwd": {"m": 2}, "student_hidden": [8]}"#)
        .unwrap();
    ok(dir.path(), &["attack", "--oracle", "v.json", "--config", "cfg.json", "--budget", "3000", "--eval-every", "1000", "--out", "run"]);
    let run = dir.path().join("run");
    for f in ["metrics.csv", "summary.json", "student.json", "generator.json", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let s = json(&run.join("summary.json"));
    assert_eq!(s["config"]["budget"], 3000);
    assert_eq!(s["config"]["batch"], 10);
    assert_eq!(s["config"]["seed"], 4);
    assert_eq!(s["config"]["fwd"]["m"], 2);
    assert_eq!(s["config"]["fwd"]["eps"], 1e-3);
    assert_eq!(s["config"]["n_s"], 5);
    assert!(s["queries_used"].as_u64().unwrap() <= 3000);
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["seed"], 4);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    let header = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(header.starts_with("queries_used,accuracy,fidelity,loss_mean,grad_norm_l1,grad_norm_kl,wall_ms\n"));
}

#[test]
fn env_seed_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_exforge"));
        c.current_dir(dir.path()).args(["gen-data", "--family", "blobs", "--n", "10", "--out", "b.json"]).args(extra);
        match env {
            Some(v) => c.env("EXFORGE_SEED", v),
            None => c.env_remove("EXFORGE_SEED"),
        };
        assert!(c.status().unwrap().success());
        json(&dir.path().join("b.manifest.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&[], None), 0);
    assert_eq!(run(&[], Some("12")), 12);
    assert_eq!(run(&["--seed", "3"], Some("12")), 3);
    let bad = Command::new(env!("CARGO_BIN_EXE_exforge"))
        .current_dir(dir.path())
        .args(["gen-data", "--family", "blobs", "--out", "b.json"])
        .env("EXFORGE_SEED", "x")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(1));
}

#[test]
fn served_attack_matches_local_attack() {
    let dir = tempfile::tempdir().unwrap();
    small_victim(dir.path());
    ok(dir.path(), &["gen-data", "--family", "spirals", "--n", "600", "--seed", "1", "--split", "test", "--out", "test.json"]);
    let flags = ["--budget", "6000", "--batch", "16", "--student-hidden", "16", "--eval-every", "1500", "--seed", "9"];
    let mut local = vec!["attack", "--oracle", "v.json", "--out", "local"];
    local.extend(flags);
    ok(dir.path(), &local);

    let server = Server::start(dir.path(), 6000);
    let mut remote = vec!["attack", "--oracle", server.1.as_str(), "--eval-data", "test.json", "--out", "remote"];
    remote.extend(flags);
    ok(dir.path(), &remote);

    let strip = |p: &str| -> String {
        std::fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip("local/metrics.csv"), strip("remote/metrics.csv"));
    assert_eq!(
        std::fs::read(dir.path().join("local/student.json")).unwrap(),
        std::fs::read(dir.path().join("remote/student.json")).unwrap()
    );

    // The server's budget is spent; another distillation run is refused.
    let out =
        exforge(dir.path(), &["distill", "--oracle", &server.1, "--surrogate", "test.json", "--eval-data", "test.json", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_and_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["verify", "lemma1", "--trials", "200", "--out", "l1.json"]);
    assert_eq!(json(&dir.path().join("l1.json"))["status"], "pass");
    assert!(dir.path().join("l1.manifest.json").is_file());
    let stdout = ok(dir.path(), &["verify", "lemma2", "--trials", "500"]);
    assert_eq!(serde_json::from_str::<Value>(&stdout).unwrap()["violations"], 0);

    small_victim(dir.path());
    for (name, m) in [("a", "1"), ("b", "2")] {
        ok(
            dir.path(),
            &[
                "attack",
                "--oracle",
                "v.json",
                "--budget",
                "2000",
                "--batch",
                "10",
                "--m",
                m,
                "--eval-every",
                "500",
                "--diagnostics",
                "--out",
                &format!("runs/{name}"),
            ],
        );
    }
    ok(dir.path(), &["report", "--in", "runs", "--out", "tables", "--target", "0.0"]);
    let t3 = std::fs::read_to_string(dir.path().join("tables/table3.csv")).unwrap();
    assert_eq!(t3.lines().count(), 3);
    assert!(json(&dir.path().join("tables/manifest.json"))["inputs"].as_array().unwrap().len() == 4);
    let h1 = exforge(dir.path(), &["verify", "hypothesis1", "--run", "runs/a"]);
    assert!(h1.status.code().is_some_and(|c| c <= 1));
    let rep: Value = serde_json::from_slice(&h1.stdout).unwrap();
    assert_eq!(rep["series"]["ratio"].as_array().unwrap().len(), 5);
    assert_eq!(exforge(dir.path(), &["report", "--in", "nowhere", "--out", "t"]).status.code(), Some(1));
}
