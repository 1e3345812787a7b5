use std::path::Path;
use std::process::{Command, Output};

const SMALL_CONFIG: &str = "\
[train]
lr = 5e-3
temperature = 0.3
batch_size = 4
max_steps = 20

[data]
corpus_pairs = 200
eval_pairs = 20
";

fn dualhead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualhead")).args(args).output().expect("spawn dualhead")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for p in [&a, &b] {
        let out = dualhead(&["--seed", "7", "--out", s(p), "gen-corpus", "--pairs", "50"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = dir.path().join("c.bin");
    dualhead(&["--seed", "8", "--out", s(&other), "gen-corpus", "--pairs", "50"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dualhead(&["no-such-command"])), 2);
    assert_eq!(code(&dualhead(&["generate", "--max-new", "many"])), 2);
    assert_eq!(code(&dualhead(&[])), 2);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dualhead(&["ablate", "--retrieval", s(&missing), "--joint", s(&missing)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nno_such_field = 1\n").unwrap();
    assert_eq!(code(&dualhead(&["--config", s(&bad), "efficiency"])), 1);

    assert_eq!(code(&dualhead(&["gen-corpus"])), 1, "--out is required");
}

#[test]
fn equivalence_passes_on_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("eq.jsonl");
    let out = dualhead(&["--out", s(&report), "equivalence", "--n", "10", "--max-new", "6"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("[PASS] greedy byte-identical"));
    let text = std::fs::read_to_string(&report).unwrap();
    for line in text.lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("every report line is JSON");
    }
}

#[test]
fn train_then_serve_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ckpt = dir.path().join("ckpt");

    let out = dualhead(&["--config", &cfg, "--out", s(&ckpt), "train"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.join("manifest.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ckpt.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 20);
    assert_eq!(report["base_max_abs_delta"], 0.0);

    let out = dualhead(&["contamination", "--checkpoint", s(&ckpt), "--n", "5", "--max-new", "4"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("max diff 0"));

    let corpus = dir.path().join("corpus.bin");
    let index = dir.path().join("index.bin");
    assert_eq!(code(&dualhead(&["--out", s(&corpus), "gen-corpus", "--pairs", "20"])), 0);
    let out = dualhead(&["--out", s(&index), "index", "--checkpoint", s(&ckpt), "--corpus", s(&corpus)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = dualhead(&[
        "search", "--checkpoint", s(&ckpt), "--index", s(&index), "--corpus", s(&corpus), "--pair", "3", "--k", "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let hits: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let hits = hits["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 4);
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let gen = |ck: &str| {
        let out = dualhead(&["generate", "--checkpoint", ck, "--tokens", "5,9,12", "--max-new", "6"]);
        assert_eq!(code(&out), 0);
        stdout(&out)
    };
    let fresh = dir.path().join("fresh");
    assert_eq!(code(&dualhead(&["--config", &cfg, "--out", s(&fresh), "train", "--steps", "0"])), 0);
    assert_eq!(gen(s(&ckpt)), gen(s(&fresh)), "generation ignores trained adapters");
}

#[test]
fn efficiency_reports_pass() {
    let out = dualhead(&["efficiency"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("[PASS] single model smaller"));
}
