use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "encoder": {"d_vision": 8, "d_text": 8, "d_ff": 16},
  "graph": {"d_graph": 8},
  "decoder": {"d_model": 8, "d_ff": 16, "n_layers": 1},
  "train": {"epochs": 1}
}"#;

fn ctvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctvqa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctvqa(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn generate(&self, name: &str, seed: u64) -> PathBuf {
        let out = self.path(name);
        ok(&["generate", "--seed", &seed.to_string(), "--out", s(&out), "--volumes", "10"]);
        out
    }

    fn train(&self, data: &Path, ckpt: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(ckpt);
        let cfg = self.path("tiny.json");
        let mut args = vec!["train", "--data", s(data), "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn first_test_item(data: &Path) -> serde_json::Value {
    let text = fs::read_to_string(data.join("test.jsonl")).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn help_and_bad_flags() {
    assert!(ctvqa(&["--help"]).status.success());
    assert!(ctvqa(&["train", "--help"]).status.success());
    let out = ctvqa(&["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn generate_is_deterministic_and_refuses_to_clobber() {
    let f = Fixture::new();
    let a = f.generate("a", 5);
    let b = f.generate("b", 5);
    for name in ["manifest.json", "train.jsonl", "test.jsonl", "volumes/train-00003.vol"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let train = manifest["splits"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["split"] == "train")
        .unwrap();
    assert_eq!(train["volumes"], 10);

    let again = ctvqa(&["generate", "--seed", "5", "--out", s(&a), "--volumes", "10"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["generate", "--seed", "5", "--out", s(&a), "--volumes", "10", "--force"]);
}

#[test]
fn train_is_reproducible_and_logs_a_finite_curve() {
    let f = Fixture::new();
    let data = f.generate("data", 1);
    let c1 = f.train(&data, "one.ckpt", &["--epochs", "2"]);
    let c2 = f.train(&data, "two.ckpt", &["--epochs", "2"]);
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());

    let curve: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("one.ckpt.loss.json")).unwrap()).unwrap();
    let epochs = curve["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 2);
    assert!(epochs.iter().all(|e| e["mean_loss"].as_f64().unwrap().is_finite()));
}

#[test]
fn flags_override_the_config_file() {
    let f = Fixture::new();
    let data = f.generate("data", 2);
    let cfg = f.path("seeded.json");
    fs::write(
        &cfg,
        r#"{"encoder": {"d_vision": 8, "d_text": 8, "d_ff": 16}, "graph": {"d_graph": 8, "variant": "gcn"},
            "decoder": {"d_model": 8, "d_ff": 16, "n_layers": 1}, "train": {"epochs": 1, "seed": 5}}"#,
    )
    .unwrap();
    let sidecar = |ckpt: &Path| -> serde_json::Value {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".json");
        serde_json::from_str(&fs::read_to_string(PathBuf::from(p)).unwrap()).unwrap()
    };

    // file beats default
    let out = f.path("file.ckpt");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    let meta = sidecar(&out);
    assert_eq!(meta["train"]["seed"], 5);
    assert_eq!(meta["model"]["graph"]["variant"], "gcn");
    assert_eq!(meta["train"]["batch_size"], 16);

    // flag beats file
    let out = f.path("flag.ckpt");
    ok(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--seed", "7", "--variant", "gat",
        "--batch-size", "8",
    ]);
    let meta = sidecar(&out);
    assert_eq!(meta["train"]["seed"], 7);
    assert_eq!(meta["model"]["graph"]["variant"], "gat");
    assert_eq!(meta["train"]["batch_size"], 8);
    assert_eq!(meta["train"]["epochs"], 1);
}

#[test]
fn config_errors_name_the_key() {
    let f = Fixture::new();
    let data = f.generate("data", 3);
    let cfg = f.path("bad.json");
    fs::write(&cfg, "{\n  \"train\": {\"epochz\": 1}\n}").unwrap();
    let out = ctvqa(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&f.path("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz") && err.contains("line 2"), "{err}");
}

#[test]
fn evaluate_answer_and_dump_agree() {
    let f = Fixture::new();
    let data = f.generate("data", 4);
    let ckpt = f.train(&data, "m.ckpt", &[]);

    let r1 = f.path("r1");
    let r2 = f.path("r2");
    let table = ok(&["evaluate", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&r1)]);
    ok(&["evaluate", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&r2)]);
    assert!(table.starts_with("Metric"));
    assert_eq!(fs::read(r1.join("report.json")).unwrap(), fs::read(r2.join("report.json")).unwrap());

    // answer runs the same decode path as evaluate
    let item = first_test_item(&data);
    let volume = data.join("volumes").join(format!("{}.vol", item["volume_id"].as_str().unwrap()));
    let question = item["question"].as_str().unwrap();
    let predictions = fs::read_to_string(r1.join("predictions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(predictions.lines().next().unwrap()).unwrap();
    let said = ok(&["answer", "--ckpt", s(&ckpt), "--volume", s(&volume), "--question", question]);
    assert_eq!(said.trim(), first["prediction"].as_str().unwrap().trim());

    let with_k = ok(&["answer", "--ckpt", s(&ckpt), "--volume", s(&volume), "--question", question, "--top-k", "3"]);
    assert!(with_k.lines().any(|l| l.starts_with("step 1:")));

    // json dump
    let json = f.path("trace.json");
    ok(&["dump-attention", "--ckpt", s(&ckpt), "--volume", s(&volume), "--question", question, "--out", s(&json)]);
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let n = trace["num_nodes"].as_u64().unwrap() as usize;
    let slices = trace["node_kinds"].as_array().unwrap().iter().filter(|k| k.to_string().contains("slice")).count();
    assert_eq!(trace["slice_importance"].as_array().unwrap().len(), slices);
    for layer in trace["layers"].as_array().unwrap() {
        let w: Vec<f64> = layer.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        for row in w.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    // csv dump
    let csv = f.path("trace.csv");
    ok(&["dump-attention", "--ckpt", s(&ckpt), "--volume", s(&volume), "--question", question, "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("layer,j,k,w"));
    assert_eq!(text.lines().count(), 1 + 2 * n * n);
}

#[test]
fn answer_warns_once_per_unknown_word_and_rejects_empty_questions() {
    let f = Fixture::new();
    let data = f.generate("data", 6);
    let ckpt = f.train(&data, "m.ckpt", &[]);
    let item = first_test_item(&data);
    let volume = data.join("volumes").join(format!("{}.vol", item["volume_id"].as_str().unwrap()));

    let out = ctvqa(&[
        "answer", "--ckpt", s(&ckpt), "--volume", s(&volume), "--question", "which zorgle zorgle is blorp",
    ]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.matches("'zorgle'").count(), 1, "{err}");
    assert_eq!(err.matches("'blorp'").count(), 1, "{err}");

    let out = ctvqa(&["answer", "--ckpt", s(&ckpt), "--volume", s(&volume), "--question", "  "]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn graph_free_checkpoints_have_no_attention() {
    let f = Fixture::new();
    let data = f.generate("data", 7);
    let ckpt = f.train(&data, "none.ckpt", &["--variant", "none"]);
    let item = first_test_item(&data);
    let volume = data.join("volumes").join(format!("{}.vol", item["volume_id"].as_str().unwrap()));
    let out = ctvqa(&[
        "dump-attention", "--ckpt", s(&ckpt), "--volume", s(&volume), "--question", "which organ is shown",
        "--out", s(&f.path("t.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("graph"));
}

#[test]
fn mismatched_checkpoint_config_is_rejected() {
    let f = Fixture::new();
    let data = f.generate("data", 8);
    let ckpt = f.train(&data, "m.ckpt", &[]);
    let mut side = ckpt.as_os_str().to_owned();
    side.push(".json");
    let side = PathBuf::from(side);
    let text = fs::read_to_string(&side).unwrap().replace("\"d_graph\": 8", "\"d_graph\": 16");
    fs::write(&side, text).unwrap();
    let out = ctvqa(&["evaluate", "--data", s(&data), "--ckpt", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn missing_data_is_a_data_error() {
    let f = Fixture::new();
    let out = ctvqa(&[
        "train", "--data", s(&f.path("nowhere")), "--config", s(&f.path("tiny.json")), "--out",
        s(&f.path("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
