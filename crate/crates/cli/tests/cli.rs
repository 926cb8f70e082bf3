use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fms(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fms"));
    cmd.args(args).env_remove("FMS_SEED");
    if let Some(s) = seed {
        cmd.env("FMS_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const DATA: &str = "num_samples = 24\ngrid = 2\nseq_len = 4\npatch_dim = 4\nvocab = 16\ntopics = 2\nbox_min = 1.0\nbox_max = 2.0\nseed = 3\n";

const TRAIN: &str = r#"epochs = 2
batch_size = 8
seed = 1
dataset = "data.jsonl"
checkpoint = "ckpt.json"
loss_log = "losses.jsonl"

[model]
dim = 8
heads = 2
reduced_dim = 4
"#;

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("data.toml"), DATA).unwrap();
    fs::write(dir.path().join("train.toml"), TRAIN).unwrap();
    let out = fms(
        &[
            "gen-data",
            "--config",
            &p(&dir, "data.toml"),
            "--out",
            &p(&dir, "data.jsonl"),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&fms(&["frobnicate"], None)), 2);
    assert_eq!(code(&fms(&["eval", "--ckpt", "x"], None)), 2);
    assert_eq!(code(&fms(&["grad-check", "--module", "nope"], None)), 2);
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "epochs = 1\nwarp_speed = 9\n").unwrap();
    assert_eq!(
        code(&fms(&["train", "--config", &p(&dir, "bad.toml")], None)),
        2
    );
    assert_eq!(
        code(&fms(
            &["train", "--config", &p(&dir, "train.toml")],
            Some("abc")
        )),
        2
    );
}

#[test]
fn generated_data_validates_and_corruption_is_located() {
    let dir = setup();
    let ok = fms(&["validate-data", &p(&dir, "data.jsonl")], None);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("24 valid samples"));

    let text = fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let half = lines[3].len() / 2;
    lines[3].truncate(half);
    fs::write(dir.path().join("bad.jsonl"), lines.join("\n")).unwrap();
    let bad = fms(&["validate-data", &p(&dir, "bad.jsonl")], None);
    assert_eq!(code(&bad), 1);
    assert!(
        String::from_utf8_lossy(&bad.stdout).contains("bad.jsonl:4:"),
        "{}",
        String::from_utf8_lossy(&bad.stdout)
    );
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = setup();
    let run = |seed: Option<&str>| {
        let out = fms(&["train", "--config", &p(&dir, "train.toml")], seed);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (
            read(&dir.path().join("ckpt.json")),
            read(&dir.path().join("losses.jsonl")),
        )
    };
    let (ck1, log1) = run(None);
    let (ck2, log2) = run(None);
    assert_eq!(ck1, ck2);
    assert_eq!(log1, log2);
    assert_eq!(log1.iter().filter(|&&b| b == b'\n').count(), 2);

    let out = fms(
        &[
            "eval",
            "--ckpt",
            &p(&dir, "ckpt.json"),
            "--data",
            &p(&dir, "data.jsonl"),
            "--json",
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["metrics"].as_object().unwrap().len(), 12);
    assert!(doc["losses"]["total"].as_f64().unwrap().is_finite());

    let table = fms(
        &[
            "eval",
            "--ckpt",
            &p(&dir, "ckpt.json"),
            "--data",
            &p(&dir, "data.jsonl"),
        ],
        None,
    );
    assert!(String::from_utf8_lossy(&table.stdout).contains("AUC"));

    let (ck3, _) = run(Some("99"));
    assert_ne!(ck1, ck3);
    let ck: serde_json::Value = serde_json::from_slice(&ck3).unwrap();
    assert_eq!(ck["seed"], 99);
}

#[test]
fn grad_check_single_module_passes() {
    let out = fms(&["grad-check", "--module", "judgment"], None);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("bbox_loss") && text.contains("loss:token"));
    assert!(!text.contains("numeric"));
}
