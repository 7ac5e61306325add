use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = "roles_count = 9\ndialogues_per_role = 3\nturns_per_dialogue = 3\n";

const CONFIG: &str = "\
codebook_size = 6
d_model = 16
layers = 1
heads = 2
max_sequence_length = 48
learning_rate = 0.003
warmup_steps = 2
batch_size = 4
stage1_epochs = 1
stage3_epochs = 1
em_max_iters = 10
max_response_tokens = 8
";

fn morpheus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morpheus"))
        .args(args)
        .env_remove("MORPHEUS_SEED")
        .env_remove("MORPHEUS_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthesized data and a configuration file in a fresh directory.
struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
        fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
        let ws = Workspace { dir };
        ok(&morpheus(&[
            "synth",
            "--spec",
            p(&ws.path("spec.toml")),
            "--out",
            p(&ws.path("data")),
        ]));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train_all(&self, out: &str, extra: &[&str]) -> Output {
        let (config, data, out) = (self.path("config.toml"), self.path("data"), self.path(out));
        let mut args = vec!["train", "--stage", "all", "--config", p(&config), "--data-dir", p(&data), "--out"];
        args.push(p(&out));
        args.extend_from_slice(extra);
        morpheus(&args)
    }
}

#[test]
fn synth_writes_disjoint_deterministic_splits() {
    let ws = Workspace::new();
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl"] {
        assert!(!fs::read_to_string(ws.path("data").join(f)).unwrap().is_empty());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("data/manifest.json")).unwrap()).unwrap();
    let roles = |k: &str| -> Vec<String> {
        serde_json::from_value(manifest["roles"][k].clone()).unwrap()
    };
    let (tr, va, te) = (roles("train"), roles("valid"), roles("test"));
    assert_eq!(tr.len() + va.len() + te.len(), 9);
    assert!(tr.iter().all(|r| !va.contains(r) && !te.contains(r)));
    assert!(va.iter().all(|r| !te.contains(r)));

    ok(&morpheus(&["synth", "--spec", p(&ws.path("spec.toml")), "--out", p(&ws.path("again"))]));
    assert_eq!(
        fs::read(ws.path("data/manifest.json")).unwrap(),
        fs::read(ws.path("again/manifest.json")).unwrap()
    );
    assert_eq!(
        fs::read(ws.path("data/train.jsonl")).unwrap(),
        fs::read(ws.path("again/train.jsonl")).unwrap()
    );
}

#[test]
fn synth_rejects_too_few_roles() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "roles_count = 2\n").unwrap();
    let out = morpheus(&["synth", "--spec", p(&spec), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("roles_count"));
}

#[test]
fn full_pipeline_trains_evaluates_generates_and_inspects() {
    let ws = Workspace::new();
    let stdout = ok(&ws.train_all("joint.ckpt", &[]));
    assert!(stdout.contains("(joint)"), "{stdout}");
    assert!(ws.path("joint.ckpt.log.jsonl").exists());

    // Evaluation is reproducible and reports every metric.
    let ckpt = ws.path("joint.ckpt");
    let data = ws.path("data/test.jsonl");
    for name in ["r1.json", "r2.json"] {
        ok(&morpheus(&[
            "eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&ws.path(name)), "--seed", "4",
        ]));
    }
    let r1 = fs::read_to_string(ws.path("r1.json")).unwrap();
    assert_eq!(r1, fs::read_to_string(ws.path("r2.json")).unwrap());
    assert_eq!(
        fs::read(ws.path("r1.json.outputs.txt")).unwrap(),
        fs::read(ws.path("r2.json.outputs.txt")).unwrap()
    );
    let report: serde_json::Value = serde_json::from_str(&r1).unwrap();
    for key in ["BLEU-1", "BLEU-2", "ROUGE-L", "Dist-1", "Dist-2", "sBLEU", "P-Co"] {
        assert!(report[key].is_number(), "{key} missing from {r1}");
    }

    // Batch generation keeps one output line per input line.
    let corpus = fs::read_to_string(&data).unwrap();
    let lines: Vec<&str> = corpus.lines().cycle().take(10).collect();
    let input = ws.path("histories.jsonl");
    fs::write(&input, lines.join("\n") + "\n").unwrap();
    for name in ["g1.txt", "g2.txt"] {
        ok(&morpheus(&[
            "generate", "--ckpt", p(&ckpt), "--input", p(&input), "--out", p(&ws.path(name)), "--seed", "9",
        ]));
    }
    let g1 = fs::read_to_string(ws.path("g1.txt")).unwrap();
    assert_eq!(g1.lines().count(), 10);
    assert_eq!(g1, fs::read_to_string(ws.path("g2.txt")).unwrap());

    let inspect = ok(&morpheus(&["inspect-pc", "--ckpt", p(&ckpt)]));
    assert!(inspect.lines().next().unwrap().ends_with(" 6"), "{inspect}");
    let machine: serde_json::Value = serde_json::from_str(inspect.lines().last().unwrap()).unwrap();
    assert_eq!(machine["n"], 6);
    assert_eq!(machine["d"], 16);
    assert!(machine["usage_perplexity"].as_f64().unwrap() >= 1.0);
}

#[test]
fn stages_run_separately_and_respect_their_order() {
    let ws = Workspace::new();
    let cfg = ws.path("config.toml");
    let data = ws.path("data/train.jsonl");
    let s1 = ws.path("s1.ckpt");
    let s2 = ws.path("s2.ckpt");
    let s3 = ws.path("s3.ckpt");

    let early = morpheus(&["train", "--stage", "3", "--config", p(&cfg), "--data", p(&data), "--out", p(&s3)]);
    assert_eq!(early.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&early.stderr).contains("stage"));

    ok(&morpheus(&["train", "--stage", "1", "--config", p(&cfg), "--data", p(&data), "--out", p(&s1)]));
    let jump = morpheus(&["train", "--stage", "3", "--resume", p(&s1), "--data", p(&data), "--out", p(&s3)]);
    assert_eq!(jump.status.code(), Some(1));

    let stage1_eval = morpheus(&["eval", "--ckpt", p(&s1), "--data", p(&data), "--out", p(&ws.path("r.json"))]);
    assert_eq!(stage1_eval.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&stage1_eval.stderr).contains("joint"));

    ok(&morpheus(&[
        "train", "--stage", "2", "--init", "average", "--resume", p(&s1), "--data", p(&data), "--out", p(&s2),
    ]));
    let fresh = ok(&morpheus(&["inspect-pc", "--ckpt", p(&s2)]));
    assert!(fresh.contains("no lookups yet"), "{fresh}");
    assert!(fresh.contains("average"));

    let peft = ok(&morpheus(&[
        "train", "--stage", "3", "--peft", "--resume", p(&s2), "--data", p(&data), "--out", p(&s3),
    ]));
    assert!(peft.contains("frozen backbone unchanged"), "{peft}");
    let log = fs::read_to_string(ws.path("s3.ckpt.log.jsonl")).unwrap();
    let entry = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["event"] == "peft")
        .expect("peft entry");
    assert_eq!(entry["frozen_hash_before"], entry["frozen_hash_after"]);
    assert!(entry["trainable_fraction"].as_f64().unwrap() < 1.0);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let missing = morpheus(&["inspect-pc", "--ckpt", p(&dir.path().join("nope.ckpt"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(morpheus(&["generate", "--input", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(morpheus(&["train"]).status.code(), Some(1));
    assert_eq!(morpheus(&["--help"]).status.code(), Some(0));

    let ws = Workspace::new();
    ok(&ws.train_all("joint.ckpt", &["--seed", "2"]));
    let mut bytes = fs::read(ws.path("joint.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(ws.path("bad.ckpt"), bytes).unwrap();
    let corrupt = morpheus(&["inspect-pc", "--ckpt", p(&ws.path("bad.ckpt"))]);
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("checksum"));

    // A diverging learning rate surfaces as a numerical failure.
    fs::write(ws.path("hot.toml"), CONFIG.replace("learning_rate = 0.003", "learning_rate = 1e300")).unwrap();
    let hot = morpheus(&[
        "train", "--stage", "1", "--config", p(&ws.path("hot.toml")), "--data", p(&ws.path("data/train.jsonl")),
        "--out", p(&ws.path("hot.ckpt")),
    ]);
    assert_eq!(hot.status.code(), Some(3), "{}", String::from_utf8_lossy(&hot.stderr));
}

#[test]
fn chat_reads_standard_input() {
    use std::io::Write;
    let ws = Workspace::new();
    ok(&ws.train_all("joint.ckpt", &[]));
    let mut child = Command::new(env!("CARGO_BIN_EXE_morpheus"))
        .args(["chat", "--ckpt", p(&ws.path("joint.ckpt")), "--seed", "1"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"hello there !\n/codes\n/quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("codes: "), "{text}");
}
