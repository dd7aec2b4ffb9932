//! End-to-end tests of the command-line interface, driving the built
//! binary the way a user would. A tiny model keeps every command fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_exembed")
}

const TINY_CONFIG: &str = r#"
timing = false
train_docs = 6

[model]
vocab_size = 259
model_dim = 16
n_layers = 2
n_heads = 2
n_embedder_layers = 1
max_window = 64
ffn_dim = 32

[pretrain]
steps = 25
batch_size = 2
window = 32
learning_rate = 0.002
seed = 1

[trainer]
k_candidates = [2, 4]
train_chunk_size = 8
sample_len = 48
batch_size = 2
max_steps = 4
seed = 1

[corpus]
generator = "mixed"
doc_len = 512
kv_pairs_per_doc = 4
dep_distance_min = 16
dep_distance_max = 200
seed = 1

[eval]
context_lens = [32, 128]
predict_tail_len = 16
k_values = [2, 4]
methods = ["truncate", "ext_embedding"]
chunk_len = 8
recent_raw = 8
n_docs = 3

[bench]
context_lens = [64, 128, 256]
tail_len = 8
recent_raw = 8
k = 16
repeats = 1
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.toml"), TINY_CONFIG).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = Command::new(bin())
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "command {:?} failed:\nstdout: {}\nstderr: {}",
            args,
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn pretrain(&self) {
        self.run(&["pretrain", "--config", "config.toml", "--out", "base.ckpt"]);
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let mut args = vec![
            "train-embedder",
            "--config",
            "config.toml",
            "--base-ckpt",
            "base.ckpt",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        self.run(&args);
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn pretrain_is_reproducible_byte_for_byte() {
    let ws = Workspace::new();
    ws.pretrain();
    let first = read(&ws.path("base.ckpt"));
    ws.run(&["pretrain", "--config", "config.toml", "--out", "base2.ckpt"]);
    assert_eq!(first, read(&ws.path("base2.ckpt")));
    assert!(ws.path("base.ckpt.manifest.json").exists());
}

#[test]
fn zero_step_training_returns_the_initialization() {
    let ws = Workspace::new();
    ws.pretrain();
    let cfg = TINY_CONFIG.replace("max_steps = 4", "max_steps = 0");
    std::fs::write(ws.path("zero.toml"), cfg).unwrap();
    ws.run(&[
        "train-embedder",
        "--config",
        "zero.toml",
        "--base-ckpt",
        "base.ckpt",
        "--out",
        "ex0.ckpt",
    ]);

    let (model_cfg, base) = exembed::checkpoint::load(&ws.path("base.ckpt"), "base", false).unwrap();
    let expect = exembed::model::embedder_from_downstream(&model_cfg, &base);
    let (_, got) = exembed::checkpoint::load(&ws.path("ex0.ckpt"), "ex", false).unwrap();
    assert_eq!(got.len(), expect.len());
    for (name, p) in expect.iter() {
        let q = got.tensor(name);
        let same = p.value.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name} differs from the first-layers initialization");
    }
}

#[test]
fn training_never_modifies_the_base_checkpoint() {
    let ws = Workspace::new();
    ws.pretrain();
    let before = read(&ws.path("base.ckpt"));
    ws.train("ex.ckpt", &[("--log"), ("train.csv")]);
    assert_eq!(before, read(&ws.path("base.ckpt")));

    let log = String::from_utf8(read(&ws.path("train.csv"))).unwrap();
    assert!(log.starts_with("step,loss,k,seconds\n"));
    assert_eq!(log.lines().count(), 1 + 4); // header + max_steps rows

    // reruns are byte-identical (timing = false in the config)
    ws.train("ex2.ckpt", &["--log", "train2.csv"]);
    assert_eq!(read(&ws.path("ex.ckpt")), read(&ws.path("ex2.ckpt")));
    assert_eq!(read(&ws.path("train.csv")), read(&ws.path("train2.csv")));
}

#[test]
fn degenerate_eval_agrees_across_methods_in_the_csv() {
    let ws = Workspace::new();
    ws.pretrain();
    ws.train("ex.ckpt", &[]);
    // context length equal to the tail: nothing to compress or truncate
    let cfg = TINY_CONFIG
        .replace("context_lens = [32, 128]", "context_lens = [16]")
        .replace(
            "methods = [\"truncate\", \"ext_embedding\"]",
            "methods = [\"truncate\", \"sliding_window\", \"ext_embedding\", \"full_attention\"]",
        );
    std::fs::write(ws.path("degen.toml"), cfg).unwrap();
    ws.run(&[
        "eval",
        "--config",
        "degen.toml",
        "--base-ckpt",
        "base.ckpt",
        "--ex-ckpt",
        "ex.ckpt",
        "--out",
        "degen.csv",
    ]);
    let csv = String::from_utf8(read(&ws.path("degen.csv"))).unwrap();
    let ppls: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap())
        .collect();
    assert!(ppls.len() >= 4, "csv:\n{csv}");
    assert!(ppls.iter().all(|&p| p == ppls[0]), "methods disagree:\n{csv}");
}

#[test]
fn offline_eval_path_matches_online_exactly() {
    let ws = Workspace::new();
    ws.pretrain();
    ws.train("ex.ckpt", &[]);
    ws.run(&[
        "eval", "--config", "config.toml", "--base-ckpt", "base.ckpt", "--ex-ckpt", "ex.ckpt",
        "--out", "online.csv", "--mode", "online",
    ]);
    ws.run(&[
        "eval", "--config", "config.toml", "--base-ckpt", "base.ckpt", "--ex-ckpt", "ex.ckpt",
        "--out", "offline.csv", "--mode", "offline",
    ]);
    assert_eq!(read(&ws.path("online.csv")), read(&ws.path("offline.csv")));
}

#[test]
fn compress_writes_a_loadable_store() {
    let ws = Workspace::new();
    ws.pretrain();
    ws.train("ex.ckpt", &[]);
    std::fs::write(ws.path("doc.txt"), b"the quick brown fox jumps over the lazy dog, twice.")
        .unwrap();
    ws.run(&[
        "compress", "--doc", "doc.txt", "--ex-ckpt", "ex.ckpt", "--out", "doc.xes", "-L", "16",
    ]);
    let store = exembed::inference::load_store(&ws.path("doc.xes")).unwrap();
    assert_eq!(store.chunk_len, 16);
    assert_eq!(store.k, None);
    assert_eq!(store.chunks.len(), 51 / 16);
    assert_eq!(store.remainder_tokens.len(), 51 % 16);

    // pre-downscaled variant
    ws.run(&[
        "compress", "--doc", "doc.txt", "--ex-ckpt", "ex.ckpt", "--out", "doc-k4.xes", "-L",
        "16", "--k", "4",
    ]);
    let small = exembed::inference::load_store(&ws.path("doc-k4.xes")).unwrap();
    assert!(small.k.is_some());
    assert!(small.chunks.iter().all(|c| c.rows() == 4));

    // reruns byte-identical
    ws.run(&[
        "compress", "--doc", "doc.txt", "--ex-ckpt", "ex.ckpt", "--out", "doc2.xes", "-L", "16",
    ]);
    assert_eq!(read(&ws.path("doc.xes")), read(&ws.path("doc2.xes")));
}

#[test]
fn serve_stream_generates_deterministically() {
    use std::io::Write;
    let ws = Workspace::new();
    ws.pretrain();
    ws.train("ex.ckpt", &[]);

    let run = || -> Vec<u8> {
        let mut child = Command::new(bin())
            .current_dir(ws.dir.path())
            .args([
                "serve-stream",
                "--base-ckpt",
                "base.ckpt",
                "--ex-ckpt",
                "ex.ckpt",
                "--k",
                "2",
                "--gen-tokens",
                "12",
                "--seed",
                "0",
            ])
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .unwrap();
        child
            .stdin
            .as_mut()
            .unwrap()
            .write_all(b"once upon a time there was a very long story about ")
            .unwrap();
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.len() <= 12);
}

#[test]
fn bench_csv_has_expected_shape() {
    let ws = Workspace::new();
    ws.pretrain();
    ws.train("ex.ckpt", &[]);
    ws.run(&[
        "bench", "--config", "config.toml", "--base-ckpt", "base.ckpt", "--ex-ckpt", "ex.ckpt",
        "--out", "bench.csv",
    ]);
    let csv = String::from_utf8(read(&ws.path("bench.csv"))).unwrap();
    assert!(csv.starts_with("mode,context_len,peak_rows,flops,seconds,phase1_s,phase2_s\n"));
    // 3 lengths x 3 modes
    assert_eq!(csv.lines().count(), 1 + 9);
    // timing = false zeroes the wall columns, so reruns are byte-identical
    ws.run(&[
        "bench", "--config", "config.toml", "--base-ckpt", "base.ckpt", "--ex-ckpt", "ex.ckpt",
        "--out", "bench2.csv",
    ]);
    assert_eq!(read(&ws.path("bench.csv")), read(&ws.path("bench2.csv")));
}

#[test]
fn bad_config_exits_with_code_two() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.toml"), "no_such_key = true").unwrap();
    let out = Command::new(bin())
        .current_dir(ws.dir.path())
        .args(["pretrain", "--config", "bad.toml", "--out", "x.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let missing = Command::new(bin())
        .current_dir(ws.dir.path())
        .args(["eval", "--base-ckpt", "nope.ckpt", "--ex-ckpt", "nope.ckpt", "--out", "x.csv"])
        .output()
        .unwrap();
    assert_ne!(missing.status.code(), Some(0));
}
