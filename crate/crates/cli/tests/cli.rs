use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = r#"
task = "direction4"
train_per_class = 3
val_per_class = 2
frames = 8
height = 16
width = 16
seed = 5
"#;

const CONFIG: &str = r#"
seed = 3

[model]
blocks = [32]

[trainer]
batch_size = 4
epochs = 3
decay_epochs = [2]
eval_batch_size = 5
"#;

fn img(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_img")).args(args).env_remove("IMG_SEED").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
        fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        let f = Fixture { dir };
        let out = img(&["gen-data", "--spec", &f.arg("spec.toml"), "--out", &f.arg("clips.imgd")]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, out_dir: &str, extra: &[&str]) -> Output {
        let mut args =
            vec!["train", "--config", "run.toml", "--data", "clips.imgd", "--out-dir", out_dir];
        args.extend_from_slice(extra);
        let owned: Vec<String> = args.iter().map(|a| self.resolve(a)).collect();
        img(&owned.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn resolve(&self, a: &str) -> String {
        if a.ends_with(".toml") || a.ends_with(".imgd") || a.starts_with("out") {
            self.arg(a)
        } else {
            a.to_string()
        }
    }
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_prints_checksum() {
    let f = Fixture::new();
    let out = img(&["gen-data", "--spec", &f.arg("spec.toml"), "--out", &f.arg("again.imgd")]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).lines().any(|l| l.starts_with("checksum ") && l.len() == 9 + 64));
    assert_eq!(fs::read(f.path("clips.imgd")).unwrap(), fs::read(f.path("again.imgd")).unwrap());
}

#[test]
fn gen_data_rejects_bad_spec() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "task = \"direction4\"\nheight = 4\nwidth = 4\n").unwrap();
    let out = img(&["gen-data", "--spec", &f.arg("bad.toml"), "--out", &f.arg("x.imgd")]);
    assert_eq!(code(&out), 2);
    fs::write(f.path("bad.toml"), "colour = 3\n").unwrap();
    assert_eq!(code(&img(&["gen-data", "--spec", &f.arg("bad.toml"), "--out", &f.arg("x.imgd")])), 2);
    assert_eq!(code(&img(&["gen-data", "--spec", &f.arg("missing.toml"), "--out", &f.arg("x.imgd")])), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&img(&[])), 2);
    assert_eq!(code(&img(&["train"])), 2);
    assert_eq!(code(&img(&["verify", "--suite", "nonsense"])), 2);
}

#[test]
fn train_writes_artifacts() {
    let f = Fixture::new();
    let out = f.train("out", &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = read(f.path("out/metrics.jsonl"));
    assert_eq!(metrics.lines().count(), 6);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "split", "loss", "top1", "top5", "lr"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    for name in ["config.toml", "last.ckpt", "best.ckpt"] {
        assert!(f.path("out").join(name).exists(), "{name}");
    }
    let echo = read(f.path("out/config.toml"));
    assert!(echo.contains("seed = 3"));
}

#[test]
fn train_runs_are_reproducible_and_resumable() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("out_a", &[])), 0);
    assert_eq!(code(&f.train("out_b", &[])), 0);
    let full = read(f.path("out_a/metrics.jsonl"));
    assert_eq!(full, read(f.path("out_b/metrics.jsonl")));

    assert_eq!(code(&f.train("out_c", &["--stop-after", "1"])), 0);
    assert_eq!(read(f.path("out_c/metrics.jsonl")).lines().count(), 2);
    assert_eq!(code(&f.train("out_c", &["--resume"])), 0);
    assert_eq!(read(f.path("out_c/metrics.jsonl")), full);
    assert_eq!(fs::read(f.path("out_a/last.ckpt")).unwrap(), fs::read(f.path("out_c/last.ckpt")).unwrap());
}

#[test]
fn overrides_and_seed_env_apply() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("out_a", &["--set", "trainer.epochs=1", "--set", "trainer.decay_epochs=[]"])), 0);
    assert_eq!(read(f.path("out_a/metrics.jsonl")).lines().count(), 2);
    assert_eq!(code(&f.train("out_b", &["--set", "trainer.nope=1"])), 2);

    let out = Command::new(env!("CARGO_BIN_EXE_img"))
        .args(["train", "--config", &f.arg("run.toml"), "--data", &f.arg("clips.imgd"), "--out-dir", &f.arg("out_c")])
        .args(["--set", "trainer.epochs=1", "--set", "trainer.decay_epochs=[]"])
        .env("IMG_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(read(f.path("out_c/config.toml")).contains("seed = 77"));
}

#[test]
fn mismatched_model_is_an_input_error() {
    let f = Fixture::new();
    let out = f.train("out", &["--set", "model.num_classes=6"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('6') && err.contains('4'), "{err}");
}

#[test]
fn diverging_run_writes_failure_record() {
    let f = Fixture::new();
    let out = f.train("out", &["--set", "trainer.lr=1e30", "--set", "trainer.dropout=0.0"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let note: serde_json::Value = serde_json::from_str(&read(f.path("out/failure.json"))).unwrap();
    assert_eq!(note["seed"], 3);
    assert!(note["epoch"].is_u64() && note["batch"].is_u64());
}

#[test]
fn verify_reports_each_check() {
    let out = img(&["verify", "--suite", "cmem"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() >= 3, "{text}");
    assert!(!text.contains("FAIL "));
}

#[test]
fn inspect_dumps_attention_and_shifts() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("out", &["--set", "trainer.epochs=1", "--set", "trainer.decay_epochs=[]"])), 0);
    let ckpt = f.arg("out/last.ckpt");
    let out = img(&["inspect", "--checkpoint", &ckpt, "--data", &f.arg("clips.imgd"), "--clip-index", "3", "--out-dir", &f.arg("ins")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let att = read(f.path("ins/attention.csv"));
    let mut lines = att.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("block,t,mean,c0,"));
    assert_eq!(header.split(',').count(), 3 + 32);
    assert_eq!(lines.count(), 8);

    let shifts = read(f.path("ins/shifts.csv"));
    let mut lines = shifts.lines();
    assert_eq!(lines.next().unwrap(), "block,slice,out_channel,in_channel,k_prev,k_cur,k_next");
    // three slices of eight channels, per-channel kernels
    assert_eq!(lines.count(), 3 * 8);

    let out = img(&["inspect", "--checkpoint", &ckpt, "--data", &f.arg("clips.imgd"), "--clip-index", "99", "--out-dir", &f.arg("ins")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_writes_table() {
    let f = Fixture::new();
    let out = img(&[
        "ablate", "--config", &f.arg("run.toml"), "--data", &f.arg("clips.imgd"), "--matrix", "shifts",
        "--out", &f.arg("shifts.csv"), "--set", "trainer.epochs=1", "--set", "trainer.decay_epochs=[]",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(f.path("shifts.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config_id,top1,top5,params,epochs");
    let ids: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["conv1d", "random", "frozen", "pretrained"]);
}
