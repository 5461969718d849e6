use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist").join(name)
}

/// A config on the bundled digits with 200 training and 100 test images.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        "[train]\nbatch_size = 50\nepochs = 1\n\n[data]\ntrain_files = [{:?}, {:?}]\nholdout = 100\ntrain_size = 200\n",
        data_file("mnist-10k-images-idx3-ubyte"),
        data_file("mnist-10k-labels-idx1-ubyte"),
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn lecaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lecaps")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_reports_counts() {
    let out = lecaps(&["--model", "baseline", "params"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("8215568"), "{text}");
    assert!(text.contains("primary_caps 1152"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&lecaps(&["--config", "/nonexistent/run.toml", "params"])), 3);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(code(&lecaps(&["--config", s(&bad), "params"])), 4);
    assert_eq!(code(&lecaps(&["--dropout-rate", "1.5", "params"])), 4);
    assert_eq!(code(&lecaps(&["eval"])), 4);
    assert_eq!(code(&lecaps(&["--bogus", "params"])), 2);
    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let cfg = tiny_config(tmp.path());
    assert_eq!(code(&lecaps(&["--config", s(&cfg), "--checkpoint", s(&junk), "eval"])), 6);
    assert_eq!(code(&lecaps(&["--iters", "0", "bench"])), 9);
}

#[test]
fn train_then_eval_and_reject_wrong_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let out = lecaps(&["--config", s(&cfg), "--model", "lecaps-small", "--out-dir", s(&run), "train"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,test_acc,lr,epoch_seconds\n"));
    assert_eq!(csv.lines().count(), 2);

    let ckpt = run.join("model.ckpt");
    let out = lecaps(&["--config", s(&cfg), "--checkpoint", s(&ckpt), "eval"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("samples 100 test_acc"));

    let out = lecaps(&["--config", s(&cfg), "--dataset", "expanded-mnist", "--checkpoint", s(&ckpt), "eval"]);
    assert_eq!(code(&out), 7, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let read = |dir: &Path, kind: &str| -> Vec<Vec<u8>> {
        ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "test-images-idx3-ubyte", "test-labels-idx1-ubyte"]
            .iter()
            .map(|f| std::fs::read(dir.join(kind).join(f)).unwrap())
            .collect()
    };
    for kind in ["expanded-mnist", "affine-test"] {
        let mut outputs = Vec::new();
        for (i, seed) in ["7", "7", "8"].iter().enumerate() {
            let dir = tmp.path().join(format!("{kind}-{i}"));
            let out = lecaps(&["--config", s(&cfg), "--seed", seed, "--out-dir", s(&dir), "gen-data", kind]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
            outputs.push(read(&dir, kind));
        }
        assert_eq!(outputs[0], outputs[1], "{kind}");
        assert_ne!(outputs[0][2], outputs[2][2], "{kind}");
        // 16-byte header then 100 canvases of 40 x 40
        assert_eq!(outputs[0][2].len(), 16 + 100 * 40 * 40);
    }
}
