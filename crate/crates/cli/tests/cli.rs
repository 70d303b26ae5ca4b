use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "d = 16
heads = 2
n_vision = 2
n_text = 1
moa_layers = 1
patch = 8
image_hw = 16
epochs = 2
stage0_epochs = 2
batch = 8
shift_ratio = 0.25
";

fn caila(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caila"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn caila")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, out: &str, seed: &str) {
    let o = caila(
        dir,
        &[
            "gen-data", "--out", out, "--attrs", "3", "--objs", "3", "--per-pair", "4", "--val-per-pair", "2",
            "--test-per-pair", "2", "--image-hw", "16", "--seed", seed,
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("seen pairs: 6") && stdout.contains("unseen pairs: 3"), "{stdout}");
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "data", "1");
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let ckpt = format!("{run}.ckpt");
        let o = caila(dir, &["train", "--data", "data", "--config", "tiny.cfg", "--out", &ckpt]);
        assert!(o.status.success(), "{}", stderr(&o));
        let metrics = std::fs::read_to_string(dir.join(format!("{ckpt}.metrics.csv"))).unwrap();
        assert!(metrics.starts_with("epoch,loss,val_seen,val_unseen,val_auc\n"));
        assert_eq!(metrics.lines().count(), 1 + 3);
        let meta = std::fs::read_to_string(dir.join(format!("{ckpt}.meta"))).unwrap();
        assert!(meta.contains("frozen_hash = "));
        let mut files = vec![metrics];
        for world in ["closed", "open"] {
            let report = format!("{run}.{world}.txt");
            let o = caila(dir, &["eval", "--ckpt", &ckpt, "--data", "data", "--world", world, "--report", &report]);
            assert!(o.status.success(), "{}", stderr(&o));
            let text = std::fs::read_to_string(dir.join(&report)).unwrap();
            // The generated split uses every pair, so both worlds score all 9.
            assert!(text.contains("candidate_count = 9"), "{text}");
            assert!(text.contains(&format!("world = {world}")));
            let curve = std::fs::read_to_string(dir.join(format!("{report}.curve.csv"))).unwrap();
            assert!(curve.starts_with("bias,seen_acc,unseen_acc\n-inf,"));
            assert!(curve.trim_end().lines().last().unwrap().starts_with("inf,"));
            files.push(text);
            files.push(curve);
        }
        reports.push(files);
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(std::fs::read(dir.join("a.ckpt")).unwrap(), std::fs::read(dir.join("b.ckpt")).unwrap());
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "data", "2");
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    for (out, seed) in [("a.ckpt", "3"), ("b.ckpt", "4")] {
        let o = caila(dir, &["train", "--data", "data", "--config", "tiny.cfg", "--out", out, "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let meta = std::fs::read_to_string(dir.join("a.ckpt.meta")).unwrap();
    assert!(meta.contains("seed = 3"), "{meta}");
    assert_ne!(std::fs::read(dir.join("a.ckpt")).unwrap(), std::fs::read(dir.join("b.ckpt")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = caila(dir, &["gen-data", "--out", "x", "--seen-frac", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seen fraction"));

    let o = caila(dir, &["train", "--data", "missing_dir", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing_dir"));

    gen(dir, "data", "1");
    std::fs::write(dir.join("bad.cfg"), "epochs = 2\n\nlearning_rate = 0.1\n").unwrap();
    let o = caila(dir, &["train", "--data", "data", "--config", "bad.cfg", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    // Default image size is 64, the dataset is 16.
    let o = caila(dir, &["train", "--data", "data", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("image_hw"));

    let o = caila(dir, &["eval", "--ckpt", "m.ckpt", "--data", "data", "--world", "sideways", "--report", "r"]);
    assert_eq!(o.status.code(), Some(2));
    let o = caila(dir, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "data", "1");
    std::fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = caila(dir, &["eval", "--ckpt", "junk.ckpt", "--data", "data", "--report", "r.txt"]);
    assert_eq!(o.status.code(), Some(1));
    let o = caila(dir, &["eval", "--ckpt", "absent.ckpt", "--data", "data", "--report", "r.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.ckpt"));
}
