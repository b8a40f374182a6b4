use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selftune::dataio::directory_checksums;
use selftune::trainer::{Manifest, ManifestRecord};

fn selftune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selftune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, frames: usize) -> PathBuf {
    let out = dir.join(format!("synth{frames}"));
    let o = selftune(&[
        "synth-gen",
        "--scene-seed",
        "3",
        "--frames",
        &frames.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

/// Looks up `key` in the tab-separated `key\tvalue` lines of a run's stdout.
fn field(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")).map(str::to_string))
}

#[test]
fn synth_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 3);
    let b = dir.path().join("again");
    let o = selftune(&["synth-gen", "--scene-seed", "3", "--frames", "3", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "frames").as_deref(), Some("3"));
    let (ca, cb) = (directory_checksums(&a).unwrap(), directory_checksums(&b).unwrap());
    assert!(!ca.is_empty());
    assert_eq!(ca, cb);
    for f in ["images.txt", "trajectory.txt", "intrinsics.txt", "scene.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_out_is_a_usage_error() {
    let o = selftune(&["synth-gen", "--frames", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from_config");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, format!("[synth_gen]\nframes = 3\nscene_seed = 3\nout = {:?}\n", out.to_str().unwrap())).unwrap();
    let o = selftune(&["synth-gen", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(directory_checksums(&out).unwrap(), directory_checksums(&synth(dir.path(), 3)).unwrap());
}

#[test]
fn broken_dataset_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    std::fs::remove_file(data.join("trajectory.txt")).unwrap();
    let run = dir.path().join("run");
    let o = selftune(&["finetune", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("trajectory.txt"), "{}", stderr(&o));
}

#[test]
fn unknown_ablation_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let o = selftune(&[
        "finetune",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
        "--ablation",
        "everything",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn finetune_photo_only_records_effective_weights_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "epochs = 1\nbatch_size = 2\n[finetune]\nablation = \"photo-only\"\n").unwrap();
    let run = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_selftune"))
        .args(["finetune", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()])
        .env("SELFTUNE_PRETRAIN_EPOCHS", "0")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let manifest = PathBuf::from(field(&text, "manifest").unwrap());
    assert!(PathBuf::from(field(&text, "best_checkpoint").unwrap()).exists());
    let ManifestRecord::Start {
        effective_weights,
        config,
        ..
    } = Manifest::read(&manifest).unwrap().remove(0)
    else {
        panic!("manifest must open with a start record");
    };
    assert_eq!(effective_weights.distill, 0.0);
    assert_eq!(effective_weights.consistency, 0.0);
    assert!(effective_weights.smooth > 0.0);
    assert_eq!(config.epochs, 1);
    assert_eq!(config.batch_size, 2);
    assert_eq!(config.pretrain_epochs, 0);

    // The checkpoint it wrote can be scored.
    let ck = field(&text, "best_checkpoint").unwrap();
    let report = dir.path().join("student.tsv");
    let o = selftune(&["evaluate", "--checkpoint", &ck, "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("raw\t")));
}

#[test]
fn ground_truth_evaluates_to_a_zero_error_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let report = dir.path().join("gt.tsv");
    let o = selftune(&[
        "evaluate",
        "--checkpoint",
        "@ground-truth",
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text, stdout(&o));
    for row in ["raw", "median_scaled"] {
        let line = text.lines().find(|l| l.starts_with(&format!("{row}\t"))).unwrap();
        let v: Vec<f64> = line.split('\t').skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 7);
        assert!(v[..4].iter().all(|x| *x == 0.0), "{line}");
        assert!(v[4..].iter().all(|x| *x == 1.0), "{line}");
    }
    assert!(report.with_extension("frames.tsv").exists());
}

#[test]
fn teacher_row_is_poor_raw_and_good_median_scaled() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let report = dir.path().join("teacher.tsv");
    let o = selftune(&["evaluate", "--checkpoint", "@teacher", "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let abs_rel = |row: &str| -> f64 {
        let text = stdout(&o);
        let line = text.lines().find(|l| l.starts_with(&format!("{row}\t"))).unwrap().to_string();
        line.split('\t').nth(1).unwrap().parse().unwrap()
    };
    assert!(abs_rel("raw") > 2.0 * abs_rel("median_scaled"));
}

#[test]
fn unwritable_report_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let report = blocker.join("report.tsv");
    let o = selftune(&[
        "evaluate",
        "--checkpoint",
        "@ground-truth",
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn export_cloud_counts_vertices_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let export = |frames: &str| {
        let out = dir.path().join(format!("cloud_{}.ply", frames.replace(':', "_")));
        let o = selftune(&[
            "export-cloud",
            "--checkpoint",
            "@ground-truth",
            "--data",
            data.to_str().unwrap(),
            "--frames",
            frames,
            "--out",
            out.to_str().unwrap(),
        ]);
        (o, out)
    };
    let (one, path) = export("1");
    assert!(one.status.success(), "{}", stderr(&one));
    let n1: usize = field(&stdout(&one), "vertices").unwrap().parse().unwrap();
    assert!(n1 > 0);
    let ply = std::fs::read_to_string(&path).unwrap();
    assert!(ply.contains(&format!("element vertex {n1}\n")));

    let (all, _) = export("0:3");
    assert!(all.status.success());
    let n3: usize = field(&stdout(&all), "vertices").unwrap().parse().unwrap();
    assert!(n3 > n1 && n3 <= 3 * 96 * 64);

    let (missing, _) = export("5:9");
    assert_eq!(missing.status.code(), Some(3));
    assert!(stderr(&missing).contains("frame 5"));

    let (malformed, _) = export("3:1");
    assert_eq!(malformed.status.code(), Some(2));
}
