use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use damp::data::ingest_embeddings;
use damp::experiment::read_metrics;

const TINY: &str = r#"
epochs = 2
iterations_per_epoch = 2
batch_size = 6

[data]
sources = [{ name = "source", samples_per_class = 4 }]
target = { name = "target", samples_per_class = 4, shift = { rotation_deg = 10.0 } }
"#;

fn damp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damp"))
        .args(args)
        .env("DAMP_OUTPUT_ROOT", dir.join("root"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn generate_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        ok(&damp(dir.path(), &["generate-data", "--config", &cfg, "--out", out.to_str().unwrap()]));
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "target.labels.damp"));
    for n in &names {
        let a = fs::read(dir.path().join("a").join(n)).unwrap();
        let b = fs::read(dir.path().join("b").join(n)).unwrap();
        assert_eq!(a, b, "{n:?} differs");
    }
}

#[test]
fn invalid_specs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = damp(dir.path(), &["generate-data", "--set", "data.classes=1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("classes"));
    let unknown = damp(dir.path(), &["generate-data", "--set", "no_such_key=3"]);
    assert!(!unknown.status.success());
    // The default configuration has a target domain, which generalization runs must not see.
    let dg = damp(dir.path(), &["train", "--mode", "dg"]);
    assert!(!dg.status.success());
}

#[test]
fn train_resume_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&damp(dir.path(), &["train", "--config", &cfg, "--out", run_s, "--stop-after", "1"]));
    assert_eq!(read_metrics(run.join("metrics.jsonl")).unwrap().len(), 1);
    let again = damp(dir.path(), &["train", "--config", &cfg, "--out", run_s]);
    assert!(!again.status.success(), "existing run must require --resume");
    ok(&damp(dir.path(), &["train", "--config", &cfg, "--out", run_s, "--resume"]));
    let metrics = read_metrics(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), [1, 2]);
    assert!(run.join("report.json").exists());

    let data = dir.path().join("data");
    ok(&damp(dir.path(), &["generate-data", "--config", &cfg, "--out", data.to_str().unwrap()]));
    let ckpt = run.join("checkpoint.damp");
    let target = data.join("target.damp");
    let evald = dir.path().join("eval");
    let line = ok(&damp(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            target.to_str().unwrap(),
            "--labels",
            data.join("target.labels.damp").to_str().unwrap(),
            "--out",
            evald.to_str().unwrap(),
        ],
    ));
    let reported: f64 = line.trim().split('\t').nth(1).unwrap().parse().unwrap();
    let tsv = fs::read_to_string(evald.join("eval-target.confusion.tsv")).unwrap();
    let rows: Vec<Vec<usize>> = tsv
        .lines()
        .skip(1)
        .map(|l| {
            let cells: Vec<&str> = l.split('\t').collect();
            cells[1..cells.len() - 1].iter().map(|v| v.parse().unwrap()).collect()
        })
        .collect();
    let total: usize = rows.iter().flatten().sum();
    let trace: usize = (0..rows.len()).map(|i| rows[i][i]).sum();
    assert_eq!(total, 6 * 4);
    assert!((reported - trace as f64 / total as f64).abs() < 1e-4);
    let unlabeled = damp(
        dir.path(),
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", target.to_str().unwrap()],
    );
    assert!(!unlabeled.status.success());

    let emb = dir.path().join("emb.damp");
    ok(&damp(
        dir.path(),
        &[
            "dump-embeddings",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            data.join("source.damp").to_str().unwrap(),
            target.to_str().unwrap(),
            "--out",
            emb.to_str().unwrap(),
        ],
    ));
    let archive = ingest_embeddings(&emb, None).unwrap();
    assert_eq!(archive.records.len(), 2 * 6 * 4);
}

#[test]
fn default_run_directory_follows_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok(&damp(dir.path(), &["train", "--config", &cfg, "--set", "epochs=1", "--set", "seed=4"]));
    assert!(dir.path().join("root/uda-seed4/checkpoint.damp").exists());
}

#[test]
fn grad_check_fails_on_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = damp(
        dir.path(),
        &["grad-check", "--batches", "1", "--size", "2", "--coords", "1", "--tol", "1e-30"],
    );
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for g in ["\tp\t", "\tG\t", "\tgamma_v\t", "\tgamma_s\t"] {
        assert!(text.contains(g), "{g} missing from\n{text}");
    }
}

#[test]
fn ablate_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("abl.tsv");
    ok(&damp(
        dir.path(),
        &[
            "ablate",
            "--config",
            &cfg,
            "--set",
            "epochs=1",
            "--set",
            "iterations_per_epoch=1",
            "--seeds",
            "0,1",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let body: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(body.len(), 11);
    for row in &body {
        assert_eq!(row.len(), header.len());
    }
    assert!(body.iter().any(|r| r[1] == "+L_im"));
}

#[test]
fn dg_run_reports_unseen_domain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dg.toml");
    fs::write(
        &p,
        r#"
epochs = 1
iterations_per_epoch = 1
batch_size = 4

[data]
sources = [{ name = "a", samples_per_class = 3 }, { name = "b", samples_per_class = 3, shift = { rotation_deg = 5.0 } }]
unseen = { name = "u", samples_per_class = 3, shift = { rotation_deg = 15.0 } }
"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = ok(&damp(
        dir.path(),
        &["train", "--config", p.to_str().unwrap(), "--mode", "dg", "--out", run.to_str().unwrap()],
    ));
    assert!(out.lines().any(|l| l.starts_with("u\t")), "{out}");
    assert!(!out.lines().any(|l| l.starts_with("target")), "{out}");
}
