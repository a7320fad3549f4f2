use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn c2fpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2fpl"))
        .args(args)
        .env_remove("C2FPL_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small synthetic bundle plus truth in `dir`.
fn synth(dir: &Path, n: usize, fraction: f64) -> (std::path::PathBuf, std::path::PathBuf) {
    let config = dir.join("synth.json");
    fs::write(
        &config,
        format!(r#"{{"n_videos": {n}, "anomaly_video_fraction": {fraction}, "d": 8}}"#),
    )
    .unwrap();
    let bundle = dir.join("b.c2fb");
    let out = c2fpl(&[
        "synth",
        "--config",
        p(&config),
        "--seed",
        "3",
        "--out",
        p(&bundle),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    (bundle, dir.join("b.truth.json"))
}

#[test]
fn help_on_every_subcommand() {
    for sub in [
        "synth", "labels", "train", "score", "eval", "run", "ablate", "sweep",
    ] {
        let out = c2fpl(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage"),
            "{sub}"
        );
    }
    assert_eq!(c2fpl(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_then_run_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, truth) = synth(dir.path(), 20, 0.5);
    let run_dir = dir.path().join("run");
    let out = c2fpl(&[
        "run",
        "--mode",
        "full",
        "--bundle",
        p(&bundle),
        "--truth",
        p(&truth),
        "--epochs",
        "3",
        "--seed",
        "1",
        "--out",
        p(&run_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in [
        "labels.json",
        "model.bin",
        "metrics.json",
        "manifest.json",
        "scores.csv",
    ] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();
    let auc = metrics["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(metrics["num_positive"].as_u64().unwrap() > 0);
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (bundle, truth) = synth(d, 12, 0.5);
    let labels = d.join("labels.json");
    let coarse = d.join("coarse.json");
    let out = c2fpl(&[
        "labels",
        "--bundle",
        p(&bundle),
        "--seed",
        "2",
        "--out",
        p(&labels),
        "--coarse-out",
        p(&coarse),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config = d.join("train.json");
    fs::write(&config, r#"{"epochs": 2, "hidden": [16, 4]}"#).unwrap();
    let model = d.join("m.bin");
    let out = c2fpl(&[
        "train",
        "--bundle",
        p(&bundle),
        "--labels",
        p(&labels),
        "--config",
        p(&config),
        "--out",
        p(&model),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let scores = d.join("scores.csv");
    let out = c2fpl(&[
        "score",
        "--model",
        p(&model),
        "--bundle",
        p(&bundle),
        "--out",
        p(&scores),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(fs::read_to_string(&scores)
        .unwrap()
        .starts_with("video_id,frame_index,score"));
    let metrics = d.join("metrics.json");
    let out = c2fpl(&[
        "eval",
        "--scores",
        p(&scores),
        "--truth",
        p(&truth),
        "--out",
        p(&metrics),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(metrics.is_file());
}

#[test]
fn eval_without_positive_frames_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, truth) = synth(d, 3, 0.0);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&truth).unwrap()).unwrap();
    let mut csv = String::from("video_id,frame_index,score\n");
    for (id, frames) in t["frame_labels"].as_object().unwrap() {
        for i in 0..frames.as_array().unwrap().len() {
            csv.push_str(&format!("{id},{i},{}\n", i as f64 / 100.0));
        }
    }
    let scores = d.join("scores.csv");
    fs::write(&scores, csv).unwrap();
    let metrics = d.join("metrics.json");
    let out = c2fpl(&[
        "eval",
        "--scores",
        p(&scores),
        "--truth",
        p(&truth),
        "--out",
        p(&metrics),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: code=5 kind=undefined_auc"), "{err}");
    assert!(!metrics.exists());
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (bundle, _) = synth(d, 4, 0.5);

    let out = c2fpl(&[
        "run",
        "--bundle",
        p(&bundle),
        "--frob",
        "--out",
        p(&d.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = c2fpl(&[
        "run",
        "--bundle",
        p(&bundle),
        "--beta",
        "1.5",
        "--out",
        p(&d.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("x").exists(), "nothing written on a flag error");

    let out = c2fpl(&[
        "labels",
        "--bundle",
        p(&d.join("missing.c2fb")),
        "--out",
        p(&d.join("l.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("error: code=3 kind=io"));

    let bad = d.join("bad.c2fb");
    let mut bytes = fs::read(&bundle).unwrap();
    bytes[0] = b'Z';
    fs::write(&bad, bytes).unwrap();
    let out = c2fpl(&["labels", "--bundle", p(&bad), "--out", p(&d.join("l.json"))]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    let out = c2fpl(&[
        "run",
        "--mode",
        "wscoarse",
        "--bundle",
        p(&bundle),
        "--out",
        p(&d.join("y")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runs_are_idempotent_and_leave_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (bundle, truth) = synth(d, 10, 0.5);
    let before = (fs::read(&bundle).unwrap(), fs::read(&truth).unwrap());
    let mut outputs = Vec::new();
    for k in 0..2 {
        let run_dir = d.join(format!("run{k}"));
        let out = c2fpl(&[
            "run",
            "--bundle",
            p(&bundle),
            "--truth",
            p(&truth),
            "--epochs",
            "2",
            "--seed",
            "9",
            "--out",
            p(&run_dir),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        outputs.push(
            [
                "labels.json",
                "coarse_labels.json",
                "model.bin",
                "scores.csv",
                "metrics.json",
            ]
            .map(|f| fs::read(run_dir.join(f)).unwrap()),
        );
    }
    assert!(outputs[0] == outputs[1]);
    assert_eq!(
        before,
        (fs::read(&bundle).unwrap(), fs::read(&truth).unwrap())
    );

    let again = d.join("again.c2fb");
    let config = d.join("synth.json");
    let out = c2fpl(&[
        "synth",
        "--config",
        p(&config),
        "--seed",
        "3",
        "--out",
        p(&again),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&again).unwrap(), fs::read(&bundle).unwrap());
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_c2fpl"))
        .args(["synth", "--out", p(&dir.path().join("b.c2fb"))])
        .env("C2FPL_THREADS", "none")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("b.c2fb").exists());
}
