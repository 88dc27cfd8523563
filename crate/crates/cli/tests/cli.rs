use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {"n_classes": 6, "n_pairs": 24, "n_heldout_pairs": 6, "n_train": 6, "n_eval": 6},
  "clip": {"pairs": 48, "heldout_pairs": 6, "steps": 4, "batch_size": 12},
  "stage1": {"steps": 6, "batch_size": 6},
  "stage2": {"steps": 4, "batch_size": 2}
}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ovfs(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ovfs"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("tiny.json")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.ovfs(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
    }

    fn fails(&self, args: &[&str]) -> Value {
        let out = self.ovfs(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        serde_json::from_slice(&out.stderr).expect("error JSON on stderr")
    }

    /// Data, encoder and Stage I in `data/`, `clip/`, `s1/`.
    fn through_stage1(&self) {
        self.ok(&["--out", "data", "gen-data"]);
        self.ok(&["--data", "data", "--out", "clip", "pretrain-clip"]);
        self.ok(&[
            "--data",
            "data",
            "--clip",
            "clip/clip.bin",
            "--out",
            "s1",
            "pretrain",
        ]);
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let e = Env::new();
    e.ok(&["--seed", "4", "--out", "a", "gen-data"]);
    e.ok(&["--seed", "4", "--out", "b", "gen-data"]);
    e.ok(&["--seed", "5", "--out", "c", "gen-data"]);
    // The config echo records the output path, so it is the one file allowed to differ.
    let data = |d: &str| -> Vec<_> {
        files(&e.p(d))
            .into_iter()
            .filter(|(p, _)| p != Path::new("config.json"))
            .collect()
    };
    let (a, b, c) = (data("a"), data("b"), data("c"));
    assert!(a.len() > 10);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn gen_data_honours_class_and_sample_counts() {
    let e = Env::new();
    let s = e.ok(&[
        "--out",
        "d",
        "gen-data",
        "--classes",
        "8",
        "--samples",
        "64",
    ]);
    assert_eq!(s["classes"], 8);
    assert_eq!(s["train"], 64);
    let manifest = fs::read_to_string(e.p("d/train/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 64);
    let classes: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(e.p("d/classes.json")).unwrap()).unwrap();
    assert_eq!(classes.len(), 8);
}

#[test]
fn existing_output_needs_force() {
    let e = Env::new();
    e.ok(&["--out", "d", "gen-data"]);
    let err = e.fails(&["--out", "d", "gen-data"]);
    assert_eq!(err["error"], "path_exists");
    e.ok(&["--out", "d", "--force", "gen-data"]);
}

#[test]
fn config_errors_are_reported_as_json() {
    let e = Env::new();
    fs::write(e.p("bad.json"), r#"{"stage9": {}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ovfs"))
        .current_dir(e.dir.path())
        .args(["--config", "bad.json", "--out", "x", "gen-data"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "json");
    assert_eq!(
        e.fails(&["--out", "x", "gen-data", "--classes", "1"])["error"],
        "invalid_argument"
    );
    assert_eq!(
        e.fails(&["--data", "nowhere", "--out", "y", "pretrain-clip"])["error"],
        "missing_input"
    );
}

#[test]
fn thread_cap_is_validated() {
    let e = Env::new();
    let out = Command::new(env!("CARGO_BIN_EXE_ovfs"))
        .current_dir(e.dir.path())
        .env("OVFS_THREADS", "0")
        .args(["config"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let ok = Command::new(env!("CARGO_BIN_EXE_ovfs"))
        .current_dir(e.dir.path())
        .env("OVFS_THREADS", "2")
        .args(["config"])
        .output()
        .unwrap();
    assert!(ok.status.success());
}

#[test]
fn config_is_echoed_with_defaults_resolved() {
    let e = Env::new();
    e.ok(&["--seed", "9", "--out", "d", "gen-data"]);
    let echoed: Value =
        serde_json::from_str(&fs::read_to_string(e.p("d/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 9);
    assert_eq!(echoed["data"]["n_classes"], 6);
    // Fields absent from the input file appear with their defaults.
    assert_eq!(echoed["stage2"]["tau"], 100.0);
    assert_eq!(echoed["paths"]["out"], "d");
}

#[test]
fn pretrain_logs_every_step_and_resumes_exactly() {
    let e = Env::new();
    e.through_stage1();
    let log = fs::read_to_string(e.p("s1/loss.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let rec: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "l_itc", "l_itm", "l_lm", "lr"] {
        assert!(rec.get(k).is_some(), "missing {k}");
    }

    // Halt after 2 of 6 steps, then resume: the result matches the straight run.
    fs::write(
        e.p("halt.json"),
        TINY.replace(
            r#""stage1": {"steps": 6, "batch_size": 6}"#,
            r#""stage1": {"steps": 6, "batch_size": 6, "stop_after": 2}"#,
        ),
    )
    .unwrap();
    let base = ["--data", "data", "--clip", "clip/clip.bin"];
    let mut halted = vec!["--config", "halt.json"];
    halted.extend(base);
    halted.extend(["--out", "half", "pretrain"]);
    let out = Command::new(env!("CARGO_BIN_EXE_ovfs"))
        .current_dir(e.dir.path())
        .args(&halted)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read_to_string(e.p("half/loss.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let mut resumed = base.to_vec();
    resumed.extend(["--out", "rest", "pretrain", "--resume", "half/stage1.bin"]);
    e.ok(&resumed);
    let rest = fs::read_to_string(e.p("rest/loss.jsonl")).unwrap();
    let full: Vec<&str> = log.lines().collect();
    assert_eq!(rest.lines().collect::<Vec<_>>(), full[2..]);
    assert_eq!(
        fs::read(e.p("rest/stage1.bin")).unwrap(),
        fs::read(e.p("s1/stage1.bin")).unwrap()
    );
}

#[test]
fn loss_toggles_select_objectives() {
    let e = Env::new();
    e.ok(&["--out", "data", "gen-data"]);
    e.ok(&["--data", "data", "--out", "clip", "pretrain-clip"]);
    let r = e.ok(&[
        "--data",
        "data",
        "--clip",
        "clip/clip.bin",
        "--out",
        "s1",
        "pretrain",
        "--loss-toggles",
        "itc,itm",
    ]);
    assert_eq!(r["loss_toggles"], "itc,itm");
    let first: Value = serde_json::from_str(
        fs::read_to_string(e.p("s1/loss.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert!(first["l_lm"].is_null());
    assert!(first["l_itc"].is_number());
    let err = e.fails(&[
        "--data",
        "data",
        "--clip",
        "clip/clip.bin",
        "--out",
        "s1b",
        "pretrain",
        "--loss-toggles",
        "itx",
    ]);
    assert_eq!(err["error"], "invalid_argument");
}

#[test]
fn segmentation_train_eval_and_infer() {
    let e = Env::new();
    e.through_stage1();
    let common = ["--data", "data", "--clip", "clip/clip.bin"];
    let with = |extra: &[&str]| -> Vec<String> {
        common.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let run = |args: Vec<String>| e.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let s = run(with(&[
        "--out",
        "seg",
        "train-seg",
        "--stage1",
        "s1/stage1.bin",
    ]));
    assert_eq!(s["novel_target_pixels"], 0);
    assert_eq!(s["from_stage1"], true);
    let s = run(with(&[
        "--out",
        "seg_static",
        "train-seg",
        "--stage1",
        "s1/stage1.bin",
        "--static-text",
    ]));
    assert_eq!(s["static_text"], true);
    let s = run(with(&["--out", "seg_rand", "train-seg", "--no-stage1"]));
    assert_eq!(s["from_stage1"], false);
    assert_eq!(
        e.fails(
            &with(&["--out", "seg_missing", "train-seg"])
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()
        )["error"],
        "missing_input"
    );

    // Same checkpoint twice: identical reports.
    for out in ["ev1", "ev2"] {
        let o = e.ovfs(
            &with(&["--out", out, "eval", "--checkpoint", "seg/stage2.bin"])
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("mIoU"));
    }
    let r1 = fs::read(e.p("ev1/report.json")).unwrap();
    assert_eq!(r1, fs::read(e.p("ev2/report.json")).unwrap());
    let report: Value = serde_json::from_slice(&r1).unwrap();
    let per_class = report["per_class"].as_array().unwrap();
    assert_eq!(per_class.len(), 6);
    assert!(per_class.iter().any(|c| c["novel"] == true));
    assert!(per_class.iter().any(|c| c["novel"] == false));

    // A dataset with another class list is rejected.
    e.ok(&["--out", "other", "gen-data", "--classes", "7"]);
    let err = e.fails(&[
        "--data",
        "other",
        "--clip",
        "clip/clip.bin",
        "--out",
        "ev3",
        "eval",
        "--checkpoint",
        "seg/stage2.bin",
    ]);
    assert_eq!(err["error"], "class_mismatch");

    // Inference over a caller-chosen class list, novel classes included.
    let split: Value =
        serde_json::from_str(&fs::read_to_string(e.p("data/split.json")).unwrap()).unwrap();
    let classes: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(e.p("data/classes.json")).unwrap()).unwrap();
    let novel = split["novel"][0].as_u64().unwrap() as usize;
    let base = split["base"][0].as_u64().unwrap() as usize;
    let list = format!(
        "{},{}",
        classes[novel]["name"].as_str().unwrap(),
        classes[base]["name"].as_str().unwrap()
    );
    let side = e.ok(&[
        "--clip",
        "clip/clip.bin",
        "--out",
        "pred",
        "infer",
        "--checkpoint",
        "seg/stage2.bin",
        "--image",
        "data/eval/images/00000.png",
        "--classes",
        &list,
    ]);
    assert_eq!(side["classes"].as_array().unwrap().len(), 2);
    let map = image::open(e.p("pred/00000.png")).unwrap().to_luma8();
    assert_eq!(map.dimensions(), (64, 64));
    assert!(map.pixels().all(|p| p[0] < 2));
    assert!(e.p("pred/00000.json").exists());
}
