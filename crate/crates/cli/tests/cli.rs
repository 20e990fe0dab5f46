use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use airtime::dataset::{i_count, parse_tags, read_dataset, tags_to_intervals, Tag};
use serde_json::Value;

const SMALL_MODEL: [&str; 8] = [
    "--set",
    "width=16",
    "--set",
    "gcn_hidden=16",
    "--set",
    "ffn=32",
    "--set",
    "batch_size=8",
];

fn airtime(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airtime"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = airtime(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, videos: usize, seed: &str) -> PathBuf {
    let path = dir.join(name);
    let n = format!("videos={videos}");
    ok(&[
        "synth",
        "--out",
        s(&path),
        "--seed",
        seed,
        "--set",
        &n,
        "--set",
        "max_frames=80",
    ]);
    path
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--set",
        "epochs=2",
    ];
    args.extend(SMALL_MODEL);
    args.extend(extra);
    airtime(&args)
}

#[test]
fn synth_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.jsonl", 50, "9");
    let b = synth(dir.path(), "b.jsonl", 50, "9");
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 50);
    assert!(dir.path().join("a.jsonl.meta.json").exists());
    let c = synth(dir.path(), "c.jsonl", 50, "10");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn stats_multi_jump_count_matches_the_tags() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", 40, "2");
    let out = ok(&["stats", "--data", s(&data), "--json"]);
    let groups: Value = serde_json::from_slice(&out.stdout).unwrap();
    let all = groups
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["name"] == "all")
        .unwrap();
    let records = read_dataset(&data).unwrap();
    let scan = records
        .iter()
        .filter(|r| r.tags().iter().filter(|t| **t == Tag::B).count() >= 2)
        .count();
    assert_eq!(all["multi_jump_videos"], scan);
    assert_eq!(all["videos"], 40);
    let table = String::from_utf8(ok(&["stats", "--data", s(&data)]).stdout).unwrap();
    assert!(table.contains("Videos with >= 2 jumps"));
}

#[test]
fn ingest_reproduces_the_synthetic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let poses = dir.path().join("poses");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "4",
        "--set",
        "videos=12",
        "--export-poses",
        s(&poses),
    ]);
    let out = dir.path().join("ingested.jsonl");
    ok(&[
        "ingest",
        "--annotations",
        s(&poses.join("annotations.jsonl")),
        "--poses",
        s(&poses),
        "--out",
        s(&out),
    ]);
    let a = read_dataset(&data).unwrap();
    let b = read_dataset(&out).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            (&x.video_id, &x.category, &x.flights),
            (&y.video_id, &y.category, &y.flights)
        );
        assert_eq!(x.len(), y.len());
        for (p, q) in x.pose.frames.iter().zip(&y.pose.frames) {
            for (u, v) in p.iter().flatten().zip(q.iter().flatten()) {
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }
}

#[test]
fn ingest_reports_bad_annotations_and_accepts_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let poses = dir.path().join("poses");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "4",
        "--set",
        "videos=3",
        "--export-poses",
        s(&poses),
    ]);
    let ann = poses.join("annotations.jsonl");
    let text = std::fs::read_to_string(&ann).unwrap();
    let mut lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    lines[1]["flights"] = serde_json::json!([{"start": 5, "end": 100000}]);
    let bad = dir.path().join("bad.jsonl");
    let body: String = lines.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(&bad, body).unwrap();
    let out_path = dir.path().join("out.jsonl");
    let out = airtime(&[
        "ingest",
        "--annotations",
        s(&bad),
        "--poses",
        s(&poses),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl:2:"), "{err}");
    assert_eq!(read_dataset(&out_path).unwrap().len(), 2);

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = airtime(&[
        "ingest",
        "--annotations",
        s(&empty),
        "--poses",
        s(&poses),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(read_dataset(&out_path).unwrap().is_empty());
}

#[test]
fn training_is_reproducible_and_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", 16, "1");
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    for out in [&a, &b] {
        let o = train(&data, out, &["--seed", "3", "--set", "val_fraction=0.25"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.exists());
    }
    let log = |p: &Path| std::fs::read_to_string(format!("{}.loss.csv", p.display())).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_eq!(log(&a).lines().count(), 3);
    assert!(log(&a).starts_with("epoch,loss,val_accuracy\n"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let meta: Value = serde_json::from_str(
        &std::fs::read_to_string(format!("{}.meta.json", a.display())).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config"]["width"], 16);
}

#[test]
fn divergence_exits_with_runtime_error_and_keeps_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", 16, "1");
    let out = dir.path().join("m.ckpt");
    let o = train(&data, &out, &["--set", "lr=1e300"]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let log = std::fs::read_to_string(format!("{}.loss.csv", out.display())).unwrap();
    assert!(log.starts_with("epoch,loss"));
    assert!(!out.exists());
}

#[test]
fn bad_configuration_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", 4, "1");
    let out = dir.path().join("m.ckpt");
    assert_eq!(
        train(&data, &out, &["--set", "lerning_rate=0.1"])
            .status
            .code(),
        Some(1)
    );
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "heads = 3\n").unwrap();
    assert_eq!(
        train(&data, &out, &["--config", s(&cfg)]).status.code(),
        Some(1)
    );
    assert_eq!(
        airtime(&["synth", "--out", s(&out), "--set", "videos"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        airtime(&["eval", "--data", s(&data)]).status.code(),
        Some(1)
    );
    assert_eq!(airtime(&["--help"]).status.code(), Some(0));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", 10, "5");
    let report = dir.path().join("r.json");
    let out = ok(&[
        "eval",
        "--oracle",
        "--data",
        s(&data),
        "--report",
        s(&report),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("100.00"), "{text}");
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let m = &r["results"][0]["metrics"];
    assert_eq!(m["accuracy"], 100.0);
    assert_eq!(m["macro_f1"], 1.0);
    assert_eq!(m["mean_error"], 0.0);
    assert_eq!(m["edit_distance"], 0.0);
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, y) in b.iter().enumerate() {
            cur.push(
                (prev[j] + usize::from(x != y))
                    .min(prev[j + 1] + 1)
                    .min(cur[j] + 1),
            );
        }
        prev = cur;
    }
    prev[b.len()]
}

#[test]
fn evaluation_grid_and_dumped_predictions_agree_with_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let train_data = synth(dir.path(), "train.jsonl", 16, "1");
    let a = synth(dir.path(), "a.jsonl", 8, "2");
    let b = synth(dir.path(), "b.jsonl", 8, "3");
    let m1 = dir.path().join("m1.ckpt");
    let m2 = dir.path().join("m2.ckpt");
    assert!(train(&train_data, &m1, &["--seed", "1"]).status.success());
    assert!(train(&train_data, &m2, &["--seed", "2"]).status.success());
    let report = dir.path().join("r.json");
    let dump = dir.path().join("p.jsonl");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&m1),
        "--checkpoint",
        s(&m2),
        "--data",
        s(&a),
        "--data",
        s(&b),
        "--report",
        s(&report),
        "--dump-predictions",
        s(&dump),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("accuracy (%)"));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let results = r["results"].as_array().unwrap();
    assert_eq!(results.len(), 4);
    assert_eq!(r["rows"][1]["seed"], 2);

    let dumped: Vec<Value> = std::fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(dumped.len(), 32);
    for cell in results {
        let rows: Vec<&Value> = dumped
            .iter()
            .filter(|d| d["row"] == cell["row"] && d["column"] == cell["column"])
            .collect();
        let (mut hit, mut total, mut edits) = (0usize, 0usize, 0usize);
        for d in &rows {
            let p: Vec<char> = d["predicted"].as_str().unwrap().chars().collect();
            let g: Vec<char> = d["gold"].as_str().unwrap().chars().collect();
            hit += p.iter().zip(&g).filter(|(x, y)| x == y).count();
            total += g.len();
            edits += levenshtein(&p, &g);
        }
        let m = &cell["metrics"];
        let acc = 100.0 * hit as f64 / total as f64;
        assert!((m["accuracy"].as_f64().unwrap() - acc).abs() < 1e-9);
        let ed = edits as f64 / rows.len() as f64;
        assert!((m["edit_distance"].as_f64().unwrap() - ed).abs() < 1e-9);
    }
}

#[test]
fn by_category_adds_an_overall_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "1",
        "--set",
        "videos=12",
        "--set",
        "rotation_buckets=1",
        "--set",
        "jumps_max=2",
    ]);
    let report = dir.path().join("r.json");
    ok(&[
        "eval",
        "--oracle",
        "--data",
        s(&data),
        "--by-category",
        "--report",
        s(&report),
    ]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(
        r["columns"],
        serde_json::json!(["jumps1-rot0", "jumps2-rot0", "all"])
    );
}

#[test]
fn predict_reports_spans_and_requires_fps_for_pose_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let poses = dir.path().join("poses");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "4",
        "--set",
        "videos=6",
        "--export-poses",
        s(&poses),
    ]);
    let m = dir.path().join("m.ckpt");
    assert!(train(&data, &m, &[]).status.success());
    let out = ok(&["predict", "--checkpoint", s(&m), "--input", s(&data)]);
    let preds: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), 6);
    for p in preds.as_array().unwrap() {
        let tags = parse_tags(p["tags"].as_str().unwrap()).unwrap();
        let spans = tags_to_intervals(&tags);
        let counts = i_count(&tags);
        let listed = p["spans"].as_array().unwrap();
        assert_eq!(listed.len(), spans.len());
        for ((l, sp), n) in listed.iter().zip(&spans).zip(counts) {
            assert_eq!(l["start"], sp.start);
            assert_eq!(l["end"], sp.end);
            assert_eq!(l["i_count"], n);
            assert!((l["air_time"].as_f64().unwrap() - n as f64 / 30.0).abs() < 1e-12);
        }
    }

    let file = std::fs::read_dir(&poses)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap() != "annotations.jsonl")
        .unwrap();
    let o = airtime(&["predict", "--checkpoint", s(&m), "--poses", s(&file)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fps"));
    let target = dir.path().join("one.json");
    ok(&[
        "predict",
        "--checkpoint",
        s(&m),
        "--poses",
        s(&file),
        "--fps",
        "30",
        "--out",
        s(&target),
    ]);
    let one: Value = serde_json::from_str(&std::fs::read_to_string(&target).unwrap()).unwrap();
    assert_eq!(one.as_array().unwrap().len(), 1);
}

#[test]
fn finetune_replaces_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", 16, "1");
    let base = dir.path().join("base.ckpt");
    assert!(train(&data, &base, &[]).status.success());
    let out = dir.path().join("ft.ckpt");
    ok(&[
        "finetune",
        "--base",
        s(&base),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--set",
        "epochs=1",
        "--set",
        "head=classification",
    ]);
    let report = dir.path().join("r.json");
    let text = String::from_utf8(
        ok(&[
            "eval",
            "--checkpoint",
            s(&out),
            "--data",
            s(&data),
            "--report",
            s(&report),
        ])
        .stdout,
    )
    .unwrap();
    assert!(text.contains("Accuracy (%)"), "{text}");
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["results"][0]["classification_accuracy"].is_number());
    assert_eq!(r["rows"][0]["config"]["model"]["encoder"]["width"], 16);
}

#[test]
fn incompatible_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", 4, "1");
    let bogus = dir.path().join("x.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = airtime(&["eval", "--checkpoint", s(&bogus), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(2));
}
