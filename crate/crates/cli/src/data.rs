//! `synth`, `ingest` and `stats`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use airtime::dataset::synth::generate_synthetic_videos;
use airtime::dataset::{
    i_count, parse_pose_output, read_dataset, track_skater, write_dataset, write_pose_output,
    FlightSpan, SynthConfig, VideoRecord,
};
use serde::{Deserialize, Serialize};

use crate::failure::{io_error, CliResult, Context, Failure};
use crate::settings::{self, Provenance};

/// File name of the annotation list written by `synth --export-poses`.
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Per-video annotation read by `ingest`, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub video_id: String,
    pub category: String,
    pub fps: f64,
    #[serde(default)]
    pub flights: Vec<FlightSpan>,
    /// Pose file relative to the pose directory; `<video_id>.json` if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<String>,
}

pub struct SynthArgs<'a> {
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub set: &'a [String],
    pub seed: u64,
    pub export_poses: Option<&'a Path>,
}

pub fn synth(args: SynthArgs) -> CliResult<()> {
    let cfg: SynthConfig = settings::load(&SynthConfig::default(), args.config, args.set)?;
    cfg.validate()?;
    let videos = generate_synthetic_videos(&cfg, args.seed)?;
    let records: Vec<VideoRecord> = videos.iter().map(|v| v.record.clone()).collect();
    write_dataset(args.out, &records)?;
    settings::write_sidecar(
        args.out,
        &Provenance {
            command: "synth",
            seed: args.seed,
            config: &cfg,
            inputs: BTreeMap::new(),
        },
    )?;
    if let Some(dir) = args.export_poses {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let mut ann = String::new();
        for v in &videos {
            let path = dir.join(format!("{}.json", v.record.video_id));
            std::fs::write(&path, write_pose_output(&v.detections))
                .map_err(|e| io_error(&path, e))?;
            let a = Annotation {
                video_id: v.record.video_id.clone(),
                category: v.record.category.clone(),
                fps: v.record.fps(),
                flights: v.record.flights.clone(),
                poses: None,
            };
            ann.push_str(&serde_json::to_string(&a)?);
            ann.push('\n');
        }
        let path = dir.join(ANNOTATIONS_FILE);
        std::fs::write(&path, ann).map_err(|e| io_error(&path, e))?;
    }
    println!("wrote {} videos to {}", records.len(), args.out.display());
    print!("{}", stats_table(&dataset_stats(&records)));
    Ok(())
}

pub fn ingest(annotations: &Path, poses: &Path, out: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(annotations).map_err(|e| io_error(annotations, e))?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut total = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match ingest_one(line, poses) {
            Ok((record, held)) => {
                if held > 0 {
                    eprintln!(
                        "warning: {}: {held} frames without detections reused the previous pose",
                        record.video_id
                    );
                }
                records.push(record);
            }
            Err(e) => failures.push(format!("{}:{}: {e}", annotations.display(), i + 1)),
        }
    }
    if total == 0 {
        eprintln!(
            "warning: {} lists no videos; writing an empty dataset",
            annotations.display()
        );
    }
    write_dataset(out, &records)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("annotations", annotations.display().to_string());
    inputs.insert("poses", poses.display().to_string());
    settings::write_sidecar(
        out,
        &Provenance {
            command: "ingest",
            seed: 0,
            config: &serde_json::json!({}),
            inputs,
        },
    )?;
    for f in &failures {
        eprintln!("error: {f}");
    }
    println!(
        "ingested {} of {total} videos into {}",
        records.len(),
        out.display()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{} of {total} videos failed",
            failures.len()
        )))
    }
}

fn ingest_one(line: &str, dir: &Path) -> CliResult<(VideoRecord, usize)> {
    let a: Annotation =
        serde_json::from_str(line).map_err(|e| Failure::runtime(format!("bad annotation: {e}")))?;
    let file: PathBuf = dir.join(
        a.poses
            .clone()
            .unwrap_or_else(|| format!("{}.json", a.video_id)),
    );
    let text = std::fs::read_to_string(&file)
        .map_err(|e| io_error(&file, e))
        .context(&a.video_id)?;
    let frames = parse_pose_output(&text).context(&a.video_id)?;
    let tracked = track_skater(&frames, &a.video_id, a.fps).context(&a.video_id)?;
    let held = tracked.held.iter().filter(|h| **h).count();
    let record = VideoRecord::new(a.category, tracked.sequence, a.flights)?;
    Ok((record, held))
}

/// One column of the dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub name: String,
    pub videos: usize,
    pub multi_jump_videos: usize,
    pub average_frames: Option<f64>,
    pub flights: usize,
    pub average_air_time: Option<f64>,
}

fn group(name: &str, records: &[&VideoRecord]) -> GroupStats {
    let frames: usize = records.iter().map(|r| r.len()).sum();
    let air: Vec<f64> = records
        .iter()
        .flat_map(|r| {
            let fps = r.fps();
            i_count(&r.tags()).into_iter().map(move |n| n as f64 / fps)
        })
        .collect();
    let n = records.len();
    GroupStats {
        name: name.to_string(),
        videos: n,
        multi_jump_videos: records.iter().filter(|r| r.flights.len() >= 2).count(),
        average_frames: (n > 0).then(|| frames as f64 / n as f64),
        flights: air.len(),
        average_air_time: (!air.is_empty()).then(|| air.iter().sum::<f64>() / air.len() as f64),
    }
}

/// Per-category columns, then single-jump, multiple-jump and all videos.
pub fn dataset_stats(records: &[VideoRecord]) -> Vec<GroupStats> {
    let categories: BTreeSet<&str> = records.iter().map(|r| r.category.as_str()).collect();
    let mut out: Vec<GroupStats> = categories
        .iter()
        .map(|c| {
            group(
                c,
                &records
                    .iter()
                    .filter(|r| r.category == *c)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    out.push(group(
        "single_jump",
        &records
            .iter()
            .filter(|r| r.flights.len() == 1)
            .collect::<Vec<_>>(),
    ));
    out.push(group(
        "multiple_jump",
        &records
            .iter()
            .filter(|r| r.flights.len() >= 2)
            .collect::<Vec<_>>(),
    ));
    out.push(group("all", &records.iter().collect::<Vec<_>>()));
    out
}

pub fn stats_table(groups: &[GroupStats]) -> String {
    let opt =
        |v: Option<f64>, d: usize| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.d$}"));
    let rows: Vec<(&str, Vec<String>)> = vec![
        (
            "Videos",
            groups.iter().map(|g| g.videos.to_string()).collect(),
        ),
        (
            "Videos with >= 2 jumps",
            groups
                .iter()
                .map(|g| g.multi_jump_videos.to_string())
                .collect(),
        ),
        (
            "Average of frames",
            groups.iter().map(|g| opt(g.average_frames, 0)).collect(),
        ),
        (
            "Flights",
            groups.iter().map(|g| g.flights.to_string()).collect(),
        ),
        (
            "Average air time (s)",
            groups.iter().map(|g| opt(g.average_air_time, 3)).collect(),
        ),
    ];
    let w0 = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let widths: Vec<usize> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            rows.iter()
                .map(|(_, v)| v[i].len())
                .max()
                .unwrap_or(0)
                .max(g.name.len())
        })
        .collect();
    let mut s = format!("{:<w0$}", "Dataset");
    for (g, w) in groups.iter().zip(&widths) {
        let _ = write!(s, "  {:>w$}", g.name);
    }
    s.push('\n');
    for (k, vals) in rows {
        let _ = write!(s, "{k:<w0$}");
        for (v, w) in vals.iter().zip(&widths) {
            let _ = write!(s, "  {v:>w$}");
        }
        s.push('\n');
    }
    s
}

pub fn stats(data: &Path, json: bool) -> CliResult<()> {
    let records = read_dataset(data)?;
    let groups = dataset_stats(&records);
    if json {
        println!("{}", serde_json::to_string_pretty(&groups)?);
    } else {
        print!("{}", stats_table(&groups));
    }
    Ok(())
}
