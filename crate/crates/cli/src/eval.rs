//! `eval` and `predict`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use airtime::dataset::{
    i_count, parse_pose_output, read_dataset, tags_to_intervals, tags_to_string, track_skater, Tag,
    VideoRecord,
};
use airtime::embedding::FixedEmbeddingTable;
use airtime::metrics::{evaluate, grid_table, MetricsReport, VideoPrediction};
use airtime::model::{HeadConfig, Model};
use airtime::training::{prepare_examples, Checkpoint, ExampleTarget, TrainConfig};
use serde::Serialize;

use crate::failure::{io_error, CliResult, Context, Failure};

pub struct EvalArgs<'a> {
    pub checkpoints: &'a [PathBuf],
    pub data: &'a [PathBuf],
    pub by_category: bool,
    pub oracle: bool,
    pub report: Option<&'a Path>,
    pub dump_predictions: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
}

struct Column {
    name: String,
    records: Vec<VideoRecord>,
}

struct Row {
    name: String,
    source: Option<(PathBuf, Checkpoint, Model)>,
}

#[derive(Serialize)]
struct RowInfo<'a> {
    name: &'a str,
    checkpoint: Option<String>,
    seed: Option<u64>,
    config: Option<&'a TrainConfig>,
}

#[derive(Serialize)]
struct Cell {
    row: String,
    column: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classification_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct Report<'a> {
    rows: Vec<RowInfo<'a>>,
    columns: Vec<&'a str>,
    results: &'a [Cell],
}

/// One dumped prediction; tags are strings over `OBIE`.
#[derive(Serialize)]
struct Dumped<'a> {
    row: &'a str,
    column: &'a str,
    video_id: &'a str,
    category: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    predicted: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    predicted_class: Option<&'a str>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(
        || p.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn columns(data: &[PathBuf], by_category: bool) -> CliResult<Vec<Column>> {
    let mut out = Vec::new();
    for path in data {
        let records = read_dataset(path)?;
        let name = stem(path);
        if by_category {
            let cats: BTreeSet<String> = records.iter().map(|r| r.category.clone()).collect();
            for c in &cats {
                out.push(Column {
                    name: if data.len() == 1 {
                        c.clone()
                    } else {
                        format!("{name}/{c}")
                    },
                    records: records
                        .iter()
                        .filter(|r| &r.category == c)
                        .cloned()
                        .collect(),
                });
            }
            if cats.len() > 1 {
                out.push(Column {
                    name: if data.len() == 1 {
                        "all".to_string()
                    } else {
                        name
                    },
                    records,
                });
            }
        } else {
            out.push(Column { name, records });
        }
    }
    Ok(out)
}

pub fn load_model(path: &Path) -> CliResult<(Checkpoint, Model)> {
    let ckpt = Checkpoint::load(path).context(path.display())?;
    let model = Model::bind(&ckpt.store, &ckpt.meta.config.model).map_err(|e| {
        Failure::runtime(format!(
            "{}: checkpoint does not match its recorded configuration: {e}",
            path.display()
        ))
    })?;
    Ok((ckpt, model))
}

fn needs_table(model: &Model, embeddings: Option<&FixedEmbeddingTable>) -> CliResult<()> {
    if model.config().embedding.kind == airtime::embedding::EmbeddingKind::Fixed
        && embeddings.is_none()
    {
        return Err(Failure::usage(
            "this checkpoint uses fixed embeddings; pass --embeddings",
        ));
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    if args.data.is_empty() {
        return Err(Failure::usage("eval needs at least one --data file"));
    }
    if args.oracle == !args.checkpoints.is_empty() {
        return Err(Failure::usage(
            "pass either --checkpoint (one or more) or --oracle",
        ));
    }
    let table = args.embeddings.map(FixedEmbeddingTable::read).transpose()?;
    let cols = columns(args.data, args.by_category)?;
    let rows: Vec<Row> = if args.oracle {
        vec![Row {
            name: "oracle".to_string(),
            source: None,
        }]
    } else {
        args.checkpoints
            .iter()
            .map(|p| {
                let (ckpt, model) = load_model(p)?;
                needs_table(&model, table.as_ref())?;
                Ok(Row {
                    name: stem(p),
                    source: Some((p.clone(), ckpt, model)),
                })
            })
            .collect::<CliResult<_>>()?
    };

    let mut cells = Vec::new();
    let mut dump = String::new();
    for row in &rows {
        for col in &cols {
            let cell = match &row.source {
                None => {
                    let videos: Vec<VideoPrediction> = col
                        .records
                        .iter()
                        .map(|r| VideoPrediction {
                            video_id: r.video_id.clone(),
                            category: r.category.clone(),
                            predicted: r.tags().into_inner(),
                            gold: r.tags().into_inner(),
                        })
                        .collect();
                    dump_tags(&mut dump, &row.name, &col.name, &videos)?;
                    Cell {
                        row: row.name.clone(),
                        column: col.name.clone(),
                        metrics: Some(evaluate(&videos)?),
                        classification_accuracy: None,
                    }
                }
                Some((_, ckpt, model)) => {
                    let examples =
                        prepare_examples(&col.records, &ckpt.meta.config.model, table.as_ref())
                            .context(format!("{} on {}", row.name, col.name))?;
                    match &ckpt.meta.config.model.head {
                        HeadConfig::Crf => {
                            let mut videos = Vec::with_capacity(examples.len());
                            for e in &examples {
                                videos.push(VideoPrediction {
                                    video_id: e.video_id.clone(),
                                    category: e.category.clone(),
                                    predicted: model.predict_tags(&ckpt.store, &e.input())?,
                                    gold: e.gold_tags().unwrap_or_default().to_vec(),
                                });
                            }
                            dump_tags(&mut dump, &row.name, &col.name, &videos)?;
                            Cell {
                                row: row.name.clone(),
                                column: col.name.clone(),
                                metrics: Some(evaluate(&videos)?),
                                classification_accuracy: None,
                            }
                        }
                        HeadConfig::Classification { classes } => {
                            let mut hits = 0;
                            for e in &examples {
                                let (_, k) = model.classify(&ckpt.store, &e.input())?;
                                if matches!(e.target, ExampleTarget::Class(y) if y == k) {
                                    hits += 1;
                                }
                                let d = Dumped {
                                    row: &row.name,
                                    column: &col.name,
                                    video_id: &e.video_id,
                                    category: &e.category,
                                    predicted: None,
                                    gold: None,
                                    predicted_class: Some(&classes[k]),
                                };
                                dump.push_str(&serde_json::to_string(&d)?);
                                dump.push('\n');
                            }
                            let n = examples.len().max(1) as f64;
                            Cell {
                                row: row.name.clone(),
                                column: col.name.clone(),
                                metrics: None,
                                classification_accuracy: Some(100.0 * hits as f64 / n),
                            }
                        }
                    }
                }
            };
            cells.push(cell);
        }
    }

    print!("{}", render(&rows, &cols, &cells));
    if let Some(path) = args.report {
        let report = Report {
            rows: rows
                .iter()
                .map(|r| RowInfo {
                    name: &r.name,
                    checkpoint: r.source.as_ref().map(|(p, _, _)| p.display().to_string()),
                    seed: r.source.as_ref().map(|(_, c, _)| c.meta.seed),
                    config: r.source.as_ref().map(|(_, c, _)| &c.meta.config),
                })
                .collect(),
            columns: cols.iter().map(|c| c.name.as_str()).collect(),
            results: &cells,
        };
        let text = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(path, text).map_err(|e| io_error(path, e))?;
    }
    if let Some(path) = args.dump_predictions {
        std::fs::write(path, dump).map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

fn dump_tags(
    out: &mut String,
    row: &str,
    column: &str,
    videos: &[VideoPrediction],
) -> CliResult<()> {
    for v in videos {
        let d = Dumped {
            row,
            column,
            video_id: &v.video_id,
            category: &v.category,
            predicted: Some(tags_to_string(&v.predicted)),
            gold: Some(tags_to_string(&v.gold)),
            predicted_class: None,
        };
        out.push_str(&serde_json::to_string(&d)?);
        out.push('\n');
    }
    Ok(())
}

fn render(rows: &[Row], cols: &[Column], cells: &[Cell]) -> String {
    let at = |r: usize, c: usize| &cells[r * cols.len() + c];
    if rows.len() == 1 && cols.len() == 1 {
        let cell = at(0, 0);
        return match (&cell.metrics, cell.classification_accuracy) {
            (Some(m), _) => m.table(),
            (None, Some(a)) => format!("{:<16} {:>12.2}\n", "Accuracy (%)", a),
            (None, None) => String::new(),
        };
    }
    let row_names: Vec<String> = rows.iter().map(|r| r.name.clone()).collect();
    let col_names: Vec<String> = cols
        .iter()
        .map(|c| format!("{} ({})", c.name, c.records.len()))
        .collect();
    let grid = |f: &dyn Fn(&Cell) -> Option<f64>| -> Vec<Vec<Option<f64>>> {
        (0..rows.len())
            .map(|r| (0..cols.len()).map(|c| f(at(r, c))).collect())
            .collect()
    };
    let metrics: [(&str, usize, Box<dyn Fn(&Cell) -> Option<f64>>); 5] = [
        (
            "accuracy (%)",
            2,
            Box::new(|c: &Cell| {
                c.metrics
                    .as_ref()
                    .map(|m| m.accuracy)
                    .or(c.classification_accuracy)
            }),
        ),
        (
            "mean error (%)",
            2,
            Box::new(|c: &Cell| c.metrics.as_ref().and_then(|m| m.mean_error)),
        ),
        (
            "macro avg f1",
            3,
            Box::new(|c: &Cell| c.metrics.as_ref().map(|m| m.macro_f1)),
        ),
        (
            "avg edit distance",
            3,
            Box::new(|c: &Cell| c.metrics.as_ref().map(|m| m.edit_distance)),
        ),
        (
            "videos",
            0,
            Box::new(|c: &Cell| c.metrics.as_ref().map(|m| m.videos as f64)),
        ),
    ];
    let mut s = String::new();
    for (title, digits, f) in metrics.iter() {
        let g = grid(f.as_ref());
        if g.iter().flatten().all(Option::is_none) {
            continue;
        }
        let _ = writeln!(s, "{title} (rows: checkpoints, columns: test sets)");
        s.push_str(&grid_table(&row_names, &col_names, &g, *digits));
        s.push('\n');
    }
    s
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: Option<&'a Path>,
    pub poses: Option<&'a Path>,
    pub fps: Option<f64>,
    pub video_id: Option<&'a str>,
    pub out: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
}

#[derive(Serialize)]
struct PredictedSpan {
    start: usize,
    end: usize,
    i_count: usize,
    air_time: f64,
}

#[derive(Serialize)]
struct Prediction {
    video_id: String,
    fps: f64,
    frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    tags: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spans: Option<Vec<PredictedSpan>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<f64>>,
}

fn spans_of(tags: &[Tag], fps: f64) -> Vec<PredictedSpan> {
    tags_to_intervals(tags)
        .into_iter()
        .zip(i_count(tags))
        .map(|(s, n)| PredictedSpan {
            start: s.start,
            end: s.end,
            i_count: n,
            air_time: n as f64 / fps,
        })
        .collect()
}

pub fn predict(args: PredictArgs) -> CliResult<()> {
    let records = match (args.input, args.poses) {
        (Some(path), None) => {
            if args.fps.is_some() || args.video_id.is_some() {
                return Err(Failure::usage(
                    "--fps and --video-id apply to --poses input only",
                ));
            }
            read_dataset(path)?
        }
        (None, Some(path)) => {
            let fps = args.fps.ok_or_else(|| {
                Failure::usage("fps metadata is required for pose-estimator input: pass --fps <frames per second>")
            })?;
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let frames = parse_pose_output(&text).context(path.display())?;
            let id = args.video_id.map_or_else(|| stem(path), str::to_string);
            let tracked = track_skater(&frames, &id, fps)?;
            vec![VideoRecord::new("", tracked.sequence, Vec::new())?]
        }
        _ => {
            return Err(Failure::usage(
                "pass exactly one of --input <dataset> or --poses <pose file>",
            ))
        }
    };
    let (ckpt, model) = load_model(args.checkpoint)?;
    let table = args.embeddings.map(FixedEmbeddingTable::read).transpose()?;
    needs_table(&model, table.as_ref())?;
    // prediction ignores targets, so classify against a CRF view of the data
    let feature_cfg = airtime::model::ModelConfig {
        head: HeadConfig::Crf,
        ..ckpt.meta.config.model.clone()
    };
    let examples = prepare_examples(&records, &feature_cfg, table.as_ref())?;
    let mut out = Vec::with_capacity(examples.len());
    for e in &examples {
        let mut p = Prediction {
            video_id: e.video_id.clone(),
            fps: e.fps,
            frames: e.len(),
            tags: None,
            spans: None,
            class: None,
            logits: None,
        };
        match &ckpt.meta.config.model.head {
            HeadConfig::Crf => {
                let tags = model.predict_tags(&ckpt.store, &e.input())?;
                p.spans = Some(spans_of(&tags, e.fps));
                p.tags = Some(tags_to_string(&tags));
            }
            HeadConfig::Classification { classes } => {
                let (logits, k) = model.classify(&ckpt.store, &e.input())?;
                p.class = Some(classes[k].clone());
                p.logits = Some(logits);
            }
        }
        out.push(p);
    }
    let text = serde_json::to_string_pretty(&out)? + "\n";
    match args.out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_error(path, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use airtime::dataset::parse_tags;

    #[test]
    fn spans_report_i_counts_and_seconds() {
        let mut tags = vec![Tag::O; 50];
        tags.splice(31..=40, parse_tags("BIIIIIIIIE").unwrap());
        let s = spans_of(&tags, 30.0);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].start, s[0].end, s[0].i_count), (31, 40, 8));
        assert_eq!(format!("{:.4}", s[0].air_time), "0.2667");
        assert!(spans_of(&[Tag::O; 10], 30.0).is_empty());
    }
}
