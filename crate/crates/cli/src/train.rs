//! `train` and `finetune`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use airtime::dataset::{augment, read_dataset, VideoRecord};
use airtime::embedding::FixedEmbeddingTable;
use airtime::metrics::{evaluate, VideoPrediction};
use airtime::model::{HeadConfig, Model};
use airtime::numerics::ParamStore;
use airtime::training::{
    classification_accuracy, fine_tune, predict_tags, prepare_examples, split_indices, train,
    Checkpoint, Control, EpochReport, Example,
};

use crate::failure::{io_error, CliResult, Failure};
use crate::settings::{self, Provenance, TrainSettings};

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub set: &'a [String],
    pub seed: u64,
    pub loss_log: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
    /// Checkpoint whose backbone initializes the model (`finetune`).
    pub base: Option<&'a Path>,
}

pub fn loss_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    s.into()
}

/// Validation score in percent: frame accuracy for the CRF head,
/// video accuracy for classification.
pub fn validation_score(
    model: &Model,
    store: &ParamStore,
    examples: &[Example],
) -> airtime::Result<f64> {
    match model.config().head {
        HeadConfig::Crf => {
            let tags = predict_tags(model, store, examples)?;
            let videos: Vec<VideoPrediction> = examples
                .iter()
                .zip(tags)
                .map(|(e, predicted)| VideoPrediction {
                    video_id: e.video_id.clone(),
                    category: e.category.clone(),
                    predicted,
                    gold: e.gold_tags().unwrap_or_default().to_vec(),
                })
                .collect();
            Ok(evaluate(&videos)?.accuracy)
        }
        HeadConfig::Classification { .. } => classification_accuracy(model, store, examples),
    }
}

fn expand(records: Vec<VideoRecord>, stride: usize) -> CliResult<Vec<VideoRecord>> {
    if stride == 0 {
        return Ok(records);
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.flights.is_empty() {
            out.push(r);
        } else {
            out.extend(augment(&r, stride)?);
        }
    }
    Ok(out)
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let command = if args.base.is_some() {
        "finetune"
    } else {
        "train"
    };
    let base = args.base.map(Checkpoint::load).transpose()?;
    let defaults = base.as_ref().map_or_else(TrainSettings::default, |b| {
        TrainSettings::from_config(&b.meta.config)
    });
    let s: TrainSettings = settings::load(&defaults, args.config, args.set)?;
    let records = read_dataset(args.data)?;
    if records.is_empty() {
        return Err(Failure::runtime(format!(
            "{}: dataset is empty",
            args.data.display()
        )));
    }
    let categories: Vec<String> = records
        .iter()
        .map(|r| r.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cfg = s.to_config(args.seed, &categories)?;
    let table = args.embeddings.map(FixedEmbeddingTable::read).transpose()?;

    let (train_idx, val_idx) = if s.val_fraction > 0.0 {
        split_indices(records.len(), s.val_fraction, args.seed)
    } else {
        ((0..records.len()).collect(), Vec::new())
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let train_records = expand(pick(&train_idx), s.augment_stride)?;
    let train_set = prepare_examples(&train_records, &cfg.model, table.as_ref())?;
    let val_set = prepare_examples(&pick(&val_idx), &cfg.model, table.as_ref())?;
    eprintln!(
        "{command}: {} training sequences, {} validation videos, {} epochs",
        train_set.len(),
        val_set.len(),
        cfg.epochs
    );

    let log_path = args
        .loss_log
        .map_or_else(|| loss_log_path(args.out), Path::to_path_buf);
    let file = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let header = if val_set.is_empty() {
        "epoch,loss"
    } else {
        "epoch,loss,val_accuracy"
    };
    writeln!(log, "{header}")
        .and_then(|_| log.flush())
        .map_err(|e| io_error(&log_path, e))?;

    let mut on_epoch =
        |r: &EpochReport, model: &Model, store: &ParamStore| -> airtime::Result<Control> {
            let mut line = format!("{},{}", r.epoch, r.loss);
            let mut progress = format!("epoch {}/{} loss {:.6}", r.epoch, cfg.epochs, r.loss);
            if !val_set.is_empty() {
                let v = validation_score(model, store, &val_set)?;
                line.push_str(&format!(",{v}"));
                progress.push_str(&format!(" val {v:.2}"));
            }
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| airtime::Error::Io {
                    path: log_path.clone(),
                    source: e,
                })?;
            eprintln!("{progress}");
            Ok(Control::Continue)
        };
    let outcome = match &base {
        Some(b) => fine_tune(b, &train_set, &cfg, &mut on_epoch),
        None => train(&train_set, &cfg, &mut on_epoch),
    }
    .map_err(|e| match e {
        airtime::Error::Diverged { .. } => Failure::runtime(format!(
            "{e}; completed epochs are in {}",
            log_path.display()
        )),
        other => other.into(),
    })?;
    outcome.checkpoint.save(args.out)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("data", args.data.display().to_string());
    if let Some(b) = args.base {
        inputs.insert("base", b.display().to_string());
    }
    if let Some(e) = args.embeddings {
        inputs.insert("embeddings", e.display().to_string());
    }
    settings::write_sidecar(
        args.out,
        &Provenance {
            command,
            seed: args.seed,
            config: &s,
            inputs,
        },
    )?;
    let history = &outcome.checkpoint.meta.loss_history;
    println!(
        "{command}: {} epochs, final loss {:.6}; checkpoint {}, loss log {}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        args.out.display(),
        log_path.display()
    );
    Ok(())
}
