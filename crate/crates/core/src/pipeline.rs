//! Library side of the command-line entry points: synthesize, train,
//! infer, evaluate and ablate, each writing its artifacts under the run's
//! output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{self, png_io, LoadedSequence, SequenceManifest};
use crate::error::{Error, Result};
use crate::inference::infer_sequence;
use crate::metrics::{evaluate_dataset, evaluate_sequence, format_table, DatasetReport};
use crate::model::{Model, ModelConfig};
use crate::training::{train_stage, write_loss_csv};
use crate::tta::Variant;
use crate::types::MaskMap;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MASKS_DIR: &str = "masks";
pub const SCORES_JSON: &str = "scores.json";
pub const SCORES_TXT: &str = "scores.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";

/// Progress messages from long-running commands.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// A loaded sequence with the manifest it came from (`None` when generated
/// in memory).
pub struct DatasetEntry {
    pub manifest: Option<SequenceManifest>,
    pub sequence: LoadedSequence,
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetEntry>> {
    dataio::resolve_manifests(path)?
        .iter()
        .map(|p| {
            let manifest = SequenceManifest::read(p)?;
            let sequence = dataio::load_manifest(&manifest, p.parent().unwrap_or(Path::new(".")))?;
            Ok(DatasetEntry {
                manifest: Some(manifest),
                sequence,
            })
        })
        .collect()
}

fn synthetic(cfg: &RunConfig, eval: bool) -> Result<Vec<DatasetEntry>> {
    let s = &cfg.synth;
    let (n, seed, prefix) = if eval {
        (s.eval_clips, s.eval_seed, "eval")
    } else {
        (s.train_clips, s.train_seed, "train")
    };
    Ok(dataio::synth_sequences(&s.clip, n, seed, prefix)?
        .into_iter()
        .map(|sequence| DatasetEntry {
            manifest: None,
            sequence,
        })
        .collect())
}

/// Training set named by the config, or the synthetic one.
pub fn train_data(cfg: &RunConfig) -> Result<Vec<DatasetEntry>> {
    match &cfg.data.train {
        Some(p) => load_dataset(p),
        None => synthetic(cfg, false),
    }
}

pub fn eval_data(cfg: &RunConfig) -> Result<Vec<DatasetEntry>> {
    match &cfg.data.eval {
        Some(p) => load_dataset(p),
        None => synthetic(cfg, true),
    }
}

fn sequences(entries: Vec<DatasetEntry>) -> Vec<LoadedSequence> {
    entries.into_iter().map(|e| e.sequence).collect()
}

/// Initialize from `model_cfg` with the run seed and run the configured stages.
pub fn train_model(
    cfg: &RunConfig,
    model_cfg: ModelConfig,
    data: &[LoadedSequence],
    progress: Progress,
) -> Result<(Model, Vec<Vec<f64>>)> {
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let stages: Vec<_> = std::iter::once(&cfg.train.stage1)
        .chain(cfg.train.stage2.as_ref())
        .collect();
    let mut curves = Vec::with_capacity(stages.len());
    for stage in stages {
        let every = (stage.iterations / 10).max(1);
        let curve = train_stage(&mut model, data, stage, |it, loss| {
            if (it + 1) % every == 0 {
                progress(&format!("stage {} iteration {}/{}: loss {loss:.4}", stage.stage, it + 1, stage.iterations));
            }
        })?;
        curves.push(curve);
    }
    Ok((model, curves))
}

/// Predictions for every sequence, keyed by frame index, at original size.
pub fn predict(model: &Model, data: &[LoadedSequence], variants: &[Variant]) -> Result<Vec<BTreeMap<usize, MaskMap>>> {
    data.iter().map(|s| infer_sequence(model, s, variants)).collect()
}

pub fn score(data: &[LoadedSequence], preds: &[BTreeMap<usize, MaskMap>]) -> Result<DatasetReport> {
    let scores = data
        .iter()
        .zip(preds)
        .map(|(s, p)| evaluate_sequence(&s.id, p, &s.masks, &s.annotated, None))
        .collect::<Result<Vec<_>>>()?;
    evaluate_dataset(scores)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

/// Paths of the datasets written by [`cmd_synth`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub train: PathBuf,
    pub eval: PathBuf,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput> {
    let s = &cfg.synth;
    cfg.write_resolved(&cfg.out, "synth")?;
    let train = dataio::synth_dataset(&s.clip, &cfg.out.join("train"), s.train_clips, s.train_seed, "train")?;
    let eval = dataio::synth_dataset(&s.clip, &cfg.out.join("eval"), s.eval_clips, s.eval_seed, "eval")?;
    Ok(SynthOutput { train, eval })
}

/// Train and write `checkpoint/` plus one loss CSV per stage. Returns the
/// checkpoint directory.
pub fn cmd_train(cfg: &RunConfig, progress: Progress) -> Result<PathBuf> {
    cfg.write_resolved(&cfg.out, "train")?;
    let data = sequences(train_data(cfg)?);
    let (model, curves) = train_model(cfg, cfg.model.clone(), &data, progress)?;
    for (i, c) in curves.iter().enumerate() {
        write_loss_csv(&cfg.out.join(format!("loss_stage{}.csv", i + 1)), c)?;
    }
    let dir = cfg.out.join(CHECKPOINT_DIR);
    model.save(&dir)?;
    Ok(dir)
}

fn frame_stem(entry: &DatasetEntry, i: usize) -> String {
    entry
        .manifest
        .as_ref()
        .and_then(|m| m.frames.get(i))
        .and_then(|f| f.image.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("{i:05}"))
}

/// Segment every sequence of `dataset` with the checkpoint and write
/// `masks/<seq>/<frame>.png`. Returns the masks directory.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, progress: Progress) -> Result<PathBuf> {
    if !checkpoint.is_dir() {
        return Err(Error::config(format!("checkpoint {} not found", checkpoint.display())));
    }
    cfg.write_resolved(&cfg.out, "infer")?;
    let model = Model::load(checkpoint, cfg.model.clone())?;
    let variants = cfg.tta.variants()?;
    let entries = load_dataset(dataset)?;
    let root = cfg.out.join(MASKS_DIR);
    for e in &entries {
        progress(&format!("segmenting {}", e.sequence.id));
        let preds = infer_sequence(&model, &e.sequence, &variants)?;
        for (&i, m) in &preds {
            png_io::write_mask(&root.join(&e.sequence.id).join(format!("{}.png", frame_stem(e, i))), m)?;
        }
    }
    Ok(root)
}

/// Read predictions written by [`cmd_infer`] for the frames that are scored.
pub fn read_predictions(masks: &Path, entry: &DatasetEntry) -> Result<BTreeMap<usize, MaskMap>> {
    let seq = &entry.sequence;
    let mut out = BTreeMap::new();
    for &i in seq.annotated.iter().skip(1) {
        let p = masks.join(&seq.id).join(format!("{}.png", frame_stem(entry, i)));
        if !p.is_file() {
            return Err(Error::Eval(format!(
                "sequence `{}` has no prediction for frame {i} ({})",
                seq.id,
                p.display()
            )));
        }
        out.insert(i, png_io::read_mask(&p, seq.num_objects)?);
    }
    Ok(out)
}

/// Score predicted masks against a dataset's ground truth; writes
/// `scores.json` and `scores.txt`.
pub fn cmd_eval(cfg: &RunConfig, masks: &Path, dataset: &Path) -> Result<DatasetReport> {
    if !masks.is_dir() {
        return Err(Error::config(format!("prediction directory {} not found", masks.display())));
    }
    cfg.write_resolved(&cfg.out, "eval")?;
    let entries = load_dataset(dataset)?;
    let preds = entries
        .iter()
        .map(|e| read_predictions(masks, e))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<LoadedSequence> = sequences(entries);
    let report = score(&data, &preds)?;
    write_json(&cfg.out.join(SCORES_JSON), &report)?;
    write_text(&cfg.out.join(SCORES_TXT), &report.table())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fusion: bool,
    pub tta: bool,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Train with fusion off and on, evaluate each without and with TTA:
/// four rows, fusion-major. Writes `ablation.json` and `ablation.txt`.
pub fn cmd_ablate(cfg: &RunConfig, progress: Progress) -> Result<Vec<AblationRow>> {
    cfg.write_resolved(&cfg.out, "ablate")?;
    let rows = ablate(cfg, &sequences(train_data(cfg)?), &sequences(eval_data(cfg)?), progress)?;
    write_json(&cfg.out.join(ABLATION_JSON), &rows)?;
    write_text(&cfg.out.join(ABLATION_TXT), &ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablate(
    cfg: &RunConfig,
    train: &[LoadedSequence],
    eval: &[LoadedSequence],
    progress: Progress,
) -> Result<Vec<AblationRow>> {
    let mut tta = cfg.tta.clone();
    tta.enabled = true;
    let settings = [(false, vec![Variant::IDENTITY]), (true, tta.variants()?)];
    let mut rows = Vec::with_capacity(4);
    for fusion in [false, true] {
        let mut model_cfg = cfg.model.clone();
        model_cfg.fusion.enabled = fusion;
        progress(&format!("training with fusion {}", if fusion { "on" } else { "off" }));
        let (model, _) = train_model(cfg, model_cfg, train, progress)?;
        for (use_tta, variants) in &settings {
            let report = score(eval, &predict(&model, eval, variants)?)?;
            progress(&format!(
                "fusion {fusion} tta {use_tta}: J&F {:.1}",
                100.0 * report.jf
            ));
            rows.push(AblationRow {
                fusion,
                tta: *use_tta,
                j: report.j,
                f: report.f,
                jf: report.jf,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" }.to_string();
    let rows: Vec<_> = rows
        .iter()
        .map(|r| (vec![mark(r.fusion), mark(r.tta)], [r.jf, r.j, r.f]))
        .collect();
    format_table(&["Fusion", "TTA"], &rows)
}
