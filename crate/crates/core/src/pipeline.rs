//! The checkpoint chain on disk: running phases in order, resuming, and
//! evaluating the four model variants.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{make_batch, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{upsample_prediction, MetricsAccumulator, MetricsReport};
use crate::model::{CvaeModel, Prediction};
use crate::train::{run_phase, CsvLog, EpochStats, Phase, PhaseState};

pub fn checkpoint_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(phase.checkpoint_file())
}

/// Identity of everything that shapes a training trajectory. A checkpoint
/// whose digest differs is never resumed.
pub fn trajectory_digest(cfg: &RunConfig) -> u64 {
    let key = serde_json::json!({
        "seed": cfg.seed,
        "arch": cfg.arch,
        "train": cfg.train,
        "data_seed": cfg.data.seed,
        "counts": cfg.data.counts,
        "generator": cfg.data.generator,
    });
    let d = Sha256::digest(key.to_string().as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Model a phase starts from: the previous phase's final checkpoint.
pub fn starting_model(cfg: &RunConfig, phase: Phase) -> Result<CvaeModel> {
    let Some(prev) = phase.previous() else {
        return CvaeModel::new(cfg.arch.clone(), cfg.seed);
    };
    let path = checkpoint_path(&cfg.out_dir, prev);
    if !path.exists() {
        if phase == Phase::Joint && cfg.train.cold_start_joint {
            return CvaeModel::new(cfg.arch.clone(), cfg.seed);
        }
        return Err(Error::PhaseOrderViolation(format!(
            "phase `{}` needs the `{}` checkpoint {}",
            phase.name(),
            prev.name(),
            path.display()
        )));
    }
    let ck = load_checkpoint(&path)?;
    let target = cfg.train.epochs.get(prev);
    if ck.state.phase != prev || ck.state.epochs_done < target {
        return Err(Error::PhaseOrderViolation(format!(
            "checkpoint {} has {} of {target} `{}` epochs",
            path.display(),
            ck.state.epochs_done,
            prev.name()
        )));
    }
    if ck.model.arch != cfg.arch {
        return Err(Error::Config(format!("{}: architecture differs from the config", path.display())));
    }
    Ok(ck.model)
}

/// Drop log rows written after the checkpoint being resumed from.
fn trim_logs(out_dir: &Path, phase: Phase, step: u64, epochs_done: usize) -> Result<()> {
    let keep = |suffix: &str, f: &dyn Fn(&str) -> bool| -> Result<()> {
        let path = out_dir.join(format!("{}.{suffix}.csv", phase.name()));
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(());
        };
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || f(line) {
                out.push_str(line);
                out.push('\n');
            }
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    };
    let field = |line: &str, i: usize| line.split(',').nth(i).and_then(|v| v.parse::<u64>().ok());
    keep("metrics", &|l| field(l, 0).is_some_and(|s| s <= step))?;
    keep("epochs", &|l| field(l, 1).is_some_and(|e| e < epochs_done as u64))?;
    keep("timing", &|l| field(l, 1).is_some_and(|e| e < epochs_done as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRun {
    pub phase: Phase,
    /// Epoch the run started at (non-zero when resumed).
    pub resumed_from: usize,
    pub epochs: Vec<EpochStats>,
    pub checkpoint: PathBuf,
}

/// Run one phase into `cfg.out_dir`, resuming from its own checkpoint when
/// that was written by the same configuration.
pub fn train_phase(cfg: &RunConfig, dataset: &Dataset, phase: Phase) -> Result<PhaseRun> {
    train_phase_limited(cfg, dataset, phase, None)
}

/// As [`train_phase`], but stop after at most `limit` epochs in this call.
/// The checkpoint then records a partial phase that a later call resumes.
pub fn train_phase_limited(cfg: &RunConfig, dataset: &Dataset, phase: Phase, limit: Option<usize>) -> Result<PhaseRun> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let digest = trajectory_digest(cfg);
    let own = checkpoint_path(&cfg.out_dir, phase);
    let resumable = match load_checkpoint(&own) {
        Ok(ck) if ck.run_digest == digest && ck.state.phase == phase && ck.model.arch == cfg.arch => Some(ck),
        _ => None,
    };
    let (mut model, mut state, resumed) = match resumable {
        Some(Checkpoint { model, state, .. }) => {
            trim_logs(&cfg.out_dir, phase, state.step, state.epochs_done)?;
            let from = state.epochs_done;
            (model, state, from)
        }
        None => (starting_model(cfg, phase)?, PhaseState::fresh(phase, &cfg.train), 0),
    };
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    let mut log = CsvLog::new(&cfg.out_dir, resumed > 0);
    let mut save = |m: &CvaeModel, s: &PhaseState| save_checkpoint(&own, m, s, cfg.seed, digest);
    if state.epochs_done == 0 && cfg.train.epochs.get(phase) == 0 {
        crate::train::prepare_model(&mut model, phase, cfg.seed)?;
        save(&model, &state)?;
    }
    let mut schedule = cfg.train.clone();
    if let Some(n) = limit {
        let target = cfg.train.epochs.get(phase).min(state.epochs_done + n);
        set_epochs(&mut schedule, phase, target);
    }
    let epochs = run_phase(&mut model, &mut state, &train, &val, &schedule, cfg.seed, &mut log, &mut save)?;
    log.flush()?;
    Ok(PhaseRun {
        phase,
        resumed_from: resumed,
        epochs,
        checkpoint: own,
    })
}

fn set_epochs(cfg: &mut crate::train::TrainConfig, phase: Phase, n: usize) {
    let e = &mut cfg.epochs;
    match phase {
        Phase::Fcn => e.fcn = n,
        Phase::Vae => e.vae = n,
        Phase::Imgenc => e.imgenc = n,
        Phase::Joint => e.joint = n,
        Phase::Hr => e.hr = n,
    }
}

/// Phases selected by a CLI phase argument: one name or `all`.
pub fn phases_for(arg: &str) -> Result<Vec<Phase>> {
    if arg == "all" {
        Ok(Phase::ORDER.to_vec())
    } else {
        Ok(vec![arg.parse()?])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fcn,
    ImageEncoderOnly,
    Lr,
    Hr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fcn, Variant::ImageEncoderOnly, Variant::Lr, Variant::Hr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcn => "fcn",
            Variant::ImageEncoderOnly => "image_encoder_only",
            Variant::Lr => "lr",
            Variant::Hr => "hr",
        }
    }

    /// Checkpoint in the chain that holds this variant's final weights.
    pub fn source_phase(self) -> Phase {
        match self {
            Variant::Fcn => Phase::Fcn,
            Variant::ImageEncoderOnly => Phase::Imgenc,
            Variant::Lr => Phase::Joint,
            Variant::Hr => Phase::Hr,
        }
    }

    /// Whether `model` can produce this variant.
    pub fn available(self, model: &CvaeModel) -> bool {
        self != Variant::Hr || model.has_hr_head()
    }
}

/// Predicted labels of `variant` for `samples`. Low-resolution logits are
/// converted to probabilities, bilinearly resized to full resolution and
/// then arg-maxed.
pub fn full_resolution_labels(model: &CvaeModel, variant: Variant, samples: &[&Sample]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let batch = make_batch(chunk)?;
        let (h, w) = batch.size();
        let pred: Prediction = match variant {
            Variant::Fcn => model.predict_fcn(&batch.x)?,
            Variant::ImageEncoderOnly => model.predict_image_encoder_only(&batch.x)?,
            Variant::Lr => model.predict(&batch.x, crate::model::PredictMode::Mean)?,
            Variant::Hr => model.predict_hr(&batch.x)?,
        };
        let labels = if variant == Variant::Hr {
            pred.labels
        } else {
            upsample_prediction(&pred.logits, h, w)?
        };
        out.extend(labels.chunks(h * w).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Native-resolution labels of a low-resolution variant together with the
/// nearest-downsampled ground truth they were trained against.
pub fn native_labels(model: &CvaeModel, variant: Variant, samples: &[&Sample]) -> Result<(Vec<Vec<u8>>, Vec<Vec<u8>>, usize)> {
    let size = model.arch.lr_size();
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for chunk in samples.chunks(64) {
        let batch = make_batch(chunk)?;
        let p = match variant {
            Variant::Fcn => model.predict_fcn(&batch.x)?,
            Variant::ImageEncoderOnly => model.predict_image_encoder_only(&batch.x)?,
            Variant::Lr => model.predict(&batch.x, crate::model::PredictMode::Mean)?,
            Variant::Hr => return Err(Error::Config("the HR variant has no low-resolution output".into())),
        };
        pred.extend(p.labels.chunks(size * size).map(<[u8]>::to_vec));
        gt.extend(model.lr_targets(&batch).chunks(size * size).map(<[u8]>::to_vec));
    }
    Ok((pred, gt, size))
}

/// Low-resolution LR labels enlarged by pixel replication.
pub fn lr_nearest_labels(model: &CvaeModel, samples: &[&Sample]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let batch = make_batch(chunk)?;
        let (h, w) = batch.size();
        let pred = model.predict(&batch.x, crate::model::PredictMode::Mean)?;
        let s = pred.logits.shape();
        let (lh, lw) = (s[2], s[3]);
        for img in pred.labels.chunks(lh * lw) {
            let mut up = vec![0u8; h * w];
            for r in 0..h {
                for c in 0..w {
                    up[r * w + c] = img[(r * lh / h) * lw + c * lw / w];
                }
            }
            out.push(up);
        }
    }
    Ok(out)
}

pub fn score(labels: &[Vec<u8>], samples: &[&Sample], classes: usize, grid: usize) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(classes, grid);
    for (pred, s) in labels.iter().zip(samples) {
        acc.add(pred, &s.mask, s.height, s.width)?;
    }
    acc.report()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub checkpoint: PathBuf,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub foreground_iou: f64,
    /// Low-resolution variants scored at their own resolution against the
    /// nearest-downsampled masks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub native: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HrComparison {
    pub hr_foreground_iou: f64,
    pub lr_nearest_foreground_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub images: usize,
    pub variants: Vec<VariantRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hr_vs_lr_nearest: Option<HrComparison>,
}

impl EvalReport {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Evaluate every variant whose checkpoint exists in `chain_dir` (or, when
/// `checkpoint` names a single file, every variant that file can produce).
pub fn evaluate(dataset: &Dataset, split: Split, grid: usize, source: &Path) -> Result<EvalReport> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = dataset.manifest.classes;
    let mut models: Vec<(Variant, PathBuf, CvaeModel)> = Vec::new();
    if source.is_dir() {
        for v in Variant::ALL {
            let path = checkpoint_path(source, v.source_phase());
            if path.exists() {
                models.push((v, path.clone(), load_checkpoint(&path)?.model));
            }
        }
    } else {
        let model = load_checkpoint(source)?.model;
        for v in Variant::ALL.into_iter().filter(|v| v.available(&model)) {
            models.push((v, source.to_path_buf(), model.clone()));
        }
    }
    if models.is_empty() {
        return Err(Error::io(
            source,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoints found"),
        ));
    }
    let mut variants = Vec::new();
    let mut hr = None;
    for (v, path, model) in &models {
        let labels = full_resolution_labels(model, *v, &samples)?;
        let metrics = score(&labels, &samples, classes, grid)?;
        if *v == Variant::Hr {
            let nearest = lr_nearest_labels(model, &samples)?;
            let lr = score(&nearest, &samples, classes, grid)?;
            hr = Some(HrComparison {
                hr_foreground_iou: metrics.foreground_iou(),
                lr_nearest_foreground_iou: lr.foreground_iou(),
            });
        }
        let native = if *v == Variant::Hr {
            None
        } else {
            let (pred, gt, size) = native_labels(model, *v, &samples)?;
            let mut acc = MetricsAccumulator::new(classes, grid.min(size));
            for (p, g) in pred.iter().zip(&gt) {
                acc.add(p, g, size, size)?;
            }
            Some(acc.report()?)
        };
        variants.push(VariantRow {
            variant: *v,
            checkpoint: path.clone(),
            foreground_iou: metrics.foreground_iou(),
            metrics,
            native,
        });
    }
    Ok(EvalReport {
        split,
        images: samples.len(),
        variants,
        hr_vs_lr_nearest: hr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_selection() {
        assert_eq!(phases_for("all").unwrap(), Phase::ORDER.to_vec());
        assert_eq!(phases_for("joint").unwrap(), vec![Phase::Joint]);
        assert!(phases_for("warmup").is_err());
    }

    #[test]
    fn digest_tracks_trajectory_not_location() {
        let a = RunConfig::default();
        let mut moved = a.clone();
        moved.out_dir = "elsewhere".into();
        moved.data.dir = "other".into();
        assert_eq!(trajectory_digest(&a), trajectory_digest(&moved));
        for change in [
            |c: &mut RunConfig| c.seed = 1,
            |c: &mut RunConfig| c.train.epochs.hr = 3,
            |c: &mut RunConfig| c.data.counts.train = 10,
            |c: &mut RunConfig| c.arch.latent_dim = 4,
        ] {
            let mut b = a.clone();
            change(&mut b);
            assert_ne!(trajectory_digest(&a), trajectory_digest(&b));
        }
    }

    #[test]
    fn variants_and_sources() {
        let sources: Vec<Phase> = Variant::ALL.iter().map(|v| v.source_phase()).collect();
        assert_eq!(sources, [Phase::Fcn, Phase::Imgenc, Phase::Joint, Phase::Hr]);
        let plain = CvaeModel::new(crate::model::ArchConfig::tiny(2), 0).unwrap();
        assert!(!Variant::Hr.available(&plain));
        assert!(Variant::Lr.available(&plain));
        assert_eq!(checkpoint_path(Path::new("r"), Phase::Vae), Path::new("r").join("vae.ckpt"));
    }
}
