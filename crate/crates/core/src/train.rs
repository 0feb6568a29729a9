//! Adam, the five training phases and their CSV logs.
//!
//! Phases run in the order `fcn -> vae -> imgenc -> joint -> hr`; each one
//! starts from the previous phase's checkpoint. Shuffling, augmentation and
//! latent noise are drawn from streams keyed by `(seed, phase, epoch)`, so a
//! run resumed at an epoch boundary continues the unbroken trajectory.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{augment, make_batch, Augment, Sample};
use crate::error::{Error, Result};
use crate::metrics::{upsample_prediction, MetricsAccumulator};
use crate::model::{Batch, CvaeModel, LossBreakdown};
use crate::params::ParamRegistry;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// First and second moments, only for parameters that were trained.
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One Adam update of every trainable parameter from its gradient buffer.
pub fn adam_step(registry: &mut ParamRegistry, state: &mut AdamState) -> Result<()> {
    if let Some((name, _)) = registry.iter().find(|(_, p)| p.trainable && !p.has_grad()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in registry.iter_mut() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let g = p.grad.data();
        let theta = p.value.data_mut();
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            theta[i] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Fcn,
    Vae,
    Imgenc,
    Joint,
    Hr,
}

impl Phase {
    pub const ORDER: [Phase; 5] = [Phase::Fcn, Phase::Vae, Phase::Imgenc, Phase::Joint, Phase::Hr];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Fcn => "fcn",
            Phase::Vae => "vae",
            Phase::Imgenc => "imgenc",
            Phase::Joint => "joint",
            Phase::Hr => "hr",
        }
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.ckpt", self.name())
    }

    pub fn previous(self) -> Option<Phase> {
        let i = Self::ORDER.iter().position(|&p| p == self).expect("listed");
        i.checked_sub(1).map(|j| Self::ORDER[j])
    }

    fn tag(self) -> u64 {
        0x7068_0000 + Self::ORDER.iter().position(|&p| p == self).expect("listed") as u64
    }

    /// Whether parameter `name` is updated during this phase.
    pub fn trains(self, name: &str) -> bool {
        let group = name.split('/').next().unwrap_or("");
        match self {
            Phase::Fcn => matches!(group, "trunk" | "fcn_head"),
            Phase::Vae => {
                matches!(group, "seg_enc" | "decoder") && !name.starts_with("decoder/local_conv/")
            }
            Phase::Imgenc => matches!(group, "trunk" | "img_enc"),
            Phase::Joint => matches!(group, "trunk" | "img_enc" | "seg_enc" | "decoder"),
            Phase::Hr => group == "hr_head",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ORDER
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    pub fcn: usize,
    pub vae: usize,
    pub imgenc: usize,
    pub joint: usize,
    pub hr: usize,
}

impl PhaseSchedule {
    pub fn get(&self, p: Phase) -> usize {
        match p {
            Phase::Fcn => self.fcn,
            Phase::Vae => self.vae,
            Phase::Imgenc => self.imgenc,
            Phase::Joint => self.joint,
            Phase::Hr => self.hr,
        }
    }
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            fcn: 30,
            vae: 30,
            imgenc: 30,
            joint: 60,
            hr: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseRates {
    pub fcn: f64,
    pub vae: f64,
    pub imgenc: f64,
    pub joint: f64,
    pub hr: f64,
}

impl PhaseRates {
    pub fn get(&self, p: Phase) -> f64 {
        match p {
            Phase::Fcn => self.fcn,
            Phase::Vae => self.vae,
            Phase::Imgenc => self.imgenc,
            Phase::Joint => self.joint,
            Phase::Hr => self.hr,
        }
    }
}

impl Default for PhaseRates {
    fn default() -> Self {
        Self {
            fcn: 1e-3,
            vae: 1e-3,
            imgenc: 1e-3,
            joint: 1e-3,
            hr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Latent draws per sample for the reconstruction expectation.
    pub latent_samples: usize,
    pub epochs: PhaseSchedule,
    pub lr: PhaseRates,
    pub hflip: bool,
    /// Largest random shift in pixels (0 disables shifting).
    pub shift: i64,
    /// Start joint training from a fresh model when no image-encoder
    /// checkpoint exists.
    pub cold_start_joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            latent_samples: 1,
            epochs: PhaseSchedule::default(),
            lr: PhaseRates::default(),
            hflip: true,
            shift: 2,
            cold_start_joint: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.latent_samples == 0 {
            return Err(Error::Config("latent_samples must be at least 1".into()));
        }
        if !(0..=crate::data::MAX_SHIFT).contains(&self.shift) {
            return Err(Error::Config("shift must be in [0, 2]".into()));
        }
        for p in Phase::ORDER {
            let lr = self.lr.get(p);
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("lr for {} must be positive", p.name())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub kl: f64,
    pub recon_nll: f64,
    pub objective: f64,
    /// Foreground IoU of the low-resolution CVAE on the validation split
    /// (joint phase only).
    pub val_iou: Option<f64>,
}

/// Destination for per-step and per-epoch rows.
pub trait TrainLog {
    fn step(&mut self, step: u64, phase: Phase, loss: &LossBreakdown) -> Result<()>;
    fn epoch(&mut self, phase: Phase, stats: &EpochStats, seconds: f64) -> Result<()>;
}

/// Discards everything.
pub struct NullLog;

impl TrainLog for NullLog {
    fn step(&mut self, _: u64, _: Phase, _: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    fn epoch(&mut self, _: Phase, _: &EpochStats, _: f64) -> Result<()> {
        Ok(())
    }
}

/// CSV files `<phase>.metrics.csv` (per step), `<phase>.epochs.csv` and
/// `<phase>.timing.csv` in a directory. Wall-clock times go to the timing
/// file only, so the other two are reproducible byte-for-byte.
pub struct CsvLog {
    dir: PathBuf,
    metrics: Option<(Phase, BufWriter<File>)>,
    epochs: Option<(Phase, BufWriter<File>)>,
    timing: Option<(Phase, BufWriter<File>)>,
    append: bool,
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

impl CsvLog {
    /// `append = false` truncates a phase's files when it is first written.
    pub fn new(dir: &Path, append: bool) -> Self {
        Self {
            dir: dir.to_path_buf(),
            metrics: None,
            epochs: None,
            timing: None,
            append,
        }
    }

    fn open<'a>(
        dir: &Path,
        slot: &'a mut Option<(Phase, BufWriter<File>)>,
        phase: Phase,
        suffix: &str,
        header: &str,
        append: bool,
    ) -> Result<&'a mut BufWriter<File>> {
        if slot.as_ref().map(|(p, _)| *p) != Some(phase) {
            if let Some((_, mut w)) = slot.take() {
                w.flush().map_err(|e| Error::io(dir, e))?;
            }
            let path = dir.join(format!("{}.{suffix}.csv", phase.name()));
            let fresh = !append || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            *slot = Some((phase, w));
        }
        Ok(&mut slot.as_mut().expect("just set").1)
    }

    pub fn flush(&mut self) -> Result<()> {
        for (_, w) in [&mut self.metrics, &mut self.epochs, &mut self.timing]
            .into_iter()
            .flatten()
        {
            w.flush().map_err(|e| Error::io(&self.dir, e))?;
        }
        Ok(())
    }
}

impl TrainLog for CsvLog {
    fn step(&mut self, step: u64, phase: Phase, l: &LossBreakdown) -> Result<()> {
        let w = Self::open(
            &self.dir,
            &mut self.metrics,
            phase,
            "metrics",
            "step,phase,kl,recon_nll,objective",
            self.append,
        )?;
        writeln!(w, "{step},{},{},{},{}", phase.name(), fmt(l.kl), fmt(l.recon_nll), fmt(l.objective))
            .map_err(|e| Error::io(&self.dir, e))
    }

    fn epoch(&mut self, phase: Phase, s: &EpochStats, seconds: f64) -> Result<()> {
        let w = Self::open(
            &self.dir,
            &mut self.epochs,
            phase,
            "epochs",
            "phase,epoch,kl,recon_nll,objective,val_iou",
            self.append,
        )?;
        let iou = s.val_iou.map(fmt).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{iou}", phase.name(), s.epoch, fmt(s.kl), fmt(s.recon_nll), fmt(s.objective))
            .map_err(|e| Error::io(&self.dir, e))?;
        let w = Self::open(
            &self.dir,
            &mut self.timing,
            phase,
            "timing",
            "phase,epoch,wall_seconds",
            self.append,
        )?;
        writeln!(w, "{},{},{seconds:.3}", phase.name(), s.epoch).map_err(|e| Error::io(&self.dir, e))?;
        self.flush()
    }
}

/// Where a phase stands: how far it got and its optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub phase: Phase,
    pub epochs_done: usize,
    pub step: u64,
    pub adam: AdamState,
}

impl PhaseState {
    pub fn fresh(phase: Phase, cfg: &TrainConfig) -> Self {
        Self {
            phase,
            epochs_done: 0,
            step: 0,
            adam: AdamState::new(cfg.lr.get(phase)),
        }
    }
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;
const NOISE: u64 = 3;

fn augmented(s: &Sample, rng: &mut SplitMix64, cfg: &TrainConfig) -> Result<Sample> {
    let mut out = s.clone();
    if cfg.hflip && rng.bernoulli(0.5) {
        out = augment(&out, Augment::HFlip)?;
    }
    if cfg.shift > 0 {
        let dx = rng.range_i64(-cfg.shift, cfg.shift);
        let dy = rng.range_i64(-cfg.shift, cfg.shift);
        out = augment(&out, Augment::Shift { dx, dy })?;
    }
    Ok(out)
}

fn phase_loss<'t>(
    model: &CvaeModel,
    phase: Phase,
    tape: &'t Tape,
    batch: &Batch,
    eps: &[Tensor],
) -> Result<(crate::autograd::Var<'t>, LossBreakdown)> {
    match phase {
        Phase::Fcn => model.loss_fcn(tape, batch),
        Phase::Vae => model.loss_vae(tape, batch, eps),
        Phase::Imgenc => model.loss_image_encoder(tape, batch, eps),
        Phase::Joint => model.loss_cvae(tape, batch, eps),
        Phase::Hr => model.loss_hr(tape, batch),
    }
}

/// Latent noise blocks for one batch.
pub fn draw_eps(rng: &mut SplitMix64, n: usize, d: usize, l: usize) -> Result<Vec<Tensor>> {
    (0..l).map(|_| Tensor::new(&[n, d], rng.normals(n * d))).collect()
}

/// One optimiser step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut CvaeModel,
    phase: Phase,
    adam: &mut AdamState,
    batch: &Batch,
    eps: &[Tensor],
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let (loss, parts) = phase_loss(model, phase, &tape, batch, eps)?;
    model.params.zero_grad();
    tape.backward_into(loss, &mut model.params)?;
    adam_step(&mut model.params, adam)?;
    Ok(parts)
}

/// Set the trainable flags for `phase`, attaching the HR head if needed.
pub fn prepare_model(model: &mut CvaeModel, phase: Phase, seed: u64) -> Result<()> {
    if phase == Phase::Hr && !model.has_hr_head() {
        model.add_hr_head(seed)?;
    }
    model.params.set_trainable_where(|n| phase.trains(n));
    Ok(())
}

/// Foreground IoU of LR CVAE predictions (bilinearly resized to full
/// resolution) over `samples`.
pub fn lr_foreground_iou(model: &CvaeModel, samples: &[&Sample]) -> Result<f64> {
    let mut acc = MetricsAccumulator::new(model.arch.classes, 8);
    for chunk in samples.chunks(64) {
        let batch = make_batch(chunk)?;
        let pred = model.predict(&batch.x, crate::model::PredictMode::Mean)?;
        let (h, w) = batch.size();
        let labels = upsample_prediction(&pred.logits, h, w)?;
        for (i, s) in chunk.iter().enumerate() {
            acc.add(&labels[i * h * w..(i + 1) * h * w], &s.mask, h, w)?;
        }
    }
    Ok(acc.report()?.foreground_iou())
}

/// Run (or continue) `phase` until `cfg.epochs` for it are done. The
/// callback is invoked after every epoch with the updated state, e.g. to
/// write a checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    model: &mut CvaeModel,
    state: &mut PhaseState,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn TrainLog,
    on_epoch: &mut dyn FnMut(&CvaeModel, &PhaseState) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let phase = state.phase;
    prepare_model(model, phase, seed)?;
    let d = model.arch.latent_dim;
    let mut out = Vec::new();
    for epoch in state.epochs_done..cfg.epochs.get(phase) {
        let started = Instant::now();
        let tag = phase.tag();
        let order = SplitMix64::derive(seed, &[tag, epoch as u64, SHUFFLE]).permutation(train.len());
        let mut aug = SplitMix64::derive(seed, &[tag, epoch as u64, AUGMENT]);
        let mut noise = SplitMix64::derive(seed, &[tag, epoch as u64, NOISE]);
        let (mut kl, mut rec, mut obj) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let samples = idx
                .iter()
                .map(|&i| augmented(train[i], &mut aug, cfg))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let batch = make_batch(&refs)?;
            let eps = draw_eps(&mut noise, batch.len(), d, cfg.latent_samples)?;
            let parts = train_step(model, phase, &mut state.adam, &batch, &eps)?;
            state.step += 1;
            log.step(state.step, phase, &parts)?;
            let wgt = batch.len() as f64;
            kl += wgt * parts.kl;
            rec += wgt * parts.recon_nll;
            obj += wgt * parts.objective;
        }
        let n = train.len() as f64;
        let val_iou = if phase == Phase::Joint && !val.is_empty() {
            Some(lr_foreground_iou(model, val)?)
        } else {
            None
        };
        let stats = EpochStats {
            epoch,
            kl: kl / n,
            recon_nll: rec / n,
            objective: obj / n,
            val_iou,
        };
        state.epochs_done = epoch + 1;
        log.epoch(phase, &stats, started.elapsed().as_secs_f64())?;
        on_epoch(model, state)?;
        out.push(stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_hand_case() {
        let mut r = ParamRegistry::new();
        r.insert("p", Tensor::vector(vec![1.0])).unwrap();
        let tape = Tape::new();
        let p = tape.param(&r, "p").unwrap();
        tape.backward_into(p.scale(0.5).sum(), &mut r).unwrap();
        let mut s = AdamState::new(1e-3);
        adam_step(&mut r, &mut s).unwrap();
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert_eq!(r.value("p").unwrap().data()[0], expected);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_zero_gradient_and_missing() {
        let mut r = ParamRegistry::new();
        r.insert("p", Tensor::vector(vec![2.0, -1.0])).unwrap();
        let mut s = AdamState::new(1e-3);
        assert!(matches!(adam_step(&mut r, &mut s), Err(Error::MissingGradient(n)) if n == "p"));
        assert_eq!(s.t, 0);
        let tape = Tape::new();
        let p = tape.param(&r, "p").unwrap();
        tape.backward_into(p.scale(0.0).sum(), &mut r).unwrap();
        adam_step(&mut r, &mut s).unwrap();
        assert_eq!(r.value("p").unwrap().data(), &[2.0, -1.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn phase_groups() {
        assert!(Phase::Vae.trains("decoder/fuse_conv/w"));
        assert!(!Phase::Vae.trains("decoder/local_conv/w"));
        assert!(Phase::Imgenc.trains("trunk/conv1/w"));
        assert!(!Phase::Imgenc.trains("seg_enc/mu/w"));
        assert!(!Phase::Hr.trains("decoder/classifier/b"));
        assert_eq!(Phase::Imgenc.previous(), Some(Phase::Vae));
        assert_eq!(Phase::Fcn.previous(), None);
    }
}
