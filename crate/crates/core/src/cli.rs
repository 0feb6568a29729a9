//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_dataset, load_dataset, Dataset, Sample, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::model::{CvaeModel, PredictMode};
use crate::pipeline::{checkpoint_path, evaluate, phases_for, train_phase, EvalReport};
use crate::tensor::Tensor;
use crate::train::Phase;
use crate::verify::{run_suite, VerifyOptions, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const THREADS_ENV: &str = "CVAESEG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "cvaeseg", version, about = "Conditional VAE segmentation on a synthetic toy task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; every key is optional and unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output location (synth: dataset directory; train: run directory;
    /// eval: report file; predict: mask directory; verify: report file).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed override (synth: dataset seed; train: model and training seed;
    /// predict: latent draw for --mode sample; verify: oracle seed; eval:
    /// unused).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Resolution {
    /// Low-resolution CVAE output (H/4).
    Lr,
    /// High-resolution head output (H).
    Hr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Decode the mean of p(z|x).
    Mean,
    /// Decode one draw from p(z|x), seeded by --seed (default 0).
    Sample,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset (default: 500 train / 100 val / 100 test).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one phase (fcn, vae, imgenc, joint, hr) or all of them in order.
    Train {
        #[command(flatten)]
        common: Common,
        /// Phase to run: fcn | vae | imgenc | joint | hr | all.
        #[arg(long, default_value = "all")]
        phase: String,
    },
    /// Evaluate every model variant found in the checkpoint chain.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (all variants) or a single checkpoint file
        /// [default: the config's out_dir].
        #[arg(long, value_name = "C")]
        checkpoint: Option<PathBuf>,
        /// Dataset split [default: the config's eval.split, itself test].
        #[arg(long, value_name = "S")]
        split: Option<Split>,
    },
    /// Write predicted masks (.bin) and PGM previews.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file [default: joint.ckpt, or hr.ckpt for --resolution hr].
        #[arg(long, value_name = "C")]
        checkpoint: Option<PathBuf>,
        /// Dataset split to predict when no --input is given.
        #[arg(long, value_name = "S", default_value = "test")]
        split: Split,
        /// Dataset-format sample files to predict instead of a split.
        #[arg(long, value_name = "FILE")]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Resolution::Lr)]
        resolution: Resolution,
        #[arg(long, value_enum, default_value_t = Mode::Mean)]
        mode: Mode,
    },
    /// Run the gradient, KL, bound and SGVB oracle suite; exit 3 on failure.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::ParamOutOfRange(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

fn load_config(common: &Common, required: bool) -> std::result::Result<RunConfig, Failure> {
    match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string())),
        None if required => Err(usage("--config <path> is required")),
        None => {
            let mut c = RunConfig::default();
            c.resolve_paths(Path::new("."));
            Ok(c)
        }
    }
}

/// SHA-256 over sample ids and file contents in manifest order.
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for (r, s) in ds.manifest.samples.iter().zip(&ds.samples) {
        h.update(r.id.as_bytes());
        h.update(s.to_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Refuse to train or evaluate on a dataset generated from other settings.
fn load_matching_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_dataset(&cfg.data.dir)?;
    let m = &ds.manifest;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| ds.records(s).len());
    if m.dataset_seed != cfg.data.seed || m.generator != cfg.data.generator || counts != cfg.data.counts.as_array() {
        return Err(Error::Config(format!(
            "dataset in {} was generated with different settings; rerun `cvaeseg synth`",
            cfg.data.dir.display()
        )));
    }
    Ok(ds)
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<Dataset> {
    let dir = &cfg.data.dir;
    let m = gen_dataset(cfg.data.seed, cfg.data.counts.as_array(), &cfg.data.generator, dir)?;
    let ds = load_dataset(dir)?;
    let c = cfg.data.counts.as_array();
    let _ = writeln!(out, "manifest {}", dir.join(MANIFEST_FILE).display());
    let _ = writeln!(out, "samples {} (train {}, val {}, test {})", m.count, c[0], c[1], c[2]);
    let _ = writeln!(out, "sha256 {}", dataset_digest(&ds));
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig, phase: &str, out: &mut dyn Write) -> Result<()> {
    let phases = phases_for(phase)?;
    let ds = load_matching_dataset(cfg)?;
    for p in phases {
        let run = train_phase(cfg, &ds, p)?;
        let last = run.epochs.last();
        let resumed = if run.resumed_from > 0 {
            format!(" (resumed at epoch {})", run.resumed_from)
        } else {
            String::new()
        };
        let _ = match last {
            Some(s) => writeln!(
                out,
                "{:<7} epochs {:>3}  kl {:.6}  recon_nll {:.6}  objective {:.6}{}  -> {}{resumed}",
                p.name(),
                s.epoch + 1,
                s.kl,
                s.recon_nll,
                s.objective,
                s.val_iou.map(|v| format!("  val_iou {v:.4}")).unwrap_or_default(),
                run.checkpoint.display()
            ),
            None => writeln!(out, "{:<7} complete  -> {}", p.name(), run.checkpoint.display()),
        };
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, source: &Path, split: Split, out: &mut dyn Write) -> Result<EvalReport> {
    let ds = load_matching_dataset(cfg)?;
    let report = evaluate(&ds, split, cfg.eval.grid, source)?;
    let _ = writeln!(out, "split {} ({} images)", split.name(), report.images);
    let _ = writeln!(out, "{:<20} {:>8} {:>8} {:>8} {:>8}", "variant", "fg_iou", "mean_iou", "acc", "sap");
    for r in &report.variants {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.variant.name(),
            r.foreground_iou,
            m.mean_iou,
            m.pixel_accuracy,
            m.sap
        );
    }
    if let Some(c) = &report.hr_vs_lr_nearest {
        let _ = writeln!(
            out,
            "hr fg_iou {:.4} vs nearest-upsampled lr {:.4}",
            c.hr_foreground_iou, c.lr_nearest_foreground_iou
        );
    }
    Ok(report)
}

/// 8-bit binary graymap with labels spread over `0..=255`.
pub fn pgm(labels: &[u8], h: usize, w: usize, classes: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let step = 255 / (classes.max(2) - 1);
    out.extend(labels.iter().map(|&l| (l as usize * step) as u8));
    out
}

fn read_input(path: &Path, size: usize) -> Result<(String, Tensor)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let plane = size * size;
    if bytes.len() != plane * 8 && bytes.len() != plane * 9 {
        return Err(Error::CorruptSample {
            id,
            reason: format!("{} bytes is neither an image nor an image plus mask", bytes.len()),
        });
    }
    let px: Vec<f64> = bytes[..plane * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::CorruptSample {
            id,
            reason: "intensity outside [0, 1]".into(),
        });
    }
    Ok((id, Tensor::new(&[1, 1, size, size], px)?))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_predict(
    model: &CvaeModel,
    inputs: &[(String, Tensor)],
    resolution: Resolution,
    mode: PredictMode,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let classes = model.arch.classes;
    for (id, x) in inputs {
        let logits = match resolution {
            Resolution::Lr => model.predict(x, mode)?,
            Resolution::Hr => {
                let tape = crate::autograd::Tape::inference();
                crate::model::argmax_prediction(&model.hr_logits(&tape, x, mode)?.value())
            }
        };
        let s = logits.logits.shape();
        let (h, w) = (s[2], s[3]);
        let mask = dir.join(format!("{id}.mask.bin"));
        fs::write(&mask, &logits.labels).map_err(|e| Error::io(&mask, e))?;
        let preview = dir.join(format!("{id}.pgm"));
        fs::write(&preview, pgm(&logits.labels, h, w, classes)).map_err(|e| Error::io(&preview, e))?;
    }
    let _ = writeln!(out, "wrote {} masks to {}", inputs.len(), dir.display());
    Ok(inputs.len())
}

pub fn cmd_verify(opts: &VerifyOptions, out: &mut dyn Write) -> Result<VerifyReport> {
    let report = run_suite(opts)?;
    for c in &report.checks {
        let mark = if c.passed { "pass" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{mark} {:<32} measured {:.3e} tolerance {:.1e}  {}",
            c.name, c.measured, c.tolerance, c.detail
        );
    }
    Ok(report)
}

fn write_report(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Execute a parsed command. Verification failures return `EXIT_VERIFY`.
pub fn execute(cli: Cli, verify_opts: VerifyOptions, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Synth { common } => {
            let mut cfg = load_config(&common, true)?;
            if let Some(d) = common.out {
                cfg.data.dir = d;
            }
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            cmd_synth(&cfg, out)?;
        }
        Command::Train { common, phase } => {
            let mut cfg = load_config(&common, true)?;
            if let Some(d) = common.out {
                cfg.out_dir = d;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            phases_for(&phase).map_err(|_| usage(format!("unknown phase `{phase}` (fcn, vae, imgenc, joint, hr, all)")))?;
            cmd_train(&cfg, &phase, out)?;
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common, true)?;
            let split = split.unwrap_or(cfg.eval.split);
            let source = checkpoint.unwrap_or_else(|| cfg.out_dir.clone());
            let report = cmd_eval(&cfg, &source, split, out)?;
            let path = common
                .out
                .unwrap_or_else(|| cfg.out_dir.join(format!("eval_{}.json", split.name())));
            write_report(&path, &report.to_json())?;
            let _ = writeln!(out, "report {}", path.display());
        }
        Command::Predict {
            common,
            checkpoint,
            split,
            input,
            resolution,
            mode,
        } => {
            let cfg = load_config(&common, true)?;
            let default_phase = match resolution {
                Resolution::Lr => Phase::Joint,
                Resolution::Hr => Phase::Hr,
            };
            let ck = checkpoint.unwrap_or_else(|| checkpoint_path(&cfg.out_dir, default_phase));
            let model = load_checkpoint(&ck)?.model;
            if resolution == Resolution::Hr && !model.has_hr_head() {
                return Err(Error::MissingHRHead.into());
            }
            let size = model.arch.input_size;
            let inputs: Vec<(String, Tensor)> = if input.is_empty() {
                let ds = load_matching_dataset(&cfg)?;
                let samples: Vec<&Sample> = ds.split(split);
                ds.records(split)
                    .iter()
                    .zip(samples)
                    .map(|(r, s)| Ok((r.id.clone(), Tensor::new(&[1, 1, s.height, s.width], s.image.clone())?)))
                    .collect::<Result<_>>()?
            } else {
                input.iter().map(|p| read_input(p, size)).collect::<Result<_>>()?
            };
            let mode = match mode {
                Mode::Mean => PredictMode::Mean,
                Mode::Sample => PredictMode::Sample(common.seed.unwrap_or(0)),
            };
            let dir = common.out.unwrap_or_else(|| {
                let tag = if input.is_empty() { split.name() } else { "inputs" };
                cfg.out_dir.join("predictions").join(tag)
            });
            cmd_predict(&model, &inputs, resolution, mode, &dir, out)?;
        }
        Command::Verify { common } => {
            let cfg = load_config(&common, false)?;
            let mut opts = verify_opts;
            if let Some(s) = common.seed {
                opts.seed = s;
            }
            let report = cmd_verify(&opts, out)?;
            let path = common.out.unwrap_or_else(|| cfg.out_dir.join("verify_report.json"));
            write_report(&path, &report.to_json())?;
            let _ = writeln!(out, "report {}", path.display());
            if let Some(f) = report.first_failure() {
                return Err(Failure {
                    code: EXIT_VERIFY,
                    message: format!("verification failed: {} (measured {:.3e}, tolerance {:.1e})", f.name, f.measured, f.tolerance),
                });
            }
        }
    }
    Ok(())
}

/// Apply `CVAESEG_THREADS` to the global worker pool.
pub fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV}={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("{THREADS_ENV}: {e}")))
}

/// Parse `args`, run, print errors to stderr and return the exit code.
pub fn run<I, T>(args: I, verify_opts: VerifyOptions) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return f.code;
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, verify_opts, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let img = pgm(&[0, 1, 1, 0, 0, 1], 2, 3, 2);
        assert!(img.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&img[img.len() - 6..], &[0, 255, 255, 0, 0, 255]);
    }

    #[test]
    fn error_codes() {
        assert_eq!(Failure::from(Error::Config("x".into())).code, EXIT_USAGE);
        assert_eq!(Failure::from(Error::ParamOutOfRange("x".into())).code, EXIT_USAGE);
        assert_eq!(Failure::from(Error::EmptyDataset).code, EXIT_RUNTIME);
        assert_eq!(Failure::from(Error::PhaseOrderViolation("x".into())).code, EXIT_RUNTIME);
    }

    #[test]
    fn parsing() {
        assert_eq!(run(["cvaeseg", "synth"], VerifyOptions::default()), EXIT_USAGE);
        assert_eq!(run(["cvaeseg", "eval", "--config", "c.json", "--split", "dev"], VerifyOptions::default()), EXIT_USAGE);
        let cli = Cli::try_parse_from(["cvaeseg", "predict", "--config", "c.json", "--resolution", "hr", "--mode", "sample"]).unwrap();
        match cli.command {
            Command::Predict { resolution, mode, split, .. } => {
                assert_eq!((resolution, mode, split), (Resolution::Hr, Mode::Sample, Split::Test));
            }
            other => panic!("{other:?}"),
        }
    }
}
