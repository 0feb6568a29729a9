//! Synthesize the default dataset, run every training phase and evaluate the
//! four model variants on the test split.
//!
//! ```text
//! cargo run --release --example train_pipeline -- [config.json] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use cvaeseg::config::RunConfig;
use cvaeseg::data::{gen_dataset, load_dataset, MANIFEST_FILE};
use cvaeseg::pipeline::{evaluate, train_phase};
use cvaeseg::train::Phase;

fn main() -> cvaeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    let root = PathBuf::from(args.next().unwrap_or_else(|| "target/pipeline".into()));
    cfg.data.dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg.validate()?;

    if !cfg.data.dir.join(MANIFEST_FILE).exists() {
        gen_dataset(cfg.data.seed, cfg.data.counts.as_array(), &cfg.data.generator, &cfg.data.dir)?;
    }
    let dataset = load_dataset(&cfg.data.dir)?;

    let total = Instant::now();
    for phase in Phase::ORDER {
        let t = Instant::now();
        let run = train_phase(&cfg, &dataset, phase)?;
        let last = run.epochs.last();
        println!(
            "{:<7} {:>3} epochs  {:>7.1}s  objective {:>10.4}  val_iou {}",
            phase.name(),
            run.epochs.len(),
            t.elapsed().as_secs_f64(),
            last.map_or(f64::NAN, |s| s.objective),
            last.and_then(|s| s.val_iou).map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    println!("training: {:.1}s", total.elapsed().as_secs_f64());

    let report = evaluate(&dataset, cfg.eval.split, cfg.eval.grid, &cfg.out_dir)?;
    for row in &report.variants {
        let m = &row.metrics;
        println!(
            "{:<20} fg_iou {:.4}  mean_iou {:.4}  acc {:.4}  sap {:.4}",
            row.variant.name(),
            row.foreground_iou,
            m.mean_iou,
            m.pixel_accuracy,
            m.sap
        );
    }
    if let Some(c) = &report.hr_vs_lr_nearest {
        println!(
            "hr {:.4} vs lr nearest-upsampled {:.4}",
            c.hr_foreground_iou, c.lr_nearest_foreground_iou
        );
    }
    Ok(())
}
