//! Print the LR, HR and image-encoder-only predictions of a trained run for
//! one fresh sample next to its ground truth.
//!
//! ```text
//! cargo run --release --example predict -- <run_dir> [sample_seed]
//! ```

use std::path::PathBuf;

use cvaeseg::checkpoint::load_checkpoint;
use cvaeseg::data::{gen_sample, make_batch, GenParams};
use cvaeseg::model::PredictMode;

fn show(title: &str, labels: &[u8], side: usize) {
    println!("{title}");
    for row in labels.chunks(side) {
        println!("  {}", row.iter().map(|&l| if l == 1 { '#' } else { '.' }).collect::<String>());
    }
}

fn main() -> cvaeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(run) = args.next().map(PathBuf::from) else {
        eprintln!("usage: predict <run_dir> [sample_seed]");
        std::process::exit(1);
    };
    let seed: u64 = args.next().map_or(1 << 40, |s| s.parse().expect("seed must be an integer"));
    let model = load_checkpoint(&run.join("hr.ckpt"))?.model;

    let probe = gen_sample(seed, &GenParams::default())?;
    let batch = make_batch(&[&probe])?;
    let side = model.arch.lr_size();
    show("ground truth", &probe.mask, probe.width);
    show("low resolution, z = mean of p(z|x)", &model.predict(&batch.x, PredictMode::Mean)?.labels, side);
    show("low resolution, one draw of z", &model.predict(&batch.x, PredictMode::Sample(3))?.labels, side);
    show("image encoder only", &model.predict_image_encoder_only(&batch.x)?.labels, side);
    show("high resolution", &model.predict_hr(&batch.x)?.labels, probe.width);
    Ok(())
}
