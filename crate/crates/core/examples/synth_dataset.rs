//! Generate a dataset and summarise it.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use cvaeseg::data::{gen_dataset, gen_sample_detailed, load_dataset, GenParams, Layer, Split};

fn main() -> cvaeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/synth_example".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let params = GenParams::default();
    let manifest = gen_dataset(seed, [500, 100, 100], &params, &dir)?;
    let ds = load_dataset(&dir)?;
    println!("{} samples in {}", manifest.count, dir.display());
    for split in Split::ALL {
        let samples = ds.split(split);
        let fg: Vec<f64> = samples.iter().map(|s| s.foreground_fraction()).collect();
        let lo = fg.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = fg.iter().cloned().fold(0.0, f64::max);
        let ambiguous = ds.records(split).iter().filter(|r| r.ambiguous).count();
        println!(
            "{:<5} {:>4} images  foreground {:.3}..{:.3}  ambiguous {ambiguous}",
            split.name(),
            samples.len(),
            lo,
            hi
        );
    }

    let d = gen_sample_detailed(manifest.samples[0].seed, &params)?;
    let glyph = |l: &Layer| match l {
        Layer::Background => '.',
        Layer::Body => '#',
        Layer::Tail => 't',
        Layer::Distractor => 'd',
    };
    println!("first sample (t = tail, d = distractor):");
    for row in d.layers.chunks(params.size) {
        println!("  {}", row.iter().map(glyph).collect::<String>());
    }
    Ok(())
}
