//! Interrupt a phase, resume it from the checkpoint bytes and confirm the
//! result is bit-identical to an unbroken run.

use cvaeseg::checkpoint::{decode, encode, param_digest};
use cvaeseg::data::{gen_sample, GenParams, Sample};
use cvaeseg::model::{ArchConfig, CvaeModel};
use cvaeseg::train::{run_phase, NullLog, Phase, PhaseState, TrainConfig};

fn main() -> cvaeseg::Result<()> {
    let params = GenParams::default();
    let data: Vec<Sample> = (0..32).map(|s| gen_sample(s, &params)).collect::<cvaeseg::Result<_>>()?;
    let train: Vec<&Sample> = data.iter().collect();
    let mut cfg = TrainConfig::default();
    cfg.epochs.vae = 6;
    let start = CvaeModel::new(ArchConfig::default(), 1)?;

    let mut full = start.clone();
    let mut full_state = PhaseState::fresh(Phase::Vae, &cfg);
    run_phase(&mut full, &mut full_state, &train, &[], &cfg, 1, &mut NullLog, &mut |_, _| Ok(()))?;

    let mut first = cfg.clone();
    first.epochs.vae = 2;
    let mut part = start;
    let mut state = PhaseState::fresh(Phase::Vae, &cfg);
    run_phase(&mut part, &mut state, &train, &[], &first, 1, &mut NullLog, &mut |_, _| Ok(()))?;
    let bytes = encode(&part, &state, 1, 0)?;
    println!("checkpoint after epoch {}: {} bytes", state.epochs_done, bytes.len());

    let ck = decode(&bytes)?;
    let (mut part, mut state) = (ck.model, ck.state);
    run_phase(&mut part, &mut state, &train, &[], &cfg, 1, &mut NullLog, &mut |_, _| Ok(()))?;

    let all = |_: &str| true;
    println!("unbroken {}", param_digest(&full.params, all));
    println!("resumed  {}", param_digest(&part.params, all));
    println!("identical: {}", encode(&full, &full_state, 1, 0)? == encode(&part, &state, 1, 0)?);
    Ok(())
}
