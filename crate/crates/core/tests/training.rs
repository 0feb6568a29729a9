use cvaeseg::checkpoint::{decode, encode, param_digest};
use cvaeseg::config::RunConfig;
use cvaeseg::data::{gen_sample, make_batch, GenParams, Sample};
use cvaeseg::model::{ArchConfig, Batch, CvaeModel};
use cvaeseg::pipeline::{starting_model, train_phase};
use cvaeseg::rng::SplitMix64;
use cvaeseg::train::{
    adam_step, draw_eps, prepare_model, run_phase, train_step, AdamState, NullLog, Phase, PhaseState, TrainConfig,
};
use cvaeseg::{Error, ParamRegistry, Tape, Tensor};

fn samples(n: u64) -> Vec<Sample> {
    let p = GenParams::default();
    (0..n).map(|s| gen_sample(1000 + s, &p).unwrap()).collect()
}

fn fixed_batch(n: u64) -> Batch {
    let s = samples(n);
    let refs: Vec<&Sample> = s.iter().collect();
    make_batch(&refs).unwrap()
}

fn objectives(phase: Phase, steps: usize) -> Vec<f64> {
    let mut model = CvaeModel::new(ArchConfig::default(), 4).unwrap();
    prepare_model(&mut model, phase, 4).unwrap();
    let batch = fixed_batch(8);
    let mut adam = AdamState::new(1e-3);
    let mut rng = SplitMix64::new(9);
    (0..steps)
        .map(|_| {
            let eps = draw_eps(&mut rng, batch.len(), model.arch.latent_dim, 1).unwrap();
            train_step(&mut model, phase, &mut adam, &batch, &eps).unwrap().objective
        })
        .collect()
}

#[test]
fn every_phase_reduces_its_loss_on_a_fixed_batch() {
    for phase in Phase::ORDER {
        let steps = if phase == Phase::Joint { 50 } else { 20 };
        let obj = objectives(phase, steps);
        let head = obj[..3].iter().sum::<f64>() / 3.0;
        let tail = obj[steps - 3..].iter().sum::<f64>() / 3.0;
        assert!(tail < head, "{}: {head} -> {tail}", phase.name());
        assert!(obj.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn adam_matches_a_hand_reference_for_ten_steps() {
    let mut reg = ParamRegistry::new();
    reg.insert("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let c = [1.0, 3.0, -0.5];
    let mut state = AdamState::new(0.1);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);

    let mut w = vec![0.5, -1.0, 2.0];
    let mut m = vec![0.0; 3];
    let mut v = vec![0.0; 3];
    for t in 1..=10 {
        let tape = Tape::new();
        let p = tape.param(&reg, "w").unwrap();
        let k = tape.constant(Tensor::new(&[3], c.to_vec()).unwrap());
        let loss = p.square().mul(k).unwrap().sum();
        reg.zero_grad();
        tape.backward_into(loss, &mut reg).unwrap();
        adam_step(&mut reg, &mut state).unwrap();

        for i in 0..3 {
            let g = 2.0 * c[i] * w[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        assert_eq!(reg.value("w").unwrap().data(), w.as_slice(), "step {t}");
    }
    assert_eq!(state.t, 10);
}

#[test]
fn frozen_parameters_stay_bit_identical_for_100_steps() {
    let batch = fixed_batch(4);
    for phase in [Phase::Imgenc, Phase::Hr] {
        let mut model = CvaeModel::new(ArchConfig::default(), 2).unwrap();
        prepare_model(&mut model, phase, 2).unwrap();
        let frozen = |n: &str| !phase.trains(n);
        let live = |n: &str| phase.trains(n);
        let before = param_digest(&model.params, frozen);
        let trained_before = param_digest(&model.params, live);
        let mut adam = AdamState::new(1e-3);
        let mut rng = SplitMix64::new(1);
        for _ in 0..100 {
            let eps = draw_eps(&mut rng, batch.len(), model.arch.latent_dim, 1).unwrap();
            train_step(&mut model, phase, &mut adam, &batch, &eps).unwrap();
        }
        assert_eq!(param_digest(&model.params, frozen), before, "{}", phase.name());
        assert_ne!(param_digest(&model.params, live), trained_before);
        assert!(adam.m.keys().all(|n| phase.trains(n)));
    }
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    cfg.epochs.joint = 4;
    cfg
}

#[test]
fn epoch_objective_is_kl_plus_reconstruction() {
    let data = samples(24);
    let train: Vec<&Sample> = data[..16].iter().collect();
    let val: Vec<&Sample> = data[16..].iter().collect();
    let cfg = small_config();
    let mut model = CvaeModel::new(ArchConfig::default(), 0).unwrap();
    let mut state = PhaseState::fresh(Phase::Joint, &cfg);
    let stats = run_phase(&mut model, &mut state, &train, &val, &cfg, 0, &mut NullLog, &mut |_, _| Ok(())).unwrap();
    assert_eq!(stats.len(), 4);
    assert_eq!(state.step, 8);
    for s in &stats {
        let tol = 1e-12 * s.objective.abs().max(1.0);
        assert!((s.objective - (s.kl + s.recon_nll)).abs() <= tol, "{s:?}");
        assert!(s.kl >= 0.0);
        assert!(s.val_iou.is_some_and(|v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn resumed_phase_matches_the_unbroken_run() {
    let data = samples(16);
    let train: Vec<&Sample> = data.iter().collect();
    let cfg = small_config();
    let start = CvaeModel::new(ArchConfig::default(), 5).unwrap();

    let mut full = start.clone();
    let mut full_state = PhaseState::fresh(Phase::Joint, &cfg);
    run_phase(&mut full, &mut full_state, &train, &[], &cfg, 5, &mut NullLog, &mut |_, _| Ok(())).unwrap();

    let mut half_cfg = cfg.clone();
    half_cfg.epochs.joint = 2;
    let mut part = start;
    let mut part_state = PhaseState::fresh(Phase::Joint, &cfg);
    run_phase(&mut part, &mut part_state, &train, &[], &half_cfg, 5, &mut NullLog, &mut |_, _| Ok(())).unwrap();
    let ck = decode(&encode(&part, &part_state, 5, 0).unwrap()).unwrap();
    let (mut part, mut part_state) = (ck.model, ck.state);
    run_phase(&mut part, &mut part_state, &train, &[], &cfg, 5, &mut NullLog, &mut |_, _| Ok(())).unwrap();

    assert_eq!(encode(&part, &part_state, 5, 0).unwrap(), encode(&full, &full_state, 5, 0).unwrap());
}

#[test]
fn later_phases_need_earlier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    for phase in [Phase::Vae, Phase::Imgenc, Phase::Joint, Phase::Hr] {
        match starting_model(&cfg, phase) {
            Err(Error::PhaseOrderViolation(msg)) => assert!(msg.contains(phase.previous().unwrap().name()), "{msg}"),
            other => panic!("{}: expected PhaseOrderViolation, got {other:?}", phase.name()),
        }
    }
    assert!(starting_model(&cfg, Phase::Fcn).is_ok());

    let mut cold = cfg.clone();
    cold.train.cold_start_joint = true;
    assert!(starting_model(&cold, Phase::Joint).is_ok());
}

#[test]
fn incomplete_previous_phase_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("data");
    let mut cfg = RunConfig {
        out_dir: root.path().join("run"),
        ..RunConfig::default()
    };
    cfg.data.dir = data_dir.clone();
    cfg.data.counts.train = 8;
    cfg.data.counts.val = 2;
    cfg.data.counts.test = 2;
    cfg.train.batch_size = 8;
    cfg.train.epochs.fcn = 1;
    cvaeseg::data::gen_dataset(0, cfg.data.counts.as_array(), &cfg.data.generator, &data_dir).unwrap();
    let ds = cvaeseg::data::load_dataset(&data_dir).unwrap();
    train_phase(&cfg, &ds, Phase::Fcn).unwrap();
    assert!(starting_model(&cfg, Phase::Vae).is_ok());

    cfg.train.epochs.fcn = 3;
    assert!(matches!(starting_model(&cfg, Phase::Vae), Err(Error::PhaseOrderViolation(_))));
}
