use cvaeseg::checkpoint::{decode, encode};
use cvaeseg::config::RunConfig;
use cvaeseg::data::{augment, Augment, Sample};
use cvaeseg::metrics::{bilinear_resize, grid_superpixels, mean_iou, pixel_accuracy, superpixel_average_precision};
use cvaeseg::model::{ArchConfig, CvaeModel};
use cvaeseg::train::{Phase, PhaseState, TrainConfig};
use cvaeseg::{Tape, Tensor};
use proptest::prelude::*;

/// Shapes `a` and `b` where `b` is `a` with some axes collapsed to 1 and
/// possibly some leading axes dropped.
fn broadcast_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..4, 1..4).prop_flat_map(|a| {
        let r = a.len();
        (Just(a), prop::collection::vec(any::<bool>(), r), 0..r)
    })
    .prop_map(|(a, keep, drop)| {
        let b: Vec<usize> = a.iter().zip(&keep).map(|(&d, &k)| if k { d } else { 1 }).skip(drop).collect();
        (a, b)
    })
}

fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = cvaeseg::SplitMix64::new(seed);
    (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()
}

/// Index of `b` that element `flat` of `a` reads under broadcasting.
fn source_index(a: &[usize], b: &[usize], mut flat: usize) -> usize {
    let offset = a.len() - b.len();
    let mut idx = vec![0; a.len()];
    for ax in (0..a.len()).rev() {
        idx[ax] = flat % a[ax];
        flat /= a[ax];
    }
    let mut out = 0;
    for (k, &d) in b.iter().enumerate() {
        out = out * d + if d == 1 { 0 } else { idx[k + offset] };
    }
    out
}

fn labels(n: usize, classes: u8) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..classes, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_matches_materialised_expansion((sa, sb) in broadcast_pair(), seed in any::<u64>()) {
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let a = Tensor::new(&sa, values(na, seed)).unwrap();
        let b = Tensor::new(&sb, values(nb, seed ^ 1)).unwrap();
        let expanded: Vec<f64> = (0..na).map(|i| b.data()[source_index(&sa, &sb, i)]).collect();

        let tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let sum = va.add(vb).unwrap();
        let prod = va.mul(vb).unwrap();
        for i in 0..na {
            prop_assert_eq!(sum.value().data()[i], a.data()[i] + expanded[i]);
            prop_assert_eq!(prod.value().data()[i], a.data()[i] * expanded[i]);
        }
        let g = tape.backward(prod.sum()).unwrap();
        let mut want = vec![0.0; nb];
        for i in 0..na {
            want[source_index(&sa, &sb, i)] += a.data()[i];
        }
        let got = g.wrt(vb);
        prop_assert_eq!(got.shape(), sb.as_slice());
        for (x, y) in got.data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn metrics_invariant_under_relabeling(pred in labels(81, 2), gt in labels(81, 2)) {
        let flip = |v: &[u8]| v.iter().map(|&l| 1 - l).collect::<Vec<u8>>();
        let (fp, fg) = (flip(&pred), flip(&gt));
        prop_assert_eq!(pixel_accuracy(&pred, &gt).unwrap(), pixel_accuracy(&fp, &fg).unwrap());
        prop_assert_eq!(mean_iou(&pred, &gt, 2).unwrap(), mean_iou(&fp, &fg, 2).unwrap());
        let sp = grid_superpixels(9, 9, 3).unwrap();
        prop_assert_eq!(
            superpixel_average_precision(&pred, &gt, &sp).unwrap(),
            superpixel_average_precision(&fp, &fg, &sp).unwrap()
        );
    }

    #[test]
    fn single_pixel_superpixels_give_pixel_accuracy(pred in labels(64, 4), gt in labels(64, 4)) {
        let sp = grid_superpixels(8, 8, 8).unwrap();
        prop_assert_eq!(superpixel_average_precision(&pred, &gt, &sp).unwrap(), pixel_accuracy(&pred, &gt).unwrap());
    }

    #[test]
    fn bilinear_stays_inside_input_range(h in 2usize..6, w in 2usize..6, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>()) {
        let map = Tensor::new(&[2, h, w], values(2 * h * w, seed)).unwrap();
        let out = bilinear_resize(&map, oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[2, oh, ow]);
        for c in 0..2 {
            let src = &map.data()[c * h * w..(c + 1) * h * w];
            let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in &out.data()[c * oh * ow..(c + 1) * oh * ow] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn hflip_is_an_involution(image in prop::collection::vec(0.0f64..=1.0, 32 * 32), mask in labels(32 * 32, 2)) {
        let s = Sample { height: 32, width: 32, image, mask };
        let once = augment(&s, Augment::HFlip).unwrap();
        prop_assert_eq!(augment(&once, Augment::HFlip).unwrap(), s.clone());
        prop_assert_eq!(once.foreground_fraction(), s.foreground_fraction());
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), latent in 1usize..3, step in any::<u32>(), frozen in any::<bool>()) {
        let mut model = CvaeModel::new(ArchConfig::tiny(latent), seed).unwrap();
        if frozen {
            model.params.set_trainable_where(|n| !n.starts_with("trunk/"));
        }
        let mut state = PhaseState::fresh(Phase::Joint, &TrainConfig::default());
        state.step = step as u64;
        state.adam.t = step as u64;
        let w = model.params.value("decoder/fuse_conv/w").unwrap().len();
        state.adam.m.insert("decoder/fuse_conv/w".into(), values(w, seed));
        state.adam.v.insert("decoder/fuse_conv/w".into(), values(w, !seed).iter().map(|x| x * x).collect());
        let bytes = encode(&model, &state, seed, seed.rotate_left(7)).unwrap();
        let ck = decode(&bytes).unwrap();
        prop_assert_eq!(&ck.model, &model);
        prop_assert_eq!(&ck.state, &state);
        prop_assert_eq!(encode(&ck.model, &ck.state, ck.seed, ck.run_digest).unwrap(), bytes);
    }

    #[test]
    fn config_round_trip(seed in any::<u64>(), data_seed in 0u64..1000, batch in 1usize..64, joint in 0usize..100, lr in 1e-5f64..1e-1, grid in 1usize..=32) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.data.seed = data_seed;
        cfg.train.batch_size = batch;
        cfg.train.epochs.joint = joint;
        cfg.train.lr.vae = lr;
        cfg.eval.grid = grid;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
