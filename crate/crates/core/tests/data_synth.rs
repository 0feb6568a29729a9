use std::fs;

use cvaeseg::data::{gen_dataset, gen_sample, gen_sample_detailed, load_dataset, Detailed, GenParams, Layer, Split, MANIFEST_FILE};
use cvaeseg::Error;

fn detailed(n: u64) -> Vec<Detailed> {
    let p = GenParams::default();
    (0..n).map(|s| gen_sample_detailed(s, &p).unwrap()).collect()
}

fn pixels(ds: &[Detailed], layer: Layer) -> Vec<f64> {
    ds.iter()
        .flat_map(|d| {
            d.layers
                .iter()
                .zip(&d.sample.image)
                .filter(move |(l, _)| **l == layer)
                .map(|(_, &v)| v)
        })
        .collect()
}

/// Best accuracy of a single intensity threshold (either direction) at
/// telling `a` from `b`, on the pooled pixels.
fn best_threshold_accuracy(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len() as f64;
    let (mut a_below, mut b_below) = (0usize, 0usize);
    let mut best = (a.len().max(b.len())) as f64 / n;
    for (i, &(v, is_a)) in all.iter().enumerate() {
        if is_a {
            a_below += 1;
        } else {
            b_below += 1;
        }
        if i + 1 < all.len() && all[i + 1].0 == v {
            continue;
        }
        let below_is_b = (b_below + (a.len() - a_below)) as f64 / n;
        let below_is_a = (a_below + (b.len() - b_below)) as f64 / n;
        best = best.max(below_is_b).max(below_is_a);
    }
    best
}

fn histogram(v: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &x in v {
        h[((x * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    h.iter().map(|c| c / v.len() as f64).collect()
}

fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

#[test]
fn foreground_fraction_bounds_over_1000_seeds() {
    let p = GenParams::default();
    for seed in 0..1000 {
        let f = gen_sample(seed, &p).unwrap().foreground_fraction();
        assert!((0.05..=0.6).contains(&f), "seed {seed}: foreground fraction {f}");
    }
}

#[test]
fn tail_and_distractor_are_locally_ambiguous() {
    let ds = detailed(1000);
    let tail = pixels(&ds, Layer::Tail);
    let distractor = pixels(&ds, Layer::Distractor);
    let body = pixels(&ds, Layer::Body);
    let background = pixels(&ds, Layer::Background);

    let acc = best_threshold_accuracy(&tail, &distractor);
    assert!(acc <= 0.65, "tail vs distractor threshold accuracy {acc}");
    assert!(best_threshold_accuracy(&body, &background) > 0.99);
    assert!(best_threshold_accuracy(&body, &distractor) > 0.99);

    let bins = 20;
    let js_ambiguous = jensen_shannon(&histogram(&tail, bins), &histogram(&distractor, bins));
    let js_body = jensen_shannon(&histogram(&body, bins), &histogram(&distractor, bins));
    assert!(js_ambiguous < 0.05, "tail/distractor Jensen-Shannon {js_ambiguous}");
    assert!(js_body > 0.6, "body/distractor Jensen-Shannon {js_body}");
}

#[test]
fn labels_follow_layers() {
    for d in detailed(50) {
        for (l, &m) in d.layers.iter().zip(&d.sample.mask) {
            assert_eq!(m == 1, matches!(l, Layer::Body | Layer::Tail));
        }
        assert!(d.sample.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn dataset_is_reproducible_and_splits_are_disjoint() {
    let p = GenParams::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = gen_dataset(3, [20, 5, 5], &p, a.path()).unwrap();
    let mb = gen_dataset(3, [20, 5, 5], &p, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    for r in &ma.samples {
        assert_eq!(fs::read(a.path().join(&r.file)).unwrap(), fs::read(b.path().join(&r.file)).unwrap());
    }

    let ds = load_dataset(a.path()).unwrap();
    assert_eq!(ds.samples.len(), ma.count);
    let mut seeds = std::collections::HashSet::new();
    let mut bodies = std::collections::HashSet::new();
    for split in Split::ALL {
        for (r, s) in ds.records(split).iter().zip(ds.split(split)) {
            assert_eq!(r.split, split);
            assert!(seeds.insert(r.seed));
            let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
            assert!(bodies.insert(bytes), "sample {} duplicates another", r.id);
        }
    }

    let other = tempfile::tempdir().unwrap();
    let mc = gen_dataset(4, [20, 5, 5], &p, other.path()).unwrap();
    assert_ne!(mc.samples[0].seed, ma.samples[0].seed);
}

#[test]
fn corrupt_and_missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(0, [3, 1, 1], &GenParams::default(), dir.path()).unwrap();
    let victim = dir.path().join(&m.samples[1].file);
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 10]).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::CorruptSample { id, .. }) => assert_eq!(id, m.samples[1].id),
        other => panic!("expected CorruptSample, got {other:?}"),
    }

    let mut bad_label = bytes.clone();
    *bad_label.last_mut().unwrap() = 7;
    fs::write(&victim, &bad_label).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptSample { .. })));

    fs::remove_file(&victim).unwrap();
    match load_dataset(dir.path()) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains(&m.samples[1].file)),
        other => panic!("expected Io, got {other:?}"),
    }

    let missing = dir.path().join("nowhere");
    let err = load_dataset(&missing).unwrap_err();
    assert!(err.to_string().contains("nowhere"));
}

#[test]
fn manifest_version_and_count_checked() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(0, [2, 1, 1], &GenParams::default(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"format_version\": 1", "\"format_version\": 2", 1)).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(Error::FormatVersionMismatch { found: 2, expected: 1 })
    ));
    fs::write(&path, text.replacen("\"count\": 4", "\"count\": 5", 1)).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Config(_))));
}

#[test]
fn out_of_range_parameters_rejected() {
    let mut p = GenParams::default();
    p.body_axis = [4.0, 10.0];
    assert!(matches!(gen_sample(0, &p), Err(Error::ParamOutOfRange(_))));
    let mut p = GenParams::default();
    p.noise_sigma = 0.5;
    assert!(matches!(gen_sample(0, &p), Err(Error::ParamOutOfRange(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(gen_dataset(0, [0, 1, 1], &GenParams::default(), dir.path()).is_err());
}
