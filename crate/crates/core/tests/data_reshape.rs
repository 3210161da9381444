use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use loopseq::data::{
    denormalize, load_named, load_ts, normalize, parse_ts, split_counts, split_dataset, synth_band,
    synth_sine_task, synth_sine_task_with_noise, write_ts, Dataset, NormMode, Split, CORPORA,
};
use loopseq::reshape::{
    reshape_forward, reshape_inverse, DimTag, Regime, RegimeChoice, ReshapeSpec,
};

fn dataset(
    n: usize,
    steps: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
) -> Dataset {
    Dataset {
        name: "fixture".into(),
        steps,
        width,
        series: values,
        lengths: vec![steps; n],
        labels,
        class_names: (0..classes).map(|k| format!("c{k}")).collect(),
        dim_tag: DimTag::Medium,
        split: Vec::new(),
    }
}

/// Reference rule: largest train size `k` with `10k <= 7n`, then the
/// remainder halved with validation rounding up.
fn split_oracle(n: usize) -> (usize, usize, usize) {
    let train = (0..=n).filter(|k| 10 * k <= 7 * n).max().unwrap();
    let rest = n - train;
    let val = rest / 2 + rest % 2;
    (train, val, rest - val)
}

#[test]
fn split_sizes_at_reference_points() {
    assert_eq!(split_counts(100), (70, 15, 15));
    assert_eq!(split_counts(204), (142, 31, 31));
    for n in 10..2000 {
        assert_eq!(split_counts(n), split_oracle(n), "n = {n}");
    }
}

#[test]
fn ts_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_sine_task(12, 40, 3, 3, 9).unwrap();
    let path = dir.path().join("Round.ts");
    let mut w = BufWriter::new(File::create(&path).unwrap());
    write_ts(&ds, &mut w).unwrap();
    drop(w);
    let back = load_ts(&path, false).unwrap();
    assert_eq!(back.series, ds.series);
    assert_eq!(back.labels, ds.labels);
    assert_eq!((back.steps, back.width), (40, 3));
}

#[test]
fn ragged_series_are_padded_on_request() {
    let text = "@problemName R\n@timeStamps false\n@univariate true\n@equalLength false\n@classLabel true x y\n@data\n1,2,3:x\n4,5:y\n";
    assert!(parse_ts(text, "R", false).is_err());
    let ds = parse_ts(text, "R", true).unwrap();
    assert_eq!(ds.lengths, vec![3, 2]);
    assert_eq!(ds.series, vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.0]);
    let mut split = pool_to(&ds, 10);
    split.split = vec![Split::Train; 10];
    let spec = ReshapeSpec::new(2, Regime::HighDimFlatten, (3, 1)).unwrap();
    let lens: Vec<usize> = split
        .samples(Split::Train, &spec)
        .unwrap()
        .iter()
        .map(|s| s.valid_len)
        .collect();
    assert_eq!(&lens[..2], &[2, 1]);
}

#[test]
fn normalization_fits_on_train_only() {
    let ds = synth_sine_task(200, 64, 3, 2, 4).unwrap();
    let mut shifted = ds.clone();
    shifted
        .series
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = *v * 3.0 + (i % 3) as f64 * 5.0);
    let split = split_dataset(&shifted, 1).unwrap();
    let (norm, stats) = normalize(&split, NormMode::PerChannelZscore).unwrap();
    let channel_mean = |idx: &[usize], f: usize| {
        let vals: Vec<f64> = idx
            .iter()
            .flat_map(|&i| norm.example_values(i).iter().skip(f).step_by(3).copied())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v.sqrt())
    };
    let train = norm.indices(Split::Train);
    let test = norm.indices(Split::Test);
    for f in 0..3 {
        let (m, s) = channel_mean(&train, f);
        assert!(
            m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10,
            "train channel {f}: {m} {s}"
        );
        let (tm, _) = channel_mean(&test, f);
        assert!(tm != 0.0);
    }
    let back = denormalize(&norm, &stats);
    let err = back
        .series
        .iter()
        .zip(&split.series)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "{err:e}");
}

fn dominant_bin(x: &[f64], width: usize, channel: usize, planner: &mut FftPlanner<f64>) -> usize {
    let steps = x.len() / width;
    let mut buf: Vec<Complex<f64>> = (0..steps)
        .map(|t| Complex::new(x[t * width + channel], 0.0))
        .collect();
    planner.plan_fft_forward(steps).process(&mut buf);
    (1..steps / 2)
        .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
        .unwrap()
}

#[test]
fn noiseless_synthetic_classes_are_separable_by_spectrum() {
    let (n, steps, width, classes) = (300, 100, 2, 3);
    let ds = synth_sine_task_with_noise(n, steps, width, classes, 17, 0.0).unwrap();
    let mut planner = FftPlanner::new();
    let mut correct = 0;
    for i in 0..n {
        let x = ds.example_values(i);
        let bins: Vec<f64> = (0..width)
            .map(|f| dominant_bin(x, width, f, &mut planner) as f64)
            .collect();
        let mean_bin = bins.iter().sum::<f64>() / width as f64;
        // Nearest band centre.
        let pred = (0..classes)
            .min_by(|&a, &b| {
                let ca = (synth_band(a).0 + synth_band(a).1) / 2.0;
                let cb = (synth_band(b).0 + synth_band(b).1) / 2.0;
                (mean_bin - ca).abs().total_cmp(&(mean_bin - cb).abs())
            })
            .unwrap();
        correct += usize::from(pred == ds.labels[i]);
    }
    assert_eq!(correct, n);
}

#[test]
fn synthetic_task_is_balanced_and_seeded() {
    let a = synth_sine_task(512, 100, 2, 2, 0).unwrap();
    assert_eq!(a.class_counts(), vec![256, 256]);
    let b = synth_sine_task(512, 100, 2, 2, 0).unwrap();
    assert_eq!(a, b);
    let c = synth_sine_task(512, 100, 2, 2, 1).unwrap();
    assert_ne!(a.series, c.series);
    assert!(a.series.iter().all(|v| v.is_finite()));
}

fn write_fixture(dir: &Path, archive: &str, steps: usize, width: usize, classes: usize) {
    let sub = dir.join(archive);
    std::fs::create_dir_all(&sub).unwrap();
    for (suffix, n) in [("TRAIN", 2usize), ("TEST", 1)] {
        let values = (0..n * steps * width)
            .map(|i| ((i * 7919) % 13) as f64 - 6.0)
            .collect();
        let labels = (0..n).map(|i| i % classes).collect();
        let ds = dataset(n, steps, width, classes, values, labels);
        let mut w =
            BufWriter::new(File::create(sub.join(format!("{archive}_{suffix}.ts"))).unwrap());
        write_ts(&ds, &mut w).unwrap();
    }
}

#[test]
fn corpus_shapes_follow_the_reshape_law() {
    let dir = tempfile::tempdir().unwrap();
    for c in &CORPORA {
        write_fixture(dir.path(), c.archive_name, c.steps, c.width, c.classes);
        let ds = load_named(dir.path(), c.short, false).unwrap();
        assert_eq!(
            (ds.len(), ds.steps, ds.width, ds.dim_tag),
            (3, c.steps, c.width, c.dim_tag)
        );
        // Second load comes from the cache and matches.
        assert_eq!(load_named(dir.path(), c.archive_name, false).unwrap(), ds);
        let ds = split_dataset(&pool_to(&ds, 10), 0).unwrap();
        for conc in [1usize, 8, 16] {
            let spec =
                ReshapeSpec::from_choice(conc, RegimeChoice::Auto, c.dim_tag, (c.steps, c.width))
                    .unwrap();
            let expect = if conc == 1 {
                (c.steps, c.width)
            } else {
                ((c.steps * c.width).div_ceil(conc), conc)
            };
            for s in ds.samples(Split::Train, &spec).unwrap() {
                assert_eq!(s.x.shape(), [expect.0, expect.1], "{} c={conc}", c.short);
                assert_eq!(
                    reshape_inverse(&s.x, &spec).unwrap().shape(),
                    [c.steps, c.width]
                );
            }
        }
    }
}

/// Repeat examples until there are at least `n`, so the split is legal.
fn pool_to(ds: &Dataset, n: usize) -> Dataset {
    let mut out = ds.clone();
    while out.len() < n {
        let i = out.len() % ds.len();
        out.series.extend_from_slice(ds.example_values(i));
        out.lengths.push(ds.lengths[i]);
        out.labels.push(ds.labels[i]);
    }
    out
}

#[test]
fn named_shapes() {
    let eth = ReshapeSpec::from_choice(8, RegimeChoice::Auto, DimTag::Low, (1751, 2)).unwrap();
    assert_eq!(
        (eth.regime, eth.output_steps(), eth.output_width()),
        (Regime::LowDimConcat, 438, 8)
    );
    let hb = ReshapeSpec::from_choice(8, RegimeChoice::Auto, DimTag::High, (405, 61)).unwrap();
    assert_eq!(
        (hb.regime, hb.output_steps(), hb.output_width()),
        (Regime::HighDimFlatten, 3089, 8)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ts_text_round_trip(
        n in 2usize..6,
        steps in 1usize..12,
        width in 1usize..4,
        classes in 2usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n * steps * width).map(|_| r.gen_range(-1e3..1e3)).collect();
        let labels = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let ds = dataset(n, steps, width, classes, values, labels);
        let mut buf = Vec::new();
        write_ts(&ds, &mut buf).unwrap();
        let back = parse_ts(std::str::from_utf8(&buf).unwrap(), "x", false).unwrap();
        prop_assert_eq!(back.series, ds.series);
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert_eq!(back.class_names, ds.class_names);
    }

    #[test]
    fn split_partitions_examples(n in 10usize..400, seed in any::<u64>()) {
        let ds = dataset(n, 1, 1, 2, vec![0.0; n], (0..n).map(|i| i % 2).collect());
        let s = split_dataset(&ds, seed).unwrap();
        let parts: Vec<BTreeSet<usize>> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&p| s.indices(p).into_iter().collect())
            .collect();
        let (a, b, c) = split_oracle(n);
        prop_assert_eq!((parts[0].len(), parts[1].len(), parts[2].len()), (a, b, c));
        let union: BTreeSet<usize> = parts.iter().flatten().copied().collect();
        prop_assert_eq!(union.len(), n);
        prop_assert_eq!(split_dataset(&ds, seed).unwrap().split, s.split);
    }

    #[test]
    fn normalize_round_trip(seed in any::<u64>(), mode_z in any::<bool>()) {
        let ds = synth_sine_task(20, 32, 2, 2, seed % 1000).unwrap();
        let mode = if mode_z { NormMode::PerChannelZscore } else { NormMode::None };
        let (norm, stats) = normalize(&ds, mode).unwrap();
        let back = denormalize(&norm, &stats);
        for (a, b) in back.series.iter().zip(&ds.series) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reshape_round_trip(steps in 1usize..60, width in 1usize..8, c in 1usize..20, high in any::<bool>()) {
        let tag = if high { DimTag::High } else { DimTag::Low };
        let spec = ReshapeSpec::from_choice(c, RegimeChoice::Auto, tag, (steps, width)).unwrap();
        let x = loopseq::Tensor::from_real(&[steps, width], (0..steps * width).map(|i| i as f64 - 3.5).collect()).unwrap();
        let y = reshape_forward(&x, &spec).unwrap();
        prop_assert_eq!(y.real().len(), spec.output_steps() * spec.output_width());
        if c > 1 {
            prop_assert_eq!(y.shape(), &[(steps * width).div_ceil(c), c][..]);
        }
        prop_assert_eq!(reshape_inverse(&y, &spec).unwrap(), x);
    }
}
