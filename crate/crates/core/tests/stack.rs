use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loopseq::blocks::{Arch, BlockSizes};
use loopseq::stack::{
    build_stack, loss_block, loss_final, Model, ModelSpec, Sample, StackConfig, Supervision,
};
use loopseq::tape::Tape;
use loopseq::Tensor;

const SIZES: BlockSizes = BlockSizes {
    state: 4,
    hidden: 5,
};

fn spec(arch: Arch) -> ModelSpec {
    ModelSpec {
        arch,
        sizes: SIZES,
        input_width: 3,
        classes: 3,
    }
}

fn model(arch: Arch, pattern: &str, sup: Supervision, seed: u64) -> Model {
    build_stack(
        StackConfig::from_pattern(pattern, sup).unwrap(),
        spec(arch),
        seed,
    )
    .unwrap()
}

fn series(steps: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_real(
        &[steps, 3],
        (0..steps * 3).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn ce(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn forward_is_the_unrolled_composition() {
    for arch in Arch::ALL {
        let m = model(arch, "ABCABC", Supervision::Final, 3);
        let x = series(20, 1);
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let mut h = m.encoder.forward(&mut tape, &m.store, input).unwrap();
        for layer in 0..6 {
            h = m.blocks[layer % 3]
                .forward(&mut tape, &m.store, h, layer)
                .unwrap();
        }
        let logits = m.head.forward(&mut tape, &m.store, h, 20).unwrap();
        let manual = tape.value(logits).real().to_vec();
        assert_eq!(
            bits(&manual),
            bits(&m.predict_logits(&x, 20).unwrap()),
            "{arch}"
        );
    }
}

#[test]
fn block_loss_is_mean_of_repetition_losses() {
    for pattern in ["AAAAAA", "ABABAB", "ABCABC"] {
        let m = model(Arch::Lru, pattern, Supervision::Block, 5);
        let x = series(16, 2);
        let mut tape = Tape::new();
        let trace = m.forward(&mut tape, &x, 16).unwrap();
        assert_eq!(
            trace.h_reps.len(),
            6 / pattern
                .chars()
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        );
        let mut per_rep = Vec::new();
        for &h in &trace.h_reps {
            let logits = m.head_logits(&mut tape, h, 16).unwrap();
            per_rep.push(ce(tape.value(logits).real(), 1));
        }
        let expect = per_rep.iter().sum::<f64>() / per_rep.len() as f64;
        let block = loss_block(&mut tape, &m, &trace, 1).unwrap();
        let fin = loss_final(&mut tape, &m, &trace, 1).unwrap();
        assert!(
            (tape.value(block).item() - expect).abs() < 1e-12,
            "{pattern}"
        );
        assert!((tape.value(fin).item() - per_rep.last().unwrap()).abs() < 1e-12);
    }
}

#[test]
fn padding_past_valid_len_is_ignored_by_the_head() {
    // Causal recurrences plus a prefix mean make trailing steps irrelevant.
    let m = model(Arch::S5, "ABABAB", Supervision::Final, 8);
    let x = series(12, 4);
    let mut padded = x.real().to_vec();
    padded.extend(std::iter::repeat_n(0.0, 5 * 3));
    let padded = Tensor::from_real(&[17, 3], padded).unwrap();
    let a = m.predict_logits(&x, 12).unwrap();
    let b = m.predict_logits(&padded, 12).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let m = model(arch, "ABCABC", Supervision::Block, 11);
        let embedded = m.embed_periodic(6).unwrap();
        for (tag, src) in [("tied", &m), ("embedded", &embedded)] {
            let path = dir.path().join(format!("{arch}_{tag}.ckpt"));
            src.save(&path).unwrap();
            let back = Model::load(&path).unwrap();
            assert_eq!(back.store, src.store);
            assert_eq!(back.readout_period, src.readout_period);
            assert_eq!(back.stack, src.stack);
            let x = series(9, 6);
            let samples = [Sample::new(x.clone(), 2)];
            assert_eq!(
                back.batch_loss(&samples).unwrap().to_bits(),
                src.batch_loss(&samples).unwrap().to_bits()
            );
        }
    }
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert!(Model::load(&bad).is_err());
}

#[test]
fn construction_is_seed_deterministic() {
    let a = model(Arch::LinOss, "ABCDEF", Supervision::Final, 21);
    let b = model(Arch::LinOss, "ABCDEF", Supervision::Final, 21);
    let c = model(Arch::LinOss, "ABCDEF", Supervision::Final, 22);
    assert_eq!(a.store, b.store);
    assert_ne!(a.store, c.store);
}

#[test]
fn param_breakdown_sums_to_store_size() {
    for arch in Arch::ALL {
        for pattern in ["AAAAAA", "ABABAB", "ABCABC", "ABCDEF"] {
            let m = model(arch, pattern, Supervision::Final, 0);
            let b = m.param_breakdown();
            assert_eq!(b.total(), m.count_params());
            assert_eq!(
                b.shared_overhead() + b.unique_blocks * b.per_block,
                m.count_params()
            );
        }
    }
}

#[test]
fn embedding_keeps_supervision_points() {
    let m = model(Arch::LrcSsm, "AAAAAA", Supervision::Block, 2);
    let e = m.embed_periodic(6).unwrap();
    assert_eq!(e.stack.unique(), 6);
    assert_eq!(e.readout_period, 1);
    let mut tape = Tape::new();
    assert_eq!(
        e.forward(&mut tape, &series(8, 0), 8).unwrap().h_reps.len(),
        6
    );
    let samples = [Sample::new(series(8, 0), 0), Sample::new(series(8, 1), 2)];
    assert_eq!(
        m.batch_loss(&samples).unwrap().to_bits(),
        e.batch_loss(&samples).unwrap().to_bits()
    );
    // A fresh six-block model reads out once.
    let fresh = model(Arch::LrcSsm, "ABCDEF", Supervision::Block, 2);
    assert_eq!(fresh.readout_period, 6);
}

#[test]
fn invalid_embeddings_are_rejected() {
    let m = model(Arch::Lru, "ABABAB", Supervision::Final, 0);
    assert!(m.embed_periodic(3).is_err());
    assert!(m.embed_periodic(0).is_err());
    assert!(m.embed_periodic(4).is_err());
    assert!(model(Arch::Lru, "ABCABC", Supervision::Final, 0)
        .embed_periodic(2)
        .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn periodic_embedding_is_bit_identical(
        arch in prop::sample::select(Arch::ALL.to_vec()),
        chain in prop::sample::select(vec![(1usize, 2usize), (1, 3), (1, 6), (2, 6), (3, 6)]),
        seed in 0u64..1000,
        steps in 1usize..20,
    ) {
        let (m, target) = chain;
        let cfg = StackConfig::new(6, m, Supervision::Final).unwrap();
        let src = build_stack(cfg, spec(arch), seed).unwrap();
        let dst = src.embed_periodic(target).unwrap();
        prop_assert_eq!(dst.stack.unique(), target);
        let x = series(steps, seed ^ 77);
        prop_assert_eq!(
            bits(&src.predict_logits(&x, steps).unwrap()),
            bits(&dst.predict_logits(&x, steps).unwrap())
        );
    }
}
