use loopseq::blocks::{Arch, BlockSizes};
use loopseq::data::{synth_sine_task, NormMode};
use loopseq::stack::{build_stack, Model, ModelSpec, StackConfig, Supervision};
use loopseq::train::{
    clip_global_norm, grid_and_seeds, prepare_dataset, train_model, train_one, Adam, RunData,
    RunResult, TrainConfig,
};

fn small(arch: Arch) -> TrainConfig {
    TrainConfig {
        arch,
        sizes: BlockSizes {
            state: 6,
            hidden: 6,
        },
        batch_size: 8,
        max_epochs: 4,
        patience: 10,
        ..TrainConfig::default()
    }
}

fn data(seed: u64) -> loopseq::data::Dataset {
    let ds = synth_sine_task(60, 32, 2, 2, 3).unwrap();
    prepare_dataset(&ds, seed, NormMode::PerChannelZscore).unwrap()
}

#[test]
fn adam_first_step_is_sign_scaled() {
    let g = [0.3, -2.0, 1e-3, 0.0];
    let mut p = vec![1.0; 4];
    let mut adam = Adam::new(4);
    adam.step(&mut p, &g, 0.01).unwrap();
    for (i, &gi) in g.iter().enumerate() {
        let expect = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
        assert!((p[i] - expect).abs() < 1e-15, "{i}: {} vs {expect}", p[i]);
    }
}

#[test]
fn adam_minimizes_a_quadratic_bowl() {
    let (a, c) = ([1.0, 4.0, 0.25], [3.0, -1.0, 0.5]);
    let f = |x: &[f64]| (0..3).map(|i| a[i] * (x[i] - c[i]).powi(2)).sum::<f64>();
    let mut x = vec![0.0; 3];
    let mut adam = Adam::new(3);
    let mut steps = 0;
    while f(&x) >= 1e-6 && steps < 2000 {
        let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect();
        adam.step(&mut x, &g, 0.05).unwrap();
        steps += 1;
    }
    assert!(f(&x) < 1e-6, "f = {} after {steps} steps", f(&x));
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = vec![3.0, 4.0];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    let mut small = vec![0.1, 0.1];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small, vec![0.1, 0.1]);
}

#[test]
fn training_is_deterministic() {
    let ds = data(0);
    for arch in Arch::ALL {
        let cfg = small(arch);
        let a = train_one(&cfg, &ds).unwrap();
        let b = train_one(&cfg, &ds).unwrap();
        let strip = |r: &RunResult| RunResult {
            wall_seconds: 0.0,
            ..r.clone()
        };
        assert_eq!(strip(&a), strip(&b), "{arch}");
        assert!(a.initial_train_loss.is_finite() && !a.diverged);
    }
}

#[test]
fn zero_patience_stops_after_first_stale_epoch() {
    let ds = data(1);
    let cfg = TrainConfig {
        patience: 0,
        max_epochs: 40,
        ..small(Arch::LrcSsm)
    };
    let r = train_one(&cfg, &ds).unwrap();
    assert!(
        r.epochs_run == r.best_epoch + 1 || r.epochs_run == cfg.max_epochs,
        "{r:?}"
    );
    assert_eq!(r.curves.len(), r.epochs_run);
    let best = r.curves.iter().map(|c| c.val_acc).fold(0.0, f64::max);
    assert_eq!(r.best_val_acc, best);
    assert_eq!(r.curves[r.best_epoch - 1].val_acc, best);
}

#[test]
fn run_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        run_dir: Some(dir.path().to_path_buf()),
        ..small(Arch::S5)
    };
    let ds = data(2);
    let r = train_one(&cfg, &ds).unwrap();
    let (log, ckpt) = cfg.run_paths().unwrap();
    let lines = std::fs::read_to_string(log).unwrap().lines().count();
    assert_eq!(lines, r.epochs_run + 1);
    let model = Model::load(&ckpt).unwrap();
    assert_eq!(model.count_params(), r.param_count);
}

#[test]
fn tied_and_embedded_models_start_from_the_same_loss() {
    let ds = data(3);
    for arch in Arch::ALL {
        let cfg = small(arch);
        let spec = cfg.reshape_for(&ds).unwrap();
        let run_data = RunData::from_dataset(&ds, &spec).unwrap();
        let mspec = ModelSpec {
            arch,
            sizes: cfg.sizes,
            input_width: spec.output_width(),
            classes: ds.classes(),
        };
        let tied = build_stack(
            StackConfig::from_pattern("AAAAAA", Supervision::Final).unwrap(),
            mspec,
            0,
        )
        .unwrap();
        let untied = tied.embed_periodic(6).unwrap();
        let one = TrainConfig {
            max_epochs: 1,
            ..cfg
        };
        let (a, _) = train_model(&one, tied, &run_data).unwrap();
        let (b, _) = train_model(&TrainConfig { unique: 6, ..one }, untied, &run_data).unwrap();
        assert_eq!(
            a.initial_train_loss.to_bits(),
            b.initial_train_loss.to_bits(),
            "{arch}"
        );
        assert_eq!(b.pattern, "ABCDEF");
    }
}

#[test]
fn grid_skips_a_diverging_learning_rate() {
    let ds = synth_sine_task(40, 32, 2, 2, 5).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        clip: None,
        ..small(Arch::Lru)
    };
    let g = grid_and_seeds(&cfg, &ds, &[1e300, 1e-3], &[0, 1]).unwrap();
    assert_eq!(g.per_lr[0].diverged_runs, 2);
    assert_eq!(g.per_lr[0].mean_val_acc, 0.0);
    assert_eq!(g.selected_lr, 1e-3);
    assert_eq!(g.test_accs.len(), 2);
    assert!(grid_and_seeds(&cfg, &ds, &[1e300], &[0]).is_err());
}

#[test]
fn grid_ties_keep_the_earlier_rate() {
    let ds = synth_sine_task(40, 32, 2, 2, 5).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..small(Arch::LrcSsm)
    };
    // Both rates are too small to move any prediction, so validation ties.
    let g = grid_and_seeds(&cfg, &ds, &[1e-200, 1e-199], &[0]).unwrap();
    assert_eq!(g.per_lr[0].mean_val_acc, g.per_lr[1].mean_val_acc);
    assert_eq!(g.selected_lr, 1e-200);
    let g = grid_and_seeds(&cfg, &ds, &[1e-199, 1e-200], &[0]).unwrap();
    assert_eq!(g.selected_lr, 1e-199);
}
