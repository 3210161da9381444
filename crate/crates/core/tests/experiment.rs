use std::path::Path;

use loopseq::experiment::{
    read_rows, report, run_plan, ExperimentPlan, REPORT_CSV, REPORT_MD, RESULTS_CSV, RESULTS_MD,
};

#[test]
fn shipped_plan_parses_and_validates() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/plan.toml");
    let plan = ExperimentPlan::load(&path).unwrap();
    plan.validate().unwrap();
    // 2 datasets x 2 archs x (1 baseline + 3 shared patterns x 2 supervisions).
    assert_eq!(plan.cells().len(), 2 * 2 * 7);
    for cell in plan.cells() {
        assert_eq!(plan.train_config(&cell).unwrap().sizes.hidden, 64);
    }
}

#[test]
fn tiny_plan_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = format!(
        r#"
datasets = ["synth"]
archs = ["lrcssm"]
patterns = ["ABCDEF", "AAAAAA"]
supervisions = ["final", "block"]
lrs = [1e-3]
seeds = [0, 1]
out_dir = "{}"

[training]
state = 4
hidden = 4
batch_size = 16
max_epochs = 1
patience = 1

[synth]
n = 40
steps = 32
"#,
        out.display()
    );
    let plan = ExperimentPlan::from_toml(&text).unwrap();
    let rows = run_plan(&plan).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(read_rows(&out.join(RESULTS_CSV)).unwrap(), rows);
    for row in &rows {
        assert_eq!(row.accs().len(), 2);
        assert_eq!(row.config_hash.len(), 12);
    }
    let md = report(&out, true).unwrap();
    assert!(md.contains("ABCDEF"));
    for f in [RESULTS_MD, REPORT_MD, REPORT_CSV, "runs.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let text = "datasets = [\"synth\"]\narchs = [\"lru\"]\nout_dir = \"x\"\nlearning_rate = 1.0\n";
    assert!(ExperimentPlan::from_toml(text).is_err());
}
