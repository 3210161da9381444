use std::path::Path;
use std::process::{Command, Output};

fn loopseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopseq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn reshape_stats_lists_reference_shapes() {
    let o = loopseq(&["reshape-stats", "--concentration", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let row = |name: &str| {
        text.lines()
            .find(|l| l.starts_with(name))
            .unwrap()
            .split_whitespace()
            .collect::<Vec<_>>()
    };
    assert_eq!(row("Ethanol")[4..7], ["low", "438", "8"]);
    assert_eq!(row("Heartbeat")[4..7], ["high", "3089", "8"]);
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn verify_reports_json_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("audit.json");
    let o = loopseq(&[
        "verify",
        "--arch",
        "lrcssm",
        "--seeds",
        "0",
        "--inputs",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let checks = json["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["status"] == "pass"));
    assert!(checks
        .iter()
        .any(|c| c["name"].as_str().unwrap().starts_with("aggregation")));
}

fn small_model_flags() -> Vec<&'static str> {
    vec![
        "--synth-n",
        "40",
        "--synth-steps",
        "32",
        "--state",
        "4",
        "--hidden",
        "4",
        "--epochs",
        "2",
        "--batch-size",
        "16",
    ]
}

#[test]
fn train_writes_result_and_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec![
        "train",
        "--arch",
        "s5",
        "--pattern",
        "ABABAB",
        "--supervision",
        "block",
        "--out",
        out,
    ];
    args.extend(small_model_flags());
    let o = loopseq(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap())
            .unwrap();
    assert_eq!(result["pattern"], "ABABAB");
    assert_eq!(result["epochs_run"], 2);
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(files.iter().any(|f| f.to_string_lossy().ends_with(".ckpt")));
    assert!(files
        .iter()
        .any(|f| f.to_string_lossy().ends_with(".jsonl")));
}

#[test]
fn grid_then_report_from_a_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan_out");
    let plan = dir.path().join("plan.toml");
    std::fs::write(
        &plan,
        format!(
            "datasets = [\"synth\"]\narchs = [\"lru\"]\npatterns = [\"ABCDEF\", \"ABCABC\"]\nsupervisions = [\"final\"]\n\
             lrs = [1e-3]\nseeds = [0]\nout_dir = \"{}\"\n[training]\nstate = 4\nhidden = 4\nmax_epochs = 1\n\
             [synth]\nn = 40\nsteps = 32\n",
            out.display()
        ),
    )
    .unwrap();
    let o = loopseq(&["grid", "--config", plan.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&out.join("results.csv")).is_file());
    let o = loopseq(&["report", "--out", out.to_str().unwrap(), "--stderr-aware"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("ABCABC"));
    assert!(out.join("report.csv").is_file());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let o = loopseq(&["train", "--pattern", "ABBA", "--synth-n", "40"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = loopseq(&[
        "train",
        "--dataset",
        "Heartbeat",
        "--data-dir",
        "/nonexistent",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("timeseriesclassification.com"));
    assert!(!loopseq(&["reshape-stats", "--dataset", "Nope"])
        .status
        .success());
}
