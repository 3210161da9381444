use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use loopseq::blocks::{Arch, BlockSizes};
use loopseq::data::{corpus, load_named, synth_sine_task, Dataset, NormMode, CORPORA};
use loopseq::experiment::{report, run_plan, ExperimentPlan};
use loopseq::reshape::{RegimeChoice, ReshapeSpec};
use loopseq::stack::{StackConfig, Supervision};
use loopseq::train::{grid_and_seeds, prepare_dataset, train_one, TrainConfig, LR_GRID};
use loopseq::verify::{
    audit_containment, audit_gradients, audit_param_linear, AuditShape, GradShape,
};

#[derive(Parser)]
#[command(
    name = "loopseq",
    version,
    about = "Depth-recurrent SSM stacks for time-series classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration with one seed.
    Train(TrainArgs),
    /// Learning-rate by seed grid for one configuration, or a full plan
    /// with --config.
    Grid(GridArgs),
    /// Run the containment, accounting and gradient audit.
    Verify(VerifyArgs),
    /// Print reshaped input shapes for the benchmark corpora.
    ReshapeStats(ReshapeArgs),
    /// Mark results against the baseline and write report.md/report.csv.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// synth or one of Ethanol, Worms, SCP1, SCP2, Heartbeat, Motor.
    #[arg(long, default_value = "synth")]
    dataset: String,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Zero-pad series of unequal length instead of rejecting them.
    #[arg(long)]
    pad_ragged: bool,
    #[arg(long, default_value_t = 512)]
    synth_n: usize,
    #[arg(long, default_value_t = 100)]
    synth_steps: usize,
    #[arg(long, default_value_t = 2)]
    synth_width: usize,
    #[arg(long, default_value_t = 2)]
    synth_classes: usize,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        Ok(if self.dataset == "synth" {
            synth_sine_task(
                self.synth_n,
                self.synth_steps,
                self.synth_width,
                self.synth_classes,
                0,
            )?
        } else {
            load_named(&self.data_dir, &self.dataset, self.pad_ragged)?
        })
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "lru")]
    arch: Arch,
    /// Periodic sharing pattern such as AAAAAA, ABABAB, ABCABC, ABCDEF.
    #[arg(long, conflicts_with_all = ["layers", "unique"])]
    pattern: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    unique: Option<usize>,
    #[arg(long, default_value = "final")]
    supervision: Supervision,
    #[arg(long, default_value_t = 1)]
    concentration: usize,
    #[arg(long, default_value = "auto")]
    regime: RegimeChoice,
    #[arg(long, default_value = "zscore")]
    normalize: NormMode,
    #[arg(long, default_value_t = 64)]
    state: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long)]
    no_clip: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<TrainConfig> {
        let stack = match &self.pattern {
            Some(p) => StackConfig::from_pattern(p, self.supervision)?,
            None => StackConfig::new(
                self.layers.unwrap_or(6),
                self.unique.unwrap_or(1),
                self.supervision,
            )?,
        };
        let cfg = TrainConfig {
            arch: self.arch,
            sizes: BlockSizes {
                state: self.state,
                hidden: self.hidden,
            },
            layers: stack.layers(),
            unique: stack.unique(),
            supervision: self.supervision,
            concentration: self.concentration,
            regime: self.regime,
            normalize: self.normalize,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            clip: (!self.no_clip).then_some(self.clip),
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the epoch log, checkpoint and result record.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// Experiment plan (TOML); other flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "lr", value_delimiter = ',')]
    lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_delimiter = ',', default_value = "lru,s5,linoss,lrcssm")]
    arch: Vec<Arch>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Random inputs per containment check.
    #[arg(long, default_value_t = 100)]
    inputs: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReshapeArgs {
    /// A corpus name, or `all`.
    #[arg(long, default_value = "all")]
    dataset: String,
    #[arg(long, value_delimiter = ',', default_value = "1,8,16")]
    concentration: Vec<usize>,
    #[arg(long, default_value = "auto")]
    regime: RegimeChoice,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding results.csv.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Add a Welch t-test p-value against the baseline seeds.
    #[arg(long)]
    stderr_aware: bool,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = args.model.config()?;
    cfg.lr = args.lr;
    cfg.seed = args.seed;
    cfg.run_dir = Some(args.out.clone());
    let ds = prepare_dataset(&args.data.load()?, args.seed, cfg.normalize)?;
    let result = train_one(&cfg, &ds)?;
    write_json(&args.out.join("result.json"), &result)?;
    println!(
        "{} {} {}: best val {:.2}% (epoch {}), test {:.2}%, {} params, {:.1}s{}",
        result.arch,
        result.pattern,
        result.supervision,
        100.0 * result.best_val_acc,
        result.best_epoch,
        100.0 * result.test_acc_at_best_val,
        result.param_count,
        result.wall_seconds,
        if result.diverged { " (diverged)" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

fn grid(args: GridArgs) -> Result<ExitCode> {
    if let Some(path) = &args.config {
        let plan = ExperimentPlan::load(path)?;
        let rows = run_plan(&plan)?;
        let markdown = report(&plan.out_dir, false)?;
        println!("{markdown}");
        println!("{} cells written to {}", rows.len(), plan.out_dir.display());
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = args.model.config()?;
    let lrs = if args.lrs.is_empty() {
        LR_GRID.to_vec()
    } else {
        args.lrs.clone()
    };
    let mut template = cfg;
    template.run_dir = Some(args.out.clone());
    let result = grid_and_seeds(&template, &args.data.load()?, &lrs, &args.seeds)?;
    write_json(&args.out.join("grid.json"), &result)?;
    println!(
        "selected lr {:e}: test {:.2} ± {:.2} over {} seeds",
        result.selected_lr,
        100.0 * result.mean_test_acc,
        100.0 * result.std_test_acc,
        result.test_accs.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn verify(args: VerifyArgs) -> Result<ExitCode> {
    let mut report =
        audit_containment(&args.arch, &args.seeds, args.inputs, AuditShape::default())?;
    report.extend(audit_param_linear(&args.arch, BlockSizes::default())?);
    report.extend(audit_gradients(
        &args.arch,
        args.seeds.first().copied().unwrap_or(0),
        GradShape::default(),
    )?);
    eprint!("{}", report.render_text());
    let json = report.to_json()?;
    match &args.out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn reshape_stats(args: ReshapeArgs) -> Result<ExitCode> {
    let corpora: Vec<_> = if args.dataset == "all" {
        CORPORA.iter().collect()
    } else {
        match corpus(&args.dataset) {
            Some(c) => vec![c],
            None => bail!("unknown corpus `{}`", args.dataset),
        }
    };
    println!(
        "{:<10} {:>6} {:>3} {:>4} {:<9} {:>7} {:>5} {:>4}",
        "dataset", "T", "w", "c", "regime", "rows", "width", "pad"
    );
    for c in corpora {
        for &conc in &args.concentration {
            let spec = ReshapeSpec::from_choice(conc, args.regime, c.dim_tag, (c.steps, c.width))?;
            println!(
                "{:<10} {:>6} {:>3} {:>4} {:<9} {:>7} {:>5} {:>4}",
                c.short,
                c.steps,
                c.width,
                conc,
                spec.regime,
                spec.output_steps(),
                spec.output_width(),
                spec.pad_count()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Grid(a) => grid(a),
        Command::Verify(a) => verify(a),
        Command::ReshapeStats(a) => reshape_stats(a),
        Command::Report(a) => {
            println!("{}", report(&a.out, a.stderr_aware)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
