//! Experiment plans: the dataset by architecture by sharing-pattern grid,
//! its CSV/markdown results and the baseline-relative report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::blocks::{Arch, BlockSizes};
use crate::data::{corpus, dim_tag_for_width, load_named, synth_sine_task, Dataset, NormMode};
use crate::error::{Error, Result};
use crate::reshape::{RegimeChoice, ReshapeSpec};
use crate::stack::{StackConfig, Supervision};
use crate::train::{grid_and_seeds, TrainConfig, LR_GRID};

/// Pattern every cell is compared against.
pub const BASELINE_PATTERN: &str = "ABCDEF";

fn default_patterns() -> Vec<String> {
    ["ABCDEF", "AAAAAA", "ABABAB", "ABCABC"]
        .map(String::from)
        .to_vec()
}

fn default_supervisions() -> Vec<Supervision> {
    vec![Supervision::Final, Supervision::Block]
}

fn default_concentrations() -> Vec<usize> {
    vec![1]
}

fn default_lrs() -> Vec<f64> {
    LR_GRID.to_vec()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingOptions {
    pub state: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Non-positive disables clipping.
    pub clip: f64,
    pub normalize: NormMode,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            state: t.sizes.state,
            hidden: t.sizes.hidden,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            clip: t.clip.unwrap_or(0.0),
            normalize: t.normalize,
        }
    }
}

/// Shape of the built-in `synth` dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub n: usize,
    pub steps: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n: 512,
            steps: 100,
            width: 2,
            classes: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub datasets: Vec<String>,
    pub archs: Vec<Arch>,
    #[serde(default = "default_patterns")]
    pub patterns: Vec<String>,
    #[serde(default = "default_supervisions")]
    pub supervisions: Vec<Supervision>,
    #[serde(default = "default_concentrations")]
    pub concentrations: Vec<usize>,
    #[serde(default = "default_regime")]
    pub regime: RegimeChoice,
    #[serde(default = "default_lrs")]
    pub lrs: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub pad_ragged: bool,
    #[serde(default)]
    pub training: TrainingOptions,
    #[serde(default)]
    pub synth: SynthOptions,
}

fn default_regime() -> RegimeChoice {
    RegimeChoice::Auto
}

/// One table cell to run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub dataset: String,
    pub arch: Arch,
    pub pattern: String,
    pub supervision: Supervision,
    pub concentration: usize,
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid plan: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Check every field before anything runs.
    pub fn validate(&self) -> Result<()> {
        let empty = |what: &str| Error::Config(format!("plan lists no {what}"));
        if self.datasets.is_empty() {
            return Err(empty("datasets"));
        }
        if self.archs.is_empty() {
            return Err(empty("architectures"));
        }
        if self.patterns.is_empty() {
            return Err(empty("patterns"));
        }
        if self.supervisions.is_empty() {
            return Err(empty("supervision modes"));
        }
        if self.concentrations.is_empty() {
            return Err(empty("concentration factors"));
        }
        if self.lrs.is_empty() {
            return Err(empty("learning rates"));
        }
        if self.seeds.is_empty() {
            return Err(empty("seeds"));
        }
        for name in &self.datasets {
            if name != "synth" && corpus(name).is_none() {
                return Err(Error::Config(format!(
                    "unknown dataset `{name}` (expected synth, Ethanol, Worms, SCP1, SCP2, Heartbeat or Motor)"
                )));
            }
        }
        for p in &self.patterns {
            StackConfig::from_pattern(p, Supervision::Final)?;
        }
        for &c in &self.concentrations {
            if c == 0 {
                return Err(Error::Config(
                    "concentration factor must be positive".into(),
                ));
            }
        }
        for name in &self.datasets {
            let (shape, tag) = match corpus(name) {
                Some(c) => ((c.steps, c.width), c.dim_tag),
                None => (
                    (self.synth.steps, self.synth.width),
                    dim_tag_for_width(self.synth.width),
                ),
            };
            for &c in &self.concentrations {
                ReshapeSpec::from_choice(c, self.regime, tag, shape)?;
            }
        }
        for cell in self.cells() {
            self.train_config(&cell)?.validate()?;
        }
        Ok(())
    }

    /// Cells in table order. The independent baseline is run once, with
    /// final supervision, per dataset/c/arch.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for dataset in &self.datasets {
            for &concentration in &self.concentrations {
                for &arch in &self.archs {
                    for pattern in &self.patterns {
                        let sups: Vec<Supervision> = if pattern == BASELINE_PATTERN {
                            vec![Supervision::Final]
                        } else {
                            self.supervisions.clone()
                        };
                        for supervision in sups {
                            cells.push(Cell {
                                dataset: dataset.clone(),
                                arch,
                                pattern: pattern.clone(),
                                supervision,
                                concentration,
                            });
                        }
                    }
                }
            }
        }
        cells
    }

    pub fn train_config(&self, cell: &Cell) -> Result<TrainConfig> {
        let stack = StackConfig::from_pattern(&cell.pattern, cell.supervision)?;
        let t = &self.training;
        Ok(TrainConfig {
            arch: cell.arch,
            sizes: BlockSizes {
                state: t.state,
                hidden: t.hidden,
            },
            layers: stack.layers(),
            unique: stack.unique(),
            supervision: cell.supervision,
            concentration: cell.concentration,
            regime: self.regime,
            normalize: t.normalize,
            lr: self.lrs[0],
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            clip: (t.clip > 0.0).then_some(t.clip),
            seed: self.seeds[0],
            run_dir: None,
        })
    }

    /// Short content hash of everything that determines a cell's result.
    pub fn cell_hash(&self, cell: &Cell) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            cell: &'a Cell,
            config: TrainConfig,
            lrs: &'a [f64],
            seeds: &'a [u64],
            synth: Option<&'a SynthOptions>,
        }
        let key = Key {
            cell,
            config: self.train_config(cell)?,
            lrs: &self.lrs,
            seeds: &self.seeds,
            synth: (cell.dataset == "synth").then_some(&self.synth),
        };
        let digest = Sha256::digest(serde_json::to_vec(&key)?);
        Ok(hex::encode(&digest[..6]))
    }

    fn load_dataset(&self, name: &str) -> Result<Dataset> {
        if name == "synth" {
            let s = &self.synth;
            synth_sine_task(s.n, s.steps, s.width, s.classes, s.seed)
        } else {
            load_named(&self.data_dir, name, self.pad_ragged)
        }
    }
}

/// One row of `results.csv`. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub arch: Arch,
    pub pattern: String,
    pub supervision: Supervision,
    pub c: usize,
    pub lr: f64,
    pub mean: f64,
    pub std: f64,
    /// Per-seed test accuracies at the selected lr, `;`-separated.
    pub accs: String,
    pub params: usize,
    pub seconds: f64,
    pub config_hash: String,
}

impl ResultRow {
    pub fn accs(&self) -> Vec<f64> {
        self.accs
            .split(';')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect()
    }
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_MD: &str = "results.md";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

/// Validate, load every dataset, then run each cell's lr by seed grid.
/// Writes `results.csv`, `results.md`, `runs.jsonl` and per-run logs.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<ResultRow>> {
    plan.validate()?;
    let mut datasets = BTreeMap::new();
    for name in &plan.datasets {
        datasets.insert(name.clone(), plan.load_dataset(name)?);
    }
    fs::create_dir_all(&plan.out_dir)?;
    let mut runs_log = String::new();
    let mut rows = Vec::new();
    for cell in plan.cells() {
        let ds = &datasets[&cell.dataset];
        let hash = plan.cell_hash(&cell)?;
        let mut template = plan.train_config(&cell)?;
        template.run_dir = Some(plan.out_dir.join("runs").join(&hash));
        log::info!(
            "cell {} {} {} {} c={} ({hash})",
            cell.dataset,
            cell.arch,
            cell.pattern,
            cell.supervision,
            cell.concentration
        );
        let grid = grid_and_seeds(&template, ds, &plan.lrs, &plan.seeds)?;
        for lr in &grid.per_lr {
            for run in &lr.runs {
                runs_log.push_str(&serde_json::to_string(&(&hash, run))?);
                runs_log.push('\n');
            }
        }
        rows.push(ResultRow {
            dataset: cell.dataset.clone(),
            arch: cell.arch,
            pattern: cell.pattern.clone(),
            supervision: cell.supervision,
            c: cell.concentration,
            lr: grid.selected_lr,
            mean: 100.0 * grid.mean_test_acc,
            std: 100.0 * grid.std_test_acc,
            accs: grid
                .test_accs
                .iter()
                .map(|a| format!("{}", 100.0 * a))
                .collect::<Vec<_>>()
                .join(";"),
            params: grid.param_count,
            seconds: grid.wall_seconds,
            config_hash: hash,
        });
    }
    write_rows(&plan.out_dir.join(RESULTS_CSV), &rows)?;
    fs::write(plan.out_dir.join("runs.jsonl"), runs_log)?;
    fs::write(plan.out_dir.join(RESULTS_MD), render_markdown(&rows, false))?;
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Plain,
    Bold,
    Underline,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Equal at two decimals is underlined; otherwise strictly above is bold.
pub fn mark(mean: f64, baseline: f64) -> Mark {
    if round2(mean) == round2(baseline) {
        Mark::Underline
    } else if mean > baseline {
        Mark::Bold
    } else {
        Mark::Plain
    }
}

/// Two-sided Welch t-test p-value; `None` with fewer than two samples per
/// side or zero variance on both.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        return None;
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(2.0 * (1.0 - dist.cdf(t.abs())))
}

type GroupKey = (String, usize, Arch);

fn baseline_index(rows: &[ResultRow]) -> BTreeMap<GroupKey, &ResultRow> {
    rows.iter()
        .filter(|r| r.pattern == BASELINE_PATTERN)
        .map(|r| ((r.dataset.clone(), r.c, r.arch), r))
        .collect()
}

fn column_label(r: &ResultRow) -> String {
    if r.pattern == BASELINE_PATTERN {
        format!("{} (baseline)", r.pattern)
    } else {
        format!("{} {}", r.pattern, r.supervision)
    }
}

/// Markdown tables, one per dataset and c, rows per architecture, the
/// baseline column first. A pure function of `rows`.
pub fn render_markdown(rows: &[ResultRow], welch: bool) -> String {
    let baselines = baseline_index(rows);
    let mut out = String::new();
    let mut groups: Vec<(String, usize)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.dataset.clone(), r.c)) {
            groups.push((r.dataset.clone(), r.c));
        }
    }
    for (dataset, c) in groups {
        let in_group: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.dataset == dataset && r.c == c)
            .collect();
        let mut columns: Vec<String> = Vec::new();
        for r in &in_group {
            let label = column_label(r);
            if !columns.contains(&label) {
                columns.push(label);
            }
        }
        columns.sort_by_key(|l| !l.ends_with("(baseline)"));
        let _ = writeln!(out, "## {dataset} (c = {c})\n");
        let _ = writeln!(out, "| Arch | {} |", columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(columns.len()));
        let mut archs: Vec<Arch> = Vec::new();
        for r in &in_group {
            if !archs.contains(&r.arch) {
                archs.push(r.arch);
            }
        }
        for arch in archs {
            let base = baselines.get(&(dataset.clone(), c, arch));
            if base.is_none() {
                log::warn!("no {BASELINE_PATTERN} baseline for {dataset}/{arch}/c={c}; cells left unmarked");
            }
            let cells: Vec<String> = columns
                .iter()
                .map(|col| {
                    let Some(r) = in_group
                        .iter()
                        .find(|r| r.arch == arch && &column_label(r) == col)
                    else {
                        return "-".to_string();
                    };
                    let text = format!("{:.2} ± {:.2}", r.mean, r.std);
                    let text = match base {
                        Some(b) if r.pattern != BASELINE_PATTERN => match mark(r.mean, b.mean) {
                            Mark::Bold => format!("**{text}**"),
                            Mark::Underline => format!("<u>{text}</u>"),
                            Mark::Plain => text,
                        },
                        _ => text,
                    };
                    match (welch, base) {
                        (true, Some(b)) if r.pattern != BASELINE_PATTERN => {
                            match welch_p_value(&r.accs(), &b.accs()) {
                                Some(p) => format!("{text} (p={p:.3})"),
                                None => format!("{text} (p=n/a)"),
                            }
                        }
                        _ => text,
                    }
                })
                .collect();
            let _ = writeln!(out, "| {arch} | {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    out.push_str(
        "Bold: mean above the baseline. Underlined: equal to the baseline at two decimals.\n",
    );
    if welch {
        out.push_str("p: two-sided Welch t-test against the baseline seeds (diagnostic only).\n");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    dataset: String,
    arch: Arch,
    pattern: String,
    supervision: Supervision,
    c: usize,
    mean: f64,
    std: f64,
    baseline_mean: Option<f64>,
    mark: Mark,
    welch_p: Option<f64>,
}

/// Read `results.csv` from `dir` and write `report.md` and `report.csv`.
pub fn report(dir: &Path, welch: bool) -> Result<String> {
    let rows = read_rows(&dir.join(RESULTS_CSV))?;
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{} has no result rows",
            dir.join(RESULTS_CSV).display()
        )));
    }
    let baselines = baseline_index(&rows);
    let markdown = render_markdown(&rows, welch);
    fs::write(dir.join(REPORT_MD), &markdown)?;
    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV)).map_err(csv_err)?;
    for r in &rows {
        let base = baselines.get(&(r.dataset.clone(), r.c, r.arch));
        let is_base = r.pattern == BASELINE_PATTERN;
        w.serialize(ReportRow {
            dataset: r.dataset.clone(),
            arch: r.arch,
            pattern: r.pattern.clone(),
            supervision: r.supervision,
            c: r.c,
            mean: r.mean,
            std: r.std,
            baseline_mean: base.map(|b| b.mean),
            mark: match base {
                Some(b) if !is_base => mark(r.mean, b.mean),
                _ => Mark::Plain,
            },
            welch_p: match base {
                Some(b) if welch && !is_base => welch_p_value(&r.accs(), &b.accs()),
                _ => None,
            },
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(markdown)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> ExperimentPlan {
        ExperimentPlan::from_toml(
            r#"
            datasets = ["synth"]
            archs = ["lru"]
            out_dir = "out"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn default_plan_has_seven_cells_per_arch() {
        let p = plan();
        p.validate().unwrap();
        let cells = p.cells();
        assert_eq!(cells.len(), 7);
        assert_eq!(
            cells
                .iter()
                .filter(|c| c.pattern == BASELINE_PATTERN)
                .count(),
            1
        );
    }

    #[test]
    fn empty_and_invalid_plans_are_rejected() {
        let mut p = plan();
        p.datasets.clear();
        assert!(p.validate().is_err());
        let mut p = plan();
        p.patterns = vec!["AABBCC".into()];
        assert!(p.validate().is_err());
        let mut p = plan();
        p.datasets = vec!["Nope".into()];
        assert!(p.validate().is_err());
        let mut p = plan();
        p.regime = RegimeChoice::Low;
        p.concentrations = vec![7];
        assert!(p.validate().is_err());
        assert!(ExperimentPlan::from_toml("datasets = []\nbogus = 1").is_err());
    }

    #[test]
    fn marks() {
        assert_eq!(mark(75.16, 74.19), Mark::Bold);
        assert_eq!(mark(74.19, 74.19), Mark::Underline);
        assert_eq!(mark(74.194, 74.191), Mark::Underline);
        assert_eq!(mark(70.0, 74.19), Mark::Plain);
    }

    #[test]
    fn hashes_distinguish_cells() {
        let p = plan();
        let cells = p.cells();
        let a = p.cell_hash(&cells[0]).unwrap();
        assert_eq!(a, p.cell_hash(&cells[0]).unwrap());
        assert_ne!(a, p.cell_hash(&cells[1]).unwrap());
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn welch_matches_reference_value() {
        // Reference from scipy.stats.ttest_ind(equal_var=False).
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 3.0, 4.0, 5.0];
        let p = welch_p_value(&a, &b).unwrap();
        assert!((p - 0.3153335962012296).abs() < 1e-9, "{p}");
        assert!(welch_p_value(&[1.0], &b).is_none());
    }
}
