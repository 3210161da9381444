//! Executable audit: periodic-embedding containment, parameter accounting
//! and gradient correctness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{Arch, BlockSizes};
use crate::data::CORPORA;
use crate::error::Result;
use crate::gradcheck::finite_difference_check;
use crate::stack::{
    build_stack, gradient_aggregation_report, Model, ModelSpec, Sample, StackConfig, Supervision,
    AGGREGATION_TOL,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub max_error: f64,
    pub elapsed_seconds: f64,
    pub detail: String,
    /// Minimal configuration reproducing a failure.
    pub repro: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == Status::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }

    pub fn extend(&mut self, other: AuditReport) {
        self.checks.extend(other.checks);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
            };
            let _ = writeln!(
                out,
                "[{tag}] {:<48} max_err={:.3e} {:.2}s  {}",
                c.name, c.max_error, c.elapsed_seconds, c.detail
            );
            if let Some(r) = &c.repro {
                let _ = writeln!(out, "       repro: {r}");
            }
        }
        let fails = self.failures().count();
        let _ = writeln!(out, "{} checks, {} failed", self.checks.len(), fails);
        out
    }

    fn push(
        &mut self,
        name: String,
        ok: bool,
        max_error: f64,
        start: Instant,
        detail: String,
        repro: String,
    ) {
        self.checks.push(CheckResult {
            name,
            status: if ok { Status::Pass } else { Status::Fail },
            max_error,
            elapsed_seconds: start.elapsed().as_secs_f64(),
            detail,
            repro: (!ok).then_some(repro),
        });
    }
}

/// Model and input extents used by the containment audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditShape {
    pub sizes: BlockSizes,
    pub steps: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for AuditShape {
    fn default() -> Self {
        Self {
            sizes: BlockSizes {
                state: 8,
                hidden: 8,
            },
            steps: 24,
            width: 3,
            classes: 3,
        }
    }
}

impl AuditShape {
    fn spec(&self, arch: Arch) -> ModelSpec {
        ModelSpec {
            arch,
            sizes: self.sizes,
            input_width: self.width,
            classes: self.classes,
        }
    }
}

/// Seeded standard-normal inputs of shape `[steps, width]`.
pub fn random_inputs(n: usize, steps: usize, width: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..steps * width)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::from_real(&[steps, width], data).expect("consistent extents")
        })
        .collect()
}

pub fn all_logits(model: &Model, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .map(|x| model.predict_logits(x, x.shape()[0]))
        .collect()
}

/// First position where two logit sets differ in any bit, with the
/// largest absolute difference seen.
pub fn first_bit_mismatch(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<(usize, usize, f64)> {
    let mut first = None;
    let mut worst = 0.0f64;
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        for (k, (x, y)) in ra.iter().zip(rb).enumerate() {
            if x.to_bits() != y.to_bits() {
                worst = worst.max((x - y).abs());
                first.get_or_insert((i, k));
            }
        }
    }
    first.map(|(i, k)| (i, k, worst))
}

fn stores_identical(a: &Model, b: &Model) -> bool {
    a.store.len() == b.store.len()
        && a.store.ids().all(|id| a.store.name(id) == b.store.name(id))
        && a.store
            .flatten()
            .iter()
            .zip(b.store.flatten())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn embed_chain(src: &Model, chain: &[usize]) -> Result<Model> {
    let mut model = src.clone();
    for &m in chain {
        model = model.embed_periodic(m)?;
    }
    Ok(model)
}

/// Periodic embeddings along the divisor chains of 6 reproduce the source
/// logits bit for bit; non-divisor embeddings are rejected; a perturbed
/// embedding is detected.
pub fn audit_containment(
    archs: &[Arch],
    seeds: &[u64],
    n_inputs: usize,
    shape: AuditShape,
) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let chains: [(usize, &[usize]); 6] = [
        (1, &[2, 6]),
        (1, &[3, 6]),
        (1, &[6]),
        (2, &[6]),
        (3, &[6]),
        (1, &[2]),
    ];
    for &arch in archs {
        for &seed in seeds {
            let inputs = random_inputs(n_inputs, shape.steps, shape.width, seed ^ 0xA5A5);
            let repro = format!(
                "arch={arch} seed={seed} P={} H={} T={} w={} C={} inputs={n_inputs}",
                shape.sizes.state, shape.sizes.hidden, shape.steps, shape.width, shape.classes
            );
            let sources: Vec<Model> = [1usize, 2, 3]
                .iter()
                .map(|&m| {
                    build_stack(
                        StackConfig::new(6, m, Supervision::Final)?,
                        shape.spec(arch),
                        seed,
                    )
                })
                .collect::<Result<_>>()?;
            let source_logits: Vec<Vec<Vec<f64>>> = sources
                .iter()
                .map(|s| all_logits(s, &inputs))
                .collect::<Result<_>>()?;

            for (from, chain) in chains {
                let start = Instant::now();
                let idx = [1usize, 2, 3]
                    .iter()
                    .position(|&m| m == from)
                    .expect("known source");
                let embedded = embed_chain(&sources[idx], chain)?;
                let logits = all_logits(&embedded, &inputs)?;
                let mismatch = first_bit_mismatch(&source_logits[idx], &logits);
                let path: Vec<String> = std::iter::once(from)
                    .chain(chain.iter().copied())
                    .map(|m| m.to_string())
                    .collect();
                let (detail, err) = match mismatch {
                    None => (format!("{n_inputs} inputs bit-identical"), 0.0),
                    Some((i, k, worst)) => {
                        (format!("first mismatch at input {i}, logit {k}"), worst)
                    }
                };
                report.push(
                    format!("containment {arch} seed {seed} {}", path.join("->")),
                    mismatch.is_none(),
                    err,
                    start,
                    detail,
                    repro.clone(),
                );
            }

            let start = Instant::now();
            let direct = sources[0].embed_periodic(6)?;
            let via_two = embed_chain(&sources[0], &[2, 6])?;
            let via_three = embed_chain(&sources[0], &[3, 6])?;
            let same = stores_identical(&direct, &via_two) && stores_identical(&direct, &via_three);
            report.push(
                format!("containment {arch} seed {seed} chains agree"),
                same,
                0.0,
                start,
                "1->6, 1->2->6 and 1->3->6 give identical parameters".into(),
                repro.clone(),
            );

            let start = Instant::now();
            let rejected =
                sources[1].embed_periodic(3).is_err() && sources[2].embed_periodic(2).is_err();
            report.push(
                format!("containment {arch} seed {seed} 2<->3 rejected"),
                rejected,
                0.0,
                start,
                "embedding between 2 and 3 unique blocks is refused".into(),
                repro.clone(),
            );

            let start = Instant::now();
            let mut perturbed = sources[0].embed_periodic(6)?;
            let target = perturbed.blocks[5].mixer.w_value;
            perturbed.store.get_mut(target).real_mut()[0] += 1e-9;
            let logits = all_logits(&perturbed, &inputs)?;
            let caught = first_bit_mismatch(&source_logits[0], &logits).is_some();
            report.push(
                format!("containment {arch} seed {seed} perturbation detected"),
                caught,
                0.0,
                start,
                "a 1e-9 change to one embedded weight breaks bit-equality".into(),
                repro,
            );
        }
    }
    Ok(report)
}

/// Lower and upper bounds on `count(6 unique) / count(1 unique)`.
pub const RATIO_BAND: (f64, f64) = (4.5, 6.0);

/// Parameter count is affine in the number of unique blocks for every
/// corpus shape, with the full-depth reduction ratio inside [`RATIO_BAND`].
pub fn audit_param_linear(archs: &[Arch], sizes: BlockSizes) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let start = Instant::now();
    let rejected = StackConfig::new(0, 1, Supervision::Final).is_err();
    report.push(
        "param accounting rejects L = 0".into(),
        rejected,
        0.0,
        start,
        "a stack without layers is not a valid configuration".into(),
        "L=0 m=1".into(),
    );
    for &arch in archs {
        for corpus in &CORPORA {
            let start = Instant::now();
            let spec = ModelSpec {
                arch,
                sizes,
                input_width: corpus.width,
                classes: corpus.classes,
            };
            let mut counts = Vec::new();
            let mut breakdown = None;
            for m in [1usize, 2, 3, 6] {
                let model = build_stack(StackConfig::new(6, m, Supervision::Final)?, spec, 0)?;
                let b = model.param_breakdown();
                counts.push((m, model.count_params(), b));
                breakdown.get_or_insert(b);
            }
            let b = breakdown.expect("four counts");
            let residual = counts
                .iter()
                .map(|&(m, n, _)| (n as i64 - (b.shared_overhead() + m * b.per_block) as i64).abs())
                .max()
                .unwrap_or(0);
            let step = counts[1].1 as i64 - counts[0].1 as i64;
            let affine = residual == 0
                && counts
                    .iter()
                    .all(|&(m, n, _)| n as i64 == counts[0].1 as i64 + (m as i64 - 1) * step);
            let ratio = counts[3].1 as f64 / counts[0].1 as f64;
            let in_band = (RATIO_BAND.0..=RATIO_BAND.1).contains(&ratio);
            report.push(
                format!("param accounting {arch} {}", corpus.short),
                affine && in_band,
                residual as f64,
                start,
                format!(
                    "AAAAAA={} ABCDEF={} ratio={ratio:.3} per_block={} shared={}",
                    counts[0].1,
                    counts[3].1,
                    b.per_block,
                    b.shared_overhead()
                ),
                format!(
                    "arch={arch} P={} H={} w={} C={}",
                    sizes.state, sizes.hidden, corpus.width, corpus.classes
                ),
            );
        }
    }
    Ok(report)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Extents of the gradient audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradShape {
    pub sizes: BlockSizes,
    pub steps: usize,
    pub width: usize,
    pub classes: usize,
    pub batch: usize,
}

impl Default for GradShape {
    fn default() -> Self {
        Self {
            sizes: BlockSizes {
                state: 4,
                hidden: 4,
            },
            steps: 16,
            width: 2,
            classes: 3,
            batch: 2,
        }
    }
}

pub fn grad_batch(shape: &GradShape, seed: u64) -> Vec<Sample> {
    random_inputs(shape.batch, shape.steps, shape.width, seed)
        .into_iter()
        .enumerate()
        .map(|(i, x)| Sample::new(x, i % shape.classes))
        .collect()
}

/// Finite-difference report for the full loss of `model` on `batch`.
/// With `negate`, the analytic gradient is sign-flipped.
pub fn model_fd_report(
    model: &Model,
    batch: &[Sample],
    negate: bool,
) -> Result<crate::gradcheck::FdReport> {
    let (_, grads) = model.batch_loss_and_grads(batch)?;
    let mut analytic = grads.flatten(&model.store);
    if negate {
        analytic.iter_mut().for_each(|g| *g = -*g);
    }
    let params = model.store.flatten();
    let mut probe = model.clone();
    finite_difference_check(
        |p| {
            probe.store.unflatten(p)?;
            probe.batch_loss(batch)
        },
        &params,
        &analytic,
        FD_STEP,
    )
}

/// Finite differences on the full loss for each architecture, supervision
/// and AAAAAA/ABCDEF, plus tied-vs-untied aggregation and a sign-flip
/// sentinel.
pub fn audit_gradients(archs: &[Arch], seed: u64, shape: GradShape) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let batch = grad_batch(&shape, seed ^ 0x5A5A);
    let spec = |arch| ModelSpec {
        arch,
        sizes: shape.sizes,
        input_width: shape.width,
        classes: shape.classes,
    };
    let repro = |arch: Arch, sup: Supervision, pat: &str| {
        format!(
            "arch={arch} supervision={sup} pattern={pat} seed={seed} P={} H={} T={} w={} batch={}",
            shape.sizes.state, shape.sizes.hidden, shape.steps, shape.width, shape.batch
        )
    };
    for &arch in archs {
        for sup in [Supervision::Final, Supervision::Block] {
            for pattern in ["AAAAAA", "ABCDEF"] {
                let start = Instant::now();
                let model =
                    build_stack(StackConfig::from_pattern(pattern, sup)?, spec(arch), seed)?;
                let fd = model_fd_report(&model, &batch, false)?;
                report.push(
                    format!("gradient {arch} {sup} {pattern}"),
                    fd.max_rel_error < FD_TOL,
                    fd.max_rel_error,
                    start,
                    format!(
                        "{} coords, worst #{} fd={:.6e} analytic={:.6e}",
                        fd.coordinates, fd.worst_index, fd.worst_numeric, fd.worst_analytic
                    ),
                    repro(arch, sup, pattern),
                );
            }
            for pattern in ["AAAAAA", "ABABAB", "ABCABC"] {
                let start = Instant::now();
                let model =
                    build_stack(StackConfig::from_pattern(pattern, sup)?, spec(arch), seed)?;
                let agg = gradient_aggregation_report(&model, &batch, sup)?;
                let ok = !agg.all_zero && agg.max_rel_error < AGGREGATION_TOL;
                report.push(
                    format!("aggregation {arch} {sup} {pattern}"),
                    ok,
                    agg.max_rel_error,
                    start,
                    format!("tied vs summed copies, worst at {}", agg.worst_param),
                    repro(arch, sup, pattern),
                );
            }
        }
        let start = Instant::now();
        let model = build_stack(
            StackConfig::from_pattern("AAAAAA", Supervision::Final)?,
            spec(arch),
            seed,
        )?;
        let fd = model_fd_report(&model, &batch, true)?;
        report.push(
            format!("gradient {arch} negated-adjoint sentinel"),
            fd.max_rel_error >= FD_TOL,
            fd.max_rel_error,
            start,
            "a sign-flipped gradient must fail the finite-difference check".into(),
            repro(arch, Supervision::Final, "AAAAAA"),
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatch_reports_first_position() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let mut b = a.clone();
        assert!(first_bit_mismatch(&a, &b).is_none());
        b[1][0] = 3.5;
        assert_eq!(first_bit_mismatch(&a, &b), Some((1, 0, 0.5)));
    }

    #[test]
    fn report_renders_failures_with_repro() {
        let mut r = AuditReport::default();
        r.push(
            "ok".into(),
            true,
            0.0,
            Instant::now(),
            String::new(),
            "x".into(),
        );
        r.push(
            "bad".into(),
            false,
            1.0,
            Instant::now(),
            String::new(),
            "arch=lru".into(),
        );
        assert!(!r.passed());
        let text = r.render_text();
        assert!(text.contains("[FAIL] bad") && text.contains("repro: arch=lru"));
        assert!(r.to_json().unwrap().contains("\"fail\""));
    }
}
