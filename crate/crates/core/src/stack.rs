//! Depth composition of blocks under periodic parameter sharing.
//!
//! A stack has `L` layer positions served by `m` unique blocks, `m | L`.
//! Layer `j` (0-based) applies block `j mod m`, so the blocks repeat
//! `r = L / m` times: `m = L` is the independent stack (`ABCDEF`), `m = 1`
//! the fully looped one (`AAAAAA`). The representation after each full
//! repetition is recorded for block-wise supervision.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Arch, BlockParams, BlockSizes, Encoder, Head};
use crate::error::{Error, Result};
use crate::params::{read_checkpoint, write_checkpoint, Gradients, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Loss on the final repetition only.
    Final,
    /// Mean loss over all repetitions through one shared head.
    Block,
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Supervision::Final => "final",
            Supervision::Block => "block",
        })
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "final" => Ok(Supervision::Final),
            "block" => Ok(Supervision::Block),
            other => Err(Error::Config(format!(
                "unknown supervision `{other}` (expected final or block)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackConfig {
    layers: usize,
    unique: usize,
    pub supervision: Supervision,
}

impl StackConfig {
    pub fn new(layers: usize, unique: usize, supervision: Supervision) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("a stack needs at least one layer".into()));
        }
        if unique == 0 || !layers.is_multiple_of(unique) {
            return Err(Error::Config(format!(
                "{unique} unique blocks do not divide {layers} layers"
            )));
        }
        if unique > 26 {
            return Err(Error::Config(
                "at most 26 unique blocks are supported".into(),
            ));
        }
        Ok(Self {
            layers,
            unique,
            supervision,
        })
    }

    /// Parse a periodic pattern such as `ABABAB`.
    pub fn from_pattern(pattern: &str, supervision: Supervision) -> Result<Self> {
        let letters: Vec<char> = pattern.trim().chars().collect();
        if letters.is_empty() {
            return Err(Error::Config("empty sharing pattern".into()));
        }
        let mut distinct: Vec<char> = letters.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let unique = distinct.len();
        let periodic = letters
            .iter()
            .enumerate()
            .all(|(j, &ch)| ch == (b'A' + (j % unique) as u8) as char);
        if !periodic || !letters.len().is_multiple_of(unique) {
            return Err(Error::Config(format!(
                "pattern `{pattern}` is not a periodic repetition of A, B, C, ..."
            )));
        }
        Self::new(letters.len(), unique, supervision)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn unique(&self) -> usize {
        self.unique
    }

    pub fn repetitions(&self) -> usize {
        self.layers / self.unique
    }

    pub fn pattern(&self) -> String {
        (0..self.layers)
            .map(|j| (b'A' + (j % self.unique) as u8) as char)
            .collect()
    }

    /// Unique block applied at layer position `layer`.
    pub fn block_index(&self, layer: usize) -> usize {
        layer % self.unique
    }

    pub fn with_unique(&self, unique: usize) -> Result<Self> {
        Self::new(self.layers, unique, self.supervision)
    }
}

/// Everything besides sharing that fixes a model's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub sizes: BlockSizes,
    pub input_width: usize,
    pub classes: usize,
}

/// One model input: a `[T, w]` series, the number of real (unpadded)
/// steps, and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub valid_len: usize,
    pub label: usize,
}

impl Sample {
    pub fn new(x: Tensor, label: usize) -> Self {
        let valid_len = x.shape()[0];
        Self {
            x,
            valid_len,
            label,
        }
    }
}

/// Representations after each full repetition of the unique blocks.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub h_reps: Vec<Var>,
    pub valid_len: usize,
}

impl ForwardTrace {
    pub fn output(&self) -> Var {
        *self
            .h_reps
            .last()
            .expect("trace has at least one repetition")
    }
}

/// Scalar counts of each model component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub head: usize,
    pub per_block: usize,
    pub unique_blocks: usize,
}

impl ParamBreakdown {
    /// Parameters outside the shared blocks (encoder and head).
    pub fn shared_overhead(&self) -> usize {
        self.encoder + self.head
    }

    pub fn total(&self) -> usize {
        self.shared_overhead() + self.unique_blocks * self.per_block
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub stack: StackConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub blocks: Vec<BlockParams>,
    pub head: Head,
    /// Layers between recorded representations; `m` for a freshly built
    /// model, inherited by periodic embeddings so supervision is unchanged.
    pub readout_period: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    layers: usize,
    unique: usize,
    supervision: Supervision,
    readout_period: usize,
}

/// Allocate a model with `cfg.unique()` blocks, initialized from `seed`.
pub fn build_stack(cfg: StackConfig, spec: ModelSpec, seed: u64) -> Result<Model> {
    if spec.input_width == 0 || spec.classes < 2 {
        return Err(Error::Config(format!(
            "input width {} / class count {} invalid",
            spec.input_width, spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = Encoder::init(&mut store, spec.input_width, spec.sizes.hidden, &mut rng);
    let blocks = (0..cfg.unique())
        .map(|i| {
            BlockParams::init(
                &mut store,
                &format!("blocks.{i}"),
                spec.arch,
                spec.sizes,
                &mut rng,
            )
        })
        .collect();
    let head = Head::init(&mut store, spec.sizes.hidden, spec.classes, &mut rng);
    Ok(Model {
        spec,
        stack: cfg,
        store,
        encoder,
        blocks,
        head,
        readout_period: cfg.unique(),
    })
}

impl Model {
    /// Encoder once, then `L` block applications; records `h^(j)` after
    /// every `readout_period` layers.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, valid_len: usize) -> Result<ForwardTrace> {
        let input = tape.constant(x.clone());
        let mut h = self.encoder.forward(tape, &self.store, input)?;
        let mut h_reps = Vec::with_capacity(self.stack.layers() / self.readout_period);
        for layer in 0..self.stack.layers() {
            let block = &self.blocks[self.stack.block_index(layer)];
            h = block.forward(tape, &self.store, h, layer)?;
            if (layer + 1) % self.readout_period == 0 {
                h_reps.push(h);
            }
        }
        Ok(ForwardTrace { h_reps, valid_len })
    }

    pub fn head_logits(&self, tape: &mut Tape, h: Var, valid_len: usize) -> Result<Var> {
        self.head.forward(tape, &self.store, h, valid_len)
    }

    /// Logits of the final representation for one input.
    pub fn predict_logits(&self, x: &Tensor, valid_len: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, x, valid_len)?;
        let logits = self.head_logits(&mut tape, trace.output(), valid_len)?;
        Ok(tape.value(logits).real().to_vec())
    }

    /// Loss of one trace under the model's configured supervision.
    pub fn loss(&self, tape: &mut Tape, trace: &ForwardTrace, label: usize) -> Result<Var> {
        match self.stack.supervision {
            Supervision::Final => loss_final(tape, self, trace, label),
            Supervision::Block => loss_block(tape, self, trace, label),
        }
    }

    /// Mean loss over `samples` and its gradient.
    pub fn batch_loss_and_grads(&self, samples: &[Sample]) -> Result<(f64, Gradients)> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total = 0.0;
        let mut grads = Gradients::new();
        for s in samples {
            let mut tape = Tape::new();
            let trace = self.forward(&mut tape, &s.x, s.valid_len)?;
            let loss = self.loss(&mut tape, &trace, s.label)?;
            total += tape.value(loss).item();
            grads.accumulate(&tape.backward(loss)?);
        }
        let inv = 1.0 / samples.len() as f64;
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    /// Mean loss over `samples` without building gradients.
    pub fn batch_loss(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let mut tape = Tape::new();
            let trace = self.forward(&mut tape, &s.x, s.valid_len)?;
            let loss = self.loss(&mut tape, &trace, s.label)?;
            total += tape.value(loss).item();
        }
        Ok(total / samples.len() as f64)
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            encoder: self.encoder.count_params(),
            head: self.head.count_params(),
            per_block: self.blocks[0].count_params(&self.store),
            unique_blocks: self.blocks.len(),
        }
    }

    /// Learnable scalars in the whole model.
    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Re-express this model with `m_target` unique blocks by assigning
    /// block `j mod m` to slot `j`. The result computes the same function
    /// with the same evaluation order, hence bit-identical outputs, and keeps
    /// the source's supervision points.
    pub fn embed_periodic(&self, m_target: usize) -> Result<Model> {
        let m = self.stack.unique();
        let layers = self.stack.layers();
        if m_target == 0 || !m_target.is_multiple_of(m) || !layers.is_multiple_of(m_target) {
            return Err(Error::Config(format!(
                "cannot embed {m} unique blocks into {m_target}: requires {m} | {m_target} | {layers}"
            )));
        }
        let mut store = ParamStore::new();
        let copy_id =
            |store: &mut ParamStore, id| store.add(self.store.name(id), self.store.get(id).clone());
        let encoder = Encoder {
            weight: copy_id(&mut store, self.encoder.weight),
            bias: copy_id(&mut store, self.encoder.bias),
            ..self.encoder.clone()
        };
        let blocks = (0..m_target)
            .map(|j| self.blocks[j % m].copy_into(&self.store, &mut store, &format!("blocks.{j}")))
            .collect();
        let head = Head {
            weight: copy_id(&mut store, self.head.weight),
            bias: copy_id(&mut store, self.head.bias),
            ..self.head.clone()
        };
        Ok(Model {
            spec: self.spec,
            stack: self.stack.with_unique(m_target)?,
            store,
            encoder,
            blocks,
            head,
            readout_period: self.readout_period,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            spec: self.spec,
            layers: self.stack.layers(),
            unique: self.stack.unique(),
            supervision: self.stack.supervision,
            readout_period: self.readout_period,
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &meta, &self.store)
    }

    /// Load a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let (meta, store) = read_checkpoint(&mut r)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        let cfg = StackConfig::new(meta.layers, meta.unique, meta.supervision)?;
        // Rebuild the layout, then swap in the stored values.
        let mut model = build_stack(cfg, meta.spec, 0)?;
        if model.store.len() != store.len() {
            return Err(Error::Data("checkpoint does not match model layout".into()));
        }
        for id in model.store.ids() {
            let (want, got) = (model.store.get(id), store.get(id));
            if model.store.name(id) != store.name(id)
                || want.shape() != got.shape()
                || want.dtype() != got.dtype()
            {
                return Err(Error::Data(format!(
                    "checkpoint entry `{}` does not match model layout",
                    store.name(id)
                )));
            }
        }
        if !meta.layers.is_multiple_of(meta.readout_period) {
            return Err(Error::Data(format!(
                "readout period {} does not divide depth",
                meta.readout_period
            )));
        }
        model.store = store;
        model.readout_period = meta.readout_period;
        Ok(model)
    }
}

/// Cross-entropy of the head applied to the final repetition.
pub fn loss_final(
    tape: &mut Tape,
    model: &Model,
    trace: &ForwardTrace,
    label: usize,
) -> Result<Var> {
    let logits = model.head_logits(tape, trace.output(), trace.valid_len)?;
    tape.softmax_cross_entropy(logits, label)
}

/// Mean cross-entropy of the shared head over every repetition.
pub fn loss_block(
    tape: &mut Tape,
    model: &Model,
    trace: &ForwardTrace,
    label: usize,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &h in &trace.h_reps {
        let logits = model.head_logits(tape, h, trace.valid_len)?;
        let ce = tape.softmax_cross_entropy(logits, label)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty trace".into()))?;
    Ok(tape.affine(total, 1.0 / trace.h_reps.len() as f64, 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub supervision: Supervision,
    /// `max |tied - Σ copies| / max |tied|` over all parameters.
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Both gradients vanish identically.
    pub all_zero: bool,
}

/// Tolerance for tied vs. summed-copy gradient agreement.
pub const AGGREGATION_TOL: f64 = 1e-10;

/// Compare the gradient of a shared block against the sum of the gradients
/// of its untied copies in the embedded independent model.
pub fn gradient_aggregation_report(
    model: &Model,
    batch: &[Sample],
    supervision: Supervision,
) -> Result<AggregationReport> {
    let mut tied = model.clone();
    tied.stack.supervision = supervision;
    let untied = tied.embed_periodic(tied.stack.layers())?;
    let (_, g_tied) = tied.batch_loss_and_grads(batch)?;
    let (_, g_untied) = untied.batch_loss_and_grads(batch)?;

    let m = tied.stack.unique();
    let mut pairs: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let get = |g: &Gradients, store: &ParamStore, id| {
        g.get(id)
            .map(Tensor::components)
            .unwrap_or_else(|| vec![0.0; store.get(id).num_components()])
    };
    for (a, b) in [
        (tied.encoder.weight, untied.encoder.weight),
        (tied.encoder.bias, untied.encoder.bias),
        (tied.head.weight, untied.head.weight),
        (tied.head.bias, untied.head.bias),
    ] {
        pairs.push((
            tied.store.name(a).to_string(),
            get(&g_tied, &tied.store, a),
            get(&g_untied, &untied.store, b),
        ));
    }
    for (k, block) in tied.blocks.iter().enumerate() {
        let copies: Vec<&BlockParams> = untied.blocks.iter().skip(k).step_by(m).collect();
        for (slot, id) in block.param_ids().into_iter().enumerate() {
            let mut sum = vec![0.0; tied.store.get(id).num_components()];
            for copy in &copies {
                let cid = copy.param_ids()[slot];
                for (s, v) in sum.iter_mut().zip(get(&g_untied, &untied.store, cid)) {
                    *s += v;
                }
            }
            pairs.push((
                tied.store.name(id).to_string(),
                get(&g_tied, &tied.store, id),
                sum,
            ));
        }
    }

    let scale = pairs
        .iter()
        .flat_map(|(_, t, u)| t.iter().chain(u))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut report = AggregationReport {
        supervision,
        max_rel_error: 0.0,
        worst_param: String::new(),
        all_zero: scale == 0.0,
    };
    if report.all_zero {
        return Ok(report);
    }
    for (name, t, u) in &pairs {
        let diff = t
            .iter()
            .zip(u)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let rel = diff / scale;
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = rel;
            report.worst_param = name.clone();
        }
    }
    Ok(report)
}

/// [`gradient_aggregation_report`], failing when agreement exceeds
/// [`AGGREGATION_TOL`].
pub fn verify_gradient_aggregation(
    model: &Model,
    batch: &[Sample],
    supervision: Supervision,
) -> Result<AggregationReport> {
    let report = gradient_aggregation_report(model, batch, supervision)?;
    if report.max_rel_error >= AGGREGATION_TOL {
        return Err(Error::Verification(format!(
            "tied and summed-copy gradients differ by {:.3e} (relative) at `{}`",
            report.max_rel_error, report.worst_param
        )));
    }
    Ok(report)
}
