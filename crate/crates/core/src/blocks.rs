//! The four SSM block families plus the input encoder and classification head.
//!
//! A block maps `[T, H] -> [T, H]`:
//!
//! ```text
//! u   = LayerNorm(h)
//! y   = Recurrence(u)                 (real part, [T, H])
//! out = h + (y·Wv + bv) ⊙ σ(y·Wg + bg)
//! ```
//!
//! Each recurrence lowers onto the associative scan. LRU, S5 and LinOSS are
//! time-invariant linear recurrences; LrcSSM has input-dependent diagonal
//! transitions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, UnaryOp, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lru,
    S5,
    LinOss,
    LrcSsm,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Lru, Arch::S5, Arch::LinOss, Arch::LrcSsm];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Lru => "LRU",
            Arch::S5 => "S5",
            Arch::LinOss => "LinOSS",
            Arch::LrcSsm => "LrcSSM",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(Arch::Lru),
            "s5" => Ok(Arch::S5),
            "linoss" => Ok(Arch::LinOss),
            "lrcssm" => Ok(Arch::LrcSsm),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected lru, s5, linoss or lrcssm)"
            ))),
        }
    }
}

/// State size `P` and hidden size `H` of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSizes {
    pub state: usize,
    pub hidden: usize,
}

impl Default for BlockSizes {
    fn default() -> Self {
        Self {
            state: 64,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recurrence {
    /// `λ = exp(-exp(ν) + iθ)`, drive scaled by `γ = sqrt(1 - |λ|²)`.
    Lru {
        nu: ParamId,
        phase: ParamId,
        b: ParamId,
        c: ParamId,
        d: ParamId,
    },
    /// Continuous diagonal `Λ = -exp(ρ) + iω`, zero-order hold with `Δ = exp(s)`.
    S5 {
        log_neg_re: ParamId,
        im: ParamId,
        log_step: ParamId,
        b: ParamId,
        c: ParamId,
        d: ParamId,
    },
    /// Implicit discretization of `y'' = -A y + B u`, `A = relu(a)`, `Δ = σ(s)`.
    LinOss {
        freq: ParamId,
        step: ParamId,
        b: ParamId,
        c: ParamId,
        d: ParamId,
    },
    /// `a_t = σ(u_t Wa + ba)`, `b_t = (1 - a_t) ⊙ tanh(u_t Wb + bb)`.
    LrcSsm {
        w_gate: ParamId,
        b_gate: ParamId,
        w_drive: ParamId,
        b_drive: ParamId,
        c: ParamId,
        d: ParamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixer {
    pub w_value: ParamId,
    pub b_value: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
}

/// One block's learnable parameters, stored in a shared [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub prefix: String,
    pub arch: Arch,
    pub sizes: BlockSizes,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub recurrence: Recurrence,
    pub mixer: Mixer,
}

fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

fn real_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_real(shape, (0..n).map(|_| normal(rng, std)).collect()).unwrap()
}

fn complex_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let re = normal(rng, std);
            let im = normal(rng, std);
            Complex64::new(re, im)
        })
        .collect();
    Tensor::from_complex(shape, data).unwrap()
}

fn filled(shape: &[usize], v: f64) -> Tensor {
    Tensor::from_real(shape, vec![v; shape.iter().product()]).unwrap()
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_real(&[n], (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

impl BlockParams {
    /// Allocate and initialize a block's parameters under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        arch: Arch,
        sizes: BlockSizes,
        rng: &mut impl Rng,
    ) -> Self {
        let (p, h) = (sizes.state, sizes.hidden);
        let name = |s: &str| format!("{prefix}.{s}");
        let norm_gain = store.add(name("norm.gain"), filled(&[h], 1.0));
        let norm_bias = store.add(name("norm.bias"), filled(&[h], 0.0));

        let recurrence = match arch {
            Arch::Lru => {
                let (r_min, r_max) = (0.9f64, 0.999f64);
                let nu = (0..p)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        let mag2 = u * (r_max * r_max - r_min * r_min) + r_min * r_min;
                        (-0.5 * mag2.ln()).ln()
                    })
                    .collect();
                let nu = store.add(name("rec.nu"), Tensor::from_real(&[p], nu).unwrap());
                let phase = store.add(name("rec.phase"), uniform(rng, p, 0.0, 2.0 * PI));
                let b = store.add(
                    name("rec.b"),
                    complex_normal(rng, &[h, p], (1.0 / (2.0 * h as f64)).sqrt()),
                );
                let c = store.add(
                    name("rec.c"),
                    complex_normal(rng, &[p, h], (1.0 / p as f64).sqrt()),
                );
                let d = store.add(name("rec.d"), real_normal(rng, &[h], 1.0));
                Recurrence::Lru { nu, phase, b, c, d }
            }
            Arch::S5 => {
                let log_neg_re = store.add(name("rec.log_neg_re"), filled(&[p], 0.5f64.ln()));
                let im = store.add(
                    name("rec.im"),
                    Tensor::from_real(&[p], (0..p).map(|n| PI * n as f64).collect()).unwrap(),
                );
                let log_step = store.add(
                    name("rec.log_step"),
                    uniform(rng, p, 0.001f64.ln(), 0.1f64.ln()),
                );
                let b = store.add(
                    name("rec.b"),
                    complex_normal(rng, &[h, p], (1.0 / h as f64).sqrt()),
                );
                let c = store.add(
                    name("rec.c"),
                    complex_normal(rng, &[p, h], (1.0 / p as f64).sqrt()),
                );
                let d = store.add(name("rec.d"), real_normal(rng, &[h], 1.0));
                Recurrence::S5 {
                    log_neg_re,
                    im,
                    log_step,
                    b,
                    c,
                    d,
                }
            }
            Arch::LinOss => {
                let freq = store.add(name("rec.freq"), uniform(rng, p, 0.0, 1.0));
                let step = store.add(name("rec.step"), uniform(rng, p, -1.0, 1.0));
                let b = store.add(
                    name("rec.b"),
                    complex_normal(rng, &[h, p], (1.0 / h as f64).sqrt()),
                );
                let c = store.add(
                    name("rec.c"),
                    complex_normal(rng, &[p, h], (1.0 / p as f64).sqrt()),
                );
                let d = store.add(name("rec.d"), real_normal(rng, &[h], 1.0));
                Recurrence::LinOss {
                    freq,
                    step,
                    b,
                    c,
                    d,
                }
            }
            Arch::LrcSsm => {
                let std = (1.0 / h as f64).sqrt();
                let w_gate = store.add(name("rec.w_gate"), real_normal(rng, &[h, p], std));
                let b_gate = store.add(name("rec.b_gate"), uniform(rng, p, 1.0, 3.0));
                let w_drive = store.add(name("rec.w_drive"), real_normal(rng, &[h, p], std));
                let b_drive = store.add(name("rec.b_drive"), filled(&[p], 0.0));
                let c = store.add(
                    name("rec.c"),
                    real_normal(rng, &[p, h], (1.0 / p as f64).sqrt()),
                );
                let d = store.add(name("rec.d"), real_normal(rng, &[h], 1.0));
                Recurrence::LrcSsm {
                    w_gate,
                    b_gate,
                    w_drive,
                    b_drive,
                    c,
                    d,
                }
            }
        };

        let std = (1.0 / h as f64).sqrt();
        let mixer = Mixer {
            w_value: store.add(name("mix.w_value"), real_normal(rng, &[h, h], std)),
            b_value: store.add(name("mix.b_value"), filled(&[h], 0.0)),
            w_gate: store.add(name("mix.w_gate"), real_normal(rng, &[h, h], std)),
            b_gate: store.add(name("mix.b_gate"), filled(&[h], 0.0)),
        };

        Self {
            prefix: prefix.to_string(),
            arch,
            sizes,
            norm_gain,
            norm_bias,
            recurrence,
            mixer,
        }
    }

    /// Every parameter id of the block, in allocation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm_gain, self.norm_bias];
        match &self.recurrence {
            Recurrence::Lru { nu, phase, b, c, d } => ids.extend([*nu, *phase, *b, *c, *d]),
            Recurrence::S5 {
                log_neg_re,
                im,
                log_step,
                b,
                c,
                d,
            } => ids.extend([*log_neg_re, *im, *log_step, *b, *c, *d]),
            Recurrence::LinOss {
                freq,
                step,
                b,
                c,
                d,
            } => ids.extend([*freq, *step, *b, *c, *d]),
            Recurrence::LrcSsm {
                w_gate,
                b_gate,
                w_drive,
                b_drive,
                c,
                d,
            } => ids.extend([*w_gate, *b_gate, *w_drive, *b_drive, *c, *d]),
        }
        let m = &self.mixer;
        ids.extend([m.w_value, m.b_value, m.w_gate, m.b_gate]);
        ids
    }

    /// Copy this block's tensors from `src` into `dst` under a new prefix,
    /// returning a block that addresses the copies.
    pub fn copy_into(&self, src: &ParamStore, dst: &mut ParamStore, prefix: &str) -> Self {
        let old = format!("{}.", self.prefix);
        let mut copy = |id: ParamId| {
            let leaf = src.name(id).strip_prefix(&old).unwrap_or(src.name(id));
            dst.add(format!("{prefix}.{leaf}"), src.get(id).clone())
        };
        let norm_gain = copy(self.norm_gain);
        let norm_bias = copy(self.norm_bias);
        let recurrence = match &self.recurrence {
            Recurrence::Lru { nu, phase, b, c, d } => Recurrence::Lru {
                nu: copy(*nu),
                phase: copy(*phase),
                b: copy(*b),
                c: copy(*c),
                d: copy(*d),
            },
            Recurrence::S5 {
                log_neg_re,
                im,
                log_step,
                b,
                c,
                d,
            } => Recurrence::S5 {
                log_neg_re: copy(*log_neg_re),
                im: copy(*im),
                log_step: copy(*log_step),
                b: copy(*b),
                c: copy(*c),
                d: copy(*d),
            },
            Recurrence::LinOss {
                freq,
                step,
                b,
                c,
                d,
            } => Recurrence::LinOss {
                freq: copy(*freq),
                step: copy(*step),
                b: copy(*b),
                c: copy(*c),
                d: copy(*d),
            },
            Recurrence::LrcSsm {
                w_gate,
                b_gate,
                w_drive,
                b_drive,
                c,
                d,
            } => Recurrence::LrcSsm {
                w_gate: copy(*w_gate),
                b_gate: copy(*b_gate),
                w_drive: copy(*w_drive),
                b_drive: copy(*b_drive),
                c: copy(*c),
                d: copy(*d),
            },
        };
        let mixer = Mixer {
            w_value: copy(self.mixer.w_value),
            b_value: copy(self.mixer.b_value),
            w_gate: copy(self.mixer.w_gate),
            b_gate: copy(self.mixer.b_gate),
        };
        Self {
            prefix: prefix.to_string(),
            arch: self.arch,
            sizes: self.sizes,
            norm_gain,
            norm_bias,
            recurrence,
            mixer,
        }
    }

    /// Learnable scalars in this block (complex entries count twice).
    pub fn count_params(&self, store: &ParamStore) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| store.get(id).num_components())
            .sum()
    }

    /// Block output `h + mixer(recurrence(norm(h)))`.
    ///
    /// `layer` only labels numeric errors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        layer: usize,
    ) -> Result<Var> {
        let shape = tape.value(h).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.sizes.hidden {
            return Err(Error::Shape(format!(
                "block expects [T, {}], got {shape:?}",
                self.sizes.hidden
            )));
        }
        let gain = tape.param(store, self.norm_gain);
        let bias = tape.param(store, self.norm_bias);
        let u = tape.layer_norm(h, gain, bias)?;
        let y = self.recurrence_forward(tape, store, u)?;
        let mix = self.mixer_forward(tape, store, y)?;
        let out = tape.add(h, mix)?;
        check_finite(tape.value(out), layer)?;
        Ok(out)
    }

    /// The state recurrence alone, `[T, H] -> [T, H]`.
    pub fn recurrence_forward(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        match &self.recurrence {
            Recurrence::Lru { nu, phase, b, c, d } => {
                let nu = tape.param(store, *nu);
                let phase = tape.param(store, *phase);
                let rate = tape.exp(nu)?;
                let neg_rate = tape.affine(rate, -1.0, 0.0);
                let mag = tape.exp(neg_rate)?;
                let cos = tape.unary(phase, UnaryOp::Cos)?;
                let sin = tape.unary(phase, UnaryOp::Sin)?;
                let lam_re = tape.mul(mag, cos)?;
                let lam_im = tape.mul(mag, sin)?;
                let lambda = tape.make_complex(lam_re, lam_im)?;
                let mag2 = tape.mul(mag, mag)?;
                let one_minus = tape.affine(mag2, -1.0, 1.0);
                let gamma = tape.unary(one_minus, UnaryOp::Sqrt)?;

                let b = tape.param(store, *b);
                let bu = tape.matmul(u, b)?;
                let drive = tape.mul_row(bu, gamma)?;
                let x = tape.scan_diag(lambda, drive)?;
                readout(tape, store, x, u, *c, *d)
            }
            Recurrence::S5 {
                log_neg_re,
                im,
                log_step,
                b,
                c,
                d,
            } => {
                let lnr = tape.param(store, *log_neg_re);
                let im = tape.param(store, *im);
                let ls = tape.param(store, *log_step);
                let neg_re = tape.exp(lnr)?;
                let re = tape.affine(neg_re, -1.0, 0.0);
                let lambda = tape.make_complex(re, im)?;
                let step = tape.exp(ls)?;
                let scaled = tape.mul(lambda, step)?;
                let lambda_bar = tape.exp(scaled)?;
                let numer = tape.affine(lambda_bar, 1.0, -1.0);
                let coeff = tape.div(numer, lambda)?;

                let b = tape.param(store, *b);
                let bu = tape.matmul(u, b)?;
                let drive = tape.mul_row(bu, coeff)?;
                let x = tape.scan_diag(lambda_bar, drive)?;
                readout(tape, store, x, u, *c, *d)
            }
            Recurrence::LinOss {
                freq,
                step,
                b,
                c,
                d,
            } => {
                let freq = tape.param(store, *freq);
                let step = tape.param(store, *step);
                let a = tape.unary(freq, UnaryOp::Relu)?;
                let dt = tape.sigmoid(step)?;
                let dt2 = tape.mul(dt, dt)?;
                let dt2a = tape.mul(dt2, a)?;
                let denom = tape.affine(dt2a, 1.0, 1.0);
                let s = tape.unary(denom, UnaryOp::Recip)?;
                let dta = tape.mul(dt, a)?;
                let dtas = tape.mul(dta, s)?;
                let m01 = tape.affine(dtas, -1.0, 0.0);
                let m10 = tape.mul(dt, s)?;

                let b = tape.param(store, *b);
                let bu = tape.matmul(u, b)?;
                let vel_coeff = tape.mul(s, dt)?;
                let pos_coeff = tape.mul(m10, dt)?;
                let f_vel = tape.mul_row(bu, vel_coeff)?;
                let f_pos = tape.mul_row(bu, pos_coeff)?;
                let x = tape.scan_oscillatory([s, m01, m10, s], [f_vel, f_pos])?;
                readout(tape, store, x, u, *c, *d)
            }
            Recurrence::LrcSsm {
                w_gate,
                b_gate,
                w_drive,
                b_drive,
                c,
                d,
            } => {
                let wg = tape.param(store, *w_gate);
                let bg = tape.param(store, *b_gate);
                let wd = tape.param(store, *w_drive);
                let bd = tape.param(store, *b_drive);
                let gate_pre = tape.matmul(u, wg)?;
                let gate_pre = tape.add_row(gate_pre, bg)?;
                let a = tape.sigmoid(gate_pre)?;
                let drive_pre = tape.matmul(u, wd)?;
                let drive_pre = tape.add_row(drive_pre, bd)?;
                let drive_act = tape.tanh(drive_pre)?;
                let keep = tape.affine(a, -1.0, 1.0);
                let drive = tape.mul(keep, drive_act)?;
                let x = tape.scan_diag(a, drive)?;
                readout(tape, store, x, u, *c, *d)
            }
        }
    }

    fn mixer_forward(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let m = &self.mixer;
        let wv = tape.param(store, m.w_value);
        let bv = tape.param(store, m.b_value);
        let wg = tape.param(store, m.w_gate);
        let bg = tape.param(store, m.b_gate);
        let value = tape.matmul(y, wv)?;
        let value = tape.add_row(value, bv)?;
        let gate = tape.matmul(y, wg)?;
        let gate = tape.add_row(gate, bg)?;
        tape.glu(value, gate)
    }
}

/// `Re(x·C) + u ⊙ D`.
fn readout(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    u: Var,
    c: ParamId,
    d: ParamId,
) -> Result<Var> {
    let c = tape.param(store, c);
    let d = tape.param(store, d);
    let xc = tape.matmul(x, c)?;
    let y = if tape.value(xc).is_complex() {
        tape.re(xc)
    } else {
        xc
    };
    let skip = tape.mul_row(u, d)?;
    tape.add(y, skip)
}

fn check_finite(t: &Tensor, layer: usize) -> Result<()> {
    if t.is_finite() {
        return Ok(());
    }
    let cols = t.shape()[1];
    let step = t
        .real()
        .iter()
        .position(|v| !v.is_finite())
        .map(|i| i / cols)
        .unwrap_or(0);
    Err(Error::NonFinite { layer, step })
}

/// Dense affine map `x·W + b` (input encoder).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_width: usize,
    pub hidden: usize,
}

impl Encoder {
    pub fn init(
        store: &mut ParamStore,
        input_width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / input_width as f64).sqrt();
        Self {
            weight: store.add(
                "encoder.weight",
                real_normal(rng, &[input_width, hidden], std),
            ),
            bias: store.add("encoder.bias", filled(&[hidden], 0.0)),
            input_width,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 2 || s[1] != self.input_width {
            return Err(Error::Shape(format!(
                "encoder expects [T, {}], got {s:?}",
                self.input_width
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn count_params(&self) -> usize {
        self.input_width * self.hidden + self.hidden
    }
}

/// Mean-over-time pooling followed by `W·mean + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
    pub classes: usize,
}

impl Head {
    pub fn init(store: &mut ParamStore, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / hidden as f64).sqrt();
        Self {
            weight: store.add("head.weight", real_normal(rng, &[hidden, classes], std)),
            bias: store.add("head.bias", filled(&[classes], 0.0)),
            hidden,
            classes,
        }
    }

    /// Logits `[1, C]` from the first `valid_len` steps of `h`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        valid_len: usize,
    ) -> Result<Var> {
        let s = tape.value(h).shape();
        if s.len() != 2 || s[1] != self.hidden || s[0] == 0 {
            return Err(Error::Shape(format!(
                "head expects non-empty [T, {}], got {s:?}",
                self.hidden
            )));
        }
        let w = tape.param(store, self.weight);
        if store.get(self.weight).shape() != [self.hidden, self.classes] {
            return Err(Error::Shape(format!(
                "head weight is {:?}, expected [{}, {}]",
                store.get(self.weight).shape(),
                self.hidden,
                self.classes
            )));
        }
        let b = tape.param(store, self.bias);
        let pooled = tape.mean_rows(h, valid_len)?;
        let z = tape.matmul(pooled, w)?;
        tape.add_row(z, b)
    }

    pub fn count_params(&self) -> usize {
        self.hidden * self.classes + self.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(rng: &mut impl Rng, t: usize, h: usize) -> Tensor {
        real_normal(rng, &[t, h], 1.0)
    }

    #[test]
    fn arch_parses_case_insensitively() {
        assert_eq!("LinOSS".parse::<Arch>().unwrap(), Arch::LinOss);
        assert_eq!("lrcssm".parse::<Arch>().unwrap(), Arch::LrcSsm);
        assert!("mamba".parse::<Arch>().is_err());
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let sizes = BlockSizes {
            state: 4,
            hidden: 6,
        };
        for arch in Arch::ALL {
            let mut r = rng(3);
            let mut store = ParamStore::new();
            let block = BlockParams::init(&mut store, "b0", arch, sizes, &mut r);
            for id in [block.mixer.w_value, block.mixer.b_value] {
                let t = store.get_mut(id);
                t.real_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let x = random_input(&mut r, 9, 6);
            let mut tape = Tape::new();
            let h = tape.constant(x.clone());
            let out = block.forward(&mut tape, &store, h, 0).unwrap();
            assert_eq!(tape.value(out), &x, "{arch}");
        }
    }

    #[test]
    fn init_is_stable() {
        let sizes = BlockSizes {
            state: 16,
            hidden: 8,
        };
        for arch in Arch::ALL {
            let mut store = ParamStore::new();
            let block = BlockParams::init(&mut store, "b", arch, sizes, &mut rng(11));
            match &block.recurrence {
                Recurrence::Lru { nu, .. } => {
                    for v in store.get(*nu).real() {
                        let mag = (-v.exp()).exp();
                        assert!((0.9..=0.999).contains(&mag), "{mag}");
                    }
                }
                Recurrence::S5 { log_neg_re, .. } => {
                    assert!(store.get(*log_neg_re).real().iter().all(|v| -v.exp() < 0.0));
                }
                Recurrence::LinOss { freq, step, .. } => {
                    let a = store.get(*freq).real();
                    let s = store.get(*step).real();
                    for (a, s) in a.iter().zip(s) {
                        let dt = 1.0 / (1.0 + (-s).exp());
                        let radius = 1.0 / (1.0 + dt * dt * a.max(0.0)).sqrt();
                        assert!(radius <= 1.0);
                    }
                }
                Recurrence::LrcSsm { .. } => {}
            }
        }
    }

    #[test]
    fn param_count_depends_only_on_sizes() {
        let sizes = BlockSizes {
            state: 5,
            hidden: 7,
        };
        for arch in Arch::ALL {
            let mut s1 = ParamStore::new();
            let mut s2 = ParamStore::new();
            let b1 = BlockParams::init(&mut s1, "x", arch, sizes, &mut rng(1));
            let b2 = BlockParams::init(&mut s2, "x", arch, sizes, &mut rng(99));
            assert_eq!(b1.count_params(&s1), b2.count_params(&s2));
            assert_eq!(b1.count_params(&s1), s1.num_scalars());
        }
    }

    #[test]
    fn copy_into_preserves_values_and_names() {
        let sizes = BlockSizes {
            state: 3,
            hidden: 4,
        };
        let mut src = ParamStore::new();
        let block = BlockParams::init(&mut src, "blocks.0", Arch::S5, sizes, &mut rng(2));
        let mut dst = ParamStore::new();
        let copy = block.copy_into(&src, &mut dst, "blocks.5");
        for (a, b) in block.param_ids().iter().zip(copy.param_ids()) {
            assert_eq!(src.get(*a), dst.get(b));
            assert_eq!(src.name(*a).replace("blocks.0", "blocks.5"), dst.name(b));
        }
    }

    #[test]
    fn head_shapes_and_bias_only() {
        let mut store = ParamStore::new();
        let head = Head::init(&mut store, 64, 2, &mut rng(0));
        assert_eq!(head.count_params(), 130);
        store
            .get_mut(head.weight)
            .real_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        store
            .get_mut(head.bias)
            .real_mut()
            .copy_from_slice(&[0.25, -1.5]);
        let mut tape = Tape::new();
        let h = tape.constant(random_input(&mut rng(5), 7, 64));
        let logits = head.forward(&mut tape, &store, h, 7).unwrap();
        assert_eq!(tape.value(logits).real(), &[0.25, -1.5]);
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let mut store = ParamStore::new();
        let head = Head::init(&mut store, 8, 3, &mut rng(0));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[4, 5], crate::DType::Real));
        assert!(matches!(
            head.forward(&mut tape, &store, h, 4),
            Err(Error::Shape(_))
        ));
    }
}
