//! Input reshaping by a concentration factor `c`.
//!
//! A `(T, w)` series is flattened time-major (timestep `t`'s features are
//! contiguous) and rechunked into rows of width `c`, zero-padding the last
//! row, giving `(⌈T·w/c⌉, c)`. When `c` is a multiple of `w` this is exactly
//! the concatenation of `c / w` consecutive timesteps; otherwise features and
//! time mix within a row. `c = 1` leaves the input untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input dimensionality class of a corpus, relative to a 64-wide model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimTag {
    Low,
    Medium,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Identity,
    /// Whole consecutive timesteps concatenated; requires `w | c`.
    LowDimConcat,
    /// Feature-time grid flattened and rechunked.
    HighDimFlatten,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Regime::Identity => "identity",
            Regime::LowDimConcat => "low",
            Regime::HighDimFlatten => "high",
        })
    }
}

/// Regime selection as accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    Auto,
    Low,
    High,
    Identity,
}

impl FromStr for RegimeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "low" => Ok(Self::Low),
            "high" => Ok(Self::High),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!(
                "unknown regime `{other}` (expected auto, low, high or identity)"
            ))),
        }
    }
}

/// Pick the reshaping regime for a corpus of width `width` tagged `tag`.
pub fn choose_regime(tag: DimTag, width: usize, c: usize) -> Regime {
    if c == 1 {
        return Regime::Identity;
    }
    match tag {
        DimTag::High => Regime::HighDimFlatten,
        DimTag::Low | DimTag::Medium => {
            if c.is_multiple_of(width) {
                Regime::LowDimConcat
            } else {
                log::info!(
                    "c = {c} is not a multiple of input width {width}; using flatten-and-rechunk"
                );
                Regime::HighDimFlatten
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshapeSpec {
    pub concentration: usize,
    pub regime: Regime,
    /// `(T, w)` of the unreshaped input.
    pub original_shape: (usize, usize),
}

impl ReshapeSpec {
    pub fn new(
        concentration: usize,
        regime: Regime,
        original_shape: (usize, usize),
    ) -> Result<Self> {
        let (steps, width) = original_shape;
        if concentration == 0 {
            return Err(Error::Config(
                "concentration factor must be positive".into(),
            ));
        }
        if steps == 0 || width == 0 {
            return Err(Error::Config(format!(
                "degenerate input shape {original_shape:?}"
            )));
        }
        let regime = if concentration == 1 {
            Regime::Identity
        } else {
            regime
        };
        match regime {
            Regime::Identity if concentration != 1 => {
                return Err(Error::Config(format!(
                    "identity regime requires c = 1, got {concentration}"
                )))
            }
            Regime::LowDimConcat if !concentration.is_multiple_of(width) => {
                return Err(Error::Config(format!(
                    "timestep concatenation needs c to be a multiple of d = {width}, got {concentration}"
                )))
            }
            _ => {}
        }
        Ok(Self {
            concentration,
            regime,
            original_shape,
        })
    }

    pub fn identity(original_shape: (usize, usize)) -> Result<Self> {
        Self::new(1, Regime::Identity, original_shape)
    }

    /// Spec for an explicit or automatic regime choice.
    pub fn from_choice(
        concentration: usize,
        choice: RegimeChoice,
        tag: DimTag,
        original_shape: (usize, usize),
    ) -> Result<Self> {
        let regime = match choice {
            RegimeChoice::Auto => choose_regime(tag, original_shape.1, concentration.max(1)),
            RegimeChoice::Low => Regime::LowDimConcat,
            RegimeChoice::High => Regime::HighDimFlatten,
            RegimeChoice::Identity => Regime::Identity,
        };
        Self::new(concentration, regime, original_shape)
    }

    fn flat_len(&self) -> usize {
        self.original_shape.0 * self.original_shape.1
    }

    pub fn output_steps(&self) -> usize {
        match self.regime {
            Regime::Identity => self.original_shape.0,
            _ => self.flat_len().div_ceil(self.concentration),
        }
    }

    pub fn output_width(&self) -> usize {
        match self.regime {
            Regime::Identity => self.original_shape.1,
            _ => self.concentration,
        }
    }

    /// Zeros appended to fill the final row.
    pub fn pad_count(&self) -> usize {
        match self.regime {
            Regime::Identity => 0,
            _ => self.output_steps() * self.concentration - self.flat_len(),
        }
    }

    /// Output rows touched by the first `valid_len` input steps.
    pub fn valid_steps(&self, valid_len: usize) -> usize {
        match self.regime {
            Regime::Identity => valid_len,
            _ => (valid_len * self.original_shape.1).div_ceil(self.concentration),
        }
    }
}

/// `(T, w) -> (⌈T·w/c⌉, c)`.
pub fn reshape_forward(x: &Tensor, spec: &ReshapeSpec) -> Result<Tensor> {
    let (steps, width) = spec.original_shape;
    if x.shape() != [steps, width] {
        return Err(Error::Contract(format!(
            "input shape {:?} does not match reshape spec ({steps}, {width})",
            x.shape()
        )));
    }
    if x.is_complex() {
        return Err(Error::Contract("reshape expects a real series".into()));
    }
    if spec.regime == Regime::Identity {
        return Ok(x.clone());
    }
    let mut data = x.real().to_vec();
    data.resize(data.len() + spec.pad_count(), 0.0);
    Tensor::from_real(&[spec.output_steps(), spec.concentration], data)
}

/// Undo [`reshape_forward`]; the padding region must hold zeros.
pub fn reshape_inverse(y: &Tensor, spec: &ReshapeSpec) -> Result<Tensor> {
    let expected = [spec.output_steps(), spec.output_width()];
    if y.shape() != expected {
        return Err(Error::Contract(format!(
            "reshaped tensor is {:?}, spec implies {expected:?}",
            y.shape()
        )));
    }
    if y.is_complex() {
        return Err(Error::Contract("reshape expects a real series".into()));
    }
    let (steps, width) = spec.original_shape;
    let flat = y.real();
    let n = steps * width;
    if let Some(i) = flat[n..].iter().position(|&v| v.to_bits() != 0) {
        return Err(Error::Contract(format!(
            "padding value {} at flat index {} is not zero",
            flat[n + i],
            n + i
        )));
    }
    Tensor::from_real(&[steps, width], flat[..n].to_vec())
}
