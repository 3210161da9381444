//! Associative scan for first-order linear recurrences.
//!
//! Every recurrence in the model library has the form
//! `x_t = a_t · x_{t-1} + b_t` with `x_0 = 0`. The pair `(a, b)` composes as
//! `(a2, b2) ∘ (a1, b1) = (a2·a1, a2·b1 + b2)`, which is associative, so all
//! prefixes can be computed with a Blelloch up-sweep/down-sweep. The
//! reduction tree depends only on the sequence length, so results are
//! reproducible bit-for-bit.

use std::ops::{Add, Mul};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// An affine map `x ↦ a·x + b` that can be composed associatively.
pub trait AffineElement: Copy {
    fn identity() -> Self;

    /// Composition that applies `self` first, then `later`.
    fn then(self, later: Self) -> Self;
}

/// Scalar types usable as a diagonal transition.
pub trait ScanScalar:
    Copy + Add<Output = Self> + Mul<Output = Self> + PartialEq + std::fmt::Debug
{
    const ZERO: Self;
    const ONE: Self;
}

impl ScanScalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
}

impl ScanScalar for Complex64 {
    const ZERO: Self = Complex64::new(0.0, 0.0);
    const ONE: Self = Complex64::new(1.0, 0.0);
}

/// One step of a diagonal recurrence for a single channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagElement<S> {
    pub a: S,
    pub b: S,
}

impl<S: ScanScalar> AffineElement for DiagElement<S> {
    fn identity() -> Self {
        Self {
            a: S::ONE,
            b: S::ZERO,
        }
    }

    fn then(self, later: Self) -> Self {
        Self {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

/// Real 2×2 matrix, row-major.
pub type Mat2 = [[f64; 2]; 2];

/// One step of a per-channel 2×2 recurrence on a complex 2-vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OscElement {
    pub a: Mat2,
    pub b: [Complex64; 2],
}

pub fn mat2_mul(l: &Mat2, r: &Mat2) -> Mat2 {
    [
        [
            l[0][0] * r[0][0] + l[0][1] * r[1][0],
            l[0][0] * r[0][1] + l[0][1] * r[1][1],
        ],
        [
            l[1][0] * r[0][0] + l[1][1] * r[1][0],
            l[1][0] * r[0][1] + l[1][1] * r[1][1],
        ],
    ]
}

pub fn mat2_apply(m: &Mat2, v: &[Complex64; 2]) -> [Complex64; 2] {
    [
        v[0] * m[0][0] + v[1] * m[0][1],
        v[0] * m[1][0] + v[1] * m[1][1],
    ]
}

pub fn mat2_transpose(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

impl AffineElement for OscElement {
    fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [Complex64::new(0.0, 0.0); 2],
        }
    }

    fn then(self, later: Self) -> Self {
        let ab = mat2_apply(&later.a, &self.b);
        Self {
            a: mat2_mul(&later.a, &self.a),
            b: [ab[0] + later.b[0], ab[1] + later.b[1]],
        }
    }
}

/// Inclusive prefix compositions of `elements` via a Blelloch scan.
///
/// Entry `t` of the result is `e_t ∘ … ∘ e_1`; its `b` component is the
/// recurrence state `x_t` started from zero.
pub fn scan_linear<E: AffineElement>(elements: &[E]) -> Result<Vec<E>> {
    if elements.is_empty() {
        return Err(Error::EmptySequence("scan over zero steps".into()));
    }
    let n = elements.len();
    let size = n.next_power_of_two();
    let mut tree = Vec::with_capacity(size);
    tree.extend_from_slice(elements);
    tree.resize(size, E::identity());

    // Up-sweep: each right node accumulates its subtree total.
    let mut d = 1;
    while d < size {
        let mut i = 0;
        while i < size {
            let left = i + d - 1;
            let right = i + 2 * d - 1;
            tree[right] = tree[left].then(tree[right]);
            i += 2 * d;
        }
        d *= 2;
    }

    // Down-sweep to exclusive prefixes.
    tree[size - 1] = E::identity();
    let mut d = size / 2;
    while d >= 1 {
        let mut i = 0;
        while i < size {
            let left = i + d - 1;
            let right = i + 2 * d - 1;
            let left_total = tree[left];
            let prefix = tree[right];
            tree[left] = prefix;
            tree[right] = prefix.then(left_total);
            i += 2 * d;
        }
        d /= 2;
    }

    Ok(elements
        .iter()
        .zip(&tree)
        .map(|(e, prefix)| prefix.then(*e))
        .collect())
}

/// Left fold reference: same result as [`scan_linear`] up to rounding.
pub fn scan_sequential<E: AffineElement>(elements: &[E]) -> Result<Vec<E>> {
    if elements.is_empty() {
        return Err(Error::EmptySequence("scan over zero steps".into()));
    }
    let mut acc = E::identity();
    Ok(elements
        .iter()
        .map(|e| {
            acc = acc.then(*e);
            acc
        })
        .collect())
}

/// Multi-channel diagonal recurrence.
///
/// `b` is laid out `[T, channels]`. `a` is either `[channels]` (shared over
/// time) or `[T, channels]`. Returns states `[T, channels]`.
pub fn scan_diag<S: ScanScalar>(a: &[S], b: &[S], channels: usize) -> Result<Vec<S>> {
    if channels == 0 {
        return Err(Error::Shape("scan with zero channels".into()));
    }
    if !b.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!(
            "drive of length {} is not a multiple of {channels} channels",
            b.len()
        )));
    }
    let steps = b.len() / channels;
    if steps == 0 {
        return Err(Error::EmptySequence("scan over zero steps".into()));
    }
    let broadcast = if a.len() == channels {
        true
    } else if a.len() == b.len() {
        false
    } else {
        return Err(Error::Shape(format!(
            "transition of length {} matches neither {channels} channels nor {steps}x{channels}",
            a.len()
        )));
    };

    let mut out = vec![S::ZERO; b.len()];
    let mut column = Vec::with_capacity(steps);
    for p in 0..channels {
        column.clear();
        column.extend((0..steps).map(|t| DiagElement {
            a: if broadcast { a[p] } else { a[t * channels + p] },
            b: b[t * channels + p],
        }));
        let prefixes = scan_linear(&column)?;
        for (t, e) in prefixes.iter().enumerate() {
            out[t * channels + p] = e.b;
        }
    }
    Ok(out)
}

/// Multi-channel 2×2 recurrence with a time-invariant matrix per channel.
///
/// `b` is laid out `[T, channels]`; returns states `[T, channels]`.
pub fn scan_osc(a: &[Mat2], b: &[[Complex64; 2]]) -> Result<Vec<[Complex64; 2]>> {
    let channels = a.len();
    if channels == 0 {
        return Err(Error::Shape("scan with zero channels".into()));
    }
    if !b.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!(
            "drive of length {} is not a multiple of {channels} channels",
            b.len()
        )));
    }
    let steps = b.len() / channels;
    if steps == 0 {
        return Err(Error::EmptySequence("scan over zero steps".into()));
    }
    let mut out = vec![[Complex64::new(0.0, 0.0); 2]; b.len()];
    let mut column = Vec::with_capacity(steps);
    for (p, m) in a.iter().enumerate() {
        column.clear();
        column.extend((0..steps).map(|t| OscElement {
            a: *m,
            b: b[t * channels + p],
        }));
        let prefixes = scan_linear(&column)?;
        for (t, e) in prefixes.iter().enumerate() {
            out[t * channels + p] = e.b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_states(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut x = 0.0;
        a.iter()
            .zip(b)
            .map(|(a, b)| {
                x = a * x + b;
                x
            })
            .collect()
    }

    #[test]
    fn zero_transition_forgets_history() {
        let states = scan_diag(&[0.0, 0.0], &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0], 2).unwrap();
        assert_eq!(states, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn unit_transition_accumulates() {
        let t_len = 7;
        let states = scan_diag(&[1.0], &vec![0.25; t_len], 1).unwrap();
        for (t, x) in states.iter().enumerate() {
            assert_eq!(*x, 0.25 * (t + 1) as f64);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let empty: [DiagElement<f64>; 0] = [];
        assert!(matches!(scan_linear(&empty), Err(Error::EmptySequence(_))));
        assert!(matches!(
            scan_diag::<f64>(&[1.0, 1.0], &[], 2),
            Err(Error::EmptySequence(_))
        ));
        assert!(matches!(
            scan_diag(&[1.0, 1.0, 1.0], &[1.0; 4], 2),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            scan_diag(&[1.0; 2], &[1.0; 5], 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn osc_identity_matrix_accumulates() {
        let one = Complex64::new(1.0, 0.0);
        let eye = [[1.0, 0.0], [0.0, 1.0]];
        let out = scan_osc(&[eye], &[[one, one * 2.0]; 4]).unwrap();
        assert_eq!(out[3], [one * 4.0, one * 8.0]);
    }

    proptest! {
        #[test]
        fn matches_sequential_fold(
            pairs in prop::collection::vec((-1.0f64..1.0, -5.0f64..5.0), 1..300)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let par = scan_diag(&a, &b, 1).unwrap();
            let seq = seq_states(&a, &b);
            for (x, y) in par.iter().zip(&seq) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn combine_is_associative(
            e in prop::array::uniform3((-2.0f64..2.0, -2.0f64..2.0))
        ) {
            let [x, y, z] = e.map(|(a, b)| DiagElement { a, b });
            let left = x.then(y).then(z);
            let right = x.then(y.then(z));
            prop_assert!((left.a - right.a).abs() < 1e-12);
            prop_assert!((left.b - right.b).abs() < 1e-12);
        }
    }
}
