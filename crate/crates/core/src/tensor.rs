//! Dense real and complex arrays.
//!
//! Complex values are stored as `Complex64`, which is laid out as an
//! interleaved `(re, im)` pair of `f64`s. Every tensor is row-major.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    Real,
    Complex,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_real(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            storage: Storage::Real(data),
        })
    }

    pub fn from_complex(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            storage: Storage::Complex(data),
        })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = numel_of(shape);
        let storage = match dtype {
            DType::Real => Storage::Real(vec![0.0; n]),
            DType::Complex => Storage::Complex(vec![Complex64::new(0.0, 0.0); n]),
        };
        Self {
            shape: shape.to_vec(),
            storage,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            storage: Storage::Real(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.shape)
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::Real(_) => DType::Real,
            Storage::Complex(_) => DType::Complex,
        }
    }

    pub fn is_complex(&self) -> bool {
        self.dtype() == DType::Complex
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Real data; panics on a complex tensor.
    pub fn real(&self) -> &[f64] {
        match &self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("real() called on a complex tensor"),
        }
    }

    pub fn real_mut(&mut self) -> &mut [f64] {
        match &mut self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("real_mut() called on a complex tensor"),
        }
    }

    /// Complex data; panics on a real tensor.
    pub fn complex(&self) -> &[Complex64] {
        match &self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("complex() called on a real tensor"),
        }
    }

    pub fn complex_mut(&mut self) -> &mut [Complex64] {
        match &mut self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("complex_mut() called on a real tensor"),
        }
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on a tensor with {} values",
            self.numel()
        );
        match &self.storage {
            Storage::Real(v) => v[0],
            Storage::Complex(v) => v[0].re,
        }
    }

    /// Promote to complex (copy when already complex).
    pub fn to_complex(&self) -> Tensor {
        let data = match &self.storage {
            Storage::Real(v) => v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            Storage::Complex(v) => v.clone(),
        };
        Tensor {
            shape: self.shape.clone(),
            storage: Storage::Complex(data),
        }
    }

    pub fn re(&self) -> Tensor {
        self.map_to_real(|z| z.re)
    }

    pub fn im(&self) -> Tensor {
        self.map_to_real(|z| z.im)
    }

    pub fn abs(&self) -> Tensor {
        self.map_to_real(|z| z.norm())
    }

    pub fn conj(&self) -> Tensor {
        match &self.storage {
            Storage::Real(_) => self.clone(),
            Storage::Complex(v) => Tensor {
                shape: self.shape.clone(),
                storage: Storage::Complex(v.iter().map(|z| z.conj()).collect()),
            },
        }
    }

    fn map_to_real(&self, f: impl Fn(Complex64) -> f64) -> Tensor {
        let data = match &self.storage {
            Storage::Real(v) => v.iter().map(|&x| f(Complex64::new(x, 0.0))).collect(),
            Storage::Complex(v) => v.iter().map(|&z| f(z)).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            storage: Storage::Real(data),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        match &self.storage {
            Storage::Real(v) => v.iter().all(|x| x.is_finite()),
            Storage::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    /// Largest absolute value (complex magnitude), 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        match &self.storage {
            Storage::Real(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Storage::Complex(v) => v.iter().fold(0.0, |m, z| m.max(z.norm())),
        }
    }

    /// Number of real scalars backing the tensor (complex counts as 2).
    pub fn num_components(&self) -> usize {
        match &self.storage {
            Storage::Real(v) => v.len(),
            Storage::Complex(v) => 2 * v.len(),
        }
    }

    /// Flat real view, complex values interleaved as `re, im`.
    pub fn components(&self) -> Vec<f64> {
        match &self.storage {
            Storage::Real(v) => v.clone(),
            Storage::Complex(v) => v.iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }

    pub fn set_components(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_components() {
            return Err(Error::Shape(format!(
                "expected {} components, got {}",
                self.num_components(),
                src.len()
            )));
        }
        match &mut self.storage {
            Storage::Real(v) => v.copy_from_slice(src),
            Storage::Complex(v) => {
                for (z, pair) in v.iter_mut().zip(src.chunks_exact(2)) {
                    *z = Complex64::new(pair[0], pair[1]);
                }
            }
        }
        Ok(())
    }

    /// Row `i` of a 2-D real tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.real()[i * cols..(i + 1) * cols]
    }

    /// Elementwise sum; shapes and dtypes must already match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        match (&mut self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            (Storage::Complex(a), Storage::Complex(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            (Storage::Complex(a), Storage::Real(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| x.re += y);
            }
            (Storage::Real(a), Storage::Complex(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y.re);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        match &mut self.storage {
            Storage::Real(v) => v.iter_mut().for_each(|x| *x *= s),
            Storage::Complex(v) => v.iter_mut().for_each(|x| *x *= s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_must_match_values() {
        assert!(Tensor::from_real(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_real(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn complex_helpers() {
        let t = Tensor::from_complex(
            &[2],
            vec![Complex64::new(3.0, 4.0), Complex64::new(-1.0, 0.5)],
        )
        .unwrap();
        assert_eq!(t.abs().real(), &[5.0, (1.25f64).sqrt()]);
        assert_eq!(t.re().real(), &[3.0, -1.0]);
        assert_eq!(t.conj().complex()[0], Complex64::new(3.0, -4.0));
        assert_eq!(t.components(), vec![3.0, 4.0, -1.0, 0.5]);
        assert_eq!(t.num_components(), 4);
    }

    #[test]
    fn set_components_round_trips() {
        let mut t = Tensor::zeros(&[3], DType::Complex);
        let comps = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        t.set_components(&comps).unwrap();
        assert_eq!(t.components(), comps);
        assert!(t.set_components(&comps[..4]).is_err());
    }
}
