//! Named parameter storage, gradient maps and the checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of learnable tensors addressed by path-like names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of learnable real scalars; a complex entry counts as two.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::num_components).sum()
    }

    /// All parameters as one real vector, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.components()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "expected {} scalars, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.values {
            let n = t.num_components();
            t.set_components(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[match t.dtype() {
                DType::Real => 0u8,
                DType::Complex => 1u8,
            }])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.components() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut store = ParamStore::new();
        let count = read_u32(r)? as usize;
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Data(format!("parameter name is not UTF-8: {e}")))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let tensor = match dtype[0] {
                0 => {
                    let data = (0..numel)
                        .map(|_| read_f64(r))
                        .collect::<Result<Vec<_>>>()?;
                    Tensor::from_real(&shape, data)?
                }
                1 => {
                    let data = (0..numel)
                        .map(|_| Ok(Complex64::new(read_f64(r)?, read_f64(r)?)))
                        .collect::<Result<Vec<_>>>()?;
                    Tensor::from_complex(&shape, data)?
                }
                other => return Err(Error::Data(format!("unknown dtype tag {other}"))),
            };
            store.add(name, tensor);
        }
        Ok(store)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LSQCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint: magic, version, a UTF-8 metadata blob, then the store.
pub fn write_checkpoint(w: &mut impl Write, meta: &str, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    store.write_to(w)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(String, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = read_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta).map_err(|e| Error::Data(e.to_string()))?;
    Ok((meta, ParamStore::read_from(r)?))
}

/// Gradient of a scalar loss with respect to each parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulate `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.components())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    /// Flatten in store order; parameters without an entry contribute zeros.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        store
            .ids()
            .flat_map(|id| match self.grads.get(&id) {
                Some(g) => g.components(),
                None => vec![0.0; store.get(id).num_components()],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "enc.w",
            Tensor::from_real(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
        );
        s.add(
            "blk.b",
            Tensor::from_complex(&[1], vec![Complex64::new(0.1, -0.2)]).unwrap(),
        );
        s
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let store = sample_store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"arch\":\"lru\"}", &store).unwrap();
        let (meta, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"arch\":\"lru\"}");
        assert_eq!(back.len(), store.len());
        for id in store.ids() {
            assert_eq!(back.name(id), store.name(id));
            let a: Vec<u64> = back
                .get(id)
                .components()
                .iter()
                .map(|x| x.to_bits())
                .collect();
            let b: Vec<u64> = store
                .get(id)
                .components()
                .iter()
                .map(|x| x.to_bits())
                .collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_checkpoint(&mut &b"NOTACKPTxxxxxxxx"[..]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn flatten_counts_complex_twice() {
        let mut store = sample_store();
        assert_eq!(store.num_scalars(), 6);
        let flat: Vec<f64> = (0..6).map(f64::from).collect();
        store.unflatten(&flat).unwrap();
        assert_eq!(store.flatten(), flat);
    }
}
