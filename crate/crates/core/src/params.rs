use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub frozen: bool,
}

/// Named parameters with a frozen partition. Insertion order is stable and defines ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(alloc::format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        if frozen {
            p.grad = None;
        }
        Ok(())
    }

    /// Freeze every parameter whose name starts with `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = true;
            p.grad = None;
            n += 1;
        }
        n
    }

    pub fn frozen_names(&self) -> BTreeSet<String> {
        self.params
            .iter()
            .filter(|p| p.frozen)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's accumulator. Frozen parameters ignore it.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Ok(());
        }
        if grad.len() != p.value.len() {
            return Err(Error::dim("accumulate_grad", p.value.shape(), &[grad.len()]));
        }
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    /// SHA-256 over (name, shape, little-endian bytes) of every parameter selected by `filter`.
    pub fn digest(&self, mut filter: impl FnMut(&Parameter<T>) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in p.value.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().into()
    }

    pub fn frozen_digest(&self) -> [u8; 32] {
        self.digest(|p| p.frozen)
    }

    pub fn full_digest(&self) -> [u8; 32] {
        self.digest(|_| true)
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.iter().map(|&x| U::c(x.as_f64())).collect()),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

pub fn hex(digest: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_ignore_gradients() {
        let mut ps = ParameterSet::<f32>::new();
        let a = ps.insert("a", Tensor::ones(&[2])).unwrap();
        ps.set_frozen("a", true).unwrap();
        ps.accumulate_grad(a, &[1.0, 2.0]).unwrap();
        assert!(ps.get(a).grad.is_none());
    }

    #[test]
    fn gradients_accumulate() {
        let mut ps = ParameterSet::<f64>::new();
        let a = ps.insert("a", Tensor::zeros(&[2])).unwrap();
        ps.accumulate_grad(a, &[1.0, 2.0]).unwrap();
        ps.accumulate_grad(a, &[1.0, 2.0]).unwrap();
        assert_eq!(ps.get(a).grad.as_deref(), Some(&[2.0, 4.0][..]));
        assert!(ps.accumulate_grad(a, &[1.0]).is_err());
    }

    #[test]
    fn digest_tracks_values_and_frozen_subset() {
        let mut ps = ParameterSet::<f32>::new();
        ps.insert("text.w", Tensor::ones(&[2, 2])).unwrap();
        let v = ps.insert("vision.w", Tensor::ones(&[2, 2])).unwrap();
        ps.freeze_prefix("text.");
        let frozen = ps.frozen_digest();
        let full = ps.full_digest();
        ps.get_mut(v).value.data_mut()[0] = 3.0;
        assert_eq!(frozen, ps.frozen_digest());
        assert_ne!(full, ps.full_digest());
        assert!(ps.insert("text.w", Tensor::ones(&[1])).is_err());
    }
}
