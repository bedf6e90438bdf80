//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "XFCK" | version u32 | dtype u8
//! meta:   count u32, then (key str, value str)*
//! params: count u32, then (name str, rank u8, dims u64*, frozen u8, elements)*
//! optim:  present u8, then peak_lr f64, warmup u64, beta1 f64, beta2 f64, eps f64,
//!         weight_decay f64, step u64, count u32, (name str, len u64, m, v)*
//! sha256 of everything above
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Elements are raw values of `dtype`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, Moments, OptimizerState};
use crate::params::ParameterSet;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"XFCK";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

/// Parameters, optional optimizer state and free-form string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub params: ParameterSet<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(params: ParameterSet<T>) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(FORMAT_VERSION);
        w.0.push(T::DTYPE.code());
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.str(&p.name);
            w.0.push(p.value.shape().len() as u8);
            p.value.shape().iter().for_each(|&d| w.u64(d as u64));
            w.0.push(p.frozen as u8);
            w.elements(p.value.data());
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(o) => {
                w.0.push(1);
                let c = &o.config;
                w.f64(c.peak_lr);
                w.u64(c.warmup_steps);
                for x in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                    w.f64(x);
                }
                w.u64(o.step);
                w.u32(o.moments.len() as u32);
                for (name, m) in &o.moments {
                    w.str(name);
                    w.u64(m.m.len() as u64);
                    w.elements(&m.m);
                    w.elements(&m.v);
                }
            }
        }
        let sum = Sha256::digest(&w.0);
        w.0.extend_from_slice(&sum);
        w.0
    }

    /// Parses and verifies a container. Every failure names what was wrong and where.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 1 + 32 {
            return Err(bad(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(bad("missing XFCK magic; not a checkpoint file".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch; the file is truncated or corrupted".into()));
        }
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| bad(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(bad(format!("stored as {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32("metadata count")? {
            let k = r.str("metadata key")?;
            let v = r.str("metadata value")?;
            meta.insert(k, v);
        }
        let mut params = ParameterSet::new();
        for i in 0..r.u32("parameter count")? {
            let name = r.str("parameter name")?;
            let rank = r.u8("rank")? as usize;
            if rank > MAX_RANK {
                return Err(bad(format!("parameter #{i} `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let frozen = match r.u8("frozen flag")? {
                0 => false,
                1 => true,
                f => return Err(bad(format!("parameter `{name}` has frozen flag {f}"))),
            };
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| bad(format!("parameter `{name}` shape {shape:?} overflows")))?;
            let data = r.elements::<T>(n, &name)?;
            let id = params.insert(&name, Tensor::new(&shape, data)?)?;
            params.get_mut(id).frozen = frozen;
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let peak_lr = r.f64("peak_lr")?;
                let warmup_steps = r.u64("warmup_steps")?;
                let config = AdamWConfig {
                    peak_lr,
                    warmup_steps,
                    beta1: r.f64("beta1")?,
                    beta2: r.f64("beta2")?,
                    eps: r.f64("eps")?,
                    weight_decay: r.f64("weight_decay")?,
                };
                let step = r.u64("optimizer step")?;
                let mut moments = BTreeMap::new();
                for _ in 0..r.u32("moment count")? {
                    let name = r.str("moment name")?;
                    let len = r.u64("moment length")? as usize;
                    let m = r.elements::<T>(len, &name)?;
                    let v = r.elements::<T>(len, &name)?;
                    moments.insert(name, Moments { m, v });
                }
                Some(OptimizerState { config, step, moments })
            }
            f => return Err(bad(format!("optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes after the optimizer section", body.len() - r.pos)));
        }
        Ok(Self { meta, params, optimizer })
    }
}

fn bad(msg: String) -> Error {
    Error::Checkpoint(msg)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn elements<T: Real>(&mut self, xs: &[T]) {
        xs.iter().for_each(|&x| x.write_le(&mut self.0));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("unexpected end of file reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| bad(format!("{what} is not UTF-8")))
    }

    fn elements<T: Real>(&mut self, n: usize, name: &str) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        let total = n.checked_mul(size).ok_or_else(|| bad(format!("`{name}` length overflows")))?;
        let raw = self.take(total, name)?;
        Ok(raw.chunks_exact(size).map(T::read_le).collect())
    }
}
