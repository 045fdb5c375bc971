//! Binary checkpoint: magic, version, step, run config as JSON, named
//! float32 parameters with shapes, and optionally the optimizer moments.
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::RunConfig;
use crate::error::{invalid, Result};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UUGGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed optimizer steps of the stage that wrote it.
    pub step: u64,
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<'a>(out: &mut Vec<u8>, items: impl Iterator<Item = (&'a String, &'a Tensor<f32>)>) {
    let items: Vec<_> = items.collect();
    put_u64(out, items.len() as u64);
    for (name, t) in items {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.buf.get(self.pos..self.pos.saturating_add(n)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => invalid(format!("checkpoint truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor<f32>>> {
        let n = self.u64()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| crate::Error::Validation("non-UTF-8 parameter name".into()))?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(count) = count.filter(|c| c.checked_mul(4).is_some()) else {
                return invalid(format!("parameter {name}: implausible shape {shape:?}"));
            };
            let raw = self.take(count * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return invalid(format!("duplicate parameter {name}"));
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.step);
        let cfg = serde_json::to_vec(&self.config)?;
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(&cfg);
        put_tensors(&mut out, self.params.iter());
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_u64(&mut out, opt.step);
                put_tensors(&mut out, opt.m.iter());
                put_tensors(&mut out, opt.v.iter());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return invalid("not a checkpoint file (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            return invalid(format!("unsupported checkpoint version {version}"));
        }
        let step = r.u64()?;
        let len = r.u64()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(len)?)?;
        let mut params = ParamStore::new();
        for (k, v) in r.tensors()? {
            params.insert(k, v);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut opt = AdamW::new(config.optimizer.adamw());
                opt.step = r.u64()?;
                opt.m = r.tensors()?;
                opt.v = r.tensors()?;
                Some(opt)
            }
            f => return invalid(format!("bad optimizer flag {f}")),
        };
        if r.pos != buf.len() {
            return invalid(format!("{} trailing bytes in checkpoint", buf.len() - r.pos));
        }
        Ok(Self { step, config, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|e| crate::Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
