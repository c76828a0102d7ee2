//! Binary checkpoint container.
//!
//! Layout (little endian): magic `DPIDMCKP`, `u32` version, `u64` iteration,
//! `u32`-length-prefixed UTF-8 config text, then two entry tables (parameters,
//! optimizer state). Each table is a `u32` count followed by entries of
//! `u32` name length, name, `u32` ndim, `u32` dims, and f32 data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::adam::{Adam, AdamState};
use crate::error::{Error, Result};
use crate::network::ParamStore;

pub const MAGIC: &[u8; 8] = b"DPIDMCKP";
pub const VERSION: u32 = 1;

/// Shape and flat f32 data of one stored array.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_text: String,
    pub params: BTreeMap<String, Entry>,
    pub optimizer: BTreeMap<String, Entry>,
}

fn tensor_entry(t: &Tensor) -> Result<Entry> {
    Ok(Entry {
        dims: t.dims().to_vec(),
        data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
    })
}

fn entry_tensor(e: &Entry, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(e.data.clone(), e.dims.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, adam: Option<&Adam>, iteration: u64, config_text: &str) -> Result<Self> {
        let params = store
            .snapshot()?
            .into_iter()
            .map(|(k, (dims, data))| (k, Entry { dims, data }))
            .collect();
        let mut optimizer = BTreeMap::new();
        if let Some(adam) = adam {
            for (name, st) in &adam.state {
                optimizer.insert(format!("adam.m/{name}"), tensor_entry(&st.m)?);
                optimizer.insert(format!("adam.v/{name}"), tensor_entry(&st.v)?);
                optimizer.insert(
                    format!("adam.step/{name}"),
                    Entry {
                        dims: vec![2],
                        data: split_u64(st.step).to_vec(),
                    },
                );
            }
        }
        Ok(Checkpoint {
            iteration,
            config_text: config_text.to_string(),
            params,
            optimizer,
        })
    }

    /// Copies stored parameters into `store`. Every entry is checked before
    /// anything is written, so a mismatch leaves the store untouched.
    pub fn restore_params(&self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            match self.params.get(name) {
                None => return Err(Error::Incompatible(format!("parameter `{name}` missing from checkpoint"))),
                Some(e) if e.dims != var.dims() => {
                    return Err(Error::Incompatible(format!(
                        "parameter `{name}` has shape {:?} in checkpoint, model expects {:?}",
                        e.dims,
                        var.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| store.get(k).is_none()) {
            return Err(Error::Incompatible(format!("checkpoint parameter `{extra}` is not part of the model")));
        }
        for (name, e) in &self.params {
            store.assign(name, &entry_tensor(e, store.dtype())?)?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, lr: f64, dtype: DType) -> Result<Adam> {
        let mut adam = Adam::new(lr);
        for (key, e) in &self.optimizer {
            let Some(name) = key.strip_prefix("adam.step/") else {
                continue;
            };
            let get = |kind: &str| {
                self.optimizer
                    .get(&format!("adam.{kind}/{name}"))
                    .ok_or_else(|| Error::Format(format!("optimizer entry adam.{kind}/{name} missing")))
            };
            if e.data.len() != 2 {
                return Err(Error::Format(format!("bad step entry for `{name}`")));
            }
            adam.state.insert(
                name.to_string(),
                AdamState {
                    m: entry_tensor(get("m")?, dtype)?,
                    v: entry_tensor(get("v")?, dtype)?,
                    step: join_u64([e.data[0], e.data[1]]),
                },
            );
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        put_str(&mut out, &self.config_text);
        for table in [&self.params, &self.optimizer] {
            out.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for (name, e) in table {
                put_str(&mut out, name);
                out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
                for &d in &e.dims {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in &e.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version} (expected {VERSION})")));
        }
        let iteration = r.u64()?;
        let config_text = r.string()?;
        let params = r.table()?;
        let optimizer = r.table()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            iteration,
            config_text,
            params,
            optimizer,
        })
    }

    /// Atomic write: the file is written beside `path` and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

// Step counters travel as two f32 bit patterns so the table stays all-f32.
fn split_u64(v: u64) -> [f32; 2] {
    [f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

fn join_u64(v: [f32; 2]) -> u64 {
    v[0].to_bits() as u64 | ((v[1].to_bits() as u64) << 32)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    fn table(&mut self) -> Result<BTreeMap<String, Entry>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u32()? as usize;
            let dims = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if out.insert(name.clone(), Entry { dims, data }).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        Ok(out)
    }
}
