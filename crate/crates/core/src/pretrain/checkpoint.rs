//! TCKP1 checkpoint files.
//!
//! ```text
//! "TCKP1" | u32 version | u32 len, JSON TrainConfig | u64 step | 4×u64 rng state
//! | u32 n, n × (u16 len, name | u8 ndim | ndim × u32 | f32 data)
//! | u8 has_optimizer [ u64 t | n × (m f32 data, v f32 data) ]
//! | u32 k, k × (u64 step | f32 loss | f32 lr)
//! ```
//! All integers and reals little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::TrainConfig;
use crate::encoder::TeraModel;
use crate::error::{Result, TeraError};
use crate::numeric::{ParamStore, Tensor};
use crate::rng::TeraRng;

pub const TCKP_MAGIC: &[u8; 5] = b"TCKP1";
pub const TCKP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: TeraRng,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    pub history: Vec<LossPoint>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<TeraModel<f32>> {
        TeraModel::from_store(self.config.model.clone(), self.params.clone())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(TCKP_MAGIC)?;
        w.write_u32::<LittleEndian>(TCKP_VERSION)?;
        let json = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        w.write_u64::<LittleEndian>(self.step)?;
        for s in self.rng.state() {
            w.write_u64::<LittleEndian>(s)?;
        }
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            write_f32s(w, t.data())?;
        }
        match &self.adam {
            None => w.write_u8(0)?,
            Some(a) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(a.t)?;
                for (m, v) in a.m.iter().zip(&a.v) {
                    write_f32s(w, m.data())?;
                    write_f32s(w, v.data())?;
                }
            }
        }
        w.write_u32::<LittleEndian>(self.history.len() as u32)?;
        for p in &self.history {
            w.write_u64::<LittleEndian>(p.step)?;
            w.write_f32::<LittleEndian>(p.loss)?;
            w.write_f32::<LittleEndian>(p.lr)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    /// Parse a checkpoint; `source` names the input in error messages.
    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = bytes;
        let ck = Self::read_from(&mut r, source)?;
        if !r.is_empty() {
            return Err(TeraError::parse(source, "trailing bytes after checkpoint"));
        }
        Ok(ck)
    }

    fn read_from(r: &mut &[u8], source: &str) -> Result<Self> {
        let trunc = |_| TeraError::parse(source, "truncated checkpoint");
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic[..4] != b"TCKP" {
            return Err(TeraError::parse(source, "not a TCKP checkpoint"));
        }
        if &magic != TCKP_MAGIC {
            return Err(TeraError::Incompatible(format!(
                "{source}: checkpoint format {} is not supported (expected TCKP1)",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != TCKP_VERSION {
            return Err(TeraError::Incompatible(format!(
                "{source}: checkpoint version {version}, this build reads version {TCKP_VERSION}"
            )));
        }
        let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let json = take(r, len).ok_or_else(|| TeraError::parse(source, "truncated config"))?;
        let config: TrainConfig =
            serde_json::from_slice(json).map_err(|e| TeraError::parse(source, format!("config: {e}")))?;
        let step = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let mut s = [0u64; 4];
        for v in &mut s {
            *v = r.read_u64::<LittleEndian>().map_err(trunc)?;
        }
        let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
            let name = take(r, len).ok_or_else(|| TeraError::parse(source, "truncated tensor name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| TeraError::parse(source, "tensor name not UTF-8"))?;
            let ndim = r.read_u8().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
            }
            let count: usize = shape.iter().product();
            let data = read_f32s(r, count).ok_or_else(|| TeraError::parse(source, format!("truncated tensor {name}")))?;
            let t = Tensor::new(shape, data).map_err(|e| TeraError::parse(source, e.to_string()))?;
            params.push(name, t);
        }
        let adam = match r.read_u8().map_err(trunc)? {
            0 => None,
            1 => {
                let t = r.read_u64::<LittleEndian>().map_err(trunc)?;
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for p in params.tensors() {
                    let bad = || TeraError::parse(source, "truncated optimizer state");
                    m.push(Tensor::new(p.shape().to_vec(), read_f32s(r, p.len()).ok_or_else(bad)?)?);
                    v.push(Tensor::new(p.shape().to_vec(), read_f32s(r, p.len()).ok_or_else(bad)?)?);
                }
                Some(AdamState { t, m, v })
            }
            other => return Err(TeraError::parse(source, format!("bad optimizer flag {other}"))),
        };
        let k = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut history = Vec::with_capacity(k.min(1 << 20));
        for _ in 0..k {
            history.push(LossPoint {
                step: r.read_u64::<LittleEndian>().map_err(trunc)?,
                loss: r.read_f32::<LittleEndian>().map_err(trunc)?,
                lr: r.read_f32::<LittleEndian>().map_err(trunc)?,
            });
        }
        let ck = Checkpoint { config, step, rng: TeraRng::from_state(s), params, adam, history };
        ck.model().map_err(|e| TeraError::parse(source, e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::util::write_atomic(path, |w| self.write_to(w).map_err(|e| TeraError::io(path, e)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| TeraError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Loss history as CSV with a header line.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for p in &self.history {
            s.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
        }
        s
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if r.len() < n {
        return None;
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Some(head)
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f32s(r: &mut &[u8], n: usize) -> Option<Vec<f32>> {
    let bytes = take(r, n.checked_mul(4)?)?;
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
