//! HSCK checkpoint container.
//!
//! ```text
//! "HSCK" | version u8 (1) | record count u32
//! per record:
//!   name length u32 | name (UTF-8) | dtype u8 (0 f32, 1 u8, 2 f64)
//!   | rank u8 | dims rank x u32 | payload (product(dims) elements)
//! ```
//!
//! All integers and floats are little-endian. Rank 0 holds one element.

use std::path::Path;

use hemoseg_autodiff::{RunningStats, Tensor};

use crate::config::{KvFile, UNet3DConfig};
use crate::error::{Error, FormatError, Result};
use crate::model::{build_unet, Model};
use crate::training::optim::{AdamW, AdamWConfig};
use crate::training::schedule::CosineWarmRestarts;

pub const MAGIC: &[u8; 4] = b"HSCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl RecordData {
    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::U8(v) => v.len(),
            RecordData::F64(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::U8(_) => 1,
            RecordData::F64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: RecordData,
}

impl Record {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Record {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: RecordData::F32(t.data().to_vec()),
        }
    }

    pub fn f64s(name: impl Into<String>, v: Vec<f64>) -> Self {
        Record { name: name.into(), dims: vec![v.len() as u32], data: RecordData::F64(v) }
    }

    pub fn text(name: impl Into<String>, s: &str) -> Self {
        Record { name: name.into(), dims: vec![s.len() as u32], data: RecordData::U8(s.as_bytes().to_vec()) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::CheckpointMismatch(format!("missing record {name:?}")))
    }

    pub fn tensor_f32(&self, name: &str) -> Result<Tensor<f32>> {
        let r = self.require(name)?;
        match &r.data {
            RecordData::F32(v) => {
                let shape: Vec<usize> = r.dims.iter().map(|&d| d as usize).collect();
                let shape = if shape.is_empty() { vec![1] } else { shape };
                Ok(Tensor::from_vec(shape, v.clone())?)
            }
            _ => Err(Error::CheckpointMismatch(format!("record {name:?} is not f32"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.require(name)?.data {
            RecordData::F64(v) => Ok(v),
            _ => Err(Error::CheckpointMismatch(format!("record {name:?} is not f64"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.require(name)?.data {
            RecordData::U8(v) => String::from_utf8(v.clone())
                .map_err(|_| FormatError::Invalid(format!("record {name:?} is not UTF-8")).into()),
            _ => Err(Error::CheckpointMismatch(format!("record {name:?} is not text"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.code());
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::U8(v) => out.extend_from_slice(v),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic { expected: "HSCK", found: magic.to_vec() }.into());
        }
        let version = cur.u8()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| FormatError::Invalid("record name is not UTF-8".into()))?;
            let code = cur.u8()?;
            let rank = cur.u8()? as usize;
            let dims = (0..rank).map(|_| cur.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
            let n = n.ok_or_else(|| FormatError::Invalid(format!("dims {dims:?} overflow")))?;
            let data = match code {
                0 => RecordData::F32(
                    cur.take(n.checked_mul(4).ok_or(FormatError::Invalid("size overflow".into()))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => RecordData::U8(cur.take(n)?.to_vec()),
                2 => RecordData::F64(
                    cur.take(n.checked_mul(8).ok_or(FormatError::Invalid("size overflow".into()))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(FormatError::UnknownDtype(other).into()),
            };
            debug_assert_eq!(data.len(), n);
            records.push(Record { name, dims, data });
        }
        if cur.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - cur.pos).into());
        }
        Ok(Checkpoint { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub const CONFIG_RECORD: &str = "model/config";

/// Configuration, parameters and batch-norm statistics of `model`.
pub fn model_records(model: &Model<f32>) -> Vec<Record> {
    let mut kv = KvFile::new();
    model.config().to_kv("", &mut kv);
    let mut out = vec![Record::text(CONFIG_RECORD, &kv.to_text())];
    for (name, p) in model.param_names().iter().zip(model.params()) {
        out.push(Record::f32(format!("param/{name}"), p));
    }
    for (name, s) in model.stat_names().iter().zip(model.stats()) {
        let c = s.channels();
        out.push(Record::f32(format!("bn/{name}/mean"), &Tensor::from_vec([c], s.mean.clone()).expect("stats")));
        out.push(Record::f32(format!("bn/{name}/var"), &Tensor::from_vec([c], s.var.clone()).expect("stats")));
        out.push(Record::f64s(format!("bn/{name}/updates"), vec![s.updates as f64]));
    }
    out
}

pub fn model_config(ckpt: &Checkpoint) -> Result<UNet3DConfig> {
    let kv = KvFile::parse(&ckpt.text(CONFIG_RECORD)?)?;
    Ok(UNet3DConfig::from_kv(&kv, "", &UNet3DConfig::toy())?)
}

/// Rebuilds a model from the configuration stored in the checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<Model<f32>> {
    let mut model = build_unet(&model_config(ckpt)?, 0)?;
    load_into(&mut model, ckpt)?;
    Ok(model)
}

/// Overwrites parameters and statistics; the stored configuration must
/// equal the model's.
pub fn load_into(model: &mut Model<f32>, ckpt: &Checkpoint) -> Result<()> {
    let stored = model_config(ckpt)?;
    if &stored != model.config() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has levels {} channels {:?}, model has levels {} channels {:?}",
            stored.levels,
            stored.channels,
            model.config().levels,
            model.config().channels
        )));
    }
    let names = model.param_names().to_vec();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let t = ckpt.tensor_f32(&format!("param/{name}"))?;
        if t.shape() != p.shape() {
            return Err(Error::CheckpointMismatch(format!("{name}: shape {:?} vs {:?}", t.shape(), p.shape())));
        }
        *p = t;
    }
    let names = model.stat_names().to_vec();
    for (name, s) in names.iter().zip(model.stats_mut()) {
        let mean = ckpt.tensor_f32(&format!("bn/{name}/mean"))?.into_data();
        let var = ckpt.tensor_f32(&format!("bn/{name}/var"))?.into_data();
        let updates = ckpt.f64s(&format!("bn/{name}/updates"))?;
        if mean.len() != s.channels() || var.len() != s.channels() || updates.len() != 1 {
            return Err(Error::CheckpointMismatch(format!("{name}: statistics size")));
        }
        *s = RunningStats { mean, var, updates: updates[0] as u64 };
    }
    Ok(())
}

pub fn optimizer_records(opt: &AdamW<f32>, names: &[String]) -> Vec<Record> {
    let c = opt.config;
    let mut out = vec![Record::f64s(
        "adam/state",
        vec![opt.step as f64, opt.lr, c.beta1, c.beta2, c.epsilon, c.weight_decay],
    )];
    for ((name, m), v) in names.iter().zip(&opt.m).zip(&opt.v) {
        out.push(Record::f32(format!("adam/m/{name}"), m));
        out.push(Record::f32(format!("adam/v/{name}"), v));
    }
    out
}

pub fn load_optimizer(ckpt: &Checkpoint, names: &[String]) -> Result<AdamW<f32>> {
    let s = ckpt.f64s("adam/state")?;
    if s.len() != 6 {
        return Err(Error::CheckpointMismatch("adam/state must hold 6 values".into()));
    }
    let config = AdamWConfig { beta1: s[2], beta2: s[3], epsilon: s[4], weight_decay: s[5] };
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for name in names {
        m.push(ckpt.tensor_f32(&format!("adam/m/{name}"))?);
        v.push(ckpt.tensor_f32(&format!("adam/v/{name}"))?);
    }
    Ok(AdamW { config, step: s[0] as u64, lr: s[1], m, v })
}

pub fn scheduler_record(s: &CosineWarmRestarts, next_epoch: usize) -> Record {
    Record::f64s("scheduler", vec![s.eta_max, s.eta_min, s.t_0, s.t_mult, next_epoch as f64])
}

/// Scheduler and the epoch at which training resumes.
pub fn load_scheduler(ckpt: &Checkpoint) -> Result<(CosineWarmRestarts, usize)> {
    let s = ckpt.f64s("scheduler")?;
    if s.len() != 5 {
        return Err(Error::CheckpointMismatch("scheduler must hold 5 values".into()));
    }
    Ok((CosineWarmRestarts { eta_max: s[0], eta_min: s[1], t_0: s[2], t_mult: s[3] }, s[4] as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_errors() {
        let mut c = Checkpoint::default();
        c.push(Record::text("meta", "a = 1\n"));
        c.push(Record::f64s("x", vec![1.5, -2.0]));
        c.push(Record { name: "s".into(), dims: vec![], data: RecordData::F32(vec![3.0]) });
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 2]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
    }
}
