//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `ILAT`, u32 format version, u32 length of
//! the JSON-encoded [`ModelConfig`] followed by its bytes, then u32 section
//! count. Each section is a u32-length-prefixed UTF-8 name, a u32 tensor
//! count, and per tensor u32 rows, u32 cols and rows·cols f32 values in
//! row-major order. The first section is always `model`, holding the
//! transformer tensors in declaration order; adapter and bridge weights
//! follow as extra sections.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamSet};
use crate::tensor::Tensor;
use rand::SeedableRng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ILAT";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: ModelConfig,
    pub sections: Vec<(String, Vec<Tensor>)>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    put_u32(w, t.rows() as u32)?;
    put_u32(w, t.cols() as u32)?;
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rows = get_u32(r)? as usize;
    let cols = get_u32(r)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(Error::Format(format!("implausible tensor shape {rows}x{cols}")));
    }
    Ok(Tensor::from_vec(rows, cols, read_f32s(r, rows * cols)?))
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let cfg = serde_json::to_vec(&self.config)?;
        put_u32(&mut w, cfg.len() as u32)?;
        w.write_all(&cfg)?;
        put_u32(&mut w, self.sections.len() as u32)?;
        for (name, tensors) in &self.sections {
            put_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, tensors.len() as u32)?;
            for t in tensors {
                write_tensor(&mut w, t)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = get_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; n];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        let n_sections = get_u32(&mut r)?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let len = get_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let count = get_u32(&mut r)?;
            let tensors = (0..count).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
            sections.push((name, tensors));
        }
        Ok(Self { config, sections })
    }

    pub fn section(&self, name: &str) -> Option<&[Tensor]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_slice())
    }

    pub fn from_model(model: &ModelParams) -> Self {
        Self { config: model.config.clone(), sections: vec![("model".into(), cloned(model))] }
    }

    pub fn with_section(mut self, name: &str, set: &impl ParamSet<f32>) -> Self {
        self.sections.push((name.to_string(), cloned(set)));
        self
    }

    pub fn model(&self) -> Result<ModelParams> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelParams::init(self.config.clone(), &mut rng)?;
        load_into(&mut m, self.section("model").ok_or_else(|| Error::Format("missing model section".into()))?)?;
        Ok(m)
    }
}

fn cloned(set: &impl ParamSet<f32>) -> Vec<Tensor> {
    set.tensors().into_iter().cloned().collect()
}

/// Copies `tensors` into `set` in declaration order, checking shapes.
pub fn load_into(set: &mut impl ParamSet<f32>, tensors: &[Tensor]) -> Result<()> {
    let mut dst = set.tensors_mut();
    if dst.len() != tensors.len() {
        return Err(Error::Format(format!("expected {} tensors, found {}", dst.len(), tensors.len())));
    }
    for (i, (d, s)) in dst.iter_mut().zip(tensors).enumerate() {
        if d.shape() != s.shape() {
            return Err(Error::Format(format!("tensor {i}: shape {:?} != expected {:?}", s.shape(), d.shape())));
        }
        if !s.all_finite() {
            return Err(Error::Format(format!("tensor {i} has non-finite entries")));
        }
        **d = s.clone();
    }
    Ok(())
}
