//! Binary checkpoint: model config, named parameters, optimizer moments.
//!
//! Layout (little endian):
//! `magic[8] | version u32 | body_len u64 | body | crc32(magic..body) u32`,
//! where the body holds the model config, the parameter table
//! (name, group, shape, raw f64 values) and the optimizer state.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamGroup;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Detector, ModelConfig};
use crate::tensor::Tensor;
use crate::train::optim::OptimizerState;

pub const MAGIC: &[u8; 8] = b"BLDSCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values(&mut self, t: &Tensor) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of body"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size field out of range"))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("parameter name is not UTF-8"))
    }
    fn values(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.d_model,
        c.n_heads,
        c.enc_layers,
        c.dec_layers,
        c.n_queries,
        c.n_categories,
        c.input_size,
        c.ffn_dim,
    ] {
        w.usize(v);
    }
    w.usize(c.backbone_channels.len());
    for &ch in &c.backbone_channels {
        w.usize(ch);
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.usize()?;
    }
    let n = r.usize()?;
    if n > 64 {
        return Err(corrupt("implausible backbone stage count"));
    }
    let backbone_channels = (0..n).map(|_| r.usize()).collect::<Result<_, _>>()?;
    let [d_model, n_heads, enc_layers, dec_layers, n_queries, n_categories, input_size, ffn_dim] = f;
    Ok(ModelConfig {
        d_model,
        n_heads,
        enc_layers,
        dec_layers,
        n_queries,
        n_categories,
        backbone_channels,
        input_size,
        ffn_dim,
    })
}

pub fn encode_checkpoint(model: &Detector, state: &OptimizerState) -> Vec<u8> {
    let mut body = Writer(Vec::new());
    write_config(&mut body, model.config());
    let store = model.params();
    body.usize(store.len());
    for p in store.iter() {
        body.str(&p.name);
        body.u8(p.group.to_u8());
        body.usize(p.value.ndim());
        for &d in p.value.shape() {
            body.usize(d);
        }
        body.values(&p.value);
    }
    body.u64(state.step);
    body.usize(state.m.len());
    for (m, v) in state.m.iter().zip(&state.v) {
        body.values(m);
        body.values(v);
    }
    let mut out = Writer(Vec::with_capacity(HEADER_LEN + body.0.len() + 4));
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.usize(body.0.len());
    out.0.extend_from_slice(&body.0);
    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    out.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Detector, OptimizerState), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (HEADER_LEN as u64).saturating_add(body_len).saturating_add(4);
    if bytes.len() as u64 != expected {
        return Err(corrupt(format!(
            "file is {} bytes, header declares {expected}",
            bytes.len()
        )));
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: &bytes[HEADER_LEN..split],
        pos: 0,
    };
    let cfg = read_config(&mut r)?;
    let mut model = Detector::new(cfg, 0).map_err(|e| corrupt(format!("stored model config is invalid: {e}")))?;
    let n_params = r.usize()?;
    if n_params != model.params().len() {
        return Err(corrupt(format!(
            "{n_params} parameters stored, model has {}",
            model.params().len()
        )));
    }
    for i in 0..n_params {
        let name = r.str()?;
        let group = ParamGroup::from_u8(r.u8()?).ok_or_else(|| corrupt("unknown parameter group"))?;
        let ndim = r.usize()?;
        if ndim > 8 {
            return Err(corrupt("implausible tensor rank"));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| r.usize()).collect::<Result<_, _>>()?;
        let p = model.params_mut().iter_mut().nth(i).expect("count checked");
        if p.name != name || p.group != group || p.value.shape() != shape.as_slice() {
            return Err(corrupt(format!(
                "parameter {i} is {name} {shape:?}, expected {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&r.values(n)?);
    }
    let step = r.u64()?;
    let n_moments = r.usize()?;
    if n_moments != n_params {
        return Err(corrupt("moment count does not match parameter count"));
    }
    let mut state = OptimizerState::new(model.params());
    for i in 0..n_moments {
        let n = state.m[i].numel();
        state.m[i].data_mut().copy_from_slice(&r.values(n)?);
        state.v[i].data_mut().copy_from_slice(&r.values(n)?);
    }
    state.step = step;
    if r.pos != r.buf.len() {
        return Err(corrupt("trailing bytes after optimizer state"));
    }
    Ok((model, state))
}

pub fn save_checkpoint(path: &Path, model: &Detector, state: &OptimizerState) -> Result<()> {
    fs::write(path, encode_checkpoint(model, state)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, OptimizerState)> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Like [`load_checkpoint`] but fails unless the stored config equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<(Detector, OptimizerState)> {
    let (model, state) = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(CheckpointError::ConfigMismatch {
            found: model.config().to_string(),
            expected: expected.to_string(),
        }
        .into());
    }
    Ok((model, state))
}
