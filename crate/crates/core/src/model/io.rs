//! Versioned little-endian weight file.
//!
//! ```text
//! "HALT"                         magic
//! u32 format_version, u32 feature_layout_version
//! u32 input_dim, proj_dim, hidden_dim, num_layers
//! u8 bidirectional, u8 out_norm, f64 dropout_rate, f64 top_q
//! u8 x input_dim                 column mask (1 = active)
//! u32 n_meta, then n_meta x (str key, str value)
//! u32 n_arrays, then n_arrays x (str name, u32 ndim, u64 x ndim dims, f64 x prod(dims))
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes. Arrays must appear in
//! the layout order implied by the config; trailing bytes are rejected.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{HaltConfig, HaltModel, ParamLayout};
use crate::error::{HaltError, Result};
use crate::features::{ColumnMask, FEATURE_DIM, LAYOUT_VERSION};
use crate::trace::write_atomic;

pub const MAGIC: &[u8; 4] = b"HALT";
pub const FORMAT_VERSION: u32 = 1;

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
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub fn write_model(model: &HaltModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer(Vec::with_capacity(model.params.len() * 8 + 4096));
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(LAYOUT_VERSION);
    w.u32(c.input_dim as u32);
    w.u32(c.proj_dim as u32);
    w.u32(c.hidden_dim as u32);
    w.u32(c.num_layers as u32);
    w.u8(c.bidirectional as u8);
    w.u8(c.out_norm as u8);
    w.f64(c.dropout_rate);
    w.f64(c.top_q);
    for &m in &c.column_mask.0 {
        w.u8(m as u8);
    }
    w.u32(model.metadata.len() as u32);
    for (k, v) in &model.metadata {
        w.str(k);
        w.str(v);
    }
    w.u32(model.layout.specs.len() as u32);
    for spec in &model.layout.specs {
        w.str(&spec.name);
        w.u32(spec.shape.len() as u32);
        for &d in &spec.shape {
            w.u64(d as u64);
        }
        for &v in &model.params[spec.range()] {
            w.f64(v);
        }
    }
    w.0
}

pub fn save_model(model: &HaltModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &write_model(model))
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|_| HaltError::ModelFormat("unexpected end of file".into()))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(HaltError::ModelFormat(format!("invalid flag byte {v}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n > remaining {
            return Err(HaltError::ModelFormat("unexpected end of file".into()));
        }
        let mut b = vec![0u8; n];
        self.0
            .read_exact(&mut b)
            .map_err(|_| HaltError::ModelFormat("unexpected end of file".into()))?;
        String::from_utf8(b).map_err(|_| HaltError::ModelFormat("invalid UTF-8 string".into()))
    }
}

pub fn read_model(bytes: &[u8]) -> Result<HaltModel> {
    let mut r = Reader(Cursor::new(bytes));
    let magic: [u8; 4] = r.bytes()?;
    if &magic != MAGIC {
        return Err(HaltError::ModelFormat("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(HaltError::ModelFormat(format!("unsupported format version {version}")));
    }
    let layout_version = r.u32()?;
    if layout_version != LAYOUT_VERSION {
        return Err(HaltError::ModelFormat(format!(
            "feature layout version {layout_version} does not match {LAYOUT_VERSION}"
        )));
    }
    let input_dim = r.u32()? as usize;
    if input_dim != FEATURE_DIM {
        return Err(HaltError::ModelFormat(format!("input_dim {input_dim} != {FEATURE_DIM}")));
    }
    let proj_dim = r.u32()? as usize;
    let hidden_dim = r.u32()? as usize;
    let num_layers = r.u32()? as usize;
    let bidirectional = r.flag()?;
    let out_norm = r.flag()?;
    let dropout_rate = r.f64()?;
    let top_q = r.f64()?;
    let mut mask = [true; FEATURE_DIM];
    for m in &mut mask {
        *m = r.flag()?;
    }
    let config = HaltConfig {
        input_dim,
        proj_dim,
        hidden_dim,
        num_layers,
        bidirectional,
        dropout_rate,
        top_q,
        out_norm,
        column_mask: ColumnMask(mask),
    };
    config
        .validate()
        .map_err(|e| HaltError::ModelFormat(format!("invalid config block: {e}")))?;

    let mut metadata = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.str()?;
        let v = r.str()?;
        metadata.insert(k, v);
    }

    let layout = ParamLayout::new(&config);
    let n_arrays = r.u32()? as usize;
    if n_arrays != layout.specs.len() {
        return Err(HaltError::ModelFormat(format!(
            "expected {} arrays, file has {n_arrays}",
            layout.specs.len()
        )));
    }
    let mut params = vec![0.0; layout.total()];
    for spec in &layout.specs {
        let name = r.str()?;
        if name != spec.name {
            return Err(HaltError::ModelFormat(format!("expected array `{}`, found `{name}`", spec.name)));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if shape != spec.shape {
            return Err(HaltError::ModelFormat(format!(
                "array `{name}` has shape {shape:?}, expected {:?}",
                spec.shape
            )));
        }
        for v in &mut params[spec.range()] {
            *v = r.f64()?;
            if !v.is_finite() {
                return Err(HaltError::ModelFormat(format!("non-finite value in `{name}`")));
            }
        }
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(HaltError::ModelFormat("trailing bytes after last array".into()));
    }
    Ok(HaltModel {
        config,
        params,
        layout,
        metadata,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HaltModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| HaltError::io(path, e))?;
    read_model(&bytes)
}
