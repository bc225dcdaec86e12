//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HD2TCKPT"
//! version  u32
//! digest   32 bytes  SHA-256 of the model config text
//! count    u32
//! count ×  { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × prod(dims) }
//! adam     u8        0 = absent, 1 = present
//! if adam: count × { step u64, m f64 × len, v f64 × len }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HD2TCKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub params: ParamStore,
    pub has_adam: bool,
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, config_digest: [u8; 32], include_adam: bool) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + params.num_scalars() * 8 * if include_adam { 3 } else { 1 });
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf.push(include_adam as u8);
    if include_adam {
        for (_, p) in params.iter() {
            buf.extend_from_slice(&p.adam.step.to_le_bytes());
            for x in p.adam.m.iter().chain(&p.adam.v) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn err(&self, message: &str) -> Error {
        Error::Checkpoint { path: self.path.to_path_buf(), message: format!("{message} (at byte {})", self.pos) }
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(8)? != MAGIC {
        return Err(c.err("bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(c.err(&format!("unsupported version {version}")));
    }
    let config_digest: [u8; 32] = c.take(32)?.try_into().unwrap();
    let count = c.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = match std::str::from_utf8(c.take(len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return Err(c.err("parameter name is not utf-8")),
        };
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let values = c.f64s(n)?;
        params.insert(name, Tensor::new(shape, values)?).map_err(|e| c.err(&e.to_string()))?;
    }
    let has_adam = match c.take(1)?[0] {
        0 => false,
        1 => true,
        _ => return Err(c.err("bad adam flag")),
    };
    if has_adam {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let n = params.value(id).len();
            let step = c.u64()?;
            let m = c.f64s(n)?;
            let v = c.f64s(n)?;
            let st = &mut params.get_mut(id).adam;
            st.step = step;
            st.m = m;
            st.v = v;
        }
    }
    if c.pos != buf.len() {
        return Err(c.err("trailing bytes"));
    }
    Ok(Checkpoint { config_digest, params, has_adam })
}
