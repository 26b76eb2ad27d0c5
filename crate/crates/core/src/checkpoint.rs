//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ADCK" | version u32 | arch tag (u32 len + utf-8)
//! config count u32 | { name: u32 len + utf-8, value: f64 } ...
//! param count u32 | { name, ndim u32, dims u32..., data f64... } ...
//! fnv1a-64 digest of everything above, u64
//! ```
//!
//! Config entries and parameters keep their written order, so a checkpoint
//! serializes to identical bytes every time. Writes go to a temp file in the
//! same directory followed by an atomic rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Architecture tag, e.g. `"monolstm"` or `"simul-lstm"`.
    pub arch: String,
    /// Named scalar config values, in a fixed model-defined order.
    pub config: Vec<(String, f64)>,
    /// Named parameter tensors, in a fixed model-defined order.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn config_value(&self, name: &str) -> Result<f64> {
        self.config
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks config entry {name:?}")))
    }

    pub fn config_usize(&self, name: &str) -> Result<usize> {
        let v = self.config_value(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format(format!(
                "config entry {name:?} = {v} is not a non-negative integer"
            )));
        }
        Ok(v as usize)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name:?}")))
    }

    fn serialize_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.arch);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for (name, value) in &self.config {
            write_str(&mut out, name);
            out.extend_from_slice(&value.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            write_str(&mut out, name);
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Digest of the serialized content; doubles as an integrity check.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(&self.serialize_body())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.serialize_body();
        let digest = fnv1a64(&body);
        body.extend_from_slice(&digest.to_le_bytes());
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read(path)?;
        let mut r = Reader { buf: &body, pos: 0 };
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} unsupported (expected {VERSION})"
            )));
        }
        let arch = r.string()?;
        let n_config = r.u32()? as usize;
        let mut config = Vec::with_capacity(n_config);
        for _ in 0..n_config {
            let name = r.string()?;
            let value = r.f64()?;
            config.push((name, value));
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            params.push((name, Tensor::new(shape, data)?.with_grad()));
        }
        let stored = r.u64()?;
        let actual = fnv1a64(&body[..body.len() - 8]);
        if stored != actual {
            return Err(Error::Format(format!(
                "checkpoint {} is corrupt (digest mismatch)",
                path.display()
            )));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            arch,
            config,
            params,
        })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format("checkpoint holds a non-utf8 name".into()))
    }
}
