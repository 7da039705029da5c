//! Versioned binary container for trained networks.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "MEGN"            4 bytes magic
//! version           u16 (currently 1)
//! metadata count    u32, then per entry: key (u16 len + utf8), value (u16 len + utf8)
//! network count     u32, then per network:
//!   name            u16 len + utf8
//!   layer count     u32, then per layer:
//!     kind          u8   0 = dense, 1 = layer norm, 2 = parameter-free normalize
//!     activation    u8   0 = none, 1 = relu, 2 = tanh (dense only)
//!     in, out       u32, u32 (norm layers: size, size)
//!     epsilon       f32 (norm layers; 0 for dense)
//!     payload       f32 values: dense weights [out*in] then bias [out];
//!                   layer norm gain [size] then offset [size]; normalize: none
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::layers::{Activation, Dense, LayerNorm};
use super::network::{Layer, Mlp};
use super::tensor::Tensor;
use super::NnError;

pub const MODEL_MAGIC: &[u8; 4] = b"MEGN";
pub const MODEL_VERSION: u16 = 1;

/// Named networks plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct ModelFile {
    pub metadata: BTreeMap<String, String>,
    pub networks: Vec<Mlp<f32>>,
}

impl ModelFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn with_network(mut self, net: Mlp<f32>) -> Self {
        self.networks.push(net);
        self
    }

    pub fn network(&self, name: &str) -> Result<&Mlp<f32>, NnError> {
        self.networks
            .iter()
            .find(|n| n.name() == name)
            .ok_or_else(|| NnError::Format(format!("missing network {name:?}")))
    }

    pub fn take_network(&mut self, name: &str) -> Result<Mlp<f32>, NnError> {
        let idx = self
            .networks
            .iter()
            .position(|n| n.name() == name)
            .ok_or_else(|| NnError::Format(format!("missing network {name:?}")))?;
        Ok(self.networks.remove(idx))
    }

    pub fn meta(&self, key: &str) -> Result<&str, NnError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NnError::Format(format!("missing metadata {key:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.networks.len() as u32).to_le_bytes());
        for net in &self.networks {
            put_str(&mut out, net.name());
            out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
            for layer in net.layers() {
                match layer {
                    Layer::Dense(d) => {
                        out.push(0);
                        out.push(d.activation().code());
                        out.extend_from_slice(&(d.in_features() as u32).to_le_bytes());
                        out.extend_from_slice(&(d.out_features() as u32).to_le_bytes());
                        out.extend_from_slice(&0f32.to_le_bytes());
                        put_floats(&mut out, d.weights().data());
                        put_floats(&mut out, d.bias().data());
                    }
                    Layer::Norm(n) => {
                        out.push(if n.is_affine() { 1 } else { 2 });
                        out.push(0);
                        out.extend_from_slice(&(n.size() as u32).to_le_bytes());
                        out.extend_from_slice(&(n.size() as u32).to_le_bytes());
                        out.extend_from_slice(&n.epsilon().to_le_bytes());
                        if n.is_affine() {
                            put_floats(&mut out, n.gain().data());
                            put_floats(&mut out, n.offset().data());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(NnError::Format(format!("unsupported model version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut networks = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut net = Mlp::new(name.clone());
            let count = r.u32()?;
            for idx in 0..count {
                let label = format!("{name}.{idx}");
                let kind = r.u8()?;
                let act = r.u8()?;
                let a = r.u32()? as usize;
                let b = r.u32()? as usize;
                let eps = r.f32()?;
                let layer = match kind {
                    0 => {
                        let activation = Activation::from_code(act)
                            .ok_or_else(|| NnError::Format(format!("bad activation {act}")))?;
                        let w = Tensor::new(vec![b, a], r.floats(a * b)?)?;
                        let bias = Tensor::vector(r.floats(b)?);
                        Layer::Dense(Dense::from_parts(label, w, bias, activation)?)
                    }
                    1 => {
                        let gain = Tensor::vector(r.floats(a)?);
                        let offset = Tensor::vector(r.floats(a)?);
                        Layer::Norm(LayerNorm::from_parts(label, gain, offset, eps)?)
                    }
                    2 => Layer::Norm(LayerNorm::parameter_free(label, a, eps as f64)),
                    other => return Err(NnError::Format(format!("unknown layer kind {other}"))),
                };
                net.push(layer);
            }
            networks.push(net);
        }
        if r.pos != bytes.len() {
            return Err(NnError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ModelFile { metadata, networks })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            NnError::Format(format!("truncated model file at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, NnError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnError::Format("invalid utf-8 string".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, NnError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| NnError::Format("size".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
