//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "FAMCKPT\0"
//! u32    format version
//! u64    config fingerprint
//! u32    metadata entries, each: str key, str value   (str = u32 len + utf-8)
//! u32    tensors, each: str name, u32 ndim, u64 dims.., f64 data..
//! [32]   sha-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::model::ModelConfig;
use crate::numcore::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FAMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Architecture fingerprint: model shape plus adapter shape (dropout excluded).
pub fn config_fingerprint(model: &ModelConfig, adapter: Option<&AdapterConfig>) -> u64 {
    let mut h = Sha256::new();
    for (k, v) in model.to_kv() {
        if k != "model.dropout" {
            h.update(format!("{k}={v}\n"));
        }
    }
    match adapter {
        Some(a) => {
            for (k, v) in adapter_kv(a) {
                h.update(format!("{k}={v}\n"));
            }
        }
        None => h.update("adapter=none\n"),
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn adapter_kv(a: &AdapterConfig) -> Vec<(String, String)> {
    vec![
        ("adapter.model_dim".into(), a.model_dim.to_string()),
        ("adapter.bottleneck".into(), a.bottleneck.to_string()),
        ("adapter.init_scale".into(), format!("{:016x}", a.init_scale.to_bits())),
        ("adapter.placement".into(), a.placement.as_str().into()),
    ]
}

pub fn adapter_from_kv(meta: &BTreeMap<String, String>) -> Result<Option<AdapterConfig>> {
    let Some(dim) = meta.get("adapter.model_dim") else {
        return Ok(None);
    };
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {k}")))
    };
    let bad = |k: &str| Error::Integrity(format!("checkpoint has malformed {k}"));
    let model_dim = dim.parse().map_err(|_| bad("adapter.model_dim"))?;
    let bottleneck = field("adapter.bottleneck")?
        .parse()
        .map_err(|_| bad("adapter.bottleneck"))?;
    let init_scale = parse_f64_bits(field("adapter.init_scale")?).ok_or_else(|| bad("adapter.init_scale"))?;
    let placement = field("adapter.placement")?.parse()?;
    Ok(Some(AdapterConfig {
        model_dim,
        bottleneck,
        init_scale,
        placement,
    }))
}

pub(crate) fn f64_bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

pub(crate) fn parse_f64_bits(s: &str) -> Option<f64> {
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
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
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("checkpoint string is not utf-8".into()))
    }
}

impl Checkpoint {
    pub fn new(fingerprint: u64) -> Self {
        Checkpoint {
            fingerprint,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            meta.insert(k, v);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            fingerprint,
            meta,
            tensors,
        })
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Integrity(format!("checkpoint has malformed {key}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(|k| self.meta.get(k).map(String::as_str))
    }

    pub fn adapter_config(&self) -> Result<Option<AdapterConfig>> {
        adapter_from_kv(&self.meta)
    }

    /// Error unless the stored fingerprint equals `expected`.
    pub fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
