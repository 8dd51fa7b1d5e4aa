//! Binary checkpoint archive.
//!
//! ```text
//! magic "ATTCAPCK" | version u32 | entry count u64
//! entry: kind u8 | name length u64 | name (UTF-8)
//!   kind 0 (tensor):   ndim u64 | extents u64 x ndim | values f64 x product
//!   kind 1 (manifest): length u64 | JSON bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"ATTCAPCK";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest";
const KIND_TENSOR: u8 = 0;
const KIND_MANIFEST: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub tokens: Vec<String>,
    pub min_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab: VocabEntry,
    /// Training configuration that produced the parameters, if any.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, kind: u8, name: &str) {
    out.push(kind);
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
}

pub fn to_bytes(model: &Model, train: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        vocab: VocabEntry {
            tokens: model.vocab.tokens().to_vec(),
            min_count: model.vocab.min_count(),
        },
        train,
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u64(&mut out, model.params.len() as u64 + 1);
    let json = serde_json::to_vec(&manifest)?;
    put_name(&mut out, KIND_MANIFEST, MANIFEST);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    for (name, t) in model.params.iter() {
        put_name(&mut out, KIND_TENSOR, name);
        put_u64(&mut out, t.shape().len() as u64);
        for &e in t.shape() {
            put_u64(&mut out, e as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u64()?;
    let mut manifest: Option<Manifest> = None;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let kind = r.take(1)?[0];
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        match kind {
            KIND_MANIFEST => {
                let n = r.len()?;
                manifest = Some(serde_json::from_slice(r.take(n)?)?);
            }
            KIND_TENSOR => {
                let ndim = r.len()?;
                let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let raw = r.take(
                    n.checked_mul(8)
                        .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
                )?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::new(&shape, data)
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
                params.insert(name, t);
            }
            other => return Err(Error::Checkpoint(format!("unknown entry kind {other}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let manifest = manifest.ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
    let vocab = Vocabulary::from_tokens(manifest.vocab.tokens.clone(), manifest.vocab.min_count);
    let model = Model {
        config: manifest.model.clone(),
        vocab,
        params,
    };
    Ok((model, manifest))
}

pub fn write_checkpoint(
    mut out: impl Write,
    model: &Model,
    train: Option<serde_json::Value>,
) -> Result<()> {
    out.write_all(&to_bytes(model, train)?)?;
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<(Model, Manifest)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn save(path: &Path, model: &Model, train: Option<serde_json::Value>) -> Result<()> {
    fs::write(path, to_bytes(model, train)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    from_bytes(&fs::read(path)?)
}
