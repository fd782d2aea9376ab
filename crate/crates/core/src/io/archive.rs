//! Binary model archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CGRU1"                       magic
//! u32                           format version
//! u32 + bytes                   JSON metadata
//! u32                           tensor count
//! per tensor:
//!   u32 + bytes                 name (UTF-8)
//!   u8                          dtype (0 = f32, 1 = f64)
//!   u8                          rank
//!   u64 * rank                  extents
//!   payload                     row-major values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 5] = b"CGRU1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Everything besides the tensors: the architecture, where the
/// vocabularies live, and an opaque snapshot of the run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMetadata {
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default)]
    pub source_vocabs: Vec<String>,
    #[serde(default)]
    pub target_vocab: Option<String>,
    #[serde(default)]
    pub run: serde_json::Value,
}

impl ArchiveMetadata {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            version: ARCHIVE_VERSION,
            config,
            source_vocabs: Vec::new(),
            target_vocab: None,
            run: serde_json::Value::Null,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), IoError> {
    let v = u32::try_from(v).map_err(|_| IoError::Validation(format!("{what} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises parameters; `meta.config` must describe `params`.
pub fn encode_archive(params: &ModelParams, meta: &ArchiveMetadata, dtype: Dtype) -> Result<Vec<u8>, IoError> {
    if &meta.config != params.config() {
        return Err(IoError::Validation("metadata config differs from the parameters' config".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    put_u32(&mut out, json.len(), "metadata")?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.tensors().len(), "tensor count")?;
    for (name, t) in params.tensors() {
        put_u32(&mut out, name.len(), "tensor name")?;
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.code());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(IoError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, IoError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<(ModelParams, ArchiveMetadata), IoError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < ARCHIVE_MAGIC.len() || &bytes[..ARCHIVE_MAGIC.len()] != ARCHIVE_MAGIC {
        return Err(IoError::BadMagic);
    }
    r.pos = ARCHIVE_MAGIC.len();
    let version = r.u32("version")?;
    if version != ARCHIVE_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: ArchiveMetadata = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    if meta.version != version {
        return Err(IoError::Validation(format!(
            "header version {version} but metadata version {}",
            meta.version
        )));
    }
    meta.config
        .validate()
        .map_err(|e| IoError::Validation(e.to_string()))?;
    let shapes = meta.config.param_shapes();

    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| IoError::Validation("tensor name is not UTF-8".into()))?
            .to_string();
        if !shapes.contains_key(&name) {
            return Err(IoError::UnknownTensor(name));
        }
        let dtype = match r.u8("dtype")? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            code => return Err(IoError::UnknownDtype { name, code }),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| IoError::Validation(format!("tensor {name:?} extents overflow")))?;
        let payload = r.take(n, "tensor payload")?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| IoError::Validation(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(IoError::Validation(format!("tensor {name:?} appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(IoError::TrailingBytes(bytes.len() - r.pos));
    }
    let params = ModelParams::from_tensors(meta.config.clone(), tensors).map_err(|e| match e {
        ModelError::UnknownTensor(n) => IoError::UnknownTensor(n),
        other => IoError::Validation(other.to_string()),
    })?;
    Ok((params, meta))
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn save_model(
    path: impl AsRef<Path>,
    params: &ModelParams,
    meta: &ArchiveMetadata,
    dtype: Dtype,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let bytes = encode_archive(params, meta, dtype)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, ArchiveMetadata), IoError> {
    decode_archive(&fs::read(path)?)
}
