//! Checksummed weight files and the transfer-learning workflow.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "IRISNET1"
//! version   u32      1
//! spec      u32 length + UTF-8 model description (key=value grammar)
//! records   repeated until the checksum:
//!             u32 name length + UTF-8 name
//!             u32 rank, rank × u64 dims
//!             product(dims) × f32 (IEEE-754)
//! crc32     u32      over every preceding byte
//! ```
//!
//! Records are written in bytewise name order, so equal models produce
//! equal files. Optimizer state is not stored.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, HEAD_PREFIX};

pub const MAGIC: &[u8; 8] = b"IRISNET1";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = model.spec().to_config_string();
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    for (name, t) in model.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptPayload("record runs past end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::CorruptPayload("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::CorruptPayload(format!(
            "file is only {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 + 4 + 4 + 4 {
        return Err(Error::CorruptPayload("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptPayload("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let spec =
        ModelSpec::from_config_str(r.string()?).map_err(|e| Error::SpecMismatch(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    while r.pos < body.len() {
        let name = r.string()?.to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| Error::CorruptPayload(format!("`{name}` has absurd dims {dims:?}")))?;
        let payload = r.take(count * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&dims, data)
            .map_err(|e| Error::CorruptPayload(format!("`{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptPayload(format!("duplicate tensor `{name}`")));
        }
    }
    Model::from_parts(spec, tensors)
}

/// Writes the model atomically (temporary file in the same directory, then rename).
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name"),
        )
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// How a pretrained backbone is reused on a new task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeMode {
    /// Only the new classifier head is trained.
    FeatureExtractor,
    /// Every parameter is trained, starting from the pretrained values.
    FullFinetune,
}

impl FreezeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feature_extractor" => Some(Self::FeatureExtractor),
            "full_finetune" => Some(Self::FullFinetune),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FeatureExtractor => "feature_extractor",
            Self::FullFinetune => "full_finetune",
        }
    }
}

/// Applies a freeze mode to a model whose head has just been replaced.
pub fn apply_freeze_mode(model: &mut Model, mode: FreezeMode) -> Result<()> {
    model.unfreeze_all();
    match mode {
        FreezeMode::FeatureExtractor => model.freeze_all_except(&[HEAD_PREFIX]),
        FreezeMode::FullFinetune => Ok(()),
    }
}

/// Loads pretrained weights, swaps in a `new_classes`-way head and freezes
/// according to `mode`.
pub fn transfer(
    pretrained: &Path,
    new_classes: usize,
    mode: FreezeMode,
    seed: u64,
) -> Result<Model> {
    let mut model = load(pretrained)?;
    model.replace_head(new_classes, seed)?;
    apply_freeze_mode(&mut model, mode)?;
    Ok(model)
}
