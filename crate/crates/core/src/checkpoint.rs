//! Model persistence: one binary weight file plus a JSON sidecar.
//!
//! Binary layout (little endian): magic `QNCK`, `u32` version, `u32` section
//! count, then per section a `u32` name length, the UTF-8 name, a `u64`
//! value count and the `f64` values. Sections are `backbone` and `head`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, TinyBackbone};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Head, HeadKind, TargetScaling};
use crate::model::QosModel;
use crate::tokenizer::Tokenizer;

const MAGIC: &[u8; 4] = b"QNCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub head_kind: HeadKind,
    pub scaling: TargetScaling,
    pub vocab: Vec<String>,
}

/// `<checkpoint>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_sections(sections: &[(&str, &[f64])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, values) in sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in *values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_sections(bytes: &[u8]) -> Result<Vec<(String, Vec<f64>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?
            .to_string();
        let count = c.u64()? as usize;
        let raw = c.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("section too large".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, values));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn save(model: &QosModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_sections(&[
        ("backbone", &model.backbone.params.data),
        ("head", &model.head.params.data),
    ]);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        encoder: model.backbone.config().clone(),
        fusion: model.head.config().clone(),
        head_kind: model.head.kind(),
        scaling: model.head.scaling,
        vocab: model.tokenizer.tokens().to_vec(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(side.display().to_string(), e))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load(path: &Path) -> Result<QosModel> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut sections = decode_sections(&bytes)?;
    let mut take = |name: &str| {
        sections
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| sections.swap_remove(i).1)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing section {name:?}", path.display())))
    };
    let backbone_data = take("backbone")?;
    let head_data = take("head")?;
    let tokenizer = Tokenizer::from_tokens(sidecar.vocab)?;
    let backbone = TinyBackbone::from_weights(sidecar.encoder.clone(), backbone_data)?;
    let head = Head::from_weights(
        sidecar.head_kind,
        sidecar.fusion,
        sidecar.encoder.hidden_dim,
        sidecar.encoder.num_layers,
        sidecar.scaling,
        head_data,
    )?;
    Ok(QosModel {
        tokenizer,
        backbone,
        head,
    })
}
