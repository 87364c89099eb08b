//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MFGFORGE"
//! version  u32
//! count    u32      number of sections
//! section  tag u8 (0 text, 1 f64, 2 u64) | name len u16 | name | len u64 | payload
//! ...
//! sha256   32 bytes over everything above
//! ```
//!
//! Text payloads are UTF-8 bytes; numeric payloads are `len` values of 8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MFGFORGE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
enum Section {
    Text(String),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

/// Ordered collection of named sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Section)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.sections.push((name.into(), Section::Text(text.into())));
    }

    pub fn put_f64(&mut self, name: &str, values: &[f64]) {
        self.sections.push((name.into(), Section::F64(values.to_vec())));
    }

    pub fn put_u64(&mut self, name: &str, values: &[u64]) {
        self.sections.push((name.into(), Section::U64(values.to_vec())));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            let tag = match section {
                Section::Text(_) => 0u8,
                Section::F64(_) => 1,
                Section::U64(_) => 2,
            };
            out.push(tag);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match section {
                Section::Text(t) => {
                    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
                Section::F64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Section::U64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses bytes produced by [`Checkpoint::to_bytes`]. `origin` names the
    /// source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic bytes)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch, file is corrupt or truncated"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(&format!("format version {version}, expected {VERSION}")));
        }
        let count = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes"));
        let mut pos: usize = 16;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= body.len())
                .ok_or_else(|| corrupt("section runs past the end of the file"))?;
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag = take(1)?[0];
            let name_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| corrupt("section name is not UTF-8"))?;
            let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            let section = match tag {
                0 => Section::Text(
                    String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("text section is not UTF-8"))?,
                ),
                1 | 2 => {
                    let raw = take(len.checked_mul(8).ok_or_else(|| corrupt("section length overflows"))?)?;
                    let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
                    if tag == 1 {
                        Section::F64(words.map(f64::from_le_bytes).collect())
                    } else {
                        Section::U64(words.map(u64::from_le_bytes).collect())
                    }
                }
                t => return Err(corrupt(&format!("unknown section tag {t}"))),
            };
            sections.push((name, section));
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after the last section"));
        }
        Ok(Self { sections })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn find(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.find(name) {
            Some(Section::Text(t)) => Ok(t),
            _ => Err(missing(name, "text")),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.find(name) {
            Some(Section::F64(v)) => Ok(v),
            _ => Err(missing(name, "f64 array")),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.find(name) {
            Some(Section::U64(v)) => Ok(v),
            _ => Err(missing(name, "u64 array")),
        }
    }

    /// Section names and kinds, sorted by name.
    pub fn index(&self) -> BTreeMap<&str, &'static str> {
        self.sections
            .iter()
            .map(|(n, s)| {
                let kind = match s {
                    Section::Text(_) => "text",
                    Section::F64(_) => "f64",
                    Section::U64(_) => "u64",
                };
                (n.as_str(), kind)
            })
            .collect()
    }
}

fn missing(name: &str, kind: &str) -> Error {
    Error::Contract(format!(
        "checkpoint section {name:?} ({kind}) is missing or has the wrong type"
    ))
}
