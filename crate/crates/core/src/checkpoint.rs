//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GEEPCKPT" | version u32 | n m d L H d_ff max_seq_len (u32 each)
//! mode u8 | neutralized u8
//! vocab: count u32, then (len u32, utf-8) per token
//! professions: count u32, then (len u32, utf-8) per profession
//! manifest: count u32, then per parameter
//!     name (len u32, utf-8) | rank u32 | dims u32.. | offset u64 | bytes u64 | sha256
//! blobs: f32 values, row-major, at manifest offsets from the blob start
//! sha256 of everything above
//! ```
//!
//! Values are computed in f64 and stored as f32, so a loaded checkpoint
//! saves back to the same bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::files;
use crate::model::{MlmModel, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::Mode;
use crate::vocab::{ProfessionLexicon, RoutingTable, Vocab};

pub const MAGIC: &[u8; 8] = b"GEEPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MlmModel,
    pub vocab: Vocab,
    /// Present whenever the model routes professions; may also ride along
    /// on a base checkpoint.
    pub professions: Option<ProfessionLexicon>,
    pub mode: Mode,
    pub neutralized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: [u8; 32],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.model.config();
        if config.vocab_size != self.vocab.len() {
            return Err(Error::Input(format!(
                "model vocabulary {} does not match tokenizer vocabulary {}",
                config.vocab_size,
                self.vocab.len()
            )));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for v in config_fields(config) {
            put_u32(&mut out, to_u32(v)?);
        }
        out.push(self.mode.tag());
        out.push(u8::from(self.neutralized));
        put_strings(&mut out, self.vocab.tokens())?;
        match &self.professions {
            Some(lexicon) => put_strings(&mut out, lexicon.professions())?,
            None => put_u32(&mut out, 0),
        }

        let mut blobs = Vec::new();
        let mut manifest = Vec::new();
        for (_, param) in self.model.params.iter() {
            let start = blobs.len();
            for &v in param.value.data() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::Input(format!(
                        "parameter {} holds a value not representable as a finite f32",
                        param.name()
                    )));
                }
                blobs.extend_from_slice(&narrow.to_le_bytes());
            }
            manifest.push(ManifestEntry {
                name: param.name().to_string(),
                shape: param.value.shape().to_vec(),
                offset: start as u64,
                bytes: (blobs.len() - start) as u64,
                sha256: Sha256::digest(&blobs[start..]).into(),
            });
        }
        put_u32(&mut out, to_u32(manifest.len())?);
        for entry in &manifest {
            put_str(&mut out, &entry.name)?;
            put_u32(&mut out, to_u32(entry.shape.len())?);
            for &dim in &entry.shape {
                put_u32(&mut out, to_u32(dim)?);
            }
            out.extend_from_slice(&entry.offset.to_le_bytes());
            out.extend_from_slice(&entry.bytes.to_le_bytes());
            out.extend_from_slice(&entry.sha256);
        }
        out.extend_from_slice(&blobs);
        let trailer: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Corrupt("whole-file checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let mut fields = [0usize; 7];
        for f in &mut fields {
            *f = r.u32()? as usize;
        }
        let config = ModelConfig {
            vocab_size: fields[0],
            prompt_rows: fields[1],
            d_model: fields[2],
            layers: fields[3],
            heads: fields[4],
            d_ff: fields[5],
            max_seq_len: fields[6],
        };
        let mode = Mode::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown mode tag".into()))?;
        let neutralized = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Corrupt(format!("bad neutralized flag {other}"))),
        };
        let vocab = Vocab::from_tokens(r.strings()?).map_err(corrupt)?;
        let profession_words = r.strings()?;
        let professions = if profession_words.is_empty() {
            None
        } else {
            let (lexicon, warnings) = ProfessionLexicon::from_words(&profession_words).map_err(corrupt)?;
            if !warnings.is_empty() {
                return Err(Error::Corrupt(format!("stored profession list invalid: {warnings}")));
            }
            Some(lexicon)
        };

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            let len = r.u64()?;
            let sha256 = r.take(32)?.try_into().expect("32 bytes");
            manifest.push(ManifestEntry {
                name,
                shape,
                offset,
                bytes: len,
                sha256,
            });
        }
        let blobs = &body[r.pos..];
        let mut params = ParamStore::new();
        let mut covered = 0u64;
        for entry in &manifest {
            let numel: usize = entry.shape.iter().product();
            if entry.bytes != 4 * numel as u64 || entry.offset != covered {
                return Err(Error::Corrupt(format!("manifest entry for {} is inconsistent", entry.name)));
            }
            let end = entry
                .offset
                .checked_add(entry.bytes)
                .filter(|&e| e <= blobs.len() as u64)
                .ok_or_else(|| Error::Corrupt(format!("blob for {} runs past the end", entry.name)))?;
            let blob = &blobs[entry.offset as usize..end as usize];
            if Sha256::digest(blob).as_slice() != entry.sha256 {
                return Err(Error::Corrupt(format!("checksum mismatch in blob {}", entry.name)));
            }
            let data = blob
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let tensor = Tensor::new(entry.shape.clone(), data).map_err(corrupt)?;
            params.add(entry.name.clone(), tensor, true).map_err(corrupt)?;
            covered = end;
        }
        if covered != blobs.len() as u64 {
            return Err(Error::Corrupt("trailing bytes after the last blob".into()));
        }

        let routing = if config.prompt_rows > 0 {
            let lexicon = professions
                .as_ref()
                .ok_or_else(|| Error::Corrupt("prompt rows without a profession list".into()))?;
            if lexicon.len() != config.prompt_rows {
                return Err(Error::Corrupt(format!(
                    "{} prompt rows but {} professions",
                    config.prompt_rows,
                    lexicon.len()
                )));
            }
            RoutingTable::build(&vocab, lexicon).map_err(corrupt)?
        } else {
            RoutingTable::identity(config.vocab_size)
        };
        if vocab.len() != config.vocab_size {
            return Err(Error::Corrupt("vocabulary size disagrees with the model header".into()));
        }
        let model = MlmModel::from_parts(config, params, routing).map_err(corrupt)?;
        Ok(Self {
            model,
            vocab,
            professions,
            mode,
            neutralized,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&files::read_bytes(path)?).map_err(|e| match e {
            Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Manifest of an encoded checkpoint, for byte-level comparisons.
    pub fn manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
        let ckpt = Self::from_bytes(bytes)?;
        let encoded = ckpt.to_bytes()?;
        let mut r = Reader {
            bytes: &encoded,
            pos: MAGIC.len() + 4 + 7 * 4 + 2,
        };
        r.strings()?;
        r.strings()?;
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            out.push(ManifestEntry {
                name,
                shape,
                offset: r.u64()?,
                bytes: r.u64()?,
                sha256: r.take(32)?.try_into().expect("32 bytes"),
            });
        }
        Ok(out)
    }
}

fn corrupt(e: Error) -> Error {
    Error::Corrupt(e.to_string())
}

fn config_fields(c: &ModelConfig) -> [usize; 7] {
    [c.vocab_size, c.prompt_rows, c.d_model, c.layers, c.heads, c.d_ff, c.max_seq_len]
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Range(format!("{v} does not fit the checkpoint's u32 fields")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, to_u32(s.len())?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_strings(out: &mut Vec<u8>, items: &[String]) -> Result<()> {
    put_u32(out, to_u32(items.len())?);
    for s in items {
        put_str(out, s)?;
    }
    Ok(())
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
            .ok_or_else(|| Error::Corrupt("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8 string".into()))
    }

    fn strings(&mut self) -> Result<Vec<String>> {
        let count = self.u32()? as usize;
        (0..count).map(|_| self.string()).collect()
    }
}
