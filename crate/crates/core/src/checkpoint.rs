//! Versioned binary checkpoints.
//!
//! Layout: magic `SEGPOSCK`, `u32` version, `u64` metadata length, the
//! metadata as JSON, `u64` tensor count, then per tensor a `u32` name
//! length, the UTF-8 name, `u64` rows, `u64` cols and row-major `f64`
//! values. All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::encodings::EncodingConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tape::Mat;

const MAGIC: &[u8; 8] = b"SEGPOSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub encoding: EncodingConfig,
    /// Window size the model was trained with.
    pub k: usize,
    pub step: usize,
    pub vocab: Option<Vocab>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, k: usize, step: usize, vocab: Option<&Vocab>) -> Self {
        Self {
            meta: CheckpointMeta {
                model: model.cfg.clone(),
                encoding: model.enc_cfg.clone(),
                k,
                step,
                vocab: vocab.cloned(),
            },
            params: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.meta.model.clone(), self.meta.encoding.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (_, name, m) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Malformed(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_len(&mut r)?;
        let meta: CheckpointMeta = serde_json::from_slice(take_slice(&mut r, meta_len)?)?;
        let count = read_len(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = std::str::from_utf8(take_slice(&mut r, name_len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = read_len(&mut r)?;
            let cols = read_len(&mut r)?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Malformed(format!("tensor {name} truncated")))?;
            let data: Vec<f64> = take_slice(&mut r, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))?;
            params.insert(name, m);
        }
        if !r.is_empty() {
            return Err(Error::Malformed(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Malformed("checkpoint truncated".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(take(r)?)).map_err(|_| Error::Malformed("length overflow".into()))
}

fn take_slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Malformed("checkpoint truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

/// Writes the flat `{name: rows}` JSON export.
pub fn export_json(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&params.to_json())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_json(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ParamStore::from_json(&serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::Scheme;

    fn sample() -> Checkpoint {
        let mut enc = EncodingConfig::plain(8, 4);
        enc.scheme = Scheme::Learned;
        let mut cfg = ModelConfig::desk(12);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 8;
        cfg.n_layers = 1;
        let m = Model::new(cfg, enc, 9).unwrap();
        Checkpoint::from_model(&m, 4, 17, Some(&Vocab::synthetic(12)))
    }

    #[test]
    fn roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.to_model().unwrap();
        let json = dir.path().join("a.json");
        export_json(&ck.params, &json).unwrap();
        let imported = import_json(&json).unwrap();
        for (_, name, v) in ck.params.iter() {
            assert_eq!(imported.get(name), Some(v));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
