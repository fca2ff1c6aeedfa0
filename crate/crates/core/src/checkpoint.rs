//! Binary checkpoint format. The byte layout is described in
//! `docs/checkpoint-format.md`; all integers are u32 little-endian.
//!
//! ```text
//! magic     8 bytes  "ADPLNCKP"
//! version   u32
//! hdr_len   u32
//! header    hdr_len bytes of UTF-8 JSON (format tag + experiment config)
//! n_tensors u32
//! per tensor:
//!   name_len u32, name (UTF-8), ndim u32, dims (u32 each),
//!   data (prod(dims) f32 little-endian)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveModel;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::numerics::{Rng, Tensor};
use crate::params::Params;

pub const MAGIC: &[u8; 8] = b"ADPLNCKP";
pub const FORMAT_TAG: &str = "adaplan-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// Optimizer steps taken when the checkpoint was written.
    pub steps_done: usize,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, params: Params<f32>, steps_done: usize) -> Self {
        Checkpoint {
            header: Header {
                format: FORMAT_TAG.to_string(),
                version: VERSION,
                steps_done,
                config,
            },
            params,
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.header.config
    }

    pub fn model(&self) -> Result<AdaptiveModel<f32>> {
        AdaptiveModel::new(self.header.config.model.clone(), self.params.clone())
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        let header = serde_json::to_vec(&self.header)?;
        put_u32(w, len_u32(header.len())?)?;
        w.write_all(&header)?;
        let mut tensors = Vec::new();
        self.params.visit(&mut |name, t| tensors.push((name, t)));
        put_u32(w, len_u32(tensors.len())?)?;
        for (name, t) in tensors {
            put_u32(w, len_u32(name.len())?)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, len_u32(t.shape().len())?)?;
            for &d in t.shape() {
                put_u32(w, len_u32(d)?)?;
            }
            let mut buf = Vec::with_capacity(4 * t.len());
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let hdr_len = get_u32(r)? as usize;
        let header_bytes = get_bytes(r, hdr_len)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.format != FORMAT_TAG || header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "header mismatch: format {:?} version {}",
                header.format, header.version
            )));
        }
        header.config.model.validate()?;

        let n = get_u32(r)? as usize;
        let mut blobs = BTreeMap::new();
        for _ in 0..n {
            let name_len = get_u32(r)? as usize;
            let name = String::from_utf8(get_bytes(r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = get_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(get_u32(r)? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = get_bytes(r, 4 * count)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if blobs.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }

        let mut params = Params::<f32>::init(&header.config.model, &mut Rng::new(0));
        let mut problem = None;
        params.visit_mut(&mut |name, slot| {
            if problem.is_some() {
                return;
            }
            match blobs.remove(&name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    problem = Some(format!(
                        "tensor {name} has shape {:?}, config expects {:?}",
                        t.shape(),
                        slot.shape()
                    ))
                }
                None => problem = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))
}

fn put_u32(w: &mut dyn Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(e)
    }
}

fn get_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut dyn Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut exp = ExperimentConfig::toy();
        exp.model.n_layers = 3;
        exp.model.d_model = 8;
        exp.model.n_heads = 2;
        exp.model.d_mlp = 8;
        exp.model.switchable_start_layer = Some(1);
        exp
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut out = Vec::new();
        c.write_to(&mut out).unwrap();
        out
    }

    #[test]
    fn roundtrip_is_exact() {
        let exp = tiny();
        let params = Params::init(&exp.model, &mut Rng::new(3));
        let ck = Checkpoint::new(exp, params, 17);
        let raw = bytes(&ck);
        let back = Checkpoint::read_from(&mut raw.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(bytes(&back), raw);
    }

    #[test]
    fn layout_prefix() {
        let exp = tiny();
        let ck = Checkpoint::new(exp.clone(), Params::init(&exp.model, &mut Rng::new(0)), 0);
        let raw = bytes(&ck);
        assert_eq!(&raw[..8], b"ADPLNCKP");
        assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 1);
        let hl = u32::from_le_bytes(raw[12..16].try_into().unwrap()) as usize;
        let h: serde_json::Value = serde_json::from_slice(&raw[16..16 + hl]).unwrap();
        assert_eq!(h["format"], "adaplan-checkpoint");
        assert_eq!(h["config"]["model"]["n_layers"], 3);
        let n = u32::from_le_bytes(raw[16 + hl..20 + hl].try_into().unwrap()) as usize;
        assert_eq!(n, ck.params.names().len());
        // First tensor is the token embedding.
        let p = 20 + hl;
        let nl = u32::from_le_bytes(raw[p..p + 4].try_into().unwrap()) as usize;
        assert_eq!(&raw[p + 4..p + 4 + nl], b"embed.token");
        let q = p + 4 + nl;
        assert_eq!(u32::from_le_bytes(raw[q..q + 4].try_into().unwrap()), 2);
        let first = q + 12;
        let v = f32::from_le_bytes(raw[first..first + 4].try_into().unwrap());
        assert_eq!(v, ck.params.model.token_emb.data()[0]);
    }

    #[test]
    fn rejects_bad_input() {
        let exp = tiny();
        let ck = Checkpoint::new(exp.clone(), Params::init(&exp.model, &mut Rng::new(0)), 0);
        let raw = bytes(&ck);

        let mut bad = raw.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).unwrap_err().to_string().contains("magic"));

        let mut bad = raw.clone();
        bad[8] = 9;
        assert!(Checkpoint::read_from(&mut bad.as_slice()).unwrap_err().to_string().contains("version"));

        let cut = &raw[..raw.len() - 3];
        assert!(Checkpoint::read_from(&mut &cut[..]).unwrap_err().to_string().contains("truncated"));

        let mut other = exp.clone();
        other.model.d_model = 4;
        other.model.n_heads = 1;
        let mismatched = Checkpoint {
            header: Checkpoint::new(other, ck.params.clone(), 0).header,
            params: ck.params.clone(),
        };
        let raw = bytes(&mismatched);
        assert!(Checkpoint::read_from(&mut raw.as_slice()).unwrap_err().to_string().contains("shape"));
    }

    #[test]
    fn file_roundtrip() {
        let exp = tiny();
        let ck = Checkpoint::new(exp.clone(), Params::init(&exp.model, &mut Rng::new(1)), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
