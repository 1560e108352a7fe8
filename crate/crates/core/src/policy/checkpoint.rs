//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, JSON-encoded config, then each named
//! parameter tensor as (name, shape, little-endian float64 payload,
//! SHA-256 checksum of the payload). Loading verifies every checksum.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::policy::{LayerParams, ModelParams, PolicyConfig};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"OARCKPT\0";
const VERSION: u32 = 1;

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(&params.cfg)
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);

    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        let mut payload = Vec::with_capacity(t.data.len() * 8);
        for &v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&payload);
        buf.extend_from_slice(&payload);
        buf.extend_from_slice(&digest);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: PolicyConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    cfg.validate()?;

    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8)?;
        let checksum = r.take(32)?;
        let digest = Sha256::digest(payload);
        if digest.as_slice() != checksum {
            return Err(Error::Checkpoint(format!("checksum mismatch for tensor '{name}'")));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data));
    }

    let mut grab = |name: &str| -> Result<Tensor> {
        tensors.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    };
    let tok_emb = grab("tok_emb")?;
    let pos_emb = grab("pos_emb")?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerParams {
            ln1_g: grab(&format!("layer{i}.ln1_g"))?,
            ln1_b: grab(&format!("layer{i}.ln1_b"))?,
            wq: grab(&format!("layer{i}.wq"))?,
            wk: grab(&format!("layer{i}.wk"))?,
            wv: grab(&format!("layer{i}.wv"))?,
            wo: grab(&format!("layer{i}.wo"))?,
            ln2_g: grab(&format!("layer{i}.ln2_g"))?,
            ln2_b: grab(&format!("layer{i}.ln2_b"))?,
            w1: grab(&format!("layer{i}.w1"))?,
            b1: grab(&format!("layer{i}.b1"))?,
            w2: grab(&format!("layer{i}.w2"))?,
            b2: grab(&format!("layer{i}.b2"))?,
        });
    }
    let lnf_g = grab("lnf_g")?;
    let lnf_b = grab("lnf_b")?;
    let unembed = grab("unembed")?;
    Ok(ModelParams { cfg, tok_emb, pos_emb, layers, lnf_g, lnf_b, unembed })
}
