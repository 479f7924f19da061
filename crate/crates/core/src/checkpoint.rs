//! Versioned, hashed binary container for backbone and model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SMIXCKPT"
//! version      u32      1
//! config       6 × u32  n_layers, n_heads, d_model, d_ff, max_seq_len, vocab_size
//!              u8       causal flag
//! metadata     u32 length + UTF-8 bytes (empty for a bare backbone)
//! sections     u32 count, then per section:
//!                u8 kind (0 = frozen Θ, 1 = trainable Φ), u32 tensor count, then per tensor:
//!                  u32 name length + UTF-8 name, u32 ndim, ndim × u64 extents,
//!                  product(extents) × f64 payload
//! digest       32 bytes SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SMIXCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const KIND_FROZEN: u8 = 0;
const KIND_TRAINABLE: u8 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    /// Free-form UTF-8 (model checkpoints store their JSON-encoded hyper-parameters here).
    pub metadata: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.n_layers,
            c.n_heads,
            c.d_model,
            c.d_ff,
            c.max_seq_len,
            c.vocab_size,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(u8::from(c.causal));
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());

        let frozen: Vec<_> = self.params.frozen().collect();
        let trainable: Vec<_> = self.params.trainable().collect();
        let sections: Vec<(u8, &Vec<(&str, &Tensor)>)> =
            [(KIND_FROZEN, &frozen), (KIND_TRAINABLE, &trainable)]
                .into_iter()
                .filter(|(_, s)| !s.is_empty())
                .collect();
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (kind, tensors) in sections {
            out.push(kind);
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for (name, t) in tensors {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                for &e in t.shape() {
                    out.extend_from_slice(&(e as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Corruption(format!(
                "truncated file of {} bytes",
                bytes.len()
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corruption(
                "content hash does not match payload".into(),
            ));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let causal = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad causal flag {v}"))),
        };
        let config = BackboneConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            d_model: dims[2],
            d_ff: dims[3],
            max_seq_len: dims[4],
            vocab_size: dims[5],
            causal,
        };
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;

        let mut params = ParamStore::new();
        let n_sections = r.u32()?;
        for _ in 0..n_sections {
            let kind = r.u8()?;
            if kind != KIND_FROZEN && kind != KIND_TRAINABLE {
                return Err(Error::Format(format!("unknown section kind {kind}")));
            }
            let count = r.u32()?;
            for _ in 0..count {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec())
                    .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                    .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                    .ok_or_else(|| {
                        Error::Format(format!(
                            "tensor `{name}` declares an impossible shape {shape:?}"
                        ))
                    })?;
                let mut data = Vec::with_capacity(n);
                for chunk in r.take(n * 8)?.chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
                }
                let t = Tensor::new(shape, data)
                    .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
                if kind == KIND_FROZEN {
                    params.insert_frozen(name, t)?;
                } else {
                    params.insert_trainable(name, t)?;
                }
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after sections",
                r.remaining()
            )));
        }
        Ok(Self {
            config,
            metadata,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 digest of the serialised file.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - DIGEST_LEN..])
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
}
