//! Versioned checkpoint container for the frozen base model and the plug.
//!
//! Layout: magic `EVCK`, `u32` version, `u32` header length, a JSON header,
//! then every tensor as little-endian `f32` in header order. The header
//! carries a SHA-256 digest of the parameters that is re-checked on load.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::efformer::{EFormerConfig, PlugModule};
use crate::encoders::{BaseModel, EncoderConfig, ImageModel, TaskKind};
use crate::error::{Error, Result};
use crate::nn::Params;

pub const MAGIC: &[u8; 4] = b"EVCK";
pub const VERSION: u32 = 1;

/// SHA-256 over every parameter's name, shape and `f32` bytes, in visiting order.
pub fn param_digest<P: Params<f32>>(p: &P) -> String {
    let mut h = Sha256::new();
    p.visit(&mut |name, t| {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape.len() as u64).to_le_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "section", rename_all = "snake_case")]
pub enum Section {
    Base {
        encoder: EncoderConfig,
        task: TaskKind,
    },
    Plug {
        image_encoder: EncoderConfig,
        bins: usize,
        eformer: EFormerConfig,
        /// Digest of the base model this plug was trained against.
        base_digest: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(flatten)]
    pub section: Section,
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance such as training step or validation score.
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn encode<P: Params<f32>>(section: Section, params: &P, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    params.visit(&mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        section,
        digest: param_digest(params),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_header(bytes: &[u8], origin: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::format(origin, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = 12 + len;
    if bytes.len() < end {
        return Err(Error::format(origin, "truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..end]).map_err(|e| Error::format(origin, format!("header: {e}")))?;
    Ok((header, end))
}

/// Fills `params` from the payload, checking names, shapes and the digest.
fn fill<P: Params<f32>>(params: &mut P, header: &Header, payload: &[u8], origin: &Path, section: &str) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = params.param_shapes();
    let stored: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != stored {
        return Err(Error::format(origin, "tensor layout does not match the declared configuration"));
    }
    let count = params.param_count();
    if payload.len() != count * 4 {
        return Err(Error::format(origin, format!("expected {} payload bytes, found {}", count * 4, payload.len())));
    }
    let mut chunks = payload.chunks_exact(4);
    params.visit_mut(&mut |_, t| {
        for v in t.data.iter_mut() {
            *v = f32::from_le_bytes(chunks.next().expect("length checked").try_into().expect("4 bytes"));
        }
    });
    let computed = param_digest(params);
    if computed != header.digest {
        return Err(Error::DigestMismatch {
            section: section.to_string(),
            stored: header.digest.clone(),
            computed,
        });
    }
    Ok(())
}

pub fn save_base(path: impl AsRef<Path>, base: &BaseModel, meta: serde_json::Value) -> Result<()> {
    base.verify()?;
    let section = Section::Base {
        encoder: base.encoder_config().clone(),
        task: base.task(),
    };
    std::fs::write(path, encode(section, base.model(), meta)?)?;
    Ok(())
}

pub fn load_base(path: impl AsRef<Path>) -> Result<(BaseModel, Header)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (header, off) = read_header(&bytes, path)?;
    let Section::Base { encoder, task } = header.section.clone() else {
        return Err(Error::format(path, "expected a base-model checkpoint"));
    };
    let mut model: ImageModel<f32> = ImageModel::new(encoder, task, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill(&mut model, &header, &bytes[off..], path, "base")?;
    let base = BaseModel::from_parts(model, header.digest.clone())?;
    Ok((base, header))
}

pub fn save_plug(path: impl AsRef<Path>, plug: &PlugModule<f32>, base_digest: &str, meta: serde_json::Value) -> Result<()> {
    let ev = &plug.ev_encoder.config;
    let section = Section::Plug {
        image_encoder: EncoderConfig {
            in_channels: 1,
            ..ev.clone()
        },
        bins: ev.in_channels,
        eformer: plug.eformer.config.clone(),
        base_digest: base_digest.to_string(),
    };
    std::fs::write(path, encode(section, plug, meta)?)?;
    Ok(())
}

/// Loads a plug; when `base` is given, refuses a plug trained against another base.
pub fn load_plug(path: impl AsRef<Path>, base: Option<&BaseModel>) -> Result<(PlugModule<f32>, Header)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (header, off) = read_header(&bytes, path)?;
    let Section::Plug {
        image_encoder,
        bins,
        eformer,
        base_digest,
    } = header.section.clone()
    else {
        return Err(Error::format(path, "expected a plug checkpoint"));
    };
    if let Some(b) = base {
        if b.digest() != base_digest {
            return Err(Error::DigestMismatch {
                section: "plug.base_digest".into(),
                stored: base_digest,
                computed: b.digest().to_string(),
            });
        }
    }
    let mut plug = PlugModule::new(&image_encoder, bins, eformer, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill(&mut plug, &header, &bytes[off..], path, "plug")?;
    Ok((plug, header))
}
