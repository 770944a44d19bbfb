//! `RSPK` model container.
//!
//! ```text
//! "RSPK"                        4 bytes
//! version                       u32 little-endian
//! descriptor length             u32 little-endian
//! descriptor                    UTF-8 JSON
//! tensor payloads               f32 little-endian, descriptor order
//! checksum                      SHA-256 of every preceding byte
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{Architecture, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSPK";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    folded: bool,
    #[serde(default)]
    timesteps: Option<usize>,
    architecture: Architecture,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A network read back from a container, with the timestep count it was
/// trained at when one was recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredModel {
    pub network: Network,
    pub timesteps: Option<usize>,
}

pub fn write_model(mut w: impl Write, net: &Network, timesteps: Option<usize>) -> Result<()> {
    let params = net.parameters();
    let descriptor = Descriptor {
        folded: net.is_folded(),
        timesteps,
        architecture: net.architecture(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_vec(&descriptor).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    buf.write_u32::<LittleEndian>(text.len() as u32)?;
    buf.extend_from_slice(&text);
    for (_, t) in &params {
        for &v in t.data() {
            buf.write_f32::<LittleEndian>(v)?;
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_model(bytes: &[u8]) -> Result<StoredModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an RSPK container (bad magic)".into()));
    }
    if bytes.len() < 12 + CHECKSUM_LEN {
        return Err(Error::Corruption(format!("file too short ({} bytes)", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Corruption("checksum mismatch".into()));
    }

    let mut cur = Cursor::new(&body[8..]);
    let len = cur.read_u32::<LittleEndian>()? as usize;
    let mut text = vec![0u8; len];
    cur.read_exact(&mut text)
        .map_err(|_| Error::Corruption("descriptor truncated".into()))?;
    let descriptor: Descriptor = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("bad descriptor: {e}")))?;

    let mut tensors = Vec::with_capacity(descriptor.tensors.len());
    for entry in &descriptor.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = vec![0.0f32; n];
        cur.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| Error::Corruption(format!("payload for {} truncated", entry.name)))?;
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if (cur.position() as usize) != body.len() - 8 {
        return Err(Error::Corruption("trailing bytes after tensor payloads".into()));
    }
    let network = Network::from_parameters(&descriptor.architecture, tensors, descriptor.folded)?;
    let names: Vec<String> = network.parameters().into_iter().map(|(n, _)| n).collect();
    if names.iter().ne(descriptor.tensors.iter().map(|e| &e.name)) {
        return Err(Error::Format("tensor names disagree with the architecture".into()));
    }
    Ok(StoredModel {
        network,
        timesteps: descriptor.timesteps,
    })
}

pub fn save_model(net: &Network, timesteps: Option<usize>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, net, timesteps)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<StoredModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    read_model(&bytes)
}
