//! Self-describing checkpoint container.
//!
//! Layout: magic `HSCK` | u32 version | u64 JSON header length | JSON header
//! (config, seed, epoch, parameter count) | parameter blob (f64,
//! little-endian, canonical layer order). Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{build_network, ModelConfig, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub param_count: usize,
}

/// A trained model with its provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network,
}

pub fn save_checkpoint(
    network: &Network,
    seed: u64,
    epoch: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = CheckpointHeader {
        config: network.cfg,
        seed,
        epoch,
        param_count: network.param_count(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)
        .map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for layer in network.params() {
        for &v in layer {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(path, format!("truncated checkpoint: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if version != VERSION {
        return Err(Error::unsupported(
            path,
            format!("checkpoint version {version}; this build reads {VERSION}"),
        ));
    }
    let header_len = r
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::format(path, e.to_string()))? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|e| Error::format(path, format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;

    let mut network = build_network(&header.config, header.seed)?;
    if network.param_count() != header.param_count {
        return Err(Error::format(
            path,
            format!(
                "parameter count mismatch: header says {}, architecture has {}",
                header.param_count,
                network.param_count()
            ),
        ));
    }
    for layer in network.params_mut() {
        for v in layer.iter_mut() {
            *v = r
                .read_f64::<LittleEndian>()
                .map_err(|e| Error::format(path, format!("truncated parameters: {e}")))?;
        }
    }
    if !layer_ended(&mut r) {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    Ok(Checkpoint { header, network })
}

fn layer_ended(r: &mut impl Read) -> bool {
    let mut buf = [0u8; 1];
    matches!(r.read(&mut buf), Ok(0))
}
