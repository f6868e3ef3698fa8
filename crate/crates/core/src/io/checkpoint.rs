//! Model checkpoints.
//!
//! Little-endian layout: magic `"WMCK"`, `u16` version, `u32` header length,
//! UTF-8 JSON header, then every tensor listed in the header as consecutive
//! `f64` payloads in header order.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::POINT_CHANNELS;
use crate::nn::{LayerSpec, Tensor};
use crate::pointnet::{ChannelStats, TargetScaling};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const INPUT_MEAN: &str = "input.mean";
const INPUT_STD: &str = "input.std";
const TARGET_STATS: &str = "target.mean_std";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub specs: Vec<LayerSpec>,
    /// Trainable tensors and batch-norm running statistics.
    pub tensors: Vec<(String, Tensor)>,
    pub input_stats: ChannelStats,
    pub target: TargetScaling,
    pub seed: u64,
    /// Echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    specs: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    target_mode: String,
    seed: u64,
    config: serde_json::Value,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let (t_mode, t_stats) = match ckpt.target {
        TargetScaling::Raw => ("raw", [0.0, 1.0]),
        TargetScaling::Standardized { mean, std } => ("standardized", [mean, std]),
    };
    let mut all: Vec<(String, Tensor)> = ckpt.tensors.clone();
    all.push((INPUT_MEAN.into(), Tensor::new(vec![POINT_CHANNELS], ckpt.input_stats.mean.to_vec())?));
    all.push((INPUT_STD.into(), Tensor::new(vec![POINT_CHANNELS], ckpt.input_stats.std.to_vec())?));
    all.push((TARGET_STATS.into(), Tensor::new(vec![2], t_stats.to_vec())?));

    let header = Header {
        specs: ckpt.specs.clone(),
        tensors: all
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        target_mode: t_mode.into(),
        seed: ckpt.seed,
        config: ckpt.config.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let payload: usize = all.iter().map(|(_, t)| t.len() * 8).sum();
    let mut buf = Vec::with_capacity(10 + json.len() + payload);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(
        u32::try_from(json.len()).map_err(|_| Error::Internal("checkpoint header too large".into()))?,
    )
    .unwrap();
    buf.extend_from_slice(&json);
    for (_, t) in &all {
        for v in t.data() {
            buf.write_f64::<LittleEndian>(*v).unwrap();
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let truncated = |_: std::io::Error| Error::format(origin, "checkpoint is truncated");
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(origin, "bad magic, expected \"WMCK\""));
    }
    let version = cur.read_u16::<LittleEndian>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "WMCK checkpoint",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let hlen = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let start = cur.position() as usize;
    if start + hlen > bytes.len() {
        return Err(Error::format(origin, "checkpoint is truncated"));
    }
    let header: Header = serde_json::from_slice(&bytes[start..start + hlen])
        .map_err(|e| Error::format(origin, format!("bad header: {e}")))?;
    cur.set_position((start + hlen) as u64);

    let declared: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    let remaining = bytes.len() - cur.position() as usize;
    if declared != remaining {
        return Err(Error::Dimension {
            op: "checkpoint payload",
            left: vec![declared / 8],
            right: vec![remaining / 8],
        });
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n = entry.shape.iter().product();
        let mut data = vec![0.0; n];
        cur.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }

    let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
        let pos = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(origin, format!("missing tensor {name}")))?;
        let (_, t) = tensors.remove(pos);
        if t.len() != len {
            return Err(Error::Dimension {
                op: "checkpoint tensor",
                left: t.shape().to_vec(),
                right: vec![len],
            });
        }
        Ok(t.into_data())
    };
    let mean = take(INPUT_MEAN, POINT_CHANNELS)?;
    let std = take(INPUT_STD, POINT_CHANNELS)?;
    let t_stats = take(TARGET_STATS, 2)?;
    let target = match header.target_mode.as_str() {
        "raw" => TargetScaling::Raw,
        "standardized" => TargetScaling::Standardized {
            mean: t_stats[0],
            std: t_stats[1],
        },
        other => return Err(Error::format(origin, format!("unknown target mode {other:?}"))),
    };
    Ok(Checkpoint {
        specs: header.specs,
        tensors,
        input_stats: ChannelStats {
            mean: mean.try_into().expect("length checked"),
            std: std.try_into().expect("length checked"),
        },
        target,
        seed: header.seed,
        config: header.config,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
