//! Encoder weight files.
//!
//! Layout, all integers little-endian u32 unless noted:
//!
//! ```text
//! magic            4 bytes  "CVW1"
//! num_scales
//! in_channels
//! reduced_channels
//! num_blocks
//! block channels   num_blocks x u32
//! convs_per_block
//! mlp_hidden
//! norm_groups
//! record_count
//! records          record_count x (name_len u16, name utf-8, tensor container)
//! ```
//!
//! Records are written in the canonical [`EncoderWeights::for_each`] order,
//! but loading accepts any order and only insists that every expected name is
//! present exactly once with the shape implied by the config.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{init_encoder, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CVW1";

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u32).to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, file: &str, what: &str) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Format {
        file: file.to_string(),
        reason: format!("truncated {what}"),
    })?;
    Ok(u32::from_le_bytes(buf) as usize)
}

pub fn write_weights<W: Write>(w: &mut W, weights: &EncoderWeights) -> Result<()> {
    let cfg = &weights.config;
    w.write_all(WEIGHTS_MAGIC)?;
    write_u32(w, cfg.num_scales)?;
    write_u32(w, cfg.in_channels)?;
    write_u32(w, cfg.reduced_channels)?;
    write_u32(w, cfg.block_channel_plan.len())?;
    for &c in &cfg.block_channel_plan {
        write_u32(w, c)?;
    }
    write_u32(w, cfg.convs_per_block)?;
    write_u32(w, cfg.mlp_hidden)?;
    write_u32(w, cfg.norm_groups)?;

    let mut records: Vec<(String, Tensor)> = Vec::new();
    weights.for_each(|name, t| records.push((name.to_string(), t.clone())));
    write_u32(w, records.len())?;
    for (name, t) in &records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

use crate::tensor::Tensor;

pub fn read_weights<R: Read>(r: &mut R, file: &str) -> Result<EncoderWeights> {
    let fmt = |reason: String| Error::Format { file: file.to_string(), reason };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header".to_string()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(fmt("bad magic, expected CVW1".to_string()));
    }

    let num_scales = read_u32(r, file, "num_scales")?;
    let in_channels = read_u32(r, file, "in_channels")?;
    let reduced_channels = read_u32(r, file, "reduced_channels")?;
    let num_blocks = read_u32(r, file, "block count")?;
    if num_blocks > 64 {
        return Err(fmt(format!("implausible block count {num_blocks}")));
    }
    let mut block_channel_plan = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        block_channel_plan.push(read_u32(r, file, "block channels")?);
    }
    let convs_per_block = read_u32(r, file, "convs_per_block")?;
    let mlp_hidden = read_u32(r, file, "mlp_hidden")?;
    let norm_groups = read_u32(r, file, "norm_groups")?;

    let config = EncoderConfig {
        num_scales,
        in_channels,
        reduced_channels,
        block_channel_plan,
        convs_per_block,
        mlp_hidden,
        norm_groups,
    };
    config.validate()?;

    let record_count = read_u32(r, file, "record count")?;
    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..record_count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(|_| fmt("truncated record name".to_string()))?;
        let len = u16::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| fmt("truncated record name".to_string()))?;
        let name = String::from_utf8(name)
            .map_err(|_| fmt("record name is not utf-8".to_string()))?;
        let tensor = read_tensor(r, file)?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(fmt(format!("duplicate record {name}")));
        }
    }

    // Build a correctly shaped skeleton from the config, then fill it from
    // the records; any leftover names are rejected.
    let mut weights = init_encoder(&config, 0)?;
    let mut status: Result<()> = Ok(());
    weights.for_each_mut(|name, slot| {
        if status.is_err() {
            return;
        }
        match records.remove(name) {
            None => status = Err(Error::MissingEntry(format!("{file}: tensor {name}"))),
            Some(t) => {
                if t.shape() != slot.shape() {
                    status = Err(Error::Format {
                        file: file.to_string(),
                        reason: format!(
                            "tensor {name} has shape {:?}, config implies {:?}",
                            t.shape(),
                            slot.shape()
                        ),
                    });
                } else {
                    *slot = t;
                }
            }
        }
    });
    status?;
    if let Some(name) = records.keys().next() {
        return Err(fmt(format!("unexpected record {name}")));
    }
    Ok(weights)
}

pub fn save_weights(path: &Path, weights: &EncoderWeights) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<EncoderWeights> {
    let mut r = BufReader::new(File::open(path)?);
    read_weights(&mut r, &path.display().to_string())
}
