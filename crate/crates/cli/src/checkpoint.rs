//! Model checkpoints: magic "LDP1", a 32-bit little-endian format version,
//! then per tensor a length-prefixed name, rank, dims and raw 64-bit
//! little-endian reals. Round-trips are bit-exact.

use anyhow::{bail, Context, Result};
use clipfree_core::layers::Network;
use clipfree_core::numerics::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LDP1";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for d in tensor.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("cannot create checkpoint {}", path.display()))?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("cannot open checkpoint {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(*cur..*cur + n)
            .with_context(|| format!("checkpoint truncated at offset {cur}"))?;
        *cur += n;
        Ok(slice)
    };
    if take(&mut cur, 4)? != MAGIC {
        bail!("bad checkpoint magic, expected LDP1");
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("8 bytes")) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len =
            u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .context("checkpoint tensor name is not utf-8")?;
        let rank = u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("8 bytes")) as usize;
        if rank > 8 {
            bail!("checkpoint tensor {name} claims implausible rank {rank}");
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("8 bytes")) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .with_context(|| format!("checkpoint tensor {name} has overflowing shape {shape:?}"))?;
        // The payload must actually be present before any allocation.
        let payload = take(&mut cur, numel.checked_mul(8).context("payload size overflow")?)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if cur != bytes.len() {
        bail!("trailing bytes after checkpoint payload at offset {cur}");
    }
    Ok(entries)
}

/// Named parameter tensors of a network, in layer order.
pub fn network_entries(network: &Network) -> Vec<(String, Tensor)> {
    network
        .param_names()
        .into_iter()
        .map(|(i, name)| {
            let tensor = network.layers()[i]
                .weight
                .clone()
                .expect("named layers have parameters");
            (name, tensor)
        })
        .collect()
}

/// Load checkpoint entries into a freshly built network. Names and shapes
/// must match the architecture exactly.
pub fn restore_network(network: &mut Network, entries: &[(String, Tensor)]) -> Result<()> {
    let names = network.param_names();
    if names.len() != entries.len() {
        bail!(
            "checkpoint has {} tensors but the model has {} parameterized layers",
            entries.len(),
            names.len()
        );
    }
    for ((index, expected_name), (name, tensor)) in names.iter().zip(entries) {
        if expected_name != name {
            bail!("checkpoint tensor {name} does not match expected {expected_name}");
        }
        let layer = &mut network.layers_mut()[*index];
        let current = layer.weight.as_ref().expect("parameterized layer");
        if current.shape() != tensor.shape() {
            bail!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                current.shape()
            );
        }
        layer.weight = Some(tensor.clone());
    }
    Ok(())
}
