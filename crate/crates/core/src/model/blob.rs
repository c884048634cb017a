//! Binary parameter file: magic, little-endian header length, JSON header,
//! then little-endian f32 values in header order.

use serde::{Deserialize, Serialize};

use super::net::{Net, LAYER_NAMES};
use super::Real;
use crate::error::{PalError, Result};

const MAGIC: &[u8; 4] = b"PALW";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    widths: [usize; 3],
    tensors: Vec<Entry>,
}

fn header_of<F: Real>(net: &Net<F>) -> Header {
    let mut tensors = Vec::new();
    for (name, l) in LAYER_NAMES.iter().zip(&net.layers) {
        tensors.push(Entry {
            name: format!("{name}.weight"),
            shape: vec![l.out_c, l.in_c, l.k, l.k],
        });
        tensors.push(Entry {
            name: format!("{name}.bias"),
            shape: vec![l.out_c],
        });
    }
    Header {
        widths: [net.widths.c1, net.widths.c2, net.widths.c3],
        tensors,
    }
}

pub fn encode<F: Real>(net: &Net<F>) -> Vec<u8> {
    let header = serde_json::to_vec(&header_of(net)).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + 4 * net.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for l in &net.layers {
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&(v.to_acc() as f32).to_le_bytes());
        }
    }
    out
}

/// Loads parameters into `net`, which must have the same architecture.
pub fn decode_into<F: Real>(net: &mut Net<F>, blob: &[u8]) -> Result<()> {
    let bad = |m: &str| PalError::InvalidData(format!("parameter blob: {m}"));
    if blob.len() < 8 || &blob[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize;
    let body = blob.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let expected = header_of(net);
    if header.widths != expected.widths
        || header.tensors.len() != expected.tensors.len()
        || header
            .tensors
            .iter()
            .zip(&expected.tensors)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(bad("architecture mismatch"));
    }
    let values = &blob[8 + hlen..];
    if values.len() != 4 * net.parameter_count() {
        return Err(bad("wrong number of values"));
    }
    let mut it = values
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for l in &mut net.layers {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            let x = it.next().unwrap();
            if !x.is_finite() {
                return Err(bad("non-finite value"));
            }
            *v = F::from_acc(x as f64);
        }
    }
    Ok(())
}
