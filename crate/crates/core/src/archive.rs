//! Binary tensor archive.
//!
//! Layout: 8-byte magic `HSCOPE01`, little-endian `u64` header length, a JSON
//! header, then little-endian `f32` blobs each starting on a 64-byte boundary.
//! Offsets in the header are absolute file offsets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Weights};
use crate::planted::GroundTruth;

pub const MAGIC: &[u8; 8] = b"HSCOPE01";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    planted: Option<GroundTruth>,
}

/// A loaded archive: the model plus planted ground truth, if recorded.
#[derive(Debug, Clone)]
pub struct Archive {
    pub model: Model<f32>,
    pub planted: Option<GroundTruth>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn to_bytes(model: &Model<f32>, planted: Option<&GroundTruth>) -> Result<Vec<u8>> {
    let named = model.weights.named_tensors();
    // The header length depends on the offsets, so lay out blobs relative to
    // a start that is fixed up once the header size is known.
    let mut rel = Vec::with_capacity(named.len());
    let mut cursor = 0usize;
    for (name, shape, data) in &named {
        rel.push((name.clone(), shape.clone(), cursor));
        cursor = align(cursor + data.len() * 4);
    }
    let mut start = ALIGN;
    let header_json = loop {
        let header = Header {
            spec: model.spec.clone(),
            tensors: rel
                .iter()
                .map(|(name, shape, off)| Entry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset: start + off,
                })
                .collect(),
            planted: planted.cloned(),
        };
        let json = serde_json::to_vec(&header)?;
        let need = align(16 + json.len());
        if need <= start {
            break json;
        }
        start = need;
    };
    let mut out = Vec::with_capacity(start + cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.resize(start, 0);
    for (i, (_, _, data)) in named.iter().enumerate() {
        out.resize(start + rel[i].2, 0);
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(start + cursor, 0);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
    let bad = |m: &str| Error::MalformedArchive(m.to_string());
    if bytes.len() < 16 {
        return Err(bad("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend])
        .map_err(|e| Error::MalformedArchive(format!("header: {e}")))?;
    header.spec.validate()?;

    let mut weights = Weights::<f32>::zeros(&header.spec);
    let expected: BTreeMap<String, Vec<usize>> = weights
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let mut seen = BTreeMap::new();
    for entry in &header.tensors {
        let want = expected
            .get(&entry.name)
            .ok_or_else(|| Error::MalformedArchive(format!("unexpected tensor `{}`", entry.name)))?;
        if &entry.shape != want {
            return Err(Error::Shape(format!(
                "tensor `{}` has shape {:?}, spec requires {:?}",
                entry.name, entry.shape, want
            )));
        }
        if seen.insert(entry.name.clone(), ()).is_some() {
            return Err(Error::MalformedArchive(format!("tensor `{}` listed twice", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry
            .offset
            .checked_add(n * 4)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::MalformedArchive(format!("tensor `{}` is truncated", entry.name)))?;
        let slot = weights.slot_mut(&entry.name).expect("name checked against spec");
        for (dst, chunk) in slot.iter_mut().zip(bytes[entry.offset..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        if slot.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTensor(entry.name.clone()));
        }
    }
    if let Some(missing) = expected.keys().find(|k| !seen.contains_key(*k)) {
        return Err(Error::MalformedArchive(format!("tensor `{missing}` missing")));
    }
    Ok(Archive {
        model: Model::new(header.spec, weights)?,
        planted: header.planted,
    })
}

pub fn save(path: &Path, model: &Model<f32>, planted: Option<&GroundTruth>) -> Result<()> {
    std::fs::write(path, to_bytes(model, planted)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Archive> {
    from_bytes(&std::fs::read(path)?)
}
