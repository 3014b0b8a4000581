//! Binary container: magic, format version, little-endian header length,
//! JSON header, then every tensor's values as little-endian `f64` in
//! header order.

use std::io::{Read, Write};
use std::path::Path;

use ndcore::Tensor;
use serde::{Deserialize, Serialize};

use super::{build, Model, ModelSpec};
use crate::dataio::NormStats;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WQTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    norm_stats: Option<NormStats>,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
}

fn entries(names: &[String], tensors: &[Tensor]) -> Vec<Entry> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| Entry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        spec: model.spec.clone(),
        seed: model.seed,
        norm_stats: model.norm_stats.clone(),
        params: entries(&model.param_names, &model.params),
        buffers: entries(&model.buffer_names, &model.buffers),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.iter().chain(&model.buffers) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_tensors(bytes: &mut &[u8], entries: &[Entry]) -> Result<Vec<Tensor>> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let raw = take(bytes, 8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            Ok(Tensor::new(e.shape.clone(), data)?)
        })
        .collect()
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut bytes = buf.as_slice();
    if take(&mut bytes, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("four bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("eight bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?)?;
    let mut model = build(&header.spec, header.seed)?;
    let params = read_tensors(&mut bytes, &header.params)?;
    let buffers = read_tensors(&mut bytes, &header.buffers)?;
    if !bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let names: Vec<&String> = header.params.iter().map(|e| &e.name).collect();
    let bnames: Vec<&String> = header.buffers.iter().map(|e| &e.name).collect();
    if names != model.param_names.iter().collect::<Vec<_>>() || bnames != model.buffer_names.iter().collect::<Vec<_>>() {
        return Err(Error::Checkpoint("tensor names do not match the architecture".into()));
    }
    for (slot, t) in model.params.iter_mut().zip(params) {
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint("tensor shape does not match the architecture".into()));
        }
        *slot = t;
    }
    model.buffers = buffers;
    model.norm_stats = header.norm_stats;
    Ok(model)
}
