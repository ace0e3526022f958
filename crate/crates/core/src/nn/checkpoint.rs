//! Self-describing binary network checkpoints.
//!
//! Layout: `MPNNCKPT` magic, format version, a JSON header (spec, epoch,
//! seeds), the parameter tensors as shape-prefixed little-endian f64 payloads,
//! and a trailing SHA-256 over everything before it. Round-trips are bit-exact
//! for 64-bit values.

use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::LayerParams;
use super::network::TrainedNetwork;
use super::NetworkSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MPNNCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    epoch: usize,
    init_seed: u64,
    train_seed: Option<u64>,
}

struct Tensor {
    name: String,
    dims: Vec<u64>,
    data: Vec<f64>,
}

pub fn write_checkpoint(path: &Path, net: &TrainedNetwork) -> Result<()> {
    let header = Header {
        spec: net.spec.clone(),
        epoch: net.epoch,
        init_seed: net.init_seed,
        train_seed: net.train_seed,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("checkpoint header serialization: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);

    let tensors = collect_tensors(net);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TrainedNetwork> {
    let corrupt = |reason: &str| Error::CorruptStore {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.bytes(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.bytes(header_len)?)
        .map_err(|e| corrupt(&format!("header: {e}")))?;

    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| corrupt("tensor name not utf-8"))?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()?);
        }
        let count = dims.iter().product::<u64>() as usize;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_bits(r.u64()?));
        }
        tensors.push(Tensor { name, dims, data });
    }

    let params = rebuild_params(&header.spec, &tensors)
        .ok_or_else(|| corrupt("tensors do not match the spec"))?;
    let net = TrainedNetwork {
        spec: header.spec,
        params,
        epoch: header.epoch,
        init_seed: header.init_seed,
        train_seed: header.train_seed,
    };
    net.spec.validate()?;
    Ok(net)
}

fn collect_tensors(net: &TrainedNetwork) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (i, p) in net.params.iter().enumerate() {
        match p {
            LayerParams::Dense { weights, bias } => {
                out.push(Tensor {
                    name: format!("layer{i}.weights"),
                    dims: weights.shape().iter().map(|&d| d as u64).collect(),
                    data: weights.iter().copied().collect(),
                });
                out.push(Tensor {
                    name: format!("layer{i}.bias"),
                    dims: vec![bias.len() as u64],
                    data: bias.to_vec(),
                });
            }
            LayerParams::Conv { weights, bias } => {
                out.push(Tensor {
                    name: format!("layer{i}.weights"),
                    dims: weights.shape().iter().map(|&d| d as u64).collect(),
                    data: weights.iter().copied().collect(),
                });
                out.push(Tensor {
                    name: format!("layer{i}.bias"),
                    dims: vec![bias.len() as u64],
                    data: bias.to_vec(),
                });
            }
            LayerParams::Empty => {}
        }
    }
    out
}

fn rebuild_params(spec: &NetworkSpec, tensors: &[Tensor]) -> Option<Vec<LayerParams>> {
    let find = |name: &str| tensors.iter().find(|t| t.name == name);
    let mut params = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = match layer {
            super::LayerSpec::Dense { .. } => {
                let w = find(&format!("layer{i}.weights"))?;
                let b = find(&format!("layer{i}.bias"))?;
                if w.dims.len() != 2 {
                    return None;
                }
                LayerParams::Dense {
                    weights: Array2::from_shape_vec(
                        (w.dims[0] as usize, w.dims[1] as usize),
                        w.data.clone(),
                    )
                    .ok()?,
                    bias: Array1::from_vec(b.data.clone()),
                }
            }
            super::LayerSpec::Conv2d { .. } => {
                let w = find(&format!("layer{i}.weights"))?;
                let b = find(&format!("layer{i}.bias"))?;
                if w.dims.len() != 4 {
                    return None;
                }
                LayerParams::Conv {
                    weights: Array4::from_shape_vec(
                        (
                            w.dims[0] as usize,
                            w.dims[1] as usize,
                            w.dims[2] as usize,
                            w.dims[3] as usize,
                        ),
                        w.data.clone(),
                    )
                    .ok()?,
                    bias: Array1::from_vec(b.data.clone()),
                }
            }
            _ => LayerParams::Empty,
        };
        params.push(p);
    }
    Some(params)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}
