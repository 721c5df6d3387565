//! `.grlw` model files and `.grlc` calibration batches.
//!
//! Model layout: `"GRLW"`, version `u32 = 1`, manifest length `u32`, UTF-8 JSON
//! manifest, then every tensor as little-endian `f32`, row-major, in manifest
//! order with no padding. Calibration layout: `"GRLC"`, version, rank, `rank`
//! dims (first = sample count), then the `f32` payload. All integers are
//! little-endian.

use super::{Activation, AttentionBlock, Block, BlockGraph, ConvBlock, ConvGeometry, DenseBlock, FfnBlock};
use crate::error::{FormatError, GrailError, Result};
use crate::tensor::{Tensor, MAX_RANK};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"GRLW";
pub const CALIB_MAGIC: &[u8; 4] = b"GRLC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub input_shape: Vec<usize>,
    pub blocks: Vec<BlockEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    #[serde(rename = "type")]
    pub kind: String,
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadMeta {
    pub n_heads: usize,
    pub head_dim: usize,
    pub gqa_groups: usize,
    pub causal: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvMeta {
    pub producer_stride: usize,
    pub producer_padding: usize,
    pub consumer_stride: usize,
    pub consumer_padding: usize,
}

/// Offsets and counts are in elements from the start of the payload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

fn block_tensors(block: &Block) -> Vec<(&'static str, &Tensor)> {
    match block {
        Block::Dense(b) => vec![
            ("w_producer", &b.w_producer),
            ("b_producer", &b.b_producer),
            ("w_consumer", &b.w_consumer),
            ("b_consumer", &b.b_consumer),
        ],
        Block::Conv(b) => vec![
            ("w_producer", &b.w_producer),
            ("b_producer", &b.b_producer),
            ("w_consumer", &b.w_consumer),
            ("b_consumer", &b.b_consumer),
        ],
        Block::Ffn(b) => vec![
            ("w_fc", &b.w_fc),
            ("b_fc", &b.b_fc),
            ("w_proj", &b.w_proj),
            ("b_proj", &b.b_proj),
        ],
        Block::Attention(b) => vec![
            ("w_q", &b.w_q),
            ("w_k", &b.w_k),
            ("w_v", &b.w_v),
            ("w_o", &b.w_o),
        ],
    }
}

fn output_width(block: &Block) -> usize {
    match block {
        Block::Dense(b) => b.w_consumer.rows(),
        Block::Conv(b) => b.w_consumer.shape()[0],
        Block::Ffn(b) => b.w_proj.rows(),
        Block::Attention(b) => b.w_o.rows(),
    }
}

pub fn manifest_of(graph: &BlockGraph) -> Manifest {
    let mut offset = 0;
    let blocks = graph
        .blocks()
        .iter()
        .map(|b| {
            let tensors = block_tensors(b)
                .into_iter()
                .map(|(name, t)| {
                    let e = TensorEntry {
                        name: name.to_string(),
                        shape: t.shape().to_vec(),
                        offset,
                        count: t.len(),
                    };
                    offset += t.len();
                    e
                })
                .collect();
            let (activation, heads, conv) = match b {
                Block::Dense(d) => (Some(d.activation), None, None),
                Block::Ffn(f) => (Some(f.activation), None, None),
                Block::Conv(c) => (
                    Some(c.activation),
                    None,
                    Some(ConvMeta {
                        producer_stride: c.producer_geometry.stride,
                        producer_padding: c.producer_geometry.padding,
                        consumer_stride: c.consumer_geometry.stride,
                        consumer_padding: c.consumer_geometry.padding,
                    }),
                ),
                Block::Attention(a) => (
                    None,
                    Some(HeadMeta {
                        n_heads: a.n_heads,
                        head_dim: a.head_dim,
                        gqa_groups: a.gqa_groups,
                        causal: a.causal,
                    }),
                    None,
                ),
            };
            BlockEntry {
                kind: b.kind().to_string(),
                dims: Dims {
                    input: b.input_width(),
                    hidden: b.hidden_width(),
                    output: output_width(b),
                },
                activation,
                heads,
                conv,
                tensors,
            }
        })
        .collect();
    Manifest {
        input_shape: graph.input_shape().to_vec(),
        blocks,
    }
}

pub fn encode_model(graph: &BlockGraph) -> Vec<u8> {
    let manifest = serde_json::to_vec(&manifest_of(graph)).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for b in graph.blocks() {
        for (_, t) in block_tensors(b) {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn save_model(graph: &BlockGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(graph))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BlockGraph> {
    decode_model(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                what: what.to_string(),
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

fn check_header(c: &mut Cursor, magic: &[u8; 4], kind: &'static str) -> Result<(), FormatError> {
    let found = c.take(4, "magic")?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            kind,
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    Ok(())
}

fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

pub fn decode_model(bytes: &[u8]) -> Result<BlockGraph> {
    let mut c = Cursor { bytes, pos: 0 };
    check_header(&mut c, MODEL_MAGIC, "model")?;
    let mlen = c.u32("manifest length")? as usize;
    let mbytes = c.take(mlen, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(mbytes)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    let payload = c.rest();
    let available = payload.len() / 4;

    let mut expected_offset = 0usize;
    for (bi, b) in manifest.blocks.iter().enumerate() {
        for t in &b.tensors {
            let product: usize = t.shape.iter().product();
            if t.count != product {
                return Err(FormatError::ManifestMismatch(format!(
                    "block {bi} tensor {}: count {} but shape {:?} holds {product}",
                    t.name, t.count, t.shape
                ))
                .into());
            }
            if t.offset != expected_offset {
                return Err(FormatError::ManifestMismatch(format!(
                    "block {bi} tensor {}: offset {} but previous tensors end at {expected_offset}",
                    t.name, t.offset
                ))
                .into());
            }
            expected_offset += t.count;
        }
    }
    if expected_offset > available {
        return Err(FormatError::Truncated {
            what: "tensor payload".into(),
            needed: expected_offset * 4,
            available: payload.len(),
        }
        .into());
    }
    if payload.len() != expected_offset * 4 {
        return Err(FormatError::ManifestMismatch(format!(
            "payload holds {} bytes but the manifest declares {}",
            payload.len(),
            expected_offset * 4
        ))
        .into());
    }

    let values = read_f32s(payload);
    let blocks = manifest
        .blocks
        .iter()
        .enumerate()
        .map(|(bi, e)| build_block(e, &values).map_err(|err| manifest_error(bi, err)))
        .collect::<Result<Vec<_>>>()?;
    BlockGraph::new(blocks, manifest.input_shape.clone())
        .map_err(|e| FormatError::Manifest(e.to_string()).into())
}

fn manifest_error(block: usize, e: GrailError) -> GrailError {
    match e {
        GrailError::Format(f) => GrailError::Format(f),
        other => FormatError::Manifest(format!("block {block}: {other}")).into(),
    }
}

fn build_block(e: &BlockEntry, values: &[f64]) -> Result<Block> {
    let get = |name: &str| -> Result<Tensor> {
        let t = e
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| FormatError::Manifest(format!("missing tensor {name}")))?;
        Tensor::new(t.shape.clone(), values[t.offset..t.offset + t.count].to_vec())
    };
    let activation = |default: Option<Activation>| -> Result<Activation> {
        e.activation
            .or(default)
            .ok_or_else(|| FormatError::Manifest(format!("{} block lacks an activation", e.kind)).into())
    };
    let expected: &[&str] = match e.kind.as_str() {
        "dense" | "conv" => &["w_producer", "b_producer", "w_consumer", "b_consumer"],
        "ffn" => &["w_fc", "b_fc", "w_proj", "b_proj"],
        "attention" => &["w_q", "w_k", "w_v", "w_o"],
        other => return Err(FormatError::Manifest(format!("unknown block type {other:?}")).into()),
    };
    if e.tensors.len() != expected.len() {
        return Err(FormatError::Manifest(format!(
            "{} block lists {} tensors, expected {}",
            e.kind,
            e.tensors.len(),
            expected.len()
        ))
        .into());
    }
    let block = match e.kind.as_str() {
        "dense" => Block::Dense(DenseBlock {
            w_producer: get("w_producer")?,
            b_producer: get("b_producer")?,
            activation: activation(None)?,
            w_consumer: get("w_consumer")?,
            b_consumer: get("b_consumer")?,
        }),
        "conv" => {
            let m = e
                .conv
                .ok_or_else(|| FormatError::Manifest("conv block lacks geometry".into()))?;
            Block::Conv(ConvBlock {
                w_producer: get("w_producer")?,
                b_producer: get("b_producer")?,
                activation: activation(None)?,
                w_consumer: get("w_consumer")?,
                b_consumer: get("b_consumer")?,
                producer_geometry: ConvGeometry {
                    stride: m.producer_stride,
                    padding: m.producer_padding,
                },
                consumer_geometry: ConvGeometry {
                    stride: m.consumer_stride,
                    padding: m.consumer_padding,
                },
            })
        }
        "ffn" => Block::Ffn(FfnBlock {
            w_fc: get("w_fc")?,
            b_fc: get("b_fc")?,
            activation: activation(Some(Activation::Gelu))?,
            w_proj: get("w_proj")?,
            b_proj: get("b_proj")?,
        }),
        _ => {
            let h = e
                .heads
                .ok_or_else(|| FormatError::Manifest("attention block lacks head metadata".into()))?;
            Block::Attention(AttentionBlock {
                w_q: get("w_q")?,
                w_k: get("w_k")?,
                w_v: get("w_v")?,
                w_o: get("w_o")?,
                n_heads: h.n_heads,
                head_dim: h.head_dim,
                gqa_groups: h.gqa_groups,
                causal: h.causal,
            })
        }
    };
    block.validate()?;
    if block.hidden_width() != e.dims.hidden || block.input_width() != e.dims.input {
        return Err(FormatError::Manifest(format!(
            "{} block dims {:?} disagree with its tensors",
            e.kind, e.dims
        ))
        .into());
    }
    Ok(block)
}

pub fn encode_calibration(batch: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * batch.rank() + 4 * batch.len());
    out.extend_from_slice(CALIB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(batch.rank() as u32).to_le_bytes());
    for &d in batch.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in batch.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_calibration(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0 };
    check_header(&mut c, CALIB_MAGIC, "calibration")?;
    let rank = c.u32("rank")? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(FormatError::ManifestMismatch(format!(
            "calibration rank {rank} outside 1..={MAX_RANK}"
        ))
        .into());
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(c.u32(&format!("dim {i}"))? as usize);
    }
    if shape[0] == 0 {
        return Err(FormatError::EmptyCalibration.into());
    }
    if shape.contains(&0) {
        return Err(FormatError::ManifestMismatch(format!("zero dimension in {shape:?}")).into());
    }
    let count: usize = shape.iter().product();
    let payload = c.rest();
    if payload.len() < count * 4 {
        return Err(FormatError::Truncated {
            what: "calibration payload".into(),
            needed: count * 4,
            available: payload.len(),
        }
        .into());
    }
    if payload.len() > count * 4 {
        return Err(FormatError::ManifestMismatch(format!(
            "{} trailing bytes after calibration payload",
            payload.len() - count * 4
        ))
        .into());
    }
    Tensor::new(shape, read_f32s(payload))
}

pub fn save_calibration(batch: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_calibration(batch))?;
    Ok(())
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_calibration(&std::fs::read(path)?)
}
