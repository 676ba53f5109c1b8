//! TMF: the on-disk container for graphs and training checkpoints.
//!
//! Layout: `b"TMF1"`, a little-endian `u32` header length, a UTF-8 JSON
//! header, then the tensor payload. The payload starts at the first 64-byte
//! boundary after the header and every tensor occupies a 64-byte aligned slot
//! (offsets in the header are relative to the payload start).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::graph::{Graph, Node, Violation, NODE_KINDS};
use super::tensor::{DType, QuantParams, Tensor};

pub const MAGIC: &[u8; 4] = b"TMF1";
pub const ALIGN: usize = 64;
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TmfError {
    #[error("bad magic {0:?}, expected \"TMF1\"")]
    BadMagic([u8; 4]),
    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("header and payload disagree: {0}")]
    LengthMismatch(String),
    #[error("unknown node kind {0:?}")]
    UnknownNodeKind(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid graph: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Either kind of TMF document.
#[derive(Debug, Clone, PartialEq)]
pub enum TmfModel {
    Graph(Graph),
    Checkpoint(Checkpoint),
}

impl TmfModel {
    pub fn graph(&self) -> &Graph {
        match self {
            TmfModel::Graph(g) => g,
            TmfModel::Checkpoint(c) => &c.graph,
        }
    }

    pub fn into_graph(self) -> Graph {
        match self {
            TmfModel::Graph(g) => g,
            TmfModel::Checkpoint(c) => c.graph,
        }
    }

    /// A checkpoint view: graphs become checkpoints without optimizer state.
    pub fn into_checkpoint(self) -> Checkpoint {
        match self {
            TmfModel::Graph(g) => Checkpoint::new(g, 0),
            TmfModel::Checkpoint(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FileKind {
    Graph,
    Checkpoint,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    format: FileKind,
    input_shape: [usize; 3],
    #[serde(default)]
    class_names: Vec<String>,
    #[serde(default)]
    recorded_ranges: BTreeMap<String, [f32; 2]>,
    nodes: Vec<serde_json::Value>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint: Option<CheckpointMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
    #[serde(default)]
    training_only: bool,
    offset: usize,
    length: usize,
}

pub fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Exact file size for a header of `header_len` bytes and the given tensor
/// byte lengths.
pub fn expected_file_size(header_len: usize, tensor_lengths: impl IntoIterator<Item = usize>) -> usize {
    align_up(8 + header_len) + tensor_lengths.into_iter().map(align_up).sum::<usize>()
}

pub fn serialize_graph(graph: &Graph) -> Result<Vec<u8>, TmfError> {
    graph.validate().map_err(TmfError::Invalid)?;
    encode(graph, &BTreeMap::new(), None)
}

pub fn serialize_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, TmfError> {
    ckpt.validate().map_err(TmfError::Invalid)?;
    encode(&ckpt.graph, &ckpt.optimizer_slots, Some(ckpt.meta.clone()))
}

pub fn serialize(model: &TmfModel) -> Result<Vec<u8>, TmfError> {
    match model {
        TmfModel::Graph(g) => serialize_graph(g),
        TmfModel::Checkpoint(c) => serialize_checkpoint(c),
    }
}

fn encode(
    graph: &Graph,
    slots: &BTreeMap<String, Tensor>,
    meta: Option<CheckpointMeta>,
) -> Result<Vec<u8>, TmfError> {
    let mut entries = Vec::new();
    let mut blobs = Vec::new();
    let mut offset = 0;
    for (name, t) in graph.tensors.iter().chain(slots.iter()) {
        let bytes = t.to_le_bytes();
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            dtype: t.dtype(),
            quant: t.quant.clone(),
            training_only: t.training_only,
            offset,
            length: bytes.len(),
        });
        offset += align_up(bytes.len());
        blobs.push(bytes);
    }
    let nodes = graph
        .nodes
        .iter()
        .map(serde_json::to_value)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TmfError::Header(e.to_string()))?;
    let header = Header {
        version: VERSION,
        format: if meta.is_some() { FileKind::Checkpoint } else { FileKind::Graph },
        input_shape: graph.input_shape,
        class_names: graph.class_names.clone(),
        recorded_ranges: graph.recorded_ranges.clone(),
        nodes,
        tensors: entries,
        checkpoint: meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TmfError::Header(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| TmfError::Header("header exceeds 4 GiB".into()))?;

    let total = expected_file_size(json.len(), blobs.iter().map(Vec::len));
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align_up(out.len()), 0);
    for blob in blobs {
        out.extend_from_slice(&blob);
        out.resize(align_up(out.len()), 0);
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

pub fn parse(bytes: &[u8]) -> Result<TmfModel, TmfError> {
    if bytes.len() < 8 {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(TmfError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(TmfError::Truncated { needed: 8, have: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(TmfError::BadMagic(magic));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(TmfError::Truncated { needed: 8 + header_len, have: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| TmfError::Header(e.to_string()))?;
    if header.version != VERSION {
        return Err(TmfError::Header(format!("unsupported version {}", header.version)));
    }

    let mut nodes = Vec::with_capacity(header.nodes.len());
    for value in header.nodes {
        let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or("<missing>");
        if !NODE_KINDS.contains(&kind) {
            return Err(TmfError::UnknownNodeKind(kind.to_string()));
        }
        let node: Node = serde_json::from_value(value).map_err(|e| TmfError::Header(e.to_string()))?;
        nodes.push(node);
    }

    let payload_start = align_up(8 + header_len);
    let expected = expected_file_size(header_len, header.tensors.iter().map(|t| t.length));
    if bytes.len() < expected {
        return Err(TmfError::Truncated { needed: expected, have: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(TmfError::LengthMismatch(format!(
            "file has {} bytes, header accounts for {expected}",
            bytes.len()
        )));
    }

    let mut tensors = BTreeMap::new();
    let mut next_offset = 0;
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.length != numel * entry.dtype.size() {
            return Err(TmfError::LengthMismatch(format!(
                "tensor {:?}: {} bytes for {:?} {:?}",
                entry.name, entry.length, entry.shape, entry.dtype
            )));
        }
        if entry.offset != next_offset {
            return Err(TmfError::LengthMismatch(format!(
                "tensor {:?} at offset {}, expected {next_offset}",
                entry.name, entry.offset
            )));
        }
        next_offset += align_up(entry.length);
        let start = payload_start + entry.offset;
        let data = Tensor::data_from_le_bytes(entry.dtype, &bytes[start..start + entry.length]);
        tensors.insert(
            entry.name,
            Tensor {
                shape: entry.shape,
                data,
                quant: entry.quant,
                training_only: entry.training_only,
            },
        );
    }

    let mut graph = Graph {
        input_shape: header.input_shape,
        nodes,
        tensors,
        class_names: header.class_names,
        recorded_ranges: header.recorded_ranges,
    };
    match (header.format, header.checkpoint) {
        (FileKind::Graph, _) => Ok(TmfModel::Graph(graph)),
        (FileKind::Checkpoint, meta) => {
            let referenced: std::collections::BTreeSet<String> = graph
                .nodes
                .iter()
                .flat_map(|n| n.op.weight_refs().into_iter().map(|(t, _)| t.to_string()))
                .collect();
            let slot_names: Vec<String> = graph
                .tensors
                .iter()
                .filter(|(name, t)| t.training_only && !referenced.contains(*name))
                .map(|(name, _)| name.clone())
                .collect();
            let optimizer_slots = slot_names
                .into_iter()
                .map(|n| {
                    let t = graph.tensors.remove(&n).unwrap();
                    (n, t)
                })
                .collect();
            Ok(TmfModel::Checkpoint(Checkpoint {
                graph,
                optimizer_slots,
                meta: meta.unwrap_or_default(),
            }))
        }
    }
}

pub fn write_file(path: impl AsRef<Path>, model: &TmfModel) -> Result<usize, TmfError> {
    let bytes = serialize(model)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TmfModel, TmfError> {
    parse(&std::fs::read(path)?)
}
