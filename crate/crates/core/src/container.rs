// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk trace container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | `0..8`       | magic `RSCOPE01`                          |
//! | `8..16`      | `u64` manifest length `M`                 |
//! | `16..16+M`   | UTF-8 JSON manifest (keys sorted)         |
//! | rest         | tensor blob, `f32` values                 |
//!
//! Tensor offsets in the manifest are relative to the start of the blob.
//! Tensors are written in a fixed order so that writing the same trace twice
//! produces identical bytes.
//!
//! A trace may leave out `unembed` / `final_norm_weight` / `final_norm_bias`
//! and point `shared_weights` at a weights-only container (same layout,
//! `kind = "weights"`) relative to the trace file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{
    ActivationTrace, AttentionRows, BehavioralRecord, DigitVocab, LayerState, LayerStates,
    ModelMeta, TokenRecord, UnembedBlock,
};

pub const MAGIC: &[u8; 8] = b"RSCOPE01";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: &str = "f32";

const KIND_TRACE: &str = "trace";
const KIND_WEIGHTS: &str = "weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceManifest {
    kind: String,
    format_version: u32,
    prompt_label: String,
    meta: ModelMeta,
    tokens: TokenRecord,
    digits: DigitVocab,
    behavior: Option<BehavioralRecord>,
    continuity_tolerance: f64,
    #[serde(default)]
    shared_weights: Option<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsManifest {
    kind: String,
    format_version: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Deserialize)]
struct KindProbe {
    kind: String,
}

struct BlobWriter {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            blob: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, chunks: &[&[f32]]) {
        let offset = self.blob.len() as u64;
        for chunk in chunks {
            for v in *chunk {
                self.blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype: DTYPE_F32.to_string(),
            shape,
            offset,
            nbytes: self.blob.len() as u64 - offset,
        });
    }
}

fn push_weights(w: &mut BlobWriter, unembed: &UnembedBlock, vocab: usize, d: usize) {
    w.push("unembed", vec![vocab, d], &[&unembed.unembed]);
    w.push("final_norm_weight", vec![d], &[&unembed.final_norm_weight]);
    if let Some(b) = &unembed.final_norm_bias {
        w.push("final_norm_bias", vec![d], &[b]);
    }
}

fn encode(manifest: &impl Serialize, blob: &[u8]) -> Result<Vec<u8>> {
    // Going through `Value` sorts object keys (BTreeMap-backed maps).
    let value = serde_json::to_value(manifest).map_err(|e| Error::Format(e.to_string()))?;
    let json = serde_json::to_vec(&value).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(blob);
    Ok(out)
}

fn trace_blob(trace: &ActivationTrace, include_weights: bool) -> BlobWriter {
    let n = trace.meta.n_layers;
    let d = trace.meta.d_model;
    let mut w = BlobWriter::new();
    w.push("embedding_out", vec![d], &[&trace.states.embedding_out]);
    let before: Vec<&[f32]> = trace
        .states
        .layers
        .iter()
        .map(|l| &l.h_before[..])
        .collect();
    let attn: Vec<&[f32]> = trace
        .states
        .layers
        .iter()
        .map(|l| &l.h_post_attn[..])
        .collect();
    let post: Vec<&[f32]> = trace
        .states
        .layers
        .iter()
        .map(|l| &l.h_post_layer[..])
        .collect();
    w.push("h_before", vec![n, d], &before);
    w.push("h_post_attn", vec![n, d], &attn);
    w.push("h_post_layer", vec![n, d], &post);
    let rows: Vec<&[f32]> = trace.attn.layers.iter().map(|m| &m[..]).collect();
    w.push(
        "attention",
        vec![n, trace.attn.n_heads, trace.attn.seq_len],
        &rows,
    );
    if include_weights {
        push_weights(&mut w, &trace.unembed, trace.meta.vocab_size, d);
    }
    w
}

/// Serializes a trace into container bytes. The trace must validate.
pub fn encode_trace(trace: &ActivationTrace) -> Result<Vec<u8>> {
    encode_trace_inner(trace, None)
}

fn encode_trace_inner(trace: &ActivationTrace, shared: Option<&str>) -> Result<Vec<u8>> {
    trace.validate()?;
    let w = trace_blob(trace, shared.is_none());
    let manifest = TraceManifest {
        kind: KIND_TRACE.to_string(),
        format_version: FORMAT_VERSION,
        prompt_label: trace.prompt_label.clone(),
        meta: trace.meta.clone(),
        tokens: trace.tokens.clone(),
        digits: trace.digits.clone(),
        behavior: trace.behavior.clone(),
        continuity_tolerance: trace.continuity_tolerance,
        shared_weights: shared.map(str::to_string),
        tensors: w.entries,
    };
    encode(&manifest, &w.blob)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a validated trace to `path`.
pub fn write_trace(trace: &ActivationTrace, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_trace(trace)?;
    write_bytes(path.as_ref(), &bytes)
}

/// Writes a trace whose unembedding lives in a shared weights container.
/// `shared_weights` is stored verbatim and resolved relative to the trace's
/// directory on read.
pub fn write_trace_with_shared_weights(
    trace: &ActivationTrace,
    path: impl AsRef<Path>,
    shared_weights: &str,
) -> Result<()> {
    let bytes = encode_trace_inner(trace, Some(shared_weights))?;
    write_bytes(path.as_ref(), &bytes)
}

/// Writes a weights-only container holding `unembed` and the final norm.
pub fn write_shared_weights(
    unembed: &UnembedBlock,
    vocab_size: usize,
    d_model: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    if unembed.unembed.len() != vocab_size * d_model {
        return Err(Error::validation(
            "unembed",
            "shape does not match vocab x d_model",
        ));
    }
    let mut w = BlobWriter::new();
    push_weights(&mut w, unembed, vocab_size, d_model);
    let manifest = WeightsManifest {
        kind: KIND_WEIGHTS.to_string(),
        format_version: FORMAT_VERSION,
        tensors: w.entries,
    };
    write_bytes(path.as_ref(), &encode(&manifest, &w.blob)?)
}

struct Parsed<'a> {
    manifest: &'a [u8],
    blob: &'a [u8],
}

fn split_container(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "container too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic, expected RSCOPE01".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let end = 16u64
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::Format(format!(
                "manifest length {len} exceeds container size {}",
                bytes.len()
            ))
        })? as usize;
    Ok(Parsed {
        manifest: &bytes[16..end],
        blob: &bytes[end..],
    })
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn load_tensors(entries: &[TensorEntry], blob: &[u8]) -> Result<TensorMap> {
    let mut out = BTreeMap::new();
    for e in entries {
        if e.dtype != DTYPE_F32 {
            return Err(Error::Format(format!(
                "tensor `{}` has unsupported dtype {:?}",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel as u64 * 4 {
            return Err(Error::Format(format!(
                "tensor `{}`: nbytes {} does not match shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        let start = e.offset;
        let end = start
            .checked_add(e.nbytes)
            .filter(|&x| x <= blob.len() as u64)
            .ok_or_else(|| {
                Error::Format(format!("tensor `{}` extends past end of blob", e.name))
            })?;
        let data = blob[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out
            .insert(e.name.clone(), (e.shape.clone(), data))
            .is_some()
        {
            return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok(out)
}

fn take(map: &mut TensorMap, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let (got, data) = map
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
    if got != shape {
        return Err(Error::validation(
            name,
            format!("shape {got:?} does not match metadata {shape:?}"),
        ));
    }
    Ok(data)
}

fn split_rows(data: Vec<f32>, row: usize) -> Vec<Vec<f32>> {
    data.chunks_exact(row.max(1)).map(<[f32]>::to_vec).collect()
}

fn take_weights(map: &mut TensorMap, vocab: usize, d: usize) -> Result<UnembedBlock> {
    let unembed = take(map, "unembed", &[vocab, d])?;
    let final_norm_weight = take(map, "final_norm_weight", &[d])?;
    let final_norm_bias = if map.contains_key("final_norm_bias") {
        Some(take(map, "final_norm_bias", &[d])?)
    } else {
        None
    };
    Ok(UnembedBlock {
        unembed,
        final_norm_weight,
        final_norm_bias,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses container bytes into a validated trace. `base_dir` resolves a
/// shared-weights reference.
pub fn decode_trace(bytes: &[u8], base_dir: Option<&Path>) -> Result<ActivationTrace> {
    let parsed = split_container(bytes)?;
    let probe: KindProbe = serde_json::from_slice(parsed.manifest)
        .map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
    if probe.kind != KIND_TRACE {
        return Err(Error::Format(format!(
            "container kind {:?} is not a trace",
            probe.kind
        )));
    }
    let manifest: TraceManifest = serde_json::from_slice(parsed.manifest)
        .map_err(|e| Error::Format(format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let meta = manifest.meta;
    let n = meta.n_layers;
    let d = meta.d_model;
    let seq_len = manifest.tokens.seq_len();
    let mut map = load_tensors(&manifest.tensors, parsed.blob)?;

    let embedding_out = take(&mut map, "embedding_out", &[d])?;
    let before = split_rows(take(&mut map, "h_before", &[n, d])?, d);
    let post_attn = split_rows(take(&mut map, "h_post_attn", &[n, d])?, d);
    let post_layer = split_rows(take(&mut map, "h_post_layer", &[n, d])?, d);
    let attention = split_rows(
        take(&mut map, "attention", &[n, meta.n_heads, seq_len])?,
        meta.n_heads * seq_len,
    );

    let unembed = if map.contains_key("unembed") {
        take_weights(&mut map, meta.vocab_size, d)?
    } else if let Some(rel) = &manifest.shared_weights {
        let path = base_dir.map_or_else(|| PathBuf::from(rel), |b| b.join(rel));
        read_shared_weights(&path, meta.vocab_size, d)?
    } else {
        return Err(Error::Format(
            "missing tensor `unembed` and no shared_weights reference".into(),
        ));
    };
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }

    let layers = before
        .into_iter()
        .zip(post_attn)
        .zip(post_layer)
        .map(|((h_before, h_post_attn), h_post_layer)| LayerState {
            h_before,
            h_post_attn,
            h_post_layer,
        })
        .collect();
    let trace = ActivationTrace {
        attn: AttentionRows {
            n_heads: meta.n_heads,
            seq_len,
            layers: attention,
        },
        meta,
        tokens: manifest.tokens,
        states: LayerStates {
            embedding_out,
            layers,
        },
        unembed,
        digits: manifest.digits,
        behavior: manifest.behavior,
        prompt_label: manifest.prompt_label,
        continuity_tolerance: manifest.continuity_tolerance,
    };
    trace.validate()?;
    Ok(trace)
}

fn read_shared_weights(path: &Path, vocab: usize, d: usize) -> Result<UnembedBlock> {
    let bytes = read_bytes(path)?;
    let parsed = split_container(&bytes)?;
    let manifest: WeightsManifest = serde_json::from_slice(parsed.manifest)
        .map_err(|e| Error::Format(format!("malformed weights manifest: {e}")))?;
    if manifest.kind != KIND_WEIGHTS {
        return Err(Error::Format(format!(
            "{} is not a weights container",
            path.display()
        )));
    }
    let mut map = load_tensors(&manifest.tensors, parsed.blob)?;
    take_weights(&mut map, vocab, d)
}

/// Reads and validates a trace container.
pub fn read_trace(path: impl AsRef<Path>) -> Result<ActivationTrace> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode_trace(&bytes, path.parent())
}

/// File extension used for trace containers.
pub const TRACE_EXTENSION: &str = "rscope";

/// Every `*.rscope` trace container directly inside `dir`, sorted by name.
/// Weights-only containers are skipped.
pub fn list_trace_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(TRACE_EXTENSION) {
            continue;
        }
        let bytes = read_bytes(&path)?;
        if let Ok(parsed) = split_container(&bytes) {
            if let Ok(k) = serde_json::from_slice::<KindProbe>(parsed.manifest) {
                if k.kind == KIND_WEIGHTS {
                    continue;
                }
            }
        }
        out.push(path);
    }
    out.sort();
    Ok(out)
}

/// Reads every trace in a directory, sorted by file name.
pub fn read_trace_dir(dir: impl AsRef<Path>) -> Result<Vec<ActivationTrace>> {
    list_trace_files(dir)?.iter().map(read_trace).collect()
}
