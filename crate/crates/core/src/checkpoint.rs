//! Checkpoints: a JSON manifest (`model.json`) next to a blob of
//! little-endian f32 values (`model.bin`).
//!
//! The manifest lists every tensor with its byte range in the blob and a
//! SHA-256 content hash over names, shapes, values and block metadata.
//! Loading recomputes the hash from the blob as addressed by the manifest,
//! so truncation, bit flips and shuffled offsets are all rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condense::CondensedLayer;
use crate::error::{read_file, Error, Result};
use crate::model::{Attention, Block, ExpertMlp, ModelConfig, MoeLayer, MoeModel, RoutedMoeLayer};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub layer_kind: String,
    /// Original indices of the kept routing experts (condensed layers only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_experts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_gates: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub blocks: Vec<BlockMeta>,
    pub tensors: Vec<TensorEntry>,
    pub content_hash: String,
}

fn block_meta(model: &MoeModel) -> Vec<BlockMeta> {
    model
        .blocks
        .iter()
        .map(|b| match &b.layer {
            MoeLayer::Routed(_) => {
                BlockMeta { layer_kind: "routed".into(), kept_experts: None, fixed_gates: None, origin: None }
            }
            MoeLayer::Condensed(c) => BlockMeta {
                layer_kind: "condensed".into(),
                kept_experts: Some(c.kept_indices.clone()),
                fixed_gates: Some(c.fixed_gates.data().to_vec()),
                origin: Some(c.origin),
            },
        })
        .collect()
}

fn content_hash<'a>(
    config: &ModelConfig,
    blocks: &[BlockMeta],
    tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [u8])>,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(blocks)?);
    for (name, shape, bytes) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for &s in shape {
            h.update((s as u64).to_le_bytes());
        }
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn to_le_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Manifest and blob bytes for `model`.
pub fn encode(model: &MoeModel) -> Result<(Manifest, Vec<u8>)> {
    let named = model.named_tensors();
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(named.len());
    let mut encoded = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let bytes = to_le_bytes(t);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
        encoded.push(bytes);
    }
    let blocks = block_meta(model);
    let hash = content_hash(
        &model.config,
        &blocks,
        entries.iter().zip(&encoded).map(|(e, b)| (e.name.as_str(), e.shape.as_slice(), b.as_slice())),
    )?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: model.config.clone(),
        blocks,
        tensors: entries,
        content_hash: hash,
    };
    Ok((manifest, blob))
}

/// Write `model.json` and `model.bin` into `dir` (created if needed).
pub fn save_checkpoint(model: &MoeModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(model)?;
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE))
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<MoeModel> {
    let (mpath, bpath) = checkpoint_paths(dir);
    let manifest_bytes = read_file(&mpath)?;
    let blob = read_file(&bpath)?;
    decode(&manifest_bytes, &blob)
}

/// Rebuild a model from manifest JSON and blob bytes.
pub fn decode(manifest_json: &[u8], blob: &[u8]) -> Result<MoeModel> {
    let raw: serde_json::Value = serde_json::from_slice(manifest_json)?;
    let version = raw.get("version").and_then(serde_json::Value::as_u64);
    match version {
        Some(v) if v == MANIFEST_VERSION as u64 => {}
        Some(v) => return Err(Error::Version { found: v as u32, expected: MANIFEST_VERSION }),
        None => return Err(Error::Corruption("manifest has no version".into())),
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    manifest.config.validate()?;

    let mut slices = Vec::with_capacity(manifest.tensors.len());
    let mut covered = 0u64;
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.length != 4 * numel as u64 {
            return Err(Error::Corruption(format!("tensor {} length does not match its shape", e.name)));
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64).ok_or_else(|| {
            Error::Corruption(format!("blob truncated: tensor {} ends past {} bytes", e.name, blob.len()))
        })?;
        covered += e.length;
        slices.push(&blob[e.offset as usize..end as usize]);
    }
    if covered != blob.len() as u64 {
        return Err(Error::Corruption(format!("blob has {} bytes, manifest accounts for {covered}", blob.len())));
    }
    let hash = content_hash(
        &manifest.config,
        &manifest.blocks,
        manifest.tensors.iter().zip(&slices).map(|(e, b)| (e.name.as_str(), e.shape.as_slice(), *b)),
    )?;
    if hash != manifest.content_hash {
        return Err(Error::Corruption("content hash mismatch".into()));
    }

    let mut model = skeleton(&manifest.config, &manifest.blocks)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Corruption(format!(
            "manifest lists {} tensors, structure needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), e) in expected.iter().zip(&manifest.tensors) {
        if *name != e.name || *shape != e.shape {
            return Err(Error::Corruption(format!(
                "unexpected tensor {} {:?} (wanted {name} {shape:?})",
                e.name, e.shape
            )));
        }
    }
    for (t, bytes) in model.tensors_mut().into_iter().zip(&slices) {
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    for (b, meta) in model.blocks.iter().zip(&manifest.blocks) {
        if let (MoeLayer::Condensed(c), Some(g)) = (&b.layer, &meta.fixed_gates) {
            if c.fixed_gates.data().iter().zip(g).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::Corruption("fixed gates in manifest disagree with the blob".into()));
            }
        }
    }
    Ok(model)
}

/// Zero-valued model with the structure described by the block metadata.
fn skeleton(config: &ModelConfig, blocks: &[BlockMeta]) -> Result<MoeModel> {
    if blocks.len() != config.num_blocks {
        return Err(Error::Corruption(format!("{} block entries for {} blocks", blocks.len(), config.num_blocks)));
    }
    let (d, f, n) = (config.hidden_size, config.expert_inner, config.num_routing_experts);
    let experts = |count: usize| (0..count).map(|_| ExpertMlp::zeros(d, f)).collect::<Vec<_>>();
    let mut out = Vec::with_capacity(blocks.len());
    for (b, meta) in blocks.iter().enumerate() {
        let layer = match meta.layer_kind.as_str() {
            "routed" => {
                let mut l = RoutedMoeLayer::new(
                    experts(n),
                    experts(config.num_shared_experts),
                    Tensor::zeros(&[n, d]),
                    config.k_active,
                )?;
                l.renormalize = config.renormalize_gates;
                MoeLayer::Routed(l)
            }
            "condensed" => {
                let kept = meta
                    .kept_experts
                    .clone()
                    .ok_or_else(|| Error::Corruption(format!("condensed block {b} has no kept_experts")))?;
                MoeLayer::Condensed(CondensedLayer {
                    experts: experts(kept.len()),
                    fixed_gates: Tensor::zeros(&[kept.len()]),
                    kept_indices: kept,
                    shared: experts(config.num_shared_experts),
                    origin: meta.origin.unwrap_or(b),
                })
            }
            other => return Err(Error::Corruption(format!("unknown layer kind {other:?}"))),
        };
        out.push(Block {
            attn_norm: Tensor::zeros(&[d]),
            attention: config.attention.then(|| Attention::zeros(d)),
            moe_norm: Tensor::zeros(&[d]),
            layer,
        });
    }
    Ok(MoeModel {
        config: config.clone(),
        token_embedding: Tensor::zeros(&[config.vocab_size, d]),
        position_embedding: Tensor::zeros(&[config.max_seq_len, d]),
        blocks: out,
        final_norm: Tensor::zeros(&[d]),
        lm_head: Tensor::zeros(&[d, config.vocab_size]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::condense_layer;
    use crate::model::GateStats;

    fn small() -> MoeModel {
        let config = ModelConfig {
            vocab_size: 16,
            hidden_size: 8,
            expert_inner: 4,
            num_blocks: 3,
            num_routing_experts: 4,
            num_shared_experts: 1,
            k_active: 2,
            max_seq_len: 10,
            attention: true,
            renormalize_gates: false,
        };
        let mut m = MoeModel::init(config, 1).unwrap();
        let mut stats = GateStats::new(4);
        stats.record(&[0.5, 0.25, 0.0, 0.0]);
        let routed = m.routed_layer(1).unwrap().clone();
        m.blocks[1].layer = MoeLayer::Condensed(condense_layer(&routed, &[1, 0], &stats, 1).unwrap());
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let (manifest, blob) = encode(&m).unwrap();
        let json = serde_json::to_vec(&manifest).unwrap();
        let back = decode(&json, &blob).unwrap();
        assert_eq!(back, m);
        let (manifest2, blob2) = encode(&back).unwrap();
        assert_eq!(blob2, blob);
        assert_eq!(manifest2, manifest);
    }

    #[test]
    fn rejects_truncation_flips_and_versions() {
        let m = small();
        let (manifest, blob) = encode(&m).unwrap();
        let json = serde_json::to_vec(&manifest).unwrap();
        assert!(matches!(decode(&json, &blob[..blob.len() - 3]), Err(Error::Corruption(_))));
        let mut flipped = blob.clone();
        flipped[17] ^= 0x40;
        assert!(matches!(decode(&json, &flipped), Err(Error::Corruption(_))));
        let mut v = manifest.clone();
        v.version = 9;
        assert!(matches!(
            decode(&serde_json::to_vec(&v).unwrap(), &blob),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn swapped_offsets_fail_hash() {
        let m = small();
        let (mut manifest, blob) = encode(&m).unwrap();
        let i = manifest.tensors.iter().position(|e| e.name == "blocks.0.attn.wq").unwrap();
        let j = manifest.tensors.iter().position(|e| e.name == "blocks.0.attn.wk").unwrap();
        let (a, b) = (manifest.tensors[i].offset, manifest.tensors[j].offset);
        manifest.tensors[i].offset = b;
        manifest.tensors[j].offset = a;
        let json = serde_json::to_vec(&manifest).unwrap();
        assert!(matches!(decode(&json, &blob), Err(Error::Corruption(_))));
    }
}
