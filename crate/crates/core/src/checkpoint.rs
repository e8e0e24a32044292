//! Binary artifact formats.
//!
//! Model (`APLM`), recognizer (`APLR`) and transfer map (`APLT`) files share
//! one container: magic, `u32` version, `u32` header length, JSON header,
//! `u64` value count, little-endian `f32` values, and a SHA-256 over every
//! preceding byte. Prompts (`APLP`) use a fixed binary layout with the same
//! trailing hash.

use std::path::Path;

use apl_nn::param::{flatten_values, load_values};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apl::AnonymizationPrompt;
use crate::diffusion::{DiffusionModel, ModelConfig};
use crate::error::{AplError, Result};
use crate::image::write_atomic;
use crate::recognizer::{AttributeProbe, HeadLayout, IdentityEmbedder, TrunkConfig};
use crate::seed;
use crate::textenc::Vocabulary;
use crate::transfer::EmbeddingMap;

pub const VERSION: u32 = 1;
pub const MAGIC_MODEL: &[u8; 4] = b"APLM";
pub const MAGIC_PROMPT: &[u8; 4] = b"APLP";
pub const MAGIC_RECOGNIZER: &[u8; 4] = b"APLR";
pub const MAGIC_TRANSFER: &[u8; 4] = b"APLT";

fn artifact_err(path: &Path, reason: impl Into<String>) -> AplError {
    AplError::Artifact { path: path.to_path_buf(), reason: reason.into() }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    Ok(seed::sha256_hex(&bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(AplError::Missing(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

fn seal(mut bytes: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    bytes
}

/// Checks magic and trailing hash; returns the body between them.
fn unseal<'a>(bytes: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 4 + 4 + 32 {
        return Err(artifact_err(path, "file too short"));
    }
    if &bytes[..4] != magic {
        return Err(artifact_err(path, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(artifact_err(path, "content hash mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(artifact_err(path, format!("unsupported version {version}")));
    }
    Ok(&body[8..])
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(artifact_err(self.path, "truncated"));
        }
        let (a, b) = self.bytes.split_at(n);
        self.bytes = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| artifact_err(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(artifact_err(self.path, "trailing bytes"))
        }
    }
}

/// Encodes a container with a JSON header and a value payload.
pub fn encode_container<H: Serialize>(magic: &[u8; 4], header: &H, values: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + header.len() + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(seal(out))
}

pub fn decode_container<H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(H, Vec<f32>)> {
    let body = unseal(bytes, magic, path)?;
    let mut c = Cursor { bytes: body, path };
    let hlen = c.u32()? as usize;
    let header: H = serde_json::from_slice(c.take(hlen)?).map_err(|e| artifact_err(path, format!("header: {e}")))?;
    let n = c.u64()? as usize;
    let values = c.f32s(n)?;
    c.finish()?;
    Ok((header, values))
}

fn f32_values(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn f64_values(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config: ModelConfig,
    vocab: Vocabulary,
    encoder_values: usize,
    frozen_hash: String,
}

pub fn encode_model(model: &DiffusionModel) -> Result<Vec<u8>> {
    let mut values = f32_values(flatten_values(&model.encoder));
    let encoder_values = values.len();
    values.extend(f32_values(flatten_values(&model.denoiser)));
    let header = ModelHeader { config: model.config, vocab: model.vocab.clone(), encoder_values, frozen_hash: model.frozen_hash() };
    encode_container(MAGIC_MODEL, &header, &values)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<DiffusionModel> {
    let (h, values): (ModelHeader, _) = decode_container(bytes, MAGIC_MODEL, path)?;
    let vocab = Vocabulary::from_json(&serde_json::to_string(&h.vocab)?)?;
    let mut model = DiffusionModel::new(h.config, vocab, 0)?;
    if h.encoder_values > values.len() {
        return Err(artifact_err(path, "encoder section exceeds payload"));
    }
    let (enc, den) = values.split_at(h.encoder_values);
    load_values(&mut model.encoder, &f64_values(enc)).map_err(|e| artifact_err(path, e))?;
    load_values(&mut model.denoiser, &f64_values(den)).map_err(|e| artifact_err(path, e))?;
    if model.frozen_hash() != h.frozen_hash {
        return Err(artifact_err(path, "weights do not match the recorded model hash"));
    }
    Ok(model)
}

pub fn save_model(model: &DiffusionModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<DiffusionModel> {
    decode_model(&read(path)?, path)
}

/// Fixed layout: magic, version, `m`, `d` (u32), iteration (u64), α (f64),
/// 32-byte encoder fingerprint, `m·d` f32 values, SHA-256.
pub fn encode_prompt(p: &AnonymizationPrompt) -> Vec<u8> {
    let mut out = Vec::with_capacity(72 + 4 * p.vectors.len() + 32);
    out.extend_from_slice(MAGIC_PROMPT);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.m as u32).to_le_bytes());
    out.extend_from_slice(&(p.d as u32).to_le_bytes());
    out.extend_from_slice(&p.iteration.to_le_bytes());
    out.extend_from_slice(&p.alpha.to_le_bytes());
    out.extend_from_slice(&p.fingerprint);
    for v in &p.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    seal(out)
}

pub fn decode_prompt(bytes: &[u8], path: &Path) -> Result<AnonymizationPrompt> {
    let body = unseal(bytes, MAGIC_PROMPT, path)?;
    let mut c = Cursor { bytes: body, path };
    let m = c.u32()? as usize;
    let d = c.u32()? as usize;
    let iteration = c.u64()?;
    let alpha = c.f64()?;
    let fingerprint: [u8; 32] = c.take(32)?.try_into().unwrap();
    let vectors = c.f32s(m * d)?;
    c.finish()?;
    let mut p = AnonymizationPrompt::new(vectors, m, d, fingerprint).map_err(|e| artifact_err(path, e.to_string()))?;
    p.iteration = iteration;
    p.alpha = alpha;
    Ok(p)
}

pub fn save_prompt(p: &AnonymizationPrompt, path: &Path) -> Result<()> {
    write_atomic(path, &encode_prompt(p))
}

pub fn load_prompt(path: &Path) -> Result<AnonymizationPrompt> {
    decode_prompt(&read(path)?, path)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum RecognizerHeader {
    Embedder { trunk: TrunkConfig, ids: Vec<u32>, prototypes: Vec<(u32, Vec<f32>)> },
    Probe { trunk: TrunkConfig, layout: HeadLayout },
}

pub fn encode_embedder(e: &IdentityEmbedder) -> Result<Vec<u8>> {
    let header = RecognizerHeader::Embedder {
        trunk: e.trunk_config(),
        ids: e.ids.clone(),
        prototypes: e.prototypes.iter().map(|(k, v)| (*k, v.clone())).collect(),
    };
    encode_container(MAGIC_RECOGNIZER, &header, &f32_values(flatten_values(e)))
}

pub fn decode_embedder(bytes: &[u8], path: &Path) -> Result<IdentityEmbedder> {
    match decode_container(bytes, MAGIC_RECOGNIZER, path)? {
        (RecognizerHeader::Embedder { trunk, ids, prototypes }, values) => {
            let mut rng = seed::rng(0, "load", &[]);
            let mut e = IdentityEmbedder::new(trunk, ids, &mut rng);
            load_values(&mut e, &f64_values(&values)).map_err(|err| artifact_err(path, err))?;
            e.prototypes = prototypes.into_iter().collect();
            Ok(e)
        }
        _ => Err(artifact_err(path, "recognizer file holds a probe, not an embedder")),
    }
}

pub fn encode_probe(p: &AttributeProbe) -> Result<Vec<u8>> {
    let header = RecognizerHeader::Probe { trunk: p.trunk_config(), layout: p.layout.clone() };
    encode_container(MAGIC_RECOGNIZER, &header, &f32_values(flatten_values(p)))
}

pub fn decode_probe(bytes: &[u8], path: &Path) -> Result<AttributeProbe> {
    match decode_container(bytes, MAGIC_RECOGNIZER, path)? {
        (RecognizerHeader::Probe { trunk, layout }, values) => {
            let mut rng = seed::rng(0, "load", &[]);
            let mut p = AttributeProbe::new(trunk, layout, &mut rng);
            load_values(&mut p, &f64_values(&values)).map_err(|err| artifact_err(path, err))?;
            Ok(p)
        }
        _ => Err(artifact_err(path, "recognizer file holds an embedder, not a probe")),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferHeader {
    d_src: usize,
    d_tgt: usize,
    mean_residual: f64,
    coverage: usize,
    src_fingerprint: String,
    tgt_fingerprint: String,
}

fn fingerprint_from_hex(s: &str, path: &Path) -> Result<[u8; 32]> {
    hex::decode(s)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| artifact_err(path, "malformed fingerprint"))
}

pub fn encode_map(m: &EmbeddingMap) -> Result<Vec<u8>> {
    let header = TransferHeader {
        d_src: m.d_src,
        d_tgt: m.d_tgt,
        mean_residual: m.mean_residual,
        coverage: m.coverage,
        src_fingerprint: hex::encode(m.src_fingerprint),
        tgt_fingerprint: hex::encode(m.tgt_fingerprint),
    };
    encode_container(MAGIC_TRANSFER, &header, &m.weights)
}

pub fn decode_map(bytes: &[u8], path: &Path) -> Result<EmbeddingMap> {
    let (h, weights): (TransferHeader, Vec<f32>) = decode_container(bytes, MAGIC_TRANSFER, path)?;
    if weights.len() != h.d_src * h.d_tgt {
        return Err(artifact_err(path, "map shape disagrees with its payload"));
    }
    Ok(EmbeddingMap {
        d_src: h.d_src,
        d_tgt: h.d_tgt,
        weights,
        mean_residual: h.mean_residual,
        coverage: h.coverage,
        src_fingerprint: fingerprint_from_hex(&h.src_fingerprint, path)?,
        tgt_fingerprint: fingerprint_from_hex(&h.tgt_fingerprint, path)?,
    })
}

/// Writes bytes and returns their hex SHA-256.
pub fn write_hashed(path: &Path, bytes: &[u8]) -> Result<String> {
    write_atomic(path, bytes)?;
    Ok(seed::sha256_hex(bytes))
}

/// Reads a file, refusing it when its hash differs from `expected`.
pub fn read_verified(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let got = seed::sha256_hex(&bytes);
    if got != expected {
        return Err(artifact_err(path, format!("hash {got} differs from the recorded {expected}")));
    }
    Ok(bytes)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    read(path)
}
