//! Header + blob containers for scenes, decoders and codebooks.
//!
//! Every container is laid out as
//!
//! | bytes | content                                       |
//! |-------|-----------------------------------------------|
//! | 4     | magic (`LGSC` scene, `LGDC` decoder, `LGCB` codebook) |
//! | 4     | u32 container version (`1`)                    |
//! | 8     | u64 header length `h`                          |
//! | h     | UTF-8 JSON header carrying `schema_version`    |
//! | rest  | little-endian f32 blob                         |
//!
//! Scene blob: one row per Gaussian, statics first, fields in the order
//! center (3), rotation wxyz (4), log-scale (3), opacity logit (1), color (3),
//! feature (d_f) and, for dynamic rows only, basis weight logits (B). The
//! rows are followed by the motion table, `T × B × 7` values (rotation wxyz
//! then translation xyz) in frame-major order.
//!
//! Decoder blob: `w1 (hidden × input)`, `b1`, `w2 (output × hidden)`, `b2`.
//! Codebook blob: `N × c` row-major entries.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::quantizer::Codebook;
use crate::scene::{BasisTransform, Gaussian, GaussianScene, MotionBases};
use crate::semantics::Decoder;

pub const SCENE_MAGIC: [u8; 4] = *b"LGSC";
pub const DECODER_MAGIC: [u8; 4] = *b"LGDC";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"LGCB";
pub const CONTAINER_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

fn encode<H: Serialize>(magic: [u8; 4], header: &H, blob: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len() * 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Versioned {
    schema_version: u32,
}

fn decode<H: DeserializeOwned>(magic: [u8; 4], bytes: &[u8], path: &Path) -> Result<(H, Vec<f32>)> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != magic {
        return Err(Error::format(
            path,
            format!("expected magic {}", String::from_utf8_lossy(&magic)),
        ));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::format(path, "header length overflows"))?;
    let json = r.take(len)?;
    let v: Versioned = serde_json::from_slice(json).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if v.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: v.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let header = serde_json::from_slice(json).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let rest = r.remaining();
    if rest % 4 != 0 {
        return Err(Error::format(path, "blob length is not a multiple of 4"));
    }
    let blob = r.f32s(rest / 4)?;
    Ok((header, blob))
}

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    schema_version: u32,
    num_static: usize,
    num_dynamic: usize,
    bases: usize,
    feature_dim: usize,
    frames: usize,
    codebook_ref: String,
    seed: u64,
}

pub fn scene_to_bytes(scene: &GaussianScene) -> Result<Vec<u8>> {
    let (num_static, num_dynamic) = scene.counts();
    if scene.gaussians[..num_static].iter().any(|g| g.dynamic) {
        return Err(Error::Invalid("static Gaussians must precede dynamic ones".into()));
    }
    let b = scene.bases();
    let mut blob = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        if g.feature.len() != scene.feature_dim {
            return Err(Error::Shape(format!("Gaussian {i} has {} features", g.feature.len())));
        }
        let expected = if g.dynamic { b } else { 0 };
        if g.weight_logits.len() != expected {
            return Err(Error::Shape(format!(
                "Gaussian {i} has {} weight logits, expected {expected}",
                g.weight_logits.len()
            )));
        }
        blob.extend_from_slice(&g.center);
        blob.extend_from_slice(&g.rotation);
        blob.extend_from_slice(&g.log_scale);
        blob.push(g.opacity_logit);
        blob.extend_from_slice(&g.color);
        blob.extend_from_slice(&g.feature);
        blob.extend_from_slice(&g.weight_logits);
    }
    for tr in &scene.motion.transforms {
        blob.extend_from_slice(&tr.rotation);
        blob.extend_from_slice(&tr.translation);
    }
    let header = SceneHeader {
        schema_version: SCHEMA_VERSION,
        num_static,
        num_dynamic,
        bases: b,
        feature_dim: scene.feature_dim,
        frames: scene.frames(),
        codebook_ref: scene.codebook_ref.clone(),
        seed: scene.seed,
    };
    encode(SCENE_MAGIC, &header, &blob)
}

pub fn scene_from_bytes(bytes: &[u8], path: &Path) -> Result<GaussianScene> {
    let (h, blob): (SceneHeader, _) = decode(SCENE_MAGIC, bytes, path)?;
    let base_row = 14 + h.feature_dim;
    let expected = h.num_static * base_row + h.num_dynamic * (base_row + h.bases) + h.frames * h.bases * 7;
    if blob.len() != expected {
        return Err(Error::format(
            path,
            format!("blob holds {} floats, header implies {expected}", blob.len()),
        ));
    }
    let mut at = 0;
    let mut next = |n: usize| {
        let s = &blob[at..at + n];
        at += n;
        s
    };
    let mut gaussians = Vec::with_capacity(h.num_static + h.num_dynamic);
    for i in 0..h.num_static + h.num_dynamic {
        let dynamic = i >= h.num_static;
        gaussians.push(Gaussian {
            center: next(3).try_into().unwrap(),
            rotation: next(4).try_into().unwrap(),
            log_scale: next(3).try_into().unwrap(),
            opacity_logit: next(1)[0],
            color: next(3).try_into().unwrap(),
            feature: next(h.feature_dim).to_vec(),
            dynamic,
            weight_logits: if dynamic { next(h.bases).to_vec() } else { Vec::new() },
        });
    }
    let transforms = (0..h.frames * h.bases)
        .map(|_| BasisTransform {
            rotation: next(4).try_into().unwrap(),
            translation: next(3).try_into().unwrap(),
        })
        .collect();
    let motion = MotionBases {
        frames: h.frames,
        bases: h.bases,
        transforms,
    };
    Ok(GaussianScene {
        gaussians,
        motion,
        feature_dim: h.feature_dim,
        codebook_ref: h.codebook_ref,
        seed: h.seed,
    })
}

#[derive(Serialize, Deserialize)]
struct DecoderHeader {
    schema_version: u32,
    input: usize,
    hidden: usize,
    output: usize,
}

pub fn decoder_to_bytes(dec: &Decoder) -> Result<Vec<u8>> {
    dec.check()?;
    let header = DecoderHeader {
        schema_version: SCHEMA_VERSION,
        input: dec.input,
        hidden: dec.hidden,
        output: dec.output,
    };
    encode(DECODER_MAGIC, &header, &dec.params)
}

pub fn decoder_from_bytes(bytes: &[u8], path: &Path) -> Result<Decoder> {
    let (h, params): (DecoderHeader, _) = decode(DECODER_MAGIC, bytes, path)?;
    let dec = Decoder {
        input: h.input,
        hidden: h.hidden,
        output: h.output,
        params,
    };
    dec.check().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(dec)
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    schema_version: u32,
    entries: usize,
    dim: usize,
}

pub fn codebook_to_bytes(book: &Codebook) -> Result<Vec<u8>> {
    let header = CodebookHeader {
        schema_version: SCHEMA_VERSION,
        entries: book.entries,
        dim: book.dim,
    };
    encode(CODEBOOK_MAGIC, &header, &book.data)
}

pub fn codebook_from_bytes(bytes: &[u8], path: &Path) -> Result<Codebook> {
    let (h, data): (CodebookHeader, _) = decode(CODEBOOK_MAGIC, bytes, path)?;
    Codebook::new(h.entries, h.dim, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_scene(path: &Path, scene: &GaussianScene) -> Result<()> {
    write_file(path, &scene_to_bytes(scene)?)
}

pub fn read_scene(path: &Path) -> Result<GaussianScene> {
    scene_from_bytes(&read_file(path)?, path)
}

pub fn write_decoder(path: &Path, dec: &Decoder) -> Result<()> {
    write_file(path, &decoder_to_bytes(dec)?)
}

pub fn read_decoder(path: &Path) -> Result<Decoder> {
    decoder_from_bytes(&read_file(path)?, path)
}

pub fn write_codebook(path: &Path, book: &Codebook) -> Result<()> {
    write_file(path, &codebook_to_bytes(book)?)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    codebook_from_bytes(&read_file(path)?, path)
}
