//! On-disk formats: binary tensors, scene/decoder/codebook containers,
//! camera text files, query files, PNG frame directories, dataset manifests
//! and run logs. All float payloads are little-endian f32.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::localization::QueryEmbedding;
use crate::scene::Camera;

mod container;
mod dataset;
mod images;
mod tensor;

pub use container::{
    codebook_from_bytes, codebook_to_bytes, decoder_from_bytes, decoder_to_bytes, read_codebook, read_decoder,
    read_scene, scene_from_bytes, scene_to_bytes, write_codebook, write_decoder, write_scene, CODEBOOK_MAGIC,
    CONTAINER_VERSION, DECODER_MAGIC, SCENE_MAGIC, SCHEMA_VERSION,
};
pub use dataset::{
    read_feature_stack, read_index_stack, read_video, write_feature_stack, write_frame_tensor, write_index_stack,
    write_synthetic, Dataset,
    EditReference, Manifest, QueryEntry, RunLog, EDIT_COLOR,
};
pub use images::{read_png_dir, read_rgb_png, relevance_to_png, write_png_dir, write_rgb_png};
pub use tensor::{read_tensor, write_tensor, Tensor, TensorData, MAX_RANK, TENSOR_MAGIC};

pub const QUERY_MAGIC: [u8; 4] = *b"LGQ1";
const CAMERAS_HEADER: &str = "lingsplat-cameras 1";

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports truncation against a file path.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, at: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(self.path, "payload size overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(self.path, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Camera list as text: a header line, then per camera a `camera W H` line,
/// a `K` line with 9 row-major intrinsics and an `E` line with 16 row-major
/// world-to-camera entries. `#` starts a comment line.
pub fn cameras_to_string(cameras: &[Camera]) -> String {
    let mut s = format!("{CAMERAS_HEADER}\n");
    for (t, c) in cameras.iter().enumerate() {
        s.push_str(&format!("# frame {t}\ncamera {} {}\nK", c.width, c.height));
        for v in c.intrinsics.iter().flatten() {
            s.push_str(&format!(" {v:?}"));
        }
        s.push_str("\nE");
        for v in c.world_to_camera.iter().flatten() {
            s.push_str(&format!(" {v:?}"));
        }
        s.push('\n');
    }
    s
}

pub fn cameras_from_str(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let bad = |line: usize, msg: &str| Error::format(path, format!("line {}: {msg}", line + 1));
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, CAMERAS_HEADER)) => {}
        Some((i, l)) if l.starts_with("lingsplat-cameras") => {
            let found = l.split_whitespace().nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad(i, "bad header"))?;
            return Err(Error::SchemaVersion { found, expected: 1 });
        }
        _ => return Err(Error::format(path, "missing camera file header")),
    }
    let numbers = |i: usize, l: &str, tag: &str, n: usize| -> Result<Vec<f64>> {
        let mut it = l.split_whitespace();
        if it.next() != Some(tag) {
            return Err(bad(i, &format!("expected '{tag}' line")));
        }
        let v: Vec<f64> = it
            .map(|t| t.parse::<f64>().map_err(|_| bad(i, &format!("bad number '{t}'"))))
            .collect::<Result<_>>()?;
        if v.len() != n {
            return Err(bad(i, &format!("expected {n} numbers, found {}", v.len())));
        }
        Ok(v)
    };
    let mut cameras = Vec::new();
    while let Some((i, l)) = lines.next() {
        let mut it = l.split_whitespace();
        if it.next() != Some("camera") {
            return Err(bad(i, "expected 'camera W H'"));
        }
        let dims: Vec<usize> = it.map(|t| t.parse().map_err(|_| bad(i, "bad image size"))).collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(bad(i, "expected 'camera W H'"));
        }
        let (ik, lk) = lines.next().ok_or_else(|| Error::format(path, "truncated camera entry"))?;
        let k = numbers(ik, lk, "K", 9)?;
        let (ie, le) = lines.next().ok_or_else(|| Error::format(path, "truncated camera entry"))?;
        let e = numbers(ie, le, "E", 16)?;
        let cam = Camera {
            intrinsics: [[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]],
            world_to_camera: [
                [e[0], e[1], e[2], e[3]],
                [e[4], e[5], e[6], e[7]],
                [e[8], e[9], e[10], e[11]],
                [e[12], e[13], e[14], e[15]],
            ],
            width: dims[0],
            height: dims[1],
        };
        cam.check().map_err(|m| bad(i, &m))?;
        cameras.push(cam);
    }
    Ok(cameras)
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    write_file(path, cameras_to_string(cameras).as_bytes())
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_str(&text, path)
}

/// `LGQ1` query: magic, u16 label length, UTF-8 label, u32 dimension, f32 values.
pub fn query_to_bytes(q: &QueryEmbedding) -> Result<Vec<u8>> {
    if q.label.len() > u16::MAX as usize {
        return Err(Error::Invalid("query label too long".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&QUERY_MAGIC);
    out.extend_from_slice(&(q.label.len() as u16).to_le_bytes());
    out.extend_from_slice(q.label.as_bytes());
    out.extend_from_slice(&(q.vector.len() as u32).to_le_bytes());
    for &v in &q.vector {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Reads a query; stored values are taken as-is (already unit-norm).
pub fn query_from_bytes(bytes: &[u8], path: &Path) -> Result<QueryEmbedding> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != QUERY_MAGIC {
        return Err(Error::format(path, "missing LGQ1 magic"));
    }
    let n = r.u16()? as usize;
    let label = std::str::from_utf8(r.take(n)?)
        .map_err(|_| Error::format(path, "label is not UTF-8"))?
        .to_string();
    let c = r.u32()? as usize;
    let vector: Vec<f64> = r.f32s(c)?.into_iter().map(f64::from).collect();
    r.finish()?;
    if c == 0 || vector.iter().all(|&v| v == 0.0) || vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "query embedding must be non-zero and finite"));
    }
    Ok(QueryEmbedding { label, vector })
}

pub fn write_query(path: &Path, q: &QueryEmbedding) -> Result<()> {
    write_file(path, &query_to_bytes(q)?)
}

pub fn read_query(path: &Path) -> Result<QueryEmbedding> {
    query_from_bytes(&read_file(path)?, path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// `rel` resolved against the directory containing `base`.
pub fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(rel)
    }
}

/// Exported localization result.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalizationRecord {
    pub schema_version: u32,
    pub label: String,
    pub tau: f64,
    /// Recall epochs run.
    pub n: usize,
    /// Precision epochs run.
    pub m: usize,
    pub count: usize,
    pub selected: Vec<usize>,
    #[serde(default)]
    pub log: Vec<crate::localization::StageLog>,
    /// Invocation parameters.
    #[serde(default)]
    pub flags: serde_json::Value,
}

impl LocalizationRecord {
    pub fn new(result: &crate::localization::LocalizationResult, n: usize, m: usize, flags: serde_json::Value) -> Self {
        LocalizationRecord {
            schema_version: SCHEMA_VERSION,
            label: result.label.clone(),
            tau: result.tau,
            n,
            m,
            count: result.selected.len(),
            selected: result.selected.clone(),
            log: result.log.clone(),
            flags,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = read_json(path)?;
        match v.get("schema_version").and_then(|s| s.as_u64()) {
            Some(found) if found == SCHEMA_VERSION as u64 => {}
            Some(found) => {
                return Err(Error::SchemaVersion {
                    found: found as u32,
                    expected: SCHEMA_VERSION,
                })
            }
            None => return Err(Error::format(path, "localization lacks schema_version")),
        }
        let rec: Self = serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string()))?;
        if rec.count != rec.selected.len() {
            return Err(Error::format(path, "count differs from the selected list"));
        }
        Ok(rec)
    }
}
