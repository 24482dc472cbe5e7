//! Dataset manifests: a JSON document whose paths are relative to the
//! manifest file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    read_cameras, read_codebook, read_json, read_png_dir, write_png_dir, read_query, read_scene, read_tensor, resolve,
    write_cameras, write_json, write_query, write_scene, write_tensor, Tensor, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::localization::QueryEmbedding;
use crate::quantizer::{Codebook, FeatureStack, IndexStack};
use crate::scene::{Camera, GaussianScene};
use crate::synthetic::{recolor_reference, SyntheticDataset};
use crate::training::{SupervisionFrame, SupervisionStack, Track};

/// Color of the recolor edit references written for synthetic datasets.
pub const EDIT_COLOR: [f32; 3] = [0.9, 0.1, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub label: String,
    pub path: PathBuf,
    /// Ground-truth member Gaussians, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<usize>>,
    /// Value of this query's object in the label maps, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_label: Option<i32>,
}

/// A reference edited video (directory of numbered PNG frames).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditReference {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub cameras: PathBuf,
    /// f32 tensor `[T, H, W, 3]` or a PNG frame directory.
    pub rgb: PathBuf,
    /// f32 tensor `[T, H, W]`.
    #[serde(default)]
    pub masks: Option<PathBuf>,
    /// f32 tensor `[T, H, W]`.
    #[serde(default)]
    pub depths: Option<PathBuf>,
    /// JSON list of tracks.
    #[serde(default)]
    pub tracks: Option<PathBuf>,
    /// f32 tensor `[T, H, W, C]`.
    #[serde(default)]
    pub features: Option<PathBuf>,
    /// u8 tensor `[T, H, W]`, non-zero where a feature is present.
    #[serde(default)]
    pub feature_valid: Option<PathBuf>,
    /// i32 tensor `[T, H, W]`; `-1` marks unsupervised pixels.
    #[serde(default)]
    pub index_maps: Option<PathBuf>,
    #[serde(default)]
    pub codebook: Option<PathBuf>,
    #[serde(default)]
    pub queries: Vec<QueryEntry>,
    /// Initial scene for training.
    #[serde(default)]
    pub scene: Option<PathBuf>,
    #[serde(default)]
    pub reference_scene: Option<PathBuf>,
    /// i32 tensor `[T, H, W]` of ground-truth pixel labels (`-1` unlabelled).
    #[serde(default)]
    pub label_maps: Option<PathBuf>,
    #[serde(default)]
    pub heldout_cameras: Option<PathBuf>,
    #[serde(default)]
    pub heldout_rgb: Option<PathBuf>,
    #[serde(default)]
    pub edit_references: Vec<EditReference>,
    /// Free-form record of how the dataset was produced.
    #[serde(default)]
    pub generator: serde_json::Value,
}

impl Manifest {
    pub fn new(frames: usize, width: usize, height: usize) -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            frames,
            width,
            height,
            cameras: "cameras.txt".into(),
            rgb: "rgb.lgt".into(),
            masks: None,
            depths: None,
            tracks: None,
            features: None,
            feature_valid: None,
            index_maps: None,
            codebook: None,
            queries: Vec::new(),
            scene: None,
            reference_scene: None,
            label_maps: None,
            heldout_cameras: None,
            heldout_rgb: None,
            edit_references: Vec::new(),
            generator: serde_json::Value::Null,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = read_json(path)?;
        let found = v
            .get("schema_version")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::format(path, "manifest lacks schema_version"))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                found: found as u32,
                expected: SCHEMA_VERSION,
            });
        }
        serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_feature_stack(features: &Path, valid: &Path, stack: &FeatureStack) -> Result<()> {
    let dims = [stack.frames, stack.height, stack.width];
    write_tensor(
        features,
        &Tensor::f32(&[dims[0], dims[1], dims[2], stack.dim], &["t", "y", "x", "c"], stack.data.clone())?,
    )?;
    write_tensor(valid, &Tensor::u8(&dims, &["t", "y", "x"], stack.valid.iter().map(|&v| v as u8).collect())?)
}

/// Reads features; without a validity file every pixel with a non-zero
/// vector is valid.
pub fn read_feature_stack(features: &Path, valid: Option<&Path>) -> Result<FeatureStack> {
    let (d, data) = read_tensor(features)?.into_f32(features, 4)?;
    let valid = match valid {
        Some(p) => {
            let (vd, v) = read_tensor(p)?.into_u8(p, 3)?;
            if vd[..] != d[..3] {
                return Err(Error::format(p, format!("validity dims {vd:?} do not match features {d:?}")));
            }
            v.into_iter().map(|b| b != 0).collect()
        }
        None => data.chunks(d[3].max(1)).map(|f| f.iter().any(|&x| x != 0.0)).collect(),
    };
    FeatureStack::new(d[0], d[1], d[2], d[3], data, valid)
}

pub fn write_index_stack(path: &Path, stack: &IndexStack) -> Result<()> {
    write_tensor(
        path,
        &Tensor::i32(&[stack.frames, stack.height, stack.width], &["t", "y", "x"], stack.indices.clone())?,
    )
}

pub fn read_index_stack(path: &Path) -> Result<IndexStack> {
    let (d, indices) = read_tensor(path)?.into_i32(path, 3)?;
    Ok(IndexStack {
        frames: d[0],
        height: d[1],
        width: d[2],
        indices,
    })
}

fn write_frames_f32(path: &Path, frames: &[Vec<f64>], dims: &[usize], labels: &[&str]) -> Result<()> {
    let data = frames.iter().flatten().map(|&v| v as f32).collect();
    write_tensor(path, &Tensor::f32(dims, labels, data)?)
}

/// Reads an f32 frame tensor `[T, H, W(, C)]` and checks it against `expect`.
fn read_frames_f32(path: &Path, expect: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (d, data) = read_tensor(path)?.into_f32(path, expect.len())?;
    if d != expect {
        return Err(Error::format(path, format!("dims {d:?}, manifest implies {expect:?}")));
    }
    let per = d[1..].iter().product::<usize>().max(1);
    Ok(data.chunks(per).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
}

/// Writes `frames` (each `H × W × C`) as an f32 tensor `[T, H, W, C]`.
pub fn write_frame_tensor(path: &Path, frames: &[Vec<f64>], width: usize, height: usize, channels: usize) -> Result<()> {
    if frames.iter().any(|f| f.len() != width * height * channels) {
        return Err(Error::Shape("frame size differs from the tensor header".into()));
    }
    write_frames_f32(path, frames, &[frames.len(), height, width, channels], &["t", "y", "x", "c"])
}

/// RGB frames from a PNG directory or an f32 `[T, H, W, 3]` tensor, as
/// `(width, height, frames)`.
pub fn read_video(path: &Path) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    if path.is_dir() {
        return read_png_dir(path);
    }
    let (d, data) = read_tensor(path)?.into_f32(path, 4)?;
    if d[3] != 3 {
        return Err(Error::format(path, format!("expected 3 color channels, found {}", d[3])));
    }
    let per = (d[1] * d[2] * 3).max(1);
    Ok((d[2], d[1], data.chunks(per).map(|c| c.iter().map(|&v| v as f64).collect()).collect()))
}

fn read_rgb(path: &Path, t: usize, h: usize, w: usize) -> Result<Vec<Vec<f64>>> {
    if path.is_dir() {
        let (pw, ph, frames) = read_png_dir(path)?;
        if (pw, ph, frames.len()) != (w, h, t) {
            return Err(Error::format(
                path,
                format!("{} frames of {pw}x{ph}, manifest implies {t} of {w}x{h}", frames.len()),
            ));
        }
        Ok(frames)
    } else {
        read_frames_f32(path, &[t, h, w, 3])
    }
}

/// Writes a generated dataset under `dir` and returns the manifest path.
pub fn write_synthetic(ds: &SyntheticDataset, dir: &Path, generator: serde_json::Value) -> Result<PathBuf> {
    let sup = &ds.supervision;
    let (t, h, w) = (sup.frames.len(), sup.height, sup.width);
    let mut m = Manifest::new(t, w, h);
    write_cameras(&dir.join(&m.cameras), &sup.cameras)?;
    let rgb: Vec<Vec<f64>> = sup.frames.iter().map(|f| f.rgb.clone()).collect();
    write_frames_f32(&dir.join(&m.rgb), &rgb, &[t, h, w, 3], &["t", "y", "x", "rgb"])?;

    let masks: Option<Vec<Vec<f64>>> = sup.frames.iter().map(|f| f.mask.clone()).collect();
    if let Some(masks) = masks {
        let p = PathBuf::from("masks.lgt");
        write_frames_f32(&dir.join(&p), &masks, &[t, h, w], &["t", "y", "x"])?;
        m.masks = Some(p);
    }
    let depths: Option<Vec<Vec<f64>>> = sup.frames.iter().map(|f| f.depth.clone()).collect();
    if let Some(depths) = depths {
        let p = PathBuf::from("depths.lgt");
        write_frames_f32(&dir.join(&p), &depths, &[t, h, w], &["t", "y", "x"])?;
        m.depths = Some(p);
    }
    let p = PathBuf::from("tracks.json");
    write_json(&dir.join(&p), &sup.tracks)?;
    m.tracks = Some(p);

    let (fp, vp) = (PathBuf::from("features.lgt"), PathBuf::from("feature_valid.lgt"));
    write_feature_stack(&dir.join(&fp), &dir.join(&vp), &ds.features)?;
    m.features = Some(fp);
    m.feature_valid = Some(vp);

    let p = PathBuf::from("labels.lgt");
    let labels = ds.pixel_labels.iter().map(|l| l.map_or(-1, |v| v as i32)).collect();
    write_tensor(&dir.join(&p), &Tensor::i32(&[t, h, w], &["t", "y", "x"], labels)?)?;
    m.label_maps = Some(p);

    let p = PathBuf::from("init_scene.lgsc");
    write_scene(&dir.join(&p), &ds.init_scene)?;
    m.scene = Some(p);
    let p = PathBuf::from("reference_scene.lgsc");
    write_scene(&dir.join(&p), &ds.world.scene)?;
    m.reference_scene = Some(p);

    let p = PathBuf::from("heldout_cameras.txt");
    write_cameras(&dir.join(&p), &ds.world.heldout_cameras)?;
    m.heldout_cameras = Some(p);
    let p = PathBuf::from("heldout_rgb.lgt");
    write_frames_f32(&dir.join(&p), &ds.heldout_rgb, &[t, h, w, 3], &["t", "y", "x", "rgb"])?;
    m.heldout_rgb = Some(p);

    for label in 0..ds.world.spec.clusters {
        let q = &ds.queries[label];
        let p = PathBuf::from(format!("queries/{}.lgq", q.label));
        write_query(&dir.join(&p), q)?;
        m.queries.push(QueryEntry {
            label: q.label.clone(),
            path: p,
            members: Some(ds.world.members(label)),
            mask_label: Some(label as i32),
        });
        let frames = recolor_reference(&ds.world, label, EDIT_COLOR, &sup.cameras)?;
        let p = PathBuf::from(format!("edits/{}_red", q.label));
        write_png_dir(&dir.join(&p), &frames, w, h)?;
        m.edit_references.push(EditReference {
            label: q.label.clone(),
            path: p,
        });
    }
    m.generator = generator;
    let path = dir.join("manifest.json");
    m.save(&path)?;
    Ok(path)
}

/// A manifest with every referenced file loaded and dimension-checked.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
    /// Supervision without index maps (see [`Dataset::supervision_with_index`]).
    pub supervision: SupervisionStack,
    pub features: Option<FeatureStack>,
    pub index_maps: Option<IndexStack>,
    pub codebook: Option<Codebook>,
    pub queries: Vec<(QueryEntry, QueryEmbedding)>,
    pub scene: Option<GaussianScene>,
    pub reference_scene: Option<GaussianScene>,
    pub label_maps: Option<Vec<i32>>,
    pub heldout_cameras: Option<Vec<Camera>>,
    pub heldout_rgb: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let m = Manifest::load(path)?;
        let at = |p: &Path| resolve(path, p);
        let (t, h, w) = (m.frames, m.height, m.width);
        let check_cameras = |cams: &[Camera], p: &Path| -> Result<()> {
            if cams.len() != t || cams.iter().any(|c| (c.width, c.height) != (w, h)) {
                return Err(Error::format(p, format!("expected {t} cameras of {w}x{h}")));
            }
            Ok(())
        };
        let cam_path = at(&m.cameras);
        let cameras = read_cameras(&cam_path)?;
        check_cameras(&cameras, &cam_path)?;
        let rgb = read_rgb(&at(&m.rgb), t, h, w)?;
        let masks = m.masks.as_ref().map(|p| read_frames_f32(&at(p), &[t, h, w])).transpose()?;
        let depths = m.depths.as_ref().map(|p| read_frames_f32(&at(p), &[t, h, w])).transpose()?;
        let tracks: Vec<Track> = match &m.tracks {
            Some(p) => read_json(&at(p))?,
            None => Vec::new(),
        };
        for tr in &tracks {
            if tr.pixels.len() != t || tr.visible.len() != t {
                return Err(Error::format(at(m.tracks.as_ref().unwrap()), "track length differs from frame count"));
            }
        }
        let frames = (0..t)
            .map(|i| SupervisionFrame {
                rgb: rgb[i].clone(),
                mask: masks.as_ref().map(|v| v[i].clone()),
                depth: depths.as_ref().map(|v| v[i].clone()),
                index: None,
            })
            .collect();
        let supervision = SupervisionStack {
            width: w,
            height: h,
            cameras: cameras.clone(),
            frames,
            tracks,
        };

        let features = m
            .features
            .as_ref()
            .map(|p| read_feature_stack(&at(p), m.feature_valid.as_ref().map(|v| at(v)).as_deref()))
            .transpose()?;
        if let (Some(f), Some(p)) = (&features, &m.features) {
            if (f.frames, f.height, f.width) != (t, h, w) {
                return Err(Error::format(at(p), "feature stack dims do not match the manifest"));
            }
        }
        let codebook = m.codebook.as_ref().map(|p| read_codebook(&at(p))).transpose()?;
        let index_maps = m.index_maps.as_ref().map(|p| read_index_stack(&at(p))).transpose()?;
        if let (Some(ix), Some(p)) = (&index_maps, &m.index_maps) {
            if (ix.frames, ix.height, ix.width) != (t, h, w) {
                return Err(Error::format(at(p), "index map dims do not match the manifest"));
            }
            if let Some(book) = &codebook {
                ix.check_range(book.entries).map_err(|e| Error::format(at(p), e.to_string()))?;
            }
        }
        let queries = m
            .queries
            .iter()
            .map(|q| Ok((q.clone(), read_query(&at(&q.path))?)))
            .collect::<Result<Vec<_>>>()?;
        let scene = m.scene.as_ref().map(|p| read_scene(&at(p))).transpose()?;
        let reference_scene = m.reference_scene.as_ref().map(|p| read_scene(&at(p))).transpose()?;
        let label_maps = match &m.label_maps {
            Some(p) => {
                let (d, v) = read_tensor(&at(p))?.into_i32(&at(p), 3)?;
                if d != [t, h, w] {
                    return Err(Error::format(at(p), "label map dims do not match the manifest"));
                }
                Some(v)
            }
            None => None,
        };
        let heldout_cameras = match &m.heldout_cameras {
            Some(p) => {
                let cams = read_cameras(&at(p))?;
                check_cameras(&cams, &at(p))?;
                Some(cams)
            }
            None => None,
        };
        let heldout_rgb = m.heldout_rgb.as_ref().map(|p| read_rgb(&at(p), t, h, w)).transpose()?;
        for e in &m.edit_references {
            let p = at(&e.path);
            if !p.is_dir() {
                return Err(Error::format(p, "edit reference must be a directory of PNG frames"));
            }
        }
        Ok(Dataset {
            path: path.to_path_buf(),
            manifest: m,
            cameras,
            supervision,
            features,
            index_maps,
            codebook,
            queries,
            scene,
            reference_scene,
            label_maps,
            heldout_cameras,
            heldout_rgb,
        })
    }

    /// Supervision with the manifest's index maps attached to every frame.
    pub fn supervision_with_index(&self) -> Result<SupervisionStack> {
        let ix = self
            .index_maps
            .as_ref()
            .ok_or_else(|| Error::Invalid("manifest has no index maps; run quantize first".into()))?;
        let mut sup = self.supervision.clone();
        for (t, f) in sup.frames.iter_mut().enumerate() {
            f.index = Some(ix.frame(t).to_vec());
        }
        Ok(sup)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        resolve(&self.path, rel)
    }

    pub fn query(&self, label: &str) -> Option<&(QueryEntry, QueryEmbedding)> {
        self.queries.iter().find(|(e, _)| e.label == label)
    }
}

/// Line-delimited JSON run log.
pub struct RunLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
