//! PNG frames. Colors are clamped to [0, 1] and rounded to 8 bits.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes a row-major `H × W × 3` image.
pub fn write_rgb_png(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!("{} values for a {width}x{height} RGB image", rgb.len())));
    }
    ensure_parent(path)?;
    let img = RgbImage::from_raw(width as u32, height as u32, rgb.iter().map(|&v| to_u8(v)).collect())
        .expect("buffer size checked");
    img.save(path)?;
    Ok(())
}

/// `(width, height, H × W × 3 values in [0, 1])`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()))
}

/// Writes relevance values in [-1, 1] as an 8-bit grayscale image.
pub fn relevance_to_png(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Shape(format!("{} values for a {width}x{height} map", values.len())));
    }
    ensure_parent(path)?;
    let img = GrayImage::from_raw(
        width as u32,
        height as u32,
        values.iter().map(|&v| to_u8(0.5 * (v + 1.0))).collect(),
    )
    .expect("buffer size checked");
    img.save(path)?;
    Ok(())
}

/// Writes frames as `dir/00000.png`, `dir/00001.png`, ...
pub fn write_png_dir(dir: &Path, frames: &[Vec<f64>], width: usize, height: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in frames.iter().enumerate() {
        write_rgb_png(&dir.join(format!("{t:05}.png")), f, width, height)?;
    }
    Ok(())
}

/// Reads every `*.png` in `dir`, ordered by the number in the file stem.
pub fn read_png_dir(dir: &Path) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        let n = digits
            .parse()
            .map_err(|_| Error::format(&path, "frame file name carries no frame number"))?;
        files.push((n, path));
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no PNG frames found"));
    }
    let mut size = None;
    let mut frames = Vec::with_capacity(files.len());
    for (_, path) in &files {
        let (w, h, rgb) = read_rgb_png(path)?;
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(Error::format(path, "frame size differs from the first frame"));
        }
        frames.push(rgb);
    }
    let (w, h) = size.expect("at least one frame");
    Ok((w, h, frames))
}
