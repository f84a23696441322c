//! JSON-Lines manifest: one object per line with
//! `{image_path, caption_short, caption_long, objects: [{bbox, category}]}`.
//! Image paths are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{BBox, Image, ImageRecord, Mask, ObjectAnnotation};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ManifestObject {
    bbox: [f64; 4],
    category: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image_path: String,
    caption_short: String,
    caption_long: String,
    objects: Vec<ManifestObject>,
}

/// A record dropped during loading, with the 1-based manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct LoadedManifest {
    pub records: Vec<ImageRecord>,
    pub rejected: Vec<Rejection>,
}

pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = LoadedManifest::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: lineno,
            reason: e.to_string(),
        })?;
        match validate_objects(&parsed.objects) {
            Ok(objects) => {
                let image_path = base.join(&parsed.image_path);
                let image = load_image(&image_path)?;
                let image_id = Path::new(&parsed.image_path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("line{lineno}"));
                out.records.push(ImageRecord {
                    image_id,
                    image,
                    caption_short: parsed.caption_short,
                    caption_long: parsed.caption_long,
                    objects,
                });
            }
            Err(reason) => {
                log::warn!("{}:{lineno}: rejected record: {reason}", path.display());
                out.rejected.push(Rejection {
                    line: lineno,
                    reason,
                });
            }
        }
    }
    Ok(out)
}

fn validate_objects(objects: &[ManifestObject]) -> std::result::Result<Vec<ObjectAnnotation>, String> {
    objects
        .iter()
        .map(|o| {
            let bbox = BBox::try_from(o.bbox).map_err(|e| match e {
                Error::InvalidBBox(r) => r,
                other => other.to_string(),
            })?;
            ObjectAnnotation::new(bbox, o.category.clone()).map_err(|e| e.to_string())
        })
        .collect()
}

/// Writes the manifest and each record's image as `images/<image_id>.png`
/// next to it.
pub fn save_manifest(records: &[ImageRecord], path: &Path) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !records.is_empty() {
        fs::create_dir_all(base.join("images")).map_err(|e| Error::io(base.join("images"), e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let rel = format!("images/{}.png", r.image_id);
        save_image(&r.image, &base.join(&rel))?;
        let line = ManifestLine {
            image_path: rel,
            caption_short: r.caption_short.clone(),
            caption_long: r.caption_long.clone(),
            objects: r
                .objects
                .iter()
                .map(|o| ManifestObject {
                    bbox: o.bbox.to_array(),
                    category: o.category.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Saves an RGB (or single-channel, replicated) image as 8-bit PNG.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_u8(image[[y as usize, x as usize, ch.min(c - 1)]]);
        image::Rgb([px(0), px(1), px(2)])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask[[y as usize, x as usize]]]));
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(PathBuf::from(parent), e))?;
    }
    Ok(())
}
