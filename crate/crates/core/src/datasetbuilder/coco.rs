use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::datamodel::{load_image, BBox, ImageRecord, ObjectAnnotation};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Deserialize)]
pub struct CocoAnnotation {
    pub image_id: u64,
    /// Pixel `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub category_id: u64,
}

#[derive(Debug, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// The subset of a COCO detection file the adapter reads.
#[derive(Debug, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Records with normalized boxes (clipped to the image) and empty captions.
/// Images are read from `image_root/<file_name>`; boxes that are degenerate
/// after clipping are dropped with a warning, annotation order kept.
pub fn load_coco(path: &Path, image_root: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoDataset = serde_json::from_str(&text)?;
    let names: BTreeMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &coco.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    coco.images
        .iter()
        .map(|img| {
            if img.width <= 0.0 || img.height <= 0.0 {
                return Err(Error::invalid(format!("image {} has non-positive size", img.id)));
            }
            let mut objects = Vec::new();
            for a in by_image.get(&img.id).map(Vec::as_slice).unwrap_or_default() {
                let name = names
                    .get(&a.category_id)
                    .ok_or_else(|| Error::invalid(format!("unknown category id {}", a.category_id)))?;
                let [x, y, w, h] = a.bbox;
                let clip = |v: f64, s: f64| (v / s).clamp(0.0, 1.0);
                match BBox::new(clip(x, img.width), clip(y, img.height), clip(x + w, img.width), clip(y + h, img.height)) {
                    Ok(b) => objects.push(ObjectAnnotation::new(b, *name)?),
                    Err(e) => log::warn!("image {}: dropped {name} box {:?}: {e}", img.id, a.bbox),
                }
            }
            let image_id = Path::new(&img.file_name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| img.id.to_string());
            Ok(ImageRecord {
                image_id,
                image: load_image(&image_root.join(&img.file_name))?,
                caption_short: String::new(),
                caption_long: String::new(),
                objects,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::save_image;
    use ndarray::Array3;

    #[test]
    fn normalizes_and_clips() {
        let dir = tempfile::tempdir().unwrap();
        save_image(&Array3::zeros((20, 40, 3)), &dir.path().join("a.png")).unwrap();
        let json = r#"{
            "images": [{"id": 7, "file_name": "a.png", "width": 40, "height": 20}],
            "annotations": [
                {"image_id": 7, "bbox": [10, 5, 20, 10], "category_id": 2},
                {"image_id": 7, "bbox": [30, 0, 20, 30], "category_id": 1},
                {"image_id": 7, "bbox": [50, 0, 5, 5], "category_id": 1}
            ],
            "categories": [{"id": 1, "name": "ship"}, {"id": 2, "name": "storage tank"}]
        }"#;
        let path = dir.path().join("ann.json");
        std::fs::write(&path, json).unwrap();
        let rs = load_coco(&path, dir.path()).unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].image_id, "a");
        assert_eq!(rs[0].objects.len(), 2);
        assert_eq!(rs[0].objects[0].category, "storage tank");
        assert_eq!(rs[0].objects[0].bbox.to_array(), [0.25, 0.25, 0.75, 0.75]);
        assert_eq!(rs[0].objects[1].bbox.to_array(), [0.75, 0.0, 1.0, 1.0]);
    }
}
