//! Multi-granularity samples: images with short/long captions and
//! bbox-category objects, plus the batches the three objectives consume.

mod batch;
mod manifest;
mod synth;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{build_region_batch, GlobalBatch, RegionBatch, RegionEntry, RegionSampling};
pub use manifest::{
    load_image, load_manifest, load_mask, save_image, save_manifest, save_mask, LoadedManifest,
    Rejection,
};
pub use synth::{synthesize_dataset, GridLayout, SyntheticDataset, SyntheticSceneSpec, PALETTE};

/// H x W x C pixel array with values in `[0, 1]`.
pub type Image = Array3<f64>;

/// H x W map of integer class ids.
pub type Mask = Array2<u8>;

/// Default region-text template.
pub const DEFAULT_TEMPLATE: &str = "a satellite image of {}";

/// Mask value for unlabeled pixels.
pub const IGNORE_LABEL: u8 = 255;

/// Axis-aligned box in normalized image coordinates, `(x1, y1)` top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBBox("non-finite coordinate".into()));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBBox("degenerate bbox".into()));
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidBBox("bbox outside [0, 1]".into()));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub bbox: BBox,
    pub category: String,
}

impl ObjectAnnotation {
    pub fn new(bbox: BBox, category: impl Into<String>) -> Result<Self> {
        let category = category.into();
        if category.trim().is_empty() {
            return Err(Error::invalid("empty category"));
        }
        Ok(Self { bbox, category })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image: Image,
    pub caption_short: String,
    pub caption_long: String,
    pub objects: Vec<ObjectAnnotation>,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn caption(&self, kind: CaptionKind) -> &str {
        match kind {
            CaptionKind::Short => &self.caption_short,
            CaptionKind::Long => &self.caption_long,
        }
    }

    pub fn caption_mut(&mut self, kind: CaptionKind) -> &mut String {
        match kind {
            CaptionKind::Short => &mut self.caption_short,
            CaptionKind::Long => &mut self.caption_long,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionKind {
    Short,
    Long,
}

/// Substitutes `category` into the single `{}` placeholder of `template`.
pub fn template_category(category: &str, template: &str) -> Result<String> {
    match template.matches("{}").count() {
        1 => Ok(template.replacen("{}", category, 1)),
        0 => Err(Error::invalid(format!("template {template:?} has no {{}} placeholder"))),
        n => Err(Error::invalid(format!(
            "template {template:?} has {n} placeholders, expected one"
        ))),
    }
}
