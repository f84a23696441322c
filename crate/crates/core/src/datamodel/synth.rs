//! Synthetic land-cover scenes: a grid of class regions, each filled with a
//! class-specific color and texture plus Gaussian noise. Pixel values are
//! quantized to 8-bit levels so PNG storage is lossless.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, ImageRecord, Mask, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub enum Texture {
    Flat,
    HStripes(usize),
    VStripes(usize),
    Checker(usize),
    Diagonal(usize),
}

impl Texture {
    fn value(self, x: usize, y: usize) -> f64 {
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        match self {
            Texture::Flat => 0.0,
            Texture::HStripes(p) => sign((y / p).is_multiple_of(2)),
            Texture::VStripes(p) => sign((x / p).is_multiple_of(2)),
            Texture::Checker(p) => sign((x / p + y / p).is_multiple_of(2)),
            Texture::Diagonal(p) => sign(((x + y) / p).is_multiple_of(2)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PaletteEntry {
    pub name: &'static str,
    pub color: [f64; 3],
    /// Second appearance of the class, used when a scene has two modes.
    pub alt_color: [f64; 3],
    pub texture: Texture,
    pub amplitude: f64,
}

pub const PALETTE: [PaletteEntry; 10] = [
    PaletteEntry { name: "forest", color: [0.15, 0.42, 0.18], alt_color: [0.28, 0.30, 0.10], texture: Texture::Checker(2), amplitude: 0.08 },
    PaletteEntry { name: "water", color: [0.12, 0.30, 0.62], alt_color: [0.10, 0.52, 0.50], texture: Texture::Flat, amplitude: 0.0 },
    PaletteEntry { name: "farmland", color: [0.62, 0.58, 0.24], alt_color: [0.50, 0.72, 0.12], texture: Texture::VStripes(4), amplitude: 0.10 },
    PaletteEntry { name: "building", color: [0.60, 0.52, 0.50], alt_color: [0.78, 0.28, 0.22], texture: Texture::Checker(4), amplitude: 0.15 },
    PaletteEntry { name: "road", color: [0.38, 0.38, 0.40], alt_color: [0.18, 0.18, 0.22], texture: Texture::HStripes(4), amplitude: 0.10 },
    PaletteEntry { name: "bare soil", color: [0.70, 0.50, 0.32], alt_color: [0.52, 0.36, 0.22], texture: Texture::Diagonal(4), amplitude: 0.06 },
    PaletteEntry { name: "grassland", color: [0.45, 0.68, 0.30], alt_color: [0.68, 0.80, 0.48], texture: Texture::HStripes(2), amplitude: 0.05 },
    PaletteEntry { name: "parking lot", color: [0.80, 0.80, 0.82], alt_color: [0.58, 0.62, 0.72], texture: Texture::VStripes(2), amplitude: 0.12 },
    PaletteEntry { name: "beach", color: [0.90, 0.82, 0.58], alt_color: [0.98, 0.68, 0.42], texture: Texture::Flat, amplitude: 0.0 },
    PaletteEntry { name: "snow", color: [0.95, 0.96, 0.98], alt_color: [0.80, 0.90, 1.00], texture: Texture::Diagonal(2), amplitude: 0.03 },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
}

impl GridLayout {
    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub image_size: usize,
    /// K = rows * cols class regions per image.
    pub layout: GridLayout,
    /// Classes drawn from the first `num_classes` palette entries.
    pub num_classes: usize,
    pub sigma: f64,
    /// 1: one color per class. 2: each `mode_block` square of a region
    /// independently takes the class color or its alternate.
    pub appearance_modes: usize,
    pub mode_block: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            layout: GridLayout { rows: 2, cols: 2 },
            num_classes: 6,
            sigma: 0.05,
            appearance_modes: 2,
            mode_block: 8,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn class_names(&self) -> Vec<String> {
        PALETTE[..self.num_classes.min(PALETTE.len())]
            .iter()
            .map(|p| p.name.to_string())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let k = self.layout.regions();
        if k == 0 {
            return Err(Error::invalid("layout must have at least one region"));
        }
        if self.num_classes > PALETTE.len() {
            return Err(Error::invalid(format!(
                "{} classes requested but the palette has {}",
                self.num_classes,
                PALETTE.len()
            )));
        }
        if k > self.num_classes {
            return Err(Error::invalid(format!(
                "K={k} regions exceed the {} available classes",
                self.num_classes
            )));
        }
        if self.image_size < self.layout.rows.max(self.layout.cols) {
            return Err(Error::invalid("image smaller than the region grid"));
        }
        if !(1..=2).contains(&self.appearance_modes) || self.mode_block == 0 {
            return Err(Error::invalid("appearance_modes must be 1 or 2 and mode_block positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<ImageRecord>,
    /// Per-record pixel labels; values index `class_names`.
    pub masks: Vec<Mask>,
    pub class_names: Vec<String>,
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

fn cell_name(layout: GridLayout, r: usize, c: usize) -> String {
    if layout.rows == 2 && layout.cols == 2 {
        ["top-left", "top-right", "bottom-left", "bottom-right"][r * 2 + c].to_string()
    } else if layout.regions() == 1 {
        "whole scene".to_string()
    } else {
        format!("row {} column {}", r + 1, c + 1)
    }
}

/// Generates `n` records. Record `i` depends only on `(spec.seed, i)`.
pub fn synthesize_dataset(spec: &SyntheticSceneSpec, n: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    let class_names = spec.class_names();
    let (records, masks) = (0..n).map(|i| synth_one(spec, i)).unzip();
    Ok(SyntheticDataset {
        records,
        masks,
        class_names,
    })
}

fn synth_one(spec: &SyntheticSceneSpec, index: usize) -> (ImageRecord, Mask) {
    let mut rng = rng::stream(spec.seed, &format!("{}/{index}", rng::SYNTH));
    let size = spec.image_size;
    let GridLayout { rows, cols } = spec.layout;

    let mut classes: Vec<usize> = (0..spec.num_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(rows * cols);

    let ybounds: Vec<usize> = (0..=rows).map(|r| (r * size + rows / 2) / rows).collect();
    let xbounds: Vec<usize> = (0..=cols).map(|c| (c * size + cols / 2) / cols).collect();

    let mut mask = Array2::<u8>::zeros((size, size));
    let mut objects = Vec::with_capacity(rows * cols);
    let mut ordered_names = Vec::with_capacity(rows * cols);
    let mut placements = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let class = classes[r * cols + c];
            let (y0, y1, x0, x1) = (ybounds[r], ybounds[r + 1], xbounds[c], xbounds[c + 1]);
            for y in y0..y1 {
                for x in x0..x1 {
                    mask[[y, x]] = class as u8;
                }
            }
            let s = size as f64;
            let bbox = BBox::new(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s)
                .expect("grid cells are non-degenerate");
            let name = PALETTE[class].name;
            objects.push(ObjectAnnotation::new(bbox, name).expect("palette names are non-empty"));
            ordered_names.push(name);
            placements.push(format!("{name} in the {}", cell_name(spec.layout, r, c)));
        }
    }

    let blocks = size.div_ceil(spec.mode_block);
    let alt = Array2::from_shape_fn((blocks, blocks), |_| spec.appearance_modes == 2 && rng.random_bool(0.5));
    let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut image = Array3::<f64>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let entry = PALETTE[mask[[y, x]] as usize];
            let t = entry.amplitude * entry.texture.value(x, y);
            let color = if alt[[y / spec.mode_block, x / spec.mode_block]] {
                entry.alt_color
            } else {
                entry.color
            };
            for ch in 0..3 {
                let n = if spec.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let v = (color[ch] + t + n).clamp(0.0, 1.0);
                image[[y, x, ch]] = (v * 255.0).round() / 255.0;
            }
        }
    }

    let caption_short = format!("a satellite image with {}.", join_names(&ordered_names));
    let caption_long = format!(
        "a remote sensing scene divided into {} regions: {}. each region has a uniform land cover.",
        rows * cols,
        placements.join(", ")
    );
    let record = ImageRecord {
        image_id: format!("synth_{}_{index:05}", spec.seed),
        image,
        caption_short,
        caption_long,
        objects,
    };
    (record, mask)
}
