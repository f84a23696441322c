//! Region-level visual embeddings and local views.
//!
//! RoIAlign is expressed as a fixed weight matrix over the patch grid, so
//! the same weights serve plain evaluation and differentiable training.

use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datamodel::{BBox, Image};
use crate::encoders::{PatchGrid, VisionEncoder};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// CLS embedding of the cropped region.
    ClsOfCrop,
    /// Mean patch embedding of the cropped region.
    PooledPatchesOfCrop,
    /// RoIAlign over the full image's patch grid.
    RoiEmbedding,
}

impl std::str::FromStr for RegionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_of_crop" | "cls" => Ok(RegionMode::ClsOfCrop),
            "pooled_patches_of_crop" | "pooled" => Ok(RegionMode::PooledPatchesOfCrop),
            "roi_embedding" | "roi" => Ok(RegionMode::RoiEmbedding),
            _ => Err(Error::invalid(format!("unknown region mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeature {
    pub vector: Array1<f64>,
    pub mode: RegionMode,
    pub bbox: BBox,
}

/// Sample points per output cell along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingRatio {
    Fixed(usize),
    /// [`ADAPTIVE_DENSITY`] points per patch unit of cell extent, at least one.
    Adaptive,
}

/// Sample points per patch unit under [`SamplingRatio::Adaptive`]. Even, so
/// the kinks of the bilinear field at patch centers fall between samples.
pub const ADAPTIVE_DENSITY: usize = 8;

fn samples_for(extent: f64, ratio: SamplingRatio) -> usize {
    match ratio {
        SamplingRatio::Fixed(n) => n.max(1),
        SamplingRatio::Adaptive => ((extent * ADAPTIVE_DENSITY as f64 - 1e-9).ceil() as usize).max(1),
    }
}

/// Accumulates bilinear weights for continuous grid coordinate `(x, y)`
/// where cell `(i, j)` has its center at `(j + 0.5, i + 0.5)`.
fn bilinear_weights(h: usize, w: usize, x: f64, y: f64, weight: f64, row: &mut [f64]) {
    let xs = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let ys = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xs.floor() as usize, ys.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xs - x0 as f64, ys - y0 as f64);
    row[y0 * w + x0] += weight * (1.0 - fx) * (1.0 - fy);
    row[y0 * w + x1] += weight * fx * (1.0 - fy);
    row[y1 * w + x0] += weight * (1.0 - fx) * fy;
    row[y1 * w + x1] += weight * fx * fy;
}

/// `(oh·ow) x (h·w)` matrix mapping a patch grid to RoIAlign output cells.
pub fn roi_weights(h: usize, w: usize, bbox: &BBox, out: (usize, usize), ratio: SamplingRatio) -> Array2<f64> {
    let (oh, ow) = out;
    let bin_w = bbox.width() * w as f64 / ow as f64;
    let bin_h = bbox.height() * h as f64 / oh as f64;
    let nx = samples_for(bin_w, ratio);
    let ny = samples_for(bin_h, ratio);
    let weight = 1.0 / (nx * ny) as f64;
    let mut m = Array2::zeros((oh * ow, h * w));
    for by in 0..oh {
        for bx in 0..ow {
            let mut row = vec![0.0; h * w];
            for sy in 0..ny {
                let y = bbox.y1 * h as f64 + (by as f64 + (sy as f64 + 0.5) / ny as f64) * bin_h;
                for sx in 0..nx {
                    let x = bbox.x1 * w as f64 + (bx as f64 + (sx as f64 + 0.5) / nx as f64) * bin_w;
                    bilinear_weights(h, w, x, y, weight, &mut row);
                }
            }
            m.row_mut(by * ow + bx).assign(&Array1::from(row));
        }
    }
    m
}

/// RoIAlign with one bilinear sample at each output cell center. Returns
/// `(oh·ow) x d`, cells in row-major order.
pub fn roi_align(patches: &PatchGrid, bbox: &BBox, out: (usize, usize)) -> Array2<f64> {
    roi_align_with(patches, bbox, out, SamplingRatio::Fixed(1))
}

pub fn roi_align_with(patches: &PatchGrid, bbox: &BBox, out: (usize, usize), ratio: SamplingRatio) -> Array2<f64> {
    roi_weights(patches.h, patches.w, bbox, out, ratio).dot(&patches.data)
}

/// Single-cell RoIAlign with adaptive sampling: the mean of the bilinear
/// patch field over the box. The whole-grid box gives the mean patch.
pub fn roi_embedding(patches: &PatchGrid, bbox: &BBox) -> RegionFeature {
    let v = roi_align_with(patches, bbox, (1, 1), SamplingRatio::Adaptive);
    RegionFeature {
        vector: v.row(0).to_owned(),
        mode: RegionMode::RoiEmbedding,
        bbox: *bbox,
    }
}

/// Pixel-aligned crop of `bbox`, bilinearly resized to `out_size` square.
pub fn crop_image(image: &Image, bbox: &BBox, out_size: usize) -> Result<Image> {
    let (h, w, c) = image.dim();
    let px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n);
    let (x0, x1) = (px(bbox.x1, w), px(bbox.x2, w));
    let (y0, y1) = (px(bbox.y1, h), px(bbox.y2, h));
    let (cw, ch) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
    if cw < 2 || ch < 2 {
        return Err(Error::invalid(format!("crop of {cw}x{ch} px is smaller than 2x2")));
    }
    let sx = cw as f64 / out_size as f64;
    let sy = ch as f64 / out_size as f64;
    let mut out = Array3::zeros((out_size, out_size, c));
    for v in 0..out_size {
        let ys = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let ya = ys.floor() as usize;
        let yb = (ya + 1).min(ch - 1);
        let fy = ys - ya as f64;
        for u in 0..out_size {
            let xs = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let xa = xs.floor() as usize;
            let xb = (xa + 1).min(cw - 1);
            let fx = xs - xa as f64;
            for k in 0..c {
                let p = |yy: usize, xx: usize| image[[y0 + yy, x0 + xx, k]];
                out[[v, u, k]] = (1.0 - fy) * ((1.0 - fx) * p(ya, xa) + fx * p(ya, xb))
                    + fy * ((1.0 - fx) * p(yb, xa) + fx * p(yb, xb));
            }
        }
    }
    Ok(out)
}

/// Region embedding in one of the three modes. `patches` must be the full
/// image's patch grid for [`RegionMode::RoiEmbedding`].
pub fn region_feature(
    image: &Image,
    patches: Option<&PatchGrid>,
    bbox: &BBox,
    mode: RegionMode,
    encoder: &VisionEncoder,
) -> Result<RegionFeature> {
    let vector = match mode {
        RegionMode::RoiEmbedding => {
            let grid = patches.ok_or_else(|| Error::invalid("roi_embedding needs the full-image patch grid"))?;
            return Ok(roi_embedding(grid, bbox));
        }
        RegionMode::ClsOfCrop => {
            let crop = crop_image(image, bbox, encoder.config.image_size)?;
            encoder.encode_image(&crop)?.cls
        }
        RegionMode::PooledPatchesOfCrop => {
            let crop = crop_image(image, bbox, encoder.config.image_size)?;
            encoder.encode_image(&crop)?.patches.mean()
        }
    };
    Ok(RegionFeature {
        vector,
        mode,
        bbox: *bbox,
    })
}

/// Differentiable counterpart of [`region_feature`]: a `1 x e` node.
/// `full_patches` is the `hw x e` patch node of the same image.
pub fn region_feature_on_graph(
    g: &mut Graph,
    bound: &Bound,
    encoder: &VisionEncoder,
    image: &Image,
    full_patches: Option<Var>,
    bbox: &BBox,
    mode: RegionMode,
) -> Result<Var> {
    match mode {
        RegionMode::RoiEmbedding => {
            let patches = full_patches.ok_or_else(|| Error::invalid("roi_embedding needs the full-image patch grid"))?;
            let n = encoder.config.grid();
            let w = g.constant(roi_weights(n, n, bbox, (1, 1), SamplingRatio::Adaptive));
            Ok(g.matmul(w, patches))
        }
        RegionMode::ClsOfCrop | RegionMode::PooledPatchesOfCrop => {
            let crop = crop_image(image, bbox, encoder.config.image_size)?;
            let (cls, patches) = encoder.forward(g, bound, &crop)?;
            Ok(if mode == RegionMode::ClsOfCrop {
                cls
            } else {
                g.mean_rows(patches)
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMethod {
    Random,
    Grid,
}

impl std::str::FromStr for CropMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CropMethod::Random),
            "grid" => Ok(CropMethod::Grid),
            _ => Err(Error::invalid(format!("unknown crop method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub boxes: Vec<BBox>,
    pub method: CropMethod,
    pub seed: u64,
    pub scale_range: (f64, f64),
}

pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.2, 0.8);
pub const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Random boxes have area fraction uniform in `scale_range`, aspect ratio
/// log-uniform in [3/4, 4/3] and uniform position; grid boxes are the cells
/// of a regular √m x √m partition.
pub fn plan_crops(method: CropMethod, m: usize, seed: u64, scale_range: (f64, f64)) -> Result<CropPlan> {
    if m == 0 {
        return Err(Error::invalid("at least one crop is required"));
    }
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("scale range {scale_range:?} must satisfy 0 < lo <= hi <= 1")));
    }
    let boxes = match method {
        CropMethod::Grid => {
            let g = (m as f64).sqrt().round() as usize;
            if g * g != m {
                return Err(Error::invalid(format!("grid cropping needs a square count, got {m}")));
            }
            let mut boxes = Vec::with_capacity(m);
            for r in 0..g {
                for c in 0..g {
                    let f = |i: usize| i as f64 / g as f64;
                    boxes.push(BBox::new(f(c), f(r), f(c + 1), f(r + 1))?);
                }
            }
            boxes
        }
        CropMethod::Random => {
            let mut rng = Rng::seed_from_u64(seed);
            let (alo, ahi) = (ASPECT_RANGE.0.ln(), ASPECT_RANGE.1.ln());
            (0..m)
                .map(|_| {
                    let area = rng.random_range(lo..=hi);
                    let (w, h) = loop {
                        let aspect = rng.random_range(alo..=ahi).exp();
                        let (w, h) = ((area * aspect).sqrt(), (area / aspect).sqrt());
                        if w <= 1.0 && h <= 1.0 {
                            break (w, h);
                        }
                    };
                    let x = rng.random_range(0.0..=1.0 - w);
                    let y = rng.random_range(0.0..=1.0 - h);
                    BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(CropPlan {
        boxes,
        method,
        seed,
        scale_range,
    })
}
