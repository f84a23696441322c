use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;

use crate::datamodel::{Mask, IGNORE_LABEL};
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Majority label of each `h x w` cell; ignored pixels do not vote, ties go
/// to the smaller label and cells without labeled pixels are ignored.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Mask {
    let (mh, mw) = mask.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut counts = [0usize; 256];
        for y in i * mh / h..(i + 1) * mh / h {
            for x in j * mw / w..(j + 1) * mw / w {
                counts[mask[[y, x]] as usize] += 1;
            }
        }
        counts[IGNORE_LABEL as usize] = 0;
        let (label, n) = counts
            .iter()
            .enumerate()
            .fold((IGNORE_LABEL as usize, 0), |best, (l, &c)| if c > best.1 { (l, c) } else { best });
        if n == 0 {
            IGNORE_LABEL
        } else {
            label as u8
        }
    })
}

/// Nearest-neighbour upsampling of a cell map to `height x width`.
pub fn upsample_nearest(map: &Array2<usize>, height: usize, width: usize) -> Array2<usize> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((height, width), |(y, x)| map[[y * h / height, x * w / width]])
}

/// Mean feature over the cells of each label, after downsampling `mask` to
/// the grid.
pub fn pool_by_label(grid: &PatchGrid, mask: &Mask) -> BTreeMap<u8, Array1<f64>> {
    let cells = downsample_mask(mask, grid.h, grid.w);
    let mut sums: BTreeMap<u8, (Array1<f64>, usize)> = BTreeMap::new();
    for (r, &label) in cells.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let e = sums.entry(label).or_insert_with(|| (Array1::zeros(grid.dim()), 0));
        e.0 += &grid.data.row(r);
        e.1 += 1;
    }
    sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
}

/// Per-class mean of unit-normalized dense cells over a reference set, usable
/// in place of text embeddings for segmentation. Errors when a class in
/// `0..n_classes` has no labeled cell.
pub fn class_prototypes(dense: &[PatchGrid], masks: &[Mask], n_classes: usize) -> Result<Vec<Array1<f64>>> {
    if dense.len() != masks.len() {
        return Err(Error::invalid("one mask per dense grid required"));
    }
    let dim = dense.first().map_or(0, PatchGrid::dim);
    let mut sums = vec![(Array1::<f64>::zeros(dim), 0usize); n_classes];
    for (grid, mask) in dense.iter().zip(masks) {
        let cells = downsample_mask(mask, grid.h, grid.w);
        for (r, &label) in cells.iter().enumerate() {
            let Some(slot) = sums.get_mut(label as usize) else { continue };
            let row = grid.data.row(r);
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                slot.0.scaled_add(1.0 / norm, &row);
                slot.1 += 1;
            }
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(c, (s, n))| {
            if n == 0 {
                Err(Error::invalid(format!("class {c} has no labeled cells")))
            } else {
                Ok(s / n as f64)
            }
        })
        .collect()
}

/// Mask-pooled instance vectors grouped by category.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatureSet {
    pub categories: Vec<String>,
    /// Row `r` of `features[k]` is one instance of `categories[k]`.
    pub features: Vec<Array2<f64>>,
    pub n_cap: usize,
}

impl InstanceFeatureSet {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn instances(&self) -> usize {
        self.features.iter().map(|f| f.nrows()).sum()
    }
}

/// Mean feature of every labeled class in every image: one instance per
/// (image, class). Categories with more than `n_cap` instances are kept and
/// subsampled to exactly `n_cap` without replacement.
pub fn mask_pool_instances(
    dense: &[PatchGrid],
    masks: &[Mask],
    categories: &[String],
    n_cap: usize,
    rng: &mut Rng,
) -> Result<InstanceFeatureSet> {
    if dense.len() != masks.len() {
        return Err(Error::Shape(format!("{} feature grids vs {} masks", dense.len(), masks.len())));
    }
    let mut pooled: BTreeMap<u8, Vec<Array1<f64>>> = BTreeMap::new();
    for (img, (grid, mask)) in dense.iter().zip(masks).enumerate() {
        let means = pool_by_label(grid, mask);
        for label in mask.iter().copied().filter(|l| *l != IGNORE_LABEL).collect::<BTreeSet<_>>() {
            if !means.contains_key(&label) {
                log::debug!("image {img}: class {label} has no labeled cell at grid resolution, skipped");
            }
        }
        for (label, v) in means {
            pooled.entry(label).or_default().push(v);
        }
    }
    let mut out = InstanceFeatureSet {
        categories: Vec::new(),
        features: Vec::new(),
        n_cap,
    };
    for (label, rows) in pooled {
        let name = categories
            .get(label as usize)
            .ok_or_else(|| Error::invalid(format!("mask label {label} has no category name")))?;
        if rows.len() <= n_cap {
            log::debug!("category {name}: {} instances, cap {n_cap}, dropped", rows.len());
            continue;
        }
        let mut picks = index::sample(rng, rows.len(), n_cap).into_vec();
        picks.sort_unstable();
        let views: Vec<_> = picks.iter().map(|&i| rows[i].view().insert_axis(Axis(0))).collect();
        out.categories.push(name.clone());
        out.features.push(ndarray::concatenate(Axis(0), &views).expect("equal widths"));
    }
    Ok(out)
}
