use std::borrow::Borrow;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{template_category, BBox, CaptionKind, Image, ImageRecord};
use crate::error::{Error, Result};
use crate::losses::PositiveSets;
use crate::rng::Rng;

/// N image-caption pairs, paired by position.
#[derive(Clone, Debug)]
pub struct GlobalBatch {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub captions: Vec<String>,
}

impl GlobalBatch {
    pub fn from_records(records: &[ImageRecord], indices: &[usize], kind: CaptionKind) -> Self {
        let mut batch = GlobalBatch {
            ids: Vec::with_capacity(indices.len()),
            images: Vec::with_capacity(indices.len()),
            captions: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let r = &records[i];
            batch.ids.push(r.image_id.clone());
            batch.images.push(r.image.clone());
            batch.captions.push(r.caption(kind).to_string());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    /// Index into the record slice the batch was built from.
    pub source: usize,
    pub bbox: BBox,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionBatch {
    pub entries: Vec<RegionEntry>,
    pub category_texts: Vec<String>,
}

impl RegionBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// P(i) from category equality.
    pub fn positive_sets(&self) -> PositiveSets {
        PositiveSets::from_labels(self.entries.iter().map(|e| e.category.as_str()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSampling {
    /// With replacement, uniform over every object in the given records.
    #[default]
    UniformOverObjects,
}

pub fn build_region_batch<R: Borrow<ImageRecord>>(
    records: &[R],
    m: usize,
    sampling: RegionSampling,
    template: &str,
    rng: &mut Rng,
) -> Result<RegionBatch> {
    let RegionSampling::UniformOverObjects = sampling;
    let pool: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| (0..r.borrow().objects.len()).map(move |oi| (ri, oi)))
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("no objects to sample regions from"));
    }
    let mut entries = Vec::with_capacity(m);
    let mut category_texts = Vec::with_capacity(m);
    for _ in 0..m {
        let (ri, oi) = pool[rng.random_range(0..pool.len())];
        let obj = &records[ri].borrow().objects[oi];
        category_texts.push(template_category(&obj.category, template)?);
        entries.push(RegionEntry {
            source: ri,
            bbox: obj.bbox,
            category: obj.category.clone(),
        });
    }
    Ok(RegionBatch {
        entries,
        category_texts,
    })
}
