use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use rsclip_core::datamodel::{load_manifest, load_mask, synthesize_dataset, ImageRecord, Mask, SyntheticSceneSpec};

use crate::config::DataConfig;

pub const CLASSES_FILE: &str = "classes.json";
pub const MASKS_DIR: &str = "masks";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Seed offset of the synthetic evaluation split.
pub const EVAL_SPLIT_OFFSET: u64 = 1000;

pub struct LabeledSet {
    pub records: Vec<ImageRecord>,
    pub masks: Vec<Mask>,
    pub class_names: Vec<String>,
}

fn records_from(path: &Path) -> Result<Vec<ImageRecord>> {
    let loaded = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    for r in &loaded.rejected {
        log::warn!("{}:{}: {}", path.display(), r.line, r.reason);
    }
    Ok(loaded.records)
}

pub fn training_records(cfg: &DataConfig) -> Result<Vec<ImageRecord>> {
    match &cfg.manifest {
        Some(p) => records_from(p),
        None => Ok(synthesize_dataset(&cfg.synthetic, cfg.n_train)?.records),
    }
}

fn beside(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading classes {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing classes {}", path.display()))
}

/// The held-out labeled split used for metrics.
pub fn eval_set(cfg: &DataConfig) -> Result<LabeledSet> {
    let manifest = cfg.eval_manifest.as_ref().or(cfg.manifest.as_ref());
    let Some(manifest) = manifest else {
        let spec = SyntheticSceneSpec {
            seed: cfg.synthetic.seed + EVAL_SPLIT_OFFSET,
            ..cfg.synthetic.clone()
        };
        let ds = synthesize_dataset(&spec, cfg.n_eval)?;
        return Ok(LabeledSet {
            records: ds.records,
            masks: ds.masks,
            class_names: ds.class_names,
        });
    };
    let records = records_from(manifest)?;
    let masks_dir = cfg.masks_dir.clone().unwrap_or_else(|| beside(manifest, MASKS_DIR));
    let classes = cfg.classes.clone().unwrap_or_else(|| beside(manifest, CLASSES_FILE));
    let masks = records
        .iter()
        .map(|r| {
            let p = masks_dir.join(format!("{}.png", r.image_id));
            load_mask(&p).with_context(|| format!("mask for {}", r.image_id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSet {
        records,
        masks,
        class_names: read_classes(&classes)?,
    })
}

/// Class names for segmentation when none are given explicitly.
pub fn default_class_names(cfg: &DataConfig) -> Result<Vec<String>> {
    match cfg.classes.as_ref() {
        Some(p) => read_classes(p),
        None => match cfg.eval_manifest.as_ref().or(cfg.manifest.as_ref()) {
            Some(m) => read_classes(&beside(m, CLASSES_FILE)),
            None => Ok(cfg.synthetic.class_names()),
        },
    }
}
