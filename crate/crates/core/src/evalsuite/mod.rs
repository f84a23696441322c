//! Feature diagnostics (DBI, region-text Acc@1, pixel-pair coherence mAP)
//! and task metrics (OVSS mIoU, zero-shot top-1, retrieval recall).

mod heatmap;
mod masks;
mod metrics;

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datamodel::{template_category, CaptionKind, Image, ImageRecord, Mask, DEFAULT_TEMPLATE, IGNORE_LABEL};
use crate::encoders::{PatchGrid, TeacherStudentBundle, VisionEncoder};
use crate::error::{Error, Result};
use crate::rng;

pub use heatmap::{anchor_similarity_map, render_heatmap, save_heatmap, similarity_map};
pub use masks::{class_prototypes, downsample_mask, mask_pool_instances, pool_by_label, upsample_nearest, InstanceFeatureSet};
pub use metrics::{
    average_precision, coherence_map, dbi, miou, miou_dataset, ovss_miou, ovss_segment, region_text_acc1,
    retrieval_recall, sample_pixel_pairs, zsc_top1, ApMode, PixelPair, RetrievalRecall,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dbi,
    Acc1,
    Map,
    Miou,
    Zsc,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Dbi, Metric::Acc1, Metric::Map, Metric::Miou, Metric::Zsc, Metric::Recall];
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "dbi" => Metric::Dbi,
            "acc1" => Metric::Acc1,
            "map" => Metric::Map,
            "miou" => Metric::Miou,
            "zsc" => Metric::Zsc,
            "recall" => Metric::Recall,
            other => return Err(Error::invalid(format!("unknown metric {other:?}"))),
        })
    }
}

/// Which per-cell features the dense metrics read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseSource {
    /// Residual-free customized attention at the final block.
    #[default]
    CustAttn,
    /// Ordinary patch tokens of the full forward pass.
    Patches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub n_images: usize,
    pub n_cap: usize,
    pub n_pairs: usize,
    pub ap_mode: ApMode,
    pub dbi_normalize: bool,
    pub template: String,
    pub caption_kind: CaptionKind,
    pub dense_source: DenseSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            n_images: 300,
            n_cap: 256,
            n_pairs: 500,
            ap_mode: ApMode::PerImage,
            dbi_normalize: false,
            template: DEFAULT_TEMPLATE.to_string(),
            caption_kind: CaptionKind::Short,
            dense_source: DenseSource::CustAttn,
        }
    }
}

impl EvalConfig {
    /// Sampling sizes shrunk for datasets of a few dozen images.
    pub fn toy() -> Self {
        Self {
            n_images: 64,
            n_cap: 16,
            n_pairs: 100,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.n_pairs < 2 {
            return Err(Error::Config("eval needs n_images >= 1 and n_pairs >= 2".into()));
        }
        template_category("x", &self.template).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_images: usize,
    pub n_cap: usize,
    pub n_pairs: usize,
    pub ap_mode: ApMode,
    pub dbi_normalize: bool,
    pub dense_source: DenseSource,
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dbi: Option<f64>,
    pub acc1: Option<f64>,
    pub map_coherence: Option<f64>,
    pub miou: Option<f64>,
    pub zsc_top1: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub images_evaluated: usize,
    pub sampling: SamplingConfig,
    pub seed: u64,
    /// Why a requested metric is missing.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("acc1", self.acc1),
            ("map_coherence", self.map_coherence),
            ("miou", self.miou),
            ("zsc_top1", self.zsc_top1),
            ("recall_at_1", self.recall_at_1),
            ("recall_at_5", self.recall_at_5),
            ("recall_at_10", self.recall_at_10),
        ];
        for (name, v) in unit {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::NonFinite(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        if let Some(d) = self.dbi {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::NonFinite(format!("dbi = {d}")));
            }
        }
        Ok(())
    }
}

/// Evaluation inputs: records with aligned pixel masks whose values index
/// `class_names`.
#[derive(Clone, Copy, Debug)]
pub struct EvalData<'a> {
    pub records: &'a [ImageRecord],
    pub masks: &'a [Mask],
    pub class_names: &'a [String],
}

/// Most frequent labeled class, smaller label on ties.
pub fn majority_label(mask: &Mask) -> Option<usize> {
    let mut counts = [0usize; 256];
    for &l in mask {
        counts[l as usize] += 1;
    }
    counts[IGNORE_LABEL as usize] = 0;
    let (label, n) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (l, &c)| if c > best.1 { (l, c) } else { best });
    (n > 0).then_some(label)
}

/// Template embeddings of every class name, in order.
pub fn class_text_embeddings(bundle: &TeacherStudentBundle, names: &[String], template: &str) -> Result<Vec<Array1<f64>>> {
    names
        .iter()
        .map(|n| Ok(bundle.text.encode_text(&template_category(n, template)?)?.cls))
        .collect()
}

/// Dense features of one image from the configured source.
pub fn dense_grid(encoder: &VisionEncoder, image: &Image, source: DenseSource) -> Result<PatchGrid> {
    match source {
        DenseSource::CustAttn => encoder.dense_features(image),
        DenseSource::Patches => Ok(encoder.encode_image(image)?.patches),
    }
}

pub fn evaluate(bundle: &TeacherStudentBundle, data: EvalData<'_>, config: &EvalConfig, seed: u64) -> Result<MetricReport> {
    config.validate()?;
    if data.records.len() != data.masks.len() {
        return Err(Error::Shape(format!(
            "{} records vs {} masks",
            data.records.len(),
            data.masks.len()
        )));
    }
    if data.records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let mut rng = rng::stream(seed, rng::EVAL);
    let n = data.records.len();
    let chosen: Vec<usize> = if n > config.n_images {
        let mut v = index::sample(&mut rng, n, config.n_images).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let want = |m: Metric| config.metrics.contains(&m);
    let needs_dense = [Metric::Dbi, Metric::Acc1, Metric::Map, Metric::Miou].iter().any(|m| want(*m));
    let needs_cls = want(Metric::Zsc) || want(Metric::Recall);

    let encoder = &bundle.student;
    let masks: Vec<Mask> = chosen.iter().map(|&i| data.masks[i].clone()).collect();
    let mut dense: Vec<PatchGrid> = Vec::new();
    let mut cls: Vec<Array1<f64>> = Vec::new();
    for &i in &chosen {
        let image = &data.records[i].image;
        if needs_cls || (needs_dense && config.dense_source == DenseSource::Patches) {
            let enc = encoder.encode_image(image)?;
            if needs_dense && config.dense_source == DenseSource::Patches {
                dense.push(enc.patches);
            }
            cls.push(enc.cls);
        }
        if needs_dense && config.dense_source == DenseSource::CustAttn {
            dense.push(encoder.dense_features(image)?);
        }
    }
    let needs_class_text = want(Metric::Acc1) || want(Metric::Miou) || want(Metric::Zsc);
    let class_text = if needs_class_text {
        class_text_embeddings(bundle, data.class_names, &config.template)?
    } else {
        Vec::new()
    };

    let mut report = MetricReport {
        dbi: None,
        acc1: None,
        map_coherence: None,
        miou: None,
        zsc_top1: None,
        recall_at_1: None,
        recall_at_5: None,
        recall_at_10: None,
        images_evaluated: chosen.len(),
        sampling: SamplingConfig {
            n_images: config.n_images,
            n_cap: config.n_cap,
            n_pairs: config.n_pairs,
            ap_mode: config.ap_mode,
            dbi_normalize: config.dbi_normalize,
            dense_source: config.dense_source,
            template: config.template.clone(),
        },
        seed,
        notes: BTreeMap::new(),
    };
    let note = |report: &mut MetricReport, key: &str, e: Error| {
        log::warn!("{key} not computed: {e}");
        report.notes.insert(key.to_string(), e.to_string());
    };

    if want(Metric::Dbi) || want(Metric::Acc1) {
        let set = mask_pool_instances(&dense, &masks, data.class_names, config.n_cap, &mut rng)?;
        if want(Metric::Dbi) {
            match dbi(&set, config.dbi_normalize) {
                Ok(v) => report.dbi = Some(v),
                Err(e) => note(&mut report, "dbi", e),
            }
        }
        if want(Metric::Acc1) {
            let text: BTreeMap<String, Array1<f64>> = data.class_names.iter().cloned().zip(class_text.iter().cloned()).collect();
            match region_text_acc1(&set, &text) {
                Ok(v) => report.acc1 = Some(v),
                Err(e) => note(&mut report, "acc1", e),
            }
        }
    }
    if want(Metric::Map) {
        match coherence_map(&dense, &masks, config.n_pairs, config.ap_mode, &mut rng) {
            Ok(v) => report.map_coherence = Some(v),
            Err(e) => note(&mut report, "map_coherence", e),
        }
    }
    if want(Metric::Miou) {
        let preds = dense
            .iter()
            .zip(&masks)
            .map(|(g, m)| {
                let cells = ovss_segment(g, &class_text)?;
                Ok(upsample_nearest(&cells, m.nrows(), m.ncols()))
            })
            .collect::<Result<Vec<_>>>()?;
        match miou_dataset(&preds, &masks) {
            Ok(v) => report.miou = Some(v),
            Err(e) => note(&mut report, "miou", e),
        }
    }
    if want(Metric::Zsc) {
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in cls.iter().zip(&masks) {
            if let Some(l) = majority_label(m) {
                emb.push(c.clone());
                labels.push(l);
            }
        }
        match zsc_top1(&emb, &labels, &class_text) {
            Ok(v) => report.zsc_top1 = Some(v),
            Err(e) => note(&mut report, "zsc_top1", e),
        }
    }
    if want(Metric::Recall) {
        let texts = chosen
            .iter()
            .map(|&i| Ok(bundle.text.encode_text(data.records[i].caption(config.caption_kind))?.cls))
            .collect::<Result<Vec<_>>>()?;
        let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= cls.len()).collect();
        for k in [1, 5, 10].into_iter().filter(|&k| k > cls.len()) {
            note(&mut report, &format!("recall_at_{k}"), Error::invalid(format!("only {} pairs", cls.len())));
        }
        let r = retrieval_recall(&cls, &texts, &ks)?;
        report.recall_at_1 = r.mean.get(&1).copied();
        report.recall_at_5 = r.mean.get(&5).copied();
        report.recall_at_10 = r.mean.get(&10).copied();
    }
    report.validate()?;
    Ok(report)
}
