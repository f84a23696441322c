use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::masks::{downsample_mask, upsample_nearest, InstanceFeatureSet};
use crate::datamodel::{Mask, IGNORE_LABEL};
use crate::encoders::{similarity, PatchGrid};
use crate::error::{Error, Result};
use crate::losses::normalize_rows;
use crate::rng::Rng;

fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Davies-Bouldin index over the categories of `set`. With `normalize`,
/// instance vectors are scaled to unit length first.
pub fn dbi(set: &InstanceFeatureSet, normalize: bool) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::invalid(format!("DBI needs at least 2 categories, got {}", set.len())));
    }
    let feats: Vec<Array2<f64>> = if normalize {
        set.features
            .iter()
            .map(|f| normalize_rows(f.view(), "dbi").map(|(u, _)| u))
            .collect::<Result<_>>()?
    } else {
        set.features.clone()
    };
    let mut centroids = Vec::with_capacity(set.len());
    let mut scatter = Vec::with_capacity(set.len());
    for (f, name) in feats.iter().zip(&set.categories) {
        let c = f
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::invalid(format!("category {name} has no instances")))?;
        scatter.push(f.rows().into_iter().map(|r| euclid(r, c.view())).sum::<f64>() / f.nrows() as f64);
        centroids.push(c);
    }
    let k = set.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let m = euclid(centroids[i].view(), centroids[j].view());
            if m == 0.0 {
                return Err(Error::CoincidentCentroids(set.categories[i].clone(), set.categories[j].clone()));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Index of the most similar candidate; the first wins ties.
fn argmax_cosine(query: ArrayView1<f64>, candidates: &[Array1<f64>]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = similarity(query, c.view())?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Fraction of instances whose most similar category text is their own.
pub fn region_text_acc1(set: &InstanceFeatureSet, text: &BTreeMap<String, Array1<f64>>) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::invalid(format!("Acc@1 needs at least 2 categories, got {}", set.len())));
    }
    let protos: Vec<Array1<f64>> = set
        .categories
        .iter()
        .map(|c| {
            text.get(c)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no text embedding for category {c}")))
        })
        .collect::<Result<_>>()?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (k, f) in set.features.iter().enumerate() {
        for row in f.rows() {
            hit += usize::from(argmax_cosine(row, &protos)? == k);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no instances"));
    }
    Ok(hit as f64 / n as f64)
}

/// All-points interpolated average precision. Items are ranked by score,
/// ties keep input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += usize::from(labels[i]);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for r in (0..precision.len().saturating_sub(1)).rev() {
        precision[r] = precision[r].max(precision[r + 1]);
    }
    let sum: f64 = order
        .iter()
        .zip(&precision)
        .filter(|(i, _)| labels[**i])
        .map(|(_, p)| p)
        .sum();
    Ok(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPair {
    /// Cell indices in the grid, row-major.
    pub a: usize,
    pub b: usize,
    pub same_class: bool,
    pub similarity: f64,
}

/// `n_pairs` pairs of distinct labeled cells drawn uniformly, with the
/// cosine of their features. Empty when fewer than 2 cells are labeled.
pub fn sample_pixel_pairs(grid: &PatchGrid, mask: &Mask, n_pairs: usize, rng: &mut Rng) -> Result<Vec<PixelPair>> {
    let cells = downsample_mask(mask, grid.h, grid.w);
    let labeled: Vec<usize> = cells
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != IGNORE_LABEL)
        .map(|(i, _)| i)
        .collect();
    if labeled.len() < 2 {
        return Ok(Vec::new());
    }
    let flat: Vec<u8> = cells.iter().copied().collect();
    (0..n_pairs)
        .map(|_| {
            let i = rng.random_range(0..labeled.len());
            let mut j = rng.random_range(0..labeled.len() - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (labeled[i], labeled[j]);
            Ok(PixelPair {
                a,
                b,
                same_class: flat[a] == flat[b],
                similarity: similarity(grid.data.row(a), grid.data.row(b))?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// AP per image, then the mean over images.
    #[default]
    PerImage,
    /// One AP over the pairs of all images.
    Pooled,
}

/// Semantic-coherence mAP: how well feature cosine ranks same-class pixel
/// pairs above different-class ones.
pub fn coherence_map(dense: &[PatchGrid], masks: &[Mask], n_pairs: usize, mode: ApMode, rng: &mut Rng) -> Result<f64> {
    if dense.len() != masks.len() {
        return Err(Error::Shape(format!("{} feature grids vs {} masks", dense.len(), masks.len())));
    }
    if n_pairs < 2 {
        return Err(Error::invalid("coherence needs at least 2 pairs per image"));
    }
    let mut aps = Vec::new();
    let mut pooled: Vec<PixelPair> = Vec::new();
    for (img, (grid, mask)) in dense.iter().zip(masks).enumerate() {
        let pairs = sample_pixel_pairs(grid, mask, n_pairs, rng)?;
        if pairs.is_empty() {
            log::debug!("image {img}: fewer than 2 labeled cells, skipped");
            continue;
        }
        match mode {
            ApMode::Pooled => pooled.extend(pairs),
            ApMode::PerImage => {
                let (s, l) = split(&pairs);
                if l.iter().any(|x| *x) {
                    aps.push(average_precision(&s, &l)?);
                } else {
                    log::debug!("image {img}: no same-class pair, skipped");
                }
            }
        }
    }
    if mode == ApMode::Pooled {
        let (s, l) = split(&pooled);
        return average_precision(&s, &l);
    }
    if aps.is_empty() {
        return Err(Error::invalid("no image produced a same-class pixel pair"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn split(pairs: &[PixelPair]) -> (Vec<f64>, Vec<bool>) {
    pairs.iter().map(|p| (p.similarity, p.same_class)).unzip()
}

/// Per-cell argmax of cosine logits against the class texts, `h x w`.
pub fn ovss_segment(dense: &PatchGrid, text: &[Array1<f64>]) -> Result<Array2<usize>> {
    if text.is_empty() {
        return Err(Error::invalid("no class text embeddings"));
    }
    let (units, _) = normalize_rows(dense.data.view(), "dense features")?;
    let protos = Array2::from_shape_fn((text.len(), dense.dim()), |(i, j)| text[i][j]);
    let (protos, _) = normalize_rows(protos.view(), "class text embeddings")?;
    let logits = units.dot(&protos.t());
    let labels: Vec<usize> = logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect();
    Ok(Array2::from_shape_vec((dense.h, dense.w), labels).expect("h·w labels"))
}

/// Mean IoU over classes present in the ground truth or the prediction.
/// Pixels labeled [`IGNORE_LABEL`] in `gt` are skipped.
pub fn miou(pred: &Array2<usize>, gt: &Mask) -> Result<f64> {
    miou_dataset(std::slice::from_ref(pred), std::slice::from_ref(gt))
}

/// mIoU with intersections and unions accumulated over all images.
pub fn miou_dataset(preds: &[Array2<usize>], gts: &[Mask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} masks", preds.len(), gts.len())));
    }
    let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
    let mut union: BTreeMap<usize, usize> = BTreeMap::new();
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", pred.dim(), gt.dim())));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE_LABEL {
                continue;
            }
            let g = g as usize;
            *union.entry(g).or_default() += 1;
            if p == g {
                *inter.entry(g).or_default() += 1;
            } else {
                *union.entry(p).or_default() += 1;
            }
        }
    }
    if union.is_empty() {
        return Err(Error::invalid("masks have no labeled pixels"));
    }
    let sum: f64 = union
        .iter()
        .map(|(c, u)| *inter.get(c).unwrap_or(&0) as f64 / *u as f64)
        .sum();
    Ok(sum / union.len() as f64)
}

/// Segments, upsamples to the mask and scores. Returns `(prediction, mIoU)`.
pub fn ovss_miou(dense: &PatchGrid, text: &[Array1<f64>], gt: &Mask) -> Result<(Array2<usize>, f64)> {
    let cells = ovss_segment(dense, text)?;
    let (h, w) = gt.dim();
    let pred = upsample_nearest(&cells, h, w);
    let score = miou(&pred, gt)?;
    Ok((pred, score))
}

pub fn zsc_top1(embeddings: &[Array1<f64>], labels: &[usize], text: &[Array1<f64>]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings vs {} labels", embeddings.len(), labels.len())));
    }
    if embeddings.is_empty() || text.is_empty() {
        return Err(Error::invalid("zero-shot classification needs samples and classes"));
    }
    let mut hit = 0;
    for (e, &l) in embeddings.iter().zip(labels) {
        hit += usize::from(argmax_cosine(e.view(), text)? == l);
    }
    Ok(hit as f64 / embeddings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecall {
    pub image_to_text: BTreeMap<usize, f64>,
    pub text_to_image: BTreeMap<usize, f64>,
    /// Per k, the average of both directions.
    pub mean: BTreeMap<usize, f64>,
}

/// 0-based rank of `target` among the row's scores, ties in index order.
fn rank_of(row: ArrayView1<f64>, target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|(j, &s)| s > t || (s == t && *j < target))
        .count()
}

/// Recall@k for paired embeddings (`images[i]` matches `texts[i]`).
pub fn retrieval_recall(images: &[Array1<f64>], texts: &[Array1<f64>], ks: &[usize]) -> Result<RetrievalRecall> {
    let n = images.len();
    if texts.len() != n {
        return Err(Error::Shape(format!("{n} images vs {} texts", texts.len())));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::invalid(format!("recall@{k} needs 1 <= k <= {n}")));
    }
    let stack = |v: &[Array1<f64>], what| {
        let m = Array2::from_shape_fn((n, v[0].len()), |(i, j)| v[i][j]);
        normalize_rows(m.view(), what).map(|(u, _)| u)
    };
    if n == 0 {
        return Err(Error::invalid("retrieval needs at least one pair"));
    }
    let sims = stack(images, "image embeddings")?.dot(&stack(texts, "text embeddings")?.t());
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(sims.row(i), i)).collect();
    let t2i: Vec<usize> = (0..n).map(|i| rank_of(sims.column(i), i)).collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    let mut out = RetrievalRecall {
        image_to_text: BTreeMap::new(),
        text_to_image: BTreeMap::new(),
        mean: BTreeMap::new(),
    };
    for &k in ks {
        let (a, b) = (recall(&i2t, k), recall(&t2i, k));
        out.image_to_text.insert(k, a);
        out.text_to_image.insert(k, b);
        out.mean.insert(k, 0.5 * (a + b));
    }
    Ok(out)
}


#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn confusion_miou(preds: &[Array2<usize>], gts: &[Mask], k: usize) -> f64 {
        let mut conf = vec![vec![0usize; k]; k];
        for (p, g) in preds.iter().zip(gts) {
            for (&a, &b) in p.iter().zip(g.iter()) {
                if b != IGNORE_LABEL {
                    conf[b as usize][a] += 1;
                }
            }
        }
        let mut ious = Vec::new();
        for c in 0..k {
            let tp = conf[c][c];
            let row: usize = conf[c].iter().sum();
            let col: usize = (0..k).map(|r| conf[r][c]).sum();
            let union = row + col - tp;
            if union > 0 {
                ious.push(tp as f64 / union as f64);
            }
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    fn seg_case() -> impl Strategy<Value = (Vec<Array2<usize>>, Vec<Mask>)> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, h, w)| {
            let cells = h * w;
            (
                proptest::collection::vec(proptest::collection::vec(0usize..4, cells), n),
                proptest::collection::vec(proptest::collection::vec(prop_oneof![4 => 0u8..4, 1 => Just(IGNORE_LABEL)], cells), n),
            )
                .prop_filter_map("all ignored", move |(p, g)| {
                    let preds: Vec<_> = p.into_iter().map(|v| Array2::from_shape_vec((h, w), v).unwrap()).collect();
                    let gts: Vec<_> = g.into_iter().map(|v| Array2::from_shape_vec((h, w), v).unwrap()).collect();
                    gts.iter().any(|m| m.iter().any(|v| *v != IGNORE_LABEL)).then_some((preds, gts))
                })
        })
    }

    fn embeddings(n: usize) -> impl Strategy<Value = Vec<Array1<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), n).prop_filter_map("zero", |v| {
            v.iter()
                .all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
                .then(|| v.into_iter().map(Array1::from).collect())
        })
    }

    proptest! {
        #[test]
        fn miou_matches_confusion_oracle((preds, gts) in seg_case()) {
            let got = miou_dataset(&preds, &gts).unwrap();
            prop_assert!((got - confusion_miou(&preds, &gts, 4)).abs() < 1e-12);
        }

        #[test]
        fn recall_matches_full_sort((imgs, txts) in (2usize..10).prop_flat_map(|n| (embeddings(n), embeddings(n)))) {
            let n = imgs.len();
            let ks: Vec<usize> = (1..=n).collect();
            let r = retrieval_recall(&imgs, &txts, &ks).unwrap();
            let cos = |a: &Array1<f64>, b: &Array1<f64>| similarity(a.view(), b.view()).unwrap();
            for &k in &ks {
                let mut hits = 0;
                for i in 0..n {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| cos(&imgs[i], &txts[b]).total_cmp(&cos(&imgs[i], &txts[a])).then(a.cmp(&b)));
                    hits += usize::from(order[..k].contains(&i));
                }
                prop_assert!((r.image_to_text[&k] - hits as f64 / n as f64).abs() < 1e-12);
            }
            prop_assert_eq!(r.image_to_text[&n], 1.0);
        }

        #[test]
        fn dbi_invariant_to_shift_and_scale(
            pts in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 3),
            s in 0.1f64..10.0,
            t in -5.0f64..5.0,
        ) {
            let set = |f: &dyn Fn(f64) -> f64| InstanceFeatureSet {
                categories: vec!["a".into(), "b".into(), "c".into()],
                features: pts
                    .iter()
                    .enumerate()
                    .map(|(k, v)| Array2::from_shape_fn((3, 2), |(i, j)| f(v[i * 2 + j] + 3.0 * k as f64)))
                    .collect(),
                n_cap: 3,
            };
            let base = dbi(&set(&|x| x), false).unwrap();
            let moved = dbi(&set(&|x| s * x + t), false).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!((base - moved).abs() < 1e-9 * base.max(1.0));
        }

        #[test]
        fn ap_bounds_and_perfect_ranking(scores in proptest::collection::vec(-1.0f64..1.0, 2..30), cut in 0.0f64..1.0) {
            let labels: Vec<bool> = scores.iter().map(|s| *s > cut - 0.5).collect();
            prop_assume!(labels.iter().any(|l| *l));
            // labels are a threshold of the scores, so every positive ranks first
            prop_assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            let ap = average_precision(&flipped, &labels).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }
}
