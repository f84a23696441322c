use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{RegionSource, TrainConfig, TrainState};
use crate::autograd::{Graph, Var};
use crate::datamodel::{build_region_batch, GlobalBatch, Image, ImageRecord, RegionBatch, RegionSampling};
use crate::encoders::{TeacherStrategy, TeacherStudentBundle};
use crate::error::{Error, Result};
use crate::losses::{loss_dis_grad, loss_glo_grad, loss_loc_grad, stage_weights, LossComponents, LossGrad};
use crate::optim::{lr_at, AdamW};
use crate::params::{Bound, ParamSet};
use crate::regionfeat::{crop_image, plan_crops, region_feature_on_graph, CropPlan, RegionMode};
use crate::rng::Rng;

/// Inputs of one optimizer step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub global: GlobalBatch,
    /// One plan per image of `global`; empty when distillation is off.
    pub crops: Vec<CropPlan>,
    /// Region sources below `global.len()` are batch images, the rest index
    /// `extra_images` after subtracting `global.len()`.
    pub regions: Option<RegionBatch>,
    pub extra_images: Vec<Image>,
}

impl Batch {
    pub fn ids(&self) -> &[String] {
        &self.global.ids
    }
}

/// Draws crops and region pairs for the records at `indices`.
pub fn assemble_batch(
    records: &[ImageRecord],
    indices: &[usize],
    cfg: &TrainConfig,
    data_rng: &mut Rng,
    crop_rng: &mut Rng,
) -> Result<Batch> {
    let global = GlobalBatch::from_records(records, indices, cfg.caption_kind);
    let (_, want_loc, want_dis) = cfg.components();
    let crops = if want_dis {
        indices
            .iter()
            .map(|_| plan_crops(cfg.crop_method, cfg.crops_per_image, crop_rng.random(), cfg.crop_scale))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut extra_images = Vec::new();
    let regions = if want_loc {
        let sampling = RegionSampling::UniformOverObjects;
        Some(match cfg.region_source {
            RegionSource::InBatch => {
                let subset: Vec<&ImageRecord> = indices.iter().map(|&i| &records[i]).collect();
                build_region_batch(&subset, cfg.regions_per_batch, sampling, &cfg.template, data_rng)?
            }
            RegionSource::Shard => {
                let mut rb = build_region_batch(records, cfg.regions_per_batch, sampling, &cfg.template, data_rng)?;
                let mut extra: BTreeMap<usize, usize> = BTreeMap::new();
                for e in &mut rb.entries {
                    e.source = match indices.iter().position(|&i| i == e.source) {
                        Some(p) => p,
                        None => {
                            let next = indices.len() + extra.len();
                            *extra.entry(e.source).or_insert_with(|| {
                                extra_images.push(records[e.source].image.clone());
                                next
                            })
                        }
                    };
                }
                rb
            }
        })
    } else {
        None
    };
    Ok(Batch {
        global,
        crops,
        regions,
        extra_images,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub losses: LossComponents,
    pub total: f64,
    pub grad_norm: f64,
    pub temperature: f64,
}

/// Adds a loss node whose gradient on `logit_scale` follows `τ = exp(−s)`,
/// with no gradient once the scale sits at its clamp.
fn contrastive_node(g: &mut Graph, a: Var, b: Var, scale: Var, at_clamp: bool, tau: f64, lg: LossGrad) -> Var {
    let ds = if at_clamp { 0.0 } else { -tau * lg.d_tau };
    g.custom(lg.value, &[a, b, scale], vec![lg.d_a, lg.d_b, Array2::from_elem((1, 1), ds)])
}

fn text_var(
    g: &mut Graph,
    tb: &Bound,
    bundle: &TeacherStudentBundle,
    cache: &mut HashMap<String, Var>,
    text: &str,
) -> Result<Var> {
    if let Some(v) = cache.get(text) {
        return Ok(*v);
    }
    let (v, _) = bundle.text.forward(g, tb, text)?;
    cache.insert(text.to_string(), v);
    Ok(v)
}

fn scale_info(bundle: &TeacherStudentBundle, name: &str) -> (bool, f64) {
    let s = bundle.scales.get(name)[[0, 0]];
    let max = TeacherStudentBundle::max_logit_scale();
    (s >= max, (-s.min(max)).exp())
}

/// Loss components, total and gradients of every trainable tensor.
pub fn forward_backward(
    bundle: &TeacherStudentBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossComponents, f64, BTreeMap<String, Array2<f64>>)> {
    let (want_glo, want_loc, want_dis) = cfg.components();
    let planned = LossComponents {
        glo: want_glo.then_some(0.0),
        loc: want_loc.then_some(0.0),
        dis: want_dis.then_some(0.0),
    };
    let (wg, wl, wd) = stage_weights(&planned, &cfg.loss_weights, cfg.stage, cfg.allow_off_stage)?;
    let n = batch.global.len();
    if n < 2 {
        return Err(Error::invalid(format!("a step needs at least 2 pairs, got {n}")));
    }

    let mut g = Graph::new();
    let sb = bundle.student.params.bind(&mut g, true);
    let tb = bundle.text.params.bind(&mut g, !bundle.text_frozen);
    let kb = bundle.scales.bind(&mut g, true);
    let student = &bundle.student;
    let images = &batch.global.images;

    let mut cls = Vec::with_capacity(n);
    let mut patches = Vec::with_capacity(n);
    for img in images {
        let (c, p) = student.forward(&mut g, &sb, img)?;
        cls.push(c);
        patches.push(p);
    }
    let mut cache = HashMap::new();
    let mut comps = LossComponents::default();
    let mut terms = Vec::new();

    if want_glo {
        let texts = batch
            .global
            .captions
            .iter()
            .map(|c| text_var(&mut g, &tb, bundle, &mut cache, c))
            .collect::<Result<Vec<_>>>()?;
        let v = g.concat_rows(&cls);
        let t = g.concat_rows(&texts);
        let (at_clamp, tau) = scale_info(bundle, "logit_scale");
        let lg = loss_glo_grad(g.value(v).view(), g.value(t).view(), tau)?;
        comps.glo = Some(lg.value);
        let node = contrastive_node(&mut g, v, t, kb.get("logit_scale"), at_clamp, tau, lg);
        terms.push((node, wg));
    }

    if want_dis {
        if batch.crops.len() != n {
            return Err(Error::invalid("distillation needs one crop plan per image"));
        }
        let size = student.config.image_size;
        let mut roi = Vec::new();
        let mut local = Vec::new();
        for (i, plan) in batch.crops.iter().enumerate() {
            for bbox in &plan.boxes {
                roi.push(region_feature_on_graph(
                    &mut g,
                    &sb,
                    student,
                    &images[i],
                    Some(patches[i]),
                    bbox,
                    RegionMode::RoiEmbedding,
                )?);
                let crop = crop_image(&images[i], bbox, size)?;
                local.push(match bundle.strategy {
                    TeacherStrategy::Online => {
                        let (_, p) = student.forward(&mut g, &sb, &crop)?;
                        g.mean_rows(p)
                    }
                    _ => {
                        let mean = bundle.teacher().encode_image(&crop)?.patches.mean();
                        g.constant(mean.insert_axis(Axis(0)))
                    }
                });
            }
        }
        let p_roi = g.concat_rows(&roi);
        let p_loc = g.concat_rows(&local);
        let lg = loss_dis_grad(g.value(p_roi).view(), g.value(p_loc).view())?;
        comps.dis = Some(lg.value);
        let node = g.custom(lg.value, &[p_roi, p_loc], vec![lg.d_a, lg.d_b]);
        terms.push((node, wd));
    }

    if want_loc {
        let regions = batch
            .regions
            .as_ref()
            .ok_or_else(|| Error::invalid("region loss needs a region batch"))?;
        let mut extra_patches: HashMap<usize, Var> = HashMap::new();
        let mut feats = Vec::with_capacity(regions.len());
        for e in &regions.entries {
            let (image, full) = if e.source < n {
                (&images[e.source], Some(patches[e.source]))
            } else {
                let image = batch
                    .extra_images
                    .get(e.source - n)
                    .ok_or_else(|| Error::invalid(format!("region source {} out of range", e.source)))?;
                let full = if cfg.region_mode == RegionMode::RoiEmbedding {
                    Some(match extra_patches.get(&e.source) {
                        Some(v) => *v,
                        None => {
                            let (_, p) = student.forward(&mut g, &sb, image)?;
                            extra_patches.insert(e.source, p);
                            p
                        }
                    })
                } else {
                    None
                };
                (image, full)
            };
            feats.push(region_feature_on_graph(&mut g, &sb, student, image, full, &e.bbox, cfg.region_mode)?);
        }
        let texts = regions
            .category_texts
            .iter()
            .map(|c| text_var(&mut g, &tb, bundle, &mut cache, c))
            .collect::<Result<Vec<_>>>()?;
        let vr = g.concat_rows(&feats);
        let tc = g.concat_rows(&texts);
        let name = bundle.loc_scale_name();
        let (at_clamp, tau) = scale_info(bundle, name);
        let lg = loss_loc_grad(g.value(vr).view(), g.value(tc).view(), &regions.positive_sets(), tau)?;
        comps.loc = Some(lg.value);
        let node = contrastive_node(&mut g, vr, tc, kb.get(name), at_clamp, tau, lg);
        terms.push((node, wl));
    }

    let root = g.weighted_sum(&terms);
    let total = g.scalar(root);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {total}")));
    }
    let grads = g.backward(root);
    let mut out = student.params.collect_grads(&sb, &grads);
    if !bundle.text_frozen {
        out.extend(bundle.text.params.collect_grads(&tb, &grads));
    }
    out.extend(bundle.scales.collect_grads(&kb, &grads));
    Ok((comps, total, out))
}

/// One optimizer step on every unfrozen tensor, then the temperature clamp
/// and the teacher update. Non-finite losses abort with the batch ids.
pub fn train_step(
    bundle: &mut TeacherStudentBundle,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepReport> {
    let lr = lr_at(state.step, cfg.learning_rate, cfg.warmup_steps, state.total_steps)?;
    let abort = |reason: String| Error::TrainingAborted {
        step: state.step,
        reason,
        batch_ids: batch.ids().to_vec(),
    };
    let (losses, total, grads) = match forward_backward(bundle, batch, cfg) {
        Ok(r) => r,
        Err(e @ (Error::NonFinite(_) | Error::ZeroNorm(_))) => return Err(abort(e.to_string())),
        Err(e) => return Err(e),
    };
    let mut sets: Vec<&mut ParamSet> = vec![&mut bundle.student.params, &mut bundle.scales];
    if !bundle.text_frozen {
        sets.push(&mut bundle.text.params);
    }
    let grad_norm = match opt.step(&mut sets[..], &grads, lr) {
        Ok(n) => n,
        Err(e @ Error::NonFinite(_)) => return Err(abort(e.to_string())),
        Err(e) => return Err(e),
    };
    bundle.clamp_temperature();
    bundle.update_teacher();
    let report = StepReport {
        step: state.step,
        lr,
        losses,
        total,
        grad_norm,
        temperature: bundle.temperature(),
    };
    state.step += 1;
    state.running.add(&report);
    Ok(report)
}
