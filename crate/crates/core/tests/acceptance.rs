//! Acceptance suite. One PASS/FAIL line per criterion; exits non-zero when
//! any criterion fails. `ACCEPTANCE_ONLY=1,5,8` runs a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng as _, RngCore};

use rsclip_core::datamodel::{
    load_manifest, save_manifest, synthesize_dataset, BBox, CaptionKind, ImageRecord, Mask, ObjectAnnotation,
    SyntheticDataset, SyntheticSceneSpec, IGNORE_LABEL,
};
use rsclip_core::datasetbuilder::{assemble_prompt, parse_object_infos, qa_sample, DEFAULT_QA_SAMPLES, OBJECT_INFOS_PREFIX};
use rsclip_core::encoders::{custom_attention, PatchGrid, TeacherStrategy, TeacherStudentBundle, VisionEncoder, VisionEncoderConfig};
use rsclip_core::evalsuite::{
    average_precision, class_prototypes, coherence_map, dbi, dense_grid, evaluate, miou_dataset, ovss_segment,
    retrieval_recall, upsample_nearest, ApMode, DenseSource, EvalConfig, EvalData, InstanceFeatureSet, Metric,
};
use rsclip_core::losses::{
    loss_dis, loss_dis_grad, loss_glo, loss_glo_grad, loss_loc, loss_loc_grad, LossGrad, PositiveSets, Stage,
};
use rsclip_core::optim::AdamW;
use rsclip_core::regionfeat::{roi_align, roi_align_with, roi_embedding, RegionMode, SamplingRatio};
use rsclip_core::rng::{self, Rng};
use rsclip_core::trainer::{
    assemble_batch, init_bundle, run_stage, train_step, RunControl, StageConfig, TrainData, TrainState, LOG_FILE,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rand_matrix(r: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- losses

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// -log softmax_j(z)[target] for one score list.
fn nll(z: &[f64], target: usize) -> f64 {
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    lse - z[target]
}

fn brute_glo(v: &Array2<f64>, t: &Array2<f64>, tau: f64) -> f64 {
    let (v, t) = (rows(v), rows(t));
    let n = v.len();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        let zi: Vec<f64> = (0..n).map(|j| cos(&v[i], &t[j]) / tau).collect();
        let zt: Vec<f64> = (0..n).map(|j| cos(&v[j], &t[i]) / tau).collect();
        i2t += nll(&zi, i);
        t2i += nll(&zt, i);
    }
    (i2t + t2i) / (2.0 * n as f64)
}

fn brute_loc(vr: &Array2<f64>, tc: &Array2<f64>, cats: &[String], tau: f64) -> f64 {
    let (vr, tc) = (rows(vr), rows(tc));
    let m = vr.len();
    let mut r2c = 0.0;
    let mut c2r = 0.0;
    for i in 0..m {
        let pos: Vec<usize> = (0..m).filter(|&j| cats[j] == cats[i]).collect();
        let zr: Vec<f64> = (0..m).map(|k| cos(&vr[i], &tc[k]) / tau).collect();
        let zc: Vec<f64> = (0..m).map(|k| cos(&vr[k], &tc[i]) / tau).collect();
        r2c += pos.iter().map(|&j| nll(&zr, j)).sum::<f64>() / pos.len() as f64;
        c2r += pos.iter().map(|&j| nll(&zc, j)).sum::<f64>() / pos.len() as f64;
    }
    (r2c + c2r) / (2.0 * m as f64)
}

fn brute_dis(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (a, b) = (rows(a), rows(b));
    a.iter().zip(&b).map(|(x, y)| 1.0 - cos(x, y)).sum::<f64>() / a.len() as f64
}

fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    norm(&(analytic - numeric)) / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn central_diff(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let mut p = x.clone();
        p[idx] += h;
        let mut m = x.clone();
        m[idx] -= h;
        g[idx] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

type LossFn<'a> = dyn Fn(&Array2<f64>, &Array2<f64>, f64) -> f64 + 'a;

fn grad_errors(g: &LossGrad, f: &LossFn<'_>, a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> f64 {
    let da = central_diff(&|x| f(x, b, tau), a);
    let db = central_diff(&|x| f(a, x, tau), b);
    let h = 1e-6 * tau;
    let dt = (f(a, b, tau + h) - f(a, b, tau - h)) / (2.0 * h);
    let dt_err = (g.d_tau - dt).abs() / g.d_tau.abs().max(dt.abs()).max(1e-12);
    let dt_err = if g.d_tau.abs().max(dt.abs()) < 1e-10 { 0.0 } else { dt_err };
    rel_err(&g.d_a, &da).max(rel_err(&g.d_b, &db)).max(dt_err)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut r = rng::stream(11, "acceptance");
    let (mut value_err, mut grad_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = r.random_range(2..=8);
        let d = r.random_range(2..=16);
        let tau = r.random_range(0.05..1.0);
        let a = rand_matrix(&mut r, n, d);
        let b = rand_matrix(&mut r, n, d);
        let k = r.random_range(1..=n);
        let cats: Vec<String> = (0..n).map(|_| format!("c{}", r.random_range(0..k))).collect();
        let p = PositiveSets::from_labels(cats.iter().map(String::as_str));

        value_err = value_err
            .max((loss_glo(a.view(), b.view(), tau).unwrap() - brute_glo(&a, &b, tau)).abs())
            .max((loss_loc(a.view(), b.view(), &p, tau).unwrap() - brute_loc(&a, &b, &cats, tau)).abs())
            .max((loss_dis(a.view(), b.view()).unwrap() - brute_dis(&a, &b)).abs());

        let glo = |x: &Array2<f64>, y: &Array2<f64>, t: f64| loss_glo(x.view(), y.view(), t).unwrap();
        let loc = |x: &Array2<f64>, y: &Array2<f64>, t: f64| loss_loc(x.view(), y.view(), &p, t).unwrap();
        let dis = |x: &Array2<f64>, y: &Array2<f64>, _: f64| loss_dis(x.view(), y.view()).unwrap();
        grad_err = grad_err
            .max(grad_errors(&loss_glo_grad(a.view(), b.view(), tau).unwrap(), &glo, &a, &b, tau))
            .max(grad_errors(&loss_loc_grad(a.view(), b.view(), &p, tau).unwrap(), &loc, &a, &b, tau))
            .max(grad_errors(&loss_dis_grad(a.view(), b.view()).unwrap(), &dis, &a, &b, tau));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        value_err < 1e-8 && grad_err < 1e-4 && secs < 30.0,
        format!("50 instances; max |value - brute| {value_err:.2e} (< 1e-8), max grad rel err {grad_err:.2e} (< 1e-4), {secs:.2}s (< 30s)"),
    )
}

fn criterion_2() -> Verdict {
    let mut r = rng::stream(12, "acceptance");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(2..=8);
        let d = r.random_range(2..=16);
        let tau = r.random_range(0.05..1.0);
        let a = rand_matrix(&mut r, n, d);
        let b = rand_matrix(&mut r, n, d);
        let loc = loss_loc(a.view(), b.view(), &PositiveSets::singletons(n), tau).unwrap();
        worst = worst.max((loc - loss_glo(a.view(), b.view(), tau).unwrap()).abs());
    }
    verdict(worst < 1e-9, format!("20 instances; max |loc - glo| {worst:.2e} (< 1e-9)"))
}

fn criterion_3() -> Verdict {
    let mut worst_glo = 0.0f64;
    for n in [2usize, 4, 8] {
        let v = Array2::from_shape_fn((n, 5), |(_, j)| 0.3 + j as f64);
        let l = loss_glo(v.view(), v.view(), 0.07).unwrap();
        worst_glo = worst_glo.max((l - (n as f64).ln()).abs());
    }
    let mut r = rng::stream(13, "acceptance");
    let a = rand_matrix(&mut r, 6, 7);
    let same = loss_dis(a.view(), a.view()).unwrap();
    let anti = loss_dis(a.view(), (-&a).view()).unwrap();
    let pass = worst_glo < 1e-9 && same.abs() < 1e-9 && (anti - 2.0).abs() < 1e-9;
    verdict(
        pass,
        format!("glo - ln N max {worst_glo:.2e}; dis identical {same:.2e}, antipodal {anti:.12}"),
    )
}

// ---------------------------------------------------------------- CustAttn

fn criterion_4() -> Verdict {
    let cfg = VisionEncoderConfig::default();
    let enc = VisionEncoder::new(cfg.clone()).unwrap();
    let (width, heads) = (cfg.width, cfg.heads);
    let dh = width / heads;
    let prefix = format!("visual.blocks.{}", cfg.depth - 1);
    let mut r = rng::stream(14, "acceptance");
    let x = rand_matrix(&mut r, 3, width);
    let trace = custom_attention(&enc.params, &prefix, &x, heads);

    // Independent recomputation with explicit loops.
    let p = &enc.params;
    let (g, bias) = (p.get(&format!("{prefix}.ln1.g")), p.get(&format!("{prefix}.ln1.b")));
    let mut h = Array2::<f64>::zeros((3, width));
    for i in 0..3 {
        let mu = x.row(i).sum() / width as f64;
        let var = x.row(i).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / width as f64;
        for j in 0..width {
            h[[i, j]] = (x[[i, j]] - mu) / (var + 1e-5).sqrt() * g[[0, j]] + bias[[0, j]];
        }
    }
    let qkv = h.dot(p.get(&format!("{prefix}.attn.qkv.w"))) + p.get(&format!("{prefix}.attn.qkv.b"));
    let mut a_err = 0.0f64;
    let mut row_err = 0.0f64;
    for hd in 0..heads {
        let mut a = Array2::<f64>::zeros((3, 3));
        for src in 0..3 {
            let off = src * width + hd * dh;
            for i in 0..3 {
                let logits: Vec<f64> = (0..3)
                    .map(|j| (0..dh).map(|c| qkv[[i, off + c]] * qkv[[j, off + c]]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for j in 0..3 {
                    a[[i, j]] += logits[j].exp() / z;
                }
            }
        }
        for (u, v) in a.iter().zip(trace.combined[hd].iter()) {
            a_err = a_err.max((u - v).abs());
        }
    }

    // Row sums on a full image, and the output token count.
    let ds = synthesize_dataset(&SyntheticSceneSpec::default(), 1).unwrap();
    let (grid, full) = enc.dense_trace(&ds.records[0].image).unwrap();
    for srcs in &full.per_source {
        for m in srcs {
            for row in m.rows() {
                row_err = row_err.max((row.sum() - 1.0).abs());
            }
        }
    }
    let n = cfg.grid();
    let tokens_ok = grid.data.nrows() == n * n && (grid.h, grid.w) == (n, n) && full.output.nrows() == n * n + 1;
    verdict(
        a_err < 1e-6 && row_err < 1e-5 && tokens_ok,
        format!(
            "A vs brute force {a_err:.2e} (< 1e-6), row sums {row_err:.2e} (< 1e-5), {} dense tokens from {} (CLS dropped)",
            grid.data.nrows(),
            full.output.nrows()
        ),
    )
}

// ---------------------------------------------------------------- RoIAlign

/// Bilinear field of the grid at continuous patch coordinates, cell centers
/// at half-integers, clamped at the border.
fn field(g: &PatchGrid, x: f64, y: f64) -> Array1<f64> {
    let xs = (x - 0.5).clamp(0.0, (g.w - 1) as f64);
    let ys = (y - 0.5).clamp(0.0, (g.h - 1) as f64);
    let (x0, y0) = (xs.floor() as usize, ys.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(g.w - 1), (y0 + 1).min(g.h - 1));
    let (fx, fy) = (xs - x0 as f64, ys - y0 as f64);
    let c = |i: usize, j: usize| g.cell(i, j).to_owned();
    c(y0, x0) * ((1.0 - fx) * (1.0 - fy)) + c(y0, x1) * (fx * (1.0 - fy)) + c(y1, x0) * ((1.0 - fx) * fy) + c(y1, x1) * (fx * fy)
}

fn monte_carlo(g: &PatchGrid, b: &BBox, r: &mut Rng) -> Array1<f64> {
    let mut acc = Array1::zeros(g.dim());
    let n = 100 * 100;
    for _ in 0..n {
        let x = (b.x1 + r.random::<f64>() * b.width()) * g.w as f64;
        let y = (b.y1 + r.random::<f64>() * b.height()) * g.h as f64;
        acc += &field(g, x, y);
    }
    acc / n as f64
}

fn random_box(r: &mut Rng) -> BBox {
    let (x1, y1) = (r.random_range(0.0..0.8), r.random_range(0.0..0.8));
    let x2 = r.random_range(x1 + 0.1..=1.0f64.min(x1 + 0.9));
    let y2 = r.random_range(y1 + 0.1..=1.0f64.min(y1 + 0.9));
    BBox::new(x1, y1, x2.min(1.0), y2.min(1.0)).unwrap()
}

fn random_grid(r: &mut Rng, h: usize, w: usize, d: usize) -> PatchGrid {
    PatchGrid::new(h, w, rand_matrix(r, h * w, d)).unwrap()
}

fn criterion_5() -> Verdict {
    let mut r = rng::stream(15, "acceptance");
    let mut full_err = 0.0f64;
    let mut mc_err = 0.0f64;
    let mut lin_err = 0.0f64;
    for _ in 0..20 {
        let (h, w, d) = (r.random_range(2..=7), r.random_range(2..=7), r.random_range(1..=4));
        let g = random_grid(&mut r, h, w, d);
        let full = roi_align(&g, &BBox::full(), (h, w));
        full_err = full_err.max((&full - &g.data).iter().fold(0.0, |m, v| m.max(v.abs())));

        let b = random_box(&mut r);
        let pooled = roi_embedding(&g, &b).vector;
        let oracle = monte_carlo(&g, &b, &mut r);
        mc_err = mc_err.max((&pooled - &oracle).iter().fold(0.0, |m, v| m.max(v.abs())));
        let bins = roi_align_with(&g, &b, (2, 2), SamplingRatio::Adaptive);
        for (k, (by, bx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let sub = BBox::new(
                b.x1 + b.width() * bx as f64 / 2.0,
                b.y1 + b.height() * by as f64 / 2.0,
                b.x1 + b.width() * (bx + 1) as f64 / 2.0,
                b.y1 + b.height() * (by + 1) as f64 / 2.0,
            )
            .unwrap();
            let o = monte_carlo(&g, &sub, &mut r);
            mc_err = mc_err.max((&bins.row(k) - &o).iter().fold(0.0, |m, v| m.max(v.abs())));
        }

        let g2 = random_grid(&mut r, h, w, d);
        let (s, t) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let mix = PatchGrid::new(h, w, &g.data * s + &g2.data * t).unwrap();
        let out = (r.random_range(1..=3), r.random_range(1..=3));
        let lhs = roi_align(&mix, &b, out);
        let rhs = roi_align(&g, &b, out) * s + roi_align(&g2, &b, out) * t;
        lin_err = lin_err.max((lhs - rhs).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    verdict(
        full_err < 1e-6 && mc_err < 2e-2 && lin_err < 1e-6,
        format!("full box {full_err:.2e} (< 1e-6), Monte-Carlo max diff {mc_err:.2e} (< 2e-2), linearity {lin_err:.2e} (< 1e-6)"),
    )
}

// ---------------------------------------------------------------- teachers

fn tiny_config(stage: Stage, teacher: TeacherStrategy) -> StageConfig {
    let mut c = StageConfig::default();
    c.train.stage = stage;
    c.train.teacher = teacher;
    c.train.batch_size = 4;
    c.train.crops_per_image = 2;
    c.train.regions_per_batch = 6;
    c.train.warmup_steps = 0;
    c.train.eval_each_epoch = false;
    c
}

fn criterion_6() -> Verdict {
    let ds = synthesize_dataset(&SyntheticSceneSpec { seed: 6, ..Default::default() }, 4).unwrap();
    let batch_for = |c: &StageConfig| {
        let mut d = rng::stream(6, rng::DATA);
        let mut k = rng::stream(6, rng::CROP);
        assemble_batch(&ds.records, &[0, 1, 2, 3], &c.train, &mut d, &mut k).unwrap()
    };

    let c = tiny_config(Stage::S1, TeacherStrategy::Frozen);
    let mut b = init_bundle(&c).unwrap();
    let start = b.teacher_params().unwrap().clone();
    let student = b.student.params.clone();
    let mut opt = AdamW::new(c.train.optimizer());
    let mut state = TrainState::new(0, 100);
    let batch = batch_for(&c);
    let mut frozen_ok = true;
    for _ in 0..100 {
        train_step(&mut b, &mut opt, &batch, &c.train, &mut state).unwrap();
        frozen_ok &= b.teacher_params().unwrap() == &start;
    }
    frozen_ok &= b.student.params != student;

    let c = tiny_config(Stage::S1, TeacherStrategy::Online);
    let mut b = init_bundle(&c).unwrap();
    let mut opt = AdamW::new(c.train.optimizer());
    let mut state = TrainState::new(0, 100);
    let batch = batch_for(&c);
    let image = &ds.records[2].image;
    let mut online_ok = true;
    for _ in 0..100 {
        train_step(&mut b, &mut opt, &batch, &c.train, &mut state).unwrap();
        online_ok &= b.teacher().encode_image(image).unwrap() == b.student.encode_image(image).unwrap();
    }

    let mu = 0.9;
    let c = tiny_config(Stage::S1, TeacherStrategy::Ema { momentum: mu });
    let mut b = init_bundle(&c).unwrap();
    let mut r = rng::stream(16, "acceptance");
    for (_, v) in b.student.params.iter_mut() {
        v.mapv_inplace(|x| x + r.random_range(-0.5..0.5));
    }
    let mut gap = b.teacher().params.l2_distance(&b.student.params);
    let mut ratio_err = 0.0f64;
    for _ in 0..100 {
        b.update_teacher();
        let next = b.teacher().params.l2_distance(&b.student.params);
        if gap > 1e-150 {
            ratio_err = ratio_err.max((next / gap - mu).abs());
        }
        gap = next;
    }
    verdict(
        frozen_ok && online_ok && ratio_err < 1e-9,
        format!("frozen constant over 100 steps: {frozen_ok}; online teacher == student every step: {online_ok}; ema gap ratio err {ratio_err:.2e} (< 1e-9)"),
    )
}

// ---------------------------------------------------------------- metrics

fn brute_dbi(set: &InstanceFeatureSet) -> f64 {
    let k = set.features.len();
    let cent: Vec<Vec<f64>> = set
        .features
        .iter()
        .map(|f| (0..f.ncols()).map(|j| f.column(j).sum() / f.nrows() as f64).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s: Vec<f64> = set
        .features
        .iter()
        .zip(&cent)
        .map(|(f, c)| f.rows().into_iter().map(|r| dist(&r.to_vec(), c)).sum::<f64>() / f.nrows() as f64)
        .collect();
    (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (s[i] + s[j]) / dist(&cent[i], &cent[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / k as f64
}

fn confusion_miou(preds: &[Array2<usize>], gts: &[Mask], k: usize) -> f64 {
    let mut conf = vec![vec![0usize; k]; k];
    for (p, g) in preds.iter().zip(gts) {
        for (&a, &b) in p.iter().zip(g.iter()) {
            if b != IGNORE_LABEL {
                conf[b as usize][a] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..k)
        .filter_map(|c| {
            let row: usize = conf[c].iter().sum();
            let col: usize = conf.iter().map(|r| r[c]).sum();
            let union = row + col - conf[c][c];
            (union > 0).then(|| conf[c][c] as f64 / union as f64)
        })
        .collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn criterion_7() -> Verdict {
    let mut r = rng::stream(17, "acceptance");
    let mut notes = Vec::new();
    let mut pass = true;

    let tight = InstanceFeatureSet {
        categories: vec!["a".into(), "b".into(), "c".into()],
        features: (0..3).map(|k| Array2::from_elem((4, 3), k as f64)).collect(),
        n_cap: 4,
    };
    let zero = dbi(&tight, false).unwrap();
    let mut dbi_err = 0.0f64;
    for _ in 0..20 {
        let k = r.random_range(2..=5);
        let set = InstanceFeatureSet {
            categories: (0..k).map(|i| format!("c{i}")).collect(),
            features: (0..k)
                .map(|_| {
                    let rows = r.random_range(1..=6);
                    let shift = r.random_range(-3.0..3.0);
                    rand_matrix(&mut r, rows, 4) + shift
                })
                .collect(),
            n_cap: 6,
        };
        dbi_err = dbi_err.max((dbi(&set, false).unwrap() - brute_dbi(&set)).abs());
    }
    pass &= zero == 0.0 && dbi_err < 1e-9;
    notes.push(format!("DBI zero-spread {zero}, vs brute {dbi_err:.1e}"));

    // Two classes, block-aligned features that match the mask exactly.
    let mask = Mask::from_shape_fn((4, 4), |(_, x)| u8::from(x >= 2));
    let data = Array2::from_shape_fn((16, 3), |(c, j)| if (c % 4 >= 2) == (j == 0) { 1.0 } else { 0.0 });
    let grid = PatchGrid::new(4, 4, data).unwrap();
    let aligned = coherence_map(&[grid], &[mask], 50, ApMode::PerImage, &mut r).unwrap();
    // Ranked: T F T F F T -> (1/1 + 2/3 + 3/6) / 3
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4], &[true, false, true, false, false, true]).unwrap();
    let hand = (1.0 + 2.0 / 3.0 + 3.0 / 6.0) / 3.0;
    pass &= aligned == 1.0 && ap == hand;
    notes.push(format!("mAP aligned {aligned}, 6-pair AP {ap} vs {hand}"));

    let mut miou_err = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(1..=3);
        let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
        let preds: Vec<Array2<usize>> = (0..n).map(|_| Array2::from_shape_fn((h, w), |_| r.random_range(0..5))).collect();
        let gts: Vec<Mask> = (0..n)
            .map(|_| Mask::from_shape_fn((h, w), |_| if r.random_bool(0.1) { IGNORE_LABEL } else { r.random_range(0..5) }))
            .collect();
        if gts.iter().all(|g| g.iter().all(|v| *v == IGNORE_LABEL)) {
            continue;
        }
        miou_err = miou_err.max((miou_dataset(&preds, &gts).unwrap() - confusion_miou(&preds, &gts, 5)).abs());
    }
    pass &= miou_err < 1e-12;
    notes.push(format!("mIoU vs confusion {miou_err:.1e}"));

    let mut recall_ok = true;
    for _ in 0..20 {
        let n = r.random_range(2..=12);
        let imgs: Vec<Array1<f64>> = (0..n).map(|_| rand_matrix(&mut r, 1, 5).row(0).to_owned()).collect();
        let txts: Vec<Array1<f64>> = (0..n).map(|_| rand_matrix(&mut r, 1, 5).row(0).to_owned()).collect();
        let ks: Vec<usize> = (1..=n).collect();
        let got = retrieval_recall(&imgs, &txts, &ks).unwrap();
        for &k in &ks {
            let mut i2t = 0;
            let mut t2i = 0;
            for i in 0..n {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| cos(&imgs[i].to_vec(), &txts[b].to_vec()).total_cmp(&cos(&imgs[i].to_vec(), &txts[a].to_vec())));
                i2t += usize::from(order[..k].contains(&i));
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| cos(&imgs[b].to_vec(), &txts[i].to_vec()).total_cmp(&cos(&imgs[a].to_vec(), &txts[i].to_vec())));
                t2i += usize::from(order[..k].contains(&i));
            }
            recall_ok &= got.image_to_text[&k] == i2t as f64 / n as f64 && got.text_to_image[&k] == t2i as f64 / n as f64;
        }
    }
    pass &= recall_ok;
    notes.push(format!("recall@k vs full sort: {recall_ok}"));
    verdict(pass, notes.join("; "))
}

// ---------------------------------------------------------------- training

const TRAIN_IMAGES: usize = 256;
const EVAL_IMAGES: usize = 64;
const EPOCHS: usize = 20;
const EVAL_OFFSET: u64 = 1000;

fn stage_config(seed: u64, stage: Stage, mode: RegionMode) -> StageConfig {
    let mut c = StageConfig::default();
    c.train.seed = seed;
    c.train.stage = stage;
    c.train.epochs = EPOCHS;
    c.train.region_mode = mode;
    c.train.eval_each_epoch = false;
    c.eval = EvalConfig {
        metrics: vec![Metric::Map],
        ..EvalConfig::toy()
    };
    c
}

fn datasets(seed: u64) -> (SyntheticDataset, SyntheticDataset) {
    let train = synthesize_dataset(&SyntheticSceneSpec { seed, ..Default::default() }, TRAIN_IMAGES).unwrap();
    let eval = synthesize_dataset(&SyntheticSceneSpec { seed: seed + EVAL_OFFSET, ..Default::default() }, EVAL_IMAGES).unwrap();
    (train, eval)
}

fn train(c: &StageConfig, init: TeacherStudentBundle, ds: &SyntheticDataset) -> TeacherStudentBundle {
    let dir = tempfile::tempdir().unwrap();
    let data = TrainData {
        records: &ds.records,
        eval: None,
    };
    run_stage(c, init, data, dir.path(), RunControl::default(), false).unwrap().bundle
}

type ModelKey = (u64, &'static str);

fn models() -> &'static Mutex<BTreeMap<ModelKey, TeacherStudentBundle>> {
    static M: OnceLock<Mutex<BTreeMap<ModelKey, TeacherStudentBundle>>> = OnceLock::new();
    M.get_or_init(Default::default)
}

/// `which` is "init", "s1", "roi" or "cls" (stage two from the seed's s1).
fn model(seed: u64, which: &'static str) -> TeacherStudentBundle {
    if let Some(b) = models().lock().unwrap().get(&(seed, which)) {
        return b.clone();
    }
    let (ds, _) = datasets(seed);
    let b = match which {
        "init" => init_bundle(&stage_config(seed, Stage::S1, RegionMode::RoiEmbedding)).unwrap(),
        "s1" => train(&stage_config(seed, Stage::S1, RegionMode::RoiEmbedding), model(seed, "init"), &ds),
        "roi" => train(&stage_config(seed, Stage::S2, RegionMode::RoiEmbedding), model(seed, "s1"), &ds),
        "cls" => train(&stage_config(seed, Stage::S2, RegionMode::ClsOfCrop), model(seed, "s1"), &ds),
        other => panic!("unknown model {other}"),
    };
    models().lock().unwrap().insert((seed, which), b.clone());
    b
}

fn coherence(b: &TeacherStudentBundle, seed: u64) -> f64 {
    let (_, ev) = datasets(seed);
    let data = EvalData {
        records: &ev.records,
        masks: &ev.masks,
        class_names: &ev.class_names,
    };
    let cfg = stage_config(seed, Stage::S1, RegionMode::RoiEmbedding).eval;
    evaluate(b, data, &cfg, seed).unwrap().map_coherence.unwrap()
}

fn prototype_miou(b: &TeacherStudentBundle, seed: u64) -> f64 {
    let (ds, ev) = datasets(seed);
    let grids: Vec<PatchGrid> = ds
        .records
        .iter()
        .map(|r| dense_grid(&b.student, &r.image, DenseSource::CustAttn).unwrap())
        .collect();
    let protos = class_prototypes(&grids, &ds.masks, ds.class_names.len()).unwrap();
    let preds: Vec<Array2<usize>> = ev
        .records
        .iter()
        .zip(&ev.masks)
        .map(|(r, m)| {
            let g = dense_grid(&b.student, &r.image, DenseSource::CustAttn).unwrap();
            upsample_nearest(&ovss_segment(&g, &protos).unwrap(), m.nrows(), m.ncols())
        })
        .collect();
    miou_dataset(&preds, &ev.masks).unwrap()
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let seed = 0;
    let trained = model(seed, "roi");
    let secs = start.elapsed().as_secs_f64();
    let miou = prototype_miou(&trained, seed);
    let (before, after) = (coherence(&model(seed, "init"), seed), coherence(&trained, seed));
    verdict(
        miou >= 0.9 && after - before >= 0.1 && secs <= 600.0,
        format!(
            "prototype mIoU {miou:.4} (>= 0.9); coherence mAP {before:.4} -> {after:.4}, gain {:.4} (>= 0.1); training {secs:.0}s (<= 600s)",
            after - before
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_9() -> Verdict {
    let seeds = [0u64, 1, 2];
    let roi: Vec<f64> = seeds.iter().map(|&s| coherence(&model(s, "roi"), s)).collect();
    let cls: Vec<f64> = seeds.iter().map(|&s| coherence(&model(s, "cls"), s)).collect();
    let wins = roi.iter().zip(&cls).filter(|(r, c)| c >= r).count();
    let pass = median(cls.clone()) >= median(roi.clone());
    let agreement = match wins {
        0 => "all seeds favour roi_embedding (blocking)",
        3 => "all seeds favour cls_of_crop",
        _ if pass => "seeds disagree (non-blocking)",
        _ => "seeds disagree (non-blocking); median sign opposite to expected",
    };
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    verdict(
        pass || (wins > 0 && wins < 3),
        format!(
            "coherence mAP cls_of_crop {} median {:.4} vs roi_embedding {} median {:.4}; {agreement}",
            fmt(&cls),
            median(cls.clone()),
            fmt(&roi),
            median(roi.clone())
        ),
    )
}

fn criterion_10() -> Verdict {
    let ds = synthesize_dataset(&SyntheticSceneSpec { seed: 10, ..Default::default() }, 12).unwrap();
    let mut c = tiny_config(Stage::S2, TeacherStrategy::Online);
    c.train.epochs = 3;
    c.train.eval_each_epoch = true;
    c.eval = EvalConfig {
        metrics: vec![Metric::Map, Metric::Miou],
        n_cap: 4,
        n_pairs: 40,
        ..EvalConfig::toy()
    };
    let data = || TrainData {
        records: &ds.records,
        eval: Some(EvalData {
            records: &ds.records,
            masks: &ds.masks,
            class_names: &ds.class_names,
        }),
    };
    let run = |dir: &std::path::Path, control: RunControl, resume: bool| {
        run_stage(&c, init_bundle(&c).unwrap(), data(), dir, control, resume).unwrap()
    };
    let (a, b, p) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(a.path(), RunControl::default(), false);
    let rb = run(b.path(), RunControl::default(), false);
    let log = |d: &tempfile::TempDir| std::fs::read(d.path().join(LOG_FILE)).unwrap();
    let same_log = log(&a) == log(&b) && !log(&a).is_empty();
    let stop = RunControl {
        stop_after: Some(4),
        snapshot_every: 0,
    };
    let part = run(p.path(), stop, false);
    let resumed = run(p.path(), RunControl::default(), true);
    let resume_ok = !part.finished && resumed.finished && resumed.bundle == ra.bundle && log(&p) == log(&a);
    verdict(
        same_log && ra.bundle == rb.bundle && resume_ok,
        format!("two runs identical metrics log and weights: {}; resume after 4 steps equals uninterrupted: {resume_ok}", same_log && ra.bundle == rb.bundle),
    )
}

fn random_record(r: &mut Rng, i: usize) -> ImageRecord {
    let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
    let text = |r: &mut Rng, n: usize| -> String {
        let alphabet: Vec<char> = "abcxyz ,.\"\\\n\t{}éü水".chars().collect();
        (0..r.random_range(0..n)).map(|_| *alphabet.choose(r).unwrap()).collect()
    };
    let objects = (0..r.random_range(0..5))
        .map(|_| {
            let (x1, y1) = (r.random::<f64>() * 0.9, r.random::<f64>() * 0.9);
            let b = BBox::new(x1, y1, x1 + r.random::<f64>() * (1.0 - x1) * 0.99 + 1e-3, y1 + r.random::<f64>() * (1.0 - y1) * 0.99 + 1e-3).unwrap();
            ObjectAnnotation::new(b, format!("cat {}", r.next_u32() % 50)).unwrap()
        })
        .collect();
    ImageRecord {
        image_id: format!("rec{i:04}"),
        image: Array3::from_shape_fn((h, w, 3), |_| r.random_range(0..=255u8) as f64 / 255.0),
        caption_short: text(r, 30),
        caption_long: text(r, 120),
        objects,
    }
}

fn criterion_11() -> Verdict {
    let mut r = rng::stream(21, "acceptance");
    let records: Vec<ImageRecord> = (0..500).map(|i| random_record(&mut r, i)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    save_manifest(&records, &path).unwrap();
    let loaded = load_manifest(&path).unwrap();
    let round_trip = loaded.rejected.is_empty() && loaded.records == records;

    let mut parse_ok = true;
    for rec in &records {
        for kind in [CaptionKind::Short, CaptionKind::Long] {
            let text = assemble_prompt(rec, kind).render();
            let line = text.lines().find(|l| l.starts_with(OBJECT_INFOS_PREFIX)).unwrap();
            let parsed = parse_object_infos(line).unwrap();
            parse_ok &= parsed.len() == rec.objects.len();
            for ((cat, b), o) in parsed.iter().zip(&rec.objects) {
                parse_ok &= cat == &o.category;
                parse_ok &= b.iter().zip(o.bbox.to_array()).all(|(x, y)| (x - y).abs() <= 5e-4 + 1e-12);
            }
        }
    }

    let picks = qa_sample(&records, DEFAULT_QA_SAMPLES, &mut rng::stream(21, "qa")).unwrap();
    let mut unique = picks.clone();
    unique.dedup();
    let qa_ok = DEFAULT_QA_SAMPLES == 200 && picks.len() == 200 && unique.len() == 200 && picks.iter().all(|&i| i < 500);
    verdict(
        round_trip && parse_ok && qa_ok,
        format!("500-record manifest round trip: {round_trip}; prompt parse-back: {parse_ok}; QA default 200 distinct: {qa_ok}"),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "loss correctness", criterion_1),
        (2, "MPCL singleton degeneracy", criterion_2),
        (3, "closed-form loss anchors", criterion_3),
        (4, "CustAttn contract", criterion_4),
        (5, "RoIAlign oracle", criterion_5),
        (6, "teacher strategies", criterion_6),
        (7, "metric oracles", criterion_7),
        (8, "toy OVSS end to end", criterion_8),
        (9, "cls_of_crop vs roi_embedding direction", criterion_9),
        (10, "reproducibility", criterion_10),
        (11, "dataset pipeline", criterion_11),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} [{name}] {status}: {} ({:.1}s)", v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
