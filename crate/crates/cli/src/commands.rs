use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde_json::json;
use toml::Value;

use rsclip_core::datamodel::{load_image, load_mask, save_manifest, save_mask, CaptionKind, Mask};
use rsclip_core::datasetbuilder::{
    load_coco, qa_sample, recaption, write_review_sheet, CaptionerClient, EchoCaptioner, FailingCaptioner,
    RecaptionConfig, RecordedCaptioner,
};
use rsclip_core::encoders::{Checkpoint, TeacherStudentBundle};
use rsclip_core::evalsuite::{
    anchor_similarity_map, class_text_embeddings, dense_grid, evaluate, miou, ovss_segment, save_heatmap,
    similarity_map, upsample_nearest, EvalData, Metric,
};
use rsclip_core::losses::Stage;
use rsclip_core::rng;
use rsclip_core::trainer::{init_bundle, run_stage, ModelConfig, RunControl, TrainData};

use crate::config::{self, env_overrides, Override, Resolved};
use crate::data::{self, CLASSES_FILE, MANIFEST_FILE, MASKS_DIR};
use crate::Common;

/// A bad flag, config key or config value; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    anyhow!(UsageError(e.to_string()))
}

fn resolve(common: &Common, extra: Vec<Override>) -> Result<Resolved> {
    let mut cli = common
        .set
        .iter()
        .map(|s| Override::parse(s))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| usage(format!("{e:#}")))?;
    if let Some(s) = common.seed {
        let v = i64::try_from(s).map_err(|_| usage("seed must fit in a signed 64-bit integer"))?;
        cli.push(Override::new("seed", Value::Integer(v)));
    }
    cli.extend(extra);
    let env = env_overrides(std::env::vars());
    config::resolve(common.config.as_deref(), &env, &cli).map_err(|e| usage(format!("{e:#}")))
}

fn load_bundle(path: &Path) -> Result<TeacherStudentBundle> {
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    Checkpoint::load(path)
        .and_then(|c| c.to_bundle())
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes (default: `data.n_train`, or `data.n_eval` with --eval-split).
    #[arg(long)]
    n: Option<usize>,
    /// Write the held-out evaluation split instead of the training split.
    #[arg(long)]
    eval_split: bool,
}

pub fn synth_data(args: SynthArgs) -> Result<()> {
    let cfg = resolve(&args.common, Vec::new())?.config.data;
    let mut spec = cfg.synthetic.clone();
    let mut n = cfg.n_train;
    if args.eval_split {
        spec.seed += data::EVAL_SPLIT_OFFSET;
        n = cfg.n_eval;
    }
    let n = args.n.unwrap_or(n);
    let ds = rsclip_core::datamodel::synthesize_dataset(&spec, n)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_manifest(&ds.records, &args.out.join(MANIFEST_FILE))?;
    for (r, m) in ds.records.iter().zip(&ds.masks) {
        save_mask(m, &args.out.join(MASKS_DIR).join(format!("{}.png", r.image_id)))?;
    }
    write_json(&args.out.join(CLASSES_FILE), &ds.class_names)?;
    print_json(&json!({
        "manifest": args.out.join(MANIFEST_FILE),
        "records": ds.records.len(),
        "classes": ds.class_names,
        "seed": spec.seed,
    }))
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    common: Common,
    /// COCO-style detection JSON (images, annotations, categories).
    #[arg(long)]
    annotations: PathBuf,
    /// Directory holding the annotated images.
    #[arg(long)]
    images: PathBuf,
    /// Output directory for the manifest, QA sheet and report.
    #[arg(long)]
    out: PathBuf,
    /// Captions to generate.
    #[arg(long, default_value = "both", value_parser = ["short", "long", "both"])]
    kind: String,
    /// Captioner backend (default: `builder.captioner`).
    #[arg(long, value_parser = ["echo", "fail", "recorded"])]
    captioner: Option<String>,
    /// Recorded responses JSON for the `recorded` captioner.
    #[arg(long)]
    recorded: Option<PathBuf>,
    /// Records in the QA review sheet (default: `builder.qa_samples`).
    #[arg(long)]
    qa_samples: Option<usize>,
}

pub fn build_dataset(args: BuildArgs) -> Result<()> {
    let resolved = resolve(&args.common, Vec::new())?.config;
    let b = &resolved.builder;
    let name = args.captioner.clone().unwrap_or_else(|| b.captioner.clone());
    let client: Box<dyn CaptionerClient> = match name.as_str() {
        "echo" => Box::new(EchoCaptioner { seed: resolved.seed }),
        "fail" => Box::new(FailingCaptioner::default()),
        "recorded" => {
            let path = args
                .recorded
                .clone()
                .or_else(|| b.recorded_responses.clone())
                .ok_or_else(|| usage("the recorded captioner needs --recorded or builder.recorded_responses"))?;
            Box::new(RecordedCaptioner::load(&path)?)
        }
        other => return Err(usage(format!("unknown captioner {other:?}"))),
    };
    let kinds = match args.kind.as_str() {
        "short" => vec![CaptionKind::Short],
        "long" => vec![CaptionKind::Long],
        _ => vec![CaptionKind::Short, CaptionKind::Long],
    };
    let mut records = load_coco(&args.annotations, &args.images)?;
    let mut reports = BTreeMap::new();
    for kind in &kinds {
        let cfg = RecaptionConfig {
            kind: *kind,
            ..b.recaption.clone()
        };
        let report = recaption(&mut records, client.as_ref(), &cfg)?;
        log::info!("{kind:?}: {} captioned, {} flagged", report.captioned, report.flagged.len());
        reports.insert(format!("{kind:?}").to_lowercase(), report);
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_manifest(&records, &args.out.join(MANIFEST_FILE))?;
    let wanted = args.qa_samples.unwrap_or(b.qa_samples);
    let n = wanted.min(records.len());
    if n < wanted {
        log::warn!("only {} records, QA sheet holds {n} instead of {wanted}", records.len());
    }
    let picks = qa_sample(&records, n, &mut rng::stream(resolved.seed, "qa"))?;
    write_review_sheet(&records, &picks, kinds[0], &args.out.join("qa_review.csv"))?;
    write_json(&args.out.join("recaption_report.json"), &reports)?;
    print_json(&json!({
        "manifest": args.out.join(MANIFEST_FILE),
        "records": records.len(),
        "qa_samples": n,
        "flagged": reports.values().map(|r| r.flagged.len()).sum::<usize>(),
    }))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory for checkpoints, snapshots and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Named hyperparameters used as the `[train]` baseline.
    #[arg(long)]
    preset: Option<String>,
    /// Training stage.
    #[arg(long, value_parser = ["s1", "s2"])]
    stage: Option<String>,
    /// Start from this checkpoint (normally the stage-one model).
    #[arg(long, value_name = "CHECKPOINT")]
    init_from: Option<PathBuf>,
    /// Continue from the snapshot in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps, leaving a snapshot.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Also snapshot every N steps (0: epoch ends only).
    #[arg(long, default_value_t = 0)]
    snapshot_every: u64,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(p) = &args.preset {
        extra.push(Override::new("preset", Value::String(p.clone())));
    }
    if let Some(s) = &args.stage {
        extra.push(Override::new("train.stage", Value::String(s.clone())));
    }
    let Resolved { config, source } = resolve(&args.common, extra)?;
    if args.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    log::debug!("resolved configuration:\n{}", config.to_toml()?);
    let mut stage = config.stage_config();
    let init = match &args.init_from {
        Some(p) => {
            let b = load_bundle(p)?.with_strategy(config.train.teacher, config.train.text_frozen)?;
            let from_ckpt = ModelConfig {
                vision: b.student.config.clone(),
                text: b.text.config.clone(),
                shared_temperature: b.shared_temperature(),
            };
            if from_ckpt != stage.model {
                log::info!("model section replaced by the architecture stored in {}", p.display());
            }
            stage.model = from_ckpt;
            b
        }
        None => {
            if config.train.stage == Stage::S2 {
                log::warn!("stage s2 without --init-from: training from a fresh initialisation");
            }
            init_bundle(&stage)?
        }
    };
    let records = data::training_records(&config.data)?;
    let eval = if config.train.eval_each_epoch {
        Some(data::eval_set(&config.data).context("loading the evaluation split (set train.eval_each_epoch=false to skip)")?)
    } else {
        None
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    if let Some(text) = &source {
        fs::write(args.out.join("config.toml"), text)?;
    }
    fs::write(args.out.join("resolved_config.toml"), config.to_toml()?)?;
    let control = RunControl {
        stop_after: args.stop_after,
        snapshot_every: args.snapshot_every,
    };
    let train_data = TrainData {
        records: &records,
        eval: eval.as_ref().map(|e| EvalData {
            records: &e.records,
            masks: &e.masks,
            class_names: &e.class_names,
        }),
    };
    let outcome = run_stage(&stage, init, train_data, &args.out, control, args.resume)?;
    print_json(&json!({
        "stage": config.train.stage,
        "steps": outcome.state.step,
        "finished": outcome.finished,
        "checkpoint": outcome.checkpoint,
        "snapshot": outcome.snapshot,
        "log": outcome.log,
        "config_hash": stage.hash(),
        "last_event": outcome.events.last(),
    }))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated subset of dbi,acc1,map,miou,zsc,recall (default: `eval.metrics`).
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut config = resolve(&args.common, Vec::new())?.config;
    if let Some(names) = &args.metrics {
        config.eval.metrics = names
            .iter()
            .map(|n| n.trim().parse::<Metric>())
            .collect::<std::result::Result<_, _>>()
            .map_err(usage)?;
    }
    let bundle = load_bundle(&args.checkpoint)?;
    let set = data::eval_set(&config.data)?;
    let data = EvalData {
        records: &set.records,
        masks: &set.masks,
        class_names: &set.class_names,
    };
    let report = evaluate(&bundle, data, &config.eval, config.seed)?;
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    print_json(&report)
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image at the encoder's input size.
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated class names (default: the configured class list).
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Label PNG, one class index per pixel.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth label PNG; adds mIoU to the output.
    #[arg(long)]
    gt: Option<PathBuf>,
}

pub fn segment(args: SegmentArgs) -> Result<()> {
    let config = resolve(&args.common, Vec::new())?.config;
    let bundle = load_bundle(&args.checkpoint)?;
    let names = match args.classes {
        Some(c) => c.into_iter().map(|s| s.trim().to_string()).collect(),
        None => data::default_class_names(&config.data)?,
    };
    if names.is_empty() || names.len() > 255 {
        return Err(usage(format!("need 1 to 255 class names, got {}", names.len())));
    }
    let image = load_image(&args.image)?;
    let grid = dense_grid(&bundle.student, &image, config.eval.dense_source)?;
    let text = class_text_embeddings(&bundle, &names, &config.eval.template)?;
    let cells = ovss_segment(&grid, &text)?;
    let (h, w, _) = image.dim();
    let full = upsample_nearest(&cells, h, w);
    let mask: Mask = full.mapv(|c| c as u8);
    save_mask(&mask, &args.out)?;
    let mut counts = vec![0usize; names.len()];
    for &c in &full {
        counts[c] += 1;
    }
    let score = match &args.gt {
        Some(p) => Some(miou(&full, &load_mask(p)?)?),
        None => None,
    };
    print_json(&json!({
        "classes": names,
        "cells": cells.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        "pixel_counts": counts,
        "miou": score,
        "out": args.out,
    }))
}

fn parse_anchor(s: &str) -> std::result::Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("anchor must be ROW,COL")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(y)?, p(x)?))
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image at the encoder's input size.
    #[arg(long)]
    image: PathBuf,
    /// Anchor patch cell as ROW,COL.
    #[arg(long, value_parser = parse_anchor, required_unless_present = "cls", conflicts_with = "cls")]
    anchor: Option<(usize, usize)>,
    /// Use the image CLS embedding as the query.
    #[arg(long)]
    cls: bool,
    /// Heatmap PNG.
    #[arg(long)]
    out: PathBuf,
    /// Pixels per patch cell in the heatmap.
    #[arg(long, default_value_t = 16)]
    cell_px: u32,
    /// Also write the similarity values as JSON.
    #[arg(long)]
    values: Option<PathBuf>,
}

pub fn visualize(args: VisualizeArgs) -> Result<()> {
    let config = resolve(&args.common, Vec::new())?.config;
    let bundle = load_bundle(&args.checkpoint)?;
    let image = load_image(&args.image)?;
    let grid = dense_grid(&bundle.student, &image, config.eval.dense_source)?;
    let map = match args.anchor {
        Some((y, x)) => {
            if y >= grid.h || x >= grid.w {
                return Err(usage(format!("anchor {y},{x} outside the {}x{} grid", grid.h, grid.w)));
            }
            anchor_similarity_map(&grid, (y, x))?
        }
        None => similarity_map(&grid, bundle.student.encode_image(&image)?.cls.view())?,
    };
    if args.cell_px == 0 {
        return Err(usage("--cell-px must be positive"));
    }
    save_heatmap(&map, args.cell_px, args.anchor, &args.out)?;
    let rows: Vec<Vec<f64>> = map.outer_iter().map(|r| r.to_vec()).collect();
    if let Some(p) = &args.values {
        write_json(p, &json!({ "anchor": args.anchor, "cls": args.cls, "map": rows }))?;
    }
    print_json(&json!({
        "out": args.out,
        "grid": [grid.h, grid.w],
        "min": map.iter().copied().fold(f64::INFINITY, f64::min),
        "max": map.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }))
}
