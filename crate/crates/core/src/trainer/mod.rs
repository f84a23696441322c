//! Two-stage training loop: warmup-cosine AdamW steps, teacher updates,
//! crop and region sampling from named random streams, resumable snapshots
//! and a JSON-lines evaluation log.

mod config;
mod step;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datamodel::ImageRecord;
use crate::encoders::{Checkpoint, TeacherStudentBundle};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, EvalData, MetricReport};
use crate::optim::AdamW;
use crate::rng::{self, RngState};

pub use config::{ModelConfig, RegionSource, StageConfig, TrainConfig, PRESETS};
pub use step::{assemble_batch, forward_backward, train_step, Batch, StepReport};

/// Loss sums since the last evaluation event.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLoss {
    pub glo: f64,
    pub loc: f64,
    pub dis: f64,
    pub total: f64,
    pub steps: u64,
}

impl RunningLoss {
    pub fn add(&mut self, r: &StepReport) {
        self.glo += r.losses.glo.unwrap_or(0.0);
        self.loc += r.losses.loc.unwrap_or(0.0);
        self.dis += r.losses.dis.unwrap_or(0.0);
        self.total += r.total;
        self.steps += 1;
    }

    /// Per-step means, `None` before the first step.
    pub fn means(&self) -> Option<RunningLoss> {
        (self.steps > 0).then(|| {
            let n = self.steps as f64;
            RunningLoss {
                glo: self.glo / n,
                loc: self.loc / n,
                dis: self.dis / n,
                total: self.total / n,
                steps: self.steps,
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub total_steps: u64,
    pub epoch: usize,
    /// Position of the next batch within `epoch_order`.
    pub cursor: usize,
    /// Record order of the current epoch; empty between epochs.
    pub epoch_order: Vec<usize>,
    /// Hash of the student parameters when the state was captured.
    pub params_hash: String,
    pub running: RunningLoss,
    pub rng_data: RngState,
    pub rng_crop: RngState,
    pub rng_init: RngState,
}

impl TrainState {
    pub fn new(seed: u64, total_steps: u64) -> Self {
        Self {
            step: 0,
            total_steps,
            epoch: 0,
            cursor: 0,
            epoch_order: Vec::new(),
            params_hash: String::new(),
            running: RunningLoss::default(),
            rng_data: RngState::capture(&rng::stream(seed, rng::DATA)),
            rng_crop: RngState::capture(&rng::stream(seed, rng::CROP)),
            rng_init: RngState::capture(&rng::stream(seed, rng::INIT)),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    /// Mean losses since the previous event.
    pub loss: Option<RunningLoss>,
    pub report: Option<MetricReport>,
}

/// Interruption and snapshot controls. Not part of the config hash.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunControl {
    /// Stop (after writing a snapshot) once this many steps are done.
    pub stop_after: Option<u64>,
    /// Snapshot every this many steps; epoch ends always snapshot.
    pub snapshot_every: u64,
}

pub struct TrainData<'a> {
    pub records: &'a [ImageRecord],
    pub eval: Option<EvalData<'a>>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub bundle: TeacherStudentBundle,
    pub state: TrainState,
    pub checkpoint: Option<PathBuf>,
    pub snapshot: PathBuf,
    pub log: PathBuf,
    pub events: Vec<EvalEvent>,
    /// False when stopped early by [`RunControl::stop_after`].
    pub finished: bool,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SNAPSHOT_FILE: &str = "snapshot.ckpt";
pub const LOG_FILE: &str = "metrics.jsonl";

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

fn save_snapshot(path: &Path, bundle: &TeacherStudentBundle, opt: &AdamW, state: &TrainState, hash: &str) -> Result<()> {
    let extra = json!({
        "config_hash": hash,
        "train_state": state,
        "optimizer": { "t": opt.t, "config": opt.config },
    });
    let mut ck = Checkpoint::from_bundle(bundle, extra);
    for (k, v) in &opt.m {
        ck.arrays.insert(format!("{OPT_M}{k}"), v.clone());
    }
    for (k, v) in &opt.v {
        ck.arrays.insert(format!("{OPT_V}{k}"), v.clone());
    }
    ck.save(path)
}

fn config_hash_of(ck: &Checkpoint) -> Option<&str> {
    ck.extra()?.get("config_hash")?.as_str()
}

fn load_snapshot(path: &Path, hash: &str) -> Result<(TeacherStudentBundle, AdamW, TrainState)> {
    let ck = Checkpoint::load(path)?;
    let found = config_hash_of(&ck).ok_or_else(|| Error::Checkpoint(format!("{}: no config hash", path.display())))?;
    if found != hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: snapshot {found}, current config {hash}"
        )));
    }
    let extra = ck.extra().expect("checked above");
    let state: TrainState = serde_json::from_value(extra["train_state"].clone())?;
    let opt_meta = &extra["optimizer"];
    let mut opt = AdamW::new(serde_json::from_value(opt_meta["config"].clone())?);
    opt.t = opt_meta["t"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("optimizer step missing".into()))?;
    for (k, v) in &ck.arrays {
        if let Some(name) = k.strip_prefix(OPT_M) {
            opt.m.insert(name.to_string(), v.clone());
        } else if let Some(name) = k.strip_prefix(OPT_V) {
            opt.v.insert(name.to_string(), v.clone());
        }
    }
    Ok((ck.to_bundle()?, opt, state))
}

fn append_event(path: &Path, event: &EvalEvent) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(event)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Keeps log events up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<Vec<EvalEvent>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = Vec::new();
    let mut out = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let ev: EvalEvent = serde_json::from_str(line)?;
        if ev.step <= step {
            out.push_str(line);
            out.push('\n');
            kept.push(ev);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(kept)
}

/// A fresh bundle for `config`, seeded from the run seed.
pub fn init_bundle(config: &StageConfig) -> Result<TeacherStudentBundle> {
    let mut vision = config.model.vision.clone();
    let mut text = config.model.text.clone();
    vision.seed = config.train.seed;
    text.seed = config.train.seed;
    TeacherStudentBundle::new(
        vision,
        text,
        config.train.teacher,
        config.train.text_frozen,
        config.model.shared_temperature,
    )
}

/// Runs (or resumes) one training stage in `out_dir`.
///
/// `init` is the starting bundle of a fresh run; it is ignored when
/// resuming from `out_dir`'s snapshot.
pub fn run_stage(
    config: &StageConfig,
    init: TeacherStudentBundle,
    data: TrainData<'_>,
    out_dir: &Path,
    control: RunControl,
    resume: bool,
) -> Result<StageOutcome> {
    config.validate()?;
    let cfg = &config.train;
    let n = data.records.len();
    let per_epoch = cfg.steps_per_epoch(n);
    if per_epoch == 0 {
        return Err(Error::Config(format!("{n} records cannot fill a batch of at least 2")));
    }
    let total_steps = per_epoch * cfg.epochs as u64;
    if total_steps < cfg.warmup_steps {
        return Err(Error::Config(format!(
            "{total_steps} total steps is fewer than {} warmup steps",
            cfg.warmup_steps
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = config.hash();
    let snapshot = out_dir.join(SNAPSHOT_FILE);
    let log = out_dir.join(LOG_FILE);
    let stage = cfg.stage.to_string();

    let (mut bundle, mut opt, mut state, mut events) = if resume {
        let (b, o, s) = load_snapshot(&snapshot, &hash)?;
        let events = truncate_log(&log, s.step)?;
        log::info!("resuming {stage} at step {} of {}", s.step, s.total_steps);
        (b, o, s, events)
    } else {
        let _ = fs::remove_file(&log);
        (init, AdamW::new(cfg.optimizer()), TrainState::new(cfg.seed, total_steps), Vec::new())
    };
    fs::write(out_dir.join("stage_config.json"), serde_json::to_string_pretty(config)?)
        .map_err(|e| Error::io(out_dir, e))?;

    let restore = |s: &RngState| s.restore().ok_or_else(|| Error::Checkpoint("bad rng state".into()));
    let mut data_rng = restore(&state.rng_data)?;
    let mut crop_rng = restore(&state.rng_crop)?;

    let eval_event = |bundle: &TeacherStudentBundle, state: &mut TrainState| -> Result<EvalEvent> {
        let report = match (&data.eval, cfg.eval_each_epoch) {
            (Some(d), true) => Some(evaluate(bundle, *d, &config.eval, cfg.seed)?),
            _ => None,
        };
        let ev = EvalEvent {
            stage: stage.clone(),
            epoch: state.epoch,
            step: state.step,
            loss: state.running.means(),
            report,
        };
        state.running = RunningLoss::default();
        Ok(ev)
    };

    if !resume {
        let ev = eval_event(&bundle, &mut state)?;
        append_event(&log, &ev)?;
        events.push(ev);
    }

    let capture = |state: &mut TrainState, bundle: &TeacherStudentBundle, d: &rng::Rng, c: &rng::Rng| {
        state.rng_data = RngState::capture(d);
        state.rng_crop = RngState::capture(c);
        state.params_hash = bundle.student.params.hash();
    };

    while state.epoch < cfg.epochs {
        if state.epoch_order.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut data_rng);
            state.epoch_order = order;
            state.cursor = 0;
        }
        while state.cursor < n {
            let end = (state.cursor + cfg.batch_size).min(n);
            if end - state.cursor < 2 {
                break;
            }
            let idx = state.epoch_order[state.cursor..end].to_vec();
            let batch = assemble_batch(data.records, &idx, cfg, &mut data_rng, &mut crop_rng)?;
            let report = train_step(&mut bundle, &mut opt, &batch, cfg, &mut state)?;
            log::debug!(
                "step {} lr {:.3e} loss {:.6} |g| {:.4}",
                report.step,
                report.lr,
                report.total,
                report.grad_norm
            );
            state.cursor = end;
            let stop = control.stop_after == Some(state.step);
            if stop || (control.snapshot_every > 0 && state.step % control.snapshot_every == 0) {
                capture(&mut state, &bundle, &data_rng, &crop_rng);
                save_snapshot(&snapshot, &bundle, &opt, &state, &hash)?;
            }
            if stop {
                return Ok(StageOutcome {
                    bundle,
                    state,
                    checkpoint: None,
                    snapshot,
                    log,
                    events,
                    finished: false,
                });
            }
        }
        state.epoch += 1;
        state.cursor = 0;
        state.epoch_order.clear();
        let ev = eval_event(&bundle, &mut state)?;
        append_event(&log, &ev)?;
        events.push(ev);
        capture(&mut state, &bundle, &data_rng, &crop_rng);
        save_snapshot(&snapshot, &bundle, &opt, &state, &hash)?;
    }

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_bundle(
        &bundle,
        json!({ "config_hash": hash, "stage": stage, "steps": state.step }),
    )
    .save(&checkpoint)?;
    Ok(StageOutcome {
        bundle,
        state,
        checkpoint: Some(checkpoint),
        snapshot,
        log,
        events,
        finished: true,
    })
}

/// Stored config hash of a checkpoint, if any.
pub fn checkpoint_config_hash(ck: &Checkpoint) -> Option<String> {
    config_hash_of(ck).map(str::to_string)
}

/// Parses a metrics log.
pub fn read_log(path: &Path) -> Result<Vec<EvalEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
