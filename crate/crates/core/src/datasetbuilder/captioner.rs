use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{assemble_prompt, parse_object_infos, CaptionPrompt};
use crate::datamodel::{CaptionKind, Image, ImageRecord};
use crate::error::{Error, Result};
use crate::rng;

pub struct CaptionRequest<'a> {
    pub image_id: &'a str,
    pub image: &'a Image,
    pub prompt: &'a CaptionPrompt,
}

/// A captioning backend. Implementations are called from several threads.
pub trait CaptionerClient: Sync {
    fn generate(&self, request: &CaptionRequest<'_>) -> Result<String>;
}

/// Deterministic offline captioner listing the prompt's categories.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoCaptioner {
    pub seed: u64,
}

const OPENINGS: [&str; 4] = [
    "a remote sensing image showing",
    "an aerial view of",
    "a satellite scene containing",
    "an overhead image with",
];

impl CaptionerClient for EchoCaptioner {
    fn generate(&self, request: &CaptionRequest<'_>) -> Result<String> {
        let objects = parse_object_infos(&request.prompt.object_infos)?;
        let mut names: Vec<&str> = Vec::new();
        for (c, _) in &objects {
            if !names.contains(&c.as_str()) {
                names.push(c);
            }
        }
        let pick = rng::hash_str(&format!("{}/{}", self.seed, request.image_id)) as usize % OPENINGS.len();
        let listed = if names.is_empty() {
            "no annotated objects".to_string()
        } else {
            names.join(", ")
        };
        let mut caption = format!("{} {listed}.", OPENINGS[pick]);
        if request.prompt.kind == CaptionKind::Long {
            caption.push_str(&format!(" there are {} annotated objects in the scene.", objects.len()));
        }
        Ok(caption)
    }
}

/// Always fails; counts calls.
#[derive(Debug, Default)]
pub struct FailingCaptioner {
    pub calls: AtomicUsize,
}

impl CaptionerClient for FailingCaptioner {
    fn generate(&self, _: &CaptionRequest<'_>) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(Error::Captioner("service unavailable".into()))
    }
}

/// Replays stored responses keyed by `"<image_id>/<short|long>"`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordedCaptioner {
    pub responses: BTreeMap<String, String>,
}

impl RecordedCaptioner {
    pub fn key(image_id: &str, kind: CaptionKind) -> String {
        let k = match kind {
            CaptionKind::Short => "short",
            CaptionKind::Long => "long",
        };
        format!("{image_id}/{k}")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl CaptionerClient for RecordedCaptioner {
    fn generate(&self, request: &CaptionRequest<'_>) -> Result<String> {
        let key = Self::key(request.image_id, request.prompt.kind);
        self.responses
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Captioner(format!("no recorded response for {key}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts per record, at least 1.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 200,
            backoff_multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, failed_attempts: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.backoff_multiplier.powi(failed_attempts as i32 - 1);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecaptionConfig {
    pub kind: CaptionKind,
    pub retry: RetryPolicy,
    /// Responses slower than this count as failed attempts.
    pub timeout_ms: Option<u64>,
    /// Concurrent client calls.
    pub concurrency: usize,
}

impl Default for RecaptionConfig {
    fn default() -> Self {
        Self {
            kind: CaptionKind::Short,
            retry: RetryPolicy::default(),
            timeout_ms: Some(60_000),
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flagged {
    pub image_id: String,
    pub attempts: u32,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecaptionReport {
    pub captioned: usize,
    pub flagged: Vec<Flagged>,
}

fn call_with_retries(
    client: &dyn CaptionerClient,
    record: &ImageRecord,
    cfg: &RecaptionConfig,
) -> std::result::Result<String, Flagged> {
    let prompt = assemble_prompt(record, cfg.kind);
    let request = CaptionRequest {
        image_id: &record.image_id,
        image: &record.image,
        prompt: &prompt,
    };
    let mut last = String::new();
    for attempt in 1..=cfg.retry.max_attempts {
        let start = Instant::now();
        let outcome = client.generate(&request).and_then(|c| match cfg.timeout_ms {
            Some(t) if start.elapsed() > Duration::from_millis(t) => {
                Err(Error::Captioner(format!("timed out after {t} ms")))
            }
            _ if c.trim().is_empty() => Err(Error::Captioner("empty caption".into())),
            _ => Ok(c),
        });
        match outcome {
            Ok(c) => return Ok(c),
            Err(e) => {
                log::debug!("{} attempt {attempt}: {e}", record.image_id);
                last = e.to_string();
                if attempt < cfg.retry.max_attempts {
                    std::thread::sleep(cfg.retry.backoff(attempt));
                }
            }
        }
    }
    Err(Flagged {
        image_id: record.image_id.clone(),
        attempts: cfg.retry.max_attempts,
        error: last,
    })
}

/// Replaces each record's `cfg.kind` caption. Records whose calls all fail
/// keep their caption and are listed in the report.
pub fn recaption(
    records: &mut [ImageRecord],
    client: &dyn CaptionerClient,
    cfg: &RecaptionConfig,
) -> Result<RecaptionReport> {
    if cfg.concurrency == 0 || cfg.retry.max_attempts == 0 {
        return Err(Error::Config("recaption needs concurrency >= 1 and max_attempts >= 1".into()));
    }
    let next = AtomicUsize::new(0);
    let shared: &[ImageRecord] = records;
    let mut outcomes: Vec<(usize, std::result::Result<String, Flagged>)> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..cfg.concurrency.min(shared.len().max(1)))
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(record) = shared.get(i) else { break };
                        done.push((i, call_with_retries(client, record, cfg)));
                    }
                    done
                })
            })
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("captioner worker panicked"))
            .collect()
    });
    outcomes.sort_by_key(|(i, _)| *i);
    let mut report = RecaptionReport::default();
    for (i, outcome) in outcomes {
        match outcome {
            Ok(c) => {
                *records[i].caption_mut(cfg.kind) = c;
                report.captioned += 1;
            }
            Err(f) => {
                log::warn!("{}: flagged after {} attempts: {}", f.image_id, f.attempts, f.error);
                report.flagged.push(f);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{synthesize_dataset, SyntheticSceneSpec};

    fn records(n: usize) -> Vec<ImageRecord> {
        synthesize_dataset(&SyntheticSceneSpec::default(), n).unwrap().records
    }

    fn fast(kind: CaptionKind, concurrency: usize) -> RecaptionConfig {
        RecaptionConfig {
            kind,
            retry: RetryPolicy {
                max_attempts: 3,
                initial_backoff_ms: 0,
                backoff_multiplier: 1.0,
            },
            timeout_ms: None,
            concurrency,
        }
    }

    #[test]
    fn echo_captions_contain_every_category() {
        for kind in [CaptionKind::Short, CaptionKind::Long] {
            let mut rs = records(12);
            let before = rs.clone();
            let report = recaption(&mut rs, &EchoCaptioner { seed: 3 }, &fast(kind, 3)).unwrap();
            assert_eq!(report.captioned, 12);
            assert!(report.flagged.is_empty());
            for (r, b) in rs.iter().zip(&before) {
                for o in &r.objects {
                    assert!(r.caption(kind).contains(&o.category));
                }
                assert_eq!(r.objects, b.objects);
                assert_ne!(r.caption(kind), b.caption(kind));
            }
        }
    }

    #[test]
    fn failing_client_flags_everything() {
        let mut rs = records(5);
        let before = rs.clone();
        let client = FailingCaptioner::default();
        let report = recaption(&mut rs, &client, &fast(CaptionKind::Short, 2)).unwrap();
        assert_eq!(report.captioned, 0);
        assert_eq!(report.flagged.len(), 5);
        assert!(report.flagged.iter().all(|f| f.attempts == 3));
        assert_eq!(client.calls.load(Ordering::SeqCst), 15);
        assert_eq!(rs, before);
    }

    #[test]
    fn rerun_is_idempotent_across_concurrency() {
        let mut a = records(9);
        let mut b = a.clone();
        recaption(&mut a, &EchoCaptioner { seed: 7 }, &fast(CaptionKind::Long, 1)).unwrap();
        recaption(&mut b, &EchoCaptioner { seed: 7 }, &fast(CaptionKind::Long, 4)).unwrap();
        assert_eq!(a, b);
        let snapshot = a.clone();
        recaption(&mut a, &EchoCaptioner { seed: 7 }, &fast(CaptionKind::Long, 2)).unwrap();
        assert_eq!(a, snapshot);
    }

    struct Flaky {
        failures_per_record: usize,
        seen: std::sync::Mutex<BTreeMap<String, usize>>,
    }

    impl CaptionerClient for Flaky {
        fn generate(&self, r: &CaptionRequest<'_>) -> Result<String> {
            let mut seen = self.seen.lock().unwrap();
            let n = seen.entry(r.image_id.to_string()).or_default();
            *n += 1;
            if *n <= self.failures_per_record {
                Err(Error::Captioner("transient".into()))
            } else {
                Ok(format!("caption {}", r.image_id))
            }
        }
    }

    #[test]
    fn transient_failures_retried_within_budget() {
        let mut rs = records(4);
        let ok = Flaky {
            failures_per_record: 2,
            seen: Default::default(),
        };
        assert_eq!(recaption(&mut rs, &ok, &fast(CaptionKind::Short, 2)).unwrap().captioned, 4);
        let over = Flaky {
            failures_per_record: 3,
            seen: Default::default(),
        };
        let mut rs = records(4);
        assert_eq!(recaption(&mut rs, &over, &fast(CaptionKind::Short, 2)).unwrap().flagged.len(), 4);
    }

    #[test]
    fn recorded_responses_and_misses() {
        let mut rs = records(2);
        let mut rec = RecordedCaptioner::default();
        rec.responses
            .insert(RecordedCaptioner::key(&rs[0].image_id, CaptionKind::Short), "stored".into());
        let report = recaption(&mut rs, &rec, &fast(CaptionKind::Short, 1)).unwrap();
        assert_eq!(rs[0].caption_short, "stored");
        assert_eq!(report.flagged.len(), 1);
        assert_eq!(report.flagged[0].image_id, rs[1].image_id);
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(serde_json::from_str::<RecordedCaptioner>(&json).unwrap(), rec);
    }

    #[test]
    fn zero_concurrency_rejected() {
        let mut rs = records(1);
        assert!(recaption(&mut rs, &EchoCaptioner::default(), &fast(CaptionKind::Short, 0)).is_err());
    }
}
