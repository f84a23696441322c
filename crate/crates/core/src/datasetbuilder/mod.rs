//! Caption-dataset construction: prompt assembly from object annotations,
//! a pluggable captioner with retries and bounded concurrency, QA sampling
//! and a COCO-style annotation adapter.

mod captioner;
mod coco;
mod qa;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, CaptionKind, ImageRecord, ObjectAnnotation};
use crate::error::{Error, Result};

pub use captioner::{
    recaption, CaptionRequest, CaptionerClient, EchoCaptioner, FailingCaptioner, Flagged, RecaptionConfig,
    RecaptionReport, RecordedCaptioner, RetryPolicy,
};
pub use coco::{load_coco, CocoDataset};
pub use qa::{qa_sample, write_review_sheet, DEFAULT_QA_SAMPLES};

const SHORT_INSTRUCTION: &str = include_str!("../../assets/prompt_short.txt");
const LONG_INSTRUCTION: &str = include_str!("../../assets/prompt_long.txt");

pub const OBJECT_INFOS_PREFIX: &str = "Object infos: ";
pub const NO_OBJECTS: &str = "none";

/// Instruction for `kind`, without trailing whitespace.
pub fn instruction(kind: CaptionKind) -> &'static str {
    match kind {
        CaptionKind::Short => SHORT_INSTRUCTION.trim_end(),
        CaptionKind::Long => LONG_INSTRUCTION.trim_end(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPrompt {
    pub kind: CaptionKind,
    pub instruction: String,
    /// `Object infos: cat: (x1, y1, x2, y2); ...` or `Object infos: none`.
    pub object_infos: String,
}

impl CaptionPrompt {
    /// Instruction, image slot and object infos, one block per paragraph.
    pub fn render(&self) -> String {
        format!("{}\n\n{{Image}}\n\n{}", self.instruction, self.object_infos)
    }
}

fn fmt_bbox(b: &BBox) -> String {
    format!("({:.3}, {:.3}, {:.3}, {:.3})", b.x1, b.y1, b.x2, b.y2)
}

/// Objects in annotation order, boxes to 3 decimals.
pub fn format_object_infos(objects: &[ObjectAnnotation]) -> String {
    if objects.is_empty() {
        return format!("{OBJECT_INFOS_PREFIX}{NO_OBJECTS}");
    }
    let items: Vec<String> = objects
        .iter()
        .map(|o| format!("{}: {}", o.category, fmt_bbox(&o.bbox)))
        .collect();
    format!("{OBJECT_INFOS_PREFIX}{}", items.join("; "))
}

/// Inverse of [`format_object_infos`] for categories that do not contain
/// `"); "`. Boxes come back rounded to 3 decimals.
pub fn parse_object_infos(text: &str) -> Result<Vec<(String, [f64; 4])>> {
    let body = text
        .trim()
        .strip_prefix(OBJECT_INFOS_PREFIX)
        .ok_or_else(|| Error::invalid(format!("object infos must start with {OBJECT_INFOS_PREFIX:?}")))?;
    if body == NO_OBJECTS {
        return Ok(Vec::new());
    }
    let body = body
        .strip_suffix(')')
        .ok_or_else(|| Error::invalid("object infos must end with a bbox"))?;
    body.split("); ")
        .map(|item| {
            let (cat, coords) = item
                .rsplit_once(": (")
                .ok_or_else(|| Error::invalid(format!("malformed object info {item:?}")))?;
            let vals: Vec<f64> = coords
                .split(", ")
                .map(|v| v.parse::<f64>().map_err(|_| Error::invalid(format!("bad coordinate {v:?}"))))
                .collect::<Result<_>>()?;
            let bbox: [f64; 4] = vals
                .try_into()
                .map_err(|_| Error::invalid(format!("expected 4 coordinates in {item:?}")))?;
            Ok((cat.to_string(), bbox))
        })
        .collect()
}

pub fn assemble_prompt(record: &ImageRecord, kind: CaptionKind) -> CaptionPrompt {
    CaptionPrompt {
        kind,
        instruction: instruction(kind).to_string(),
        object_infos: format_object_infos(&record.objects),
    }
}
