use std::path::Path;

use rand::seq::index;

use crate::datamodel::{CaptionKind, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_QA_SAMPLES: usize = 200;

/// `n` distinct record indices drawn uniformly, in ascending order.
pub fn qa_sample(records: &[ImageRecord], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n > records.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} records for review from {}",
            records.len()
        )));
    }
    let mut picks = index::sample(rng, records.len(), n).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

/// CSV with columns `image_id, caption, verdict`; verdicts left blank.
pub fn write_review_sheet(records: &[ImageRecord], picks: &[usize], kind: CaptionKind, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "caption", "verdict"])?;
    for &i in picks {
        let r = records
            .get(i)
            .ok_or_else(|| Error::invalid(format!("review index {i} out of range")))?;
        w.write_record([r.image_id.as_str(), r.caption(kind), ""])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
