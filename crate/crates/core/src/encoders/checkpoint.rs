//! Single-file archive of named `f64` arrays plus a JSON config block.
//!
//! Layout (little endian): magic `RSCK`, `u32` schema, `u64` JSON length,
//! JSON bytes, `u64` array count, then per array `u32` name length, name,
//! `u64` rows, `u64` cols, `rows·cols` `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde_json::{json, Value};

use super::{TeacherStrategy, TeacherStudentBundle, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MAGIC: &[u8; 4] = b"RSCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schema: u32,
    pub meta: Value,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated archive: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.schema.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut r: &[u8]) -> Result<Self> {
        if &take::<4>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let schema = u32::from_le_bytes(take(&mut r)?);
        if schema != CHECKPOINT_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "schema {schema} unsupported (expected {CHECKPOINT_SCHEMA})"
            )));
        }
        let meta_len = u64::from_le_bytes(take(&mut r)?) as usize;
        if meta_len > r.len() {
            return Err(Error::Checkpoint("truncated config block".into()));
        }
        let (meta, rest) = r.split_at(meta_len);
        let meta: Value = serde_json::from_slice(meta)?;
        r = rest;
        let count = u64::from_le_bytes(take(&mut r)?);
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            if len > r.len() {
                return Err(Error::Checkpoint("truncated name".into()));
            }
            let (name, rest) = r.split_at(len);
            let name = String::from_utf8(name.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            r = rest;
            let rows = u64::from_le_bytes(take(&mut r)?) as usize;
            let cols = u64::from_le_bytes(take(&mut r)?) as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.saturating_mul(8) <= r.len())
                .ok_or_else(|| Error::Checkpoint(format!("truncated array {name}")))?;
            let data: Vec<f64> = (0..n)
                .map(|_| take::<8>(&mut r).map(f64::from_le_bytes))
                .collect::<Result<_>>()?;
            let a = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            arrays.insert(name, a);
        }
        Ok(Self { schema, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bundle(bundle: &TeacherStudentBundle, extra: Value) -> Self {
        let mut arrays = BTreeMap::new();
        let mut put = |prefix: &str, set: &ParamSet| {
            for (k, v) in set.iter() {
                arrays.insert(format!("{prefix}{k}"), v.clone());
            }
        };
        put("student.", &bundle.student.params);
        if let Some(t) = bundle.teacher_params() {
            put("teacher.", t);
        }
        put("", &bundle.text.params);
        put("scales.", &bundle.scales);
        let meta = json!({
            "vision": bundle.student.config,
            "text": bundle.text.config,
            "strategy": bundle.strategy,
            "text_frozen": bundle.text_frozen,
            "extra": extra,
        });
        Self {
            schema: CHECKPOINT_SCHEMA,
            meta,
            arrays,
        }
    }

    pub fn to_bundle(&self) -> Result<TeacherStudentBundle> {
        let field = |k: &str| {
            self.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("config block missing {k:?}")))
        };
        let vision = serde_json::from_value(field("vision")?)?;
        let text = serde_json::from_value(field("text")?)?;
        let strategy: TeacherStrategy = serde_json::from_value(field("strategy")?)?;
        let text_frozen: bool = serde_json::from_value(field("text_frozen")?)?;

        let mut student = VisionEncoder::new(vision)?;
        let mut text = TextEncoder::new(text)?;
        let mut scales = ParamSet::new();
        fill(&mut student.params, &self.arrays, "student.")?;
        fill(&mut text.params, &self.arrays, "")?;
        for (k, v) in &self.arrays {
            if let Some(name) = k.strip_prefix("scales.") {
                scales.insert(name, v.clone());
            }
        }
        if scales.try_get("logit_scale").is_none() {
            return Err(Error::Checkpoint("missing scales.logit_scale".into()));
        }
        let teacher = match strategy {
            TeacherStrategy::Online => None,
            _ => {
                let mut t = student.clone();
                fill(&mut t.params, &self.arrays, "teacher.")?;
                Some(t)
            }
        };
        Ok(TeacherStudentBundle::from_parts(student, teacher, text, strategy, text_frozen, scales))
    }

    pub fn extra(&self) -> Option<&Value> {
        self.meta.get("extra")
    }
}

fn fill(params: &mut ParamSet, arrays: &BTreeMap<String, Array2<f64>>, prefix: &str) -> Result<()> {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let a = arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
        let slot = params.get_mut(&name).expect("name from the same set");
        if slot.dim() != a.dim() {
            return Err(Error::Checkpoint(format!(
                "{key}: shape {:?}, expected {:?}",
                a.dim(),
                slot.dim()
            )));
        }
        slot.assign(a);
    }
    Ok(())
}

/// Copies arrays from an external archive into `params` following
/// `mapping` (external name → internal name). Returns the number copied.
pub fn import_weights(
    params: &mut ParamSet,
    archive: &BTreeMap<String, Array2<f64>>,
    mapping: &BTreeMap<String, String>,
) -> Result<usize> {
    for (ext, int) in mapping {
        let src = archive
            .get(ext)
            .ok_or_else(|| Error::Checkpoint(format!("archive lacks {ext}")))?;
        let dst = params
            .get_mut(int)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {int}")))?;
        if dst.dim() != src.dim() {
            return Err(Error::Checkpoint(format!(
                "{ext} -> {int}: shape {:?} vs {:?}",
                src.dim(),
                dst.dim()
            )));
        }
        dst.assign(src);
    }
    Ok(mapping.len())
}
