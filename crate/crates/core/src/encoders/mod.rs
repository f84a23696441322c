//! Toy CLIP-style towers: a patch/CLS vision transformer, a causal text
//! transformer, the residual-free final-block attention used for dense
//! features, and the teacher-student bundle.

mod bundle;
mod checkpoint;
mod posemb;
mod text;
mod transformer;
mod vision;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

pub use bundle::{TeacherStrategy, TeacherStudentBundle, MIN_TEMPERATURE};
pub use checkpoint::{import_weights, Checkpoint, CHECKPOINT_SCHEMA};
pub use posemb::{extend_positional_embeddings, KEEP_ROWS, STRETCH};
pub use text::{TextEncoder, TextEncoderConfig, Tokenizer, Tokens, EOT, SOT};
pub use transformer::{custom_attention, CustAttnTrace};
pub use vision::{VisionEncoder, VisionEncoderConfig};

/// h x w grid of d-dimensional features, rows stored in row-major cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != h * w {
            return Err(Error::Shape(format!("{} rows for a {h}x{w} grid", data.nrows())));
        }
        Ok(Self { h, w, data })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn cell(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.data.row(y * self.w + x)
    }

    pub fn mean(&self) -> Array1<f64> {
        self.data.mean_axis(ndarray::Axis(0)).expect("non-empty grid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub cls: Array1<f64>,
    pub patches: PatchGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    pub cls: Array1<f64>,
    /// The input exceeded the context length and was cut.
    pub truncated: bool,
}

/// Cosine similarity. Zero vectors are an error.
pub fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("similarity of {} and {} dims", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("similarity".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}
