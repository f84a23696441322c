use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{TextEncoder, TextEncoderConfig, VisionEncoder, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MIN_TEMPERATURE: f64 = 0.01;
pub(crate) const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum TeacherStrategy {
    /// Teacher keeps its initial weights.
    Frozen,
    /// `teacher ← μ·teacher + (1−μ)·student` after every step.
    Ema { momentum: f64 },
    /// Teacher is the student.
    #[default]
    Online,
}


impl TeacherStrategy {
    /// Whether teacher features carry gradient into the student.
    pub fn teacher_gets_gradient(&self) -> bool {
        matches!(self, TeacherStrategy::Online)
    }
}

/// Student and teacher vision towers, the text tower and the learnable
/// temperature(s), stored as `logit_scale = ln(1/τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentBundle {
    pub student: VisionEncoder,
    teacher: Option<VisionEncoder>,
    pub text: TextEncoder,
    pub strategy: TeacherStrategy,
    pub text_frozen: bool,
    /// `logit_scale` and, when not shared, `logit_scale_loc`.
    pub scales: ParamSet,
}

impl TeacherStudentBundle {
    pub fn new(
        vision: VisionEncoderConfig,
        text: TextEncoderConfig,
        strategy: TeacherStrategy,
        text_frozen: bool,
        shared_temperature: bool,
    ) -> Result<Self> {
        if vision.embed_dim != text.embed_dim {
            return Err(Error::Config(format!(
                "vision embed dim {} != text embed dim {}",
                vision.embed_dim, text.embed_dim
            )));
        }
        if let TeacherStrategy::Ema { momentum } = strategy {
            if !(0.0..=1.0).contains(&momentum) {
                return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
            }
        }
        let student = VisionEncoder::new(vision)?;
        let teacher = match strategy {
            TeacherStrategy::Online => None,
            _ => Some(student.clone()),
        };
        let mut scales = ParamSet::new();
        let init = Array2::from_elem((1, 1), (1.0 / INIT_TEMPERATURE).ln());
        scales.insert("logit_scale", init.clone());
        if !shared_temperature {
            scales.insert("logit_scale_loc", init);
        }
        Ok(Self {
            student,
            teacher,
            text: TextEncoder::new(text)?,
            strategy,
            text_frozen,
            scales,
        })
    }

    pub(crate) fn from_parts(
        student: VisionEncoder,
        teacher: Option<VisionEncoder>,
        text: TextEncoder,
        strategy: TeacherStrategy,
        text_frozen: bool,
        scales: ParamSet,
    ) -> Self {
        Self {
            student,
            teacher,
            text,
            strategy,
            text_frozen,
            scales,
        }
    }

    /// Same weights under a new strategy; a non-online teacher restarts as a
    /// copy of the student.
    pub fn with_strategy(mut self, strategy: TeacherStrategy, text_frozen: bool) -> Result<Self> {
        if let TeacherStrategy::Ema { momentum } = strategy {
            if !(0.0..=1.0).contains(&momentum) {
                return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
            }
        }
        self.teacher = match strategy {
            TeacherStrategy::Online => None,
            _ => Some(self.student.clone()),
        };
        self.strategy = strategy;
        self.text_frozen = text_frozen;
        Ok(self)
    }

    pub fn teacher(&self) -> &VisionEncoder {
        self.teacher.as_ref().unwrap_or(&self.student)
    }

    /// `None` under the online strategy, where the teacher is the student.
    pub fn teacher_params(&self) -> Option<&ParamSet> {
        self.teacher.as_ref().map(|t| &t.params)
    }

    pub fn shared_temperature(&self) -> bool {
        self.scales.try_get("logit_scale_loc").is_none()
    }

    pub fn max_logit_scale() -> f64 {
        (1.0 / MIN_TEMPERATURE).ln()
    }

    fn tau_of(&self, name: &str) -> f64 {
        let s = self.scales.get(name)[[0, 0]].min(Self::max_logit_scale());
        (-s).exp()
    }

    /// Temperature of the global loss.
    pub fn temperature(&self) -> f64 {
        self.tau_of("logit_scale")
    }

    /// Temperature of the region loss.
    pub fn temperature_loc(&self) -> f64 {
        if self.shared_temperature() {
            self.temperature()
        } else {
            self.tau_of("logit_scale_loc")
        }
    }

    pub fn loc_scale_name(&self) -> &'static str {
        if self.shared_temperature() {
            "logit_scale"
        } else {
            "logit_scale_loc"
        }
    }

    /// Enforces `τ ≥ MIN_TEMPERATURE` after an optimizer step.
    pub fn clamp_temperature(&mut self) {
        let max = Self::max_logit_scale();
        for (_, t) in self.scales.iter_mut() {
            t.mapv_inplace(|v| v.min(max));
        }
    }

    /// Called once per optimizer step.
    pub fn update_teacher(&mut self) {
        if let (TeacherStrategy::Ema { momentum }, Some(t)) = (self.strategy, self.teacher.as_mut()) { t.params.blend_from(&self.student.params, momentum) }
    }
}
