//! Distillation losses and pooled-feature embeddings.
//!
//! Losses are recorded on a [`Tape`](crate::tensor::Tape) so they can be
//! differentiated; [`plain`] evaluates the same functions on tensors.

mod embedding;
mod loss;
mod taxonomy;

pub use embedding::{
    embedding_len, embedding_regions, msshift_embedding, multiscale_embedding, pod_embedding, scale_regions, shift_regions,
    shifted_embedding, PodEmbedding, ShiftSpec,
};
pub use loss::{
    cat_loss, cross_entropy, feature_l2_loss, kd_logits_loss, local_pod_loss, sd_loss, temperature_kd_loss, total_loss, LossParts,
    LossWeights, Method,
};
pub use taxonomy::{cat_vector, class_name, ClassGroup, ClassTaxonomy, TemperatureVector, BACKGROUND};

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistillError {
    #[error("class {0} appears in more than one group")]
    Overlap(u32),
    #[error("background class 0 cannot be listed in a group")]
    BackgroundInGroup,
    #[error("temperature {0} must be positive and finite")]
    Temperature(f64),
    #[error("regular temperature {t_regular} must exceed old temperature {t_old}")]
    TemperatureOrder { t_old: f64, t_regular: f64 },
    #[error("temperatures cover {covered:?} but the teacher predicts {required:?}")]
    Coverage { covered: Vec<u32>, required: Vec<u32> },
    #[error("{0}")]
    Shape(String),
    #[error("teacher has {k} classes but the student only {n}")]
    TeacherClasses { k: usize, n: usize },
    #[error("scale {scale} does not divide {h}x{w}")]
    Scale { scale: usize, h: usize, w: usize },
    #[error("shift spec: {0}")]
    ShiftSpec(String),
    #[error("layer lists differ or are empty: {old} old vs {new} new")]
    LayerCount { old: usize, new: usize },
    #[error("method needs the {0} term")]
    MissingPart(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// The losses evaluated directly on tensors.
pub mod plain {
    use super::{Result, ShiftSpec, TemperatureVector};
    use crate::tensor::{Tape, Tensor, Var};

    fn run(inputs: &[&Tensor], f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()?)
    }

    pub fn kd_logits_loss(teacher: &Tensor, student: &Tensor, k: usize) -> Result<f64> {
        run(&[teacher, student], |t, v| super::kd_logits_loss(t, v[0], v[1], k))
    }

    pub fn temperature_kd_loss(teacher: &Tensor, student: &Tensor, k: usize, temperature: f64) -> Result<f64> {
        run(&[teacher, student], |t, v| super::temperature_kd_loss(t, v[0], v[1], k, temperature))
    }

    pub fn cat_loss(teacher: &Tensor, student: &Tensor, tvec: &TemperatureVector, teacher_classes: &[u32]) -> Result<f64> {
        run(&[teacher, student], |t, v| super::cat_loss(t, v[0], v[1], tvec, teacher_classes))
    }

    pub fn feature_l2_loss(f_old: &Tensor, f_new: &Tensor) -> Result<f64> {
        run(&[f_old, f_new], |t, v| super::feature_l2_loss(t, v[0], v[1]))
    }

    pub fn local_pod_loss(features_old: &[Tensor], features_new: &[Tensor], scales: &[usize]) -> Result<f64> {
        let all: Vec<&Tensor> = features_old.iter().chain(features_new).collect();
        let l = features_old.len();
        run(&all, |t, v| super::local_pod_loss(t, &v[..l], &v[l..], scales))
    }

    pub fn sd_loss(f_old: &Tensor, f_new: &Tensor, scales: &[usize], spec: &ShiftSpec) -> Result<f64> {
        run(&[f_old, f_new], |t, v| super::sd_loss(t, v[0], v[1], scales, spec))
    }
}
