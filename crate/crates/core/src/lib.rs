//! Continual semantic segmentation laboratory.
//!
//! The crate trains a small encoder/decoder segmentation network on
//! procedurally synthesized surgical-instrument scenes in two stages, and
//! measures how much of the first stage survives the second under several
//! distillation schemes:
//!
//! * [`tensor`]: `f64` tensors with a reverse-mode gradient tape.
//! * [`segnet`]: the toy segmentation network and its weight file format.
//! * [`distill`]: logit, temperature, class-aware temperature, pooled and
//!   shifted-feature distillation losses.
//! * [`synth`]: asset generation, augmentation, blending, harmonization and
//!   dataset assembly.
//! * [`harness`]: two-stage training, metrics, corruption robustness.
//! * [`cli`]: the `catsd` command-line front end.

pub mod cli;
pub mod distill;
pub mod harness;
pub mod segnet;
pub mod synth;
pub mod tensor;
