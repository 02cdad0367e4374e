//! The fixed-seed toy experiment: 64x64 scenes, 200 training images per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{continual_train, evaluate, load_samples, load_test_sets, train_stage0, ClassGroupMetrics, ExperimentConfig, Result, TrainLog};
use crate::distill::{ClassGroup, ClassTaxonomy, Method};
use crate::segnet::ModelWeights;
use crate::synth::{synth_dataset, SynthConfig};

pub const TRAIN_IMAGES: usize = 200;
pub const TEST_IMAGES: usize = 60;
/// Seed of the reference run.
pub const REFERENCE_SEED: u64 = 0;
const TRAIN_TARGET: u32 = 60;
const TEST_TARGET: u32 = 20;

/// Names and generation settings of the four reference splits.
pub fn reference_splits(taxonomy: &ClassTaxonomy, seed: u64) -> Vec<(&'static str, SynthConfig)> {
    let t0: Vec<u32> = taxonomy.members(ClassGroup::Regular).into_iter().chain(taxonomy.members(ClassGroup::Old)).collect();
    let t1: Vec<u32> = taxonomy.members(ClassGroup::Regular).into_iter().chain(taxonomy.members(ClassGroup::New)).collect();
    let mk = |classes: &[u32], target, images, offset: u64, split: &str| SynthConfig {
        taxonomy: taxonomy.clone(),
        images: Some(images),
        ..SynthConfig::balanced(classes, target, seed.wrapping_mul(4).wrapping_add(offset), split)
    };
    vec![
        ("train_t0", mk(&t0, TRAIN_TARGET, TRAIN_IMAGES, 0, "train_t0")),
        ("train_t1", mk(&t1, TRAIN_TARGET, TRAIN_IMAGES, 1, "train_t1")),
        ("test_t0", mk(&t0, TEST_TARGET, TEST_IMAGES, 2, "test_t0")),
        ("test_t1", mk(&t1, TEST_TARGET, TEST_IMAGES, 3, "test_t1")),
    ]
}

/// Experiment settings of the reference run over datasets under `data_dir`.
pub fn reference_config(taxonomy: &ClassTaxonomy, method: Method, seed: u64, data_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        taxonomy: taxonomy.clone(),
        method,
        train_t0: Some(data_dir.join("train_t0")),
        train_t1: Some(data_dir.join("train_t1")),
        test: vec![data_dir.join("test_t0"), data_dir.join("test_t1")],
        seed,
        ..ExperimentConfig::default()
    }
}

/// Writes the reference splits to `data_dir/<name>` and returns their paths.
pub fn write_reference_data(taxonomy: &ClassTaxonomy, seed: u64, data_dir: &Path) -> Result<Vec<PathBuf>> {
    reference_splits(taxonomy, seed)
        .into_iter()
        .map(|(name, cfg)| {
            let dir = data_dir.join(name);
            synth_dataset(&cfg, &dir)?;
            Ok(dir)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub metrics: ClassGroupMetrics,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct ReferenceOutcome {
    pub teacher: ModelWeights,
    pub teacher_metrics: ClassGroupMetrics,
    pub teacher_log: TrainLog,
    pub students: Vec<(ModelWeights, MethodOutcome)>,
}

/// Trains the teacher once and every method in `methods` from it, evaluating
/// all models on the combined test splits.
pub fn run_reference(config: &ExperimentConfig, methods: &[Method]) -> Result<ReferenceOutcome> {
    let missing = |what: &str| super::HarnessError::MissingInput(format!("{what} manifest not configured"));
    let (_, t0) = load_samples(config.train_t0.as_deref().ok_or_else(|| missing("train_t0"))?)?;
    let (_, t1) = load_samples(config.train_t1.as_deref().ok_or_else(|| missing("train_t1"))?)?;
    let test = load_test_sets(&config.test)?;
    let validation = match &config.validation {
        Some(p) => Some(load_test_sets(std::slice::from_ref(p))?),
        None => None,
    };
    let (teacher, teacher_log) = train_stage0(config, &t0, validation.as_ref())?;
    let teacher_metrics = evaluate(&teacher, &test, &config.taxonomy)?;
    let mut students = Vec::new();
    for &method in methods {
        let cfg = ExperimentConfig { method, ..config.clone() };
        let (w, log) = continual_train(&teacher, &cfg, &t1, validation.as_ref())?;
        let metrics = evaluate(&w, &test, &config.taxonomy)?;
        students.push((w, MethodOutcome { method, metrics, log }));
    }
    Ok(ReferenceOutcome { teacher, teacher_metrics, teacher_log, students })
}
