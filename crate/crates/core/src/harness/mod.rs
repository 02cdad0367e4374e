//! Two-stage continual-learning experiments: training, class-group metrics,
//! forgetting summaries and corruption sweeps.

mod metrics;
mod perturb;
pub mod reference;
mod robust;
mod train;

pub use metrics::{forgetting_summary, metrics_from_confusion, score, ClassGroupMetrics, ConfusionMatrix, ForgettingReport, GroupMiou};
pub use perturb::{perturb, Corruption, Family, PerturbationSpec, SEVERITIES};
pub use robust::{robustness_report, spearman, RobustnessCell, RobustnessReport, RobustnessRow};
pub use train::{continual_train, train_stage0, StepLog, TrainLog};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{cat_vector, ClassTaxonomy, LossWeights, Method, ShiftSpec, TemperatureVector, BACKGROUND};
use crate::segnet::{predict, ModelWeights};
use crate::synth::DatasetManifest;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("class id {0} is outside the taxonomy")]
    UnknownClass(u32),
    #[error("metrics were computed under different taxonomies")]
    TaxonomyMismatch,
    #[error("severity {0} is outside 1..=5")]
    Severity(u8),
    #[error("training data violates the stage's class set: {0}")]
    StageClasses(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("hyperparameters: {0}")]
    Hyperparameter(String),
    #[error(transparent)]
    Distill(#[from] crate::distill::DistillError),
    #[error(transparent)]
    Segnet(#[from] crate::segnet::SegnetError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Distillation hyperparameters shared by the continual methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSettings {
    /// Temperature of old classes.
    pub t_old: f64,
    /// Temperature of regular classes and background.
    pub t_regular: f64,
    /// Grid scales of the shifted embedding.
    pub sd_scales: Vec<usize>,
    pub shift: ShiftSpec,
    /// Grid scales of the per-layer pooled embedding.
    pub local_pod_scales: Vec<usize>,
    /// Loss weights. The SD weight defaults to 0.01: the unsquared embedding
    /// norm has a constant-magnitude gradient that, through this encoder, is
    /// a few hundred times larger than the cross-entropy gradient.
    pub weights: LossWeights,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            t_old: 3.0,
            t_regular: 4.0,
            sd_scales: vec![2, 4],
            shift: ShiftSpec::default(),
            local_pod_scales: vec![1, 2, 4],
            weights: LossWeights { sd: 0.01, ..LossWeights::default() },
        }
    }
}

impl DistillSettings {
    pub fn temperatures(&self, taxonomy: &ClassTaxonomy) -> Result<TemperatureVector> {
        Ok(cat_vector(taxonomy, self.t_old, self.t_regular)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub taxonomy: ClassTaxonomy,
    pub method: Method,
    pub train_t0: Option<PathBuf>,
    pub train_t1: Option<PathBuf>,
    pub test: Vec<PathBuf>,
    /// When set, each stage keeps the epoch with the best all-class mIoU here
    /// instead of the final epoch.
    pub validation: Option<PathBuf>,
    pub lr_t0: f64,
    pub lr_t1: f64,
    pub epochs_t0: usize,
    pub epochs_t1: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub distill: DistillSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            taxonomy: ClassTaxonomy::surgical(),
            method: Method::CatSd,
            train_t0: None,
            train_t1: None,
            test: Vec::new(),
            validation: None,
            lr_t0: 0.01,
            lr_t1: 0.001,
            epochs_t0: 10,
            epochs_t1: 10,
            batch_size: 1,
            momentum: 0.9,
            seed: 0,
            distill: DistillSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checks optimizer settings and the hyperparameters the method needs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Hyperparameter(m));
        for (name, lr) in [("lr_t0", self.lr_t0), ("lr_t1", self.lr_t1)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} = {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        let d = &self.distill;
        let w = &d.weights;
        let finite = |name: &str, v: f64| if v.is_finite() && v >= 0.0 { Ok(()) } else { bad(format!("{name} = {v}")) };
        match self.method {
            Method::Ft => {}
            Method::Lwf => finite("alpha", w.alpha)?,
            Method::Ilt => {
                finite("alpha", w.alpha)?;
                finite("beta", w.beta)?;
            }
            Method::LocalPod => {
                finite("lambda", w.lambda)?;
                if d.local_pod_scales.is_empty() || d.local_pod_scales.contains(&0) {
                    return bad(format!("local_pod_scales {:?}", d.local_pod_scales));
                }
            }
            Method::CatSd => {
                finite("cat", w.cat)?;
                finite("sd", w.sd)?;
                if d.sd_scales.contains(&0) {
                    return bad(format!("sd_scales {:?}", d.sd_scales));
                }
                d.temperatures(&self.taxonomy).map_err(|e| HarnessError::Hyperparameter(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// An image with its row-major class-id mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: Vec<u32>,
}

/// Reads every sample of a dataset directory (or manifest path).
pub fn load_samples(path: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    if !path.exists() {
        return Err(HarnessError::MissingInput(path.display().to_string()));
    }
    let manifest = DatasetManifest::load(path)?;
    let samples = (0..manifest.len())
        .into_par_iter()
        .map(|i| manifest.load_sample(i).map(|(image, labels)| Sample { image, labels }))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((manifest, samples))
}

/// Test splits keyed by name, in the given order.
pub type TestSets = Vec<(String, Vec<Sample>)>;

pub fn load_test_sets(paths: &[PathBuf]) -> Result<TestSets> {
    let mut out: TestSets = Vec::new();
    for p in paths {
        let (m, s) = load_samples(p)?;
        let mut name = m.split.clone();
        let mut k = 1;
        while out.iter().any(|(n, _)| *n == name) {
            k += 1;
            name = format!("{}#{k}", m.split);
        }
        out.push((name, s));
    }
    Ok(out)
}

/// Dataset-level IoU of `weights` on every test set.
pub fn evaluate(weights: &ModelWeights, test: &TestSets, taxonomy: &ClassTaxonomy) -> Result<ClassGroupMetrics> {
    evaluate_with(weights, test, taxonomy, |_, _, img| Ok(img.clone()))
}

/// Like [`evaluate`] with every image passed through `transform(set, index, image)` first.
pub(crate) fn evaluate_with<F>(weights: &ModelWeights, test: &TestSets, taxonomy: &ClassTaxonomy, transform: F) -> Result<ClassGroupMetrics>
where
    F: Fn(usize, usize, &Tensor) -> Result<Tensor> + Sync,
{
    for (_, set) in test {
        for s in set {
            if let Some(&bad) = s.labels.iter().find(|&&c| c != BACKGROUND && !taxonomy.contains(c)) {
                return Err(HarnessError::UnknownClass(bad));
            }
        }
    }
    let mut scored = Vec::with_capacity(test.len());
    for (k, (name, set)) in test.iter().enumerate() {
        let pairs = set
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let img = transform(k, i, &s.image)?;
                Ok((s.labels.clone(), predict(weights, &img)?))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.push((name.clone(), pairs));
    }
    score(taxonomy, &scored)
}

/// One robustness cell as reported in the metrics JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub family: Family,
    pub severity: u8,
    pub group_miou: GroupMiou,
}

/// Metrics report written by the evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Option<Method>,
    pub seed: u64,
    pub per_class_iou: BTreeMap<u32, f64>,
    pub group_miou: GroupMiou,
    pub per_dataset: BTreeMap<String, GroupMiou>,
    pub robustness: Vec<RobustnessSummary>,
}

impl MetricsReport {
    pub fn new(method: Option<Method>, seed: u64, m: &ClassGroupMetrics) -> Self {
        MetricsReport {
            method,
            seed,
            per_class_iou: m.per_class_iou.clone(),
            group_miou: m.group_miou,
            per_dataset: m.per_dataset.clone(),
            robustness: Vec::new(),
        }
    }
}
