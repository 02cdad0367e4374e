use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::distill::{ClassGroup, ClassTaxonomy, BACKGROUND};

/// Pixel counts `counts[truth][pred]` over class ids `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_ids: usize) -> Self {
        ConfusionMatrix { n: n_ids, counts: vec![0; n_ids * n_ids] }
    }

    pub fn n_ids(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: &[u32], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(HarnessError::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.n || p >= self.n {
                return Err(HarnessError::UnknownClass(t.max(p) as u32));
            }
            self.counts[t * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: u32, pred: u32) -> u64 {
        self.counts[truth as usize * self.n + pred as usize]
    }

    /// `(tp, fp, fn)` of one class id.
    pub fn tp_fp_fn(&self, class: u32) -> (u64, u64, u64) {
        let c = class as usize;
        let tp = self.counts[c * self.n + c];
        let row: u64 = self.counts[c * self.n..(c + 1) * self.n].iter().sum();
        let col: u64 = (0..self.n).map(|t| self.counts[t * self.n + c]).sum();
        (tp, col - tp, row - tp)
    }

    pub fn support(&self, class: u32) -> u64 {
        let c = class as usize;
        self.counts[c * self.n..(c + 1) * self.n].iter().sum()
    }

    pub fn iou(&self, class: u32) -> Option<f64> {
        let (tp, fp, fne) = self.tp_fp_fn(class);
        let denom = tp + fp + fne;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let diag: u64 = (0..self.n).map(|c| self.counts[c * self.n + c]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

/// Mean IoU per class group; `None` when no member class occurs in the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupMiou {
    pub regular: Option<f64>,
    pub old: Option<f64>,
    pub new: Option<f64>,
    /// Every present class including background.
    pub all: Option<f64>,
}

impl GroupMiou {
    pub fn get(&self, group: ClassGroup) -> Option<f64> {
        match group {
            ClassGroup::Regular => self.regular,
            ClassGroup::Old => self.old,
            ClassGroup::New => self.new,
            ClassGroup::Background => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGroupMetrics {
    pub taxonomy: ClassTaxonomy,
    /// IoU of every class present in the ground truth.
    pub per_class_iou: BTreeMap<u32, f64>,
    pub group_miou: GroupMiou,
    pub pixel_accuracy: f64,
    pub per_dataset: BTreeMap<String, GroupMiou>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// IoU per present class and group means from a confusion matrix.
pub fn metrics_from_confusion(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy) -> (BTreeMap<u32, f64>, GroupMiou) {
    let mut per_class = BTreeMap::new();
    for c in 0..cm.n_ids() as u32 {
        if cm.support(c) > 0 {
            per_class.insert(c, cm.iou(c).expect("support implies a non-zero union"));
        }
    }
    let group = |g: ClassGroup| {
        let vals: Vec<f64> = taxonomy.members(g).iter().filter_map(|c| per_class.get(c).copied()).collect();
        mean(&vals)
    };
    let all: Vec<f64> = per_class.iter().filter(|(c, _)| **c == BACKGROUND || taxonomy.contains(**c)).map(|(_, v)| *v).collect();
    let gm = GroupMiou { regular: group(ClassGroup::Regular), old: group(ClassGroup::Old), new: group(ClassGroup::New), all: mean(&all) };
    (per_class, gm)
}

/// Scores predictions against ground truth, both as class-id maps, grouped
/// into named datasets. IoU is accumulated over every pixel of a dataset.
pub fn score(taxonomy: &ClassTaxonomy, datasets: &[(String, Vec<(Vec<u32>, Vec<u32>)>)]) -> Result<ClassGroupMetrics> {
    let n_ids = taxonomy.instrument_classes().last().map_or(1, |m| *m as usize + 1);
    let mut total = ConfusionMatrix::new(n_ids);
    let mut per_dataset = BTreeMap::new();
    for (name, pairs) in datasets {
        let mut cm = ConfusionMatrix::new(n_ids);
        for (truth, pred) in pairs {
            if let Some(&bad) = truth.iter().find(|&&c| c != BACKGROUND && !taxonomy.contains(c)) {
                return Err(HarnessError::UnknownClass(bad));
            }
            cm.add(truth, pred)?;
        }
        per_dataset.insert(name.clone(), metrics_from_confusion(&cm, taxonomy).1);
        total.merge(&cm);
    }
    let (per_class_iou, group_miou) = metrics_from_confusion(&total, taxonomy);
    Ok(ClassGroupMetrics { taxonomy: taxonomy.clone(), per_class_iou, group_miou, pixel_accuracy: total.pixel_accuracy(), per_dataset })
}

/// Retention of old classes and acquisition of new ones between two evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    /// Group mIoU after minus before.
    pub delta: GroupMiou,
    /// New-class mIoU after the update.
    pub plasticity: Option<f64>,
    /// Old-class mIoU after the update divided by before.
    pub rigidity: Option<f64>,
}

pub fn forgetting_summary(before: &ClassGroupMetrics, after: &ClassGroupMetrics) -> Result<ForgettingReport> {
    if before.taxonomy != after.taxonomy {
        return Err(HarnessError::TaxonomyMismatch);
    }
    let d = |a: Option<f64>, b: Option<f64>| Some(b? - a?);
    let (b, a) = (&before.group_miou, &after.group_miou);
    let rigidity = match (b.old, a.old) {
        (Some(x), Some(y)) if x > 0.0 => Some(y / x),
        _ => None,
    };
    Ok(ForgettingReport {
        delta: GroupMiou { regular: d(b.regular, a.regular), old: d(b.old, a.old), new: d(b.new, a.new), all: d(b.all, a.all) },
        plasticity: a.new,
        rigidity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tax() -> ClassTaxonomy {
        ClassTaxonomy::surgical()
    }

    #[test]
    fn perfect_prediction() {
        let truth = vec![0, 1, 4, 4, 8, 0];
        let m = score(&tax(), &[("a".into(), vec![(truth.clone(), truth)])]).unwrap();
        assert!(m.per_class_iou.values().all(|&v| v == 1.0));
        assert_eq!(m.per_class_iou.len(), 4);
        assert_eq!(m.group_miou.old, Some(1.0));
    }

    #[test]
    fn all_background_prediction() {
        let truth = vec![0, 3, 3, 0];
        let m = score(&tax(), &[("a".into(), vec![(truth, vec![0; 4])])]).unwrap();
        assert_eq!(m.per_class_iou[&3], 0.0);
        assert_eq!(m.per_class_iou[&0], 0.5);
        assert_eq!(m.group_miou.regular, Some(0.0));
        assert_eq!(m.group_miou.old, None);
    }

    #[test]
    fn two_two_two_is_one_third() {
        let truth = vec![3, 3, 3, 3, 0, 0];
        let pred = vec![3, 3, 0, 0, 3, 3];
        let m = score(&tax(), &[("a".into(), vec![(truth, pred)])]).unwrap();
        assert_eq!(m.per_class_iou[&3], 2.0 / 6.0);
    }

    #[test]
    fn rejects_foreign_ids() {
        assert!(matches!(score(&tax(), &[("a".into(), vec![(vec![12], vec![0])])]), Err(HarnessError::UnknownClass(12))));
    }

    #[test]
    fn per_dataset_breakdown() {
        let a = (vec![0, 4], vec![0, 4]);
        let b = (vec![0, 8], vec![0, 0]);
        let m = score(&tax(), &[("t0".into(), vec![a]), ("t1".into(), vec![b])]).unwrap();
        assert_eq!(m.per_dataset["t0"].old, Some(1.0));
        assert_eq!(m.per_dataset["t1"].new, Some(0.0));
        assert_eq!(m.per_class_iou[&0], 2.0 / 3.0);
    }

    #[test]
    fn forgetting_arithmetic() {
        let mk = |old: f64, new: Option<f64>| ClassGroupMetrics {
            taxonomy: tax(),
            per_class_iou: BTreeMap::new(),
            group_miou: GroupMiou { regular: Some(0.5), old: Some(old), new, all: Some(0.4) },
            pixel_accuracy: 0.9,
            per_dataset: BTreeMap::new(),
        };
        let same = forgetting_summary(&mk(0.3, Some(0.2)), &mk(0.3, Some(0.2))).unwrap();
        assert_eq!(same.delta, GroupMiou { regular: Some(0.0), old: Some(0.0), new: Some(0.0), all: Some(0.0) });
        let r = forgetting_summary(&mk(0.30, None), &mk(0.05, Some(0.1))).unwrap();
        assert!((r.delta.old.unwrap() + 0.25).abs() < 1e-15);
        assert_eq!(r.delta.new, None);
        assert_eq!(r.plasticity, Some(0.1));
        let mut other = mk(0.3, None);
        other.taxonomy = ClassTaxonomy::new(&[1], &[2], &[3]).unwrap();
        assert!(matches!(forgetting_summary(&mk(0.3, None), &other), Err(HarnessError::TaxonomyMismatch)));
    }
}
