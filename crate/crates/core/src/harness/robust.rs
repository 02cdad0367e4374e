use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, evaluate_with, perturb, ClassGroupMetrics, Corruption, Family, GroupMiou, PerturbationSpec, Result, TestSets};
use crate::distill::{ClassGroup, ClassTaxonomy};
use crate::segnet::ModelWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub corruption: Corruption,
    pub severity: u8,
    pub metrics: ClassGroupMetrics,
}

/// Family-level row: means over the family's evaluated corruptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub family: Family,
    pub severity: u8,
    pub group_miou: GroupMiou,
    pub old_class_iou: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean: ClassGroupMetrics,
    pub cells: Vec<RobustnessCell>,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// Old-group mIoU of a family at each severity, in row order.
    pub fn old_series(&self, family: Family) -> Vec<(u8, Option<f64>)> {
        self.rows.iter().filter(|r| r.family == family).map(|r| (r.severity, r.group_miou.old)).collect()
    }
}

fn stream(corruption: Corruption, severity: u8, set: usize, image: usize) -> u64 {
    let c = Corruption::ALL.iter().position(|&x| x == corruption).expect("listed") as u64;
    (c << 48) | ((severity as u64) << 40) | ((set as u64) << 32) | image as u64
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Evaluates `weights` on every corruption of `corruptions` at every severity.
/// Each image draws its noise from a stream keyed by corruption, severity,
/// test set and image index, so results do not depend on thread scheduling.
pub fn robustness_report(
    weights: &ModelWeights,
    test: &TestSets,
    taxonomy: &ClassTaxonomy,
    corruptions: &[Corruption],
    severities: &[u8],
    seed: u64,
) -> Result<RobustnessReport> {
    let clean = evaluate(weights, test, taxonomy)?;
    let mut cells = Vec::new();
    for &c in corruptions {
        for &s in severities {
            let spec = PerturbationSpec::new(c, s)?;
            let metrics = evaluate_with(weights, test, taxonomy, |set, i, img| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream(c, s, set, i));
                perturb(img, &spec, &mut rng)
            })?;
            cells.push(RobustnessCell { corruption: c, severity: s, metrics });
        }
    }
    let mut rows = Vec::new();
    for family in Family::ALL {
        for &s in severities {
            let members: Vec<&RobustnessCell> = cells.iter().filter(|x| x.corruption.family() == family && x.severity == s).collect();
            if members.is_empty() {
                continue;
            }
            let gm = |f: fn(&GroupMiou) -> Option<f64>| mean_opt(members.iter().map(|m| f(&m.metrics.group_miou)));
            let old_class_iou = taxonomy
                .members(ClassGroup::Old)
                .into_iter()
                .filter_map(|c| mean_opt(members.iter().map(|m| m.metrics.per_class_iou.get(&c).copied())).map(|v| (c, v)))
                .collect();
            rows.push(RobustnessRow {
                family,
                severity: s,
                group_miou: GroupMiou { regular: gm(|g| g.regular), old: gm(|g| g.old), new: gm(|g| g.new), all: gm(|g| g.all) },
                old_class_iou,
            });
        }
    }
    Ok(RobustnessReport { clean, cells, rows })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` if either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}
