use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{DistillError, Result};

pub const BACKGROUND: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGroup {
    Background,
    Regular,
    Old,
    New,
}

/// Partition of instrument class ids into regular (seen at both time points),
/// old (first time point only) and new (second time point only). Class 0 is
/// background and belongs to no instrument group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyDoc", into = "TaxonomyDoc")]
pub struct ClassTaxonomy {
    regular: BTreeSet<u32>,
    old: BTreeSet<u32>,
    new: BTreeSet<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyDoc {
    regular: Vec<u32>,
    old: Vec<u32>,
    new: Vec<u32>,
}

impl TryFrom<TaxonomyDoc> for ClassTaxonomy {
    type Error = DistillError;
    fn try_from(d: TaxonomyDoc) -> Result<Self> {
        ClassTaxonomy::new(&d.regular, &d.old, &d.new)
    }
}

impl From<ClassTaxonomy> for TaxonomyDoc {
    fn from(t: ClassTaxonomy) -> Self {
        TaxonomyDoc { regular: t.regular.into_iter().collect(), old: t.old.into_iter().collect(), new: t.new.into_iter().collect() }
    }
}

impl ClassTaxonomy {
    pub fn new(regular: &[u32], old: &[u32], new: &[u32]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &c in regular.iter().chain(old).chain(new) {
            if c == BACKGROUND {
                return Err(DistillError::BackgroundInGroup);
            }
            if !seen.insert(c) {
                return Err(DistillError::Overlap(c));
            }
        }
        Ok(ClassTaxonomy {
            regular: regular.iter().copied().collect(),
            old: old.iter().copied().collect(),
            new: new.iter().copied().collect(),
        })
    }

    /// Nine surgical instruments: five shared, two only in the first
    /// dataset, two only in the second.
    pub fn surgical() -> Self {
        ClassTaxonomy::new(&[1, 2, 3, 6, 7], &[4, 5], &[8, 9]).expect("disjoint")
    }

    pub fn regular(&self) -> &BTreeSet<u32> {
        &self.regular
    }

    pub fn old(&self) -> &BTreeSet<u32> {
        &self.old
    }

    pub fn new_classes(&self) -> &BTreeSet<u32> {
        &self.new
    }

    pub fn group(&self, class: u32) -> Option<ClassGroup> {
        if class == BACKGROUND {
            Some(ClassGroup::Background)
        } else if self.regular.contains(&class) {
            Some(ClassGroup::Regular)
        } else if self.old.contains(&class) {
            Some(ClassGroup::Old)
        } else if self.new.contains(&class) {
            Some(ClassGroup::New)
        } else {
            None
        }
    }

    pub fn members(&self, group: ClassGroup) -> Vec<u32> {
        match group {
            ClassGroup::Background => vec![BACKGROUND],
            ClassGroup::Regular => self.regular.iter().copied().collect(),
            ClassGroup::Old => self.old.iter().copied().collect(),
            ClassGroup::New => self.new.iter().copied().collect(),
        }
    }

    /// Class list of the first-stage model: background, then regular and old ids ascending.
    pub fn old_model_classes(&self) -> Vec<u32> {
        let mut rest: Vec<u32> = self.regular.union(&self.old).copied().collect();
        rest.sort_unstable();
        std::iter::once(BACKGROUND).chain(rest).collect()
    }

    /// Class list of the continual model: the old-model list followed by new ids.
    pub fn continual_classes(&self) -> Vec<u32> {
        let mut all = self.old_model_classes();
        all.extend(self.new.iter().copied());
        all
    }

    /// Every instrument class id, ascending.
    pub fn instrument_classes(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self.regular.iter().chain(&self.old).chain(&self.new).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn contains(&self, class: u32) -> bool {
        self.group(class).is_some()
    }
}

/// Display name for the ids used by [`ClassTaxonomy::surgical`].
pub fn class_name(class: u32) -> String {
    match class {
        0 => "background",
        1 => "bipolar forceps",
        2 => "prograsp forceps",
        3 => "large needle driver",
        4 => "vessel sealer",
        5 => "grasping retractor",
        6 => "monopolar curved scissors",
        7 => "ultrasound probe",
        8 => "suction instrument",
        9 => "clip applier",
        _ => return format!("class {class}"),
    }
    .to_string()
}

/// Per-class distillation temperature over the first-stage model's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureVector {
    classes: Vec<u32>,
    temps: Vec<f64>,
}

impl TemperatureVector {
    pub fn uniform(classes: &[u32], t: f64) -> Result<Self> {
        Self::from_entries(classes.iter().map(|&c| (c, t)).collect())
    }

    pub fn from_entries(entries: Vec<(u32, f64)>) -> Result<Self> {
        if let Some(&(_, t)) = entries.iter().find(|(_, t)| !(*t > 0.0 && t.is_finite())) {
            return Err(DistillError::Temperature(t));
        }
        let (classes, temps) = entries.into_iter().unzip();
        Ok(TemperatureVector { classes, temps })
    }

    pub fn get(&self, class: u32) -> Option<f64> {
        self.classes.iter().position(|&c| c == class).map(|i| self.temps[i])
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Temperatures aligned with the output channels of a model predicting
    /// `class_list`. The vector must cover exactly that class set.
    pub fn for_channels(&self, class_list: &[u32]) -> Result<Vec<f64>> {
        let mine: BTreeSet<u32> = self.classes.iter().copied().collect();
        let theirs: BTreeSet<u32> = class_list.iter().copied().collect();
        if mine != theirs || theirs.len() != class_list.len() {
            return Err(DistillError::Coverage { covered: self.classes.clone(), required: class_list.to_vec() });
        }
        Ok(class_list.iter().map(|&c| self.get(c).expect("covered")).collect())
    }
}

/// Class-aware temperatures: old classes get `t_old`, background and regular
/// classes get `t_regular`. Distinct values must satisfy `t_regular > t_old`.
pub fn cat_vector(taxonomy: &ClassTaxonomy, t_old: f64, t_regular: f64) -> Result<TemperatureVector> {
    for t in [t_old, t_regular] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(DistillError::Temperature(t));
        }
    }
    if t_old != t_regular && t_regular < t_old {
        return Err(DistillError::TemperatureOrder { t_old, t_regular });
    }
    TemperatureVector::from_entries(
        taxonomy.old_model_classes().into_iter().map(|c| (c, if taxonomy.old.contains(&c) { t_old } else { t_regular })).collect(),
    )
}
