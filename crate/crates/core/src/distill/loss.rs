use serde::{Deserialize, Serialize};

use super::embedding::{embedding_regions, ShiftSpec};
use super::taxonomy::TemperatureVector;
use super::{DistillError, Result};
use crate::tensor::{Tape, Var};

fn spatial(tape: &Tape, v: Var) -> Result<&[usize]> {
    let s = tape.value(v).shape();
    if s.len() != 3 {
        return Err(DistillError::Shape(format!("expected [k, h, w] logits, got {s:?}")));
    }
    Ok(s)
}

/// Shared body of the logit distillation losses.
///
/// `teacher_scale` divides the teacher and the first `k` student channels by
/// a scalar before the softmax; `temps` softens per channel inside the softmax.
fn softened_kd(tape: &mut Tape, teacher: Var, student: Var, k: usize, teacher_scale: Option<f64>, temps: Option<&[f64]>) -> Result<Var> {
    let ts = spatial(tape, teacher)?.to_vec();
    let ss = spatial(tape, student)?.to_vec();
    if ts[0] != k {
        return Err(DistillError::Shape(format!("teacher has {} channels, expected {k}", ts[0])));
    }
    if k > ss[0] {
        return Err(DistillError::TeacherClasses { k, n: ss[0] });
    }
    if ts[1..] != ss[1..] {
        return Err(DistillError::Shape(format!("spatial extents differ: {ts:?} vs {ss:?}")));
    }
    let mut t = teacher;
    let mut s = if ss[0] > k { tape.narrow(student, 0, k)? } else { student };
    if let Some(temp) = teacher_scale {
        t = tape.scale(t, 1.0 / temp)?;
        s = tape.scale(s, 1.0 / temp)?;
    }
    let p = tape.softmax(t, 0, temps)?;
    let log_q = tape.log_softmax(s, 0, temps)?;
    let prod = tape.mul(p, log_q)?;
    let total = tape.sum(prod)?;
    Ok(tape.scale(total, -1.0 / (ts[1] * ts[2]) as f64)?)
}

/// Pixel-averaged cross-entropy between temperature-1 teacher and student
/// distributions over the first `k` classes.
pub fn kd_logits_loss(tape: &mut Tape, teacher: Var, student: Var, k: usize) -> Result<Var> {
    softened_kd(tape, teacher, student, k, None, None)
}

/// Logit distillation with one scalar temperature applied to both models.
pub fn temperature_kd_loss(tape: &mut Tape, teacher: Var, student: Var, k: usize, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DistillError::Temperature(temperature));
    }
    softened_kd(tape, teacher, student, k, Some(temperature), None)
}

/// Class-aware temperature distillation. `teacher_classes` names the class id
/// behind each teacher channel and must be covered exactly by `tvec`.
pub fn cat_loss(tape: &mut Tape, teacher: Var, student: Var, tvec: &TemperatureVector, teacher_classes: &[u32]) -> Result<Var> {
    let temps = tvec.for_channels(teacher_classes)?;
    softened_kd(tape, teacher, student, teacher_classes.len(), None, Some(&temps))
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(DistillError::Shape(format!("feature shapes differ: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn feature_dims(tape: &Tape, v: Var) -> Result<[usize; 3]> {
    match *tape.value(v).shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(DistillError::Shape(format!("expected [c, h, w] features, got {s:?}"))),
    }
}

/// `||f_old - f_new||_2` divided by the element count.
pub fn feature_l2_loss(tape: &mut Tape, f_old: Var, f_new: Var) -> Result<Var> {
    same_shape(tape, f_old, f_new)?;
    let m = tape.value(f_old).len();
    let d = tape.sub(f_old, f_new)?;
    let n = tape.norm2(d)?;
    Ok(tape.scale(n, 1.0 / m as f64)?)
}

fn embedding_distance(tape: &mut Tape, f_old: Var, f_new: Var, scales: &[usize], shift: Option<&ShiftSpec>) -> Result<Var> {
    same_shape(tape, f_old, f_new)?;
    let regions = embedding_regions(feature_dims(tape, f_new)?, scales, shift)?;
    let e_new = tape.region_pool(f_new, &regions)?;
    let e_old = tape.region_pool(f_old, &regions)?;
    let d = tape.sub(e_new, e_old)?;
    Ok(tape.norm2(d)?)
}

/// Mean over layers of the multi-scale embedding distance.
pub fn local_pod_loss(tape: &mut Tape, features_old: &[Var], features_new: &[Var], scales: &[usize]) -> Result<Var> {
    if features_old.len() != features_new.len() {
        return Err(DistillError::LayerCount { old: features_old.len(), new: features_new.len() });
    }
    if features_old.is_empty() {
        return Err(DistillError::LayerCount { old: 0, new: 0 });
    }
    let mut acc: Option<Var> = None;
    for (&o, &n) in features_old.iter().zip(features_new) {
        let d = embedding_distance(tape, o, n, scales, None)?;
        acc = Some(match acc {
            None => d,
            Some(a) => tape.add(a, d)?,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / features_old.len() as f64)?)
}

/// Distance between multi-scale-plus-shifted embeddings of encoder features.
pub fn sd_loss(tape: &mut Tape, f_old: Var, f_new: Var, scales: &[usize], spec: &ShiftSpec) -> Result<Var> {
    embedding_distance(tape, f_old, f_new, scales, Some(spec))
}

/// Negative mean log-likelihood of per-pixel labels (channel indices).
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits, 0, None)?;
    let picked = tape.gather(ls, labels)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "LWF")]
    Lwf,
    #[serde(rename = "ILT")]
    Ilt,
    #[serde(rename = "LocalPOD")]
    LocalPod,
    #[serde(rename = "CATSD")]
    CatSd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ft, Method::Lwf, Method::Ilt, Method::LocalPod, Method::CatSd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::Lwf => "LWF",
            Method::Ilt => "ILT",
            Method::LocalPod => "LocalPOD",
            Method::CatSd => "CATSD",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// Whether the objective needs the previous model at all.
    pub fn uses_teacher(self) -> bool {
        self != Method::Ft
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub cat: f64,
    pub sd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, lambda: 1.0, cat: 1.0, sd: 1.0 }
    }
}

/// Distillation terms already recorded on the tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub kd_logits: Option<Var>,
    pub feature_l2: Option<Var>,
    pub local_pod: Option<Var>,
    pub cat: Option<Var>,
    pub sd: Option<Var>,
}

fn need(v: Option<Var>, name: &'static str) -> Result<Var> {
    v.ok_or(DistillError::MissingPart(name))
}

fn weighted(tape: &mut Tape, v: Var, w: f64) -> Result<Var> {
    Ok(tape.scale(v, w)?)
}

/// Composes the cross-entropy with the method's distillation terms.
pub fn total_loss(tape: &mut Tape, method: Method, ce: Var, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let extra = match method {
        Method::Ft => return Ok(ce),
        Method::Lwf => {
            let kd = need(parts.kd_logits, "kd_logits")?;
            weighted(tape, kd, w.alpha)?
        }
        Method::Ilt => {
            let kd = need(parts.kd_logits, "kd_logits")?;
            let fl = need(parts.feature_l2, "feature_l2")?;
            let fl = weighted(tape, fl, w.beta)?;
            let inner = tape.add(kd, fl)?;
            weighted(tape, inner, w.alpha)?
        }
        Method::LocalPod => {
            let lp = need(parts.local_pod, "local_pod")?;
            weighted(tape, lp, w.lambda)?
        }
        Method::CatSd => {
            let cat = need(parts.cat, "cat")?;
            let sd = need(parts.sd, "sd")?;
            let cat = weighted(tape, cat, w.cat)?;
            let sd = weighted(tape, sd, w.sd)?;
            tape.add(cat, sd)?
        }
    };
    Ok(tape.add(ce, extra)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval(f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vs).unwrap();
        t.value(r).item().unwrap()
    }

    #[test]
    fn kd_of_uniform_logits_is_log_two() {
        let z = Tensor::zeros(&[2, 3, 3]);
        let v = eval(|t, v| kd_logits_loss(t, v[0], v[1], 2), &[z.clone(), z]);
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kd_of_opposed_peaks_is_about_100() {
        let t = Tensor::new(vec![2, 1, 1], vec![100.0, 0.0]).unwrap();
        let s = Tensor::new(vec![2, 1, 1], vec![0.0, 100.0]).unwrap();
        let v = eval(|tp, v| kd_logits_loss(tp, v[0], v[1], 2), &[t, s]);
        assert!((v - 100.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn kd_rejects_bad_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 2, 2]));
        let b = t.constant(Tensor::zeros(&[2, 2, 2]));
        let c = t.constant(Tensor::zeros(&[3, 2, 3]));
        assert!(matches!(kd_logits_loss(&mut t, a, b, 3), Err(DistillError::TeacherClasses { k: 3, n: 2 })));
        assert!(matches!(kd_logits_loss(&mut t, a, c, 3), Err(DistillError::Shape(_))));
    }

    #[test]
    fn feature_l2_examples() {
        let a = Tensor::zeros(&[2, 2, 2]);
        let mut b = a.clone();
        b.data_mut()[5] = -0.4;
        assert_eq!(eval(|t, v| feature_l2_loss(t, v[0], v[0]), std::slice::from_ref(&a)), 0.0);
        assert!((eval(|t, v| feature_l2_loss(t, v[0], v[1]), &[a, b]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn sd_of_constant_offset() {
        let a = Tensor::new(vec![4, 8, 8], (0..256).map(|i| (i as f64).cos()).collect()).unwrap();
        let b = a.map(|x| x + 0.25);
        let spec = ShiftSpec::default();
        let v = eval(|t, v| sd_loss(t, v[0], v[1], &[2, 4], &spec), &[a, b]);
        let len = (2 + 4 + 3) * 4 * 16;
        assert!((v - 0.25 * (len as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn local_pod_checks_layers() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(matches!(local_pod_loss(&mut t, &[a], &[], &[1]), Err(DistillError::LayerCount { .. })));
        assert!(matches!(local_pod_loss(&mut t, &[], &[], &[1]), Err(DistillError::LayerCount { .. })));
        let z = local_pod_loss(&mut t, &[a, a], &[a, a], &[1, 2]).unwrap();
        assert_eq!(t.value(z).item().unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut t = Tape::new();
        let ce = t.constant(Tensor::scalar(1.0));
        let two = t.constant(Tensor::scalar(2.0));
        let three = t.constant(Tensor::scalar(3.0));
        let zero = t.constant(Tensor::scalar(0.0));
        let w = LossWeights::default();
        let parts = LossParts { cat: Some(two), sd: Some(three), ..Default::default() };
        let r = total_loss(&mut t, Method::CatSd, ce, &parts, &w).unwrap();
        assert_eq!(t.value(r).item().unwrap(), 6.0);
        let parts0 = LossParts { cat: Some(zero), sd: Some(zero), ..Default::default() };
        let r = total_loss(&mut t, Method::CatSd, ce, &parts0, &w).unwrap();
        assert_eq!(t.value(r).item().unwrap(), 1.0);
        let lwf0 = LossWeights { alpha: 0.0, ..w };
        let parts = LossParts { kd_logits: Some(three), ..Default::default() };
        let r = total_loss(&mut t, Method::Lwf, ce, &parts, &lwf0).unwrap();
        assert_eq!(t.value(r).item().unwrap(), 1.0);
        let parts = LossParts { kd_logits: Some(two), feature_l2: Some(three), ..Default::default() };
        let r = total_loss(&mut t, Method::Ilt, ce, &parts, &LossWeights { alpha: 0.5, beta: 2.0, ..w }).unwrap();
        assert_eq!(t.value(r).item().unwrap(), 5.0);
        let r = total_loss(&mut t, Method::Ft, ce, &LossParts::default(), &w).unwrap();
        assert_eq!(r, ce);
        assert!(matches!(total_loss(&mut t, Method::LocalPod, ce, &LossParts::default(), &w), Err(DistillError::MissingPart("local_pod"))));
        assert!(matches!(
            total_loss(&mut t, Method::CatSd, ce, &LossParts { cat: Some(two), ..Default::default() }, &w),
            Err(DistillError::MissingPart("sd"))
        ));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&j).unwrap(), m);
        }
        assert_eq!(Method::parse("catsd"), Some(Method::CatSd));
        assert_eq!(Method::parse("PLOP"), None);
    }

    #[test]
    fn cross_entropy_of_uniform() {
        let z = Tensor::zeros(&[4, 2, 2]);
        let v = eval(|t, v| cross_entropy(t, v[0], &[0, 1, 2, 3]), &[z]);
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }
}
