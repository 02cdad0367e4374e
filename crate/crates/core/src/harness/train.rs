use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, ExperimentConfig, HarnessError, Result, Sample, TestSets};
use crate::distill::{
    cat_loss, cross_entropy, feature_l2_loss, kd_logits_loss, local_pod_loss, sd_loss, total_loss, ClassGroup, LossParts, Method,
    TemperatureVector,
};
use crate::segnet::{expand_classifier, forward, forward_on_tape, sgd_step, ForwardResult, ModelGrads, ModelWeights, ParamVars};
use crate::tensor::{Tape, Var};

/// Batch means of every loss term at one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub kd_logits: Option<f64>,
    pub feature_l2: Option<f64>,
    pub local_pod: Option<f64>,
    pub cat: Option<f64>,
    pub sd: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Epoch whose weights were returned; `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
}

struct Schedule {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
}

#[derive(Default, Clone, Copy)]
struct Terms {
    ce: f64,
    kd_logits: Option<f64>,
    feature_l2: Option<f64>,
    local_pod: Option<f64>,
    cat: Option<f64>,
    sd: Option<f64>,
    total: f64,
}

fn channel_labels(weights: &ModelWeights, labels: &[u32]) -> Result<Vec<usize>> {
    labels.iter().map(|&c| weights.channel_of(c).ok_or(HarnessError::UnknownClass(c))).collect()
}

/// Mini-batch SGD with heavy-ball momentum (`v <- mu v + g`, `w <- w - lr v`).
/// Per-image gradients are computed in parallel and summed in batch order.
fn run<F>(
    init: ModelWeights,
    data: &[Sample],
    sched: &Schedule,
    validation: Option<(&TestSets, &crate::distill::ClassTaxonomy)>,
    loss: F,
) -> Result<(ModelWeights, TrainLog)>
where
    F: Fn(&mut Tape, &ParamVars, usize) -> Result<(Var, Terms)> + Sync,
{
    let mut weights = init;
    let mut log = TrainLog::default();
    let mut velocity: Option<ModelGrads> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best: Option<(f64, ModelWeights)> = None;
    let mut step = 0;
    for epoch in 0..sched.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(sched.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let params = ParamVars::register(&mut tape, &weights, true);
                    let (total, terms) = loss(&mut tape, &params, i)?;
                    let grads = tape.backward(total)?;
                    Ok((params.gradients(&weights, &grads)?, terms))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = results.len() as f64;
            let mut sum: Option<ModelGrads> = None;
            let mut mean = Terms::default();
            let avg = |acc: Option<f64>, v: Option<f64>| v.map(|v| acc.unwrap_or(0.0) + v / n);
            for (g, t) in &results {
                match sum.as_mut() {
                    Some(s) => s.add_assign(g),
                    None => sum = Some(g.clone()),
                }
                mean.ce += t.ce / n;
                mean.total += t.total / n;
                mean.kd_logits = avg(mean.kd_logits, t.kd_logits);
                mean.feature_l2 = avg(mean.feature_l2, t.feature_l2);
                mean.local_pod = avg(mean.local_pod, t.local_pod);
                mean.cat = avg(mean.cat, t.cat);
                mean.sd = avg(mean.sd, t.sd);
            }
            let mut g = sum.expect("non-empty batch");
            g.scale(1.0 / n);
            let v = match velocity.take() {
                Some(mut v) => {
                    v.scale(sched.momentum);
                    v.add_assign(&g);
                    v
                }
                None => g,
            };
            weights = sgd_step(&weights, &v, sched.lr)?;
            velocity = Some(v);
            log.steps.push(StepLog {
                epoch,
                step,
                ce: mean.ce,
                kd_logits: mean.kd_logits,
                feature_l2: mean.feature_l2,
                local_pod: mean.local_pod,
                cat: mean.cat,
                sd: mean.sd,
                total: mean.total,
            });
            step += 1;
        }
        match validation {
            Some((val, taxonomy)) => {
                let score = evaluate(&weights, val, taxonomy)?.group_miou.all.unwrap_or(0.0);
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, weights.clone()));
                    log.selected_epoch = Some(epoch);
                }
            }
            None => log.selected_epoch = Some(epoch),
        }
    }
    if let Some((_, w)) = best {
        return Ok((w, log));
    }
    Ok((weights, log))
}

fn check_stage(data: &[Sample], forbidden: &[u32], stage: &str) -> Result<()> {
    for (i, s) in data.iter().enumerate() {
        if let Some(c) = s.labels.iter().find(|c| forbidden.contains(c)) {
            return Err(HarnessError::StageClasses(format!("{stage} sample {i} contains class {c}")));
        }
    }
    Ok(())
}

/// Trains a fresh model on background, regular and old classes with plain
/// cross-entropy. Weights are initialised from `config.seed`.
pub fn train_stage0(config: &ExperimentConfig, data: &[Sample], validation: Option<&TestSets>) -> Result<(ModelWeights, TrainLog)> {
    config.validate()?;
    let tax = &config.taxonomy;
    check_stage(data, &tax.members(ClassGroup::New), "t=0")?;
    let init = ModelWeights::init(config.seed, &tax.old_model_classes())?;
    let labels: Vec<Vec<usize>> = data.iter().map(|s| channel_labels(&init, &s.labels)).collect::<Result<_>>()?;
    let sched = Schedule {
        epochs: config.epochs_t0,
        batch_size: config.batch_size,
        lr: config.lr_t0,
        momentum: config.momentum,
        seed: config.seed,
    };
    run(init, data, &sched, validation.map(|v| (v, tax)), |tape, params, i| {
        let img = tape.constant(data[i].image.clone());
        let out = forward_on_tape(tape, params, img)?;
        let ce = cross_entropy(tape, out.logits, &labels[i])?;
        let v = tape.value(ce).item()?;
        Ok((ce, Terms { ce: v, total: v, ..Terms::default() }))
    })
}

/// Seed offset separating the new-classifier initialisation from stage-0 weights.
const EXPAND_SEED: u64 = 0x5eed_0001;

/// Fine-tunes `expand_classifier(teacher, new classes)` on t=1 data with the
/// configured method. The teacher is only read.
pub fn continual_train(
    teacher: &ModelWeights,
    config: &ExperimentConfig,
    data: &[Sample],
    validation: Option<&TestSets>,
) -> Result<(ModelWeights, TrainLog)> {
    config.validate()?;
    let tax = &config.taxonomy;
    if teacher.class_list != tax.old_model_classes() {
        return Err(HarnessError::Hyperparameter(format!(
            "teacher classes {:?} differ from the taxonomy's old-model classes {:?}",
            teacher.class_list,
            tax.old_model_classes()
        )));
    }
    check_stage(data, &tax.members(ClassGroup::Old), "t=1")?;
    let student = expand_classifier(teacher, &tax.members(ClassGroup::New), config.seed ^ EXPAND_SEED)?;
    let labels: Vec<Vec<usize>> = data.iter().map(|s| channel_labels(&student, &s.labels)).collect::<Result<_>>()?;
    let method = config.method;
    let d = &config.distill;
    let tvec: Option<TemperatureVector> = if method == Method::CatSd { Some(d.temperatures(tax)?) } else { None };
    let teacher_out: Vec<Option<ForwardResult>> = if method.uses_teacher() {
        data.par_iter().map(|s| forward(teacher, &s.image).map(Some)).collect::<std::result::Result<_, _>>()?
    } else {
        vec![None; data.len()]
    };
    let k = teacher.n_classes();
    let sched = Schedule {
        epochs: config.epochs_t1,
        batch_size: config.batch_size,
        lr: config.lr_t1,
        momentum: config.momentum,
        seed: config.seed,
    };
    run(student, data, &sched, validation.map(|v| (v, tax)), |tape, params, i| {
        let img = tape.constant(data[i].image.clone());
        let out = forward_on_tape(tape, params, img)?;
        let ce = cross_entropy(tape, out.logits, &labels[i])?;
        let mut parts = LossParts::default();
        if let Some(t) = &teacher_out[i] {
            match method {
                Method::Ft => {}
                Method::Lwf | Method::Ilt => {
                    let tl = tape.constant(t.logits.clone());
                    parts.kd_logits = Some(kd_logits_loss(tape, tl, out.logits, k)?);
                    if method == Method::Ilt {
                        let tf = tape.constant(t.features.clone());
                        parts.feature_l2 = Some(feature_l2_loss(tape, tf, out.features)?);
                    }
                }
                Method::LocalPod => {
                    let tb: Vec<Var> = t.block_features.iter().map(|b| tape.constant(b.clone())).collect();
                    parts.local_pod = Some(local_pod_loss(tape, &tb, &out.block_features, &d.local_pod_scales)?);
                }
                Method::CatSd => {
                    let tl = tape.constant(t.logits.clone());
                    let tvec = tvec.as_ref().expect("built for CATSD");
                    parts.cat = Some(cat_loss(tape, tl, out.logits, tvec, &teacher.class_list)?);
                    let tf = tape.constant(t.features.clone());
                    parts.sd = Some(sd_loss(tape, tf, out.features, &d.sd_scales, &d.shift)?);
                }
            }
        }
        let total = total_loss(tape, method, ce, &parts, &d.weights)?;
        let val = |v: Option<Var>| v.map(|v| tape.value(v).item()).transpose();
        let terms = Terms {
            ce: tape.value(ce).item()?,
            kd_logits: val(parts.kd_logits)?,
            feature_l2: val(parts.feature_l2)?,
            local_pod: val(parts.local_pod)?,
            cat: val(parts.cat)?,
            sd: val(parts.sd)?,
            total: tape.value(total).item()?,
        };
        Ok((total, terms))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy(n: usize, seed: u64, classes: &[u32]) -> Vec<Sample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (h, w) = (32, 32);
                let class = classes[rng.gen_range(0..classes.len())];
                let (y0, x0) = (rng.gen_range(0..16), rng.gen_range(0..16));
                let mut labels = vec![0u32; h * w];
                let mut img = vec![0.2; 3 * h * w];
                for y in y0..y0 + 16 {
                    for x in x0..x0 + 16 {
                        labels[y * w + x] = class;
                        img[(class as usize % 3) * h * w + y * w + x] = 0.9;
                        img[((class as usize / 3) % 3) * h * w + y * w + x] += 0.4;
                    }
                }
                Sample { image: Tensor::new(vec![3, h, w], img.into_iter().map(|v: f64| v.min(1.0)).collect()).unwrap(), labels }
            })
            .collect()
    }

    fn cfg() -> ExperimentConfig {
        ExperimentConfig { epochs_t0: 2, epochs_t1: 2, batch_size: 2, ..ExperimentConfig::default() }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let c = ExperimentConfig { epochs_t0: 0, ..cfg() };
        let (w, log) = train_stage0(&c, &toy(3, 0, &[1, 4]), None).unwrap();
        assert_eq!(w, ModelWeights::init(c.seed, &c.taxonomy.old_model_classes()).unwrap());
        assert!(log.steps.is_empty());
    }

    #[test]
    fn stage0_deterministic() {
        let data = toy(5, 1, &[1, 4]);
        let a = train_stage0(&cfg(), &data, None).unwrap();
        let b = train_stage0(&cfg(), &data, None).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.steps.len(), 2 * 3);
    }

    #[test]
    fn stage_class_sets_enforced() {
        assert!(matches!(train_stage0(&cfg(), &toy(2, 0, &[8]), None), Err(HarnessError::StageClasses(_))));
        let teacher = ModelWeights::init(0, &cfg().taxonomy.old_model_classes()).unwrap();
        assert!(matches!(continual_train(&teacher, &cfg(), &toy(2, 0, &[5]), None), Err(HarnessError::StageClasses(_))));
    }

    #[test]
    fn step_zero_closed_forms() {
        let c = ExperimentConfig { epochs_t1: 1, batch_size: 1, ..cfg() };
        let teacher = ModelWeights::init(3, &c.taxonomy.old_model_classes()).unwrap();
        let data = toy(1, 2, &[2, 8]);
        let (_, log) = continual_train(&teacher, &c, &data, None).unwrap();
        let s0 = &log.steps[0];
        assert_eq!(s0.sd, Some(0.0));
        let t = forward(&teacher, &data[0].image).unwrap().logits;
        let temps = c.distill.temperatures(&c.taxonomy).unwrap().for_channels(&teacher.class_list).unwrap();
        let (k, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
        let mut entropy = 0.0;
        for q in 0..hw {
            let z: Vec<f64> = (0..k).map(|c| t.data()[c * hw + q] / temps[c]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            entropy -= z.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>() / hw as f64;
        }
        assert!((s0.cat.unwrap() - entropy).abs() < 1e-12, "{} vs {entropy}", s0.cat.unwrap());
    }

    #[test]
    fn ft_matches_zero_weighted_catsd() {
        let teacher = ModelWeights::init(3, &cfg().taxonomy.old_model_classes()).unwrap();
        let data = toy(4, 5, &[1, 2, 8, 9]);
        let ft = ExperimentConfig { method: Method::Ft, ..cfg() };
        let mut zero = ExperimentConfig { method: Method::CatSd, ..cfg() };
        zero.distill.weights.cat = 0.0;
        zero.distill.weights.sd = 0.0;
        let a = continual_train(&teacher, &ft, &data, None).unwrap();
        let b = continual_train(&teacher, &zero, &data, None).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        for (x, y) in a.1.steps.iter().zip(&b.1.steps) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.ce.to_bits(), y.ce.to_bits());
        }
    }

    #[test]
    fn all_methods_run_and_leave_teacher_alone() {
        let teacher = ModelWeights::init(3, &cfg().taxonomy.old_model_classes()).unwrap();
        let before = teacher.to_bytes();
        let data = toy(2, 6, &[3, 9]);
        for m in Method::ALL {
            let c = ExperimentConfig { method: m, epochs_t1: 1, ..cfg() };
            let (w, log) = continual_train(&teacher, &c, &data, None).unwrap();
            assert_eq!(w.class_list, c.taxonomy.continual_classes());
            assert!(log.steps.iter().all(|s| s.total.is_finite()));
        }
        assert_eq!(teacher.to_bytes(), before);
    }

    #[test]
    fn invalid_hyperparameters() {
        let mut c = ExperimentConfig { method: Method::LocalPod, ..cfg() };
        c.distill.local_pod_scales.clear();
        let teacher = ModelWeights::init(0, &c.taxonomy.old_model_classes()).unwrap();
        assert!(matches!(continual_train(&teacher, &c, &toy(1, 0, &[1]), None), Err(HarnessError::Hyperparameter(_))));
        let c = ExperimentConfig { batch_size: 0, ..cfg() };
        assert!(matches!(c.validate(), Err(HarnessError::Hyperparameter(_))));
    }
}
