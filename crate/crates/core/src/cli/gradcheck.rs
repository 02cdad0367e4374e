//! Finite-difference verification of every registered loss on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::{self, cat_vector, ClassTaxonomy, LossParts, LossWeights, Method, ShiftSpec, TemperatureVector};
use crate::tensor::{grad_check_with_fault, Tape, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const LOSSES: [&str; 7] = ["kd_logits", "temperature_kd", "cat", "feature_l2", "local_pod", "sd", "total"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl LossCheck {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

struct Instance {
    teacher: Tensor,
    student: Tensor,
    f_old: Tensor,
    f_new: Tensor,
    blocks_old: Vec<Tensor>,
    blocks_new: Vec<Tensor>,
    labels: Vec<usize>,
    temperature: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], spread: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-spread..spread)).collect()).expect("shape")
}

/// Per-pixel logits are checked on single-pixel maps, and new features sit a
/// small offset from the old ones. Central differences in `f64` resolve about
/// `1e-11 * |f|` per coordinate, so these choices keep loss values small and
/// gradient coordinates well above that floor.
fn instance(seed: u64, stream: u64, k_old: usize, k_new: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let teacher = random(&mut rng, &[k_old, 1, 1], 1.0);
    let student = random(&mut rng, &[k_new, 1, 1], 3.0);
    let near = |rng: &mut ChaCha8Rng, base: &Tensor| {
        let d = random(rng, base.shape(), 0.05);
        Tensor::new(base.shape().to_vec(), base.data().iter().zip(d.data()).map(|(a, b)| a + b).collect()).expect("shape")
    };
    let f_old = random(&mut rng, &[3, 8, 8], 1.0);
    let f_new = near(&mut rng, &f_old);
    let layers: [&[usize]; 2] = [&[2, 8, 8], &[3, 4, 4]];
    let blocks_old: Vec<Tensor> = layers.iter().map(|s| random(&mut rng, s, 1.0)).collect();
    let blocks_new = blocks_old.iter().map(|b| near(&mut rng, b)).collect();
    let labels = vec![rng.gen_range(0..k_new)];
    let temperature = rng.gen_range(0.5..5.0);
    Instance { teacher, student, f_old, f_new, blocks_old, blocks_new, labels, temperature }
}

struct Setup {
    classes: Vec<u32>,
    tvec: TemperatureVector,
    spec: ShiftSpec,
}

fn loss_inputs(name: &str, x: &Instance) -> Vec<Tensor> {
    match name {
        "kd_logits" | "temperature_kd" | "cat" => vec![x.teacher.clone(), x.student.clone()],
        "feature_l2" | "sd" => vec![x.f_old.clone(), x.f_new.clone()],
        "local_pod" => x.blocks_old.iter().chain(&x.blocks_new).cloned().collect(),
        _ => vec![x.teacher.clone(), x.student.clone(), x.f_old.clone(), x.f_new.clone()],
    }
}

fn build(name: &str, t: &mut Tape, v: &[Var], x: &Instance, s: &Setup) -> distill::Result<Var> {
    let k = s.classes.len();
    match name {
        "kd_logits" => distill::kd_logits_loss(t, v[0], v[1], k),
        "temperature_kd" => distill::temperature_kd_loss(t, v[0], v[1], k, x.temperature),
        "cat" => distill::cat_loss(t, v[0], v[1], &s.tvec, &s.classes),
        "feature_l2" => distill::feature_l2_loss(t, v[0], v[1]),
        "sd" => distill::sd_loss(t, v[0], v[1], &[2, 4], &s.spec),
        "local_pod" => {
            let n = v.len() / 2;
            distill::local_pod_loss(t, &v[..n], &v[n..], &[1, 2, 4])
        }
        _ => {
            let ce = distill::cross_entropy(t, v[1], &x.labels)?;
            let parts = LossParts {
                cat: Some(distill::cat_loss(t, v[0], v[1], &s.tvec, &s.classes)?),
                sd: Some(distill::sd_loss(t, v[2], v[3], &[2, 4], &s.spec)?),
                ..LossParts::default()
            };
            let w = LossWeights { cat: 0.7, sd: 1.3, ..LossWeights::default() };
            distill::total_loss(t, Method::CatSd, ce, &parts, &w)
        }
    }
}

/// Checks every loss on `instances` random problems. With `fault`, analytic
/// gradients are perturbed before comparison so that every check must fail.
pub fn run_gradcheck(instances: usize, seed: u64, fault: bool) -> Vec<LossCheck> {
    let tax = ClassTaxonomy::surgical();
    let classes = tax.old_model_classes();
    let setup = Setup { tvec: cat_vector(&tax, 3.0, 4.0).expect("valid temperatures"), classes, spec: ShiftSpec::default() };
    let k_new = tax.continual_classes().len();
    LOSSES
        .iter()
        .enumerate()
        .map(|(li, &name)| {
            let mut check = LossCheck { loss: name, instances, failures: 0, max_rel_error: 0.0 };
            for i in 0..instances {
                let x = instance(seed, (li as u64) << 32 | i as u64, setup.classes.len(), k_new);
                let inputs = loss_inputs(name, &x);
                let report = grad_check_with_fault(
                    |t, v| build(name, t, v, &x, &setup).map_err(|e| TensorError::Invalid(e.to_string())),
                    &inputs,
                    STEP,
                    TOLERANCE,
                    |g| {
                        if fault {
                            for t in g.iter_mut() {
                                t.data_mut().iter_mut().for_each(|v| *v = *v * 1.01 + 1e-3);
                            }
                        }
                    },
                );
                match report {
                    Ok(r) => {
                        check.max_rel_error = check.max_rel_error.max(r.max_rel_error);
                        if !r.pass {
                            check.failures += 1;
                        }
                    }
                    Err(_) => {
                        check.max_rel_error = f64::INFINITY;
                        check.failures += 1;
                    }
                }
            }
            check
        })
        .collect()
}
