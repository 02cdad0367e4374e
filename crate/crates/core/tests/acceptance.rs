//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use catsd::cli::gradcheck::{run_gradcheck, LOSSES, STEP, TOLERANCE};
use catsd::distill::{self, plain, ClassGroup, ClassTaxonomy, Method, ShiftSpec, TemperatureVector};
use catsd::harness::reference::{reference_config, run_reference, write_reference_data, REFERENCE_SEED};
use catsd::harness::{
    continual_train, evaluate, robustness_report, score, spearman, train_stage0, Corruption, ExperimentConfig, Family, Sample, SEVERITIES,
};
use catsd::segnet::{predict, ModelWeights};
use catsd::synth::{generate, synth_dataset, BackgroundOrigin, DatasetManifest, SynthConfig};
use catsd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], spread: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-spread..spread)).collect()).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let checks = run_gradcheck(100, 0, false);
    let elapsed = start.elapsed();
    ensure(checks.len() == LOSSES.len(), || format!("{} losses checked", checks.len()))?;
    for c in &checks {
        ensure(c.instances == 100 && c.failures == 0 && c.max_rel_error <= TOLERANCE, || {
            format!("{}: {} of {} failed, max rel error {:.3e}", c.loss, c.failures, c.instances, c.max_rel_error)
        })?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} losses x 100 instances, step {STEP:e}, worst rel error {worst:.2e}, {elapsed:.1?}", checks.len()))
}

fn at(x: &Tensor, c: usize, i: usize, j: usize) -> f64 {
    let s = x.shape();
    x.data()[(c * s[1] + i) * s[2] + j]
}

fn rect_oracle(x: &Tensor, rows: (usize, usize), cols: (usize, usize), out: &mut Vec<f64>) {
    let c = x.shape()[0];
    for ch in 0..c {
        for i in rows.0..rows.1 {
            let mut sum = 0.0;
            for j in cols.0..cols.1 {
                sum += at(x, ch, i, j);
            }
            out.push(sum / (cols.1 - cols.0) as f64);
        }
    }
    for ch in 0..c {
        for j in cols.0..cols.1 {
            let mut sum = 0.0;
            for i in rows.0..rows.1 {
                sum += at(x, ch, i, j);
            }
            out.push(sum / (rows.1 - rows.0) as f64);
        }
    }
}

fn grid_oracle(x: &Tensor, row_cuts: &[usize], col_cuts: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for r in row_cuts.windows(2) {
        for c in col_cuts.windows(2) {
            rect_oracle(x, (r[0], r[1]), (c[0], c[1]), &mut out);
        }
    }
    out
}

fn embedding_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = ShiftSpec::default();
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for c in 1..=4 {
        for h in [4, 8, 12, 16] {
            for w in [4, 8, 12, 16] {
                let x = random(&mut rng, &[c, h, w], 2.0);
                for s in [1, 2, 4] {
                    let e = distill::pod_embedding(&x, s).map_err(|e| e.to_string())?;
                    ensure(e.len() == s * c * (h + w), || format!("pod length {} at c={c} h={h} w={w} s={s}", e.len()))?;
                    let rows: Vec<usize> = (0..=s).map(|k| k * h / s).collect();
                    let cols: Vec<usize> = (0..=s).map(|k| k * w / s).collect();
                    let oracle = grid_oracle(&x, &rows, &cols);
                    for (a, b) in e.values.iter().zip(&oracle) {
                        worst = worst.max((a - b).abs());
                    }
                    cases += 1;
                }
                let e = distill::shifted_embedding(&x, &spec).map_err(|e| e.to_string())?;
                ensure(e.len() == 3 * c * (h + w), || format!("shifted length {} at c={c} h={h} w={w}", e.len()))?;
                let oracle = grid_oracle(&x, &[0, h / 4, 3 * h / 4, h], &[0, w / 4, 3 * w / 4, w]);
                for (a, b) in e.values.iter().zip(&oracle) {
                    worst = worst.max((a - b).abs());
                }
                cases += 1;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation from brute-force means {worst:e}"))?;
    Ok(format!("{cases} shapes, lengths exact, max deviation {worst:.1e}"))
}

fn toy_samples(n: usize, seed: u64, classes: &[u32]) -> Vec<Sample> {
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
                }
            }
            Sample { image: Tensor::new(vec![3, h, w], img).unwrap(), labels }
        })
        .collect()
}

fn reduction_identities() -> Outcome {
    let tax = ClassTaxonomy::surgical();
    let classes = tax.old_model_classes();
    let k = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = random(&mut rng, &[k, 4, 4], 4.0);
        let s = random(&mut rng, &[k + 2, 4, 4], 4.0);
        let temp = rng.gen_range(0.5..6.0);
        let one = TemperatureVector::uniform(&classes, 1.0).unwrap();
        let same = TemperatureVector::uniform(&classes, temp).unwrap();
        let e = |r: distill::Result<f64>| r.map_err(|e| e.to_string());
        let d1 = (e(plain::cat_loss(&t, &s, &one, &classes))? - e(plain::kd_logits_loss(&t, &s, k))?).abs();
        let dt = (e(plain::cat_loss(&t, &s, &same, &classes))? - e(plain::temperature_kd_loss(&t, &s, k, temp))?).abs();
        worst = worst.max(d1).max(dt);
    }
    ensure(worst <= 1e-12, || format!("cat vs scalar-temperature losses differ by {worst:e}"))?;

    let base = ExperimentConfig { epochs_t0: 1, epochs_t1: 2, batch_size: 2, seed: 5, ..ExperimentConfig::default() };
    let (teacher, _) = train_stage0(&base, &toy_samples(6, 1, &[1, 3, 4]), None).map_err(|e| e.to_string())?;
    let data = toy_samples(6, 2, &[2, 3, 8, 9]);
    let ft = ExperimentConfig { method: Method::Ft, ..base.clone() };
    let mut zero = ExperimentConfig { method: Method::CatSd, ..base };
    zero.distill.weights.cat = 0.0;
    zero.distill.weights.sd = 0.0;
    let (wa, la) = continual_train(&teacher, &ft, &data, None).map_err(|e| e.to_string())?;
    let (wb, lb) = continual_train(&teacher, &zero, &data, None).map_err(|e| e.to_string())?;
    ensure(la.steps.len() == lb.steps.len(), || "step counts differ".into())?;
    for (x, y) in la.steps.iter().zip(&lb.steps) {
        ensure(x.ce.to_bits() == y.ce.to_bits() && x.total.to_bits() == y.total.to_bits(), || format!("losses differ at step {}", x.step))?;
    }
    ensure(wa.to_bytes() == wb.to_bytes(), || "final weights differ".into())?;
    Ok(format!("max reduction gap {worst:.1e}; FT and zero-weighted CATSD identical over {} steps", la.steps.len()))
}

fn synthetic_contracts() -> Outcome {
    let start = Instant::now();
    let tax = ClassTaxonomy::surgical();
    let classes = tax.instrument_classes();
    let cfg = SynthConfig { taxonomy: tax.clone(), ..SynthConfig::balanced(&classes, 100, 3, "contracts") };
    let data = generate(&cfg).map_err(|e| e.to_string())?;
    let expected: BTreeMap<u32, u32> = classes.iter().map(|&c| (c, 100)).collect();
    ensure(data.class_totals == expected, || format!("totals {:?}", data.class_totals))?;
    for (i, s) in data.samples.iter().enumerate() {
        let (w, h) = s.sample.mask.dimensions();
        let mut oracle = vec![0u8; (w * h) as usize];
        let mut order: Vec<_> = s.placements.iter().collect();
        order.sort_by_key(|p| p.z);
        for p in order {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (fx, fy) = (x - p.x, y - p.y);
                    if fx < 0 || fy < 0 || fx >= p.image.width() as i64 || fy >= p.image.height() as i64 {
                        continue;
                    }
                    if p.image.get_pixel(fx as u32, fy as u32).0[3] >= 0.5 {
                        oracle[(y * w as i64 + x) as usize] = p.class as u8;
                    }
                }
            }
        }
        ensure(s.sample.mask.as_raw() == &oracle, || format!("sample {i}: mask differs from composited alpha"))?;
        ensure(s.sample.mask == s.composite.mask, || format!("sample {i}: harmonization changed the mask"))?;
        if s.placements.iter().any(|p| tax.old().contains(&p.class)) {
            ensure(s.origin == BackgroundOrigin::ProceduralSynthetic, || format!("sample {i}: old class on a real background"))?;
            ensure(s.instances.iter().all(|r| r.background_origin == BackgroundOrigin::ProceduralSynthetic), || {
                format!("sample {i}: instance record names a real background")
            })?;
        }
    }
    let dirs = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let m = synth_dataset(&cfg, dirs.0.path()).map_err(|e| e.to_string())?;
    synth_dataset(&cfg, dirs.1.path()).map_err(|e| e.to_string())?;
    ensure(m.class_totals == expected, || format!("manifest totals {:?}", m.class_totals))?;
    let loaded = DatasetManifest::load(dirs.0.path()).map_err(|e| e.to_string())?;
    for r in &loaded.samples {
        let old = r.instances.iter().any(|x| tax.old().contains(&x.class));
        ensure(!old || r.instances.iter().all(|x| x.background_origin == BackgroundOrigin::ProceduralSynthetic), || {
            format!("{}: old class on a real background", r.image)
        })?;
    }
    let mut files = 0;
    let mut rel: Vec<String> = vec![catsd::synth::MANIFEST_FILE.into()];
    rel.extend(m.samples.iter().flat_map(|r| [r.image.clone(), r.mask.clone()]));
    for f in rel {
        let a = std::fs::read(dirs.0.path().join(&f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs.1.path().join(&f)).map_err(|e| e.to_string())?;
        let same_manifest = f == catsd::synth::MANIFEST_FILE && manifest_equal_modulo_root(&a, &b);
        ensure(a == b || same_manifest, || format!("{f} differs between regenerations"))?;
        files += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("{} images, 100 instances per class, masks exact, {files} files byte-identical, {elapsed:.1?}", data.samples.len()))
}

/// Manifests record their own directory; everything else must match.
fn manifest_equal_modulo_root(a: &[u8], b: &[u8]) -> bool {
    let parse = |x: &[u8]| -> Option<serde_json::Value> {
        let mut v: serde_json::Value = serde_json::from_slice(x).ok()?;
        v.as_object_mut()?.remove("root");
        Some(v)
    };
    matches!((parse(a), parse(b)), (Some(x), Some(y)) if x == y)
}

struct Reference {
    teacher_old: f64,
    ft_old: f64,
    catsd_old: f64,
    catsd_new: f64,
    catsd: ModelWeights,
    test: catsd::harness::TestSets,
    elapsed: Duration,
}

fn reference_run() -> Result<Reference, String> {
    let start = Instant::now();
    let tax = ClassTaxonomy::surgical();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_reference_data(&tax, REFERENCE_SEED, dir.path()).map_err(|e| e.to_string())?;
    let cfg = reference_config(&tax, Method::CatSd, REFERENCE_SEED, dir.path());
    let out = run_reference(&cfg, &[Method::Ft, Method::CatSd]).map_err(|e| e.to_string())?;
    let test = catsd::harness::load_test_sets(&cfg.test).map_err(|e| e.to_string())?;
    let group = |m: &catsd::harness::ClassGroupMetrics, g: ClassGroup| {
        m.group_miou.get(g).ok_or(format!("{g:?} classes absent from the test sets"))
    };
    let find = |method: Method| out.students.iter().find(|(_, o)| o.method == method).ok_or(format!("{} missing", method.name()));
    let (_, ft) = find(Method::Ft)?;
    let (catsd_w, catsd) = find(Method::CatSd)?;
    Ok(Reference {
        teacher_old: group(&out.teacher_metrics, ClassGroup::Old)?,
        ft_old: group(&ft.metrics, ClassGroup::Old)?,
        catsd_old: group(&catsd.metrics, ClassGroup::Old)?,
        catsd_new: group(&catsd.metrics, ClassGroup::New)?,
        catsd: catsd_w.clone(),
        test,
        elapsed: start.elapsed(),
    })
}

fn forgetting(r: &Reference) -> Outcome {
    let drop = 1.0 - r.ft_old / r.teacher_old;
    let detail = format!(
        "teacher old {:.3}, FT old {:.3} (drop {:.0}%), CATSD old {:.3}, CATSD new {:.4}, {:.0?}",
        r.teacher_old,
        r.ft_old,
        drop * 100.0,
        r.catsd_old,
        r.catsd_new,
        r.elapsed
    );
    ensure(r.teacher_old > 0.0 && drop >= 0.5, || format!("FT drop below 50%: {detail}"))?;
    ensure(r.catsd_old >= r.ft_old, || format!("CATSD retains less than FT: {detail}"))?;
    ensure(r.catsd_new > 0.0, || format!("CATSD learned no new class: {detail}"))?;
    ensure(r.elapsed < Duration::from_secs(600), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn robustness(r: &Reference) -> Outcome {
    for c in Corruption::ALL {
        let t = c.table();
        let m: Vec<f64> = SEVERITIES.iter().map(|&s| c.magnitude(s).unwrap()).collect();
        let up = t.windows(2).all(|p| p[0] <= p[1]);
        let down = t.windows(2).all(|p| p[0] >= p[1]);
        ensure(up || down, || format!("{} table {t:?} not monotone", c.name()))?;
        ensure(m.windows(2).all(|p| p[0] <= p[1]), || format!("{} magnitude {m:?} not monotone", c.name()))?;
    }
    ensure(Corruption::GaussianNoise.table() == [0.04, 0.06, 0.08, 0.09, 0.10], || "gaussian noise table".into())?;
    let tax = ClassTaxonomy::surgical();
    let report =
        robustness_report(&r.catsd, &r.test, &tax, &[Corruption::GaussianNoise], &SEVERITIES, REFERENCE_SEED).map_err(|e| e.to_string())?;
    let series = report.old_series(Family::Noise);
    let sev: Vec<f64> = series.iter().map(|(s, _)| *s as f64).collect();
    let old: Vec<f64> = series.iter().map(|(_, v)| v.unwrap_or(0.0)).collect();
    // A constant series has no rank correlation; it is treated as no trend.
    let rho = spearman(&sev, &old).unwrap_or(0.0);
    let detail =
        format!("old mIoU by severity {:?}, Spearman {rho:.3}", old.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    ensure(rho <= 0.0, || detail.clone())?;
    Ok(format!("{} tables monotone; {detail}", Corruption::ALL.len()))
}

fn brute_iou(pairs: &[(Vec<u32>, Vec<u32>)], class: u32) -> Option<f64> {
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (t, p) in pairs {
        for (&a, &b) in t.iter().zip(p) {
            match (a == class, b == class) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fne += 1,
                _ => {}
            }
        }
    }
    (tp + fp + fne > 0 && pairs.iter().any(|(t, _)| t.contains(&class))).then(|| tp as f64 / (tp + fp + fne) as f64)
}

fn brute_group(pairs: &[(Vec<u32>, Vec<u32>)], members: &[u32]) -> Option<f64> {
    let v: Vec<f64> = members.iter().filter_map(|&c| brute_iou(pairs, c)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    }
}

fn check_against_oracle(tax: &ClassTaxonomy, pairs: Vec<(Vec<u32>, Vec<u32>)>, label: &str) -> Result<(), String> {
    let m = score(tax, &[("set".into(), pairs.clone())]).map_err(|e| e.to_string())?;
    for c in 0..=9u32 {
        ensure(close(m.per_class_iou.get(&c).copied(), brute_iou(&pairs, c)), || format!("{label}: IoU of class {c}"))?;
    }
    let mut all = vec![0];
    all.extend(tax.instrument_classes());
    let groups = [
        (m.group_miou.regular, tax.members(ClassGroup::Regular)),
        (m.group_miou.old, tax.members(ClassGroup::Old)),
        (m.group_miou.new, tax.members(ClassGroup::New)),
        (m.group_miou.all, all),
    ];
    for (got, members) in groups {
        ensure(close(got, brute_group(&pairs, &members)), || format!("{label}: group mean over {members:?}"))?;
    }
    Ok(())
}

fn metric_arithmetic() -> Outcome {
    let tax = ClassTaxonomy::surgical();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..50 {
        let n = rng.gen_range(1..4);
        let len = rng.gen_range(4..40);
        let palette: Vec<u32> = (0..rng.gen_range(2..=10)).map(|_| rng.gen_range(0..10)).collect();
        let pairs = (0..n)
            .map(|_| {
                let t: Vec<u32> = (0..len).map(|_| palette[rng.gen_range(0..palette.len())]).collect();
                let p: Vec<u32> = (0..len).map(|_| palette[rng.gen_range(0..palette.len())]).collect();
                (t, p)
            })
            .collect();
        check_against_oracle(&tax, pairs, &format!("pair {k}"))?;
    }
    let truth = vec![3, 3, 3, 3, 0, 0, 0, 0];
    let pred = vec![3, 3, 0, 0, 3, 3, 0, 0];
    let m = score(&tax, &[("case".into(), vec![(truth, pred)])]).map_err(|e| e.to_string())?;
    let iou = m.per_class_iou[&3];
    ensure((iou - 1.0 / 3.0).abs() <= 1e-12, || format!("TP=FP=FN=2 gave {iou}"))?;

    let w = ModelWeights::init(4, &tax.continual_classes()).map_err(|e| e.to_string())?;
    let samples = toy_samples(3, 41, &[1, 4, 8]);
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = samples.iter().map(|s| (s.labels.clone(), predict(&w, &s.image).unwrap())).collect();
    let via_evaluate = evaluate(&w, &vec![("set".into(), samples)], &tax).map_err(|e| e.to_string())?;
    ensure(via_evaluate == score(&tax, &[("set".into(), pairs.clone())]).map_err(|e| e.to_string())?, || {
        "evaluate disagrees with score".into()
    })?;
    check_against_oracle(&tax, pairs, "model predictions")?;
    Ok("50 random pairs and a model evaluation match the brute-force counter; 2/6 case = 1/3".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome| match &r {
        Ok(d) => println!("PASS {n} {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("FAIL {n} {name}: {d}");
        }
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "embedding oracles", embedding_oracles());
    report(3, "reduction identities", reduction_identities());
    report(4, "synthetic-data contracts", synthetic_contracts());
    match reference_run() {
        Ok(r) => {
            report(5, "forgetting demonstration", forgetting(&r));
            report(6, "robustness trend", robustness(&r));
        }
        Err(e) => {
            report(5, "forgetting demonstration", Err(e.clone()));
            report(6, "robustness trend", Err(e));
        }
    }
    report(7, "metric arithmetic", metric_arithmetic());
    if failed > 0 {
        std::process::exit(1);
    }
}
