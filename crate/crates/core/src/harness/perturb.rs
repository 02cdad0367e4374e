//! Input corruptions at five severities, grouped into five families.
//!
//! Motion blur, fog and JPEG are proxies: a horizontal box blur, a smooth
//! additive haze, and per-8x8-block shrinkage toward the block mean.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::tensor::Tensor;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Blur,
    Digital,
    Noise,
    Weather,
    Other,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Blur, Family::Digital, Family::Noise, Family::Weather, Family::Other];

    pub fn name(self) -> &'static str {
        match self {
            Family::Blur => "blur",
            Family::Digital => "digital",
            Family::Noise => "noise",
            Family::Weather => "weather",
            Family::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn corruptions(self) -> Vec<Corruption> {
        Corruption::ALL.into_iter().filter(|c| c.family() == self).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    DefocusBlur,
    GaussianBlur,
    MotionBlur,
    Contrast,
    Pixelate,
    Jpeg,
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    Brightness,
    Fog,
    Gamma,
    Saturate,
}

impl Corruption {
    pub const ALL: [Corruption; 14] = [
        Corruption::DefocusBlur,
        Corruption::GaussianBlur,
        Corruption::MotionBlur,
        Corruption::Contrast,
        Corruption::Pixelate,
        Corruption::Jpeg,
        Corruption::GaussianNoise,
        Corruption::ShotNoise,
        Corruption::ImpulseNoise,
        Corruption::SpeckleNoise,
        Corruption::Brightness,
        Corruption::Fog,
        Corruption::Gamma,
        Corruption::Saturate,
    ];

    pub fn family(self) -> Family {
        use Corruption::*;
        match self {
            DefocusBlur | GaussianBlur | MotionBlur => Family::Blur,
            Contrast | Pixelate | Jpeg => Family::Digital,
            GaussianNoise | ShotNoise | ImpulseNoise | SpeckleNoise => Family::Noise,
            Brightness | Fog => Family::Weather,
            Gamma | Saturate => Family::Other,
        }
    }

    pub fn name(self) -> &'static str {
        use Corruption::*;
        match self {
            DefocusBlur => "defocus_blur",
            GaussianBlur => "gaussian_blur",
            MotionBlur => "motion_blur",
            Contrast => "contrast",
            Pixelate => "pixelate",
            Jpeg => "jpeg",
            GaussianNoise => "gaussian_noise",
            ShotNoise => "shot_noise",
            ImpulseNoise => "impulse_noise",
            SpeckleNoise => "speckle_noise",
            Brightness => "brightness",
            Fog => "fog",
            Gamma => "gamma",
            Saturate => "saturate",
        }
    }

    pub fn parse(s: &str) -> Option<Corruption> {
        Corruption::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Raw parameter per severity 1..5.
    pub fn table(self) -> [f64; 5] {
        use Corruption::*;
        match self {
            DefocusBlur => [1.0, 1.5, 2.0, 3.0, 4.0],
            GaussianBlur => [0.5, 0.8, 1.2, 1.6, 2.2],
            MotionBlur => [3.0, 5.0, 7.0, 9.0, 13.0],
            Contrast => [0.7, 0.55, 0.4, 0.3, 0.2],
            Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
            Jpeg => [0.2, 0.35, 0.5, 0.65, 0.8],
            GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            SpeckleNoise => [0.06, 0.1, 0.12, 0.16, 0.2],
            Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            Fog => [0.15, 0.25, 0.35, 0.45, 0.55],
            Gamma => [1.2, 1.4, 1.6, 1.8, 2.0],
            Saturate => [0.7, 0.5, 0.3, 0.15, 0.0],
        }
    }

    /// Corruption strength per severity; nondecreasing for every corruption.
    pub fn magnitude(self, severity: u8) -> Result<f64> {
        use Corruption::*;
        let p = self.parameter(severity)?;
        Ok(match self {
            Contrast | Saturate => 1.0 - p,
            ShotNoise => 1.0 / p,
            Gamma => p - 1.0,
            _ => p,
        })
    }

    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(HarnessError::Severity(severity));
        }
        Ok(self.table()[severity as usize - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub corruption: Corruption,
    pub severity: u8,
}

impl PerturbationSpec {
    pub fn new(corruption: Corruption, severity: u8) -> Result<Self> {
        corruption.parameter(severity)?;
        Ok(PerturbationSpec { corruption, severity })
    }

    pub fn family(&self) -> Family {
        self.corruption.family()
    }
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(HarnessError::Shape(format!("expected [c, h, w] image, got {s:?}"))),
    }
}

/// Correlates every channel with `kernel` (odd extents, centred), clamping at borders.
fn filter(x: &Tensor, kernel: &[f64], kh: usize, kw: usize) -> Result<Tensor> {
    let (c, h, w) = dims(x)?;
    let (rh, rw) = (kh as i64 / 2, kw as i64 / 2);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut acc = 0.0;
                for a in 0..kh as i64 {
                    let ii = (i + a - rh).clamp(0, h as i64 - 1) as usize;
                    for b in 0..kw as i64 {
                        let jj = (j + b - rw).clamp(0, w as i64 - 1) as usize;
                        acc += kernel[(a * kw as i64 + b) as usize] * d[(ch * h + ii) * w + jj];
                    }
                }
                out[(ch * h + i as usize) * w + j as usize] = acc;
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

fn gaussian_kernel(sigma: f64) -> (Vec<f64>, usize) {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    (k.into_iter().map(|v| v / s).collect(), (2 * r + 1) as usize)
}

fn disk_kernel(radius: f64) -> (Vec<f64>, usize) {
    let r = radius.ceil() as i64;
    let n = (2 * r + 1) as usize;
    let mut k: Vec<f64> =
        (-r..=r).flat_map(|i| (-r..=r).map(move |j| if ((i * i + j * j) as f64) <= radius * radius { 1.0 } else { 0.0 })).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    (k, n)
}

fn luminance(x: &Tensor, h: usize, w: usize, p: usize) -> f64 {
    let d = x.data();
    let n = h * w;
    0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]
}

/// Applies the corruption at the spec's tabulated parameter and clips to `[0, 1]`.
pub fn perturb<R: Rng + ?Sized>(image: &Tensor, spec: &PerturbationSpec, rng: &mut R) -> Result<Tensor> {
    use Corruption::*;
    let (c, h, w) = dims(image)?;
    if c != 3 {
        return Err(HarnessError::Shape(format!("expected 3 channels, got {c}")));
    }
    let p = spec.corruption.parameter(spec.severity)?;
    let n = h * w;
    let mut out = match spec.corruption {
        DefocusBlur => {
            let (k, s) = disk_kernel(p);
            filter(image, &k, s, s)?
        }
        GaussianBlur => {
            let (k, s) = gaussian_kernel(p);
            let rows = filter(image, &k, 1, s)?;
            filter(&rows, &k, s, 1)?
        }
        MotionBlur => {
            let len = p as usize;
            filter(image, &vec![1.0 / len as f64; len], 1, len)?
        }
        Contrast => {
            let m = image.data().iter().sum::<f64>() / image.len() as f64;
            image.map(|v| (v - m) * p + m)
        }
        Pixelate | Jpeg => {
            let block = if spec.corruption == Pixelate { p as usize } else { 8 };
            let weight = if spec.corruption == Pixelate { 1.0 } else { p };
            let mut t = image.clone();
            let d = t.data_mut();
            for ch in 0..3 {
                for bi in (0..h).step_by(block) {
                    for bj in (0..w).step_by(block) {
                        let (i1, j1) = ((bi + block).min(h), (bj + block).min(w));
                        let cells = ((i1 - bi) * (j1 - bj)) as f64;
                        let mean = (bi..i1)
                            .flat_map(|i| (bj..j1).map(move |j| (i, j)))
                            .map(|(i, j)| image.data()[(ch * h + i) * w + j])
                            .sum::<f64>()
                            / cells;
                        for i in bi..i1 {
                            for j in bj..j1 {
                                let v = &mut d[(ch * h + i) * w + j];
                                *v += weight * (mean - *v);
                            }
                        }
                    }
                }
            }
            t
        }
        GaussianNoise => {
            let dist = Normal::new(0.0, p).expect("positive sigma");
            let d = image.data().iter().map(|v| v + dist.sample(rng)).collect();
            Tensor::new(image.shape().to_vec(), d)?
        }
        ShotNoise => {
            let d = image
                .data()
                .iter()
                .map(|&v| if v * p > 0.0 { Poisson::new(v * p).expect("positive rate").sample(rng) / p } else { 0.0 })
                .collect();
            Tensor::new(image.shape().to_vec(), d)?
        }
        ImpulseNoise => {
            let d = image
                .data()
                .iter()
                .map(|&v| {
                    let u: f64 = rng.gen();
                    if u < p / 2.0 {
                        0.0
                    } else if u < p {
                        1.0
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::new(image.shape().to_vec(), d)?
        }
        SpeckleNoise => {
            let dist = Normal::new(0.0, p).expect("positive sigma");
            let d = image.data().iter().map(|v| v + v * dist.sample(rng)).collect();
            Tensor::new(image.shape().to_vec(), d)?
        }
        Brightness => image.map(|v| v + p),
        Fog => {
            let (phase_x, phase_y): (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
            let mut t = image.clone();
            let d = t.data_mut();
            for i in 0..h {
                for j in 0..w {
                    let (u, v) = (j as f64 / w as f64, i as f64 / h as f64);
                    let haze =
                        0.75 + 0.2 * ((2.0 * std::f64::consts::PI * u + phase_x).sin() * (1.5 * std::f64::consts::PI * v + phase_y).cos());
                    for ch in 0..3 {
                        let x = &mut d[(ch * h + i) * w + j];
                        *x += p * (haze - *x);
                    }
                }
            }
            t
        }
        Gamma => image.map(|v| v.clamp(0.0, 1.0).powf(p)),
        Saturate => {
            let mut t = image.clone();
            let lum: Vec<f64> = (0..n).map(|q| luminance(image, h, w, q)).collect();
            let d = t.data_mut();
            for ch in 0..3 {
                for q in 0..n {
                    let x = &mut d[ch * n + q];
                    *x = lum[q] + p * (*x - lum[q]);
                }
            }
            t
        }
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Tensor {
        // Tissue texture with a bright instrument-like bar.
        let bg = crate::synth::gen_background(crate::synth::BackgroundKind::Procedural, 7, 64).unwrap();
        let mut t = crate::synth::rgb_to_tensor(&bg.image);
        let d = t.data_mut();
        for c in 0..3 {
            for y in 20..30 {
                for x in 5..50 {
                    d[(c * 64 + y) * 64 + x] = 0.85;
                }
            }
        }
        t
    }

    #[test]
    fn gaussian_noise_table_is_exact() {
        assert_eq!(Corruption::GaussianNoise.table(), [0.04, 0.06, 0.08, 0.09, 0.10]);
    }

    #[test]
    fn noise_std_matches_table_at_severity_one() {
        let img = Tensor::full(&[3, 64, 64], 0.5);
        let out = perturb(&img, &PerturbationSpec::new(Corruption::GaussianNoise, 1).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = out.len() as f64;
        let var = out.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.04).abs() < 0.002, "{}", var.sqrt());
    }

    #[test]
    fn contrast_fixes_constant_images() {
        let img = Tensor::full(&[3, 8, 8], 0.37);
        for s in SEVERITIES {
            let out = perturb(&img, &PerturbationSpec::new(Corruption::Contrast, s).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn tables_are_monotone() {
        for c in Corruption::ALL {
            let m: Vec<f64> = SEVERITIES.iter().map(|&s| c.magnitude(s).unwrap()).collect();
            assert!(m.windows(2).all(|p| p[1] >= p[0]), "{c:?}: {m:?}");
        }
    }

    #[test]
    fn severity_out_of_range() {
        assert!(matches!(PerturbationSpec::new(Corruption::Fog, 0), Err(HarnessError::Severity(0))));
        assert!(matches!(PerturbationSpec::new(Corruption::Fog, 6), Err(HarnessError::Severity(6))));
    }

    #[test]
    fn mean_change_grows_with_severity() {
        let img = scene();
        for c in Corruption::ALL {
            let mut last = 0.0;
            for s in SEVERITIES {
                let spec = PerturbationSpec::new(c, s).unwrap();
                let mut total = 0.0;
                for seed in 0..20 {
                    let out = perturb(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                    total += out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64;
                }
                let mean = total / 20.0;
                assert!(mean >= last, "{c:?} severity {s}: {mean} < {last}");
                last = mean;
            }
        }
    }

    #[test]
    fn every_family_has_members() {
        for f in Family::ALL {
            assert!(!f.corruptions().is_empty());
            assert_eq!(Family::parse(f.name()), Some(f));
        }
        assert_eq!(Corruption::parse("gaussian_noise"), Some(Corruption::GaussianNoise));
    }
}
