use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundOrigin {
    OpenSourceReal,
    ProceduralSynthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Procedural,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundAsset {
    pub image: Rgb32FImage,
    pub origin: BackgroundOrigin,
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(SynthError::InvalidSize(size));
    }
    Ok(())
}

/// Multi-octave value noise in `[0, 1]`.
struct ValueNoise {
    octaves: Vec<(usize, Vec<f64>)>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, base_cells: usize, octaves: usize) -> Self {
        let octaves = (0..octaves)
            .map(|o| {
                let cells = base_cells << o;
                (cells, (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect())
            })
            .collect();
        ValueNoise { octaves }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (mut total, mut amp, mut norm) = (0.0, 1.0, 0.0);
        for (cells, lattice) in &self.octaves {
            let (x, y) = (u * *cells as f64, v * *cells as f64);
            let (x0, y0) = ((x.floor() as usize).min(cells - 1), (y.floor() as usize).min(cells - 1));
            let (fx, fy) = (smooth(x - x0 as f64), smooth(y - y0 as f64));
            let l = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let top = l(x0, y0) * (1.0 - fx) + l(x0 + 1, y0) * fx;
            let bot = l(x0, y0 + 1) * (1.0 - fx) + l(x0 + 1, y0 + 1) * fx;
            total += amp * (top * (1.0 - fy) + bot * fy);
            norm += amp;
            amp *= 0.5;
        }
        total / norm
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

const DEEP: [f64; 3] = [0.42, 0.07, 0.09];
const PINK: [f64; 3] = [0.9, 0.48, 0.47];
const FAT: [f64; 3] = [0.92, 0.74, 0.5];

/// Tissue-like texture: value noise through a red/pink palette with fatty
/// patches and darkened corners.
pub fn gen_background(kind: BackgroundKind, seed: u64, size: usize) -> Result<BackgroundAsset> {
    check_size(size)?;
    let BackgroundKind::Procedural = kind;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = rng.gen_range(2..5);
    let tissue = ValueNoise::new(&mut rng, cells, 4);
    let fat = ValueNoise::new(&mut rng, 3, 2);
    let (cx, cy) = (rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65));
    let vignette = rng.gen_range(0.3..0.6);
    let n = size as f64;
    let image = Rgb32FImage::from_fn(size as u32, size as u32, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
        let mut c = lerp3(DEEP, PINK, tissue.at(u, v));
        let f = ((fat.at(u, v) - 0.62) / 0.2).clamp(0.0, 1.0);
        c = lerp3(c, FAT, f * 0.8);
        let r2 = ((u - cx).powi(2) + (v - cy).powi(2)) * 2.0;
        let shade = 1.0 - vignette * r2.min(1.0);
        Rgb(c.map(|ch| (ch * shade).clamp(0.0, 1.0) as f32))
    });
    Ok(BackgroundAsset { image, origin: BackgroundOrigin::ProceduralSynthetic })
}

/// Fixed stand-in for the single open-source real tissue photograph: smooth
/// shading, vessels, specular highlights.
pub fn reference_background(size: usize) -> Result<BackgroundAsset> {
    check_size(size)?;
    let n = size as f64;
    let highlights = [(0.3, 0.25, 0.05), (0.72, 0.4, 0.035), (0.55, 0.78, 0.045)];
    let image = Rgb32FImage::from_fn(size as u32, size as u32, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
        let base = [0.72 - 0.2 * v, 0.3 + 0.08 * (6.0 * u).sin(), 0.27 + 0.05 * (5.0 * v).cos()];
        let vessel = ((u * 9.0 + (v * 7.0).sin() * 1.2).sin()).abs() < 0.08;
        let mut c = if vessel { [base[0] * 0.6, base[1] * 0.35, base[2] * 0.4] } else { base };
        for &(hx, hy, r) in &highlights {
            let d2 = ((u - hx).powi(2) + (v - hy).powi(2)) / (r * r);
            let s = (-d2).exp();
            c = lerp3(c, [0.98, 0.94, 0.92], s);
        }
        Rgb(c.map(|ch| ch.clamp(0.0, 1.0) as f32))
    });
    Ok(BackgroundAsset { image, origin: BackgroundOrigin::OpenSourceReal })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_means(img: &Rgb32FImage) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in img.pixels() {
            for c in 0..3 {
                m[c] += p.0[c] as f64;
            }
        }
        m.map(|v| v / (img.width() * img.height()) as f64)
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_background(BackgroundKind::Procedural, 3, 64).unwrap();
        let b = gen_background(BackgroundKind::Procedural, 3, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.origin, BackgroundOrigin::ProceduralSynthetic);
    }

    #[test]
    fn red_dominant_over_many_seeds() {
        for seed in 0..100 {
            let m = channel_means(&gen_background(BackgroundKind::Procedural, seed, 32).unwrap().image);
            assert!(m[0] > m[1] && m[0] > m[2], "seed {seed}: {m:?}");
        }
        let m = channel_means(&reference_background(64).unwrap().image);
        assert!(m[0] > m[1] && m[0] > m[2]);
    }

    #[test]
    fn different_seeds_differ_in_most_pixels() {
        for seed in 0..20 {
            let a = gen_background(BackgroundKind::Procedural, seed, 64).unwrap().image;
            let b = gen_background(BackgroundKind::Procedural, seed + 1000, 64).unwrap().image;
            let differing = a.pixels().zip(b.pixels()).filter(|(p, q)| p != q).count();
            assert!(differing * 2 > 64 * 64);
        }
    }

    #[test]
    fn size_must_be_multiple_of_eight() {
        assert!(matches!(gen_background(BackgroundKind::Procedural, 0, 60), Err(SynthError::InvalidSize(60))));
        assert!(matches!(reference_background(0), Err(SynthError::InvalidSize(0))));
    }
}
