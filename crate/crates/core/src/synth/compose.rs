use image::{GrayImage, Luma, Rgb, Rgb32FImage, Rgba32FImage};

use super::background::BackgroundAsset;
use super::{Result, SynthError};

pub const MAX_PLACEMENTS: usize = 3;

/// RGB image with its per-pixel class mask (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Rgb32FImage,
    pub mask: GrayImage,
}

/// A foreground silhouette at integer offset `(x, y)` of its top-left corner.
#[derive(Debug, Clone, Copy)]
pub struct Placement<'a> {
    pub class: u32,
    pub image: &'a Rgba32FImage,
    pub x: i64,
    pub y: i64,
    pub z: i32,
}

/// Composites foregrounds in ascending `z` (ties keep list order). A pixel is
/// covered when the foreground alpha is at least 0.5; the mask holds the class
/// of the topmost covering foreground.
pub fn blend(background: &BackgroundAsset, placements: &[Placement]) -> Result<SegSample> {
    if placements.len() > MAX_PLACEMENTS {
        return Err(SynthError::TooManyPlacements(placements.len()));
    }
    let mut image = background.image.clone();
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut mask = GrayImage::new(w as u32, h as u32);
    let mut order: Vec<&Placement> = placements.iter().collect();
    order.sort_by_key(|p| p.z);
    for p in order {
        let class = u8::try_from(p.class).map_err(|_| SynthError::Config(format!("class id {} exceeds 255", p.class)))?;
        for (fx, fy, px) in p.image.enumerate_pixels() {
            if px.0[3] < 0.5 {
                continue;
            }
            let (x, y) = (p.x + fx as i64, p.y + fy as i64);
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            image.put_pixel(x as u32, y as u32, Rgb([px.0[0], px.0[1], px.0[2]]));
            mask.put_pixel(x as u32, y as u32, Luma([class]));
        }
    }
    Ok(SegSample { image, mask })
}

fn to_ycc(p: [f32; 3]) -> [f64; 3] {
    let [r, g, b] = p.map(|v| v as f64);
    [0.299 * r + 0.587 * g + 0.114 * b, -0.168736 * r - 0.331264 * g + 0.5 * b, 0.5 * r - 0.418688 * g - 0.081312 * b]
}

fn from_ycc(q: [f64; 3]) -> [f32; 3] {
    let [y, cb, cr] = q;
    [y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb].map(|v| v.clamp(0.0, 1.0) as f32)
}

fn stats(values: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = values.len() as f64;
    let mut mean = [0.0; 3];
    for v in values {
        for c in 0..3 {
            mean[c] += v[c] / n;
        }
    }
    let mut sd = [0.0; 3];
    for v in values {
        for c in 0..3 {
            sd[c] += (v[c] - mean[c]).powi(2) / n;
        }
    }
    (mean, sd.map(f64::sqrt))
}

/// Moves foreground colour statistics toward the background's in YCbCr:
/// per channel, `(x - mu_f) * sd_b / sd_f + mu_b`, blended with the original
/// by `strength` in `[0, 1]`. Channels with near-zero foreground spread only
/// have their mean shifted. The mask is never modified.
pub fn harmonize(sample: &SegSample, strength: f64) -> SegSample {
    let strength = strength.clamp(0.0, 1.0);
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (p, m) in sample.image.pixels().zip(sample.mask.pixels()) {
        if m.0[0] != 0 {
            fg.push(to_ycc(p.0))
        } else {
            bg.push(to_ycc(p.0))
        }
    }
    if fg.is_empty() || bg.is_empty() || strength == 0.0 {
        return sample.clone();
    }
    let (mf, sf) = stats(&fg);
    let (mb, sb) = stats(&bg);
    let mut image = sample.image.clone();
    for (p, m) in image.pixels_mut().zip(sample.mask.pixels()) {
        if m.0[0] == 0 {
            continue;
        }
        let q = to_ycc(p.0);
        let mut t = [0.0; 3];
        for c in 0..3 {
            let ratio = if sf[c] > 1e-6 { sb[c] / sf[c] } else { 1.0 };
            let moved = (q[c] - mf[c]) * ratio + mb[c];
            t[c] = q[c] + strength * (moved - q[c]);
        }
        p.0 = from_ycc(t);
    }
    SegSample { image, mask: sample.mask.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::background::BackgroundOrigin;
    use image::Rgba;

    fn plain_bg(size: u32, c: [f32; 3]) -> BackgroundAsset {
        BackgroundAsset { image: Rgb32FImage::from_pixel(size, size, Rgb(c)), origin: BackgroundOrigin::ProceduralSynthetic }
    }

    fn square(n: u32, c: [f32; 3]) -> Rgba32FImage {
        Rgba32FImage::from_pixel(n, n, Rgba([c[0], c[1], c[2], 1.0]))
    }

    #[test]
    fn no_placements_gives_empty_mask() {
        let s = blend(&plain_bg(16, [0.5, 0.2, 0.2]), &[]).unwrap();
        assert!(s.mask.pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn single_square_footprint() {
        let sq = square(5, [0.1, 0.9, 0.1]);
        let s = blend(&plain_bg(32, [0.5, 0.2, 0.2]), &[Placement { class: 3, image: &sq, x: 10, y: 10, z: 0 }]).unwrap();
        for (x, y, m) in s.mask.enumerate_pixels() {
            let inside = (10..15).contains(&x) && (10..15).contains(&y);
            assert_eq!(m.0[0], if inside { 3 } else { 0 });
        }
    }

    #[test]
    fn higher_z_occludes() {
        let a = square(6, [0.1, 0.9, 0.1]);
        let b = square(6, [0.1, 0.1, 0.9]);
        let bg = plain_bg(16, [0.5, 0.2, 0.2]);
        let top_last = [Placement { class: 5, image: &b, x: 4, y: 4, z: 1 }, Placement { class: 3, image: &a, x: 2, y: 2, z: 0 }];
        let s = blend(&bg, &top_last).unwrap();
        assert_eq!(s.mask.get_pixel(5, 5).0[0], 5);
        assert_eq!(s.mask.get_pixel(2, 2).0[0], 3);
        assert_eq!(s.image.get_pixel(5, 5).0, [0.1, 0.1, 0.9]);
    }

    #[test]
    fn clipping_and_limits() {
        let a = square(6, [0.1, 0.9, 0.1]);
        let bg = plain_bg(8, [0.5, 0.2, 0.2]);
        let s = blend(&bg, &[Placement { class: 2, image: &a, x: -3, y: 5, z: 0 }]).unwrap();
        assert_eq!(s.mask.pixels().filter(|p| p.0[0] == 2).count(), 3 * 3);
        let p = Placement { class: 2, image: &a, x: 0, y: 0, z: 0 };
        assert!(matches!(blend(&bg, &[p, p, p, p]), Err(SynthError::TooManyPlacements(4))));
    }

    #[test]
    fn harmonize_fixed_point_and_mask() {
        let bg = BackgroundAsset {
            image: Rgb32FImage::from_fn(16, 16, |x, y| Rgb([0.5 + 0.02 * ((x + y) % 3) as f32, 0.3, 0.25])),
            origin: BackgroundOrigin::ProceduralSynthetic,
        };
        // Foreground copied from the background pattern has identical statistics.
        let fg = Rgba32FImage::from_fn(6, 6, |x, y| Rgba([0.5 + 0.02 * ((x + y) % 3) as f32, 0.3, 0.25, 1.0]));
        let s = blend(&bg, &[Placement { class: 1, image: &fg, x: 3, y: 3, z: 0 }]).unwrap();
        let h = harmonize(&s, 1.0);
        assert_eq!(h.mask, s.mask);
        for (a, b) in h.image.pixels().zip(s.image.pixels()) {
            for c in 0..3 {
                assert!((a.0[c] - b.0[c]).abs() * 255.0 <= 1.0);
            }
        }
    }

    #[test]
    fn gray_foreground_moves_toward_red_background() {
        let bg = plain_bg(16, [0.8, 0.2, 0.2]);
        let fg = square(6, [0.5, 0.5, 0.5]);
        let s = blend(&bg, &[Placement { class: 1, image: &fg, x: 0, y: 0, z: 0 }]).unwrap();
        let mut last = [0.5f32, 0.5, 0.5];
        for strength in [0.25, 0.5, 1.0] {
            let h = harmonize(&s, strength);
            assert_eq!(h.mask, s.mask);
            let p = h.image.get_pixel(2, 2).0;
            assert!(p[0] >= last[0] && p[1] <= last[1] && p[2] <= last[2]);
            last = p;
        }
        assert!((last[0] - 0.8).abs() < 1e-4 && (last[1] - 0.2).abs() < 1e-4);
    }
}
