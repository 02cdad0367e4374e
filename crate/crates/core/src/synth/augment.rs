use image::{imageops, Rgb32FImage, Rgba, Rgba32FImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SynthError};

pub const MAX_ROTATION_DEG: f64 = 45.0;
pub const MAX_SHEAR_DEG: f64 = 16.0;

/// Enabled transforms and their sampling ranges. `None` disables a transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: Option<[f64; 2]>,
    pub shear_deg: Option<[f64; 2]>,
    pub scale: Option<[f64; 2]>,
    pub blur_sigma: Option<[f64; 2]>,
    pub contrast: Option<[f64; 2]>,
    pub brightness: Option<[f64; 2]>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            hflip: true,
            vflip: true,
            rotation_deg: Some([-MAX_ROTATION_DEG, MAX_ROTATION_DEG]),
            shear_deg: Some([-MAX_SHEAR_DEG, MAX_SHEAR_DEG]),
            scale: Some([0.8, 1.2]),
            blur_sigma: Some([0.0, 0.8]),
            contrast: Some([0.8, 1.2]),
            brightness: Some([-0.08, 0.08]),
        }
    }
}

/// One sampled instance of the transform chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub scale: f64,
    pub blur_sigma: f64,
    pub contrast: f64,
    pub brightness: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        hflip: false,
        vflip: false,
        rotation_deg: 0.0,
        shear_deg: 0.0,
        scale: 1.0,
        blur_sigma: 0.0,
        contrast: 1.0,
        brightness: 0.0,
    };

    fn is_rigid_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shear_deg == 0.0 && self.scale == 1.0
    }

    /// Output-to-input map about the image centre: inverse of rotate * shear * scale.
    fn inverse_matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let a = [[c * self.scale, (c * k - s) * self.scale], [s * self.scale, (s * k + c) * self.scale]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
    }
}

fn check_range(name: &str, r: Option<[f64; 2]>, lo: f64, hi: f64) -> Result<()> {
    if let Some([a, b]) = r {
        if !(a <= b && a >= lo && b <= hi) {
            return Err(SynthError::Augmentation(format!("{name} range [{a}, {b}] outside [{lo}, {hi}] or reversed")));
        }
    }
    Ok(())
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            hflip: false,
            vflip: false,
            rotation_deg: None,
            shear_deg: None,
            scale: None,
            blur_sigma: None,
            contrast: None,
            brightness: None,
        }
    }

    /// Milder chain for backgrounds: flips, small rotations, colour jitter.
    pub fn background_default() -> Self {
        AugmentationSpec {
            shear_deg: None,
            scale: Some([1.0, 1.3]),
            rotation_deg: Some([-20.0, 20.0]),
            blur_sigma: None,
            ..AugmentationSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("rotation", self.rotation_deg, -MAX_ROTATION_DEG, MAX_ROTATION_DEG)?;
        check_range("shear", self.shear_deg, -MAX_SHEAR_DEG, MAX_SHEAR_DEG)?;
        if let Some([a, _]) = self.scale {
            if !(a > 0.0) {
                return Err(SynthError::DegenerateScale(a));
            }
        }
        check_range("scale", self.scale, f64::MIN_POSITIVE, 10.0)?;
        check_range("blur", self.blur_sigma, 0.0, 10.0)?;
        check_range("contrast", self.contrast, f64::MIN_POSITIVE, 10.0)?;
        check_range("brightness", self.brightness, -1.0, 1.0)
    }

    /// Draws a transform. The stream consumption does not depend on which
    /// transforms are enabled.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Transform> {
        self.validate()?;
        let mut pick = |r: Option<[f64; 2]>, neutral: f64| {
            let u: f64 = rng.gen();
            r.map_or(neutral, |[a, b]| a + (b - a) * u)
        };
        let hflip = pick(Some([0.0, 1.0]), 0.0) < 0.5 && self.hflip;
        let vflip = pick(Some([0.0, 1.0]), 0.0) < 0.5 && self.vflip;
        Ok(Transform {
            hflip,
            vflip,
            rotation_deg: pick(self.rotation_deg, 0.0),
            shear_deg: pick(self.shear_deg, 0.0),
            scale: pick(self.scale, 1.0),
            blur_sigma: pick(self.blur_sigma, 0.0),
            contrast: pick(self.contrast, 1.0),
            brightness: pick(self.brightness, 0.0),
        })
    }
}

/// What to sample outside the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    Transparent,
    Clamp,
}

fn bilinear(src: &Rgba32FImage, x: f64, y: f64, border: Border) -> [f32; 4] {
    let (w, h) = (src.width() as i64, src.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let fetch = |xi: i64, yi: i64| -> [f32; 4] {
        match border {
            Border::Clamp => src.get_pixel(xi.clamp(0, w - 1) as u32, yi.clamp(0, h - 1) as u32).0,
            Border::Transparent if xi < 0 || yi < 0 || xi >= w || yi >= h => [0.0; 4],
            Border::Transparent => src.get_pixel(xi as u32, yi as u32).0,
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let (p00, p10, p01, p11) = (fetch(xi, yi), fetch(xi + 1, yi), fetch(xi, yi + 1), fetch(xi + 1, yi + 1));
    let mut out = [0.0; 4];
    for c in 0..4 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Rotation, shear and scale about the image centre, bilinear resampling.
pub fn warp_rgba(src: &Rgba32FImage, t: &Transform, border: Border) -> Result<Rgba32FImage> {
    if !(t.scale > 0.0) {
        return Err(SynthError::DegenerateScale(t.scale));
    }
    if t.is_rigid_identity() {
        return Ok(src.clone());
    }
    let m = t.inverse_matrix();
    let (cx, cy) = (src.width() as f64 / 2.0, src.height() as f64 / 2.0);
    Ok(Rgba32FImage::from_fn(src.width(), src.height(), |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let sx = cx + m[0][0] * dx + m[0][1] * dy - 0.5;
        let sy = cy + m[1][0] * dx + m[1][1] * dy - 0.5;
        Rgba(bilinear(src, sx, sy, border))
    }))
}

fn apply(img: &Rgba32FImage, t: &Transform, border: Border, has_alpha: bool) -> Result<Rgba32FImage> {
    let mut out = warp_rgba(img, t, border)?;
    if t.hflip {
        imageops::flip_horizontal_in_place(&mut out);
    }
    if t.vflip {
        imageops::flip_vertical_in_place(&mut out);
    }
    if t.blur_sigma > 0.0 {
        out = imageops::blur(&out, t.blur_sigma as f32);
    }
    if has_alpha {
        for p in out.pixels_mut() {
            p.0[3] = if p.0[3] >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    if t.contrast != 1.0 || t.brightness != 0.0 {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for p in out.pixels().filter(|p| !has_alpha || p.0[3] > 0.0) {
            sum += (p.0[0] + p.0[1] + p.0[2]) as f64 / 3.0;
            n += 1;
        }
        let mean = if n > 0 { (sum / n as f64) as f32 } else { 0.0 };
        let (k, b) = (t.contrast as f32, t.brightness as f32);
        for p in out.pixels_mut() {
            for c in 0..3 {
                p.0[c] = ((p.0[c] - mean) * k + mean + b).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Applies a sampled transform chain to an RGBA foreground. Regions mapped
/// from outside the source become transparent; alpha is re-binarized at 0.5.
pub fn augment<R: Rng + ?Sized>(img: &Rgba32FImage, spec: &AugmentationSpec, rng: &mut R) -> Result<Rgba32FImage> {
    let t = spec.sample(rng)?;
    apply(img, &t, Border::Transparent, true)
}

/// Applies a transform to an opaque RGB image with clamped borders.
pub fn augment_background<R: Rng + ?Sized>(img: &Rgb32FImage, spec: &AugmentationSpec, rng: &mut R) -> Result<Rgb32FImage> {
    let t = spec.sample(rng)?;
    apply_rgb(img, &t)
}

pub(crate) fn apply_rgb(img: &Rgb32FImage, t: &Transform) -> Result<Rgb32FImage> {
    let rgba = Rgba32FImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        Rgba([p[0], p[1], p[2], 1.0])
    });
    let out = apply(&rgba, t, Border::Clamp, false)?;
    Ok(Rgb32FImage::from_fn(img.width(), img.height(), |x, y| {
        let p = out.get_pixel(x, y).0;
        image::Rgb([p[0], p[1], p[2]])
    }))
}

impl Transform {
    pub fn apply_rgba(&self, img: &Rgba32FImage) -> Result<Rgba32FImage> {
        apply(img, self, Border::Transparent, true)
    }

    pub fn apply_rgb(&self, img: &Rgb32FImage) -> Result<Rgb32FImage> {
        apply_rgb(img, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth(w: u32, h: u32) -> Rgb32FImage {
        Rgb32FImage::from_fn(w, h, |x, y| {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            image::Rgb([0.5 + 0.4 * (3.0 * u).sin(), 0.5 + 0.4 * (2.0 * v).cos(), u * v])
        })
    }

    fn sprite() -> Rgba32FImage {
        Rgba32FImage::from_fn(12, 10, |x, y| {
            let on = (2..9).contains(&x) && (3..8).contains(&y);
            Rgba([x as f32 / 12.0, y as f32 / 10.0, 0.3, if on { 1.0 } else { 0.0 }])
        })
    }

    #[test]
    fn identity_spec_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sprite();
        assert_eq!(augment(&s, &AugmentationSpec::identity(), &mut rng).unwrap(), s);
        let bg = smooth(16, 16);
        assert_eq!(augment_background(&bg, &AugmentationSpec::identity(), &mut rng).unwrap(), bg);
    }

    #[test]
    fn double_flip_is_identity() {
        let t = Transform { hflip: true, ..Transform::IDENTITY };
        let s = sprite();
        let once = t.apply_rgba(&s).unwrap();
        assert_ne!(once, s);
        assert_eq!(t.apply_rgba(&once).unwrap(), s);
    }

    #[test]
    fn rotation_round_trip_within_one_pixel() {
        let img = smooth(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let theta = rng.gen_range(-45.0..45.0);
            let fwd = Transform { rotation_deg: theta, ..Transform::IDENTITY };
            let back = Transform { rotation_deg: -theta, ..Transform::IDENTITY };
            let rt = back.apply_rgb(&fwd.apply_rgb(&img).unwrap()).unwrap();
            // Interior pixels must land within the range of their 3x3 source neighbourhood.
            for y in 10..22u32 {
                for x in 10..22u32 {
                    for c in 0..3 {
                        let nb: Vec<f32> = (-1..=1i32)
                            .flat_map(|dy| (-1..=1i32).map(move |dx| (x as i32 + dx, y as i32 + dy)))
                            .map(|(a, b)| img.get_pixel(a as u32, b as u32).0[c])
                            .collect();
                        let lo = nb.iter().cloned().fold(f32::MAX, f32::min);
                        let hi = nb.iter().cloned().fold(f32::MIN, f32::max);
                        let v = rt.get_pixel(x, y).0[c];
                        assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "theta {theta} at ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn alpha_stays_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let out = augment(&sprite(), &AugmentationSpec::default(), &mut rng).unwrap();
            assert!(out.pixels().all(|p| p.0[3] == 0.0 || p.0[3] == 1.0));
        }
    }

    #[test]
    fn validation() {
        let bad_rot = AugmentationSpec { rotation_deg: Some([-50.0, 10.0]), ..AugmentationSpec::default() };
        assert!(matches!(bad_rot.validate(), Err(SynthError::Augmentation(_))));
        let bad_shear = AugmentationSpec { shear_deg: Some([0.0, 17.0]), ..AugmentationSpec::default() };
        assert!(bad_shear.validate().is_err());
        let zero = AugmentationSpec { scale: Some([0.0, 1.0]), ..AugmentationSpec::default() };
        assert!(matches!(zero.validate(), Err(SynthError::DegenerateScale(_))));
        let t = Transform { scale: -1.0, ..Transform::IDENTITY };
        assert!(matches!(t.apply_rgba(&sprite()), Err(SynthError::DegenerateScale(_))));
    }

    #[test]
    fn same_seed_same_chain() {
        let spec = AugmentationSpec::default();
        let a = spec.sample(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = spec.sample(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }
}
