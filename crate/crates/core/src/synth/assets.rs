use std::path::Path;

use image::{Rgba, Rgba32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SynthError};

/// Edge length of the square toy assets.
pub const ASSET_SIZE: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pose {
    Open,
    Closed,
}

impl Pose {
    pub fn tag(self) -> &'static str {
        match self {
            Pose::Open => "clasper open",
            Pose::Closed => "clasper closed",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Pose::Open => "open",
            Pose::Closed => "closed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundAsset {
    pub class: u32,
    pub pose: Pose,
    pub image: Rgba32FImage,
}

impl ForegroundAsset {
    /// Bounding box `[x0, y0, x1, y1)` of the opaque pixels, if any.
    pub fn alpha_bbox(&self) -> Option<[u32; 4]> {
        alpha_bbox(&self.image)
    }
}

pub(crate) fn alpha_bbox(img: &Rgba32FImage) -> Option<[u32; 4]> {
    let mut b: Option<[u32; 4]> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if p.0[3] >= 0.5 {
            let e = b.get_or_insert([x, y, x + 1, y + 1]);
            e[0] = e[0].min(x);
            e[1] = e[1].min(y);
            e[2] = e[2].max(x + 1);
            e[3] = e[3].max(y + 1);
        }
    }
    b
}

/// Two poses per instrument class.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetBank {
    assets: Vec<ForegroundAsset>,
}

impl AssetBank {
    pub fn new(mut assets: Vec<ForegroundAsset>) -> Self {
        assets.sort_by_key(|a| (a.class, a.pose));
        AssetBank { assets }
    }

    pub fn assets(&self) -> &[ForegroundAsset] {
        &self.assets
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn poses(&self, class: u32) -> Vec<&ForegroundAsset> {
        self.assets.iter().filter(|a| a.class == class).collect()
    }

    pub fn get(&self, class: u32, pose: Pose) -> Option<&ForegroundAsset> {
        self.assets.iter().find(|a| a.class == class && a.pose == pose)
    }

    /// Fails unless every listed class has exactly the two poses.
    pub fn check_classes(&self, classes: &[u32]) -> Result<()> {
        for &c in classes {
            if self.get(c, Pose::Open).is_none() || self.get(c, Pose::Closed).is_none() || self.poses(c).len() != 2 {
                return Err(SynthError::MissingAssets(format!("class {c} needs exactly one open and one closed pose")));
            }
        }
        Ok(())
    }

    /// Writes `<classid>_<pose>.png` RGBA files.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for a in &self.assets {
            let rgba8 = image::RgbaImage::from_fn(a.image.width(), a.image.height(), |x, y| {
                Rgba(a.image.get_pixel(x, y).0.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            });
            rgba8.save_with_format(dir.join(format!("{}_{}.png", a.class, a.pose.file_stem())), image::ImageFormat::Png)?;
        }
        Ok(())
    }

    /// Reads every `<classid>_<open|closed>.png` in `dir`; alpha is thresholded at 0.5.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut assets = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let name = e.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".png") else { continue };
            let Some((cls, pose)) = stem.split_once('_') else { continue };
            let pose = match pose {
                "open" => Pose::Open,
                "closed" => Pose::Closed,
                _ => continue,
            };
            let class: u32 = cls.parse().map_err(|_| SynthError::MissingAssets(format!("bad asset name {name}")))?;
            let img = image::open(e.path())?.to_rgba32f();
            let image = Rgba32FImage::from_fn(img.width(), img.height(), |x, y| {
                let mut p = *img.get_pixel(x, y);
                p.0[3] = if p.0[3] >= 0.5 { 1.0 } else { 0.0 };
                p
            });
            assets.push(ForegroundAsset { class, pose, image });
        }
        if assets.is_empty() {
            return Err(SynthError::MissingAssets(format!("no assets in {}", dir.display())));
        }
        Ok(AssetBank::new(assets))
    }
}

fn seg_dist(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Head silhouette of each class in canonical coordinates `u, v` in `[-1, 1]`
/// (`v = -1` at the top). `o` is 1 for the open pose and 0 for the closed one.
fn head(class: u32, u: f64, v: f64, o: f64) -> bool {
    let pair = |tip_x: f64, tip_y: f64, r: f64| seg_dist(u, v, 0.0, 0.05, -tip_x, tip_y) < r || seg_dist(u, v, 0.0, 0.05, tip_x, tip_y) < r;
    match class {
        1 => pair(0.12 + 0.35 * o, -0.92, 0.06),
        2 => {
            let jaw = pair(0.1 + 0.3 * o, -0.75, 0.15);
            let hole = seg_dist(u.abs(), v, 0.05 + 0.2 * o, -0.35, 0.08 + 0.27 * o, -0.6) < 0.05;
            jaw && !hole
        }
        3 => pair(0.05 + 0.2 * o, -0.42, 0.2),
        4 => {
            if o > 0.5 {
                pair(0.25, -0.85, 0.14)
            } else {
                seg_dist(u, v, 0.0, 0.05, 0.0, -0.8) < 0.24
            }
        }
        5 => {
            let spread = 0.25 + 0.2 * o;
            let bar = v > -0.05 && v < 0.1 && u.abs() < spread + 0.05;
            bar || [-1.0, 0.0, 1.0].iter().any(|&k| seg_dist(u, v, k * spread * 0.6, 0.05, k * spread, -0.88) < 0.06)
        }
        6 => {
            let blade = |cx: f64| {
                let d = ((u - cx).powi(2) + (v - 0.05).powi(2)).sqrt();
                (d - 0.75).abs() < 0.1 && v < 0.05 && v > -0.8
            };
            blade(0.7) || (o > 0.5 && blade(-0.7))
        }
        7 => {
            let (ru, rv) = if o > 0.5 { (0.5, 0.38) } else { (0.42, 0.46) };
            (u / ru).powi(2) + ((v + 0.45) / rv).powi(2) < 1.0
        }
        8 => {
            let tip = (0.35 * o, -0.8);
            let tube = seg_dist(u, v, 0.0, 0.1, tip.0, tip.1) < 0.07;
            let d = ((u - tip.0).powi(2) + (v - tip.1).powi(2)).sqrt();
            tube || (d > 0.1 && d < 0.2)
        }
        9 => {
            let inside = |hw: f64, top: f64| {
                let t = (0.1 - v) / (0.1 - top);
                (0.0..=1.0).contains(&t) && u.abs() < hw * (1.0 - t)
            };
            inside(0.38, -0.88) && !(o > 0.5 && inside(0.2, -0.88) && v < -0.1)
        }
        _ => false,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Head colours (hue, saturation, value) of classes 1..=9, kept away from
/// the red and pink tissue hues.
const PALETTE: [(f64, f64, f64); 9] = [
    (0.15, 0.85, 0.95),
    (0.33, 0.8, 0.8),
    (0.5, 0.85, 0.9),
    (0.62, 0.8, 0.95),
    (0.76, 0.55, 0.85),
    (0.0, 0.0, 0.95),
    (0.42, 0.9, 0.45),
    (0.58, 0.9, 0.45),
    (0.24, 0.9, 0.95),
];

fn draw(class: u32, pose: Pose, phase: f64, grain: &[f64]) -> Rgba32FImage {
    let o = if pose == Pose::Open { 1.0 } else { 0.0 };
    let n = ASSET_SIZE as f64;
    let tint = PALETTE.get(class as usize - 1).map_or([0.5; 3], |&(h, s, v)| hsv(h, s, v));
    let freq = 2.0 + class as f64 * 1.5;
    Rgba32FImage::from_fn(ASSET_SIZE, ASSET_SIZE, |x, y| {
        let u = (x as f64 + 0.5) / n * 2.0 - 1.0;
        let v = (y as f64 + 0.5) / n * 2.0 - 1.0;
        let g = grain[(y * ASSET_SIZE + x) as usize];
        let shaft = u.abs() < 0.13 && v >= 0.05;
        if head(class, u, v, o) {
            let stripe = 1.0 + 0.18 * (freq * std::f64::consts::PI * v + phase).sin();
            let c = tint.map(|t| ((0.25 + 0.75 * t) * stripe + g).clamp(0.0, 1.0) as f32);
            Rgba([c[0], c[1], c[2], 1.0])
        } else if shaft {
            let band = if ((v * 10.0).floor() as i64) % 3 == 0 { 0.12 } else { 0.0 };
            let c = tint.map(|t| (0.2 + band + 0.25 * t + g).clamp(0.0, 1.0) as f32);
            Rgba([c[0], c[1], c[2], 1.0])
        } else {
            Rgba([0.0, 0.0, 0.0, 0.0])
        }
    })
}

/// Procedural instrument bank: nine classes with distinct head geometry and
/// colour on a dark, faintly tinted shaft, two poses each.
pub fn gen_toy_assets(seed: u64) -> AssetBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assets = Vec::with_capacity(18);
    for class in 1..=9u32 {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let grain: Vec<f64> = (0..ASSET_SIZE * ASSET_SIZE).map(|_| rng.gen_range(-0.03..0.03)).collect();
        for pose in [Pose::Open, Pose::Closed] {
            assets.push(ForegroundAsset { class, pose, image: draw(class, pose, phase, &grain) });
        }
    }
    AssetBank::new(assets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silhouette(a: &ForegroundAsset) -> Vec<bool> {
        a.image.pixels().map(|p| p.0[3] >= 0.5).collect()
    }

    #[test]
    fn bank_has_two_poses_per_class() {
        let bank = gen_toy_assets(0);
        assert_eq!(bank.len(), 18);
        bank.check_classes(&(1..=9).collect::<Vec<_>>()).unwrap();
        assert!(bank.check_classes(&[10]).is_err());
        for a in bank.assets() {
            assert!(a.image.pixels().all(|p| p.0[3] == 0.0 || p.0[3] == 1.0));
            assert!(a.alpha_bbox().is_some());
        }
    }

    #[test]
    fn classes_have_distinct_silhouettes() {
        let bank = gen_toy_assets(0);
        for pose in [Pose::Open, Pose::Closed] {
            for a in 1..=9 {
                for b in a + 1..=9 {
                    let (sa, sb) = (silhouette(bank.get(a, pose).unwrap()), silhouette(bank.get(b, pose).unwrap()));
                    let inter = sa.iter().zip(&sb).filter(|(x, y)| **x && **y).count();
                    let union = sa.iter().zip(&sb).filter(|(x, y)| **x || **y).count();
                    let iou = inter as f64 / union as f64;
                    assert!(iou < 0.8, "classes {a} and {b} ({pose:?}) IoU {iou}");
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_toy_assets(5), gen_toy_assets(5));
        assert_ne!(gen_toy_assets(5), gen_toy_assets(6));
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = gen_toy_assets(1);
        bank.save_dir(dir.path()).unwrap();
        assert!(dir.path().join("4_open.png").exists());
        let back = AssetBank::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 18);
        for (a, b) in bank.assets().iter().zip(back.assets()) {
            assert_eq!((a.class, a.pose), (b.class, b.pose));
            assert_eq!(silhouette(a), silhouette(b));
        }
    }
}
