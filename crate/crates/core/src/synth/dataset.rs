use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{imageops, GrayImage, Rgba, Rgba32FImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::assets::{alpha_bbox, gen_toy_assets, AssetBank, Pose};
use super::augment::{augment, augment_background, AugmentationSpec};
use super::background::{gen_background, reference_background, BackgroundAsset, BackgroundKind, BackgroundOrigin};
use super::compose::{blend, harmonize, Placement, SegSample, MAX_PLACEMENTS};
use super::{from_rgb8, mask_to_labels, rgb_to_tensor, to_rgb8, Result, SynthError};
use crate::distill::{ClassGroup, ClassTaxonomy};
use crate::tensor::Tensor;

/// Background source for images containing each instrument group. An image
/// uses a procedural background if any of its instruments is routed there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundRouting {
    pub regular: BackgroundOrigin,
    pub old: BackgroundOrigin,
    pub new: BackgroundOrigin,
}

impl Default for BackgroundRouting {
    fn default() -> Self {
        BackgroundRouting {
            regular: BackgroundOrigin::OpenSourceReal,
            old: BackgroundOrigin::ProceduralSynthetic,
            new: BackgroundOrigin::OpenSourceReal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub taxonomy: ClassTaxonomy,
    /// Exact instance count per class id.
    pub targets: BTreeMap<u32, u32>,
    /// Number of images; when absent, instruments per image are drawn from {1, 2, 3}.
    pub images: Option<usize>,
    pub image_size: usize,
    pub n_background_variations: usize,
    pub n_foreground_variations: usize,
    pub seed: u64,
    /// Seed of the toy instrument bank, shared across splits.
    pub asset_seed: u64,
    pub split: String,
    pub routing: BackgroundRouting,
    pub asset_dir: Option<PathBuf>,
    pub real_background: Option<PathBuf>,
    pub foreground_augmentation: AugmentationSpec,
    pub background_augmentation: AugmentationSpec,
    pub harmonize_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            taxonomy: ClassTaxonomy::surgical(),
            targets: BTreeMap::new(),
            images: None,
            image_size: 64,
            n_background_variations: 50,
            n_foreground_variations: 100,
            seed: 0,
            asset_seed: 0,
            split: "train".into(),
            routing: BackgroundRouting::default(),
            asset_dir: None,
            real_background: None,
            foreground_augmentation: AugmentationSpec { scale: Some([0.7, 1.1]), ..AugmentationSpec::default() },
            background_augmentation: AugmentationSpec::background_default(),
            harmonize_strength: 0.3,
        }
    }
}

impl SynthConfig {
    /// `target` instances of every class in `classes`.
    pub fn balanced(classes: &[u32], target: u32, seed: u64, split: &str) -> Self {
        SynthConfig { targets: classes.iter().map(|&c| (c, target)).collect(), seed, split: split.into(), ..SynthConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.routing.old != BackgroundOrigin::ProceduralSynthetic {
            return Err(SynthError::Privacy);
        }
        if self.targets.is_empty() {
            return Err(SynthError::Config("no class targets".into()));
        }
        for (&c, &t) in &self.targets {
            match self.taxonomy.group(c) {
                None | Some(ClassGroup::Background) => {
                    return Err(SynthError::Config(format!("class {c} is not an instrument of the taxonomy")))
                }
                _ => {}
            }
            if t == 0 {
                return Err(SynthError::Config(format!("target for class {c} must be at least 1")));
            }
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(SynthError::InvalidSize(self.image_size));
        }
        if self.n_background_variations == 0 || self.n_foreground_variations == 0 {
            return Err(SynthError::Config("variation counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.harmonize_strength) {
            return Err(SynthError::Config(format!("harmonize_strength {} outside [0, 1]", self.harmonize_strength)));
        }
        self.foreground_augmentation.validate()?;
        self.background_augmentation.validate()
    }

    fn origin_for(&self, class: u32) -> BackgroundOrigin {
        match self.taxonomy.group(class) {
            Some(ClassGroup::Old) => BackgroundOrigin::ProceduralSynthetic,
            Some(ClassGroup::New) => self.routing.new,
            _ => self.routing.regular,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub class: u32,
    /// `[x0, y0, x1, y1)` of the placed silhouette, clipped to the canvas.
    pub bbox: [u32; 4],
    pub background_origin: BackgroundOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: String,
    pub mask: String,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split: String,
    pub taxonomy: ClassTaxonomy,
    pub image_size: usize,
    pub samples: Vec<SampleRecord>,
    pub class_totals: BTreeMap<u32, u32>,
    pub n_background_variations: usize,
    pub n_foreground_variations: usize,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Reads `manifest.json` from a dataset directory or a direct file path.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Classes with at least one instance.
    pub fn classes_present(&self) -> BTreeSet<u32> {
        self.samples.iter().flat_map(|s| s.instances.iter().map(|i| i.class)).collect()
    }

    pub fn load_mask(&self, index: usize) -> Result<GrayImage> {
        let rec = self.samples.get(index).ok_or_else(|| SynthError::Manifest(format!("no sample {index}")))?;
        Ok(image::open(self.root.join(&rec.mask))?.to_luma8())
    }

    /// Network input `[3, h, w]` in `[0, 1]` and row-major class ids.
    pub fn load_sample(&self, index: usize) -> Result<(Tensor, Vec<u32>)> {
        let rec = self.samples.get(index).ok_or_else(|| SynthError::Manifest(format!("no sample {index}")))?;
        let img = from_rgb8(&image::open(self.root.join(&rec.image))?.to_rgb8());
        Ok((rgb_to_tensor(&img), mask_to_labels(&self.load_mask(index)?)))
    }

    /// Checks files, mask ids and recorded totals.
    pub fn validate(&self) -> Result<()> {
        let allowed: BTreeSet<u32> = std::iter::once(0).chain(self.taxonomy.instrument_classes()).collect();
        let mut totals = BTreeMap::new();
        for (i, rec) in self.samples.iter().enumerate() {
            if !self.root.join(&rec.image).is_file() {
                return Err(SynthError::Manifest(format!("missing image {}", rec.image)));
            }
            let mask = self.load_mask(i)?;
            if let Some(bad) = mask.pixels().map(|p| p.0[0] as u32).find(|c| !allowed.contains(c)) {
                return Err(SynthError::Manifest(format!("mask {} holds class {bad} outside the taxonomy", rec.mask)));
            }
            for inst in &rec.instances {
                *totals.entry(inst.class).or_insert(0u32) += 1;
            }
        }
        if totals != self.class_totals {
            return Err(SynthError::Manifest(format!("instance totals {totals:?} differ from recorded {:?}", self.class_totals)));
        }
        Ok(())
    }
}

/// One generated foreground as placed on the canvas.
#[derive(Debug, Clone)]
pub struct PlacedInstance {
    pub class: u32,
    pub image: Arc<Rgba32FImage>,
    pub x: i64,
    pub y: i64,
    pub z: i32,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    /// The composite before harmonization.
    pub composite: SegSample,
    pub sample: SegSample,
    pub placements: Vec<PlacedInstance>,
    pub origin: BackgroundOrigin,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub samples: Vec<GeneratedSample>,
    pub class_totals: BTreeMap<u32, u32>,
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 40) | index);
    rng
}

const PAD: u32 = 10;

fn padded(img: &Rgba32FImage) -> Rgba32FImage {
    let mut out = Rgba32FImage::from_pixel(img.width() + 2 * PAD, img.height() + 2 * PAD, Rgba([0.0; 4]));
    imageops::overlay(&mut out, img, PAD as i64, PAD as i64);
    out
}

/// Splits `total` instrument tokens into per-image counts in `1..=3`.
fn image_sizes(total: usize, images: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    match images {
        Some(n) => {
            if n == 0 || total < n || total > MAX_PLACEMENTS * n {
                return Err(SynthError::UnreachableTarget(format!("{total} instances cannot fill {n} images with 1 to 3 each")));
            }
            let mut sizes = vec![1; n];
            let mut open: Vec<usize> = (0..n).collect();
            for _ in 0..total - n {
                let k = rng.gen_range(0..open.len());
                let i = open[k];
                sizes[i] += 1;
                if sizes[i] == MAX_PLACEMENTS {
                    open.swap_remove(k);
                }
            }
            Ok(sizes)
        }
        None => {
            let mut sizes = Vec::new();
            let mut left = total;
            while left > 0 {
                let k = rng.gen_range(1..=MAX_PLACEMENTS).min(left);
                sizes.push(k);
                left -= k;
            }
            Ok(sizes)
        }
    }
}

fn load_real_background(cfg: &SynthConfig) -> Result<BackgroundAsset> {
    match &cfg.real_background {
        None => reference_background(cfg.image_size),
        Some(path) => {
            let img = image::open(path)?.to_rgb8();
            let s = cfg.image_size as u32;
            let img = imageops::resize(&img, s, s, imageops::FilterType::Triangle);
            Ok(BackgroundAsset { image: from_rgb8(&img), origin: BackgroundOrigin::OpenSourceReal })
        }
    }
}

/// Builds every sample in memory. Generation is parallel across images; each
/// image draws from its own seeded stream so the result does not depend on
/// scheduling.
pub fn generate(cfg: &SynthConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let bank = match &cfg.asset_dir {
        Some(dir) => AssetBank::load_dir(dir)?,
        None => gen_toy_assets(cfg.asset_seed),
    };
    let classes: Vec<u32> = cfg.targets.keys().copied().collect();
    bank.check_classes(&classes)?;

    let mut master = stream(cfg.seed, 0, 0);
    let mut tokens: Vec<u32> = cfg.targets.iter().flat_map(|(&c, &t)| std::iter::repeat_n(c, t as usize)).collect();
    tokens.shuffle(&mut master);
    let sizes = image_sizes(tokens.len(), cfg.images, &mut master)?;
    let mut chunks = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for k in sizes {
        chunks.push(tokens[at..at + k].to_vec());
        at += k;
    }

    let needs = |o: BackgroundOrigin| chunks.iter().any(|ch| image_origin(cfg, ch) == o);
    let nb = cfg.n_background_variations;
    let real_pool: Vec<BackgroundAsset> = if needs(BackgroundOrigin::OpenSourceReal) {
        let base = load_real_background(cfg)?;
        (0..nb)
            .into_par_iter()
            .map(|j| {
                let image = augment_background(&base.image, &cfg.background_augmentation, &mut stream(cfg.seed, 1, j as u64))?;
                Ok(BackgroundAsset { image, origin: BackgroundOrigin::OpenSourceReal })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let synthetic_pool: Vec<BackgroundAsset> = if needs(BackgroundOrigin::ProceduralSynthetic) {
        (0..nb)
            .into_par_iter()
            .map(|j| {
                let mut rng = stream(cfg.seed, 2, j as u64);
                let base = gen_background(BackgroundKind::Procedural, rng.gen(), cfg.image_size)?;
                let image = augment_background(&base.image, &cfg.background_augmentation, &mut rng)?;
                Ok(BackgroundAsset { image, origin: BackgroundOrigin::ProceduralSynthetic })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let nf = cfg.n_foreground_variations;
    let mut fg_pool: BTreeMap<u32, Vec<Arc<Rgba32FImage>>> = BTreeMap::new();
    for &c in &classes {
        let sources =
            [padded(&bank.get(c, Pose::Open).expect("checked").image), padded(&bank.get(c, Pose::Closed).expect("checked").image)];
        let variants: Vec<Arc<Rgba32FImage>> = (0..nf)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream(cfg.seed, 3, (c as u64) << 20 | k as u64);
                let mut img = augment(&sources[k % 2], &cfg.foreground_augmentation, &mut rng)?;
                if alpha_bbox(&img).is_none() {
                    img = sources[k % 2].clone();
                }
                Ok(Arc::new(img))
            })
            .collect::<Result<_>>()?;
        fg_pool.insert(c, variants);
    }

    let samples: Vec<GeneratedSample> = chunks
        .par_iter()
        .enumerate()
        .map(|(i, chunk)| compose_one(cfg, i, chunk, &real_pool, &synthetic_pool, &fg_pool))
        .collect::<Result<_>>()?;
    let mut class_totals = BTreeMap::new();
    for s in &samples {
        for inst in &s.instances {
            *class_totals.entry(inst.class).or_insert(0u32) += 1;
        }
    }
    Ok(GeneratedDataset { samples, class_totals })
}

fn image_origin(cfg: &SynthConfig, classes: &[u32]) -> BackgroundOrigin {
    if classes.iter().any(|&c| cfg.origin_for(c) == BackgroundOrigin::ProceduralSynthetic) {
        BackgroundOrigin::ProceduralSynthetic
    } else {
        BackgroundOrigin::OpenSourceReal
    }
}

fn compose_one(
    cfg: &SynthConfig,
    index: usize,
    classes: &[u32],
    real_pool: &[BackgroundAsset],
    synthetic_pool: &[BackgroundAsset],
    fg_pool: &BTreeMap<u32, Vec<Arc<Rgba32FImage>>>,
) -> Result<GeneratedSample> {
    let mut rng = stream(cfg.seed, 4, index as u64);
    let origin = image_origin(cfg, classes);
    let pool = match origin {
        BackgroundOrigin::OpenSourceReal => real_pool,
        BackgroundOrigin::ProceduralSynthetic => synthetic_pool,
    };
    let bg = &pool[rng.gen_range(0..pool.len())];
    let size = cfg.image_size as i64;
    let mut placed = Vec::with_capacity(classes.len());
    let mut instances = Vec::with_capacity(classes.len());
    for (z, &class) in classes.iter().enumerate() {
        let variants = &fg_pool[&class];
        let img = variants[rng.gen_range(0..variants.len())].clone();
        let [bx0, by0, bx1, by1] = alpha_bbox(&img).expect("non-empty silhouette").map(|v| v as i64);
        let (bw, bh) = (bx1 - bx0, by1 - by0);
        // Box left/top edge range keeping at least half of each extent, so at least a quarter of the box area, on the canvas.
        let left = rng.gen_range(-bw / 2..=size - (bw + 1) / 2);
        let top = rng.gen_range(-bh / 2..=size - (bh + 1) / 2);
        let (x, y) = (left - bx0, top - by0);
        let clip = |v: i64| v.clamp(0, size) as u32;
        instances.push(InstanceRecord { class, bbox: [clip(left), clip(top), clip(left + bw), clip(top + bh)], background_origin: origin });
        placed.push(PlacedInstance { class, image: img, x, y, z: z as i32 });
    }
    let placements: Vec<Placement> = placed.iter().map(|p| Placement { class: p.class, image: &p.image, x: p.x, y: p.y, z: p.z }).collect();
    let composite = blend(bg, &placements)?;
    let sample = harmonize(&composite, cfg.harmonize_strength);
    Ok(GeneratedSample { composite, sample, placements: placed, origin, instances })
}

/// Generates the dataset and writes `images/`, `masks/` and `manifest.json` under `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let data = generate(cfg)?;
    write_dataset(cfg, &data, out_dir)
}

pub fn write_dataset(cfg: &SynthConfig, data: &GeneratedDataset, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let records: Vec<SampleRecord> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let image = format!("images/{i:05}.png");
            let mask = format!("masks/{i:05}.png");
            to_rgb8(&s.sample.image).save_with_format(out_dir.join(&image), image::ImageFormat::Png)?;
            s.sample.mask.save_with_format(out_dir.join(&mask), image::ImageFormat::Png)?;
            Ok(SampleRecord { image, mask, instances: s.instances.clone() })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        seed: cfg.seed,
        split: cfg.split.clone(),
        taxonomy: cfg.taxonomy.clone(),
        image_size: cfg.image_size,
        samples: records,
        class_totals: data.class_totals.clone(),
        n_background_variations: cfg.n_background_variations,
        n_foreground_variations: cfg.n_foreground_variations,
        root: out_dir.to_path_buf(),
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_background_variations: 4,
            n_foreground_variations: 6,
            image_size: 32,
            ..SynthConfig::balanced(&[1, 4, 8], 5, seed, "train")
        }
    }

    #[test]
    fn totals_hit_targets() {
        let d = generate(&small(1)).unwrap();
        assert_eq!(d.class_totals, [(1, 5), (4, 5), (8, 5)].into_iter().collect());
        assert!(d.samples.iter().all(|s| (1..=3).contains(&s.placements.len())));
    }

    #[test]
    fn exact_image_count() {
        let cfg = SynthConfig { images: Some(7), ..small(2) };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.samples.len(), 7);
        let bad = SynthConfig { images: Some(3), ..small(2) };
        assert!(matches!(generate(&bad), Err(SynthError::UnreachableTarget(_))));
        let bad = SynthConfig { images: Some(16), ..small(2) };
        assert!(matches!(generate(&bad), Err(SynthError::UnreachableTarget(_))));
    }

    #[test]
    fn old_classes_only_on_procedural_backgrounds() {
        let d = generate(&small(3)).unwrap();
        for s in &d.samples {
            if s.placements.iter().any(|p| p.class == 4) {
                assert_eq!(s.origin, BackgroundOrigin::ProceduralSynthetic);
            }
        }
        let leaky = SynthConfig {
            routing: BackgroundRouting { old: BackgroundOrigin::OpenSourceReal, ..BackgroundRouting::default() },
            ..small(3)
        };
        assert!(matches!(generate(&leaky), Err(SynthError::Privacy)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(0);
        cfg.targets.insert(12, 3);
        assert!(matches!(generate(&cfg), Err(SynthError::Config(_))));
        let cfg = SynthConfig { image_size: 30, ..small(0) };
        assert!(matches!(generate(&cfg), Err(SynthError::InvalidSize(30))));
        assert!(serde_json::from_str::<SynthConfig>(r#"{"targets":{"1":2},"bogus":1}"#).is_err());
        let parsed: SynthConfig = serde_json::from_str(r#"{"targets":{"1":2,"9":3},"seed":4}"#).unwrap();
        assert_eq!(parsed.targets[&9], 3);
        assert_eq!(parsed.n_background_variations, 50);
    }

    #[test]
    fn written_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(5);
        let m = synth_dataset(&cfg, dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, DatasetManifest { root: back.root.clone(), ..m.clone() });
        back.validate().unwrap();
        let (img, labels) = back.load_sample(0).unwrap();
        assert_eq!(img.shape(), &[3, 32, 32]);
        assert_eq!(labels.len(), 32 * 32);
    }
}
