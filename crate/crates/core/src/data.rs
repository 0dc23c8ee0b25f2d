//! Paired and unpaired image datasets.
//!
//! Images are decoded once and kept as 8-bit buffers. Geometry (crop, resize,
//! flip, rotation) is recomputed on every access from a stream seeded by
//! `(seed, epoch, index)`, so any sample can be reproduced without replaying
//! the ones before it. Both members of a pair always receive the same draw.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::RgbImage;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;

pub const DEFAULT_MEAN: [f64; 3] = [0.64, 0.60, 0.58];
pub const DEFAULT_STD: [f64; 3] = [0.14, 0.15, 0.152];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Output `(height, width)`.
    pub resize: (usize, usize),
    /// Square crop taken before resizing, only from sources larger than it.
    pub random_crop: Option<usize>,
    pub hflip_prob: f64,
    pub rotation_degrees: f64,
    pub normalize: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            resize: (256, 256),
            random_crop: None,
            hflip_prob: 0.5,
            rotation_degrees: 10.0,
            normalize: false,
            mean: DEFAULT_MEAN,
            std: DEFAULT_STD,
        }
    }
}

impl AugmentationConfig {
    /// Resize only, [0, 1] output.
    pub fn plain(size: usize) -> Self {
        Self {
            resize: (size, size),
            hflip_prob: 0.0,
            rotation_degrees: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize.0 == 0 || self.resize.1 == 0 {
            return Err(Error::Config("resize dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !self.rotation_degrees.is_finite() || self.rotation_degrees < 0.0 {
            return Err(Error::Config("rotation_degrees must be finite and non-negative".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("std components must be positive, got {:?}", self.std)));
        }
        if self.random_crop == Some(0) {
            return Err(Error::Config("random_crop must be positive".into()));
        }
        Ok(())
    }

    fn geometry_only(&self) -> Self {
        Self {
            hflip_prob: 0.0,
            rotation_degrees: 0.0,
            ..self.clone()
        }
    }
}

/// `(x - mean) / std` per channel.
pub fn normalize(x: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    let (m, s) = channel_tensors(x, mean, std)?;
    Ok(x.broadcast_sub(&m)?.broadcast_div(&s)?)
}

pub fn denormalize(x: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    let (m, s) = channel_tensors(x, mean, std)?;
    Ok(x.broadcast_mul(&s)?.broadcast_add(&m)?)
}

fn channel_tensors(x: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Result<(Tensor, Tensor)> {
    let m = Tensor::new(mean, &Device::Cpu)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    let s = Tensor::new(std, &Device::Cpu)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    Ok((m, s))
}

/// Random draw shared by both members of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Draw {
    crop_fx: f64,
    crop_fy: f64,
    flip: bool,
    angle_deg: f64,
}

fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    // splitmix-style mixing so nearby (epoch, index) pairs decorrelate
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(aug: &AugmentationConfig, seed: u64, epoch: u64, index: u64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, index));
    let crop_fx = rng.random::<f64>();
    let crop_fy = rng.random::<f64>();
    let flip = rng.random::<f64>() < aug.hflip_prob;
    let angle_deg = if aug.rotation_degrees > 0.0 {
        rng.random_range(-aug.rotation_degrees..=aug.rotation_degrees)
    } else {
        0.0
    };
    Draw {
        crop_fx,
        crop_fy,
        flip,
        angle_deg,
    }
}

fn apply(img: &RgbImage, aug: &AugmentationConfig, d: &Draw) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut src = img.clone();
    if let Some(c) = aug.random_crop {
        if w > c && h > c {
            let x0 = (d.crop_fx * (w - c) as f64).floor() as u32;
            let y0 = (d.crop_fy * (h - c) as f64).floor() as u32;
            src = image::imageops::crop_imm(img, x0, y0, c as u32, c as u32).to_image();
        }
    }
    let (oh, ow) = aug.resize;
    let resized = imageio::resize(&src, oh, ow);
    let mut planar = imageio::rgb_to_planar(&resized);
    if d.flip {
        hflip(&mut planar, oh, ow);
    }
    if d.angle_deg != 0.0 {
        planar = rotate(&planar, oh, ow, d.angle_deg);
    }
    let t = Tensor::from_vec(planar, (1, 3, oh, ow), &Device::Cpu)?;
    if aug.normalize {
        normalize(&t, &aug.mean, &aug.std)
    } else {
        Ok(t)
    }
}

fn hflip(planar: &mut [f32], h: usize, w: usize) {
    for row in planar.chunks_exact_mut(w).take(3 * h) {
        row.reverse();
    }
}

/// Bilinear rotation about the image center; samples outside the source are zero.
fn rotate(planar: &[f32], h: usize, w: usize, angle_deg: f64) -> Vec<f32> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0f32; planar.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let p = &planar[c * h * w..(c + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[c * h * w + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Sorted image files in a directory, keyed by stem.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !imageio::is_image_path(&path) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.entry(stem.to_string()).or_insert(path);
        }
    }
    Ok(out)
}

/// A file that could not be decoded and was left out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedDatasetSpec {
    pub hazy_dir: PathBuf,
    pub clean_dir: PathBuf,
    /// Keep only the first `limit` pairs in sorted filename order.
    pub limit: Option<usize>,
}

#[derive(Clone, Debug)]
struct PairItem {
    id: String,
    hazy: RgbImage,
    clean: RgbImage,
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    items: Vec<PairItem>,
    aug: AugmentationConfig,
    seed: u64,
    skipped: Vec<Skipped>,
}

/// Loads `(hazy, clean)` pairs matched by file stem.
pub fn load_paired(spec: &PairedDatasetSpec, aug: &AugmentationConfig, seed: u64) -> Result<PairedDataset> {
    aug.validate()?;
    let mut dataset = PairedDataset {
        items: Vec::new(),
        aug: aug.clone(),
        seed,
        skipped: Vec::new(),
    };
    let limit = spec.limit.unwrap_or(usize::MAX);
    if limit == 0 {
        return Ok(dataset);
    }
    let hazy = list_images(&spec.hazy_dir)?;
    if hazy.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", spec.hazy_dir.display())));
    }
    let clean = list_images(&spec.clean_dir)?;
    for (stem, hazy_path) in &hazy {
        if dataset.items.len() == limit {
            break;
        }
        let clean_path = clean.get(stem).ok_or_else(|| {
            Error::Dataset(format!(
                "{} has no counterpart named `{stem}.*` in {}",
                hazy_path.display(),
                spec.clean_dir.display()
            ))
        })?;
        let decoded = imageio::load_rgb(hazy_path).and_then(|h| Ok((h, imageio::load_rgb(clean_path)?)));
        match decoded {
            Ok((h, c)) => dataset.items.push(PairItem {
                id: stem.clone(),
                hazy: h,
                clean: c,
            }),
            Err(e) => {
                tracing::warn!("skipping pair `{stem}`: {e}");
                dataset.skipped.push(Skipped {
                    path: hazy_path.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(dataset)
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }

    pub fn skipped(&self) -> &[Skipped] {
        &self.skipped
    }

    pub fn augmentation(&self) -> &AugmentationConfig {
        &self.aug
    }

    /// Same pairs, different transform (e.g. evaluation without augmentation).
    pub fn with_augmentation(&self, aug: AugmentationConfig) -> Result<Self> {
        aug.validate()?;
        Ok(Self {
            aug,
            ..self.clone()
        })
    }

    /// Augmented `(hazy, clean)`, each `(1, 3, h, w)`.
    pub fn get(&self, index: usize, epoch: u64) -> Result<(Tensor, Tensor)> {
        let item = self
            .items
            .get(index)
            .ok_or_else(|| Error::Input(format!("pair index {index} out of range")))?;
        let d = draw(&self.aug, self.seed, epoch, index as u64);
        Ok((apply(&item.hazy, &self.aug, &d)?, apply(&item.clean, &self.aug, &d)?))
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.items.get(index).map(|i| i.id.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnpairedDatasetSpec {
    pub image_dir: PathBuf,
    /// Seeded sample without replacement; clamped to what is available.
    pub sample_count: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ImageDataset {
    items: Vec<(String, RgbImage)>,
    aug: AugmentationConfig,
    seed: u64,
    skipped: Vec<Skipped>,
}

/// Loads one domain of unpaired images. Geometry is resize (and crop) only.
pub fn load_unpaired(spec: &UnpairedDatasetSpec, aug: &AugmentationConfig, seed: u64) -> Result<ImageDataset> {
    aug.validate()?;
    let files: Vec<(String, PathBuf)> = list_images(&spec.image_dir)?.into_iter().collect();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", spec.image_dir.display())));
    }
    let chosen: Vec<usize> = match spec.sample_count {
        Some(n) if n < files.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, files.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        Some(n) => {
            if n > files.len() {
                tracing::warn!(
                    "requested {n} images but {} has only {}; using all",
                    spec.image_dir.display(),
                    files.len()
                );
            }
            (0..files.len()).collect()
        }
        None => (0..files.len()).collect(),
    };
    let mut items = Vec::with_capacity(chosen.len());
    let mut skipped = Vec::new();
    for i in chosen {
        let (stem, path) = &files[i];
        match imageio::load_rgb(path) {
            Ok(img) => items.push((stem.clone(), img)),
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                skipped.push(Skipped {
                    path: path.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!(
            "no readable images in {}",
            spec.image_dir.display()
        )));
    }
    Ok(ImageDataset {
        items,
        aug: aug.geometry_only(),
        seed,
        skipped,
    })
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(id, _)| id.as_str())
    }

    pub fn skipped(&self) -> &[Skipped] {
        &self.skipped
    }

    pub fn get(&self, index: usize, epoch: u64) -> Result<Tensor> {
        let (_, img) = self
            .items
            .get(index)
            .ok_or_else(|| Error::Input(format!("image index {index} out of range")))?;
        let d = draw(&self.aug, self.seed, epoch, index as u64);
        apply(img, &self.aug, &d)
    }
}

/// Deterministic per-epoch visiting order.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ 0x5EED, epoch, u64::MAX));
    order.shuffle(&mut rng);
    order
}

/// Fixed dataset layout under a root directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn paired_hazy(&self) -> PathBuf {
        self.root.join("paired").join("hazy")
    }

    pub fn paired_clean(&self) -> PathBuf {
        self.root.join("paired").join("clean")
    }

    pub fn unpaired_hazy(&self) -> PathBuf {
        self.root.join("unpaired_hazy")
    }

    pub fn unpaired_clean(&self) -> PathBuf {
        self.root.join("unpaired_clean")
    }

    /// Optional held-out pairs; evaluation falls back to `paired/` without them.
    pub fn test_hazy(&self) -> PathBuf {
        self.root.join("test").join("hazy")
    }

    pub fn test_clean(&self) -> PathBuf {
        self.root.join("test").join("clean")
    }

    pub fn paired(&self, limit: Option<usize>) -> PairedDatasetSpec {
        PairedDatasetSpec {
            hazy_dir: self.paired_hazy(),
            clean_dir: self.paired_clean(),
            limit,
        }
    }

    pub fn evaluation(&self) -> PairedDatasetSpec {
        if self.test_hazy().is_dir() && self.test_clean().is_dir() {
            PairedDatasetSpec {
                hazy_dir: self.test_hazy(),
                clean_dir: self.test_clean(),
                limit: None,
            }
        } else {
            self.paired(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, seed: u8) {
        let mut img = RgbImage::new(w, h);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = image::Rgb([
                (x as u8).wrapping_mul(7).wrapping_add(seed),
                (y as u8).wrapping_mul(5),
                ((x + y) as u8).wrapping_mul(3),
            ]);
        }
        img.save(path).unwrap();
    }

    fn make_pairs(dir: &Path, n: usize) -> PairedDatasetSpec {
        let hazy = dir.join("hazy");
        let clean = dir.join("clean");
        std::fs::create_dir_all(&hazy).unwrap();
        std::fs::create_dir_all(&clean).unwrap();
        for i in 0..n {
            write_png(&hazy.join(format!("img_{i:03}.png")), 40, 36, i as u8);
            write_png(&clean.join(format!("img_{i:03}.png")), 40, 36, i as u8);
        }
        PairedDatasetSpec {
            hazy_dir: hazy,
            clean_dir: clean,
            limit: None,
        }
    }

    fn aug() -> AugmentationConfig {
        AugmentationConfig {
            resize: (32, 32),
            random_crop: Some(30),
            ..AugmentationConfig::default()
        }
    }

    #[test]
    fn limit_zero_is_empty_without_touching_disk() {
        let spec = PairedDatasetSpec {
            hazy_dir: "/nonexistent/hazy".into(),
            clean_dir: "/nonexistent/clean".into(),
            limit: Some(0),
        };
        assert!(load_paired(&spec, &aug(), 0).unwrap().is_empty());
    }

    #[test]
    fn limit_takes_first_pairs_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = make_pairs(dir.path(), 30);
        spec.limit = Some(25);
        let ds = load_paired(&spec, &aug(), 0).unwrap();
        assert_eq!(ds.len(), 25);
        let ids: Vec<_> = ds.ids().map(str::to_string).collect();
        assert_eq!(ids.first().unwrap(), "img_000");
        assert_eq!(ids.last().unwrap(), "img_024");
        spec.limit = Some(100);
        assert_eq!(load_paired(&spec, &aug(), 0).unwrap().len(), 30);
    }

    #[test]
    fn orphan_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_pairs(dir.path(), 3);
        write_png(&spec.hazy_dir.join("lonely.png"), 20, 20, 0);
        let err = load_paired(&spec, &aug(), 0).unwrap_err().to_string();
        assert!(err.contains("lonely.png"), "{err}");
    }

    #[test]
    fn unreadable_files_are_skipped_and_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_pairs(dir.path(), 3);
        std::fs::write(spec.hazy_dir.join("broken.png"), b"not a png").unwrap();
        std::fs::write(spec.clean_dir.join("broken.png"), b"not a png").unwrap();
        let ds = load_paired(&spec, &aug(), 0).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.skipped().len(), 1);
        assert!(ds.skipped()[0].path.ends_with("broken.png"));
    }

    #[test]
    fn augmentation_is_deterministic_and_shared_within_a_pair() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_pairs(dir.path(), 4);
        let a = load_paired(&spec, &aug(), 9).unwrap();
        let b = load_paired(&spec, &aug(), 9).unwrap();
        for epoch in 0..3 {
            for i in 0..4 {
                let (h1, c1) = a.get(i, epoch).unwrap();
                let (h2, c2) = b.get(i, epoch).unwrap();
                let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert_eq!(v(&h1), v(&h2));
                assert_eq!(v(&c1), v(&c2));
                // identical sources: identical geometry means zero difference
                assert_eq!(v(&h1), v(&c1));
            }
        }
    }

    #[test]
    fn unpaired_sampling_is_seeded_and_clamped() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            write_png(&dir.path().join(format!("u{i}.png")), 24, 24, i);
        }
        let spec = UnpairedDatasetSpec {
            image_dir: dir.path().to_path_buf(),
            sample_count: Some(4),
        };
        let ids = |seed| {
            load_unpaired(&spec, &aug(), seed)
                .unwrap()
                .ids()
                .map(str::to_string)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(1), ids(1));
        assert_eq!(ids(1).len(), 4);
        let all = UnpairedDatasetSpec {
            sample_count: Some(50),
            ..spec.clone()
        };
        let ds = load_unpaired(&all, &aug(), 1).unwrap();
        assert_eq!(ds.len(), 10);
        let t = ds.get(3, 0).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn empty_unpaired_dir_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = UnpairedDatasetSpec {
            image_dir: dir.path().to_path_buf(),
            sample_count: None,
        };
        assert!(matches!(load_unpaired(&spec, &aug(), 0), Err(Error::Dataset(_))));
    }

    #[test]
    fn normalize_round_trip() {
        let x = Tensor::rand(0f32, 1f32, (2, 3, 5, 7), &Device::Cpu).unwrap();
        let y = denormalize(&normalize(&x, &DEFAULT_MEAN, &DEFAULT_STD).unwrap(), &DEFAULT_MEAN, &DEFAULT_STD).unwrap();
        let diff = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn rotation_by_zero_and_flip_twice_are_identity() {
        let (h, w) = (5, 6);
        let planar: Vec<f32> = (0..3 * h * w).map(|i| i as f32).collect();
        assert_eq!(rotate(&planar, h, w, 0.0), planar);
        let mut flipped = planar.clone();
        hflip(&mut flipped, h, w);
        assert_ne!(flipped, planar);
        hflip(&mut flipped, h, w);
        assert_eq!(flipped, planar);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(17, 3, 2);
        assert_eq!(o, epoch_order(17, 3, 2));
        o.sort_unstable();
        assert_eq!(o, (0..17).collect::<Vec<_>>());
    }
}
