//! Synthetic degradations and procedural scenes for toy datasets.

use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;

pub const AIRLIGHT: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Haze,
    Rain,
    Snow,
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haze" => Ok(Self::Haze),
            "rain" => Ok(Self::Rain),
            "snow" => Ok(Self::Snow),
            other => Err(Error::Config(format!(
                "unknown degradation `{other}` (expected haze, rain or snow)"
            ))),
        }
    }
}

/// Scalar transmission for a haze severity.
pub fn transmission(severity: f64) -> f32 {
    (1.0 - 0.8 * severity) as f32
}

/// Degrades a `(b, 3, h, w)` batch in [0, 1]. Severity 0 returns the input.
pub fn synthesize_degradation(clean: &Tensor, kind: DegradationKind, severity: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Input(format!("severity {severity} outside [0, 1]")));
    }
    let (b, c, h, w) = clean
        .dims4()
        .map_err(|_| Error::Input(format!("expected a (batch, 3, h, w) image, got {:?}", clean.dims())))?;
    if c != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {c}")));
    }
    let dtype = clean.dtype();
    let mut px = clean.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    match kind {
        DegradationKind::Haze => {
            let t = transmission(severity);
            px.iter_mut().for_each(|v| *v = *v * t + AIRLIGHT * (1.0 - t));
        }
        DegradationKind::Rain | DegradationKind::Snow => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..b {
                let mask = match kind {
                    DegradationKind::Rain => rain_mask(&mut rng, h, w, severity),
                    _ => snow_mask(&mut rng, h, w, severity),
                };
                for ch in 0..3 {
                    let start = (i * 3 + ch) * plane;
                    px[start..start + plane]
                        .iter_mut()
                        .zip(&mask)
                        .for_each(|(v, m)| *v += m);
                }
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Tensor::from_vec(px, (b, c, h, w), clean.device())?.to_dtype(dtype)?)
}

/// Thin slanted streaks.
fn rain_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, severity: f64) -> Vec<f32> {
    let mut mask = vec![0f32; h * w];
    let count = (severity * (h * w) as f64 / 40.0).round() as usize;
    let amplitude = (0.35 * severity + 0.15) as f32;
    let slope = rng.random_range(-0.35..0.35f64);
    for _ in 0..count {
        let len = rng.random_range(4..(h / 4).max(5));
        let (x0, y0) = (rng.random_range(0.0..w as f64), rng.random_range(0..h));
        for step in 0..len {
            let y = y0 + step;
            let x = (x0 + slope * step as f64).round();
            if y >= h || x < 0.0 || x >= w as f64 {
                break;
            }
            let cell = &mut mask[y * w + x as usize];
            *cell = cell.max(amplitude);
        }
    }
    mask
}

/// Soft round flakes.
fn snow_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, severity: f64) -> Vec<f32> {
    let mut mask = vec![0f32; h * w];
    let count = (severity * (h * w) as f64 / 120.0).round() as usize;
    for _ in 0..count {
        let r = rng.random_range(0.8..(1.0 + 2.5 * severity));
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let reach = r.ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let falloff = (1.0 - d / r).max(0.0) as f32;
                let cell = &mut mask[y as usize * w + x as usize];
                *cell = cell.max(0.9 * falloff);
            }
        }
    }
    mask
}

/// Deterministic clean scene: a sky-to-ground gradient with a few shapes.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut px = vec![0f32; 3 * plane];
    let top: [f32; 3] = [rng.random_range(0.4..0.8), rng.random_range(0.5..0.85), rng.random_range(0.7..1.0)];
    let bottom: [f32; 3] = [rng.random_range(0.1..0.45), rng.random_range(0.15..0.5), rng.random_range(0.05..0.35)];
    for y in 0..height {
        let a = y as f32 / (height.max(2) - 1) as f32;
        for ch in 0..3 {
            let v = top[ch] * (1.0 - a) + bottom[ch] * a;
            px[ch * plane + y * width..ch * plane + (y + 1) * width].fill(v);
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let rx = rng.random_range(0.08..0.3) * width as f32;
        let ry = rng.random_range(0.08..0.3) * height as f32;
        let round = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if round { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    let shade = 0.85 + 0.15 * (x as f32 / width as f32);
                    for ch in 0..3 {
                        px[ch * plane + y * width + x] = (color[ch] * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(px, (1, 3, height, width), &Device::Cpu)?)
}

/// Sizes for [`write_toy_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyDatasetSpec {
    pub paired: usize,
    pub unpaired: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            paired: 25,
            unpaired: 8,
            test: 4,
            size: 32,
            seed: 0,
        }
    }
}

fn hazy_pair(seed: u64, size: usize) -> Result<(Tensor, Tensor)> {
    let clean = procedural_scene(size, size, seed)?;
    let severity = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5).random_range(0.3..0.7);
    let hazy = synthesize_degradation(&clean, DegradationKind::Haze, severity, seed)?;
    Ok((hazy, clean))
}

/// Writes `paired/`, `unpaired_hazy/`, `unpaired_clean/` and `test/` under `root`.
pub fn write_toy_dataset(root: &Path, spec: &ToyDatasetSpec) -> Result<()> {
    let dirs = [
        "paired/hazy",
        "paired/clean",
        "unpaired_hazy",
        "unpaired_clean",
        "test/hazy",
        "test/clean",
    ];
    for d in dirs {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let base = spec.seed.wrapping_mul(1_000_003);
    for i in 0..spec.paired {
        let (hazy, clean) = hazy_pair(base + i as u64, spec.size)?;
        imageio::save_png(&root.join(format!("paired/hazy/img_{i:03}.png")), &hazy)?;
        imageio::save_png(&root.join(format!("paired/clean/img_{i:03}.png")), &clean)?;
    }
    for i in 0..spec.unpaired {
        let (hazy, _) = hazy_pair(base + 10_000 + i as u64, spec.size)?;
        let (_, clean) = hazy_pair(base + 20_000 + i as u64, spec.size)?;
        imageio::save_png(&root.join(format!("unpaired_hazy/u_{i:03}.png")), &hazy)?;
        imageio::save_png(&root.join(format!("unpaired_clean/u_{i:03}.png")), &clean)?;
    }
    for i in 0..spec.test {
        let (hazy, clean) = hazy_pair(base + 30_000 + i as u64, spec.size)?;
        imageio::save_png(&root.join(format!("test/hazy/t_{i:03}.png")), &hazy)?;
        imageio::save_png(&root.join(format!("test/clean/t_{i:03}.png")), &clean)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn zero_severity_is_identity() {
        let clean = procedural_scene(24, 24, 3).unwrap();
        for kind in [DegradationKind::Haze, DegradationKind::Rain, DegradationKind::Snow] {
            let out = synthesize_degradation(&clean, kind, 0.0, 1).unwrap();
            assert!(max_abs(&out, &clean) <= 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn full_haze_on_black_is_uniform_airlight_share() {
        let black = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let out = synthesize_degradation(&black, DegradationKind::Haze, 1.0, 0).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (x - 0.72).abs() < 1e-6));
    }

    #[test]
    fn streaks_and_flakes_are_seeded_and_clipped() {
        let clean = procedural_scene(32, 32, 5).unwrap();
        for kind in [DegradationKind::Rain, DegradationKind::Snow] {
            let a = synthesize_degradation(&clean, kind, 0.7, 11).unwrap();
            let b = synthesize_degradation(&clean, kind, 0.7, 11).unwrap();
            let c = synthesize_degradation(&clean, kind, 0.7, 12).unwrap();
            assert_eq!(max_abs(&a, &b), 0.0);
            assert!(max_abs(&a, &c) > 0.0);
            assert!(max_abs(&a, &clean) > 0.0);
            let v = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn haze_psnr_falls_with_severity() {
        let clean = procedural_scene(32, 32, 9).unwrap();
        let scores: Vec<f64> = [0.2, 0.5, 0.8]
            .iter()
            .map(|s| {
                let d = synthesize_degradation(&clean, DegradationKind::Haze, *s, 0).unwrap();
                psnr(&d, &clean, 1.0).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn rejects_out_of_range_severity() {
        let clean = procedural_scene(16, 16, 0).unwrap();
        assert!(synthesize_degradation(&clean, DegradationKind::Haze, 1.5, 0).is_err());
        assert!("fog".parse::<DegradationKind>().is_err());
        assert_eq!("Rain".parse::<DegradationKind>().unwrap(), DegradationKind::Rain);
    }

    #[test]
    fn toy_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDatasetSpec {
            paired: 3,
            unpaired: 2,
            test: 1,
            size: 20,
            seed: 4,
        };
        write_toy_dataset(dir.path(), &spec).unwrap();
        let count = |d: &str| std::fs::read_dir(dir.path().join(d)).unwrap().count();
        assert_eq!(count("paired/hazy"), 3);
        assert_eq!(count("paired/clean"), 3);
        assert_eq!(count("unpaired_hazy"), 2);
        assert_eq!(count("test/clean"), 1);
    }
}
