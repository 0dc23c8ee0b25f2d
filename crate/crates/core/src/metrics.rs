//! PSNR and SSIM in double precision.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported for identical images, where the true PSNR is infinite.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub image_id: String,
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean over a set of reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricSummary {
    pub fn from_reports(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(Self {
            count: reports.len(),
            psnr_db: reports.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        })
    }
}

/// Flattens a tensor to f64 along with its dims.
fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `10 log10(range^2 / MSE)` over every element; [`PSNR_CAP_DB`] when MSE is zero.
pub fn psnr(pred: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    same_shape(pred, reference)?;
    psnr_slices(&values(pred)?, &values(reference)?, data_range)
}

pub fn psnr_slices(pred: &[f64], reference: &[f64], data_range: f64) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} vs {}",
            pred.len(),
            reference.len()
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::Input(format!("data_range must be positive, got {data_range}")));
    }
    if pred.is_empty() {
        return Err(Error::Input("psnr of an empty image".into()));
    }
    let mse = pred
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM of one plane pair (valid windows only).
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&aa, h, w, &taps);
    let e_bb = filter_valid(&bb, h, w, &taps);
    let e_ab = filter_valid(&ab, h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM over a `(b, c, h, w)` batch: 11x11 Gaussian window, sigma 1.5.
pub fn ssim(pred: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    same_shape(pred, reference)?;
    let (b, c, h, w) = pred
        .dims4()
        .map_err(|_| Error::Input(format!("ssim expects a rank-4 tensor, got {:?}", pred.dims())))?;
    if !(data_range > 0.0) {
        return Err(Error::Input(format!("data_range must be positive, got {data_range}")));
    }
    let (pa, ra) = (values(pred)?, values(reference)?);
    let plane = h * w;
    let mut total = 0.0;
    for i in 0..b * c {
        let range = i * plane..(i + 1) * plane;
        total += ssim_plane(&pa[range.clone()], &ra[range], h, w, data_range)?;
    }
    Ok(total / (b * c) as f64)
}

pub fn write_reports_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for report in reports {
        writer.serialize(report)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_reports_json(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, reports)?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(v: Vec<f64>, dims: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    fn random(seed: u64, dims: (usize, usize, usize, usize)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        tensor((0..n).map(|_| rng.random::<f64>()).collect(), dims)
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let x = random(1, (1, 3, 16, 16));
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_error_closed_form() {
        let x = tensor(vec![0.2; 3 * 16 * 16], (1, 3, 16, 16));
        let y = (&x + 0.1).unwrap();
        assert!((psnr(&y, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_bad_inputs() {
        let x = random(1, (1, 3, 16, 16));
        let y = random(2, (1, 3, 16, 17));
        assert!(matches!(psnr(&x, &y, 1.0), Err(Error::Input(_))));
        assert!(matches!(psnr(&x, &x, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let x = random(4, (2, 3, 20, 24));
        assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_small_image_is_input_error() {
        let x = random(4, (1, 3, 10, 30));
        assert!(matches!(ssim(&x, &x, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random(5, (1, 3, 24, 24));
        let b = random(6, (1, 3, 24, 24));
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn summary_averages_rows() {
        let rows = vec![
            MetricReport { image_id: "a".into(), variant: "k5".into(), psnr_db: 20.0, ssim: 0.5 },
            MetricReport { image_id: "b".into(), variant: "k5".into(), psnr_db: 30.0, ssim: 0.7 },
        ];
        let s = MetricSummary::from_reports(&rows).unwrap();
        assert_eq!(s.count, 2);
        assert!((s.psnr_db - 25.0).abs() < 1e-12);
        assert!((s.ssim - 0.6).abs() < 1e-12);
        assert!(MetricSummary::from_reports(&[]).is_none());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![MetricReport { image_id: "img_1".into(), variant: "k25".into(), psnr_db: 19.5, ssim: 0.91 }];
        write_reports_csv(&path, &rows).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("image_id,variant,psnr_db,ssim"));
        assert_eq!(read_reports_csv(&path).unwrap(), rows);
    }
}
