//! Experiment grids: one fine-tuned variant per K, or one pretraining run
//! per learning rate, each evaluated and summarized in a small table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_paired, load_unpaired, AugmentationConfig, DatasetLayout, PairedDataset, UnpairedDatasetSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, MetricSummary};
use crate::training::{evaluate_pairs, finetune, train_cyclegan, train_ffa, GanInit, Phase, TrainConfig, ALLOWED_K};

pub const K_TABLE_HEADER: [&str; 3] = ["Number of Images", "SSIM", "PSNR (dB)"];
pub const LR_TABLE_HEADER: [&str; 3] = ["Learning Rate", "SSIM", "PSNR (dB)"];
pub const LR_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

pub const K_TABLE_FILE: &str = "grid_k.csv";
pub const LR_TABLE_FILE: &str = "grid_lr.csv";

/// File name of the reported-metrics manifest shipped next to variant checkpoints.
pub const REPORTED_MANIFEST: &str = "reported_metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub ssim: f64,
    pub psnr_db: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub label: String,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub failures: Vec<GridFailure>,
    pub table: PathBuf,
    pub reports: Vec<MetricReport>,
}

impl GridReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Phase configurations for a K grid.
#[derive(Clone, Debug)]
pub struct GridPlan {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Adversarial checkpoint to fine-tune from; trained here when absent.
    pub gan_init: Option<PathBuf>,
    pub pretrain: TrainConfig,
    pub cyclegan: TrainConfig,
    pub finetune: TrainConfig,
    pub ks: Vec<usize>,
}

impl GridPlan {
    pub fn smoke(data_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let out_dir = out_dir.into();
        let cfg = |phase| TrainConfig {
            seed,
            checkpoint_dir: out_dir.join("checkpoints"),
            ..TrainConfig::smoke(phase)
        };
        Self {
            data_root: data_root.into(),
            gan_init: None,
            pretrain: cfg(Phase::FfaPretrain),
            cyclegan: cfg(Phase::Cyclegan),
            finetune: cfg(Phase::Finetune),
            ks: ALLOWED_K.to_vec(),
            out_dir,
        }
    }
}

fn unpaired_sets(layout: &DatasetLayout, cfg: &TrainConfig) -> Result<(crate::data::ImageDataset, crate::data::ImageDataset)> {
    let aug = cfg.unpaired_augmentation();
    let spec = |dir| UnpairedDatasetSpec {
        image_dir: dir,
        sample_count: cfg.unpaired_samples,
    };
    Ok((
        load_unpaired(&spec(layout.unpaired_hazy()), &aug, cfg.seed)?,
        load_unpaired(&spec(layout.unpaired_clean()), &aug, cfg.seed + 1)?,
    ))
}

fn evaluation_set(layout: &DatasetLayout, image_size: usize, seed: u64) -> Result<PairedDataset> {
    load_paired(&layout.evaluation(), &AugmentationConfig::plain(image_size), seed)
}

fn summarize(label: String, reports: &[MetricReport], checkpoint: PathBuf) -> Result<GridRow> {
    let s = MetricSummary::from_reports(reports).ok_or_else(|| Error::Dataset("evaluation split is empty".into()))?;
    Ok(GridRow {
        label,
        ssim: s.ssim,
        psnr_db: s.psnr_db,
        checkpoint,
    })
}

/// Pretrains and trains the adversarial phase, returning its checkpoint.
pub fn train_gan_base(plan: &GridPlan) -> Result<PathBuf> {
    let layout = DatasetLayout::new(&plan.data_root);
    let paired = load_paired(&layout.paired(None), &plan.pretrain.paired_augmentation(), plan.pretrain.seed)?;
    let pre = train_ffa(&plan.pretrain, &paired, None, None)?;
    let (hazy, clean) = unpaired_sets(&layout, &plan.cyclegan)?;
    let gan = train_cyclegan(&plan.cyclegan, &GanInit::Pretrained(pre.checkpoint), &hazy, &clean, None, None, None)?;
    Ok(gan.checkpoint)
}

/// Fine-tunes and evaluates one variant per K. A failing cell is recorded
/// and the remaining cells still run.
pub fn run_k_grid(plan: &GridPlan) -> Result<GridReport> {
    std::fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;
    let layout = DatasetLayout::new(&plan.data_root);
    let gan_init = match &plan.gan_init {
        Some(p) => p.clone(),
        None => train_gan_base(plan)?,
    };
    let (hazy, clean) = unpaired_sets(&layout, &plan.finetune)?;
    let eval = evaluation_set(&layout, plan.finetune.image_size, plan.finetune.seed)?;
    let mut report = GridReport::default();
    for &k in &plan.ks {
        let cell = || -> Result<(GridRow, Vec<MetricReport>)> {
            let cfg = TrainConfig {
                k_paired: k,
                ..plan.finetune.clone()
            };
            cfg.validate()?;
            let paired = if k > 0 {
                Some(load_paired(&layout.paired(Some(k)), &cfg.paired_augmentation(), cfg.seed)?)
            } else {
                None
            };
            let out = finetune(&cfg, &gan_init, &hazy, &clean, paired.as_ref(), None)?;
            let g = crate::checkpoint::Checkpoint::load(&out.checkpoint)?.generator(candle_core::DType::F32)?;
            let reports = evaluate_pairs(&g, &eval, &cfg.variant())?;
            Ok((summarize(k.to_string(), &reports, out.checkpoint)?, reports))
        };
        match cell() {
            Ok((row, reports)) => {
                tracing::info!("K={k}: SSIM {:.4} PSNR {:.2} dB", row.ssim, row.psnr_db);
                report.rows.push(row);
                report.reports.extend(reports);
            }
            Err(e) => {
                tracing::error!("K={k} failed: {e}");
                report.failures.push(GridFailure {
                    label: k.to_string(),
                    error: e.to_string(),
                });
            }
        }
    }
    report.table = plan.out_dir.join(K_TABLE_FILE);
    write_table(&report.table, K_TABLE_HEADER, &report.rows)?;
    metrics::write_reports_csv(&plan.out_dir.join("grid_k_images.csv"), &report.reports)?;
    Ok(report)
}

/// Pretrains and evaluates once per learning rate.
pub fn run_lr_grid(plan: &GridPlan, lrs: &[f64]) -> Result<GridReport> {
    std::fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;
    let layout = DatasetLayout::new(&plan.data_root);
    let paired = load_paired(&layout.paired(None), &plan.pretrain.paired_augmentation(), plan.pretrain.seed)?;
    let eval = evaluation_set(&layout, plan.pretrain.image_size, plan.pretrain.seed)?;
    let mut report = GridReport::default();
    for &lr in lrs {
        let label = format!("{lr}");
        let cfg = TrainConfig {
            lr,
            checkpoint_dir: plan.pretrain.checkpoint_dir.join(format!("lr_{label}")),
            ..plan.pretrain.clone()
        };
        let cell = || -> Result<(GridRow, Vec<MetricReport>)> {
            let out = train_ffa(&cfg, &paired, None, None)?;
            let g = crate::checkpoint::Checkpoint::load(&out.checkpoint)?.generator(candle_core::DType::F32)?;
            let reports = evaluate_pairs(&g, &eval, &format!("lr{label}"))?;
            Ok((summarize(label.clone(), &reports, out.checkpoint)?, reports))
        };
        match cell() {
            Ok((row, reports)) => {
                report.rows.push(row);
                report.reports.extend(reports);
            }
            Err(e) => report.failures.push(GridFailure {
                label,
                error: e.to_string(),
            }),
        }
    }
    report.table = plan.out_dir.join(LR_TABLE_FILE);
    write_table(&report.table, LR_TABLE_HEADER, &report.rows)?;
    Ok(report)
}

/// Writes the CSV table and a markdown twin next to it.
pub fn write_table(path: &Path, header: [&str; 3], rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.write_record([r.label.clone(), format!("{:.4}", r.ssim), format!("{:.2}", r.psnr_db)])
            .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut md = format!("| {} | {} | {} |\n|---|---|---|\n", header[0], header[1], header[2]);
    for r in rows {
        md.push_str(&format!("| {} | {:.4} | {:.2} |\n", r.label, r.ssim, r.psnr_db));
    }
    let md_path = path.with_extension("md");
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))
}

/// Reads back a table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<[String; 3]>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let header = r
        .headers()
        .map_err(|e| Error::io(path, e.into()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::io(path, e.into()))?;
        if rec.len() != 3 {
            return Err(Error::Dataset(format!("{}: row with {} columns", path.display(), rec.len())));
        }
        rows.push([rec[0].to_string(), rec[1].to_string(), rec[2].to_string()]);
    }
    Ok((header, rows))
}

/// Reference per-variant numbers, surfaced as-is and never measured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportedMetrics {
    pub k: usize,
    pub ssim: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportedManifest {
    /// Always "reported": these numbers were not measured by this code.
    pub source: String,
    pub variants: Vec<ReportedMetrics>,
}

impl Default for ReportedManifest {
    fn default() -> Self {
        let v = |k, ssim, psnr_db| ReportedMetrics { k, ssim, psnr_db };
        Self {
            source: "reported".into(),
            variants: vec![
                v(25, 0.9084, 19.16),
                v(20, 0.8976, 18.93),
                v(10, 0.8760, 18.47),
                v(5, 0.8652, 18.25),
                v(0, 0.8544, 18.02),
            ],
        }
    }
}

impl ReportedManifest {
    pub fn get(&self, k: usize) -> Option<&ReportedMetrics> {
        self.variants.iter().find(|v| v.k == k)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORTED_MANIFEST);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// `Ok(None)` when the manifest file does not exist.
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(REPORTED_MANIFEST);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![GridRow {
            label: "25".into(),
            ssim: 0.5,
            psnr_db: 20.0,
            checkpoint: PathBuf::from("x"),
        }];
        write_table(&path, K_TABLE_HEADER, &rows).unwrap();
        let (header, read) = read_table(&path).unwrap();
        assert_eq!(header, K_TABLE_HEADER);
        assert_eq!(read, vec![["25".to_string(), "0.5000".into(), "20.00".into()]]);
        assert!(path.with_extension("md").is_file());
    }

    #[test]
    fn manifest_round_trip_and_absence() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(ReportedManifest::read(dir.path()).unwrap(), None);
        let m = ReportedManifest::default();
        m.write(dir.path()).unwrap();
        let back = ReportedManifest::read(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get(25).unwrap().psnr_db, 19.16);
        assert_eq!(back.variants.len(), 5);
    }
}
