//! Supervised pretraining, unpaired adversarial training and K-shot
//! fine-tuning, with resumable checkpoints.
//!
//! Every phase runs a flat list of optimizer steps. Step `s` maps to epoch
//! `s / steps_per_epoch` and position `s % steps_per_epoch`; data order and
//! augmentation depend only on `(seed, epoch, index)`, so resuming needs
//! nothing beyond the weights, optimizer moments and the step counter.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta, PartialEpoch, FORMAT_VERSION};
use crate::cyclegan::{
    discriminator_step_losses, generator_step_losses, l1_loss, CycleGanState, DiscriminatorConfig, LossConfig,
};
use crate::data::{epoch_order, AugmentationConfig, ImageDataset, PairedDataset};
use crate::error::{Error, Result};
use crate::ffa::{Ffa, FfaConfig, Normalization};
use crate::imageio;
use crate::metrics::{self, MetricReport, MetricSummary};
use crate::optim::{collect_grads, Adam, AdamConfig, GradAccumulator};

/// Fine-tuning sizes served as variants.
pub const ALLOWED_K: [usize; 5] = [25, 20, 10, 5, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FfaPretrain,
    Cyclegan,
    Finetune,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::FfaPretrain => "ffa_pretrain",
            Phase::Cyclegan => "cyclegan",
            Phase::Finetune => "finetune",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub k_paired: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Square working resolution.
    pub image_size: usize,
    pub ffa: FfaConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    /// Weight of the supervised term during fine-tuning.
    pub finetune_l1_weight: f64,
    /// Standardize generator inputs (pretraining only; carried by the checkpoint).
    pub normalize: bool,
    /// Random flips and rotations on paired data.
    pub augment: bool,
    pub unpaired_samples: Option<usize>,
    /// Save every N epochs; the final checkpoint is always written.
    pub checkpoint_every: usize,
    /// Dump a sample grid every N epochs; 0 disables.
    pub sample_every: usize,
    /// Record metrics every N epochs; 0 disables.
    pub eval_every: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    /// Accept fine-tuning sizes outside [`ALLOWED_K`].
    pub allow_any_k: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(Phase::FfaPretrain)
    }
}

impl TrainConfig {
    pub fn new(phase: Phase) -> Self {
        let (lr, adam_betas) = match phase {
            Phase::FfaPretrain => (1e-3, (0.9, 0.999)),
            Phase::Cyclegan | Phase::Finetune => (2e-4, (0.5, 0.999)),
        };
        Self {
            phase,
            lr,
            adam_betas,
            epochs: 50,
            batch_size: 1,
            grad_accum_steps: 1,
            k_paired: 0,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            image_size: 256,
            ffa: FfaConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossConfig::default(),
            finetune_l1_weight: 5.0,
            normalize: phase == Phase::FfaPretrain,
            augment: true,
            unpaired_samples: None,
            checkpoint_every: 10,
            sample_every: 0,
            eval_every: 1,
            max_steps: None,
            allow_any_k: false,
        }
    }

    /// Small networks on 32x32 images; seconds to minutes on one core.
    pub fn smoke(phase: Phase) -> Self {
        Self {
            epochs: match phase {
                Phase::FfaPretrain => 20,
                _ => 3,
            },
            image_size: 32,
            ffa: FfaConfig::tiny(),
            discriminator: DiscriminatorConfig::tiny(),
            checkpoint_every: 0,
            ..Self::new(phase)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ffa.validate()?;
        self.loss.validate()?;
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::Config("grad_accum_steps must be at least 1".into()));
        }
        if self.phase != Phase::Finetune && self.k_paired != 0 {
            return Err(Error::Config(format!(
                "k_paired applies to fine-tuning only ({} phase given k_paired={})",
                self.phase, self.k_paired
            )));
        }
        if self.phase == Phase::Finetune && !self.allow_any_k && !ALLOWED_K.contains(&self.k_paired) {
            return Err(Error::Config(format!(
                "k_paired {} is not one of {ALLOWED_K:?}",
                self.k_paired
            )));
        }
        let min = match self.phase {
            Phase::FfaPretrain => crate::ffa::MIN_SPATIAL,
            _ => {
                self.discriminator.validate()?;
                self.discriminator.min_input().max(crate::ffa::MIN_SPATIAL)
            }
        };
        if self.image_size < min {
            return Err(Error::Config(format!(
                "image_size {} is below the {min} minimum for the {} phase",
                self.image_size, self.phase
            )));
        }
        if !(self.finetune_l1_weight >= 0.0) {
            return Err(Error::Config("finetune_l1_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.adam_betas)
    }

    pub fn variant(&self) -> String {
        match self.phase {
            Phase::Finetune => format!("k{}", self.k_paired),
            _ => "base".to_string(),
        }
    }

    pub fn paired_augmentation(&self) -> AugmentationConfig {
        let mut aug = AugmentationConfig::plain(self.image_size);
        if self.augment {
            let d = AugmentationConfig::default();
            aug.hflip_prob = d.hflip_prob;
            aug.rotation_degrees = d.rotation_degrees;
        }
        aug.random_crop = Some(self.image_size);
        aug
    }

    pub fn unpaired_augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            random_crop: Some(self.image_size),
            ..AugmentationConfig::plain(self.image_size)
        }
    }

    fn samples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    fn normalization(&self) -> Option<Normalization> {
        self.normalize.then(Normalization::default)
    }
}

/// Metrics recorded at the end of an epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    /// Mean optimizer-step loss (generator total for adversarial phases).
    pub train_loss: f64,
    pub discriminator_loss: Option<f64>,
    pub train_psnr: Option<f64>,
    pub train_ssim: Option<f64>,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

/// Result of a training call.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    /// Loss of every optimizer step executed by this call.
    pub step_losses: Vec<f64>,
}

/// Writes the epoch history as CSV, one row per record.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for rec in history {
        w.serialize(rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `{phase}_{variant}_history.csv` in the checkpoint directory.
pub fn history_path(cfg: &TrainConfig) -> PathBuf {
    cfg.checkpoint_dir.join(format!("{}_{}_history.csv", cfg.phase, cfg.variant()))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(step: u64, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: step as usize,
            detail: format!("{name} = {value}"),
        })
    }
}

/// Splits one epoch into optimizer steps of micro-batches of indices.
fn epoch_steps(order: &[usize], cfg: &TrainConfig) -> Vec<Vec<Vec<usize>>> {
    order
        .chunks(cfg.samples_per_step())
        .map(|chunk| chunk.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect())
        .collect()
}

fn stack_pairs(data: &PairedDataset, idx: &[usize], epoch: u64) -> Result<(Tensor, Tensor)> {
    let mut hazy = Vec::with_capacity(idx.len());
    let mut clean = Vec::with_capacity(idx.len());
    for &i in idx {
        let (h, c) = data.get(i, epoch)?;
        hazy.push(h);
        clean.push(c);
    }
    Ok((Tensor::cat(&hazy, 0)?, Tensor::cat(&clean, 0)?))
}

fn stack_images(data: &ImageDataset, idx: &[usize], epoch: u64) -> Result<Tensor> {
    let imgs = idx.iter().map(|&i| data.get(i, epoch)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&imgs, 0)?)
}

/// Mean PSNR/SSIM of a generator over a paired dataset.
pub fn evaluate_generator(generator: &Ffa, data: &PairedDataset) -> Result<MetricSummary> {
    let reports = evaluate_pairs(generator, data, "eval")?;
    MetricSummary::from_reports(&reports).ok_or_else(|| Error::Dataset("evaluation set is empty".into()))
}

/// Per-image metrics of `generator` over `data` (index-0 transform, usually unaugmented).
pub fn evaluate_pairs(generator: &Ffa, data: &PairedDataset, variant: &str) -> Result<Vec<MetricReport>> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (hazy, clean) = data.get(i, 0)?;
        let restored = generator.restore(&hazy)?;
        out.push(MetricReport {
            image_id: data.id(i).unwrap_or_default().to_string(),
            variant: variant.to_string(),
            psnr_db: metrics::psnr(&restored, &clean, 1.0)?,
            ssim: metrics::ssim(&restored, &clean, 1.0)?,
        });
    }
    Ok(out)
}

/// Mean L1 between the generator output and the clean targets.
pub fn mean_l1(generator: &Ffa, data: &PairedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("no pairs".into()));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let (hazy, clean) = data.get(i, 0)?;
        total += scalar(&l1_loss(&generator.infer(&hazy)?, &clean)?)?;
    }
    Ok(total / data.len() as f64)
}

fn summary_fields(s: Option<MetricSummary>) -> (Option<f64>, Option<f64>) {
    s.map_or((None, None), |s| (Some(s.psnr_db), Some(s.ssim)))
}

struct Evaluators<'a> {
    train: Option<PairedDataset>,
    val: Option<&'a PairedDataset>,
}

impl Evaluators<'_> {
    fn record(&self, generator: &Ffa, rec: &mut EpochRecord) -> Result<()> {
        if let Some(t) = &self.train {
            (rec.train_psnr, rec.train_ssim) = summary_fields(Some(evaluate_generator(generator, t)?));
        }
        if let Some(v) = self.val.filter(|v| !v.is_empty()) {
            (rec.val_psnr, rec.val_ssim) = summary_fields(Some(evaluate_generator(generator, v)?));
        }
        Ok(())
    }
}

fn due(every: usize, epoch: u64) -> bool {
    every > 0 && epoch % every as u64 == 0
}

fn base_meta(cfg: &TrainConfig, normalization: Option<Normalization>, disc: Option<DiscriminatorConfig>) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        phase: cfg.phase,
        variant: cfg.variant(),
        epoch: 0,
        step: 0,
        ffa: cfg.ffa,
        normalization,
        discriminator: disc,
        train: Some(cfg.clone()),
        history: Vec::new(),
        partial_epoch: PartialEpoch::default(),
        optimizer_steps: Default::default(),
    }
}

fn resume_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.phase != cfg.phase {
        return Err(Error::checkpoint(
            path,
            format!("cannot resume a {} run from a {} checkpoint", cfg.phase, ckpt.meta.phase),
        ));
    }
    if ckpt.meta.ffa != cfg.ffa {
        return Err(Error::checkpoint(path, "generator configuration differs from the run configuration"));
    }
    Ok(ckpt)
}

/// Supervised L1 pretraining of the generator on `(hazy, clean)` pairs.
pub fn train_ffa(
    cfg: &TrainConfig,
    data: &PairedDataset,
    val: Option<&PairedDataset>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.phase != Phase::FfaPretrain {
        return Err(Error::Config(format!("train_ffa called with phase {}", cfg.phase)));
    }
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("paired training set is empty".into()));
    }
    let normalization = cfg.normalization();
    let generator = Ffa::new(cfg.ffa, cfg.seed, DType::F32)?.with_normalization(normalization);
    let mut opt = Adam::new(cfg.adam())?;
    let mut meta = base_meta(cfg, normalization, None);
    if let Some(path) = resume {
        let ckpt = resume_checkpoint(path, cfg)?;
        if ckpt.meta.normalization != normalization {
            return Err(Error::checkpoint(path, "normalization setting differs from the run configuration"));
        }
        generator.params().import("g_xy.", |k| ckpt.tensors.get(k).cloned())?;
        ckpt.restore_optimizer("opt_g_xy.", generator.params(), &mut opt)?;
        meta.step = ckpt.meta.step;
        meta.epoch = ckpt.meta.epoch;
        meta.history = ckpt.meta.history.clone();
        meta.partial_epoch = ckpt.meta.partial_epoch;
    }
    let evals = Evaluators {
        train: (cfg.eval_every > 0)
            .then(|| data.with_augmentation(AugmentationConfig::plain(cfg.image_size)))
            .transpose()?,
        val,
    };
    let steps_per_epoch = data.len().div_ceil(cfg.samples_per_step()) as u64;
    let save = |meta: &CheckpointMeta, opt: &Adam| -> Result<PathBuf> {
        let mut ckpt = Checkpoint::new(meta.clone());
        ckpt.add_store("g_xy.", generator.params())?;
        ckpt.add_optimizer("opt_g_xy.", opt);
        let path = cfg.checkpoint_dir.join(checkpoint::file_name(cfg.phase, &meta.variant, meta.epoch));
        ckpt.save(&path)?;
        Ok(path)
    };

    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut step_losses = Vec::new();
    while meta.step < total_steps {
        if cfg.max_steps.is_some_and(|m| meta.step >= m) {
            break;
        }
        let epoch = meta.step / steps_per_epoch;
        let pos = (meta.step % steps_per_epoch) as usize;
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let plan = epoch_steps(&order, cfg);
        let micro = &plan[pos];
        let n_step: usize = micro.iter().map(Vec::len).sum();
        let mut acc = GradAccumulator::default();
        let mut step_loss = 0.0;
        for idx in micro {
            let (hazy, clean) = stack_pairs(data, idx, epoch)?;
            let loss = l1_loss(&generator.forward(&hazy)?, &clean)?;
            let weight = idx.len() as f64 / n_step as f64;
            let value = scalar(&loss)?;
            check_finite(meta.step, "l1", value)?;
            step_loss += weight * value;
            acc.add(collect_grads(generator.params(), &(loss * weight)?.backward()?), 1.0)?;
        }
        opt.step(generator.params(), &acc.take())?;
        meta.step += 1;
        step_losses.push(step_loss);
        meta.partial_epoch.loss_sum += step_loss;
        meta.partial_epoch.count += 1;
        tracing::debug!(step = meta.step, loss = step_loss, "pretrain step");

        if meta.step % steps_per_epoch == 0 {
            meta.epoch = meta.step / steps_per_epoch;
            let mut rec = EpochRecord {
                epoch: meta.epoch,
                step: meta.step,
                train_loss: meta.partial_epoch.loss_sum / meta.partial_epoch.count.max(1) as f64,
                ..EpochRecord::default()
            };
            meta.partial_epoch = PartialEpoch::default();
            if due(cfg.eval_every, meta.epoch) {
                evals.record(&generator, &mut rec)?;
            }
            tracing::info!(epoch = rec.epoch, loss = rec.train_loss, psnr = ?rec.train_psnr, "pretrain epoch");
            meta.history.push(rec);
            if due(cfg.sample_every, meta.epoch) {
                dump_pretrain_sample(cfg, &generator, data, meta.epoch)?;
            }
            if due(cfg.checkpoint_every, meta.epoch) && meta.step < total_steps {
                save(&meta, &opt)?;
            }
        }
    }
    let path = save(&meta, &opt)?;
    write_history_csv(&history_path(cfg), &meta.history)?;
    Ok(TrainOutcome {
        checkpoint: path,
        history: meta.history,
        steps: meta.step,
        step_losses,
    })
}

fn dump_pretrain_sample(cfg: &TrainConfig, g: &Ffa, data: &PairedDataset, epoch: u64) -> Result<()> {
    let (hazy, clean) = data.get(0, 0)?;
    let dir = cfg.checkpoint_dir.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}_{}_{epoch}.png", cfg.phase, cfg.variant()));
    imageio::save_grid(&path, &[hazy.clone(), g.restore(&hazy)?, clean])
}

/// Where the adversarial phases take their starting weights from.
#[derive(Clone, Debug)]
pub enum GanInit {
    /// Fresh networks (testing).
    Fresh,
    /// Pretrained generator; the reverse generator and discriminators are fresh.
    Pretrained(PathBuf),
    /// All four networks from an adversarial checkpoint.
    Adversarial(PathBuf),
}

/// Unpaired adversarial training. With `paired` data and
/// `cfg.phase == Finetune` the supervised term is added.
pub fn train_cyclegan(
    cfg: &TrainConfig,
    init: &GanInit,
    hazy: &ImageDataset,
    clean: &ImageDataset,
    paired: Option<&PairedDataset>,
    val: Option<&PairedDataset>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.phase == Phase::FfaPretrain {
        return Err(Error::Config("train_cyclegan needs an adversarial phase".into()));
    }
    cfg.validate()?;
    if hazy.is_empty() || clean.is_empty() {
        return Err(Error::Dataset("both unpaired domains need at least one image".into()));
    }
    let paired = match (cfg.phase, paired) {
        (Phase::Finetune, Some(p)) if cfg.k_paired > 0 => {
            if p.is_empty() {
                return Err(Error::Dataset("fine-tuning requested pairs but none were loaded".into()));
            }
            if p.len() < cfg.k_paired {
                tracing::warn!("only {} pairs available for k_paired={}", p.len(), cfg.k_paired);
            }
            Some(p)
        }
        (Phase::Finetune, None) if cfg.k_paired > 0 => {
            return Err(Error::Dataset(format!("k_paired={} but no paired data given", cfg.k_paired)));
        }
        _ => None,
    };

    let (state, normalization) = match init {
        GanInit::Fresh => (
            CycleGanState::new(cfg.ffa, cfg.discriminator, cfg.seed, DType::F32)?,
            None,
        ),
        GanInit::Pretrained(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.meta.ffa != cfg.ffa {
                return Err(Error::checkpoint(path, "generator configuration differs from the run configuration"));
            }
            let mut state = CycleGanState::new(cfg.ffa, cfg.discriminator, cfg.seed, DType::F32)?;
            state.generator_xy = ckpt.generator(DType::F32)?;
            (state, ckpt.meta.normalization)
        }
        GanInit::Adversarial(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.meta.ffa != cfg.ffa || ckpt.meta.discriminator != Some(cfg.discriminator) {
                return Err(Error::checkpoint(path, "network configuration differs from the run configuration"));
            }
            (ckpt.cyclegan_state(DType::F32)?, ckpt.meta.normalization)
        }
    };
    let gan_adam = cfg.adam();
    let mut opts = [
        Adam::new(gan_adam)?,
        Adam::new(gan_adam)?,
        Adam::new(gan_adam)?,
        Adam::new(gan_adam)?,
    ];
    const OPT_PREFIX: [&str; 4] = ["opt_g_xy.", "opt_g_yx.", "opt_d_x.", "opt_d_y."];
    let mut meta = base_meta(cfg, normalization, Some(cfg.discriminator));
    if let Some(path) = resume {
        let ckpt = resume_checkpoint(path, cfg)?;
        let restored = ckpt.cyclegan_state(DType::F32)?;
        for ((_, dst), (_, src)) in state.stores().iter().zip(restored.stores()) {
            dst.copy_from(src)?;
        }
        for (i, (_, store)) in state.stores().iter().enumerate() {
            ckpt.restore_optimizer(OPT_PREFIX[i], store, &mut opts[i])?;
        }
        meta.step = ckpt.meta.step;
        meta.epoch = ckpt.meta.epoch;
        meta.history = ckpt.meta.history.clone();
        meta.partial_epoch = ckpt.meta.partial_epoch;
        meta.normalization = ckpt.meta.normalization;
    }
    let mut d_partial = (0.0, 0u64);
    let evals = Evaluators { train: None, val };
    let epoch_len = hazy.len().max(clean.len());
    let steps_per_epoch = epoch_len.div_ceil(cfg.samples_per_step()) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let save = |meta: &CheckpointMeta, opts: &[Adam; 4]| -> Result<PathBuf> {
        let mut ckpt = Checkpoint::new(meta.clone());
        for (i, (prefix, store)) in state.stores().iter().enumerate() {
            ckpt.add_store(prefix, store)?;
            ckpt.add_optimizer(OPT_PREFIX[i], &opts[i]);
        }
        let path = cfg.checkpoint_dir.join(checkpoint::file_name(cfg.phase, &meta.variant, meta.epoch));
        ckpt.save(&path)?;
        Ok(path)
    };

    let mut step_losses = Vec::new();
    while meta.step < total_steps {
        if cfg.max_steps.is_some_and(|m| meta.step >= m) {
            break;
        }
        let epoch = meta.step / steps_per_epoch;
        let pos = (meta.step % steps_per_epoch) as usize;
        let order: Vec<usize> = (0..epoch_len).collect();
        let plan = epoch_steps(&order, cfg);
        let micro = &plan[pos];
        let n_step: usize = micro.iter().map(Vec::len).sum();
        let order_x = epoch_order(hazy.len(), cfg.seed, epoch);
        let order_y = epoch_order(clean.len(), cfg.seed.wrapping_add(1), epoch);
        let order_p = paired.map(|p| epoch_order(p.len(), cfg.seed.wrapping_add(2), epoch));

        let mut g_acc = [GradAccumulator::default(), GradAccumulator::default()];
        let mut fakes = Vec::with_capacity(micro.len());
        let mut g_total = 0.0;
        for idx in micro {
            let weight = idx.len() as f64 / n_step as f64;
            let xi: Vec<usize> = idx.iter().map(|&i| order_x[i % order_x.len()]).collect();
            let yi: Vec<usize> = idx.iter().map(|&i| order_y[i % order_y.len()]).collect();
            let x = stack_images(hazy, &xi, epoch)?;
            let y = stack_images(clean, &yi, epoch)?;
            let losses = generator_step_losses(&state, &x, &y, &cfg.loss)?;
            let mut total = losses.total.clone();
            if let (Some(p), Some(op)) = (paired, &order_p) {
                let pi: Vec<usize> = idx.iter().map(|&i| op[i % op.len()]).collect();
                let (ph, pc) = stack_pairs(p, &pi, epoch)?;
                let sup = l1_loss(&state.generator_xy.forward(&ph)?, &pc)?;
                total = (total + (sup * cfg.finetune_l1_weight)?)?;
            }
            let value = scalar(&total)?;
            check_finite(meta.step, "generator loss", value)?;
            g_total += weight * value;
            let grads = (total * weight)?.backward()?;
            g_acc[0].add(collect_grads(state.generator_xy.params(), &grads), 1.0)?;
            g_acc[1].add(collect_grads(state.generator_yx.params(), &grads), 1.0)?;
            fakes.push((x, y, losses.fake_hazy.detach(), losses.fake_clean.detach(), weight));
        }
        opts[0].step(state.generator_xy.params(), &g_acc[0].take())?;
        opts[1].step(state.generator_yx.params(), &g_acc[1].take())?;

        let mut d_acc = [GradAccumulator::default(), GradAccumulator::default()];
        let mut d_total = 0.0;
        for (x, y, fake_hazy, fake_clean, weight) in &fakes {
            let losses = discriminator_step_losses(&state, x, y, fake_hazy, fake_clean)?;
            let value = scalar(&losses.total)?;
            check_finite(meta.step, "discriminator loss", value)?;
            d_total += weight * value;
            let grads = (losses.total * *weight)?.backward()?;
            d_acc[0].add(collect_grads(state.discriminator_x.params(), &grads), 1.0)?;
            d_acc[1].add(collect_grads(state.discriminator_y.params(), &grads), 1.0)?;
        }
        opts[2].step(state.discriminator_x.params(), &d_acc[0].take())?;
        opts[3].step(state.discriminator_y.params(), &d_acc[1].take())?;

        meta.step += 1;
        step_losses.push(g_total);
        meta.partial_epoch.loss_sum += g_total;
        meta.partial_epoch.count += 1;
        d_partial.0 += d_total;
        d_partial.1 += 1;
        tracing::debug!(step = meta.step, g = g_total, d = d_total, "adversarial step");

        if meta.step % steps_per_epoch == 0 {
            meta.epoch = meta.step / steps_per_epoch;
            let mut rec = EpochRecord {
                epoch: meta.epoch,
                step: meta.step,
                train_loss: meta.partial_epoch.loss_sum / meta.partial_epoch.count.max(1) as f64,
                discriminator_loss: (d_partial.1 > 0).then(|| d_partial.0 / d_partial.1 as f64),
                ..EpochRecord::default()
            };
            meta.partial_epoch = PartialEpoch::default();
            d_partial = (0.0, 0);
            if due(cfg.eval_every, meta.epoch) {
                evals.record(&state.generator_xy, &mut rec)?;
            }
            tracing::info!(epoch = rec.epoch, g = rec.train_loss, d = ?rec.discriminator_loss, "adversarial epoch");
            meta.history.push(rec);
            if due(cfg.sample_every, meta.epoch) {
                let x = hazy.get(0, 0)?;
                let restored = state.generator_xy.restore(&x)?;
                let cycled = state.generator_yx.restore(&restored)?;
                let dir = cfg.checkpoint_dir.join("samples");
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join(format!("{}_{}_{}.png", cfg.phase, cfg.variant(), meta.epoch));
                imageio::save_grid(&path, &[x, restored, cycled])?;
            }
            if due(cfg.checkpoint_every, meta.epoch) && meta.step < total_steps {
                save(&meta, &opts)?;
            }
        }
    }
    let path = save(&meta, &opts)?;
    write_history_csv(&history_path(cfg), &meta.history)?;
    Ok(TrainOutcome {
        checkpoint: path,
        history: meta.history,
        steps: meta.step,
        step_losses,
    })
}

/// Fine-tunes an adversarial checkpoint with `cfg.k_paired` supervised pairs.
pub fn finetune(
    cfg: &TrainConfig,
    gan_init: &Path,
    hazy: &ImageDataset,
    clean: &ImageDataset,
    paired: Option<&PairedDataset>,
    val: Option<&PairedDataset>,
) -> Result<TrainOutcome> {
    if cfg.phase != Phase::Finetune {
        return Err(Error::Config(format!("finetune called with phase {}", cfg.phase)));
    }
    train_cyclegan(cfg, &GanInit::Adversarial(gan_init.to_path_buf()), hazy, clean, paired, val, None)
}

/// Restorations and metrics for a directory of degraded images.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    /// Ids restored without a reference, so without metrics.
    pub unreferenced: Vec<String>,
    pub skipped: Vec<crate::data::Skipped>,
}

impl Evaluation {
    pub fn summary(&self) -> Option<MetricSummary> {
        MetricSummary::from_reports(&self.reports)
    }
}

/// Runs `generator` over every image in `hazy_dir`. Metrics are computed
/// against `clean_dir/<stem>.*` when present. With `size` images are resized
/// to a square working resolution first; otherwise native size is kept.
pub fn evaluate_dir(
    generator: &Ffa,
    variant: &str,
    hazy_dir: &Path,
    clean_dir: Option<&Path>,
    size: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<Evaluation> {
    let entries = std::fs::read_dir(hazy_dir).map_err(|e| Error::io(hazy_dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && imageio::is_image_path(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", hazy_dir.display())));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Evaluation::default();
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let img = match imageio::load_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                out.skipped.push(crate::data::Skipped {
                    path: path.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let (h, w) = size.map_or((img.height() as usize, img.width() as usize), |s| (s, s));
        let x = imageio::rgb_to_tensor(&imageio::resize(&img, h, w))?;
        let restored = generator.restore(&x)?;
        if let Some(dir) = out_dir {
            imageio::save_png(&dir.join(format!("{stem}.png")), &restored)?;
        }
        let reference = clean_dir.and_then(|d| {
            imageio::IMAGE_EXTENSIONS
                .iter()
                .map(|ext| d.join(format!("{stem}.{ext}")))
                .find(|p| p.is_file())
        });
        match reference {
            Some(ref_path) => {
                let r = imageio::load_rgb(&ref_path)?;
                let r = imageio::rgb_to_tensor(&imageio::resize(&r, h, w))?;
                out.reports.push(MetricReport {
                    image_id: stem,
                    variant: variant.to_string(),
                    psnr_db: metrics::psnr(&restored, &r, 1.0)?,
                    ssim: metrics::ssim(&restored, &r, 1.0)?,
                });
            }
            None => out.unreferenced.push(stem),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        let mut cfg = TrainConfig::smoke(Phase::Finetune);
        cfg.k_paired = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.allow_any_k = true;
        cfg.validate().unwrap();
        let mut cfg = TrainConfig::smoke(Phase::Cyclegan);
        cfg.k_paired = 5;
        assert!(cfg.validate().is_err());
        cfg.k_paired = 0;
        cfg.image_size = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(Phase::FfaPretrain);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn phase_defaults() {
        let p = TrainConfig::new(Phase::FfaPretrain);
        assert_eq!((p.lr, p.adam_betas), (1e-3, (0.9, 0.999)));
        let g = TrainConfig::new(Phase::Cyclegan);
        assert_eq!((g.lr, g.adam_betas), (2e-4, (0.5, 0.999)));
        assert_eq!(TrainConfig { k_paired: 25, ..TrainConfig::new(Phase::Finetune) }.variant(), "k25");
    }

    #[test]
    fn steps_cover_the_epoch() {
        let cfg = TrainConfig {
            batch_size: 2,
            grad_accum_steps: 2,
            ..TrainConfig::default()
        };
        let plan = epoch_steps(&[0, 1, 2, 3, 4], &cfg);
        assert_eq!(plan, vec![vec![vec![0, 1], vec![2, 3]], vec![vec![4]]]);
    }
}
