//! PatchGAN discriminator, least-squares adversarial loss and cycle
//! consistency around a pair of FFA generators.

use candle_core::{DType, Tensor, Var};
use candle_nn::ops::leaky_relu;
use serde::{Deserialize, Serialize};

use crate::conv::{ensure_float, Conv2d};
use crate::error::{Error, Result};
use crate::ffa::{Ffa, FfaConfig};
use crate::params::{init_rng, ParamBuilder, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Stride-2 layers before the stride-1 projection.
    pub num_layers: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            num_layers: 4,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            num_layers: 3,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.num_layers < 2 {
            return Err(Error::Config(format!("num_layers must be at least 2, got {}", self.num_layers)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Smallest square input that leaves a non-empty score map.
    pub fn min_input(&self) -> usize {
        1 << (self.num_layers + 1)
    }

    /// Score map side for a square input of side `n`.
    pub fn output_side(&self, n: usize) -> Option<usize> {
        let mut s = n;
        for _ in 0..self.num_layers {
            if s < 2 {
                return None;
            }
            s = (s + 2 - 4) / 2 + 1;
        }
        (s >= 2).then(|| s - 1)
    }

    fn channels(&self, layer: usize) -> usize {
        self.base_channels << layer.min(3)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over `(b, h, w)` per channel with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
            running_var: pb.buffer("running_var", &[channels], 1.0)?,
        })
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward_t(&self, x: &Tensor, track: bool, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (gamma, beta) = if track {
            (self.gamma.as_tensor().clone(), self.beta.as_tensor().clone())
        } else {
            (self.gamma.as_tensor().detach(), self.beta.as_tensor().detach())
        };
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let n = b * h * w;
            let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = BN_MOMENTUM;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&gamma.reshape(shape)?)?
            .broadcast_add(&beta.reshape(shape)?)?)
    }
}

#[derive(Debug, Clone)]
struct DiscLayer {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

/// Fully convolutional real/fake classifier emitting a grid of patch scores.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    layers: Vec<DiscLayer>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        ensure_float(dtype)?;
        let mut store = ParamStore::default();
        let mut rng = init_rng(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, dtype);
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut c_in = 3;
        for i in 0..config.num_layers {
            let c_out = config.channels(i);
            let mut lp = pb.pp(format!("layer{i}"));
            let conv = Conv2d::new(&mut lp.pp("conv"), c_in, c_out, 4, 2, 1)?;
            let norm = if i == 0 {
                None
            } else {
                Some(BatchNorm2d::new(&mut lp.pp("bn"), c_out)?)
            };
            layers.push(DiscLayer { conv, norm });
            c_in = c_out;
        }
        let head = Conv2d::new(&mut pb.pp("head"), c_in, 1, 4, 1, 1)?;
        Ok(Self {
            config,
            store,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Training-mode forward with trainable parameters.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, true, true)
    }

    pub fn forward_t(&self, x: &Tensor, track: bool, train: bool) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Input(format!("expected a (batch, 3, h, w) tensor, got {dims:?}")));
        }
        let min = self.config.min_input();
        if dims[2] < min || dims[3] < min {
            return Err(Error::Input(format!(
                "{}x{} input is too small for a {}-layer discriminator (minimum {min}x{min})",
                dims[2], dims[3], self.config.num_layers
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.conv.forward_t(&h, track)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward_t(&h, track, train)?;
            }
            h = leaky_relu(&h, self.config.leaky_slope)?;
        }
        self.head.forward_t(&h, track)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanLossMode {
    #[default]
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_cycle: f64,
    pub gan_loss_mode: GanLossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            gan_loss_mode: GanLossMode::LeastSquares,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cycle >= 0.0) || !self.lambda_cycle.is_finite() {
            return Err(Error::Config(format!("lambda_cycle must be finite and >= 0, got {}", self.lambda_cycle)));
        }
        Ok(())
    }
}

/// Mean squared error against a constant 1 (real) or 0 (fake) target.
pub fn gan_loss(scores: &Tensor, target_is_real: bool) -> Result<Tensor> {
    let target = if target_is_real { 1.0 } else { 0.0 };
    Ok((scores - target)?.sqr()?.mean_all()?)
}

/// `lambda_cycle * mean |original - reconstructed|`
pub fn cycle_consistency_loss(original: &Tensor, reconstructed: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    if original.dims() != reconstructed.dims() {
        return Err(Error::Input(format!(
            "cycle loss shapes differ: {:?} vs {:?}",
            original.dims(),
            reconstructed.dims()
        )));
    }
    Ok(((original - reconstructed)?.abs()?.mean_all()? * cfg.lambda_cycle)?)
}

pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Input(format!(
            "l1 shapes differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Named scalar loss components for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn from_tensors(parts: &[(&str, &Tensor)], total: &Tensor) -> Result<Self> {
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(Self {
            components: parts
                .iter()
                .map(|(n, t)| Ok((n.to_string(), scalar(t)?)))
                .collect::<Result<_>>()?,
            total: scalar(total)?,
        })
    }
}

/// Both generators and both discriminators.
#[derive(Debug, Clone)]
pub struct CycleGanState {
    /// hazy -> clean
    pub generator_xy: Ffa,
    /// clean -> hazy
    pub generator_yx: Ffa,
    /// scores hazy images
    pub discriminator_x: Discriminator,
    /// scores clean images
    pub discriminator_y: Discriminator,
}

impl CycleGanState {
    pub fn new(ffa: FfaConfig, disc: DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        Ok(Self {
            generator_xy: Ffa::new(ffa, seed, dtype)?,
            generator_yx: Ffa::new(ffa, seed.wrapping_add(1), dtype)?,
            discriminator_x: Discriminator::new(disc, seed.wrapping_add(2), dtype)?,
            discriminator_y: Discriminator::new(disc, seed.wrapping_add(3), dtype)?,
        })
    }

    /// `(prefix, store)` for every network, in checkpoint order.
    pub fn stores(&self) -> [(&'static str, &ParamStore); 4] {
        [
            ("g_xy.", self.generator_xy.params()),
            ("g_yx.", self.generator_yx.params()),
            ("d_x.", self.discriminator_x.params()),
            ("d_y.", self.discriminator_y.params()),
        ]
    }

    pub fn zero_all(&self) -> Result<()> {
        for (_, store) in self.stores() {
            store.zero_all()?;
        }
        Ok(())
    }
}

/// Generator objective with the graph kept for backprop.
#[derive(Debug, Clone)]
pub struct GeneratorLosses {
    pub adv_xy: Tensor,
    pub adv_yx: Tensor,
    pub cyc_forward: Tensor,
    pub cyc_backward: Tensor,
    pub total: Tensor,
    /// `G_xy(hazy)`
    pub fake_clean: Tensor,
    /// `G_yx(clean)`
    pub fake_hazy: Tensor,
}

impl GeneratorLosses {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        LossBreakdown::from_tensors(
            &[
                ("adv_xy", &self.adv_xy),
                ("adv_yx", &self.adv_yx),
                ("cyc_forward", &self.cyc_forward),
                ("cyc_backward", &self.cyc_backward),
            ],
            &self.total,
        )
    }
}

/// Adversarial and cycle terms for both generators. Discriminator
/// parameters are held constant.
pub fn generator_step_losses(
    state: &CycleGanState,
    hazy: &Tensor,
    clean: &Tensor,
    cfg: &LossConfig,
) -> Result<GeneratorLosses> {
    cfg.validate()?;
    let fake_clean = state.generator_xy.forward(hazy)?;
    let fake_hazy = state.generator_yx.forward(clean)?;
    let adv_xy = gan_loss(&state.discriminator_y.forward_t(&fake_clean, false, true)?, true)?;
    let adv_yx = gan_loss(&state.discriminator_x.forward_t(&fake_hazy, false, true)?, true)?;
    let cyc_forward = cycle_consistency_loss(hazy, &state.generator_yx.forward(&fake_clean)?, cfg)?;
    let cyc_backward = cycle_consistency_loss(clean, &state.generator_xy.forward(&fake_hazy)?, cfg)?;
    let total = (((&adv_xy + &adv_yx)? + &cyc_forward)? + &cyc_backward)?;
    Ok(GeneratorLosses {
        adv_xy,
        adv_yx,
        cyc_forward,
        cyc_backward,
        total,
        fake_clean,
        fake_hazy,
    })
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLosses {
    pub d_x: Tensor,
    pub d_y: Tensor,
    pub total: Tensor,
}

impl DiscriminatorLosses {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        LossBreakdown::from_tensors(&[("d_x", &self.d_x), ("d_y", &self.d_y)], &self.total)
    }
}

/// `0.5 * (real term + fake term)` per discriminator. Fakes are detached.
pub fn discriminator_step_losses(
    state: &CycleGanState,
    hazy: &Tensor,
    clean: &Tensor,
    fake_hazy: &Tensor,
    fake_clean: &Tensor,
) -> Result<DiscriminatorLosses> {
    let half = |real: Tensor, fake: Tensor| -> Result<Tensor> { Ok(((real + fake)? * 0.5)?) };
    let d_x = half(
        gan_loss(&state.discriminator_x.forward(hazy)?, true)?,
        gan_loss(&state.discriminator_x.forward(&fake_hazy.detach())?, false)?,
    )?;
    let d_y = half(
        gan_loss(&state.discriminator_y.forward(clean)?, true)?,
        gan_loss(&state.discriminator_y.forward(&fake_clean.detach())?, false)?,
    )?;
    let total = (&d_x + &d_y)?;
    Ok(DiscriminatorLosses { d_x, d_y, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn default_score_map_is_15_for_256() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.output_side(256), Some(15));
        assert_eq!(cfg.min_input(), 32);
        assert_eq!(cfg.output_side(32), Some(1));
        assert_eq!(cfg.output_side(16), None);
    }

    #[test]
    fn gan_loss_constants() {
        let ones = Tensor::ones((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(scalar(&gan_loss(&ones, true).unwrap()), 0.0);
        assert_eq!(scalar(&gan_loss(&ones.zeros_like().unwrap(), true).unwrap()), 1.0);
        let half = (ones * 0.5).unwrap();
        assert_eq!(scalar(&gan_loss(&half, false).unwrap()), 0.25);
    }

    #[test]
    fn cycle_loss_closed_form() {
        let zeros = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let tenth = (zeros.ones_like().unwrap() * 0.1).unwrap();
        let cfg = LossConfig::default();
        assert!((scalar(&cycle_consistency_loss(&zeros, &tenth, &cfg).unwrap()) - 1.0).abs() < 1e-12);
        assert_eq!(scalar(&cycle_consistency_loss(&zeros, &zeros, &cfg).unwrap()), 0.0);
        let wrong = Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(cycle_consistency_loss(&zeros, &wrong, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn rejects_small_input() {
        let d = Discriminator::new(DiscriminatorConfig::tiny(), 0, DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&x), Err(Error::Input(_))));
    }
}
