//! Feature Fusion Attention generator.
//!
//! head conv -> N residual groups -> concatenate group outputs -> 1x1 fusion
//! conv -> channel attention -> pixel attention -> tail conv -> + input.

use candle_core::{DType, Tensor};
use candle_nn::ops::sigmoid;
use serde::{Deserialize, Serialize};

use crate::conv::{ensure_float, Conv2d};
use crate::error::{Error, Result};
use crate::params::{init_rng, ParamBuilder, ParamStore};

/// Smallest spatial extent the generator accepts.
pub const MIN_SPATIAL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfaConfig {
    pub num_groups: usize,
    pub blocks_per_group: usize,
    pub feature_dim: usize,
    pub kernel_size: usize,
    pub ca_reduction: usize,
}

impl Default for FfaConfig {
    fn default() -> Self {
        Self {
            num_groups: 3,
            blocks_per_group: 6,
            feature_dim: 64,
            kernel_size: 3,
            ca_reduction: 8,
        }
    }
}

impl FfaConfig {
    /// A few thousand parameters; trains in seconds on small crops.
    pub fn tiny() -> Self {
        Self {
            num_groups: 2,
            blocks_per_group: 1,
            feature_dim: 8,
            kernel_size: 3,
            ca_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_groups", self.num_groups),
            ("blocks_per_group", self.blocks_per_group),
            ("feature_dim", self.feature_dim),
            ("kernel_size", self.kernel_size),
            ("ca_reduction", self.ca_reduction),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.feature_dim % self.ca_reduction != 0 {
            return Err(Error::Config(format!(
                "feature_dim {} is not divisible by ca_reduction {}",
                self.feature_dim, self.ca_reduction
            )));
        }
        Ok(())
    }
}

/// Spatial gating map shared across channels.
#[derive(Debug, Clone)]
pub struct PixelAttention {
    reduce: Conv2d,
    expand: Conv2d,
}

impl PixelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = channels / reduction;
        Ok(Self {
            reduce: Conv2d::same(&mut pb.pp("reduce"), channels, hidden, 1)?,
            expand: Conv2d::same(&mut pb.pp("expand"), hidden, 1, 1)?,
        })
    }

    /// The `(b, 1, h, w)` map in (0, 1).
    pub fn attention_map(&self, f: &Tensor) -> Result<Tensor> {
        self.attention_map_t(f, true)
    }

    fn attention_map_t(&self, f: &Tensor, track: bool) -> Result<Tensor> {
        let hidden = self.reduce.forward_t(f, track)?.relu()?;
        Ok(sigmoid(&self.expand.forward_t(&hidden, track)?)?)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        self.forward_t(f, true)
    }

    pub fn forward_t(&self, f: &Tensor, track: bool) -> Result<Tensor> {
        Ok(f.broadcast_mul(&self.attention_map_t(f, track)?)?)
    }
}

/// Per-channel gating from globally pooled features.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    reduce: Conv2d,
    expand: Conv2d,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = channels / reduction;
        Ok(Self {
            reduce: Conv2d::same(&mut pb.pp("reduce"), channels, hidden, 1)?,
            expand: Conv2d::same(&mut pb.pp("expand"), hidden, channels, 1)?,
        })
    }

    /// The `(b, c, 1, 1)` channel weights in (0, 1).
    pub fn weights(&self, f: &Tensor) -> Result<Tensor> {
        self.weights_t(f, true)
    }

    fn weights_t(&self, f: &Tensor, track: bool) -> Result<Tensor> {
        let pooled = f.mean_keepdim(3)?.mean_keepdim(2)?;
        let hidden = self.reduce.forward_t(&pooled, track)?.relu()?;
        Ok(sigmoid(&self.expand.forward_t(&hidden, track)?)?)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        self.forward_t(f, true)
    }

    pub fn forward_t(&self, f: &Tensor, track: bool) -> Result<Tensor> {
        Ok(f.broadcast_mul(&self.weights_t(f, track)?)?)
    }
}

/// `f + PA(CA(conv2(relu(conv1(f)))))`
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    ca: ChannelAttention,
    pa: PixelAttention,
}

impl ResidualBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &FfaConfig) -> Result<Self> {
        let (dim, k) = (cfg.feature_dim, cfg.kernel_size);
        Ok(Self {
            conv1: Conv2d::same(&mut pb.pp("conv1"), dim, dim, k)?,
            conv2: Conv2d::same(&mut pb.pp("conv2"), dim, dim, k)?,
            ca: ChannelAttention::new(&mut pb.pp("ca"), dim, cfg.ca_reduction)?,
            pa: PixelAttention::new(&mut pb.pp("pa"), dim, cfg.ca_reduction)?,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        self.forward_t(f, true)
    }

    pub fn forward_t(&self, f: &Tensor, track: bool) -> Result<Tensor> {
        let branch = self.conv1.forward_t(f, track)?.relu()?;
        let branch = self.conv2.forward_t(&branch, track)?;
        let branch = self.pa.forward_t(&self.ca.forward_t(&branch, track)?, track)?;
        Ok((f + branch)?)
    }
}

/// Residual blocks, a trailing conv, and a skip from the group input.
#[derive(Debug, Clone)]
pub struct Group {
    blocks: Vec<ResidualBlock>,
    conv: Conv2d,
}

impl Group {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &FfaConfig) -> Result<Self> {
        let blocks = (0..cfg.blocks_per_group)
            .map(|i| ResidualBlock::new(&mut pb.pp(format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let conv = Conv2d::same(&mut pb.pp("conv"), cfg.feature_dim, cfg.feature_dim, cfg.kernel_size)?;
        Ok(Self { blocks, conv })
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        self.forward_t(f, true)
    }

    pub fn forward_t(&self, f: &Tensor, track: bool) -> Result<Tensor> {
        let mut h = f.clone();
        for block in &self.blocks {
            h = block.forward_t(&h, track)?;
        }
        Ok((f + self.conv.forward_t(&h, track)?)?)
    }
}

/// The full generator. Owns its parameters.
#[derive(Debug, Clone)]
pub struct Ffa {
    config: FfaConfig,
    store: ParamStore,
    head: Conv2d,
    groups: Vec<Group>,
    fuse: Conv2d,
    ca: ChannelAttention,
    pa: PixelAttention,
    tail: Conv2d,
    normalization: Option<Normalization>,
}

/// Per-channel statistics applied around the network: inputs are
/// standardized before the head and outputs mapped back after the residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: crate::data::DEFAULT_MEAN,
            std: crate::data::DEFAULT_STD,
        }
    }
}

impl Ffa {
    pub fn new(config: FfaConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        ensure_float(dtype)?;
        let mut store = ParamStore::default();
        let mut rng = init_rng(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, dtype);
        let (dim, k) = (config.feature_dim, config.kernel_size);
        let head = Conv2d::same(&mut pb.pp("head"), 3, dim, k)?;
        let groups = (0..config.num_groups)
            .map(|i| Group::new(&mut pb.pp(format!("group{i}")), &config))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::same(&mut pb.pp("fuse"), dim * config.num_groups, dim, 1)?;
        let ca = ChannelAttention::new(&mut pb.pp("fuse_ca"), dim, config.ca_reduction)?;
        let pa = PixelAttention::new(&mut pb.pp("fuse_pa"), dim, config.ca_reduction)?;
        let tail = Conv2d::same(&mut pb.pp("tail"), dim, 3, k)?;
        Ok(Self {
            config,
            store,
            head,
            groups,
            fuse,
            ca,
            pa,
            tail,
            normalization: None,
        })
    }

    pub fn with_normalization(mut self, normalization: Option<Normalization>) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn config(&self) -> &FfaConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Raw (unclamped) output used during training.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, true)
    }

    /// Forward pass with the parameters held constant (no autograd graph).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, false)
    }

    pub fn forward_t(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        check_image(x)?;
        let normalized;
        let x = match &self.normalization {
            Some(n) => {
                normalized = crate::data::normalize(x, &n.mean, &n.std)?;
                &normalized
            }
            None => x,
        };
        let mut feat = self.head.forward_t(x, track)?;
        let mut outs = Vec::with_capacity(self.groups.len());
        for group in &self.groups {
            feat = group.forward_t(&feat, track)?;
            outs.push(feat.clone());
        }
        let fused = if outs.len() == 1 {
            outs.pop().expect("one group")
        } else {
            Tensor::cat(&outs, 1)?
        };
        let fused = self.fuse.forward_t(&fused, track)?;
        let fused = self.pa.forward_t(&self.ca.forward_t(&fused, track)?, track)?;
        let out = (self.tail.forward_t(&fused, track)? + x)?;
        match &self.normalization {
            Some(n) => crate::data::denormalize(&out, &n.mean, &n.std),
            None => Ok(out),
        }
    }

    /// Inference output, clamped to [0, 1].
    pub fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x)?.clamp(0.0, 1.0)?)
    }
}

/// Validates a `(b, 3, h, w)` image batch.
pub fn check_image(x: &Tensor) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Input(format!(
            "expected a (batch, 3, height, width) tensor, got {dims:?}"
        )));
    }
    if dims[2] < MIN_SPATIAL || dims[3] < MIN_SPATIAL {
        return Err(Error::Input(format!(
            "image {}x{} is below the {MIN_SPATIAL}x{MIN_SPATIAL} minimum",
            dims[2], dims[3]
        )));
    }
    Ok(())
}
