//! 2-D convolution layer backed by the kernels in [`crate::kernels`],
//! wired into candle's autograd as custom ops.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, Var, WithDType};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, Element};
use crate::params::ParamBuilder;

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

#[derive(Clone, Copy, Debug)]
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl Conv2dOp {
    fn geometry(&self, x: &Layout, w: &Layout, b: &Layout) -> candle_core::Result<ConvGeometry> {
        let (batch, c_in, h, wd) = dims4(x)?;
        let (c_out, w_in, kh, kw) = dims4(w)?;
        if w_in != c_in {
            candle_core::bail!("conv2d: input has {c_in} channels, kernel expects {w_in}");
        }
        if b.shape().dims() != [c_out] {
            candle_core::bail!("conv2d: bias shape {:?} does not match {c_out} outputs", b.shape());
        }
        let g = ConvGeometry {
            batch,
            c_in,
            c_out,
            h,
            w: wd,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
        };
        if !g.is_valid() {
            candle_core::bail!("conv2d: {h}x{wd} input too small for {kh}x{kw} kernel");
        }
        Ok(g)
    }
}

fn forward_with_bias<T: Element>(x: &[T], w: &[T], b: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut y = kernels::conv2d_forward(x, w, g);
    let plane = g.out_h() * g.out_w();
    for (i, chunk) in y.chunks_exact_mut(plane).enumerate() {
        let bias = b[i % g.c_out];
        if bias != T::zero() {
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    y
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "ffa-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1, l2, l3)?;
        let shape = Shape::from((g.batch, g.c_out, g.out_h(), g.out_w()));
        let storage = match (s1, s2, s3) {
            (CpuStorage::F32(_), CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(forward_with_bias(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                contiguous::<f32>(s3, l3)?,
                &g,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(forward_with_bias(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                contiguous::<f64>(s3, l3)?,
                &g,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (batch, c_in, h, wd) = x.dims4()?;
        let (c_out, _, kh, kw) = w.dims4()?;
        let g = ConvGeometry {
            batch,
            c_in,
            c_out,
            h,
            w: wd,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
        };
        let dx = grad.apply_op2_no_bwd(w, &InputGrad(g))?;
        let dw = x.apply_op2_no_bwd(&grad, &WeightGrad(g))?;
        let db = grad.sum((0, 2, 3))?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// (grad_out, weight) -> grad_in
struct InputGrad(ConvGeometry);

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "ffa-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.c_in, g.h, g.w));
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(kernels::conv2d_backward_input(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                g,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(kernels::conv2d_backward_input(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                g,
            )),
            _ => candle_core::bail!("conv2d supports f32 or f64"),
        };
        Ok((storage, shape))
    }
}

/// (input, grad_out) -> grad_weight
struct WeightGrad(ConvGeometry);

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "ffa-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.c_out, g.c_in, g.kh, g.kw));
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(kernels::conv2d_backward_weight(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                g,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(kernels::conv2d_backward_weight(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                g,
            )),
            _ => candle_core::bail!("conv2d supports f32 or f64"),
        };
        Ok((storage, shape))
    }
}

/// Differentiable cross-correlation plus per-channel bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        Conv2dOp { stride, pad },
    )?)
}

/// Convolution with bias, parameters owned as [`Var`]s.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    in_channels: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv2d {in_channels}->{out_channels} k{kernel} s{stride} is degenerate"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = pb.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = pb.constant("bias", &[out_channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            stride,
            padding,
        })
    }

    /// `same`-padded convolution for odd kernels.
    pub fn same(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(pb, c_in, c_out, kernel, 1, kernel / 2)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, true)
    }

    /// With `track == false` the parameters act as constants: no gradient
    /// reaches them and no graph is recorded on their behalf.
    pub fn forward_t(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (w, b) = if track {
            (self.weight.as_tensor().clone(), self.bias.as_tensor().clone())
        } else {
            (self.weight.as_tensor().detach(), self.bias.as_tensor().detach())
        };
        conv2d(x, &w, &b, self.stride, self.padding)
    }
}

pub(crate) fn ensure_float(dtype: DType) -> Result<()> {
    match dtype {
        DType::F32 | DType::F64 => Ok(()),
        other => Err(Error::Config(format!("unsupported parameter dtype {other:?}"))),
    }
}
