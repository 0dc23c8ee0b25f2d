//! Reference forward passes for the attention layers, read straight from a
//! parameter store, plus a finite-difference gradient checker.

use candle_core::{DType, Device, Tensor, Var};
use haze_core::conv::Conv2d;
use haze_core::ffa::{ChannelAttention, Ffa, FfaConfig, PixelAttention, ResidualBlock};
use haze_core::params::{init_rng, ParamBuilder, ParamStore};

use crate::*;

pub fn weights(store: &ParamStore, name: &str) -> Nd {
    Nd::from_tensor(store.param(name).unwrap_or_else(|| panic!("no param {name}")).as_tensor())
}

pub fn bias(store: &ParamStore, name: &str) -> Vec<f64> {
    weights(store, name).data
}

pub fn conv_named(store: &ParamStore, prefix: &str, x: &Nd, pad: usize) -> Nd {
    conv_ref(
        x,
        &weights(store, &format!("{prefix}.weight")),
        &bias(store, &format!("{prefix}.bias")),
        1,
        pad,
    )
}

/// Small nonzero biases so the oracle exercises them.
pub fn jitter_biases(store: &ParamStore, seed: u64) {
    for (i, (name, var)) in store.params().enumerate() {
        if name.ends_with("bias") {
            let n = var.elem_count();
            let r = random_nd(seed + i as u64, [n, 1, 1, 1], -0.1, 0.1).to_tensor().reshape(n).unwrap();
            var.set(&r.to_dtype(var.dtype()).unwrap()).unwrap();
        }
    }
}

pub fn pa_ref(store: &ParamStore, p: &str, f: &Nd) -> Nd {
    let hidden = conv_named(store, &format!("{p}.reduce"), f, 0).map(relu);
    let map = conv_named(store, &format!("{p}.expand"), &hidden, 0).map(sigmoid);
    f.mul_spatial(&map)
}

pub fn ca_ref(store: &ParamStore, p: &str, f: &Nd) -> Nd {
    let pooled = global_pool(f);
    let hidden = conv_named(store, &format!("{p}.reduce"), &pooled, 0).map(relu);
    let w = conv_named(store, &format!("{p}.expand"), &hidden, 0).map(sigmoid);
    f.mul_channel(&w)
}

pub fn block_ref(store: &ParamStore, p: &str, f: &Nd, k: usize) -> Nd {
    let h = conv_named(store, &format!("{p}.conv1"), f, k / 2).map(relu);
    let h = conv_named(store, &format!("{p}.conv2"), &h, k / 2);
    let h = pa_ref(store, &format!("{p}.pa"), &ca_ref(store, &format!("{p}.ca"), &h));
    f.add(&h)
}

pub fn group_ref(store: &ParamStore, p: &str, f: &Nd, cfg: &FfaConfig) -> Nd {
    let mut h = f.clone();
    for i in 0..cfg.blocks_per_group {
        h = block_ref(store, &format!("{p}.block{i}"), &h, cfg.kernel_size);
    }
    f.add(&conv_named(store, &format!("{p}.conv"), &h, cfg.kernel_size / 2))
}

pub fn ffa_ref(store: &ParamStore, x: &Nd, cfg: &FfaConfig) -> Nd {
    let pad = cfg.kernel_size / 2;
    let mut feat = conv_named(store, "head", x, pad);
    let mut outs = Vec::new();
    for g in 0..cfg.num_groups {
        feat = group_ref(store, &format!("group{g}"), &feat, cfg);
        outs.push(feat.clone());
    }
    let fused = conv_named(store, "fuse", &Nd::concat_channels(&outs), 0);
    let fused = pa_ref(store, "fuse_pa", &ca_ref(store, "fuse_ca", &fused));
    x.add(&conv_named(store, "tail", &fused, pad))
}

pub fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::default();
    let mut rng = init_rng(seed);
    let layer = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng, DType::F64);
        f(&mut pb)
    };
    (store, layer)
}

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const MARGIN: f64 = 0.1;
pub const PICKS: [usize; 6] = [0, 37, 101, 211, 389, 997];

/// Compares backprop against central differences of `loss` for a few
/// elements of `var`. The variable is restored afterwards.
pub fn check_var(var: &Var, loss: &dyn Fn() -> Tensor, picks: &[usize], what: &str) -> Result<(), String> {
    let grads = loss().backward().map_err(|e| e.to_string())?;
    let analytic = grads
        .get(var.as_tensor())
        .ok_or_else(|| format!("{what}: no gradient"))?
        .flatten_all()
        .and_then(|t| t.to_vec1::<f64>())
        .map_err(|e| e.to_string())?;
    let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let shape = var.dims().to_vec();
    let eval = |values: &[f64]| -> f64 {
        var.set(&Tensor::from_vec(values.to_vec(), shape.clone(), &Device::Cpu).unwrap())
            .unwrap();
        loss().to_scalar::<f64>().unwrap()
    };
    let mut result = Ok(());
    for &p in picks {
        let i = p % base.len();
        let mut v = base.clone();
        v[i] = base[i] + EPS;
        let up = eval(&v);
        v[i] = base[i] - EPS;
        let down = eval(&v);
        let fd = (up - down) / (2.0 * EPS);
        let err = rel_err(fd, analytic[i]);
        if err >= TOL {
            result = Err(format!(
                "{what}[{i}]: finite difference {fd} vs backprop {} (rel {err})",
                analytic[i]
            ));
            break;
        }
    }
    var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
    result
}

/// Shifts the bias of a ReLU-feeding conv so every pre-activation `z` of
/// even channels is at least `margin` and every odd channel at most `-margin`.
/// Central differences then never straddle a ReLU kink.
pub fn clear_kinks(store: &ParamStore, conv: &str, z: &Nd, margin: f64) {
    let var = store.param(&format!("{conv}.bias")).unwrap();
    let mut b = var.as_tensor().to_vec1::<f64>().unwrap();
    let [n, c, h, w] = z.dims;
    for o in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| (0..h).flat_map(move |y| (0..w).map(move |x| (i, y, x))))
            .map(|(i, y, x)| z.at(i, o, y, x))
            .collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if o % 2 == 0 {
            b[o] += margin - lo;
        } else {
            b[o] -= hi + margin;
        }
    }
    var.set(&Tensor::new(b, &Device::Cpu).unwrap()).unwrap();
}

pub fn clear_ca_kinks(store: &ParamStore, p: &str, f: &Nd) {
    let z = conv_named(store, &format!("{p}.reduce"), &global_pool(f), 0);
    clear_kinks(store, &format!("{p}.reduce"), &z, MARGIN);
}

pub fn clear_pa_kinks(store: &ParamStore, p: &str, f: &Nd) {
    let z = conv_named(store, &format!("{p}.reduce"), f, 0);
    clear_kinks(store, &format!("{p}.reduce"), &z, MARGIN);
}

/// `sum(out * r)` for fixed random `r` in [-1, 1].
pub fn weighted_sum(out: &Tensor, seed: u64) -> Tensor {
    let dims = out.dims();
    let r = random_tensor(seed, [dims[0], dims[1], dims[2], dims[3]], DType::F64);
    let r = ((r - 0.5).unwrap() * 2.0).unwrap();
    (out * r).unwrap().sum_all().unwrap()
}

pub fn small_ffa_config() -> FfaConfig {
    FfaConfig {
        num_groups: 2,
        blocks_per_group: 2,
        feature_dim: 8,
        kernel_size: 3,
        ca_reduction: 4,
    }
}

/// Input, weight and bias gradients of a conv in several geometries on 16x16 inputs.
pub fn conv_gradients() -> Result<(), String> {
    for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (4, 2, 1), (5, 1, 2)] {
        let (_, conv) = build(20, |pb| Conv2d::new(pb, 4, 5, k, stride, pad).unwrap());
        let x = Var::from_tensor(&random_nd(21, [2, 4, 16, 16], -1.0, 1.0).to_tensor()).unwrap();
        let loss = || weighted_sum(&conv.forward(x.as_tensor()).unwrap(), 22);
        let what = format!("conv k{k} s{stride}");
        check_var(&x, &loss, &PICKS, &format!("{what} input"))?;
        check_var(conv.weight(), &loss, &PICKS, &format!("{what} weight"))?;
        check_var(conv.bias(), &loss, &[0, 1, 2, 3, 4], &format!("{what} bias"))?;
    }
    Ok(())
}

pub fn channel_attention_gradients() -> Result<(), String> {
    let (store, ca) = build(23, |pb| ChannelAttention::new(&mut pb.pp("ca"), 16, 4).unwrap());
    jitter_biases(&store, 230);
    let f = random_nd(24, [1, 16, 16, 16], -1.0, 1.0);
    clear_ca_kinks(&store, "ca", &f);
    let x = Var::from_tensor(&f.to_tensor()).unwrap();
    let loss = || weighted_sum(&ca.forward(x.as_tensor()).unwrap(), 25);
    check_var(&x, &loss, &PICKS, "ca input")?;
    for (name, var) in store.params() {
        check_var(var, &loss, &PICKS, &format!("ca {name}"))?;
    }
    Ok(())
}

pub fn pixel_attention_gradients() -> Result<(), String> {
    let (store, pa) = build(26, |pb| PixelAttention::new(&mut pb.pp("pa"), 16, 4).unwrap());
    jitter_biases(&store, 260);
    let f = random_nd(27, [1, 16, 16, 16], -1.0, 1.0);
    clear_pa_kinks(&store, "pa", &f);
    let x = Var::from_tensor(&f.to_tensor()).unwrap();
    let loss = || weighted_sum(&pa.forward(x.as_tensor()).unwrap(), 28);
    check_var(&x, &loss, &PICKS, "pa input")?;
    for (name, var) in store.params() {
        check_var(var, &loss, &PICKS, &format!("pa {name}"))?;
    }
    Ok(())
}

pub fn residual_block_gradients() -> Result<(), String> {
    let cfg = FfaConfig {
        feature_dim: 16,
        ca_reduction: 4,
        ..small_ffa_config()
    };
    let (store, block) = build(29, |pb| ResidualBlock::new(&mut pb.pp("blk"), &cfg).unwrap());
    jitter_biases(&store, 290);
    let f = random_nd(30, [1, 16, 16, 16], -1.0, 1.0);
    let z1 = conv_named(&store, "blk.conv1", &f, 1);
    clear_kinks(&store, "blk.conv1", &z1, MARGIN);
    let h = conv_named(&store, "blk.conv2", &conv_named(&store, "blk.conv1", &f, 1).map(relu), 1);
    clear_ca_kinks(&store, "blk.ca", &h);
    clear_pa_kinks(&store, "blk.pa", &ca_ref(&store, "blk.ca", &h));
    let x = Var::from_tensor(&f.to_tensor()).unwrap();
    let loss = || weighted_sum(&block.forward(x.as_tensor()).unwrap(), 31);
    check_var(&x, &loss, &PICKS, "block input")?;
    for (name, var) in store.params() {
        check_var(var, &loss, &PICKS[..3], &format!("block {name}"))?;
    }
    Ok(())
}

pub fn ffa_input_gradient() -> Result<(), String> {
    let g = Ffa::new(small_ffa_config(), 32, DType::F64).unwrap();
    jitter_biases(g.params(), 320);
    let x = Var::from_tensor(&random_nd(33, [1, 3, 16, 16], 0.0, 1.0).to_tensor()).unwrap();
    let loss = || g.forward(x.as_tensor()).unwrap().mean_all().unwrap();
    check_var(&x, &loss, &[0, 130, 400, 767], "ffa input")
}
