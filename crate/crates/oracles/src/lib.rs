//! Plain-loop reference implementations used as test oracles.

pub mod layers;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense row-major `(n, c, h, w)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Nd {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Nd {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.dims();
        let dims = match d.len() {
            4 => [d[0], d[1], d[2], d[3]],
            1 => [d[0], 1, 1, 1],
            _ => panic!("unsupported rank {d:?}"),
        };
        Self {
            dims,
            data: t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap(),
        }
    }

    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dims, other.dims);
        Self {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Multiplies every channel plane by the matching `(n, 1, h, w)` map.
    pub fn mul_spatial(&self, map: &Self) -> Self {
        let mut out = self.clone();
        for n in 0..self.dims[0] {
            for c in 0..self.dims[1] {
                for y in 0..self.dims[2] {
                    for x in 0..self.dims[3] {
                        let i = self.idx(n, c, y, x);
                        out.data[i] *= map.at(n, 0, y, x);
                    }
                }
            }
        }
        out
    }

    /// Multiplies every channel by the matching `(n, c, 1, 1)` weight.
    pub fn mul_channel(&self, weights: &Self) -> Self {
        let mut out = self.clone();
        for n in 0..self.dims[0] {
            for c in 0..self.dims[1] {
                for y in 0..self.dims[2] {
                    for x in 0..self.dims[3] {
                        let i = self.idx(n, c, y, x);
                        out.data[i] *= weights.at(n, c, 0, 0);
                    }
                }
            }
        }
        out
    }

    pub fn concat_channels(parts: &[Self]) -> Self {
        let [n, _, h, w] = parts[0].dims;
        let c: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut out = Self::zeros([n, c, h, w]);
        for b in 0..n {
            let mut off = 0;
            for p in parts {
                for ch in 0..p.dims[1] {
                    for y in 0..h {
                        for x in 0..w {
                            let i = out.idx(b, off + ch, y, x);
                            out.data[i] = p.at(b, ch, y, x);
                        }
                    }
                }
                off += p.dims[1];
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), self.dims.to_vec(), &Device::Cpu).unwrap()
    }
}

/// Direct cross-correlation with zero padding plus bias.
pub fn conv_ref(x: &Nd, w: &Nd, b: &[f64], stride: usize, pad: usize) -> Nd {
    let [n, c_in, h, wd] = x.dims;
    let [c_out, wc, kh, kw] = w.dims;
    assert_eq!(wc, c_in);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Nd::zeros([n, c_out, oh, ow]);
    for bi in 0..n {
        for o in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..c_in {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y * stride + i) as isize - pad as isize;
                                let sx = (xx * stride + j) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, c, i, j) * x.at(bi, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    let idx = out.idx(bi, o, y, xx);
                    out.data[idx] = acc;
                }
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Mean over the spatial axes, `(n, c, 1, 1)`.
pub fn global_pool(x: &Nd) -> Nd {
    let [n, c, h, w] = x.dims;
    let mut out = Nd::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(b, ch, y, xx);
                }
            }
            out.data[b * c + ch] = s / (h * w) as f64;
        }
    }
    out
}

pub fn random_nd(seed: u64, dims: [usize; 4], lo: f64, hi: f64) -> Nd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Nd {
        dims,
        data: (0..dims.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

pub fn random_tensor(seed: u64, dims: [usize; 4], dtype: DType) -> Tensor {
    random_nd(seed, dims, 0.0, 1.0).to_tensor().to_dtype(dtype).unwrap()
}

/// Windowed double-precision SSIM written directly from the definition:
/// for every valid 11x11 window, Gaussian-weighted means, variances and covariance.
pub fn ssim_loop(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut g = vec![0.0; k * k];
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma);
            g[i * k + j] = (-d).exp();
            total += g[i * k + j];
        }
    }
    g.iter_mut().for_each(|v| *v /= total);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (y + i) * w + x + j;
                    ma += g[i * k + j] * a[p];
                    mb += g[i * k + j] * b[p];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (y + i) * w + x + j;
                    va += g[i * k + j] * (a[p] - ma).powi(2);
                    vb += g[i * k + j] * (b[p] - mb).powi(2);
                    cov += g[i * k + j] * (a[p] - ma) * (b[p] - mb);
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn psnr_loop(a: &[f64], b: &[f64], range: f64) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = se / a.len() as f64;
    10.0 * (range * range / mse).log10()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Mean of [`ssim_loop`] over every `(n, c)` plane.
pub fn ssim_oracle(a: &Nd, b: &Nd) -> f64 {
    let [n, c, h, w] = a.dims;
    let plane = h * w;
    let mut total = 0.0;
    for i in 0..n * c {
        let r = i * plane..(i + 1) * plane;
        total += ssim_loop(&a.data[r.clone()], &b.data[r], h, w, 1.0);
    }
    total / (n * c) as f64
}

/// A random 32x32 image and a blend of it with noise. The blend weight
/// grows from 0 at `seed = 0` to 0.9 at `seed = last`, so the pairs span
/// identical through nearly unrelated.
pub fn correlated_pair(seed: u64, last: u64) -> (Nd, Nd) {
    let a = random_nd(seed, [1, 3, 32, 32], 0.0, 1.0);
    let noise = random_nd(seed + 1000, [1, 3, 32, 32], 0.0, 1.0);
    let mix = 0.9 * seed as f64 / last.max(1) as f64;
    let b = Nd {
        dims: a.dims,
        data: a.data.iter().zip(&noise.data).map(|(x, n)| (1.0 - mix) * x + mix * n).collect(),
    };
    (a, b)
}
