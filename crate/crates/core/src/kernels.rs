//! Dense NCHW convolution kernels used by the conv layers.
//!
//! General convolutions go through im2col + GEMM. Stride-1, pad-1 3x3
//! convolutions (the bulk of the FFA body) use Winograd F(2x2, 3x3), which
//! needs 16 multiplies per 2x2 output tile instead of 36.

use num_traits::Float;

/// Scalar types the kernels run on.
pub trait Element: Float + Default + Send + Sync + std::ops::AddAssign + 'static {
    /// `c = alpha * a * b + beta * c` over strided views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Which operand of a product is stored transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    /// `a (m x k) * b (k x n)`
    None,
    /// `a` stored as `k x m`
    A,
    /// `b` stored as `n x k`
    B,
}

/// Row-major `c (m x n) = a * b (+ c if accumulate)`.
pub fn gemm<T: Element>(
    trans: Trans,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = match trans {
        Trans::A => (1, m as isize),
        _ => (k as isize, 1),
    };
    let (rsb, csb) = match trans {
        Trans::B => (1, k as isize),
        _ => (n as isize, 1),
    };
    // SAFETY: slice lengths checked above cover every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Static shape of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// False when the padded input is smaller than the kernel.
    pub fn is_valid(&self) -> bool {
        self.stride > 0
            && self.h + 2 * self.pad >= self.kh
            && self.w + 2 * self.pad >= self.kw
            && self.kh > 0
            && self.kw > 0
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_winograd(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.pad == 1 && self.h >= 4 && self.w >= 4
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x (N, Cin, H, W)` with `w (Cout, Cin, KH, KW)`, no bias.
pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    assert!(g.is_valid(), "conv2d: invalid geometry {g:?}");
    assert_eq!(x.len(), g.batch * g.c_in * g.h * g.w, "conv2d: input length");
    assert_eq!(w.len(), g.c_out * g.patch(), "conv2d: weight length");
    if g.is_winograd() {
        return winograd_forward(x, w, g);
    }
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    let in_size = g.c_in * g.h * g.w;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let yn = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if g.is_pointwise() {
            gemm(Trans::None, g.c_out, g.c_in, plane, w, xn, yn, false);
        } else {
            im2col(xn, g, &mut cols);
            gemm(Trans::None, g.c_out, g.patch(), plane, w, &cols, yn, false);
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input<T: Element>(dy: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    assert_eq!(dy.len(), g.batch * g.c_out * plane, "conv2d backward: grad length");
    if g.is_winograd() {
        // Full correlation with the spatially flipped, channel-transposed kernel.
        let mut flipped = vec![T::zero(); w.len()];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for k in 0..9 {
                    flipped[(ci * g.c_out + co) * 9 + (8 - k)] = w[(co * g.c_in + ci) * 9 + k];
                }
            }
        }
        let tg = ConvGeometry {
            c_in: g.c_out,
            c_out: g.c_in,
            ..*g
        };
        return winograd_forward(dy, &flipped, &tg);
    }
    let in_size = g.c_in * g.h * g.w;
    let mut dx = vec![T::zero(); g.batch * in_size];
    let mut dcols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        let dxn = &mut dx[n * in_size..(n + 1) * in_size];
        if g.is_pointwise() {
            gemm(Trans::A, g.c_in, g.c_out, plane, w, dyn_, dxn, false);
        } else {
            gemm(Trans::A, g.patch(), g.c_out, plane, w, dyn_, &mut dcols, false);
            col2im(&dcols, g, dxn);
        }
    }
    dx
}

/// Gradient of the convolution with respect to its kernel, summed over the batch.
pub fn conv2d_backward_weight<T: Element>(x: &[T], dy: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let in_size = g.c_in * g.h * g.w;
    let mut dw = vec![T::zero(); g.c_out * g.patch()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let dyn_ = &dy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if g.is_pointwise() {
            gemm(Trans::B, g.c_out, plane, g.c_in, dyn_, xn, &mut dw, n > 0);
        } else {
            im2col(xn, g, &mut cols);
            gemm(Trans::B, g.c_out, plane, g.patch(), dyn_, &cols, &mut dw, n > 0);
        }
    }
    dw
}

/// Tile rows transformed per GEMM batch; keeps the transformed tiles cache-resident.
const TILE_ROWS_TARGET: usize = 512;

fn winograd_filter<T: Element>(w: &[T], c_out: usize, c_in: usize) -> Vec<T> {
    let half = T::from(0.5).unwrap();
    let mut u = vec![T::zero(); 16 * c_out * c_in];
    let stride = c_out * c_in;
    for co in 0..c_out {
        for ci in 0..c_in {
            let g = &w[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
            // G g : 4x3
            let mut gg = [[T::zero(); 3]; 4];
            for c in 0..3 {
                let (g0, g1, g2) = (g[c], g[3 + c], g[6 + c]);
                gg[0][c] = g0;
                gg[1][c] = (g0 + g1 + g2) * half;
                gg[2][c] = (g0 - g1 + g2) * half;
                gg[3][c] = g2;
            }
            // (G g) G^T : 4x4
            for (r, row) in gg.iter().enumerate() {
                let (a0, a1, a2) = (row[0], row[1], row[2]);
                let vals = [a0, (a0 + a1 + a2) * half, (a0 - a1 + a2) * half, a2];
                for (c, v) in vals.into_iter().enumerate() {
                    u[(r * 4 + c) * stride + co * c_in + ci] = v;
                }
            }
        }
    }
    u
}

fn winograd_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (h, wd) = (g.h, g.w);
    let (th, tw) = (h.div_ceil(2), wd.div_ceil(2));
    // zero border of one pixel on top/left, enough on bottom/right for whole tiles
    let (ph, pw) = (2 * th + 2, 2 * tw + 2);
    let u = winograd_filter(w, g.c_out, g.c_in);
    let u_stride = g.c_out * g.c_in;
    let mut out = vec![T::zero(); g.batch * g.c_out * h * wd];
    let rows_per_chunk = (TILE_ROWS_TARGET / tw).clamp(1, th);
    let max_len = rows_per_chunk * tw;
    let mut padded = vec![T::zero(); g.c_in * ph * pw];
    let mut v = vec![T::zero(); 16 * g.c_in * max_len];
    let mut m = vec![T::zero(); 16 * g.c_out * max_len];
    for n in 0..g.batch {
        let xn = &x[n * g.c_in * h * wd..(n + 1) * g.c_in * h * wd];
        for ci in 0..g.c_in {
            let src = &xn[ci * h * wd..(ci + 1) * h * wd];
            let dst = &mut padded[ci * ph * pw..(ci + 1) * ph * pw];
            for y in 0..h {
                dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + wd].copy_from_slice(&src[y * wd..(y + 1) * wd]);
            }
        }
        let yn = &mut out[n * g.c_out * h * wd..(n + 1) * g.c_out * h * wd];
        let mut ty0 = 0;
        while ty0 < th {
            let rows = rows_per_chunk.min(th - ty0);
            let len = rows * tw;
            let v_stride = g.c_in * len;
            let mut rowbuf = vec![T::zero(); 4 * pw];
            for ci in 0..g.c_in {
                let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
                for r in 0..rows {
                    let ty = ty0 + r;
                    let l0 = &plane[2 * ty * pw..(2 * ty + 1) * pw];
                    let l1 = &plane[(2 * ty + 1) * pw..(2 * ty + 2) * pw];
                    let l2 = &plane[(2 * ty + 2) * pw..(2 * ty + 3) * pw];
                    let l3 = &plane[(2 * ty + 3) * pw..(2 * ty + 4) * pw];
                    // B^T d, applied along columns for the whole tile row at once
                    {
                        let (b0, rest) = rowbuf.split_at_mut(pw);
                        let (b1, rest) = rest.split_at_mut(pw);
                        let (b2, b3) = rest.split_at_mut(pw);
                        for j in 0..pw {
                            b0[j] = l0[j] - l2[j];
                            b1[j] = l1[j] + l2[j];
                            b2[j] = l2[j] - l1[j];
                            b3[j] = l1[j] - l3[j];
                        }
                    }
                    let base = ci * len + r * tw;
                    // (B^T d) B
                    for rr in 0..4 {
                        let src = &rowbuf[rr * pw..(rr + 1) * pw];
                        let at = |xi: usize| (rr * 4 + xi) * v_stride + base;
                        let d0 = &mut v[at(0)..at(0) + tw];
                        for (tx, d) in d0.iter_mut().enumerate() {
                            *d = src[2 * tx] - src[2 * tx + 2];
                        }
                        let d1 = &mut v[at(1)..at(1) + tw];
                        for (tx, d) in d1.iter_mut().enumerate() {
                            *d = src[2 * tx + 1] + src[2 * tx + 2];
                        }
                        let d2 = &mut v[at(2)..at(2) + tw];
                        for (tx, d) in d2.iter_mut().enumerate() {
                            *d = src[2 * tx + 2] - src[2 * tx + 1];
                        }
                        let d3 = &mut v[at(3)..at(3) + tw];
                        for (tx, d) in d3.iter_mut().enumerate() {
                            *d = src[2 * tx + 1] - src[2 * tx + 3];
                        }
                    }
                }
            }
            let m_stride = g.c_out * len;
            for xi in 0..16 {
                gemm(
                    Trans::None,
                    g.c_out,
                    g.c_in,
                    len,
                    &u[xi * u_stride..(xi + 1) * u_stride],
                    &v[xi * v_stride..(xi + 1) * v_stride],
                    &mut m[xi * m_stride..(xi + 1) * m_stride],
                    false,
                );
            }
            let mut am = vec![T::zero(); 8 * tw];
            for co in 0..g.c_out {
                let plane = &mut yn[co * h * wd..(co + 1) * h * wd];
                for r in 0..rows {
                    let off = co * len + r * tw;
                    let s = |xi: usize| &m[xi * m_stride + off..xi * m_stride + off + tw];
                    // A^T M, row-combined for every tile in the row
                    for c in 0..4 {
                        let (m0, m1, m2, m3) = (s(c), s(4 + c), s(8 + c), s(12 + c));
                        let (top, bottom) = am.split_at_mut(4 * tw);
                        let top = &mut top[c * tw..(c + 1) * tw];
                        let bottom = &mut bottom[c * tw..(c + 1) * tw];
                        for t in 0..tw {
                            top[t] = m0[t] + m1[t] + m2[t];
                            bottom[t] = m1[t] - m2[t] - m3[t];
                        }
                    }
                    let oy = 2 * (ty0 + r);
                    for dr in 0..2 {
                        if oy + dr >= h {
                            continue;
                        }
                        let a = &am[dr * 4 * tw..(dr + 1) * 4 * tw];
                        let (a0, a1, a2, a3) = (&a[..tw], &a[tw..2 * tw], &a[2 * tw..3 * tw], &a[3 * tw..]);
                        let line = &mut plane[(oy + dr) * wd..(oy + dr + 1) * wd];
                        let full = wd / 2;
                        for tx in 0..full {
                            line[2 * tx] = a0[tx] + a1[tx] + a2[tx];
                            line[2 * tx + 1] = a1[tx] - a2[tx] - a3[tx];
                        }
                        if wd % 2 == 1 {
                            line[wd - 1] = a0[full] + a1[full] + a2[full];
                        }
                    }
                }
            }
            ty0 += rows;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.c_out * ho * wo];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn geometries() -> Vec<ConvGeometry> {
        let base = ConvGeometry {
            batch: 2,
            c_in: 3,
            c_out: 4,
            h: 9,
            w: 7,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        vec![
            base,
            ConvGeometry { h: 8, w: 10, ..base },
            ConvGeometry { kh: 1, kw: 1, pad: 0, ..base },
            ConvGeometry { kh: 4, kw: 4, stride: 2, pad: 1, h: 16, w: 12, ..base },
            ConvGeometry { kh: 4, kw: 4, stride: 1, pad: 1, ..base },
            ConvGeometry { h: 3, w: 3, ..base },
        ]
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in geometries() {
            let x = random(g.batch * g.c_in * g.h * g.w, &mut rng);
            let w = random(g.c_out * g.patch(), &mut rng);
            let fast = conv2d_forward(&x, &w, &g);
            let slow = direct(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, dx(dy)> and == <w, dw(x, dy)>
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for g in geometries() {
            let x = random(g.batch * g.c_in * g.h * g.w, &mut rng);
            let w = random(g.c_out * g.patch(), &mut rng);
            let dy = random(g.batch * g.c_out * g.out_h() * g.out_w(), &mut rng);
            let y = direct(&x, &w, &g);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let dx = conv2d_backward_input(&dy, &w, &g);
            let dw = conv2d_backward_weight(&x, &dy, &g);
            let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9, "{g:?}: {lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-9, "{g:?}: {lhs} vs {via_w}");
        }
    }

    #[test]
    fn f32_winograd_close_to_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry {
            batch: 1,
            c_in: 16,
            c_out: 8,
            h: 33,
            w: 20,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        let x = random(g.c_in * g.h * g.w, &mut rng);
        let w = random(g.c_out * 144, &mut rng);
        let reference = direct(&x, &w, &g);
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let fast = conv2d_forward(&xf, &wf, &g);
        for (a, b) in fast.iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }
}
