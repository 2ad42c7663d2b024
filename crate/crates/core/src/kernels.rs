//! Single-image convolution kernels (im2col + GEMM) and their adjoints.
//!
//! Every function works on one `[C, H, W]` image stored row-major; the tape loops
//! over the batch.

use crate::tensor::Scalar;

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `[lo, hi)` whose input index `o·stride + k - pad` lies in `[0, n_in)`.
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in - 1 + pad - k) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold zero-padded patches of `x` into `cols: [C·K·K, oh·ow]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(kx, pad, stride, w, ow);
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if stride == 1 {
                        let first = lo + kx - pad;
                        out_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `cols` back into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    let (lo, hi) = valid_range(kx, pad, stride, w, ow);
                    if stride == 1 {
                        let first = lo + kx - pad;
                        for (d, &g) in dst_row[first..first + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                            *d += g;
                        }
                    } else {
                        for ox in lo..hi {
                            dst_row[ox * stride + kx - pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a 2-d convolution on a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, out_c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        Some(Self {
            in_c,
            out_c,
            h,
            w,
            k,
            stride,
            pad,
            oh: conv_out_len(h, k, stride, pad)?,
            ow: conv_out_len(w, k, stride, pad)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// `out = weight · cols + bias` given already unfolded `cols`.
pub fn conv_from_cols<T: Scalar>(g: &ConvGeom, cols: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let p = g.out_plane();
    match bias {
        Some(b) => {
            for (o, &bv) in b.iter().enumerate() {
                out[o * p..(o + 1) * p].fill(bv);
            }
            T::gemm(
                g.out_c,
                g.patch_len(),
                p,
                T::one(),
                weight,
                false,
                cols,
                false,
                T::one(),
                out,
            );
        }
        None => {
            T::gemm(
                g.out_c,
                g.patch_len(),
                p,
                T::one(),
                weight,
                false,
                cols,
                false,
                T::zero(),
                out,
            );
        }
    }
}

/// Forward convolution of one image; `weight` is `[O, C, K, K]`.
pub fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    im2col(x, g.in_c, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, &mut cols);
    conv_from_cols(g, &cols, weight, bias, out);
}

/// Gradients of a convolution given the unfolded input `cols`.
///
/// Returns the column gradient (to be folded with [`col2im`] or a custom scatter)
/// when `want_cols` is set.
pub fn conv_backward_cols<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
    want_cols: bool,
) -> Option<Vec<T>> {
    let p = g.out_plane();
    let kk = g.patch_len();
    if let Some(gw) = grad_weight {
        T::gemm(g.out_c, p, kk, T::one(), grad_out, false, cols, true, T::one(), gw);
    }
    if let Some(gb) = grad_bias {
        for (o, b) in gb.iter_mut().enumerate() {
            let s = grad_out[o * p..(o + 1) * p].iter().fold(T::zero(), |acc, &v| acc + v);
            *b += s;
        }
    }
    if want_cols {
        let mut dcols = vec![T::zero(); kk * p];
        T::gemm(
            kk,
            g.out_c,
            p,
            T::one(),
            weight,
            true,
            grad_out,
            false,
            T::zero(),
            &mut dcols,
        );
        Some(dcols)
    } else {
        None
    }
}

/// Full backward pass of [`conv2d`] for one image. Gradients are accumulated.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let need_cols = grad_weight.is_some();
    let mut cols = Vec::new();
    if need_cols {
        cols = vec![T::zero(); g.patch_len() * g.out_plane()];
        im2col(x, g.in_c, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, &mut cols);
    }
    let dcols = conv_backward_cols(g, &cols, weight, grad_out, grad_weight, grad_bias, grad_x.is_some());
    if let (Some(dx), Some(dcols)) = (grad_x, dcols) {
        col2im(&dcols, g.in_c, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, dx);
    }
}

/// Geometry of a transposed convolution on a single image; weight is `[Cin, Cout, K, K]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvTransposeGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Option<Self> {
        let len = |n: usize| ((n - 1) * stride + k + output_pad).checked_sub(2 * pad);
        if h == 0 || w == 0 || stride == 0 {
            return None;
        }
        Some(Self {
            in_c,
            out_c,
            h,
            w,
            k,
            stride,
            pad,
            oh: len(h)?,
            ow: len(w)?,
        })
    }
}

pub fn conv_transpose2d<T: Scalar>(g: &ConvTransposeGeom, x: &[T], weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let hw = g.h * g.w;
    let kk = g.out_c * g.k * g.k;
    let mut cols = vec![T::zero(); kk * hw];
    T::gemm(kk, g.in_c, hw, T::one(), weight, true, x, false, T::zero(), &mut cols);
    out.fill(T::zero());
    col2im(&cols, g.out_c, g.oh, g.ow, g.k, g.stride, g.pad, g.h, g.w, out);
    if let Some(b) = bias {
        let p = g.oh * g.ow;
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out[o * p..(o + 1) * p] {
                *v += bv;
            }
        }
    }
}

/// Backward of [`conv_transpose2d`]; gradients are accumulated.
pub fn conv_transpose2d_backward<T: Scalar>(
    g: &ConvTransposeGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let kk = g.out_c * g.k * g.k;
    let mut dcols = vec![T::zero(); kk * hw];
    im2col(
        grad_out, g.out_c, g.oh, g.ow, g.k, g.stride, g.pad, g.h, g.w, &mut dcols,
    );
    if let Some(dx) = grad_x {
        T::gemm(g.in_c, kk, hw, T::one(), weight, false, &dcols, false, T::one(), dx);
    }
    if let Some(dw) = grad_weight {
        T::gemm(g.in_c, hw, kk, T::one(), x, false, &dcols, true, T::one(), dw);
    }
    if let Some(db) = grad_bias {
        let p = g.oh * g.ow;
        for (o, b) in db.iter_mut().enumerate() {
            *b += grad_out[o * p..(o + 1) * p].iter().fold(T::zero(), |acc, &v| acc + v);
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflection padding of a `[C, H, W]` image by `pad` pixels on every side.
pub fn reflect_pad<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, pad: usize, out: &mut [T]) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * ph * pw..(ci + 1) * ph * pw];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                dst[y * pw + xx] = src[sy * w + sx];
            }
        }
    }
}

pub fn reflect_pad_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize, pad: usize, grad_x: &mut [T]) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    for ci in 0..c {
        let src = &grad_out[ci * ph * pw..(ci + 1) * ph * pw];
        let dst = &mut grad_x[ci * h * w..(ci + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                dst[sy * w + sx] += src[y * pw + xx];
            }
        }
    }
}

pub fn zero_pad<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, pad: usize, out: &mut [T]) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    out.fill(T::zero());
    for ci in 0..c {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..(ci * h + y + 1) * w];
            let start = ci * ph * pw + (y + pad) * pw + pad;
            out[start..start + w].copy_from_slice(src);
        }
    }
}

pub fn zero_pad_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize, pad: usize, grad_x: &mut [T]) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    for ci in 0..c {
        for y in 0..h {
            let start = ci * ph * pw + (y + pad) * pw + pad;
            for (d, &g) in grad_x[(ci * h + y) * w..(ci * h + y + 1) * w]
                .iter_mut()
                .zip(&grad_out[start..start + w])
            {
                *d += g;
            }
        }
    }
}

/// Per-channel instance normalization of one plane; returns `1/σ`.
pub fn instance_norm_plane<T: Scalar>(x: &[T], eps: f64, out: &mut [T]) -> T {
    let n = x.len() as f64;
    let mean = x.iter().fold(0.0f64, |a, v| a + v.f64()) / n;
    let var = x.iter().fold(0.0f64, |a, v| {
        let d = v.f64() - mean;
        a + d * d
    }) / n;
    let inv = 1.0 / (var + eps).sqrt();
    let (m, s) = (T::of(mean), T::of(inv));
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m) * s;
    }
    s
}

/// Backward of [`instance_norm_plane`] from its normalized output `y` and `1/σ`.
pub fn instance_norm_plane_backward<T: Scalar>(y: &[T], inv_std: T, grad_out: &[T], grad_x: &mut [T]) {
    let n = y.len() as f64;
    let sum_g = grad_out.iter().fold(0.0f64, |a, v| a + v.f64());
    let sum_gy = grad_out.iter().zip(y).fold(0.0f64, |a, (g, v)| a + g.f64() * v.f64());
    let (mg, mgy) = (T::of(sum_g / n), T::of(sum_gy / n));
    for ((d, &g), &v) in grad_x.iter_mut().zip(grad_out).zip(y) {
        *d += inv_std * (g - mg - v * mgy);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, wt: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_c * g.oh * g.ow];
        for o in 0..g.out_c {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = 0.0;
                    for c in 0..g.in_c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * wt[((o * g.in_c + c) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                    }
                    out[(o * g.oh + oy) * g.ow + ox] = s;
                }
            }
        }
        out
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * a).sin()).collect()
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1), (1, 3, 7)] {
            let g = ConvGeom::new(2, 3, 9, 8, k, stride, pad).unwrap();
            let x = seq(2 * 9 * 8, 0.7);
            let w = seq(3 * 2 * k * k, 0.3);
            let mut out = vec![0.0; 3 * g.oh * g.ow];
            conv2d(&g, &x, &w, None, &mut out);
            let expect = naive_conv(&x, &g, &w);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)> with the weight reinterpreted as [Cin=O, Cout=C]
        let g = ConvGeom::new(2, 3, 8, 8, 3, 2, 1).unwrap();
        let x = seq(2 * 64, 0.21);
        let w = seq(3 * 2 * 9, 0.5);
        let y = seq(3 * g.oh * g.ow, 0.9);
        let mut cx = vec![0.0; y.len()];
        conv2d(&g, &x, &w, None, &mut cx);
        let tg = ConvTransposeGeom::new(3, 2, g.oh, g.ow, 3, 2, 1, 1).unwrap();
        assert_eq!((tg.oh, tg.ow), (8, 8));
        let mut ty = vec![0.0; x.len()];
        conv_transpose2d(&tg, &y, &w, None, &mut ty);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn reflect_pad_layout() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut out = vec![0.0; 25];
        reflect_pad(&x, 1, 3, 3, 1, &mut out);
        assert_eq!(&out[0..5], &[4.0, 3.0, 4.0, 5.0, 4.0]);
        assert_eq!(&out[5..10], &[1.0, 0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = seq(50, 0.37);
        let mut y = vec![0.0; 50];
        instance_norm_plane(&x, 0.0, &mut y);
        let m: f64 = y.iter().sum::<f64>() / 50.0;
        let v: f64 = y.iter().map(|a| a * a).sum::<f64>() / 50.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-10);
    }
}
