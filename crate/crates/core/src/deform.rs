//! Deformable convolution primitives.
//!
//! A deformable convolution samples every kernel tap at its regular grid position
//! plus a learned `(dy, dx)` displacement, using bilinear interpolation of the
//! input feature map. The displacements come from an ordinary "offset" convolution
//! whose output has `2·K·K` channels. In [`DeformMode::Undeformed`] the offset
//! branch is not evaluated at all and the layer is a plain convolution.
//!
//! Sampling coordinates are clamped to the valid range of the (padded) map, so
//! arbitrarily large offsets still produce finite values and gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which forward pass of a dual-path generator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformMode {
    /// Offsets active: `G_T(x) = G(x | θ, θ_T)`.
    Deformed,
    /// Offset branch bypassed: `G(x) = G(x | θ)`.
    Undeformed,
}

impl FromStr for DeformMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deformed" => Ok(DeformMode::Deformed),
            "undeformed" => Ok(DeformMode::Undeformed),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected deformed|undeformed)"
            ))),
        }
    }
}

impl fmt::Display for DeformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeformMode::Deformed => "deformed",
            DeformMode::Undeformed => "undeformed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetInit {
    Zero,
}

/// Configuration of one deformable convolution layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformableConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub padding_mode: PaddingMode,
    pub offset_init: OffsetInit,
    /// Kernel size of the offset-predicting convolution (odd).
    pub offset_kernel: usize,
    /// Optional soft bound `cap·tanh(o/cap)` on offsets, in pixels. Off by default.
    pub offset_cap: Option<f64>,
}

impl DeformableConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
            padding_mode: PaddingMode::Zero,
            offset_init: OffsetInit::Zero,
            offset_kernel: 3,
            offset_cap: None,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize, mode: PaddingMode) -> Self {
        self.padding = padding;
        self.padding_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.offset_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "offset kernel size must be odd, got {}",
                self.offset_kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if 2 * self.padding + self.offset_kernel < self.kernel_size {
            return Err(Error::Config(format!(
                "padding {} too small for a {}x{} offset branch under a {}x{} kernel",
                self.padding, self.offset_kernel, self.offset_kernel, self.kernel_size, self.kernel_size
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if let Some(cap) = self.offset_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!("offset cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }

    /// Zero padding of the offset convolution. It puts the offset grid on the same
    /// output positions, with the same centres, as the main convolution.
    pub fn offset_padding(&self) -> usize {
        (2 * self.padding + self.offset_kernel - self.kernel_size) / 2
    }

    /// Number of channels of the offset field: `2·K·K`.
    pub fn offset_channels(&self) -> usize {
        2 * self.kernel_size * self.kernel_size
    }
}

/// Per-tap sampling displacements `[2·K·K, H, W]`, channel `2t` is `dy` and `2t+1`
/// is `dx` of tap `t = ky·K + kx`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T: Scalar = f32> {
    offsets: Tensor<T>,
    kernel_size: usize,
}

impl<T: Scalar> OffsetField<T> {
    pub fn new(offsets: Tensor<T>, kernel_size: usize) -> Result<Self> {
        let [c, _, _] = offsets.dims3()?;
        if c != 2 * kernel_size * kernel_size {
            return Err(Error::Shape(format!(
                "offset field for K={kernel_size} needs {} channels, got {c}",
                2 * kernel_size * kernel_size
            )));
        }
        if !offsets.all_finite() {
            return Err(Error::Shape("offset field contains non-finite values".into()));
        }
        Ok(Self { offsets, kernel_size })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.offsets
    }

    /// Constant displacement `(dy, dx)` for every tap and location.
    pub fn constant(kernel_size: usize, h: usize, w: usize, dy: T, dx: T) -> Self {
        let taps = kernel_size * kernel_size;
        let mut t = Tensor::zeros(&[2 * taps, h, w]);
        for tap in 0..taps {
            t.data_mut()[(2 * tap) * h * w..(2 * tap + 1) * h * w].fill(dy);
            t.data_mut()[(2 * tap + 1) * h * w..(2 * tap + 2) * h * w].fill(dx);
        }
        Self {
            offsets: t,
            kernel_size,
        }
    }
}

/// Bilinear sampling stencil at one continuous point of an `h×w` map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<T> {
    pub idx: [usize; 4],
    pub wts: [T; 4],
    /// Fractional parts after clamping.
    pub ay: T,
    pub ax: T,
    /// Whether the coordinate was inside the valid range (derivative is live).
    pub live_y: bool,
    pub live_x: bool,
}

impl<T: Scalar> Stencil<T> {
    #[inline]
    pub fn new(y: T, x: T, h: usize, w: usize) -> Self {
        let (hmax, wmax) = (T::of((h - 1) as f64), T::of((w - 1) as f64));
        let live_y = y >= T::zero() && y <= hmax;
        let live_x = x >= T::zero() && x <= wmax;
        let cy = y.max(T::zero()).min(hmax);
        let cx = x.max(T::zero()).min(wmax);
        // cy, cx are clamped to be non-negative, so truncation is floor.
        let y0 = (cy.f64() as usize).min(h - 1);
        let x0 = (cx.f64() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ay = cy - T::of(y0 as f64);
        let ax = cx - T::of(x0 as f64);
        let (by, bx) = (T::one() - ay, T::one() - ax);
        Self {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            wts: [by * bx, by * ax, ay * bx, ay * ax],
            ay,
            ax,
            live_y,
            live_x,
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        self.wts[0] * plane[self.idx[0]]
            + self.wts[1] * plane[self.idx[1]]
            + self.wts[2] * plane[self.idx[2]]
            + self.wts[3] * plane[self.idx[3]]
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for i in 0..4 {
            plane[self.idx[i]] += self.wts[i] * g;
        }
    }

    /// Partial derivatives of the sampled value w.r.t. the point coordinates.
    #[inline]
    pub fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let v = [
            plane[self.idx[0]],
            plane[self.idx[1]],
            plane[self.idx[2]],
            plane[self.idx[3]],
        ];
        let dy = if self.live_y {
            (T::one() - self.ax) * (v[2] - v[0]) + self.ax * (v[3] - v[1])
        } else {
            T::zero()
        };
        let dx = if self.live_x {
            (T::one() - self.ay) * (v[1] - v[0]) + self.ay * (v[3] - v[2])
        } else {
            T::zero()
        };
        (dy, dx)
    }
}

fn check_points<T: Scalar>(points: &Tensor<T>) -> Result<(usize, usize)> {
    let [two, h, w] = points.dims3()?;
    if two != 2 {
        return Err(Error::Shape(format!(
            "sampling points must be [2, H', W'], got {:?}",
            points.shape()
        )));
    }
    Ok((h, w))
}

/// Bilinearly sample `feature: [C, H, W]` at `points: [2, H', W']` (row `y`, column `x`
/// in pixel units). Returns `[C, H', W']`.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = feature.dims3()?;
    let (oh, ow) = check_points(points)?;
    let p = oh * ow;
    let (ys, xs) = points.data().split_at(p);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let od = out.data_mut();
    for (i, (&y, &x)) in ys.iter().zip(xs).enumerate() {
        let s = Stencil::new(y, x, h, w);
        for ci in 0..c {
            od[ci * p + i] = s.sample(&feature.data()[ci * h * w..(ci + 1) * h * w]);
        }
    }
    Ok(out)
}

/// Gradients of `Σ grad_out ⊙ bilinear_sample(feature, points)` with respect to the
/// feature map and the point coordinates.
pub fn bilinear_sample_backward<T: Scalar>(
    feature: &Tensor<T>,
    points: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [c, h, w] = feature.dims3()?;
    let (oh, ow) = check_points(points)?;
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match sampled output [{c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let p = oh * ow;
    let mut gf = Tensor::zeros(feature.shape());
    let mut gp = Tensor::zeros(points.shape());
    let (ys, xs) = points.data().split_at(p);
    for (i, (&y, &x)) in ys.iter().zip(xs).enumerate() {
        let s = Stencil::new(y, x, h, w);
        let (mut dy, mut dx) = (T::zero(), T::zero());
        for ci in 0..c {
            let g = grad_out.data()[ci * p + i];
            let plane = &feature.data()[ci * h * w..(ci + 1) * h * w];
            s.scatter(&mut gf.data_mut()[ci * h * w..(ci + 1) * h * w], g);
            let (a, b) = s.coord_grad(plane);
            dy += g * a;
            dx += g * b;
        }
        gp.data_mut()[i] = dy;
        gp.data_mut()[p + i] = dx;
    }
    Ok((gf, gp))
}

/// Geometry of the sampling core of a deformable convolution on a padded map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DeformGeom {
    pub c: usize,
    pub hp: usize,
    pub wp: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl DeformGeom {
    #[inline]
    fn stencil<T: Scalar>(&self, offsets: &[T], tap: usize, loc: usize) -> Stencil<T> {
        let p = self.oh * self.ow;
        let (oy, ox) = (loc / self.ow, loc % self.ow);
        let (ky, kx) = (tap / self.k, tap % self.k);
        let y = T::of((oy * self.stride + ky) as f64) + offsets[2 * tap * p + loc];
        let x = T::of((ox * self.stride + kx) as f64) + offsets[(2 * tap + 1) * p + loc];
        Stencil::new(y, x, self.hp, self.wp)
    }

    /// Deformable im2col: `cols[(c·K·K + tap), loc]`.
    pub fn unfold<T: Scalar>(&self, xp: &[T], offsets: &[T], cols: &mut [T]) {
        let taps = self.k * self.k;
        let p = self.oh * self.ow;
        let plane = self.hp * self.wp;
        for tap in 0..taps {
            for loc in 0..p {
                let s = self.stencil(offsets, tap, loc);
                for ci in 0..self.c {
                    cols[(ci * taps + tap) * p + loc] = s.sample(&xp[ci * plane..(ci + 1) * plane]);
                }
            }
        }
    }

    /// Adjoint of [`DeformGeom::unfold`] w.r.t. the padded input and the offsets.
    pub fn fold<T: Scalar>(
        &self,
        xp: &[T],
        offsets: &[T],
        dcols: &[T],
        mut dxp: Option<&mut [T]>,
        mut doff: Option<&mut [T]>,
    ) {
        let taps = self.k * self.k;
        let p = self.oh * self.ow;
        let plane = self.hp * self.wp;
        for tap in 0..taps {
            for loc in 0..p {
                let s = self.stencil(offsets, tap, loc);
                let (mut gy, mut gx) = (T::zero(), T::zero());
                for ci in 0..self.c {
                    let g = dcols[(ci * taps + tap) * p + loc];
                    if g == T::zero() {
                        continue;
                    }
                    if let Some(d) = dxp.as_deref_mut() {
                        s.scatter(&mut d[ci * plane..(ci + 1) * plane], g);
                    }
                    if doff.is_some() {
                        let (a, b) = s.coord_grad(&xp[ci * plane..(ci + 1) * plane]);
                        gy += g * a;
                        gx += g * b;
                    }
                }
                if let Some(d) = doff.as_deref_mut() {
                    d[2 * tap * p + loc] += gy;
                    d[(2 * tap + 1) * p + loc] += gx;
                }
            }
        }
    }
}

/// Trainable tensors of one deformable layer, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct DeformVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub offset_weight: Var,
    pub offset_bias: Var,
}

/// Record a deformable convolution on the tape.
///
/// In undeformed mode only `weight`/`bias` are touched and the offset convolution
/// is never evaluated, so its parameters receive no gradient.
pub fn deformable_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &DeformableConvSpec,
    vars: &DeformVars,
    mode: DeformMode,
) -> Result<Var> {
    spec.validate()?;
    let [_, c, _, _] = tape.value(x).dims4()?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "deformable conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    let padded = match (spec.padding, spec.padding_mode) {
        (0, _) => x,
        (p, PaddingMode::Reflect) => tape.reflect_pad(x, p)?,
        (p, PaddingMode::Zero) => tape.zero_pad(x, p)?,
    };
    match mode {
        DeformMode::Undeformed => tape.conv2d(padded, vars.weight, vars.bias, spec.stride, 0),
        DeformMode::Deformed => {
            let raw = tape.conv2d(
                x,
                vars.offset_weight,
                Some(vars.offset_bias),
                spec.stride,
                spec.offset_padding(),
            )?;
            let offsets = match spec.offset_cap {
                None => raw,
                Some(cap) => {
                    let s = tape.scale(raw, T::of(1.0 / cap));
                    let t = tape.tanh(s);
                    tape.scale(t, T::of(cap))
                }
            };
            tape.deform_conv2d(padded, offsets, vars.weight, vars.bias, spec.kernel_size, spec.stride)
        }
    }
}

/// Convolution weights: `weight: [O, C, K, K]`, optional `bias: [O]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn zeros(out_c: usize, in_c: usize, k: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: bias.then(|| Tensor::zeros(&[out_c])),
        }
    }
}

/// Zero-initialized offset-branch weights for `spec`.
pub fn zero_offset_weights<T: Scalar>(spec: &DeformableConvSpec) -> ConvWeights<T> {
    ConvWeights::zeros(spec.offset_channels(), spec.in_channels, spec.offset_kernel, true)
}

fn check_weights<T: Scalar>(spec: &DeformableConvSpec, w: &ConvWeights<T>, offset: bool) -> Result<()> {
    let (o, k) = if offset {
        (spec.offset_channels(), spec.offset_kernel)
    } else {
        (spec.out_channels, spec.kernel_size)
    };
    let expect = [o, spec.in_channels, k, k];
    if w.weight.shape() != expect {
        return Err(Error::Shape(format!(
            "{} weight shape {:?}, expected {expect:?}",
            if offset { "offset" } else { "main" },
            w.weight.shape()
        )));
    }
    if let Some(b) = &w.bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!("bias shape {:?}, expected [{o}]", b.shape())));
        }
    }
    Ok(())
}

/// Evaluate one deformable convolution on a `[C, H, W]` input.
///
/// Convenience wrapper over [`deformable_conv`] that builds a throwaway tape.
pub fn deformable_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &DeformableConvSpec,
    weights: &ConvWeights<T>,
    offset_weights: &ConvWeights<T>,
    mode: DeformMode,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_weights(spec, weights, false)?;
    check_weights(spec, offset_weights, true)?;
    let [c, h, w] = x.dims3()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, c, h, w])?);
    let vars = DeformVars {
        weight: tape.constant(weights.weight.clone()),
        bias: weights.bias.clone().map(|b| tape.constant(b)),
        offset_weight: tape.constant(offset_weights.weight.clone()),
        offset_bias: tape.constant(
            offset_weights
                .bias
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&[spec.offset_channels()])),
        ),
    };
    let out = deformable_conv(&mut tape, xv, spec, &vars, mode)?;
    let t = tape.value(out).clone();
    let [_, oc, oh, ow] = t.dims4()?;
    t.reshape(&[oc, oh, ow])
}

/// Deformable convolution with an explicitly supplied offset field (no offset branch).
pub fn deformable_conv_with_offsets<T: Scalar>(
    x: &Tensor<T>,
    spec: &DeformableConvSpec,
    weights: &ConvWeights<T>,
    offsets: &OffsetField<T>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_weights(spec, weights, false)?;
    if offsets.kernel_size() != spec.kernel_size {
        return Err(Error::Shape("offset field kernel size mismatch".into()));
    }
    let [c, h, w] = x.dims3()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, c, h, w])?);
    let padded = match (spec.padding, spec.padding_mode) {
        (0, _) => xv,
        (p, PaddingMode::Reflect) => tape.reflect_pad(xv, p)?,
        (p, PaddingMode::Zero) => tape.zero_pad(xv, p)?,
    };
    let [oc2, oh, ow] = offsets.tensor().dims3()?;
    let off = tape.constant(offsets.tensor().clone().reshape(&[1, oc2, oh, ow])?);
    let wv = tape.constant(weights.weight.clone());
    let bv = weights.bias.clone().map(|b| tape.constant(b));
    let out = tape.deform_conv2d(padded, off, wv, bv, spec.kernel_size, spec.stride)?;
    let t = tape.value(out).clone();
    let [_, oc, oh, ow] = t.dims4()?;
    t.reshape(&[oc, oh, ow])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar bilinear interpolation written independently of [`Stencil`].
    fn oracle_bilinear(map: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let get = |r: i64, c: i64| {
            let r = r.clamp(0, h as i64 - 1) as usize;
            let c = c.clamp(0, w as i64 - 1) as usize;
            map[r * w + c]
        };
        let (r0, c0) = (y.floor() as i64, x.floor() as i64);
        let (fy, fx) = (y - r0 as f64, x - c0 as f64);
        get(r0, c0) * (1.0 - fy) * (1.0 - fx)
            + get(r0, c0 + 1) * (1.0 - fy) * fx
            + get(r0 + 1, c0) * fy * (1.0 - fx)
            + get(r0 + 1, c0 + 1) * fy * fx
    }

    #[test]
    fn integer_points_gather_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_tensor(&mut rng, &[2, 4, 5]);
        let pts = Tensor::from_vec(&[2, 1, 3], vec![0.0, 3.0, 2.0, 4.0, 0.0, 1.0]).unwrap();
        let out = bilinear_sample(&f, &pts).unwrap();
        for c in 0..2 {
            assert_eq!(out.data()[c * 3], f.data()[c * 20 + 4]);
            assert_eq!(out.data()[c * 3 + 1], f.data()[c * 20 + 3 * 5]);
            assert_eq!(out.data()[c * 3 + 2], f.data()[c * 20 + 2 * 5 + 1]);
        }
    }

    #[test]
    fn center_of_patch_averages() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let pts = Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        let out = bilinear_sample(&f, &pts).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_points_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = rand_tensor(&mut rng, &[1, 5, 5]);
        let mut pts = vec![0.0; 40];
        for i in 0..20 {
            pts[i] = rng.gen_range(0.0..4.0);
            pts[20 + i] = rng.gen_range(0.0..4.0);
        }
        let pts = Tensor::from_vec(&[2, 4, 5], pts).unwrap();
        let out = bilinear_sample(&f, &pts).unwrap();
        for i in 0..20 {
            let e = oracle_bilinear(f.data(), 5, 5, pts.data()[i], pts.data()[20 + i]);
            assert!((out.data()[i] - e).abs() < 1e-6);
        }
    }

    #[test]
    fn far_out_of_bounds_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_tensor(&mut rng, &[3, 6, 6]);
        let pts = Tensor::from_vec(&[2, 1, 2], vec![1e9, -1e12, -5e7, 3e30]).unwrap();
        let out = bilinear_sample(&f, &pts).unwrap();
        assert!(out.all_finite());
        let (gf, gp) = bilinear_sample_backward(&f, &pts, &Tensor::full(&[3, 1, 2], 1.0)).unwrap();
        assert!(gf.all_finite() && gp.all_finite());
        // clamped to corners
        assert_eq!(out.data()[0], f.data()[5 * 6]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let f = Tensor::<f64>::zeros(&[1, 4, 4]);
        let pts = Tensor::<f64>::zeros(&[3, 2, 2]);
        assert!(matches!(bilinear_sample(&f, &pts), Err(Error::Shape(_))));
        let good = Tensor::<f64>::zeros(&[2, 2, 2]);
        let bad_grad = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(bilinear_sample_backward(&f, &good, &bad_grad).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("Deformed".parse::<DeformMode>().unwrap(), DeformMode::Deformed);
        assert!("warped".parse::<DeformMode>().is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let spec = DeformableConvSpec::new(1, 1, 4);
        let x = Tensor::<f64>::zeros(&[1, 6, 6]);
        let w = ConvWeights::zeros(1, 1, 4, false);
        let ow = ConvWeights::zeros(32, 1, 3, true);
        assert!(deformable_conv_forward(&x, &spec, &w, &ow, DeformMode::Deformed).is_err());
    }

    #[test]
    fn offset_field_channel_invariant() {
        assert!(OffsetField::new(Tensor::<f32>::zeros(&[17, 2, 2]), 3).is_err());
        assert!(OffsetField::new(Tensor::<f32>::zeros(&[18, 2, 2]), 3).is_ok());
        let bad = Tensor::from_vec(&[2, 1, 1], vec![f32::NAN, 0.0]).unwrap();
        assert!(OffsetField::new(bad, 1).is_err());
    }

    #[test]
    fn zero_offsets_equal_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, stride, pad, mode) in [
            (3, 1, 1, PaddingMode::Reflect),
            (3, 2, 1, PaddingMode::Zero),
            (7, 1, 3, PaddingMode::Reflect),
            (1, 1, 0, PaddingMode::Zero),
            (3, 2, 0, PaddingMode::Zero),
            (5, 2, 1, PaddingMode::Reflect),
        ] {
            let spec = DeformableConvSpec::new(2, 3, k)
                .with_stride(stride)
                .with_padding(pad, mode);
            let x = rand_tensor(&mut rng, &[2, 8, 8]);
            let w = ConvWeights {
                weight: rand_tensor(&mut rng, &[3, 2, k, k]),
                bias: Some(rand_tensor(&mut rng, &[3])),
            };
            let ow = zero_offset_weights(&spec);
            let d = deformable_conv_forward(&x, &spec, &w, &ow, DeformMode::Deformed).unwrap();
            let u = deformable_conv_forward(&x, &spec, &w, &ow, DeformMode::Undeformed).unwrap();
            assert_eq!(d.shape(), u.shape());
            assert!(d.max_abs_diff(&u) < 1e-12);
        }
    }

    #[test]
    fn offset_grid_matches_output_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = DeformableConvSpec::new(1, 1, 5)
            .with_stride(2)
            .with_padding(1, PaddingMode::Zero);
        assert_eq!(spec.offset_padding(), 0);
        let x = rand_tensor(&mut rng, &[1, 9, 7]);
        let w = ConvWeights {
            weight: rand_tensor(&mut rng, &[1, 1, 5, 5]),
            bias: None,
        };
        let ow = ConvWeights {
            weight: rand_tensor(&mut rng, &[50, 1, 3, 3]),
            bias: None,
        };
        let d = deformable_conv_forward(&x, &spec, &w, &ow, DeformMode::Deformed).unwrap();
        assert_eq!(d.shape(), [1, 4, 3]);
        let too_tight = DeformableConvSpec::new(1, 1, 5).with_padding(0, PaddingMode::Zero);
        assert!(too_tight.validate().is_err());
    }

    #[test]
    fn undeformed_ignores_offset_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = DeformableConvSpec::new(1, 2, 3).with_padding(1, PaddingMode::Reflect);
        let x = rand_tensor(&mut rng, &[1, 6, 6]);
        let w = ConvWeights {
            weight: rand_tensor(&mut rng, &[2, 1, 3, 3]),
            bias: None,
        };
        let ow1 = ConvWeights {
            weight: rand_tensor(&mut rng, &[18, 1, 3, 3]),
            bias: Some(rand_tensor(&mut rng, &[18])),
        };
        let ow2 = zero_offset_weights(&spec);
        let a = deformable_conv_forward(&x, &spec, &w, &ow1, DeformMode::Undeformed).unwrap();
        let b = deformable_conv_forward(&x, &spec, &w, &ow2, DeformMode::Undeformed).unwrap();
        assert_eq!(a, b);
        let c = deformable_conv_forward(&x, &spec, &w, &ow1, DeformMode::Deformed).unwrap();
        assert!(c.max_abs_diff(&a) > 1e-6);
    }

    #[test]
    fn integer_offset_equals_shifted_convolution() {
        // offsets (0, 1) on a zero-padded input == convolving the input shifted left by one
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = DeformableConvSpec::new(1, 1, 3).with_padding(1, PaddingMode::Zero);
        let (h, w) = (8, 8);
        let x = rand_tensor(&mut rng, &[1, h, w]);
        let wts = ConvWeights {
            weight: rand_tensor(&mut rng, &[1, 1, 3, 3]),
            bias: None,
        };
        let field = OffsetField::constant(3, h, w, 0.0, 1.0);
        let deformed = deformable_conv_with_offsets(&x, &spec, &wts, &field).unwrap();
        let mut shifted = Tensor::zeros(&[1, h, w]);
        for r in 0..h {
            for c in 0..w - 1 {
                shifted.data_mut()[r * w + c] = x.data()[r * w + c + 1];
            }
        }
        let plain = deformable_conv_forward(
            &shifted,
            &spec,
            &wts,
            &zero_offset_weights(&spec),
            DeformMode::Undeformed,
        )
        .unwrap();
        // interior: away from the borders where clamping/zero padding differ
        for r in 1..h - 1 {
            for c in 1..w - 2 {
                let i = r * w + c;
                assert!((deformed.data()[i] - plain.data()[i]).abs() < 1e-12);
            }
        }
    }
}
