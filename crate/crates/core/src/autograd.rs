//! A small reverse-mode autodiff tape over 4-d `[B, C, H, W]` tensors.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in reverse.
//! Leaves created with [`Tape::constant`] never receive gradients, so gradient flow
//! into frozen networks can be cut without copying their parameters.

use crate::deform::DeformGeom;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ConvTransposeGeom};
use crate::losses::nmi::{self, SoftNmiConfig};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// Unfolded input per batch item, kept when the weight needs a gradient.
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    DeformConv {
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        cols: Vec<T>,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    ZeroPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    MeanSqTo {
        x: Var,
        target: T,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    SoftNmi {
        a: Var,
        b: Var,
        grad_a: Vec<T>,
        grad_b: Vec<T>,
    },
    Linear {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    t.dims4()
        .map_err(|_| Error::Shape(format!("{what}: expected [B,C,H,W], got {:?}", t.shape())))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = dims4(self.value(x), "conv2d input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d weight {ws:?} incompatible with {c} input channels"
            )));
        }
        let g = ConvGeom::new(c, ws[0], h, wd, ws[2], stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {} too large for {h}x{wd}", ws[2])))?;
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::Shape("conv2d bias shape".into()));
            }
        }
        let mut out = Tensor::zeros(&[n, g.out_c, g.oh, g.ow]);
        let keep = self.rg(w);
        let col_len = g.patch_len() * g.out_plane();
        let mut cols = if keep { vec![T::zero(); n * col_len] } else { Vec::new() };
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = b.map(|b| self.nodes[b.0].value.data());
            let in_len = c * h * wd;
            let out_len = g.out_c * g.oh * g.ow;
            for i in 0..n {
                let xi = &xv.data()[i * in_len..(i + 1) * in_len];
                let oi = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
                if keep {
                    let ci = &mut cols[i * col_len..(i + 1) * col_len];
                    kernels::im2col(xi, c, h, wd, g.k, g.stride, g.pad, g.oh, g.ow, ci);
                    kernels::conv_from_cols(&g, ci, wv.data(), bv, oi);
                } else {
                    kernels::conv2d(&g, xi, wv.data(), bv, oi);
                }
            }
        }
        let rg = self.rg(x) || keep || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = dims4(self.value(x), "conv_transpose2d input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv_transpose2d weight {ws:?} incompatible with {c} input channels"
            )));
        }
        let g = ConvTransposeGeom::new(c, ws[1], h, wd, ws[2], stride, pad, out_pad)
            .ok_or_else(|| Error::Shape("conv_transpose2d geometry".into()))?;
        let mut out = Tensor::zeros(&[n, g.out_c, g.oh, g.ow]);
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = b.map(|b| self.nodes[b.0].value.data());
            let in_len = c * h * wd;
            let out_len = g.out_c * g.oh * g.ow;
            for i in 0..n {
                kernels::conv_transpose2d(
                    &g,
                    &xv.data()[i * in_len..(i + 1) * in_len],
                    wv.data(),
                    bv,
                    &mut out.data_mut()[i * out_len..(i + 1) * out_len],
                );
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
                out_pad,
            },
            rg,
        ))
    }

    /// Deformable convolution over an already padded input. `offsets` is
    /// `[B, 2·K·K, OH, OW]` and fixes the output grid.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
    ) -> Result<Var> {
        let [n, c, hp, wp] = dims4(self.value(x), "deform_conv2d input")?;
        let [on, oc, oh, ow] = dims4(self.value(offsets), "deform_conv2d offsets")?;
        if on != n || oc != 2 * k * k {
            return Err(Error::Shape(format!(
                "offsets {:?} do not match batch {n} and kernel {k}",
                self.value(offsets).shape()
            )));
        }
        let expect_oh = kernels::conv_out_len(hp, k, stride, 0);
        let expect_ow = kernels::conv_out_len(wp, k, stride, 0);
        if expect_oh != Some(oh) || expect_ow != Some(ow) {
            return Err(Error::Shape(format!(
                "offset grid {oh}x{ow} does not match convolution output {expect_oh:?}x{expect_ow:?}"
            )));
        }
        let ws = self.value(w).shape().to_vec();
        if ws != [ws[0], c, k, k] {
            return Err(Error::Shape(format!("deform_conv2d weight {ws:?}")));
        }
        let out_c = ws[0];
        let dg = DeformGeom {
            c,
            hp,
            wp,
            k,
            stride,
            oh,
            ow,
        };
        let cg = ConvGeom {
            in_c: c,
            out_c,
            h: hp,
            w: wp,
            k,
            stride,
            pad: 0,
            oh,
            ow,
        };
        let col_len = cg.patch_len() * cg.out_plane();
        let mut cols = vec![T::zero(); n * col_len];
        let mut out = Tensor::zeros(&[n, out_c, oh, ow]);
        {
            let xv = self.nodes[x.0].value.data();
            let ov = self.nodes[offsets.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let bv = b.map(|b| self.nodes[b.0].value.data());
            let in_len = c * hp * wp;
            let off_len = oc * oh * ow;
            let out_len = out_c * oh * ow;
            for i in 0..n {
                let cb = &mut cols[i * col_len..(i + 1) * col_len];
                dg.unfold(
                    &xv[i * in_len..(i + 1) * in_len],
                    &ov[i * off_len..(i + 1) * off_len],
                    cb,
                );
                kernels::conv_from_cols(&cg, cb, wv, bv, &mut out.data_mut()[i * out_len..(i + 1) * out_len]);
            }
        }
        if !out.all_finite() {
            return Err(Error::Shape("deformable convolution produced non-finite values".into()));
        }
        let rg = self.rg(x) || self.rg(offsets) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::DeformConv {
                x,
                offsets,
                w,
                b,
                k,
                stride,
                cols,
            },
            rg,
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "reflect_pad")?;
        if pad >= h || pad >= w {
            return Err(Error::Shape(format!("reflection pad {pad} too large for {h}x{w}")));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(&[n, c, ph, pw]);
        let xv = self.value(x).data();
        for i in 0..n {
            kernels::reflect_pad(
                &xv[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
                pad,
                &mut out.data_mut()[i * c * ph * pw..(i + 1) * c * ph * pw],
            );
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ReflectPad { x, pad }, rg))
    }

    pub fn zero_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "zero_pad")?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros(&[n, c, ph, pw]);
        let xv = self.value(x).data();
        for i in 0..n {
            kernels::zero_pad(
                &xv[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
                pad,
                &mut out.data_mut()[i * c * ph * pw..(i + 1) * c * ph * pw],
            );
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ZeroPad { x, pad }, rg))
    }

    /// Instance normalization without affine parameters (ε = 1e-5).
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "instance_norm")?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut inv_std = Vec::with_capacity(n * c);
        let xv = self.value(x).data();
        for (src, dst) in xv.chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            inv_std.push(kernels::instance_norm_plane(src, 1e-5, dst));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// `mean((x - target)²)` as a scalar node.
    pub fn mean_sq_to(&mut self, x: Var, target: T) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::Shape("mean over an empty tensor".into()));
        }
        let s = v.data().iter().fold(0.0f64, |acc, &e| {
            let d = (e - target).f64();
            acc + d * d
        });
        let out = Tensor::scalar(T::of(s / v.numel() as f64));
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanSqTo { x, target }, rg))
    }

    /// `mean(|a - b|)` as a scalar node.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("L1: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        if va.numel() == 0 {
            return Err(Error::Shape("mean over an empty tensor".into()));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(0.0f64, |acc, (&p, &q)| acc + (p - q).abs().f64());
        let out = Tensor::scalar(T::of(s / va.numel() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MeanAbsDiff { a, b }, rg))
    }

    /// Batch-mean soft NMI between `a` and `b` (`[B, 1, H, W]`).
    pub fn soft_nmi(&mut self, a: Var, b: Var, cfg: &SoftNmiConfig) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("soft_nmi: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let [n, _, _, _] = dims4(va, "soft_nmi")?;
        let len = va.numel() / n;
        let (want_a, want_b) = (self.rg(a), self.rg(b));
        let mut grad_a = if want_a {
            vec![T::zero(); va.numel()]
        } else {
            Vec::new()
        };
        let mut grad_b = if want_b {
            vec![T::zero(); vb.numel()]
        } else {
            Vec::new()
        };
        let mut total = 0.0;
        for i in 0..n {
            let xa = &va.data()[i * len..(i + 1) * len];
            let xb = &vb.data()[i * len..(i + 1) * len];
            let r = nmi::soft_nmi_with_grad(xa, xb, cfg, want_a, want_b)?;
            total += r.value;
            let inv = 1.0 / n as f64;
            if want_a {
                for (d, g) in grad_a[i * len..(i + 1) * len].iter_mut().zip(&r.grad_x) {
                    *d = T::of(g * inv);
                }
            }
            if want_b {
                for (d, g) in grad_b[i * len..(i + 1) * len].iter_mut().zip(&r.grad_y) {
                    *d = T::of(g * inv);
                }
            }
        }
        let out = Tensor::scalar(T::of(total / n as f64));
        Ok(self.push(out, Op::SoftNmi { a, b, grad_a, grad_b }, want_a || want_b))
    }

    /// `bias + Σ wᵢ·vᵢ` over scalar nodes.
    pub fn linear(&mut self, terms: &[(Var, T)], bias: T) -> Result<Var> {
        let mut s = bias;
        for &(v, w) in terms {
            let val = self.value(v);
            if val.numel() != 1 {
                return Err(Error::Shape("linear combination expects scalar nodes".into()));
            }
            s += w * val.data()[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(s), Op::Linear { terms: terms.to_vec() }, rg))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut()
    }

    /// Moves the (allocated) gradient buffer of `v` out of `grads`; pair with [`restore`].
    fn take_grad(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        self.grad_buf(grads, v)?;
        grads[v.0].take()
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xv = self.value(x);
                let wv = self.value(w);
                let [n, c, h, wd] = xv.dims4()?;
                let ws = wv.shape();
                let geo = ConvGeom::new(c, ws[0], h, wd, ws[2], stride, pad).expect("validated");
                let in_len = c * h * wd;
                let out_len = geo.out_c * geo.oh * geo.ow;
                let mut gx = self.take_grad(grads, x);
                let mut gw = self.take_grad(grads, w);
                let mut gb = b.and_then(|b| self.take_grad(grads, b));
                let col_len = geo.patch_len() * geo.out_plane();
                for i in 0..n {
                    let go = &g.data()[i * out_len..(i + 1) * out_len];
                    let gxi = gx.as_mut().map(|t| &mut t.data_mut()[i * in_len..(i + 1) * in_len]);
                    if cols.is_empty() {
                        kernels::conv2d_backward(
                            &geo,
                            &xv.data()[i * in_len..(i + 1) * in_len],
                            wv.data(),
                            go,
                            gxi,
                            gw.as_mut().map(|t| t.data_mut()),
                            gb.as_mut().map(|t| t.data_mut()),
                        );
                        continue;
                    }
                    let dcols = kernels::conv_backward_cols(
                        &geo,
                        &cols[i * col_len..(i + 1) * col_len],
                        wv.data(),
                        go,
                        gw.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                        gxi.is_some(),
                    );
                    if let (Some(dx), Some(dc)) = (gxi, dcols) {
                        kernels::col2im(&dc, c, h, wd, geo.k, stride, pad, geo.oh, geo.ow, dx);
                    }
                }
                restore(grads, x, gx);
                restore(grads, w, gw);
                if let Some(b) = b {
                    restore(grads, b, gb);
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
                out_pad,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let [n, c, h, wd] = xv.dims4()?;
                let ws = wv.shape();
                let geo = ConvTransposeGeom::new(c, ws[1], h, wd, ws[2], stride, pad, out_pad).expect("validated");
                let in_len = c * h * wd;
                let out_len = geo.out_c * geo.oh * geo.ow;
                let mut gx = self.take_grad(grads, x);
                let mut gw = self.take_grad(grads, w);
                let mut gb = b.and_then(|b| self.take_grad(grads, b));
                for i in 0..n {
                    kernels::conv_transpose2d_backward(
                        &geo,
                        &xv.data()[i * in_len..(i + 1) * in_len],
                        wv.data(),
                        &g.data()[i * out_len..(i + 1) * out_len],
                        gx.as_mut().map(|t| &mut t.data_mut()[i * in_len..(i + 1) * in_len]),
                        gw.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                }
                restore(grads, x, gx);
                restore(grads, w, gw);
                if let Some(b) = b {
                    restore(grads, b, gb);
                }
            }
            Op::DeformConv {
                x,
                offsets,
                w,
                b,
                k,
                stride,
                cols,
            } => {
                let (x, offsets, w, b, k, stride) = (*x, *offsets, *w, *b, *k, *stride);
                let xv = self.value(x);
                let ov = self.value(offsets);
                let wv = self.value(w);
                let [n, c, hp, wp] = xv.dims4()?;
                let [_, oc, oh, ow] = ov.dims4()?;
                let out_c = wv.shape()[0];
                let dg = DeformGeom {
                    c,
                    hp,
                    wp,
                    k,
                    stride,
                    oh,
                    ow,
                };
                let cg = ConvGeom {
                    in_c: c,
                    out_c,
                    h: hp,
                    w: wp,
                    k,
                    stride,
                    pad: 0,
                    oh,
                    ow,
                };
                let col_len = cg.patch_len() * cg.out_plane();
                let in_len = c * hp * wp;
                let off_len = oc * oh * ow;
                let out_len = out_c * oh * ow;
                let mut gx = self.take_grad(grads, x);
                let mut go = self.take_grad(grads, offsets);
                let mut gw = self.take_grad(grads, w);
                let mut gb = b.and_then(|b| self.take_grad(grads, b));
                let want_cols = gx.is_some() || go.is_some();
                for i in 0..n {
                    let dcols = kernels::conv_backward_cols(
                        &cg,
                        &cols[i * col_len..(i + 1) * col_len],
                        wv.data(),
                        &g.data()[i * out_len..(i + 1) * out_len],
                        gw.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                        want_cols,
                    );
                    if let Some(dcols) = dcols {
                        dg.fold(
                            &xv.data()[i * in_len..(i + 1) * in_len],
                            &ov.data()[i * off_len..(i + 1) * off_len],
                            &dcols,
                            gx.as_mut().map(|t| &mut t.data_mut()[i * in_len..(i + 1) * in_len]),
                            go.as_mut().map(|t| &mut t.data_mut()[i * off_len..(i + 1) * off_len]),
                        );
                    }
                }
                restore(grads, x, gx);
                restore(grads, offsets, go);
                restore(grads, w, gw);
                if let Some(b) = b {
                    restore(grads, b, gb);
                }
            }
            &Op::ReflectPad { x, pad } => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for i in 0..n {
                        kernels::reflect_pad_backward(
                            &g.data()[i * c * ph * pw..(i + 1) * c * ph * pw],
                            c,
                            h,
                            w,
                            pad,
                            &mut gx.data_mut()[i * c * h * w..(i + 1) * c * h * w],
                        );
                    }
                }
            }
            &Op::ZeroPad { x, pad } => {
                let [n, c, h, w] = self.value(x).dims4()?;
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for i in 0..n {
                        kernels::zero_pad_backward(
                            &g.data()[i * c * ph * pw..(i + 1) * c * ph * pw],
                            c,
                            h,
                            w,
                            pad,
                            &mut gx.data_mut()[i * c * h * w..(i + 1) * c * h * w],
                        );
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let [_, _, h, w] = self.value(*x).dims4()?;
                let plane = h * w;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (((y, go), gi), &s) in node
                        .value
                        .data()
                        .chunks(plane)
                        .zip(g.data().chunks(plane))
                        .zip(gx.data_mut().chunks_mut(plane))
                        .zip(inv_std)
                    {
                        kernels::instance_norm_plane_backward(y, s, go, gi);
                    }
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((d, &gv), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        if y > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((d, &gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += if xi > T::zero() { gv } else { gv * slope };
                    }
                }
            }
            &Op::Tanh { x } => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((d, &gv), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *d += gv * (T::one() - y * y);
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    for (d, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * s;
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    gb.add_assign(g);
                }
            }
            &Op::MeanSqTo { x, target } => {
                let xv = self.value(x);
                let scale = g.data()[0] * T::of(2.0 / xv.numel() as f64);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *d += scale * (v - target);
                    }
                }
            }
            &Op::MeanAbsDiff { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let scale = g.data()[0] * T::of(1.0 / va.numel() as f64);
                let sign = |p: T, q: T| {
                    if p > q {
                        scale
                    } else if p < q {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &p), &q) in ga.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d += sign(p, q);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for ((d, &p), &q) in gb.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d -= sign(p, q);
                    }
                }
            }
            Op::SoftNmi { a, b, grad_a, grad_b } => {
                let s = g.data()[0];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, &v) in ga.data_mut().iter_mut().zip(grad_a) {
                        *d += s * v;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (d, &v) in gb.data_mut().iter_mut().zip(grad_b) {
                        *d += s * v;
                    }
                }
            }
            Op::Linear { terms } => {
                let s = g.data()[0];
                for &(v, w) in terms {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        gv.data_mut()[0] += s * w;
                    }
                }
            }
        }
        Ok(())
    }
}

fn restore<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, t: Option<Tensor<T>>) {
    if let Some(t) = t {
        grads[v.0] = Some(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(Σ r⊙f(x))/dx against central differences.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut probe = Tape::new();
        let pv: Vec<Var> = inputs.iter().map(|t| probe.param(t.clone())).collect();
        let out = f(&mut probe, &pv);
        let r = rand_t(&mut rng, probe.value(out).shape());
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut t2 = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t2.param(x.clone())).collect();
        let o = f(&mut t2, &vs);
        let rc = t2.constant(r.clone());
        // Σ r⊙o = (|o + r|² - |o - r|²) / 4
        let plus = t2.add(o, rc).unwrap();
        let neg_r = t2.scale(rc, -1.0);
        let minus = t2.add(o, neg_r).unwrap();
        let a = t2.mean_sq_to(plus, 0.0).unwrap();
        let b = t2.mean_sq_to(minus, 0.0).unwrap();
        let numel = r.numel() as f64;
        let root = t2.linear(&[(a, numel / 4.0), (b, -numel / 4.0)], 0.0).unwrap();
        let grads = t2.backward(root).unwrap();
        for (idx, inp) in inputs.iter().enumerate() {
            let analytic = grads.get(vs[idx]).unwrap();
            for j in 0..inp.numel() {
                let h = 1e-6;
                let mut p = inputs.clone();
                p[idx].data_mut()[j] += h;
                let mut m = inputs.clone();
                m[idx].data_mut()[j] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                let an = analytic.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "input {idx} elem {j}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[2, 2, 5, 5]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3]);
        let b = rand_t(&mut rng, &[3]);
        check(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap());
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[1, 2, 3, 3]);
        let w = rand_t(&mut rng, &[2, 3, 3, 3]);
        let b = rand_t(&mut rng, &[3]);
        check(vec![x, w, b], |t, v| {
            t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap()
        });
    }

    #[test]
    fn norm_pad_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[2, 2, 4, 4]);
        check(vec![x], |t, v| {
            let p = t.reflect_pad(v[0], 2).unwrap();
            let n = t.instance_norm(p).unwrap();
            let l = t.leaky_relu(n, 0.2);
            let z = t.zero_pad(l, 1).unwrap();
            let th = t.tanh(z);
            let r = t.relu(th);
            t.add(r, th).unwrap()
        });
    }

    #[test]
    fn deform_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[1, 2, 6, 6]);
        // offsets away from integer kinks
        let mut off = rand_t(&mut rng, &[1, 18, 2, 2]);
        for v in off.data_mut() {
            *v = *v * 0.8 + 0.13;
        }
        let w = rand_t(&mut rng, &[2, 2, 3, 3]);
        let b = rand_t(&mut rng, &[2]);
        check(vec![x, off, w, b], |t, v| {
            t.deform_conv2d(v[0], v[1], v[2], Some(v[3]), 3, 2).unwrap()
        });
    }

    #[test]
    fn losses_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_t(&mut rng, &[1, 1, 3, 3]);
        let b = rand_t(&mut rng, &[1, 1, 3, 3]);
        check(vec![a, b], |t, v| {
            let l1 = t.mean_abs_diff(v[0], v[1]).unwrap();
            let sq = t.mean_sq_to(v[0], 1.0).unwrap();
            t.linear(&[(l1, 2.0), (sq, -0.5)], 3.0).unwrap()
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let c = t.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
        let s = t.add(x, c).unwrap();
        let l = t.mean_sq_to(s, 0.0).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }
}
