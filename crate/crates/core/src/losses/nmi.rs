//! Differentiable normalized mutual information.
//!
//! Each pixel is softly assigned to the two nearest of `bins` equally spaced bin
//! centres with a triangular kernel. The joint histogram is the mean outer product of
//! the per-pixel assignment vectors, so it is a smooth function of the intensities.
//!
//! Smoothing makes the plug-in entropy `H(X)` overestimate what the joint histogram
//! can ever share with another image: even `I(X; X)` falls short of `H(X)`. The
//! normalizer therefore uses the kernel-consistent self-information,
//!
//! ```text
//! NMI(X, Y) = 2·I(X; Y) / (I(X; X) + I(Y; Y))
//! ```
//!
//! which equals 1 for identical inputs, 0 for independent ones, and reduces to
//! `2·I / (H(X) + H(Y))` under hard binning (where `I(X; X) = H(X)`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinKernel {
    Triangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftNmiConfig {
    pub bins: usize,
    pub value_range: (f64, f64),
    pub kernel: BinKernel,
    pub epsilon: f64,
}

impl Default for SoftNmiConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            value_range: (-1.0, 1.0),
            kernel: BinKernel::Triangular,
            epsilon: 1e-10,
        }
    }
}

impl SoftNmiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.bins)));
        }
        let (lo, hi) = self.value_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid value range [{lo}, {hi}]")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Result of a soft NMI evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftNmi {
    pub value: f64,
    /// Both inputs carry no information (constant images); `value` is then 1 when
    /// their bin assignments coincide and 0 otherwise.
    pub degenerate: bool,
    /// `∂NMI/∂x`, empty unless requested.
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
}

/// Soft assignment of one value: lower bin, fraction towards the upper bin, and
/// `∂fraction/∂value` (0 where the value was clamped).
#[derive(Clone, Copy, Debug)]
struct Assign {
    bin: usize,
    frac: f64,
    slope: f64,
}

fn assign<T: Scalar>(values: &[T], cfg: &SoftNmiConfig) -> Vec<Assign> {
    let (lo, hi) = cfg.value_range;
    let top = (cfg.bins - 1) as f64;
    let r = top / (hi - lo);
    values
        .iter()
        .map(|v| {
            let v = v.f64();
            let p = (v - lo) * r;
            let (p, slope) = if p <= 0.0 {
                (0.0, 0.0)
            } else if p >= top {
                (top, 0.0)
            } else {
                (p, r)
            };
            let bin = (p.floor() as usize).min(cfg.bins - 2);
            Assign {
                bin,
                frac: p - bin as f64,
                slope,
            }
        })
        .collect()
}

struct Hist {
    joint: Vec<f64>,
    row: Vec<f64>,
    col: Vec<f64>,
}

fn joint(a: &[Assign], b: &[Assign], bins: usize) -> Hist {
    let mut joint = vec![0.0; bins * bins];
    let inv = 1.0 / a.len() as f64;
    for (p, q) in a.iter().zip(b) {
        let u = [(p.bin, 1.0 - p.frac), (p.bin + 1, p.frac)];
        let v = [(q.bin, 1.0 - q.frac), (q.bin + 1, q.frac)];
        for &(i, wi) in &u {
            for &(j, wj) in &v {
                joint[i * bins + j] += wi * wj * inv;
            }
        }
    }
    let mut row = vec![0.0; bins];
    let mut col = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            row[i] += joint[i * bins + j];
            col[j] += joint[i * bins + j];
        }
    }
    Hist { joint, row, col }
}

fn ent(p: &[f64], eps: f64) -> f64 {
    p.iter().map(|&v| -v * (v + eps).ln()).sum()
}

/// Derivative of `-p·ln(p + ε)`.
fn dent(p: f64, eps: f64) -> f64 {
    -(p + eps).ln() - p / (p + eps)
}

impl Hist {
    fn mutual_info(&self, eps: f64) -> f64 {
        ent(&self.row, eps) + ent(&self.col, eps) - ent(&self.joint, eps)
    }

    /// `∂I/∂J[a][b]`.
    fn mi_grad(&self, bins: usize, eps: f64) -> Vec<f64> {
        let dr: Vec<f64> = self.row.iter().map(|&p| dent(p, eps)).collect();
        let dc: Vec<f64> = self.col.iter().map(|&p| dent(p, eps)).collect();
        let mut g = vec![0.0; bins * bins];
        for a in 0..bins {
            for b in 0..bins {
                g[a * bins + b] = dr[a] + dc[b] - dent(self.joint[a * bins + b], eps);
            }
        }
        g
    }
}

/// `∂I(X;Y)/∂y_i` for every pixel, given `∂I/∂J` of the (x, y) joint.
fn cross_grad(gj: &[f64], ax: &[Assign], ay: &[Assign], bins: usize, transpose: bool) -> Vec<f64> {
    let inv = 1.0 / ax.len() as f64;
    let at = |a: usize, b: usize| {
        if transpose {
            gj[b * bins + a]
        } else {
            gj[a * bins + b]
        }
    };
    ax.iter()
        .zip(ay)
        .map(|(p, q)| {
            if q.slope == 0.0 {
                return 0.0;
            }
            let u = [(p.bin, 1.0 - p.frac), (p.bin + 1, p.frac)];
            let s: f64 = u.iter().map(|&(a, wa)| wa * (at(a, q.bin + 1) - at(a, q.bin))).sum();
            s * q.slope * inv
        })
        .collect()
}

/// `∂I(Y;Y)/∂y_i` for the symmetric self-joint.
fn self_grad(gj: &[f64], ay: &[Assign], bins: usize) -> Vec<f64> {
    // J_ab = mean v_a v_b, so ∂J/∂y contributes 2·Σ_b (G[f+1][b] - G[f][b]) v_b.
    let mut g = cross_grad(gj, ay, ay, bins, false);
    for v in &mut g {
        *v *= 2.0;
    }
    g
}

/// Soft NMI of two equally sized images, optionally with gradients.
pub fn soft_nmi_with_grad<T: Scalar>(
    x: &[T],
    y: &[T],
    cfg: &SoftNmiConfig,
    want_x: bool,
    want_y: bool,
) -> Result<SoftNmi> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "NMI inputs differ in size: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("NMI of empty images".into()));
    }
    let (nb, eps) = (cfg.bins, cfg.epsilon);
    let ax = assign(x, cfg);
    let ay = assign(y, cfg);
    let hxy = joint(&ax, &ay, nb);
    let hxx = joint(&ax, &ax, nb);
    let hyy = joint(&ay, &ay, nb);
    let ixy = hxy.mutual_info(eps);
    let ixx = hxx.mutual_info(eps);
    let iyy = hyy.mutual_info(eps);
    let denom = ixx + iyy;
    let n = x.len();

    if denom <= 1e-12 {
        // Constant inputs: equal marginals means "the same bin(s)".
        let same = hxx.row.iter().zip(&hyy.row).all(|(a, b)| (a - b).abs() < 1e-9);
        return Ok(SoftNmi {
            value: if same { 1.0 } else { 0.0 },
            degenerate: true,
            grad_x: if want_x { vec![0.0; n] } else { Vec::new() },
            grad_y: if want_y { vec![0.0; n] } else { Vec::new() },
        });
    }

    let value = 2.0 * ixy / denom;
    // dNMI = 2·dIxy/S - 2·Ixy·dS/S²
    let (c1, c2) = (2.0 / denom, 2.0 * ixy / (denom * denom));
    let gxy = (want_x || want_y).then(|| hxy.mi_grad(nb, eps));
    let grad_y = if want_y {
        let gxy = gxy.as_ref().expect("computed");
        let d_cross = cross_grad(gxy, &ax, &ay, nb, false);
        let d_self = self_grad(&hyy.mi_grad(nb, eps), &ay, nb);
        d_cross.iter().zip(&d_self).map(|(a, b)| c1 * a - c2 * b).collect()
    } else {
        Vec::new()
    };
    let grad_x = if want_x {
        let gxy = gxy.as_ref().expect("computed");
        let d_cross = cross_grad(gxy, &ay, &ax, nb, true);
        let d_self = self_grad(&hxx.mi_grad(nb, eps), &ax, nb);
        d_cross.iter().zip(&d_self).map(|(a, b)| c1 * a - c2 * b).collect()
    } else {
        Vec::new()
    };
    Ok(SoftNmi {
        value,
        degenerate: false,
        grad_x,
        grad_y,
    })
}

/// Soft NMI value only.
pub fn soft_nmi<T: Scalar>(x: &[T], y: &[T], cfg: &SoftNmiConfig) -> Result<SoftNmi> {
    soft_nmi_with_grad(x, y, cfg, false, false)
}
