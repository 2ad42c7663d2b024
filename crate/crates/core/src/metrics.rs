//! Evaluation metrics: MSE, PSNR, global SSIM and hard-binned NMI.
//!
//! All metrics are computed in double precision over whole volumes (or over the
//! voxels selected by a mask).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stabilizing constants of SSIM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    /// `c1 = (0.01·L)²`, `c2 = (0.03·L)²` for dynamic range `L`.
    pub fn from_range(range: f64) -> Result<Self> {
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::Shape(format!(
                "SSIM dynamic range must be positive, got {range}"
            )));
        }
        Ok(Self {
            c1: (0.01 * range).powi(2),
            c2: (0.03 * range).powi(2),
        })
    }

    /// Constants from the dynamic range `max − min` of `target`.
    pub fn for_target(target: &[f64]) -> Result<Self> {
        let (lo, hi) = min_max(target);
        Self::from_range(hi - lo)
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

fn as_f64<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::Shape("empty volume".into()));
    }
    Ok((
        pred.data().iter().map(|v| v.f64()).collect(),
        target.data().iter().map(|v| v.f64()).collect(),
    ))
}

fn mse_raw(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / pred.len() as f64
}

fn psnr_raw(pred: &[f64], target: &[f64]) -> Result<f64> {
    let (_, max_b) = min_max(target);
    if max_b == 0.0 {
        return Err(Error::Shape("PSNR undefined: target maximum is 0".into()));
    }
    let m = mse_raw(pred, target);
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_b * max_b / m).log10())
}

fn ssim_raw(pred: &[f64], target: &[f64], c: SsimConstants) -> f64 {
    let n = pred.len() as f64;
    let ma = pred.iter().sum::<f64>() / n;
    let mb = target.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(target) {
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
        cov += (a - ma) * (b - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    (2.0 * ma * mb + c.c1) * (2.0 * cov + c.c2) / ((ma * ma + mb * mb + c.c1) * (va + vb + c.c2))
}

/// Mean squared error `(1/N)·Σ(target − pred)²`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let (p, t) = as_f64(pred, target)?;
    Ok(mse_raw(&p, &t))
}

/// `10·log10(max_B² / MSE)` with `max_B` the target maximum. Returns `+∞` when the
/// prediction is exact.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let (p, t) = as_f64(pred, target)?;
    psnr_raw(&p, &t)
}

/// Global SSIM with a single mean, variance and covariance per volume.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, consts: SsimConstants) -> Result<f64> {
    let (p, t) = as_f64(pred, target)?;
    Ok(ssim_raw(&p, &t, consts))
}

/// Hard-binned NMI result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardNmi {
    pub value: f64,
    /// Both inputs are constant.
    pub degenerate: bool,
}

fn hard_bins(v: &[f64], bins: usize) -> Vec<usize> {
    let (lo, hi) = min_max(v);
    let span = hi - lo;
    v.iter()
        .map(|&x| {
            if span == 0.0 {
                0
            } else {
                (((x - lo) / span * bins as f64) as usize).min(bins - 1)
            }
        })
        .collect()
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

fn nmi_raw(x: &[f64], y: &[f64], bins: usize) -> HardNmi {
    let (bx, by) = (hard_bins(x, bins), hard_bins(y, bins));
    let mut joint = vec![0.0; bins * bins];
    let mut cx = vec![0.0; bins];
    let mut cy = vec![0.0; bins];
    for (&i, &j) in bx.iter().zip(&by) {
        joint[i * bins + j] += 1.0;
        cx[i] += 1.0;
        cy[j] += 1.0;
    }
    let n = x.len() as f64;
    let (hx, hy, hxy) = (entropy(&cx, n), entropy(&cy, n), entropy(&joint, n));
    if hx + hy == 0.0 {
        let (x0, y0) = (x[0], y[0]);
        return HardNmi {
            value: if x0 == y0 { 1.0 } else { 0.0 },
            degenerate: true,
        };
    }
    HardNmi {
        value: (2.0 * (hx + hy - hxy) / (hx + hy)).clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// `2·I(X;Y) / (H(X) + H(Y))` from a joint histogram with `bins` equal-width bins
/// spanning each input's own range.
pub fn nmi_hard<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, bins: usize) -> Result<HardNmi> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let (a, b) = as_f64(x, y)?;
    Ok(nmi_raw(&a, &b, bins))
}

/// JSON has no infinities or NaN; write them as strings.
pub(crate) mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "lenient_f64")]
    pub mean: f64,
    #[serde(with = "lenient_f64")]
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    /// `"mean (std)"` table cell.
    pub fn cell(&self) -> String {
        format!("{:.3} ({:.3})", self.mean, self.std)
    }
}

/// Metrics of one volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub index: usize,
    #[serde(with = "lenient_f64")]
    pub mse: f64,
    #[serde(with = "lenient_f64")]
    pub psnr: f64,
    #[serde(with = "lenient_f64")]
    pub ssim: f64,
    #[serde(with = "lenient_f64")]
    pub nmi: f64,
    pub n_voxels: usize,
    /// Why this volume was excluded from the aggregate, if it was.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: Stat,
    pub psnr: Stat,
    pub ssim: Stat,
    pub nmi: Stat,
    /// Voxels evaluated over all included volumes.
    pub n_voxels: usize,
    pub per_volume: Vec<VolumeMetrics>,
    /// Volumes with an exact prediction, left out of the PSNR aggregate.
    pub psnr_infinite: usize,
    pub nmi_bins: usize,
    pub psnr_peak: String,
}

fn volume_metrics(index: usize, p: &[f64], t: &[f64], bins: usize) -> Result<VolumeMetrics> {
    if p.is_empty() {
        return Err(Error::Shape("mask selects no voxels".into()));
    }
    let consts = SsimConstants::for_target(t)?;
    Ok(VolumeMetrics {
        index,
        mse: mse_raw(p, t),
        psnr: psnr_raw(p, t)?,
        ssim: ssim_raw(p, t, consts),
        nmi: nmi_raw(p, t, bins).value,
        n_voxels: p.len(),
        error: None,
    })
}

/// Per-volume metrics over the voxels where the mask is nonzero, plus mean (std)
/// over volumes. `masks` holds either one mask for all volumes or one per volume.
pub fn evaluate_pairs<T: Scalar>(
    preds: &[Tensor<T>],
    targets: &[Tensor<T>],
    masks: Option<&[Tensor<T>]>,
    nmi_bins: usize,
) -> Result<MetricReport> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != 1 && m.len() != preds.len() {
            return Err(Error::Shape(format!(
                "need 1 or {} masks, got {}",
                preds.len(),
                m.len()
            )));
        }
    }
    if nmi_bins < 2 {
        return Err(Error::Config("need at least 2 NMI bins".into()));
    }
    let mut per_volume = Vec::with_capacity(preds.len());
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        let (pv, tv) = as_f64(p, t)?;
        let (pv, tv) = match masks {
            None => (pv, tv),
            Some(m) => {
                let m = &m[if m.len() == 1 { 0 } else { i }];
                if m.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "mask {:?} does not match volume {:?}",
                        m.shape(),
                        p.shape()
                    )));
                }
                let keep: Vec<bool> = m.data().iter().map(|v| v.f64() != 0.0).collect();
                let sel = |v: Vec<f64>| -> Vec<f64> {
                    v.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(x, _)| x).collect()
                };
                (sel(pv), sel(tv))
            }
        };
        per_volume.push(volume_metrics(i, &pv, &tv, nmi_bins).unwrap_or_else(|e| VolumeMetrics {
            index: i,
            mse: f64::NAN,
            psnr: f64::NAN,
            ssim: f64::NAN,
            nmi: f64::NAN,
            n_voxels: pv.len(),
            error: Some(e.to_string()),
        }));
    }
    let ok: Vec<&VolumeMetrics> = per_volume.iter().filter(|v| v.error.is_none()).collect();
    let collect = |f: fn(&VolumeMetrics) -> f64| ok.iter().map(|v| f(v)).collect::<Vec<_>>();
    let psnr_all = collect(|v| v.psnr);
    let psnr_finite: Vec<f64> = psnr_all.iter().copied().filter(|v| v.is_finite()).collect();
    let psnr_infinite = psnr_all.len() - psnr_finite.len();
    if psnr_infinite > 0 {
        log::warn!("{psnr_infinite} volume(s) with zero MSE excluded from the PSNR aggregate");
    }
    Ok(MetricReport {
        mse: Stat::of(&collect(|v| v.mse)),
        psnr: Stat::of(&psnr_finite),
        ssim: Stat::of(&collect(|v| v.ssim)),
        nmi: Stat::of(&collect(|v| v.nmi)),
        n_voxels: ok.iter().map(|v| v.n_voxels).sum(),
        per_volume,
        psnr_infinite,
        nmi_bins,
        psnr_peak: "maximum of the z-scored target".into(),
    })
}
