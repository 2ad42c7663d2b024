//! Training objectives.
//!
//! The free functions here evaluate each objective on plain tensors; the training
//! engine records the same quantities on the autodiff tape (see [`tape_lsgan_generator`]
//! and friends) so both paths share definitions.

pub mod nmi;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use nmi::{soft_nmi, BinKernel, SoftNmi, SoftNmiConfig};

/// Coefficients of the full objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_cyc: f64,
    pub lambda_dicyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_align: 0.9,
            lambda_cyc: 10.0,
            lambda_dicyc: 10.0,
        }
    }
}

impl LossWeights {
    /// Plain cycle-consistent GAN weighting.
    pub fn baseline(lambda_cyc: f64) -> Self {
        Self {
            lambda_align: 0.0,
            lambda_cyc,
            lambda_dicyc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_align", self.lambda_align),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_dicyc", self.lambda_dicyc),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar losses of one training iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_a2b: f64,
    pub gan_b2a: f64,
    pub disc_a: f64,
    pub disc_b: f64,
    pub align: f64,
    pub cyc: f64,
    pub dicyc: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "iter", "epoch", "gan_a2b", "gan_b2a", "disc_a", "disc_b", "align", "cyc", "dicyc", "total",
    ];

    /// Generator total recomputed from the report's own components.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        total_loss(&LossComponents::from(self), w)
    }

    pub fn all_finite(&self) -> bool {
        [
            self.gan_a2b,
            self.gan_b2a,
            self.disc_a,
            self.disc_b,
            self.align,
            self.cyc,
            self.dicyc,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn csv_row(&self, iter: usize, epoch: usize) -> Vec<String> {
        let mut row = vec![iter.to_string(), epoch.to_string()];
        row.extend(
            [
                self.gan_a2b,
                self.gan_b2a,
                self.disc_a,
                self.disc_b,
                self.align,
                self.cyc,
                self.dicyc,
                self.total,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        row
    }
}

/// The five generator-side components entering the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub gan_a2b: f64,
    pub gan_b2a: f64,
    pub align: f64,
    pub cyc: f64,
    pub dicyc: f64,
}

impl From<&LossReport> for LossComponents {
    fn from(r: &LossReport) -> Self {
        Self {
            gan_a2b: r.gan_a2b,
            gan_b2a: r.gan_b2a,
            align: r.align,
            cyc: r.cyc,
            dicyc: r.dicyc,
        }
    }
}

fn non_empty<T: Scalar>(scores: &[T], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Shape(format!("{what}: empty score grid")));
    }
    Ok(())
}

fn mean_sq_to<T: Scalar>(v: &[T], target: f64) -> f64 {
    v.iter().map(|s| (s.f64() - target).powi(2)).sum::<f64>() / v.len() as f64
}

/// Least-squares generator loss: `mean((s - 1)²)`.
pub fn lsgan_generator_loss<T: Scalar>(fake_scores: &[T]) -> Result<f64> {
    non_empty(fake_scores, "generator loss")?;
    Ok(mean_sq_to(fake_scores, 1.0))
}

/// Least-squares discriminator loss: `mean((real - 1)²) + mean(fake²)`.
pub fn lsgan_discriminator_loss<T: Scalar>(real_scores: &[T], fake_scores: &[T]) -> Result<f64> {
    non_empty(real_scores, "discriminator loss (real)")?;
    non_empty(fake_scores, "discriminator loss (fake)")?;
    Ok(mean_sq_to(real_scores, 1.0) + mean_sq_to(fake_scores, 0.0))
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Per-sample soft NMI averaged over the batch of `[B, 1, H, W]` tensors.
pub fn batch_soft_nmi<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SoftNmiConfig) -> Result<f64> {
    same_shape(x, y, "soft NMI")?;
    let [b, _, _, _] = x.dims4()?;
    let len = x.numel() / b;
    let mut s = 0.0;
    for i in 0..b {
        s += nmi::soft_nmi(
            &x.data()[i * len..(i + 1) * len],
            &y.data()[i * len..(i + 1) * len],
            cfg,
        )?
        .value;
    }
    Ok(s / b as f64)
}

/// `2 − NMI(xA, G_AB(xA)) − NMI(xB, G_BA(xB))` on undeformed outputs.
pub fn alignment_loss<T: Scalar>(
    xa: &Tensor<T>,
    fake_b_undeformed: &Tensor<T>,
    xb: &Tensor<T>,
    fake_a_undeformed: &Tensor<T>,
    cfg: &SoftNmiConfig,
) -> Result<f64> {
    let na = batch_soft_nmi(xa, fake_b_undeformed, cfg)?;
    let nb = batch_soft_nmi(xb, fake_a_undeformed, cfg)?;
    Ok(alignment_from_nmi(na, nb))
}

pub fn alignment_from_nmi(nmi_a: f64, nmi_b: f64) -> f64 {
    2.0 - nmi_a - nmi_b
}

fn mean_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.f64() - q.f64()).abs())
        .sum::<f64>()
        / a.numel().max(1) as f64
}

/// Mean-per-pixel L1 of both reconstructions. The same form serves the undeformed
/// and the deformation-invariant cycle terms; the caller decides which passes
/// produced `rec_a` and `rec_b`.
pub fn cycle_l1<T: Scalar>(rec_a: &Tensor<T>, xa: &Tensor<T>, rec_b: &Tensor<T>, xb: &Tensor<T>) -> Result<f64> {
    same_shape(rec_a, xa, "cycle loss (A)")?;
    same_shape(rec_b, xb, "cycle loss (B)")?;
    Ok(mean_abs_diff(rec_a, xa) + mean_abs_diff(rec_b, xb))
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.gan_a2b + c.gan_b2a + w.lambda_align * c.align + w.lambda_cyc * c.cyc + w.lambda_dicyc * c.dicyc
}

pub fn tape_lsgan_generator<T: Scalar>(tape: &mut Tape<T>, scores: Var) -> Result<Var> {
    tape.mean_sq_to(scores, T::one())
}

/// Discriminator objective on the tape (`real` and `fake` score grids).
pub fn tape_lsgan_discriminator<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = tape.mean_sq_to(real, T::one())?;
    let f = tape.mean_sq_to(fake, T::zero())?;
    tape.linear(&[(r, T::one()), (f, T::one())], T::zero())
}

pub fn tape_cycle_l1<T: Scalar>(tape: &mut Tape<T>, rec_a: Var, xa: Var, rec_b: Var, xb: Var) -> Result<Var> {
    let a = tape.mean_abs_diff(rec_a, xa)?;
    let b = tape.mean_abs_diff(rec_b, xb)?;
    tape.linear(&[(a, T::one()), (b, T::one())], T::zero())
}

pub fn tape_alignment<T: Scalar>(
    tape: &mut Tape<T>,
    xa: Var,
    fake_b: Var,
    xb: Var,
    fake_a: Var,
    cfg: &SoftNmiConfig,
) -> Result<Var> {
    let na = tape.soft_nmi(xa, fake_b, cfg)?;
    let nb = tape.soft_nmi(xb, fake_a, cfg)?;
    tape.linear(&[(na, -T::one()), (nb, -T::one())], T::of(2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_loss_values() {
        assert_eq!(lsgan_generator_loss(&[1.0f64; 4]).unwrap(), 0.0);
        assert_eq!(lsgan_generator_loss(&[0.0f64; 4]).unwrap(), 1.0);
        assert!((lsgan_generator_loss(&[0.0f64, 0.5, 1.0, 2.0]).unwrap() - 0.5625).abs() < 1e-15);
        assert!(lsgan_generator_loss::<f64>(&[]).is_err());
    }

    #[test]
    fn discriminator_loss_values() {
        assert_eq!(lsgan_discriminator_loss(&[1.0f64; 3], &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(lsgan_discriminator_loss(&[0.0f64; 3], &[1.0; 3]).unwrap(), 2.0);
        assert!((lsgan_discriminator_loss(&[1.0f64, 0.0], &[0.5]).unwrap() - 0.75).abs() < 1e-15);
        assert!(lsgan_discriminator_loss::<f64>(&[1.0], &[]).is_err());
    }

    #[test]
    fn alignment_arithmetic() {
        assert!((alignment_from_nmi(0.8, 0.6) - 0.6).abs() < 1e-12);
        assert_eq!(alignment_from_nmi(0.0, 0.0), 2.0);
    }

    #[test]
    fn alignment_identity_is_zero() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| i as f64 / 8.0 - 1.0).collect()).unwrap();
        let l = alignment_loss(&x, &x, &x, &x, &SoftNmiConfig::default()).unwrap();
        assert!(l.abs() < 1e-9);
        let y = Tensor::<f64>::zeros(&[1, 1, 4, 5]);
        assert!(alignment_loss(&x, &y, &x, &x, &SoftNmiConfig::default()).is_err());
    }

    #[test]
    fn cycle_values() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1f64, 0.2, -0.3, 0.4]).unwrap();
        assert_eq!(cycle_l1(&x, &x, &x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.5);
        assert!((cycle_l1(&shifted, &x, &x, &x).unwrap() - 0.5).abs() < 1e-12);
        let other = Tensor::<f64>::zeros(&[1, 1, 2, 3]);
        assert!(cycle_l1(&other, &x, &x, &x).is_err());
    }

    #[test]
    fn total_with_default_weights() {
        let c = LossComponents {
            gan_a2b: 1.0,
            gan_b2a: 1.0,
            align: 0.5,
            cyc: 0.2,
            dicyc: 0.3,
        };
        assert!((total_loss(&c, &LossWeights::default()) - 7.45).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()), 0.0);
        // baseline reduction
        let w = LossWeights::baseline(10.0);
        assert!((total_loss(&c, &w) - (1.0 + 1.0 + 10.0 * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            lambda_cyc: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn tape_versions_agree() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 0.5, 1.0, 2.0]).unwrap());
        let g = tape_lsgan_generator(&mut t, s).unwrap();
        assert!((t.scalar(g) - 0.5625).abs() < 1e-15);
        let r = t.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
        let f = t.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![0.5]).unwrap());
        let d = tape_lsgan_discriminator(&mut t, r, f).unwrap();
        assert!((t.scalar(d) - 0.75).abs() < 1e-15);
    }
}
