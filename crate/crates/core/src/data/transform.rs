//! Resampling, cropping, intensity normalization and random affine augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::deform::bilinear_sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims(image: &Image) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::Shape(format!("expected a non-empty 2-d image, got {s:?}"))),
    }
}

/// Sample `image` at `(y, x)` positions given as two planes of an `[2, oh, ow]` grid.
fn resample(image: &Image, points: Vec<f64>, oh: usize, ow: usize) -> Result<Image> {
    let (h, w) = dims(image)?;
    let feature = image.clone().reshape(&[1, h, w])?;
    bilinear_sample(&feature, &Tensor::from_vec(&[2, oh, ow], points)?)?.reshape(&[oh, ow])
}

/// Result of [`preprocess`].
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub image: Image,
    /// The resampled image was smaller than the crop and had to be padded.
    pub padded: bool,
}

/// Resample from `source_spacing` to `target_spacing` (mm per pixel, `(y, x)`) with
/// linear interpolation, then centre-crop or pad to `crop`. Padding uses the
/// minimum intensity.
pub fn preprocess(
    image: &Image,
    source_spacing: (f64, f64),
    target_spacing: (f64, f64),
    crop: (usize, usize),
) -> Result<Preprocessed> {
    let (h, w) = dims(image)?;
    let spacings = [source_spacing.0, source_spacing.1, target_spacing.0, target_spacing.1];
    if spacings.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config("voxel spacings must be positive".into()));
    }
    if crop.0 == 0 || crop.1 == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let ry = target_spacing.0 / source_spacing.0;
    let rx = target_spacing.1 / source_spacing.1;
    let oh = ((h as f64 / ry).round() as usize).max(1);
    let ow = ((w as f64 / rx).round() as usize).max(1);
    // Pixel centres are aligned: output i sits at source coordinate (i + ½)·r − ½.
    let mut pts = vec![0.0; 2 * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            pts[y * ow + x] = (y as f64 + 0.5) * ry - 0.5;
            pts[oh * ow + y * ow + x] = (x as f64 + 0.5) * rx - 0.5;
        }
    }
    let resampled = resample(image, pts, oh, ow)?;
    let fill = resampled.data().iter().copied().fold(f64::INFINITY, f64::min);
    let (ch, cw) = crop;
    let padded = ch > oh || cw > ow;
    let mut out = Tensor::full(&[ch, cw], fill);
    // Offsets of the crop window inside the resampled image (negative = padding).
    let oy = (oh as isize - ch as isize) / 2;
    let ox = (ow as isize - cw as isize) / 2;
    for y in 0..ch {
        let sy = y as isize + oy;
        if sy < 0 || sy >= oh as isize {
            continue;
        }
        for x in 0..cw {
            let sx = x as isize + ox;
            if sx >= 0 && sx < ow as isize {
                out.data_mut()[y * cw + x] = resampled.data()[sy as usize * ow + sx as usize];
            }
        }
    }
    if padded {
        log::warn!("crop {ch}x{cw} exceeds resampled image {oh}x{ow}; padded with minimum intensity");
    }
    Ok(Preprocessed { image: out, padded })
}

/// Per-image z-score parameters and the fixed affine map from z-scores to the
/// generator range `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: f64,
    pub std: f64,
    /// `unit = clamp(scale·z + shift, -1, 1)`.
    pub affine_to_unit: (f64, f64),
}

/// Default affine map: z-scores in `[-4, 4]` fill the unit range.
pub const UNIT_SCALE: f64 = 0.25;

impl NormalizationRecord {
    pub fn to_unit(&self, z: f64) -> f64 {
        let (s, t) = self.affine_to_unit;
        (s * z + t).clamp(-1.0, 1.0)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        let (s, t) = self.affine_to_unit;
        (u - t) / s
    }

    pub fn denormalize(&self, z: &Image) -> Image {
        z.map(|v| v * self.std + self.mean)
    }
}

/// Z-score an image: zero mean, unit (population) standard deviation.
pub fn normalize(image: &Image) -> Result<(Image, NormalizationRecord)> {
    let n = image.numel();
    if n == 0 {
        return Err(Error::Shape("cannot normalize an empty image".into()));
    }
    let mean = image.data().iter().sum::<f64>() / n as f64;
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(Error::Config("cannot normalize a constant image".into()));
    }
    Ok((
        image.map(|v| (v - mean) / std),
        NormalizationRecord {
            mean,
            std,
            affine_to_unit: (UNIT_SCALE, 0.0),
        },
    ))
}

/// Ranges of the random affine augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_vertical: f64,
    pub flip_horizontal: f64,
    /// Maximum rotation in degrees.
    pub rotation_deg: f64,
    pub shear: f64,
    /// Maximum translation as a fraction of the image size.
    pub translation: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_vertical: 0.5,
            flip_horizontal: 0.5,
            rotation_deg: 15.0,
            shear: 0.1,
            translation: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            flip_vertical: 0.0,
            flip_horizontal: 0.0,
            rotation_deg: 0.0,
            shear: 0.0,
            translation: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_vertical, self.flip_horizontal];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if [self.rotation_deg, self.shear, self.translation]
            .iter()
            .any(|v| *v < 0.0)
        {
            return Err(Error::Config("augmentation ranges must be ≥ 0".into()));
        }
        Ok(())
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, range: f64) -> f64 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}

/// Apply a random flip / rotation / shear / translation about the image centre.
///
/// The draw sequence is fixed, so the result depends only on the RNG state.
pub fn augment<R: Rng + ?Sized>(image: &Image, rng: &mut R, policy: &AugmentPolicy) -> Result<Image> {
    let (h, w) = dims(image)?;
    let flip_v = rng.gen::<f64>() < policy.flip_vertical;
    let flip_h = rng.gen::<f64>() < policy.flip_horizontal;
    let angle = symmetric(rng, policy.rotation_deg).to_radians();
    let shear = symmetric(rng, policy.shear);
    let ty = symmetric(rng, policy.translation) * h as f64;
    let tx = symmetric(rng, policy.translation) * w as f64;
    if !flip_v && !flip_h && angle == 0.0 && shear == 0.0 && ty == 0.0 && tx == 0.0 {
        return Ok(image.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (c, s) = (angle.cos(), angle.sin());
    // Inverse map from output to source: flip ∘ (rotation · shear)⁻¹ ∘ (p − t).
    let m = [[c, -s + c * shear], [s, c + s * shear]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let p = h * w;
    let mut pts = vec![0.0; 2 * p];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy - ty, x as f64 - cx - tx);
            let mut sy = inv[0][0] * dy + inv[0][1] * dx;
            let mut sx = inv[1][0] * dy + inv[1][1] * dx;
            if flip_v {
                sy = -sy;
            }
            if flip_h {
                sx = -sx;
            }
            pts[y * w + x] = sy + cy;
            pts[p + y * w + x] = sx + cx;
        }
    }
    resample(image, pts, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn preprocess_identity_and_constant() {
        let x = img(12, 10, 0);
        let same = preprocess(&x, (1.0, 1.0), (1.0, 1.0), (12, 10)).unwrap();
        assert!(!same.padded);
        assert!(same.image.max_abs_diff(&x) < 1e-12);
        let c = Tensor::full(&[16, 16], 0.7);
        let down = preprocess(&c, (1.0, 1.0), (2.0, 2.0), (8, 8)).unwrap();
        assert!(down.image.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn preprocess_pads_with_minimum() {
        let x = img(6, 6, 1);
        let out = preprocess(&x, (1.0, 1.0), (1.0, 1.0), (8, 8)).unwrap();
        assert!(out.padded);
        let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(out.image.data()[0], lo);
        assert_eq!(out.image.data()[8 + 1], x.data()[0]);
    }

    #[test]
    fn normalize_round_trip() {
        let x = img(8, 8, 2).map(|v| 3.0 * v + 1.0);
        let (z, rec) = normalize(&x).unwrap();
        let mean = z.mean();
        let std = (z.data().iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
        let (_, again) = normalize(&z).unwrap();
        assert!(again.mean.abs() < 1e-12 && (again.std - 1.0).abs() < 1e-12);
        assert!(rec.denormalize(&z).max_abs_diff(&x) < 1e-12);
        assert!((rec.from_unit(rec.to_unit(1.5)) - 1.5).abs() < 1e-12);
        assert!(normalize(&Tensor::full(&[3, 3], 2.0)).is_err());
    }

    #[test]
    fn identity_policy_leaves_image_alone() {
        let x = img(9, 9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, &mut rng, &AugmentPolicy::identity()).unwrap(), x);
    }

    #[test]
    fn augmentation_is_deterministic_and_flip_is_involution() {
        let x = img(10, 10, 4);
        let p = AugmentPolicy::default();
        let a = augment(&x, &mut ChaCha8Rng::seed_from_u64(5), &p).unwrap();
        let b = augment(&x, &mut ChaCha8Rng::seed_from_u64(5), &p).unwrap();
        assert_eq!(a, b);
        let flip = AugmentPolicy {
            flip_horizontal: 1.0,
            ..AugmentPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let once = augment(&x, &mut rng, &flip).unwrap();
        assert_eq!(once.data()[0], x.data()[9]);
        let twice = augment(&once, &mut rng, &flip).unwrap();
        assert!(twice.max_abs_diff(&x) < 1e-12);
    }
}
