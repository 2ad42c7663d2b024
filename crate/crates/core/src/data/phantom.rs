//! Procedural two-domain phantoms and smooth random deformation fields.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{seeded, Image};
use crate::deform::bilinear_sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A tissue class: intensity under domain A and under domain B.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub a: f64,
    pub b: f64,
}

/// The intensity mapping between domains is deliberately non-monotone.
pub const BODY: Tissue = Tissue { a: 0.55, b: 0.35 };
pub const BED: Tissue = Tissue { a: 0.3, b: 0.8 };
pub const ORGANS: [Tissue; 5] = [
    Tissue { a: 0.9, b: 0.2 },
    Tissue { a: 0.2, b: 0.9 },
    Tissue { a: 0.75, b: 0.65 },
    Tissue { a: 0.35, b: 0.55 },
    Tissue { a: 0.05, b: 0.1 },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Rendered image side length (pixels).
    pub size: usize,
    pub organs_min: usize,
    pub organs_max: usize,
    /// Relative amplitude of the shared low-frequency texture.
    pub texture: f64,
    /// Standard deviation of per-domain pixel noise.
    pub noise: f64,
    /// Edge softness (pixels).
    pub edge: f64,
    pub bed: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 80,
            organs_min: 3,
            organs_max: 6,
            texture: 0.06,
            noise: 0.01,
            edge: 0.8,
            bed: true,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("phantom size {} is too small", self.size)));
        }
        if self.organs_min > self.organs_max {
            return Err(Error::Config("organs_min exceeds organs_max".into()));
        }
        if self.texture < 0.0 || self.noise < 0.0 || self.edge <= 0.0 {
            return Err(Error::Config("texture and noise must be ≥ 0, edge > 0".into()));
        }
        Ok(())
    }
}

/// Soft inside-indicator from a signed distance (negative inside).
fn soft_inside(d: f64, edge: f64) -> f64 {
    let t = (0.5 - d / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Shape {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    power: f64,
}

impl Shape {
    /// Approximate signed distance in pixels to a rotated superellipse.
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let r = ((u / self.rx).abs().powf(self.power) + (v / self.ry).abs().powf(self.power)).powf(1.0 / self.power);
        (r - 1.0) * self.rx.min(self.ry)
    }
}

/// Render one phantom under both domain appearances. The two images share every
/// geometric element (body, organs, bed, texture) and differ only in tissue
/// intensities and pixel noise. Values lie in `[0, 1]`.
pub fn gen_phantom_pair(seed: u64, config: &PhantomConfig) -> Result<(Image, Image)> {
    config.validate()?;
    let mut rng = seeded(seed, 0);
    let n = config.size;
    let s = n as f64;
    let body = Shape {
        cy: s * rng.gen_range(0.44..0.50),
        cx: s * rng.gen_range(0.46..0.54),
        ry: s * rng.gen_range(0.26..0.32),
        rx: s * rng.gen_range(0.33..0.40),
        cos: 1.0,
        sin: 0.0,
        power: rng.gen_range(2.0..3.5),
    };
    let organ_count = rng.gen_range(config.organs_min..=config.organs_max);
    let organs: Vec<(Shape, Tissue)> = (0..organ_count)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..2.0 * PI);
            let rad: f64 = rng.gen_range(0.0..0.55);
            let angle: f64 = rng.gen_range(0.0..PI);
            let shape = Shape {
                cy: body.cy + rad * body.ry * theta.sin(),
                cx: body.cx + rad * body.rx * theta.cos(),
                ry: s * rng.gen_range(0.05..0.11),
                rx: s * rng.gen_range(0.05..0.13),
                cos: angle.cos(),
                sin: angle.sin(),
                power: 2.0,
            };
            (shape, ORGANS[rng.gen_range(0..ORGANS.len())])
        })
        .collect();
    let bed_top = body.cy + body.ry + s * rng.gen_range(0.03..0.06);
    let bed_height = s * 0.05;
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..2.0 * PI);
            let f = rng.gen_range(1.0..3.0) * 2.0 * PI / s;
            (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();

    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * n];
    for yi in 0..n {
        for xi in 0..n {
            let (y, x) = (yi as f64 + 0.5, xi as f64 + 0.5);
            let inside = soft_inside(body.distance(y, x), config.edge);
            let (mut va, mut vb) = (BODY.a * inside, BODY.b * inside);
            for (shape, t) in &organs {
                let w = soft_inside(shape.distance(y, x), config.edge) * inside;
                va += w * (t.a - va);
                vb += w * (t.b - vb);
            }
            if config.bed {
                let d = (bed_top - y).max(y - bed_top - bed_height);
                let w = soft_inside(d, config.edge) * (1.0 - inside);
                va += w * BED.a;
                vb += w * BED.b;
            }
            let tex: f64 = waves
                .iter()
                .map(|(ky, kx, ph)| (ky * y + kx * x + ph).sin())
                .sum::<f64>()
                / 3.0;
            let m = 1.0 + config.texture * tex;
            a[yi * n + xi] = va * m;
            b[yi * n + xi] = vb * m;
        }
    }
    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("positive std");
        let mut ra = seeded(seed, 1);
        let mut rb = seeded(seed, 2);
        for v in &mut a {
            *v += normal.sample(&mut ra);
        }
        for v in &mut b {
            *v += normal.sample(&mut rb);
        }
    }
    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
    Ok((
        Tensor::from_vec(&[n, n], clamp(a))?,
        Tensor::from_vec(&[n, n], clamp(b))?,
    ))
}

/// Foreground (non-background) support of a rendered phantom.
pub fn foreground_mask(image: &Image, threshold: f64) -> Image {
    image.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    /// Maximum displacement norm (pixels).
    pub amplitude: f64,
    /// Base spatial frequency (cycles per image).
    pub frequency: f64,
    pub seed: u64,
}

/// Dense backward-warp displacement `[2, H, W]` (`dy` plane then `dx` plane).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub displacement: Tensor<f64>,
    pub params: DeformationParams,
}

impl DeformationField {
    pub fn max_norm(&self) -> f64 {
        let p = self.displacement.numel() / 2;
        let (dy, dx) = self.displacement.data().split_at(p);
        dy.iter().zip(dx).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }
}

/// A smooth field built from 2–4 sinusoidal components with random direction,
/// phase and frequency, rescaled so its largest displacement equals `amplitude`.
pub fn make_deformation(seed: u64, amplitude: f64, frequency: f64, size: (usize, usize)) -> Result<DeformationField> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::Config(format!(
            "deformation amplitude must be ≥ 0, got {amplitude}"
        )));
    }
    if !(frequency > 0.0 && frequency.is_finite()) {
        return Err(Error::Config(format!(
            "deformation frequency must be > 0, got {frequency}"
        )));
    }
    let (h, w) = size;
    let params = DeformationParams {
        amplitude,
        frequency,
        seed,
    };
    let mut disp = Tensor::zeros(&[2, h, w]);
    if amplitude == 0.0 {
        return Ok(DeformationField {
            displacement: disp,
            params,
        });
    }
    let mut rng: ChaCha8Rng = seeded(seed, 3);
    let count = rng.gen_range(2..=4);
    let comps: Vec<[f64; 5]> = (0..count)
        .map(|_| {
            let wave: f64 = rng.gen_range(0.0..2.0 * PI);
            let dir: f64 = rng.gen_range(0.0..2.0 * PI);
            let f = frequency * rng.gen_range(0.75..1.25) * 2.0 * PI;
            let weight = rng.gen_range(0.5..1.0);
            [
                f * wave.sin() / h as f64,
                f * wave.cos() / w as f64,
                dir,
                rng.gen_range(0.0..2.0 * PI),
                weight,
            ]
        })
        .collect();
    let p = h * w;
    let d = disp.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (mut dy, mut dx) = (0.0, 0.0);
            for &[ky, kx, dir, phase, weight] in &comps {
                let s = weight * (ky * y as f64 + kx * x as f64 + phase).sin();
                dy += s * dir.sin();
                dx += s * dir.cos();
            }
            d[y * w + x] = dy;
            d[p + y * w + x] = dx;
        }
    }
    let mut field = DeformationField {
        displacement: disp,
        params,
    };
    let peak = field.max_norm();
    if peak > 0.0 {
        let k = amplitude / peak;
        field.displacement = field.displacement.map(|v| v * k);
    }
    Ok(field)
}

/// Backward warp: `out(p) = image(p + d(p))` with bilinear interpolation and
/// clamped borders.
pub fn apply_deformation(image: &Image, field: &DeformationField) -> Result<Image> {
    let [h, w] = match image.shape() {
        &[h, w] => [h, w],
        s => return Err(Error::Shape(format!("expected a 2-d image, got {s:?}"))),
    };
    if field.displacement.shape() != [2, h, w] {
        return Err(Error::Shape(format!(
            "field {:?} does not match image {h}x{w}",
            field.displacement.shape()
        )));
    }
    let p = h * w;
    let d = field.displacement.data();
    let mut pts = vec![0.0; 2 * p];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            pts[i] = y as f64 + d[i];
            pts[p + i] = x as f64 + d[p + i];
        }
    }
    let feature = image.clone().reshape(&[1, h, w])?;
    let out = bilinear_sample(&feature, &Tensor::from_vec(&[2, h, w], pts)?)?;
    out.reshape(&[h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
        all.sort_by(f64::total_cmp);
        all.iter()
            .map(|&t| {
                let fa = a.partition_point(|&v| v <= t) as f64 / a.len() as f64;
                let fb = b.partition_point(|&v| v <= t) as f64 / b.len() as f64;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn phantoms_are_deterministic_and_share_geometry() {
        let cfg = PhantomConfig::default();
        let (a1, b1) = gen_phantom_pair(7, &cfg).unwrap();
        let (a2, b2) = gen_phantom_pair(7, &cfg).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let (a3, _) = gen_phantom_pair(8, &cfg).unwrap();
        assert_ne!(a1, a3);

        let quiet = PhantomConfig { noise: 0.0, ..cfg };
        let (a, b) = gen_phantom_pair(3, &quiet).unwrap();
        assert_eq!(foreground_mask(&a, 0.0), foreground_mask(&b, 0.0));
    }

    #[test]
    fn domains_differ_in_intensity_distribution() {
        let cfg = PhantomConfig::default();
        for seed in 0..5 {
            let (a, b) = gen_phantom_pair(seed, &cfg).unwrap();
            let fg: Vec<usize> = (0..a.numel())
                .filter(|&i| a.data()[i] > 0.05 && b.data()[i] > 0.05)
                .collect();
            let fa: Vec<f64> = fg.iter().map(|&i| a.data()[i]).collect();
            let fb: Vec<f64> = fg.iter().map(|&i| b.data()[i]).collect();
            assert!(ks(&fa, &fb) > 0.2, "seed {seed}: KS {}", ks(&fa, &fb));
        }
    }

    #[test]
    fn deformation_bounds_and_identity() {
        let z = make_deformation(1, 0.0, 1.0, (16, 16)).unwrap();
        assert!(z.displacement.data().iter().all(|&v| v == 0.0));
        let f = make_deformation(1, 5.0, 1.0, (64, 64)).unwrap();
        assert!(f.max_norm() <= 5.0 + 1e-9);
        assert!(f.max_norm() > 4.99);
        let g = make_deformation(2, 5.0, 1.0, (64, 64)).unwrap();
        let l2: f64 = f
            .displacement
            .data()
            .iter()
            .zip(g.displacement.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(l2.sqrt() > 1.0);
        assert!(make_deformation(1, -1.0, 1.0, (4, 4)).is_err());
    }

    #[test]
    fn warp_identity_and_shift() {
        let (img, _) = gen_phantom_pair(0, &PhantomConfig::default()).unwrap();
        let n = img.shape()[0];
        let zero = make_deformation(0, 0.0, 1.0, (n, n)).unwrap();
        assert!(apply_deformation(&img, &zero).unwrap().max_abs_diff(&img) < 1e-12);

        let mut shift = zero.clone();
        for v in &mut shift.displacement.data_mut()[n * n..] {
            *v = 3.0;
        }
        let out = apply_deformation(&img, &shift).unwrap();
        for y in 0..n {
            for x in 0..n - 3 {
                assert_eq!(out.data()[y * n + x], img.data()[y * n + x + 3]);
            }
        }

        let f = make_deformation(4, 5.0, 1.0, (n, n)).unwrap();
        let warped = apply_deformation(&img, &f).unwrap();
        assert!(warped.max_abs_diff(&img) > 0.05);
        assert!(apply_deformation(&img, &make_deformation(0, 1.0, 1.0, (n, n + 1)).unwrap()).is_err());
    }
}
