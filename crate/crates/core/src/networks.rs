//! Dual-path resnet generator and patch discriminator.
//!
//! The generator follows the usual resnet encoder/decoder layout: a 7×7 input
//! block, two stride-2 downsampling convolutions, a stack of residual blocks, two
//! transposed-convolution upsampling blocks and a 7×7 output block with `tanh`.
//! Offset convolutions sit in front of the input block, both downsampling blocks and
//! the first convolution of the first residual block. Their parameters form the
//! `θ_T` group; everything else is `θ`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::deform::{deformable_conv, DeformMode, DeformVars, DeformableConvSpec, PaddingMode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;

/// Parameter partition of a generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone parameters `θ`.
    Theta,
    /// Offset-branch parameters `θ_T`.
    ThetaT,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Where offset convolutions are inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPoint {
    InputBlock,
    Downsample1,
    Downsample2,
    FirstResnetBlock,
}

impl InsertionPoint {
    pub const ALL: [InsertionPoint; 4] = [
        InsertionPoint::InputBlock,
        InsertionPoint::Downsample1,
        InsertionPoint::Downsample2,
        InsertionPoint::FirstResnetBlock,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resnet_blocks: usize,
    pub base_width: usize,
    pub image_channels: usize,
    pub offset_insertion: Vec<InsertionPoint>,
    pub normalization: Normalization,
    /// Kernel size of the offset-predicting convolutions.
    pub offset_kernel: usize,
    /// Optional soft bound `cap·tanh(o/cap)` on predicted offsets (pixels).
    pub offset_cap: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resnet_blocks: 9,
            base_width: 64,
            image_channels: 1,
            offset_insertion: InsertionPoint::ALL.to_vec(),
            normalization: Normalization::Instance,
            offset_kernel: 3,
            offset_cap: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resnet_blocks == 0 {
            return Err(Error::Config("generator needs at least one resnet block".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("generator base_width must be positive".into()));
        }
        if self.image_channels != 1 {
            return Err(Error::Config(format!(
                "only single-channel images are supported, got {}",
                self.image_channels
            )));
        }
        if self.offset_insertion != InsertionPoint::ALL {
            return Err(Error::Config(format!(
                "offset_insertion must be {:?}, got {:?}",
                InsertionPoint::ALL,
                self.offset_insertion
            )));
        }
        if self.offset_kernel.is_multiple_of(2) {
            return Err(Error::Config("offset_kernel must be odd".into()));
        }
        if let Some(cap) = self.offset_cap {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::Config(format!("offset_cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub base_width: usize,
    pub image_channels: usize,
    pub patch_output: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            base_width: 64,
            image_channels: 1,
            patch_output: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("discriminator needs at least one layer".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("discriminator base_width must be positive".into()));
        }
        if self.image_channels != 1 {
            return Err(Error::Config("only single-channel images are supported".into()));
        }
        if !self.patch_output {
            return Err(Error::Config("only patch output is supported".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zero,
}

struct Decl {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Decls(Vec<Decl>);

impl Decls {
    fn add(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> usize {
        self.0.push(Decl {
            name,
            group,
            shape: shape.to_vec(),
            init,
        });
        self.0.len() - 1
    }

    fn materialize<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<NamedParam> {
        let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
        self.0
            .into_iter()
            .map(|d| {
                let mut value = Tensor::zeros(&d.shape);
                if let Init::Normal = d.init {
                    for v in value.data_mut() {
                        *v = normal.sample(rng);
                    }
                }
                NamedParam {
                    name: d.name,
                    group: d.group,
                    value,
                }
            })
            .collect()
    }
}

/// A convolution whose parameters live at fixed indices of the parameter list.
#[derive(Clone, Debug)]
struct ConvSlot {
    spec: DeformableConvSpec,
    w: usize,
    b: usize,
    offset: Option<(usize, usize)>,
}

impl ConvSlot {
    fn declare(decls: &mut Decls, name: &str, spec: DeformableConvSpec, deformable: bool) -> Self {
        let k = spec.kernel_size;
        let w = decls.add(
            format!("{name}.weight"),
            ParamGroup::Theta,
            &[spec.out_channels, spec.in_channels, k, k],
            Init::Normal,
        );
        let b = decls.add(
            format!("{name}.bias"),
            ParamGroup::Theta,
            &[spec.out_channels],
            Init::Zero,
        );
        let offset = deformable.then(|| {
            let ok = spec.offset_kernel;
            let oc = spec.offset_channels();
            let ow = decls.add(
                format!("{name}.offset.weight"),
                ParamGroup::ThetaT,
                &[oc, spec.in_channels, ok, ok],
                Init::Zero,
            );
            let ob = decls.add(format!("{name}.offset.bias"), ParamGroup::ThetaT, &[oc], Init::Zero);
            (ow, ob)
        });
        Self { spec, w, b, offset }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, mode: DeformMode) -> Result<Var> {
        match self.offset {
            Some((ow, ob)) => {
                let dv = DeformVars {
                    weight: vars[self.w],
                    bias: Some(vars[self.b]),
                    offset_weight: vars[ow],
                    offset_bias: vars[ob],
                };
                deformable_conv(tape, x, &self.spec, &dv, mode)
            }
            None => {
                let padded = match (self.spec.padding, self.spec.padding_mode) {
                    (0, _) => x,
                    (p, PaddingMode::Reflect) => tape.reflect_pad(x, p)?,
                    (p, PaddingMode::Zero) => tape.zero_pad(x, p)?,
                };
                tape.conv2d(padded, vars[self.w], Some(vars[self.b]), self.spec.stride, 0)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct UpSlot {
    w: usize,
    b: usize,
}

struct GenPlan {
    input: ConvSlot,
    down: [ConvSlot; 2],
    res: Vec<[ConvSlot; 2]>,
    up: [UpSlot; 2],
    output: ConvSlot,
}

fn spec(
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PaddingMode,
    cfg: &GeneratorConfig,
) -> DeformableConvSpec {
    let mut s = DeformableConvSpec::new(in_c, out_c, k)
        .with_stride(stride)
        .with_padding(pad, mode);
    s.offset_kernel = cfg.offset_kernel;
    s.offset_cap = cfg.offset_cap;
    s
}

fn generator_plan(cfg: &GeneratorConfig, with_offsets: bool) -> (GenPlan, Decls) {
    use PaddingMode::{Reflect, Zero};
    let mut d = Decls::default();
    let (c, w) = (cfg.image_channels, cfg.base_width);
    let input = ConvSlot::declare(&mut d, "input", spec(c, w, 7, 1, 3, Reflect, cfg), with_offsets);
    let down = [
        ConvSlot::declare(&mut d, "down1", spec(w, 2 * w, 3, 2, 1, Zero, cfg), with_offsets),
        ConvSlot::declare(&mut d, "down2", spec(2 * w, 4 * w, 3, 2, 1, Zero, cfg), with_offsets),
    ];
    let res = (0..cfg.resnet_blocks)
        .map(|i| {
            let s = spec(4 * w, 4 * w, 3, 1, 1, Reflect, cfg);
            [
                ConvSlot::declare(&mut d, &format!("res{i}.conv1"), s.clone(), with_offsets && i == 0),
                ConvSlot::declare(&mut d, &format!("res{i}.conv2"), s, false),
            ]
        })
        .collect();
    let mut up_slot = |name: &str, cin: usize, cout: usize| UpSlot {
        w: d.add(
            format!("{name}.weight"),
            ParamGroup::Theta,
            &[cin, cout, 3, 3],
            Init::Normal,
        ),
        b: d.add(format!("{name}.bias"), ParamGroup::Theta, &[cout], Init::Zero),
    };
    let up = [up_slot("up1", 4 * w, 2 * w), up_slot("up2", 2 * w, w)];
    let output = ConvSlot::declare(&mut d, "output", spec(w, c, 7, 1, 3, Reflect, cfg), false);
    (
        GenPlan {
            input,
            down,
            res,
            up,
            output,
        },
        d,
    )
}

/// Parameters of one generator, partitioned into `θ` and `θ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub with_offsets: bool,
    pub params: Vec<NamedParam>,
}

fn count(params: &[NamedParam], group: ParamGroup) -> usize {
    params
        .iter()
        .filter(|p| p.group == group)
        .map(|p| p.value.numel())
        .sum()
}

impl GeneratorParams {
    pub fn theta(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter().filter(|p| p.group == ParamGroup::Theta)
    }

    pub fn theta_t(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter().filter(|p| p.group == ParamGroup::ThetaT)
    }

    /// Number of scalar parameters in `θ`.
    pub fn theta_count(&self) -> usize {
        count(&self.params, ParamGroup::Theta)
    }

    /// Number of scalar parameters in `θ_T`.
    pub fn theta_t_count(&self) -> usize {
        count(&self.params, ParamGroup::ThetaT)
    }

    /// Number of offset convolutions.
    pub fn offset_convolutions(&self) -> usize {
        self.theta_t().filter(|p| p.name.ends_with(".offset.weight")).count()
    }

    pub fn get(&self, name: &str) -> Option<&NamedParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        load_params(&mut self.params, values)
    }
}

/// Replace parameter values in order, checking names and shapes.
pub fn load_params(params: &mut [NamedParam], values: Vec<(String, Tensor)>) -> Result<()> {
    if values.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, got {}",
            params.len(),
            values.len()
        )));
    }
    for (p, (name, v)) in params.iter_mut().zip(values) {
        if p.name != name || p.value.shape() != v.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {:?} does not match {} {:?}",
                v.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = v;
    }
    Ok(())
}

/// Build a generator with `N(0, 0.02)` backbone weights, zero biases and a zero
/// offset branch. `with_offsets = false` gives the plain (baseline) generator.
pub fn build_generator<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    with_offsets: bool,
    rng: &mut R,
) -> Result<GeneratorParams> {
    config.validate()?;
    let (_, decls) = generator_plan(config, with_offsets);
    Ok(GeneratorParams {
        config: config.clone(),
        with_offsets,
        params: decls.materialize(rng),
    })
}

/// Put every parameter on the tape, as trainable leaves or as constants.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &[NamedParam], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            let v = p.value.cast::<T>();
            if trainable {
                tape.param(v)
            } else {
                tape.constant(v)
            }
        })
        .collect()
}

fn check_input(shape: &[usize], channels: usize, multiple: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Shape(format!(
            "expected [B, {channels}, H, W] input, got {shape:?}"
        )));
    }
    if !shape[2].is_multiple_of(multiple) || !shape[3].is_multiple_of(multiple) || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::Shape(format!(
            "spatial size {}x{} is not a positive multiple of {multiple}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

/// Record a generator pass on `tape`. `vars` come from [`bind`] on `g.params`.
pub fn generator_tape<T: Scalar>(
    tape: &mut Tape<T>,
    g: &GeneratorParams,
    vars: &[Var],
    x: Var,
    mode: DeformMode,
) -> Result<Var> {
    check_input(tape.value(x).shape(), g.config.image_channels, 4)?;
    if vars.len() != g.params.len() {
        return Err(Error::Shape("generator variables do not match parameters".into()));
    }
    let (plan, _) = generator_plan(&g.config, g.with_offsets);
    let norm_relu = |tape: &mut Tape<T>, h: Var| -> Result<Var> {
        let n = tape.instance_norm(h)?;
        Ok(tape.relu(n))
    };

    let mut h = plan.input.apply(tape, vars, x, mode)?;
    h = norm_relu(tape, h)?;
    for slot in &plan.down {
        h = slot.apply(tape, vars, h, mode)?;
        h = norm_relu(tape, h)?;
    }
    for [c1, c2] in &plan.res {
        let mut r = c1.apply(tape, vars, h, mode)?;
        r = norm_relu(tape, r)?;
        r = c2.apply(tape, vars, r, mode)?;
        r = tape.instance_norm(r)?;
        h = tape.add(h, r)?;
    }
    for up in &plan.up {
        h = tape.conv_transpose2d(h, vars[up.w], Some(vars[up.b]), 2, 1, 1)?;
        h = norm_relu(tape, h)?;
    }
    h = plan.output.apply(tape, vars, h, mode)?;
    Ok(tape.tanh(h))
}

/// Translate a `[B, 1, H, W]` batch (H and W divisible by 4).
pub fn generator_forward(g: &GeneratorParams, x: &Tensor, mode: DeformMode) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let vars = bind(&mut tape, &g.params, false);
    let xv = tape.constant(x.clone());
    let out = generator_tape(&mut tape, g, &vars, xv, mode)?;
    Ok(tape.value(out).clone())
}

/// Parameters of one patch discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub config: DiscriminatorConfig,
    pub params: Vec<NamedParam>,
}

struct DiscLayer {
    w: usize,
    b: usize,
    stride: usize,
    norm: bool,
    act: bool,
}

fn discriminator_plan(cfg: &DiscriminatorConfig) -> (Vec<DiscLayer>, Decls) {
    let mut d = Decls::default();
    let mut layers = Vec::new();
    let mut cin = cfg.image_channels;
    for i in 0..cfg.layers {
        let cout = cfg.base_width * (1usize << i.min(3));
        layers.push(DiscLayer {
            w: d.add(
                format!("conv{i}.weight"),
                ParamGroup::Theta,
                &[cout, cin, 4, 4],
                Init::Normal,
            ),
            b: d.add(format!("conv{i}.bias"), ParamGroup::Theta, &[cout], Init::Zero),
            stride: if i + 1 < cfg.layers { 2 } else { 1 },
            norm: i > 0,
            act: true,
        });
        cin = cout;
    }
    layers.push(DiscLayer {
        w: d.add("score.weight".into(), ParamGroup::Theta, &[1, cin, 4, 4], Init::Normal),
        b: d.add("score.bias".into(), ParamGroup::Theta, &[1], Init::Zero),
        stride: 1,
        norm: false,
        act: false,
    });
    (layers, d)
}

impl DiscriminatorParams {
    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        load_params(&mut self.params, values)
    }
}

pub fn build_discriminator<R: Rng + ?Sized>(config: &DiscriminatorConfig, rng: &mut R) -> Result<DiscriminatorParams> {
    config.validate()?;
    let (_, decls) = discriminator_plan(config);
    Ok(DiscriminatorParams {
        config: config.clone(),
        params: decls.materialize(rng),
    })
}

/// Record a discriminator pass; returns `[B, 1, h, w]` unbounded patch scores.
pub fn discriminator_tape<T: Scalar>(tape: &mut Tape<T>, d: &DiscriminatorParams, vars: &[Var], x: Var) -> Result<Var> {
    check_input(tape.value(x).shape(), d.config.image_channels, 1)?;
    if vars.len() != d.params.len() {
        return Err(Error::Shape("discriminator variables do not match parameters".into()));
    }
    let (plan, _) = discriminator_plan(&d.config);
    let mut h = x;
    for l in &plan {
        h = tape.conv2d(h, vars[l.w], Some(vars[l.b]), l.stride, 1)?;
        if l.norm {
            h = tape.instance_norm(h)?;
        }
        if l.act {
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE));
        }
    }
    Ok(h)
}

pub fn discriminator_forward(d: &DiscriminatorParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let vars = bind(&mut tape, &d.params, false);
    let xv = tape.constant(x.clone());
    let out = discriminator_tape(&mut tape, d, &vars, xv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            resnet_blocks: 2,
            base_width: 4,
            ..GeneratorConfig::default()
        }
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = build_generator(&GeneratorConfig::default(), true, &mut rng).unwrap();
        assert_eq!(g.offset_convolutions(), 4);
        let total: usize = g.params.iter().map(|p| p.value.numel()).sum();
        assert_eq!(g.theta_count() + g.theta_t_count(), total);
        assert!(g.theta_t().all(|p| p.name.contains(".offset.")));
        assert!(g.theta().all(|p| !p.name.contains(".offset.")));

        let base = build_generator(&GeneratorConfig::default(), false, &mut rng).unwrap();
        assert_eq!(base.theta_t_count(), 0);
        assert_eq!(base.theta_count(), g.theta_count());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_generator(&small(), true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_generator(&small(), true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = build_generator(&small(), true, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = GeneratorConfig {
            resnet_blocks: 0,
            ..small()
        };
        assert!(build_generator(&zero, true, &mut rng).is_err());
        let partial = GeneratorConfig {
            offset_insertion: vec![InsertionPoint::InputBlock],
            ..small()
        };
        assert!(build_generator(&partial, true, &mut rng).is_err());
        let d = DiscriminatorConfig {
            layers: 0,
            ..DiscriminatorConfig::default()
        };
        assert!(build_discriminator(&d, &mut rng).is_err());
    }

    #[test]
    fn fresh_generator_paths_agree_and_keep_shape() {
        let g = build_generator(&small(), true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (i, size) in [16usize, 24].into_iter().enumerate() {
            let x = noise(&[2, 1, size, size], i as u64);
            let d = generator_forward(&g, &x, DeformMode::Deformed).unwrap();
            let u = generator_forward(&g, &x, DeformMode::Undeformed).unwrap();
            assert_eq!(d.shape(), x.shape());
            assert!(d.max_abs_diff(&u) < 1e-5);
            assert!(d.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn non_divisible_input_rejected() {
        let g = build_generator(&small(), true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = noise(&[1, 1, 18, 16], 0);
        assert!(matches!(
            generator_forward(&g, &x, DeformMode::Undeformed),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn undeformed_path_ignores_theta_t() {
        let mut g = build_generator(&small(), true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = noise(&[1, 1, 16, 16], 3);
        let before = generator_forward(&g, &x, DeformMode::Undeformed).unwrap();
        let deformed_before = generator_forward(&g, &x, DeformMode::Deformed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in g.params.iter_mut().filter(|p| p.group == ParamGroup::ThetaT) {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let after = generator_forward(&g, &x, DeformMode::Undeformed).unwrap();
        let deformed_after = generator_forward(&g, &x, DeformMode::Deformed).unwrap();
        assert_eq!(before, after);
        assert!(deformed_before.max_abs_diff(&deformed_after) > 1e-4);
    }

    #[test]
    fn baseline_is_mode_independent() {
        let g = build_generator(&small(), false, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = noise(&[1, 1, 16, 16], 4);
        assert_eq!(
            generator_forward(&g, &x, DeformMode::Deformed).unwrap(),
            generator_forward(&g, &x, DeformMode::Undeformed).unwrap()
        );
    }

    #[test]
    fn discriminator_grid_shapes() {
        let cfg = DiscriminatorConfig {
            base_width: 4,
            ..DiscriminatorConfig::default()
        };
        let d = build_discriminator(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grid = |s: usize| {
            let out = discriminator_forward(&d, &noise(&[1, 1, s, s], 1)).unwrap();
            out.dims4().unwrap()
        };
        assert_eq!(grid(64), [1, 1, 6, 6]);
        let [_, _, h, w] = grid(128);
        assert_eq!((h, w), (14, 14));
        // Three stride-2 stages then two stride-1 4×4 convolutions with padding 1.
        for s in [32usize, 64, 96, 128, 256] {
            let expect = s / 8 - 2;
            assert_eq!(grid(s)[2], expect);
        }
    }

    #[test]
    fn zero_discriminator_scores_zero() {
        let mut d = build_discriminator(
            &DiscriminatorConfig {
                base_width: 4,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for p in &mut d.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        let out = discriminator_forward(&d, &noise(&[1, 1, 32, 32], 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_rejects_wrong_channels() {
        let d = build_discriminator(&DiscriminatorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(discriminator_forward(&d, &noise(&[1, 2, 32, 32], 0)).is_err());
    }
}
