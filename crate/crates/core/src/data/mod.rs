//! Synthetic two-domain datasets: generation, on-disk layout, loading and
//! training-time sampling.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! domain_a/{train,test}/NNNN.png
//! domain_b/{train,test}/NNNN.png      (warped by the dataset deformation)
//! gt_b_aligned/test/NNNN.png          (domain-B appearance, unwarped)
//! gt_a_deformed/test/NNNN.png         (domain-A appearance, warped)
//! masks/test/NNNN.png                 (foreground of the unwarped geometry)
//! ```
//!
//! Images are 16-bit grayscale PNGs whose code range maps linearly onto the
//! manifest's `intensity_range`.

pub mod phantom;
pub mod transform;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use phantom::{
    apply_deformation, gen_phantom_pair, make_deformation, DeformationField, DeformationParams, PhantomConfig,
};
pub use transform::{augment, normalize, preprocess, AugmentPolicy, NormalizationRecord, Preprocessed};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel `[H, W]` image in double precision.
pub type Image = Tensor<f64>;

/// Deterministic RNG for `(seed, stream)`.
pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Domain::A => "domain_a",
            Domain::B => "domain_b",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Test-split reference images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Domain-B appearance of the domain-A geometry.
    GtBAligned,
    /// Domain-A appearance warped into the domain-B geometry.
    GtADeformed,
    Masks,
}

impl Reference {
    pub fn dir(self) -> &'static str {
        match self {
            Reference::GtBAligned => "gt_b_aligned",
            Reference::GtADeformed => "gt_a_deformed",
            Reference::Masks => "masks",
        }
    }
}

/// A batch `[B, 1, H, W]` of generator-range images from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub values: Tensor,
    pub domain: Domain,
    pub norm: Vec<NormalizationRecord>,
}

impl ImageBatch {
    pub fn new(values: Tensor, domain: Domain, norm: Vec<NormalizationRecord>) -> Result<Self> {
        let [b, c, _, _] = values.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("expected one channel, got {c}")));
        }
        if norm.len() != b {
            return Err(Error::Shape(format!(
                "{} normalization records for batch {b}",
                norm.len()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Shape("image batch contains non-finite values".into()));
        }
        Ok(Self { values, domain, norm })
    }
}

/// Z-score an image and map it into the generator range.
pub fn to_unit(image: &Image) -> Result<(Tensor, NormalizationRecord)> {
    let (z, rec) = normalize(image)?;
    let [h, w] = [image.shape()[0], image.shape()[1]];
    let unit: Vec<f32> = z.data().iter().map(|&v| rec.to_unit(v) as f32).collect();
    Ok((Tensor::from_vec(&[1, 1, h, w], unit)?, rec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomConfig,
    /// Spacing of the rendered phantom (mm per pixel).
    pub render_spacing: f64,
    /// Spacing after resampling (mm per pixel).
    pub spacing: f64,
    pub slice_thickness: f64,
    /// Side length after centre cropping.
    pub crop: usize,
    /// Maximum displacement of the domain-B deformation (pixels).
    pub amplitude: f64,
    /// Base frequency of the domain-B deformation (cycles per image).
    pub frequency: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 200,
            n_test: 50,
            phantom: PhantomConfig::default(),
            render_spacing: 1.0,
            spacing: 1.25,
            slice_thickness: 1.25,
            crop: 64,
            amplitude: 5.0,
            frequency: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of 4",
                self.crop
            )));
        }
        if !(self.render_spacing > 0.0 && self.spacing > 0.0 && self.slice_thickness > 0.0) {
            return Err(Error::Config("spacings must be positive".into()));
        }
        if !(self.amplitude >= 0.0) || !(self.frequency > 0.0) {
            return Err(Error::Config("amplitude must be ≥ 0 and frequency > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_a: usize,
    pub n_b: usize,
    pub n_test: usize,
    /// File names relative to each domain directory.
    pub split: SplitFiles,
    /// Voxel size in mm: `[y, x, slice]`.
    pub resolution: [f64; 3],
    pub crop: usize,
    pub seed: u64,
    pub deformation: DeformationParams,
    /// Intensity range covered by the 16-bit PNG codes.
    pub intensity_range: [f64; 2],
    pub config: DatasetConfig,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Write `image` as a 16-bit grayscale PNG covering `[lo, hi]`.
pub fn write_png16(path: &Path, image: &Image, range: [f64; 2]) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let file = io(path, fs::File::create(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut bytes = Vec::with_capacity(2 * h * w);
    for &v in image.data() {
        let code = ((v - range[0]) / (range[1] - range[0]) * 65535.0)
            .round()
            .clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&code.to_be_bytes());
    }
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Write an 8-bit grayscale PNG from values in `[0, 1]`.
pub fn write_png8(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let file = io(path, fs::File::create(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Read a grayscale PNG (8 or 16 bit) and map its code range onto `[lo, hi]`.
pub fn read_png(path: &Path, range: [f64; 2]) -> Result<Image> {
    let file = io(path, fs::File::open(path))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(
            path,
            format!("expected grayscale, got {:?}", info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let scale = range[1] - range[0];
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| range[0] + scale * u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..w * h]
            .iter()
            .map(|&c| range[0] + scale * c as f64 / 255.0)
            .collect(),
        d => return Err(Error::format(path, format!("unsupported bit depth {d:?}"))),
    };
    Tensor::from_vec(&[h, w], data)
}

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// Generate a dataset under `out`. The domain-B deformation is a single field
/// shared by every domain-B image; the test split also receives aligned
/// references and foreground masks.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let crop = (config.crop, config.crop);
    let spacing = (config.spacing, config.spacing);
    let render = (config.render_spacing, config.render_spacing);
    let range = [0.0, 1.0];
    let field = make_deformation(mix(config.seed, 4, 0), config.amplitude, config.frequency, crop)?;
    let prep = |img: &Image| -> Result<Image> { Ok(preprocess(img, render, spacing, crop)?.image) };

    let dirs: Vec<PathBuf> = [
        "domain_a/train",
        "domain_a/test",
        "domain_b/train",
        "domain_b/test",
        "gt_b_aligned/test",
        "gt_a_deformed/test",
        "masks/test",
    ]
    .iter()
    .map(|d| out.join(d))
    .collect();
    for d in &dirs {
        io(d, fs::create_dir_all(d))?;
    }

    let mut train = Vec::with_capacity(config.n_train);
    for i in 0..config.n_train {
        let name = file_name(i);
        let (a, _) = gen_phantom_pair(mix(config.seed, 1, i as u64), &config.phantom)?;
        let (_, b) = gen_phantom_pair(mix(config.seed, 2, i as u64), &config.phantom)?;
        write_png16(&dirs[0].join(&name), &prep(&a)?, range)?;
        write_png16(&dirs[2].join(&name), &apply_deformation(&prep(&b)?, &field)?, range)?;
        train.push(name);
    }
    let mut test = Vec::with_capacity(config.n_test);
    for i in 0..config.n_test {
        let name = file_name(i);
        let (a, b) = gen_phantom_pair(mix(config.seed, 3, i as u64), &config.phantom)?;
        let (a, b) = (prep(&a)?, prep(&b)?);
        write_png16(&dirs[1].join(&name), &a, range)?;
        write_png16(&dirs[3].join(&name), &apply_deformation(&b, &field)?, range)?;
        write_png16(&dirs[4].join(&name), &b, range)?;
        write_png16(&dirs[5].join(&name), &apply_deformation(&a, &field)?, range)?;
        write_png16(&dirs[6].join(&name), &phantom::foreground_mask(&a, 0.05), range)?;
        test.push(name);
    }

    let manifest = DatasetManifest {
        n_a: config.n_train,
        n_b: config.n_train,
        n_test: config.n_test,
        split: SplitFiles { train, test },
        resolution: [config.spacing, config.spacing, config.slice_thickness],
        crop: config.crop,
        seed: config.seed,
        deformation: field.params.clone(),
        intensity_range: range,
        config: config.clone(),
    };
    let path = out.join("manifest.json");
    io(&path, fs::write(&path, serde_json::to_string_pretty(&manifest)?))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn files(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.manifest.split.train,
            Split::Test => &self.manifest.split.test,
        }
    }

    fn read_dir(&self, dir: PathBuf, split: Split) -> Result<Vec<Image>> {
        if !dir.is_dir() {
            return Err(Error::format(
                &dir,
                "missing directory; expected the dataset layout domain_{a,b}/{train,test}, \
                 gt_b_aligned/test, gt_a_deformed/test",
            ));
        }
        self.files(split)
            .iter()
            .map(|f| read_png(&dir.join(f), self.manifest.intensity_range))
            .collect()
    }

    pub fn load(&self, domain: Domain, split: Split) -> Result<Vec<Image>> {
        self.read_dir(self.root.join(domain.dir()).join(split.dir()), split)
    }

    pub fn load_reference(&self, which: Reference) -> Result<Vec<Image>> {
        self.read_dir(self.root.join(which.dir()).join("test"), Split::Test)
    }
}

/// Pair order for one epoch: both domains are shuffled independently and the
/// result never pairs equal indices. The epoch covers the larger domain; the
/// smaller one wraps around.
pub fn unpaired_order<R: Rng + ?Sized>(n_a: usize, n_b: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::Config("both domains need at least one image".into()));
    }
    if n_a == 1 && n_b == 1 {
        return Err(Error::Config(
            "cannot avoid index-matched pairs with one image per domain".into(),
        ));
    }
    let mut pa: Vec<usize> = (0..n_a).collect();
    let mut pb: Vec<usize> = (0..n_b).collect();
    pa.shuffle(rng);
    pb.shuffle(rng);
    let len = n_a.max(n_b);
    let sa: Vec<usize> = (0..len).map(|i| pa[i % n_a]).collect();
    let mut sb: Vec<usize> = (0..len).map(|i| pb[i % n_b]).collect();
    for i in 0..len {
        if sa[i] != sb[i] {
            continue;
        }
        let j = (0..len)
            .map(|k| (i + 1 + k) % len)
            .find(|&j| sb[j] != sa[i] && sb[i] != sa[j])
            .ok_or_else(|| Error::Config("no unpaired ordering exists".into()))?;
        sb.swap(i, j);
    }
    Ok(sa.into_iter().zip(sb).collect())
}
