//! Procedural multi-domain corpus of single-captured and recaptured images.
//!
//! Every domain renders content from one texture family under its own
//! colour temperature, illumination, content scale, optics and sensor noise.
//! A recapture is the same content pipeline followed by the screen artifact
//! stack: an aliased sub-pixel grid (moiré), optional blur, the screen's
//! channel gains and extra noise.

mod image;
mod io;

pub use self::image::{batch_tensor, Image};
pub use io::{load_corpus, save_corpus, MANIFEST_HEADER, MANIFEST_NAME};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("canvas {canvas}x{canvas} is smaller than twice the crop size {crop}")]
    CanvasTooSmall { canvas: usize, crop: usize },
    #[error("invalid scale factor {0}: must be >= 1 and divide the crop size")]
    ScaleFactor(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{path}: not a valid P6 image: {msg}")]
    Ppm { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_COUNT_PER_CLASS: usize = 300;
pub const DEFAULT_CANVAS: usize = 64;

pub const SINGLE_CAPTURE: usize = 0;
pub const RECAPTURE: usize = 1;
/// Scale tags of the two members of a pair.
pub const SCALE_SMALL: u8 = 0;
pub const SCALE_LARGE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureFamily {
    Gradients,
    Blobs,
    Stripes,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Gradients => "gradients",
            TextureFamily::Blobs => "blobs",
            TextureFamily::Stripes => "stripes",
        }
    }
}

/// Screen artifacts composited onto recaptured content.
#[derive(Debug, Clone, PartialEq)]
pub struct RecaptureArtifacts {
    /// Depth of the grid modulation, `0` disables it.
    pub moire_strength: f64,
    /// Screen grid frequency range in cycles per canvas pixel. Values above
    /// 0.5 alias when sampled.
    pub moire_freq: (f64, f64),
    pub blur: f64,
    pub channel_gain: [f64; 3],
    pub noise: f64,
    /// Rows of dark screen frame captured along the top edge.
    pub bezel: usize,
}

impl RecaptureArtifacts {
    pub fn none() -> Self {
        RecaptureArtifacts {
            moire_strength: 0.0,
            moire_freq: (0.6, 0.9),
            blur: 0.0,
            channel_gain: [1.0; 3],
            noise: 0.0,
            bezel: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub family: TextureFamily,
    /// Colour-temperature gains, each in `[0.5, 1.5]`.
    pub color_gain: [f64; 3],
    /// Global illumination gain in `[0.5, 1.5]`.
    pub illumination: f64,
    /// Content frequency range in cycles per pixel.
    pub freq_range: (f64, f64),
    /// Optical blur of the capturing camera, applied to both classes.
    pub camera_blur: f64,
    pub noise: f64,
    pub artifacts: RecaptureArtifacts,
}

impl DomainSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let gains = self
            .color_gain
            .iter()
            .chain(&self.artifacts.channel_gain)
            .chain(std::iter::once(&self.illumination));
        for g in gains {
            if !(0.5..=1.5).contains(g) {
                return Err(format!("domain {}: gain {g} outside [0.5, 1.5]", self.id));
            }
        }
        let (lo, hi) = self.freq_range;
        let (mlo, mhi) = self.artifacts.moire_freq;
        if lo <= 0.0 || hi < lo || mlo <= 0.0 || mhi < mlo {
            return Err(format!("domain {}: frequencies must be positive ranges", self.id));
        }
        Ok(())
    }

    /// Number of descriptive fields in which two specs differ.
    pub fn differing_fields(&self, other: &DomainSpec) -> usize {
        [
            self.family != other.family,
            self.color_gain != other.color_gain,
            self.illumination != other.illumination,
            self.freq_range != other.freq_range,
            self.camera_blur != other.camera_blur,
            self.noise != other.noise,
            self.artifacts != other.artifacts,
        ]
        .iter()
        .filter(|d| **d)
        .count()
    }
}

/// The four default domains `A`..`D`.
pub fn default_domains() -> Vec<DomainSpec> {
    let screen = |freq: (f64, f64), bezel: usize| RecaptureArtifacts {
        moire_strength: 0.30,
        moire_freq: freq,
        blur: 0.0,
        channel_gain: [1.0; 3],
        noise: 0.01,
        bezel,
    };
    vec![
        DomainSpec {
            id: "A".into(),
            family: TextureFamily::Gradients,
            color_gain: [1.10, 1.00, 0.88],
            illumination: 1.00,
            freq_range: (0.03, 0.08),
            camera_blur: 0.0,
            noise: 0.01,
            artifacts: screen((0.62, 0.72), 4),
        },
        DomainSpec {
            id: "B".into(),
            family: TextureFamily::Blobs,
            color_gain: [0.90, 1.00, 1.12],
            illumination: 0.80,
            freq_range: (0.05, 0.12),
            camera_blur: 0.3,
            noise: 0.05,
            artifacts: screen((0.66, 0.76), 0),
        },
        DomainSpec {
            id: "C".into(),
            family: TextureFamily::Stripes,
            color_gain: [1.00, 1.08, 0.95],
            illumination: 1.15,
            freq_range: (0.06, 0.14),
            camera_blur: 0.1,
            noise: 0.02,
            artifacts: screen((0.70, 0.80), 0),
        },
        DomainSpec {
            id: "D".into(),
            family: TextureFamily::Blobs,
            color_gain: [1.05, 0.92, 1.06],
            illumination: 0.92,
            freq_range: (0.08, 0.18),
            camera_blur: 0.2,
            noise: 0.08,
            artifacts: screen((0.58, 0.68), 0),
        },
    ]
}

/// Deterministic per-image generator derived from a seed and a stream id.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Canvases of one domain, in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    pub id: String,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl DomainCorpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn count_class(&self, y: usize) -> usize {
        self.labels.iter().filter(|&&l| l == y).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub domains: Vec<DomainCorpus>,
}

impl Corpus {
    pub fn domain(&self, id: &str) -> Option<&DomainCorpus> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Luminance pattern around 0.5 for one canvas.
fn render_content(family: TextureFamily, freq: (f64, f64), size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let f = uniform(rng, freq);
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut lum = vec![0.5; size * size];
    match family {
        TextureFamily::Stripes => {
            let f2 = f * rng.gen_range(0.3..0.6);
            let theta2 = rng.gen_range(0.0..PI);
            let phase2 = rng.gen_range(0.0..2.0 * PI);
            for y in 0..size {
                for x in 0..size {
                    let (xf, yf) = (x as f64, y as f64);
                    let u = xf * ct + yf * st;
                    let u2 = xf * theta2.cos() + yf * theta2.sin();
                    lum[y * size + x] += 0.22 * (2.0 * PI * f * u + phase).sin()
                        + 0.08 * (2.0 * PI * f2 * u2 + phase2).sin();
                }
            }
        }
        TextureFamily::Blobs => {
            let sigma = 1.0 / (4.0 * f);
            for _ in 0..6 {
                let cx = rng.gen_range(0.0..size as f64);
                let cy = rng.gen_range(0.0..size as f64);
                let amp = rng.gen_range(-0.3..0.3);
                let s = sigma * rng.gen_range(0.7..1.3);
                for y in 0..size {
                    for x in 0..size {
                        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        lum[y * size + x] += amp * (-r2 / (2.0 * s * s)).exp();
                    }
                }
            }
        }
        TextureFamily::Gradients => {
            let slope = rng.gen_range(0.15..0.3);
            for y in 0..size {
                for x in 0..size {
                    let (xf, yf) = (x as f64, y as f64);
                    let u = (xf * ct + yf * st) / size as f64;
                    let v = -xf * st + yf * ct;
                    lum[y * size + x] += slope * (2.0 * u - 1.0) * 0.7
                        + 0.1 * (2.0 * PI * f * v + phase).sin();
                }
            }
        }
    }
    lum
}

/// Renders one canvas of `spec` before any recapture artifacts: content,
/// colour temperature and illumination.
fn render_scene(spec: &DomainSpec, size: usize, rng: &mut impl Rng) -> Image {
    let lum = render_content(spec.family, spec.freq_range, size, rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.04..0.04));
    let mut img = Image::filled(3, size, size, 0.0);
    for c in 0..3 {
        let gain = spec.color_gain[c] * spec.illumination;
        for y in 0..size {
            for x in 0..size {
                img.set(c, y, x, (lum[y * size + x] + tint[c]) * gain);
            }
        }
    }
    img.clamp01();
    img
}

fn add_noise(img: &mut Image, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in img.data_mut() {
        *v += normal.sample(rng);
    }
}

const BEZEL_LEVEL: f64 = 0.05;

/// Composites the screen artifact stack onto `canvas`, in order: aliased
/// sub-pixel grid, 3x3 blur, channel gains, bezel rows, additive noise, clamp
/// to `[0, 1]`.
pub fn apply_recapture_artifacts(canvas: &Image, art: &RecaptureArtifacts, rng: &mut impl Rng) -> Image {
    let mut img = canvas.clone();
    if art.moire_strength > 0.0 {
        let f = uniform(rng, art.moire_freq);
        let theta = rng.gen_range(-0.25..0.25f64);
        let (ct, st) = (theta.cos(), theta.sin());
        let (px, py) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a = art.moire_strength;
        for c in 0..img.channels() {
            // sub-pixel stripes: each channel sits a third of a pitch further along
            let offset = c as f64 / 3.0;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let (xf, yf) = (x as f64, y as f64);
                    let u = xf * ct + yf * st;
                    let v = -xf * st + yf * ct;
                    let gu = 0.5 * (1.0 + (2.0 * PI * (f * u + px + offset)).cos());
                    let gv = 0.5 * (1.0 + (2.0 * PI * (f * v + py)).cos());
                    let m = 1.0 + a * (gu * gv - 0.25);
                    let old = img.get(c, y, x);
                    img.set(c, y, x, old * m);
                }
            }
        }
    }
    let mut img = img.blur3(art.blur);
    for c in 0..img.channels() {
        let g = art.channel_gain[c];
        if g != 1.0 {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let old = img.get(c, y, x);
                    img.set(c, y, x, old * g);
                }
            }
        }
    }
    for c in 0..img.channels() {
        for y in 0..art.bezel.min(img.height()) {
            for x in 0..img.width() {
                img.set(c, y, x, BEZEL_LEVEL);
            }
        }
    }
    add_noise(&mut img, art.noise, rng);
    img.clamp01();
    img
}

/// Renders `count_per_class` single captures and as many recaptures,
/// interleaved (`y = index % 2`), all `canvas_size` square and 8-bit quantised.
pub fn generate_domain(spec: &DomainSpec, count_per_class: usize, canvas_size: usize, seed: u64) -> DomainCorpus {
    let mut images = Vec::with_capacity(2 * count_per_class);
    let mut labels = Vec::with_capacity(2 * count_per_class);
    for i in 0..2 * count_per_class {
        let y = i % 2;
        let mut rng = stream_rng(seed, i as u64);
        let mut img = render_scene(spec, canvas_size, &mut rng);
        if y == RECAPTURE {
            img = apply_recapture_artifacts(&img, &spec.artifacts, &mut rng);
        }
        img = img.blur3(spec.camera_blur);
        add_noise(&mut img, spec.noise, &mut rng);
        img.quantize8();
        images.push(img);
        labels.push(y);
    }
    DomainCorpus {
        id: spec.id.clone(),
        images,
        labels,
    }
}

/// Generates every domain; domain `k` uses a seed derived from `seed` and `k`.
pub fn generate_corpus(specs: &[DomainSpec], count_per_class: usize, canvas_size: usize, seed: u64) -> Corpus {
    Corpus {
        domains: specs
            .iter()
            .enumerate()
            .map(|(k, s)| generate_domain(s, count_per_class, canvas_size, domain_seed(seed, k)))
            .collect(),
    }
}

pub fn domain_seed(seed: u64, k: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One image at two scales: a native crop and the same crop after
/// downsampling by `factor` and bilinear upsampling back.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePair {
    pub large: Image,
    pub small: Image,
    pub y: usize,
    pub domain: usize,
}

/// A single image with its labels, as consumed by the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub y: usize,
    pub domain: usize,
    pub scale_tag: u8,
}

impl ScalePair {
    pub fn into_samples(self) -> [Sample; 2] {
        [
            Sample {
                image: self.large,
                y: self.y,
                domain: self.domain,
                scale_tag: SCALE_LARGE,
            },
            Sample {
                image: self.small,
                y: self.y,
                domain: self.domain,
                scale_tag: SCALE_SMALL,
            },
        ]
    }
}

/// Random crop of `crop` pixels plus its degraded copy.
pub fn make_scale_pair(
    canvas: &Image,
    crop: usize,
    factor: usize,
    y: usize,
    domain: usize,
    rng: &mut impl Rng,
) -> Result<ScalePair> {
    let size = canvas.height().min(canvas.width());
    if size < 2 * crop {
        return Err(SynthError::CanvasTooSmall { canvas: size, crop });
    }
    if factor == 0 || crop % factor != 0 {
        return Err(SynthError::ScaleFactor(factor));
    }
    let top = rng.gen_range(0..=canvas.height() - crop);
    let left = rng.gen_range(0..=canvas.width() - crop);
    let large = canvas.crop(top, left, crop, crop);
    let small = if factor == 1 {
        large.clone()
    } else {
        large.downsample(factor).resize_bilinear(crop, crop)
    };
    Ok(ScalePair {
        large,
        small,
        y,
        domain,
    })
}
