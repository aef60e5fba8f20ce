//! Reproducible synthetic mixed-domain live/spoof datasets.
//!
//! Every image is a parametric "face proxy" (a smooth radial luminance blob)
//! composited over a striped background, then passed through a per-domain
//! style transform (hue rotation, brightness gain, sensor noise). Spoof samples
//! carry an additive high-frequency moiré pattern and an all-zero depth target;
//! live samples carry a radial depth bump peaking at the blob centre.
//!
//! Images are stored channel-planar as `[R, G, B, H, S, V]`, each plane `H × W`,
//! values in `[0, 1]`.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const IMAGE_CHANNELS: usize = 6;
pub const SPOOF: u8 = 0;
pub const LIVE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundFrequency {
    Low,
    Mid,
    High,
}

impl BackgroundFrequency {
    /// Stripe frequency in cycles per image width.
    pub fn cycles(self) -> f64 {
        match self {
            BackgroundFrequency::Low => 1.0,
            BackgroundFrequency::Mid => 3.0,
            BackgroundFrequency::High => 6.0,
        }
    }
}

/// Capture conditions of one latent domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub hue_shift: f64,
    pub brightness_gain: f64,
    pub background_frequency: BackgroundFrequency,
    pub noise_sigma: f64,
    /// Orientation in radians of the medium-specific spoof stripes. Attack
    /// media differ per capture setup, so only part of the spoof cue is
    /// shared across domains.
    #[serde(default, alias = "moire_angle")]
    pub medium_angle: f64,
}

impl DomainStyle {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.hue_shift) {
            return Err(invalid("hue_shift", format!("{} not in [0,1)", self.hue_shift)));
        }
        if !(0.5..=1.5).contains(&self.brightness_gain) {
            return Err(invalid(
                "brightness_gain",
                format!("{} not in [0.5,1.5]", self.brightness_gain),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma", format!("{} is negative", self.noise_sigma)));
        }
        if !self.medium_angle.is_finite() {
            return Err(invalid("medium_angle", "not finite".into()));
        }
        Ok(())
    }
}

fn invalid(field: &'static str, reason: String) -> Error {
    Error::InvalidSpec { field, reason }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_latent_domains: usize,
    pub samples_per_domain: usize,
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    #[serde(default = "default_depth_size")]
    pub depth_size: (usize, usize),
    pub domain_styles: Vec<DomainStyle>,
    #[serde(default)]
    pub held_out_domain_styles: Vec<DomainStyle>,
    /// Samples generated per held-out style; defaults to `samples_per_domain`.
    #[serde(default)]
    pub held_out_samples_per_domain: Option<usize>,
    pub seed: u64,
}

fn default_image_size() -> (usize, usize) {
    (32, 32)
}

fn default_depth_size() -> (usize, usize) {
    (8, 8)
}

impl DatasetSpec {
    /// Three separable source domains plus one unseen style, 800 samples per
    /// source domain (2,400 training samples).
    pub fn desk_default(seed: u64) -> Self {
        use BackgroundFrequency::*;
        let style = |hue_shift, brightness_gain, background_frequency, noise_sigma, medium_angle| {
            DomainStyle {
                hue_shift,
                brightness_gain,
                background_frequency,
                noise_sigma,
                medium_angle,
            }
        };
        DatasetSpec {
            num_latent_domains: 3,
            samples_per_domain: 800,
            image_size: default_image_size(),
            depth_size: default_depth_size(),
            domain_styles: vec![
                style(0.0, 1.0, Low, 0.02, 0.0),
                style(0.33, 0.7, Mid, 0.04, 0.6),
                style(0.66, 1.3, High, 0.01, 1.2),
            ],
            held_out_domain_styles: vec![style(0.16, 0.85, Mid, 0.03, 2.0)],
            held_out_samples_per_domain: Some(400),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_latent_domains == 0 {
            return Err(invalid("num_latent_domains", "must be positive".into()));
        }
        if self.samples_per_domain < 2 {
            return Err(invalid(
                "samples_per_domain",
                "must be at least 2 so every domain holds both classes".into(),
            ));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(invalid("image_size", format!("{h}x{w} is below 16x16")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(invalid(
                "image_size",
                format!("{h}x{w}: both sides must be multiples of 8 (three 2x2 pools)"),
            ));
        }
        if self.depth_size.0 == 0 || self.depth_size.1 == 0 {
            return Err(invalid("depth_size", "must be positive".into()));
        }
        if self.domain_styles.len() != self.num_latent_domains {
            return Err(invalid(
                "domain_styles",
                format!(
                    "{} styles for {} latent domains",
                    self.domain_styles.len(),
                    self.num_latent_domains
                ),
            ));
        }
        if self.held_out_samples_per_domain == Some(1) || self.held_out_samples_per_domain == Some(0)
        {
            return Err(invalid(
                "held_out_samples_per_domain",
                "must be at least 2".into(),
            ));
        }
        let all: Vec<&DomainStyle> = self
            .domain_styles
            .iter()
            .chain(&self.held_out_domain_styles)
            .collect();
        for s in &all {
            s.validate()?;
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i] == all[j] {
                    return Err(invalid(
                        "domain_styles",
                        format!("domains {i} and {j} share identical style parameters"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        IMAGE_CHANNELS * self.image_size.0 * self.image_size.1
    }

    pub fn depth_len(&self) -> usize {
        self.depth_size.0 * self.depth_size.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    /// `6 × H × W`, channel-planar.
    pub image: Vec<f32>,
    pub label: u8,
    pub depth: Vec<f32>,
    /// Ground-truth domain index; diagnostics only. Held-out styles are
    /// numbered after the source domains.
    pub latent_domain: usize,
    /// Pseudo domain in `1..=K`, `None` until the first clustering pass.
    pub pseudo_domain: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub source: Vec<Sample>,
    pub held_out: Vec<Sample>,
}

impl Dataset {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (IMAGE_CHANNELS, self.spec.image_size.0, self.spec.image_size.1)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.source.iter().map(|s| s.label).collect()
    }

    pub fn pseudo_domains(&self) -> Option<Vec<usize>> {
        self.source.iter().map(|s| s.pseudo_domain).collect()
    }

    pub fn latent_domains(&self) -> Vec<usize> {
        self.source.iter().map(|s| s.latent_domain).collect()
    }
}

static HSV_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

fn clamp_unit(x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) && !HSV_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("rgb_to_hsv: input {x} outside [0,1], clamping");
    }
    x.clamp(0.0, 1.0)
}

/// RGB → HSV for one pixel; hue in `[0, 1)`.
pub fn rgb_to_hsv_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (r, g, b) = (clamp_unit(r), clamp_unit(g), clamp_unit(b));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = sector / 6.0;
    if h >= 1.0 {
        h -= 1.0;
    }
    (h, s, v)
}

pub fn hsv_to_rgb_pixel(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Converts a channel-planar `3 × H × W` RGB image to HSV, same layout.
pub fn rgb_to_hsv(rgb: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    let n = height * width;
    if rgb.len() != 3 * n {
        return Err(Error::shape("rgb_to_hsv", 3 * n, rgb.len()));
    }
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv_pixel(rgb[i], rgb[n + i], rgb[2 * n + i]);
        out[i] = h;
        out[n + i] = s;
        out[2 * n + i] = v;
    }
    Ok(out)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut source = Vec::with_capacity(spec.num_latent_domains * spec.samples_per_domain);
    for (d, style) in spec.domain_styles.iter().enumerate() {
        for k in 0..spec.samples_per_domain {
            let id = source.len();
            source.push(generate_sample(spec, style, d, k, id, Split::Source));
        }
    }
    let per_held_out = spec
        .held_out_samples_per_domain
        .unwrap_or(spec.samples_per_domain);
    let mut held_out = Vec::new();
    for (j, style) in spec.held_out_domain_styles.iter().enumerate() {
        let d = spec.num_latent_domains + j;
        for k in 0..per_held_out {
            let id = source.len() + held_out.len();
            held_out.push(generate_sample(spec, style, d, k, id, Split::HeldOut));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        source,
        held_out,
    })
}

const SKIN: [f64; 3] = [0.85, 0.62, 0.50];
const BACKDROP: [f64; 3] = [0.45, 0.50, 0.58];
// Spoof cues, in pixel units so they look the same at every resolution: a
// recapture grid common to all attacks plus oriented stripes whose angle
// depends on the attack medium of the domain.
const GRID_PERIOD_PX: f64 = 3.0;
const GRID_AMPLITUDE: f64 = 0.03;
const STRIPE_PERIOD_PX: f64 = 4.0;
const STRIPE_AMPLITUDE: f64 = 0.06;

fn generate_sample(
    spec: &DatasetSpec,
    style: &DomainStyle,
    domain: usize,
    index: usize,
    id: usize,
    split: Split,
) -> Sample {
    let mut rng = rng::stream(spec.seed, Stream::Dataset, &[domain as u64, index as u64]);
    let (h, w) = spec.image_size;
    let n = h * w;
    let label = if index % 2 == 0 { LIVE } else { SPOOF };

    let cx = 0.5 + rng.random_range(-0.08..0.08);
    let cy = 0.5 + rng.random_range(-0.08..0.08);
    let radius = 0.28 * rng.random_range(0.9..1.1);
    let stripe_angle: f64 = 0.5 + rng.random_range(-0.1..0.1);
    let stripe_phase: f64 = rng.random_range(-0.3..0.3);
    let grid_phase: (f64, f64) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let medium_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let cycles = style.background_frequency.cycles();
    let (sa, ca) = stripe_angle.sin_cos();
    let (ma, mc) = style.medium_angle.sin_cos();

    let mut rgb = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let d2 = ((u - cx).powi(2) + (v - cy).powi(2)) / (radius * radius);
            let mask = 1.0 / (1.0 + ((d2.sqrt() - 1.0) * 10.0).exp());
            let shade = 0.55 + 0.45 * (-0.8 * d2).exp();
            let stripe = (std::f64::consts::TAU * cycles * (u * ca + v * sa) + stripe_phase).sin();
            let bg_level = 0.5 + 0.25 * (1.0 + stripe);
            let mut moire = 0.0;
            if label == SPOOF {
                let (px, py) = (x as f64, y as f64);
                let tau = std::f64::consts::TAU;
                moire = GRID_AMPLITUDE
                    * (tau * px / GRID_PERIOD_PX + grid_phase.0).cos()
                    * (tau * py / GRID_PERIOD_PX + grid_phase.1).cos()
                    + STRIPE_AMPLITUDE
                        * (tau * (px * mc + py * ma) / STRIPE_PERIOD_PX + medium_phase).sin();
            }
            for c in 0..3 {
                let face = SKIN[c] * shade;
                let bg = BACKDROP[c] * bg_level;
                rgb[c * n + y * w + x] = (mask * face + (1.0 - mask) * bg + moire).clamp(0.0, 1.0);
            }
        }
    }

    // Domain style: hue rotation and brightness in HSV space, then sensor noise.
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("noise sigma checked");
    for i in 0..n {
        let (hh, ss, vv) = rgb_to_hsv_pixel(rgb[i], rgb[n + i], rgb[2 * n + i]);
        let hh = (hh + style.hue_shift).rem_euclid(1.0);
        let vv = (vv * style.brightness_gain).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb_pixel(hh, ss, vv);
        for (c, val) in [r, g, b].into_iter().enumerate() {
            let e = if style.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            rgb[c * n + i] = (val + e).clamp(0.0, 1.0);
        }
    }
    let hsv = rgb_to_hsv(&rgb, h, w).expect("shape is consistent");
    let image: Vec<f32> = rgb.iter().chain(&hsv).map(|&x| x as f32).collect();

    let (dh, dw) = spec.depth_size;
    let mut depth = vec![0.0f32; dh * dw];
    if label == LIVE {
        for y in 0..dh {
            for x in 0..dw {
                let u = (x as f64 + 0.5) / dw as f64;
                let v = (y as f64 + 0.5) / dh as f64;
                let d2 = ((u - cx).powi(2) + (v - cy).powi(2)) / (radius * radius);
                depth[y * dw + x] = (-1.5 * d2).exp() as f32;
            }
        }
    }

    Sample {
        id,
        split,
        image,
        label,
        depth,
        latent_domain: domain,
        pseudo_domain: None,
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.f32";
pub const DEPTH_FILE: &str = "depth.f32";
pub const LABELS_FILE: &str = "labels.u8";

#[derive(Debug, Serialize, Deserialize)]
struct BlobInfo {
    file: String,
    dtype: String,
    /// Values per sample; sample `i` starts at byte `i * values_per_sample * width`.
    values_per_sample: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    id: usize,
    split: Split,
    label: u8,
    latent_domain: usize,
    #[serde(default)]
    pseudo_domain: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    spec: DatasetSpec,
    num_samples: usize,
    images: BlobInfo,
    depth: BlobInfo,
    labels: BlobInfo,
    samples: Vec<SampleMeta>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let all: Vec<&Sample> = dataset.source.iter().chain(&dataset.held_out).collect();
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        num_samples: all.len(),
        images: BlobInfo {
            file: IMAGES_FILE.into(),
            dtype: "f32le".into(),
            values_per_sample: dataset.spec.image_len(),
        },
        depth: BlobInfo {
            file: DEPTH_FILE.into(),
            dtype: "f32le".into(),
            values_per_sample: dataset.spec.depth_len(),
        },
        labels: BlobInfo {
            file: LABELS_FILE.into(),
            dtype: "u8".into(),
            values_per_sample: 1,
        },
        samples: all
            .iter()
            .map(|s| SampleMeta {
                id: s.id,
                split: s.split,
                label: s.label,
                latent_domain: s.latent_domain,
                pseudo_domain: s.pseudo_domain,
            })
            .collect(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

    write_f32_blob(&dir.join(IMAGES_FILE), all.iter().map(|s| s.image.as_slice()))?;
    write_f32_blob(&dir.join(DEPTH_FILE), all.iter().map(|s| s.depth.as_slice()))?;
    let lpath = dir.join(LABELS_FILE);
    let labels: Vec<u8> = all.iter().map(|s| s.label).collect();
    fs::write(&lpath, labels).map_err(|e| Error::io(&lpath, e))?;
    Ok(())
}

pub(crate) fn write_f32_blob<'a>(
    path: &Path,
    chunks: impl Iterator<Item = &'a [f32]>,
) -> Result<()> {
    let mut buf = Vec::new();
    for chunk in chunks {
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_blob(dir: &Path, info: &BlobInfo, width: usize, count: usize) -> Result<Vec<u8>> {
    let path = dir.join(&info.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let per = info.values_per_sample * width;
    let expected = per * count;
    if bytes.len() != expected {
        let sample = if per == 0 { 0 } else { bytes.len().min(expected) / per };
        return Err(Error::BlobSize {
            blob: info.file.clone(),
            expected,
            actual: bytes.len(),
            sample,
        });
    }
    Ok(bytes)
}

fn f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| Error::Manifest {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let corrupt = |reason: String| Error::Manifest {
        path: mpath.clone(),
        reason,
    };
    if manifest.samples.len() != manifest.num_samples {
        return Err(corrupt(format!(
            "num_samples = {} but {} sample records",
            manifest.num_samples,
            manifest.samples.len()
        )));
    }
    if manifest.images.values_per_sample != manifest.spec.image_len()
        || manifest.depth.values_per_sample != manifest.spec.depth_len()
    {
        return Err(corrupt("blob sample width disagrees with spec".into()));
    }
    let n = manifest.num_samples;
    let images = read_blob(dir, &manifest.images, 4, n)?;
    let depth = read_blob(dir, &manifest.depth, 4, n)?;
    let labels = read_blob(dir, &manifest.labels, 1, n)?;
    let il = manifest.images.values_per_sample * 4;
    let dl = manifest.depth.values_per_sample * 4;

    let mut source = Vec::new();
    let mut held_out = Vec::new();
    for (i, meta) in manifest.samples.iter().enumerate() {
        if labels[i] != meta.label {
            return Err(corrupt(format!(
                "sample {i}: label blob says {} but manifest says {}",
                labels[i], meta.label
            )));
        }
        let sample = Sample {
            id: meta.id,
            split: meta.split,
            image: f32_le(&images[i * il..(i + 1) * il]),
            label: meta.label,
            depth: f32_le(&depth[i * dl..(i + 1) * dl]),
            latent_domain: meta.latent_domain,
            pseudo_domain: meta.pseudo_domain,
        };
        match meta.split {
            Split::Source => source.push(sample),
            Split::HeldOut => held_out.push(sample),
        }
    }
    Ok(Dataset {
        spec: manifest.spec,
        source,
        held_out,
    })
}
