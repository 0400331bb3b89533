//! Synthetic multi-domain two-view benchmark, preprocessing, augmentation,
//! and training batch composition.
//!
//! Every breast is one patient with one study and two views (CC, MLO) that
//! render the same latent lesion. A domain applies
//! `gain·max(p, 0)^gamma + offset + N(0, noise_sigma)` to every pixel; the
//! latent scene and the noise come from separate seeded streams so two
//! domains sharing a seed differ only by that transform.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Side, View};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Mixes a master seed with a stream index into an independent seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Intensity profile of a scanner domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Salt mixed into the master seed; domains with equal salts share latent scenes.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.01
}

impl DomainSpec {
    pub fn reference(name: &str) -> Self {
        DomainSpec { name: name.into(), gain: 1.0, offset: 0.0, gamma: 1.0, noise_sigma: default_noise(), seed: 0 }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let d: DomainSpec = toml::from_str(s)?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!("domain name {:?} must be non-empty [A-Za-z0-9_-]", self.name)));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Config(format!("gain must be positive, got {}", self.gain)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) || !self.offset.is_finite() {
            return Err(Error::Config("noise_sigma must be non-negative and offset finite".into()));
        }
        Ok(())
    }

    /// The noiseless part of the transform.
    pub fn map_pixel(&self, p: f64) -> f64 {
        self.gain * p.max(0.0).powf(self.gamma) + self.offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Negative,
    Benign,
    Malignant,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Negative, ClassLabel::Benign, ClassLabel::Malignant];

    /// Multi-label target over (benign, malignant).
    pub fn targets(self) -> [f64; 2] {
        match self {
            ClassLabel::Negative => [0.0, 0.0],
            ClassLabel::Benign => [1.0, 0.0],
            ClassLabel::Malignant => [0.0, 1.0],
        }
    }

    pub fn is_malignant(self) -> bool {
        self == ClassLabel::Malignant
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How stored images become network inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNorm {
    /// Full preprocessing, ending in per-image standardization.
    #[default]
    Standardize,
    /// Orientation, background suppression, and resizing only; intensities keep their scale.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub patient_id: u64,
    pub study_id: u64,
    pub side: Side,
    pub view: View,
    pub label: ClassLabel,
    pub split: Split,
    /// `1×H×W`, after the domain transform.
    pub image: Tensor,
}

/// Breast counts per class; every breast contributes a CC and an MLO image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenCounts {
    pub negative: usize,
    pub benign: usize,
    pub malignant: usize,
}

impl Default for GenCounts {
    /// 1250 breasts, 2500 images: 2000 train / 250 val / 250 test.
    fn default() -> Self {
        GenCounts { negative: 500, benign: 375, malignant: 375 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub counts: GenCounts,
    /// Fraction of patients held out for validation, and again for test.
    pub holdout_fraction: f64,
    pub input_norm: InputNorm,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { image_size: 64, counts: GenCounts::default(), holdout_fraction: 0.1, input_norm: InputNorm::Standardize }
    }
}

/// One domain's records plus how to feed them to a network.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: DomainSpec,
    pub image_size: usize,
    pub input_norm: InputNorm,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
}

// ----- rendering -------------------------------------------------------------

#[derive(Clone, Debug)]
struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

#[derive(Clone, Debug)]
struct Lesion {
    cy: f64,
    cx: f64,
    radius: f64,
    amp: f64,
    /// `(harmonic, relative amplitude, phase)` of the boundary.
    lobes: Vec<(f64, f64, f64)>,
    /// `(angle, length)` of radiating spicules.
    spicules: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
struct BreastLatent {
    ry: f64,
    rx: f64,
    base: f64,
    waves: Vec<Wave>,
    lesion: Option<Lesion>,
}

fn sample_latent(class: ClassLabel, size: usize, rng: &mut ChaCha8Rng) -> BreastLatent {
    let s = size as f64;
    let ry = rng.random_range(0.36..0.46) * s;
    let rx = rng.random_range(0.6..0.85) * s;
    let waves = (0..6)
        .map(|_| {
            let period = rng.random_range(6.0..20.0) * s / 64.0;
            let dir = rng.random_range(0.0..PI);
            Wave {
                fy: 2.0 * PI / period * dir.sin(),
                fx: 2.0 * PI / period * dir.cos(),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: rng.random_range(0.01..0.03),
            }
        })
        .collect();
    let lesion = (class != ClassLabel::Negative).then(|| {
        let scale = s / 64.0;
        let cy = s / 2.0 + rng.random_range(-0.5..0.5) * ry;
        let cx = rng.random_range(0.25..0.6) * rx;
        let amp = rng.random_range(0.25..0.4);
        if class == ClassLabel::Malignant {
            let radius = rng.random_range(2.5..4.5) * scale;
            let lobes = [3.0, 5.0, 7.0].iter().map(|&k| (k, rng.random_range(0.1..0.25), rng.random_range(0.0..2.0 * PI))).collect();
            let n_spic = rng.random_range(6..10);
            let spicules = (0..n_spic)
                .map(|j| {
                    let a = 2.0 * PI * j as f64 / n_spic as f64 + rng.random_range(-0.3..0.3);
                    (a, rng.random_range(5.0..10.0) * scale)
                })
                .collect();
            Lesion { cy, cx, radius, amp, lobes, spicules }
        } else {
            let radius = rng.random_range(3.0..5.5) * scale;
            Lesion { cy, cx, radius, amp, lobes: Vec::new(), spicules: Vec::new() }
        }
    });
    BreastLatent { ry, rx, base: rng.random_range(0.3..0.4), waves, lesion }
}

fn smoothstep(edge_width: f64, signed_dist: f64) -> f64 {
    (signed_dist / edge_width + 0.5).clamp(0.0, 1.0)
}

/// Renders one view of a latent breast, left-oriented, values ≥ 0.
fn render_view(lat: &BreastLatent, view: View, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let stretch = if view == View::Mlo { 1.08 } else { 1.0 };
    let (ry, rx) = (lat.ry, (lat.rx * stretch).min(0.95 * s));
    let jitter = 2.0 * s / 64.0;
    let lesion = lat.lesion.as_ref().map(|l| {
        let mut l = l.clone();
        l.cy += rng.random_range(-jitter..jitter);
        l.cx = (l.cx * stretch + rng.random_range(-jitter..jitter)).max(l.radius);
        l
    });
    let phase_shift = rng.random_range(0.0..0.6);
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let ey = (py - s / 2.0) / ry;
            let ex = px / rx;
            let r = (ey * ey + ex * ex).sqrt();
            let mask = smoothstep(2.0 / ry.min(rx), 1.0 - r);
            if mask <= 0.0 {
                continue;
            }
            let mut v = lat.base;
            for w in &lat.waves {
                v += w.amp * (w.fy * py + w.fx * px + w.phase + phase_shift).cos();
            }
            if let Some(l) = &lesion {
                v += lesion_intensity(l, py, px);
            }
            img[y * size + x] = (mask * v).max(0.0);
        }
    }
    img
}

fn lesion_intensity(l: &Lesion, py: f64, px: f64) -> f64 {
    let (dy, dx) = (py - l.cy, px - l.cx);
    let r = (dy * dy + dx * dx).sqrt();
    let theta = dy.atan2(dx);
    let boundary = l.radius * (1.0 + l.lobes.iter().map(|(k, a, p)| a * (k * theta + p).cos()).sum::<f64>());
    let mut v = l.amp * smoothstep(1.2, boundary - r);
    for &(a, len) in &l.spicules {
        let (uy, ux) = (a.sin(), a.cos());
        let t = dy * uy + dx * ux;
        if t <= 0.0 || t > l.radius + len {
            continue;
        }
        let perp = (dy * ux - dx * uy).abs();
        let taper = 1.0 - t / (l.radius + len);
        v = v.max(0.8 * l.amp * taper * smoothstep(1.0, 0.7 - perp));
    }
    v
}

fn mirror(img: &mut [f64], h: usize, w: usize) {
    for row in img.chunks_mut(w).take(h) {
        row.reverse();
    }
}

/// Generates one domain. Patients are split 80/10/10 by default; validation
/// and test hold balanced benign/malignant breasts, negatives train only.
pub fn generate(domain: &DomainSpec, cfg: &GenConfig, master_seed: u64) -> Result<DomainDataset> {
    domain.validate()?;
    let GenCounts { negative, benign, malignant } = cfg.counts;
    if cfg.image_size < 32 {
        return Err(Error::Config(format!("image_size must be at least 32, got {}", cfg.image_size)));
    }
    if negative == 0 || benign == 0 || malignant == 0 {
        return Err(Error::Config("every class needs at least one breast".into()));
    }
    if !(0.0..0.5).contains(&cfg.holdout_fraction) {
        return Err(Error::Config(format!("holdout_fraction must lie in [0, 0.5), got {}", cfg.holdout_fraction)));
    }
    let total = negative + benign + malignant;
    let holdout = (cfg.holdout_fraction * total as f64).round() as usize;
    let (hold_b, hold_m) = (holdout / 2, holdout - holdout / 2);
    if 2 * hold_b >= benign || 2 * hold_m >= malignant {
        return Err(Error::Config(format!(
            "{benign} benign / {malignant} malignant breasts cannot fill two balanced holdout splits of {holdout}"
        )));
    }
    let seed = derive_seed(master_seed, domain.seed);
    let mut classes: Vec<ClassLabel> = Vec::with_capacity(total);
    classes.extend(std::iter::repeat_n(ClassLabel::Negative, negative));
    classes.extend(std::iter::repeat_n(ClassLabel::Benign, benign));
    classes.extend(std::iter::repeat_n(ClassLabel::Malignant, malignant));
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut split_rng);
    let mut splits = vec![Split::Train; total];
    let mut taken = HashMap::new();
    for &i in &order {
        let (quota_val, quota_test) = match classes[i] {
            ClassLabel::Negative => continue,
            ClassLabel::Benign => (hold_b, hold_b),
            ClassLabel::Malignant => (hold_m, hold_m),
        };
        let n = taken.entry(classes[i]).or_insert(0usize);
        if *n < quota_val {
            splits[i] = Split::Val;
        } else if *n < quota_val + quota_test {
            splits[i] = Split::Test;
        }
        *n += 1;
    }

    let size = cfg.image_size;
    let noise = Normal::new(0.0, domain.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut records = Vec::with_capacity(2 * total);
    for (pid, (&class, &split)) in classes.iter().zip(&splits).enumerate() {
        let mut latent_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * pid as u64));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * pid as u64 + 1));
        let latent = sample_latent(class, size, &mut latent_rng);
        let side = if latent_rng.random_bool(0.5) { Side::L } else { Side::R };
        for view in [View::Cc, View::Mlo] {
            let mut img = render_view(&latent, view, size, &mut latent_rng);
            if side == Side::R {
                mirror(&mut img, size, size);
            }
            for p in &mut img {
                let n = if domain.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                *p = domain.map_pixel(*p) + n;
            }
            records.push(SampleRecord {
                patient_id: pid as u64,
                study_id: 0,
                side,
                view,
                label: class,
                split,
                image: Tensor::new(vec![1, size, size], img)?,
            });
        }
    }
    records.shuffle(&mut split_rng);
    Ok(DomainDataset { domain: domain.clone(), image_size: size, input_norm: cfg.input_norm, seed: master_seed, records })
}

// ----- preprocessing ---------------------------------------------------------

fn plane_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape("preprocess", format!("expected a single-channel image, got {s:?}"))),
    }
}

/// Bilinear resampling (pixel-center aligned) to `out_h×out_w`.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), c - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Relative height above the image floor that counts as object.
pub const OBJECT_THRESHOLD: f64 = 0.05;

/// Orients the object to the left, suppresses background outside the object's
/// bounding box, resizes to `size×size`, and optionally standardizes.
pub fn preprocess(image: &Tensor, size: usize, norm: InputNorm) -> Result<Tensor> {
    let (h, w) = plane_dims(image)?;
    let mut px = image.data().to_vec();
    let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Data("image has zero variance or non-finite pixels".into()));
    }
    let half = w / 2;
    let (mut left, mut right) = (0.0, 0.0);
    for row in px.chunks(w) {
        left += row[..half].iter().map(|v| v - lo).sum::<f64>();
        right += row[w - half..].iter().map(|v| v - lo).sum::<f64>();
    }
    if right > left {
        mirror(&mut px, h, w);
    }
    let cut = lo + OBJECT_THRESHOLD * (hi - lo);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if px[y * w + x] > cut {
                (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if y < y0 || y > y1 || x < x0 || x > x1 {
                px[y * w + x] = lo;
            }
        }
    }
    let mut out = resize_bilinear(&px, h, w, size, size);
    if norm == InputNorm::Standardize {
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Data("image has zero variance after resizing".into()));
        }
        let sd = var.sqrt();
        out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    Tensor::new(vec![1, size, size], out)
}

/// Percentile of unsorted data with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (s.len() - 1) as f64;
    let (i, j) = (rank.floor() as usize, rank.ceil() as usize);
    s[i] + (s[j] - s[i]) * (rank - i as f64)
}

/// For images whose maximum exceeds `threshold`: zero everything outside the
/// bounding box of nonzero pixels, subtract the `low_pct` percentile, and clip
/// at the shifted `high_pct` percentile. Other images pass through unchanged.
pub fn histogram_fix(image: &Tensor, threshold: f64, low_pct: f64, high_pct: f64) -> Result<Tensor> {
    if !(0.0 < low_pct && low_pct < high_pct && high_pct <= 100.0) {
        return Err(Error::invalid(format!("percentiles must satisfy 0 < {low_pct} < {high_pct} <= 100")));
    }
    let max = image.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= threshold {
        return Ok(image.clone());
    }
    let (h, w) = plane_dims(image)?;
    let mut px = image.data().to_vec();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if px[y * w + x] != 0.0 {
                (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if y < y0 || y > y1 || x < x0 || x > x1 {
                px[y * w + x] = 0.0;
            }
        }
    }
    let low = percentile(&px, low_pct);
    let high = percentile(&px, high_pct) - low;
    px.iter_mut().for_each(|v| *v = (*v - low).min(high));
    Tensor::new(image.shape().to_vec(), px)
}

// ----- augmentation ----------------------------------------------------------

/// Random affine + flip + noise settings, torchvision `RandomAffine` semantics:
/// `translate = (a, b)` bounds horizontal shifts by `a·W` and vertical by `b·H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub flip_p: f64,
    pub rotation_deg: f64,
    pub translate: (f64, f64),
    pub shear_deg: f64,
    pub scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.005,
            flip_p: 0.5,
            rotation_deg: 15.0,
            translate: (0.0, 0.1),
            shear_deg: 25.0,
            scale: (0.8, 1.6),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { noise_sigma: 0.0, flip_p: 0.0, rotation_deg: 0.0, translate: (0.0, 0.0), shear_deg: 0.0, scale: (1.0, 1.0) }
    }
}

fn sym_range<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Applies one random draw of the augmentation to a `1×H×W` image. Geometry
/// uses bilinear sampling with zero fill.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let (h, w) = plane_dims(image)?;
    let mut px = image.data().to_vec();
    if cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p.min(1.0)) {
        mirror(&mut px, h, w);
    }
    let angle = sym_range(rng, cfg.rotation_deg).to_radians();
    let tx = sym_range(rng, cfg.translate.0 * w as f64);
    let ty = sym_range(rng, cfg.translate.1 * h as f64);
    let shear = sym_range(rng, cfg.shear_deg).to_radians();
    let scale = if cfg.scale.1 > cfg.scale.0 { rng.random_range(cfg.scale.0..=cfg.scale.1) } else { cfg.scale.0 };
    let geometric = angle != 0.0 || tx != 0.0 || ty != 0.0 || shear != 0.0 || scale != 1.0;
    if geometric {
        // Forward map about the centre: M = T·R(angle)·Shear_x·S; sample with M⁻¹.
        let (c, s) = (angle.cos(), angle.sin());
        let sh = shear.tan();
        let (a, b, cc, d) = (scale * c, scale * (c * sh - s), scale * s, scale * (s * sh + c));
        let det = a * d - b * cc;
        let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let src = px.clone();
        let at = |y: isize, x: isize| if y < 0 || x < 0 || y >= h as isize || x >= w as isize { 0.0 } else { src[y as usize * w + x as usize] };
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy - ty, x as f64 - cx - tx);
                let sx = ia * dx + ib * dy + cx;
                let sy = ic * dx + id * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                px[y * w + x] = (at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx) * (1.0 - fy)
                    + (at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx) * fy;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        px.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    Tensor::new(image.shape().to_vec(), px)
}

// ----- storage ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub patient_id: u64,
    pub study_id: u64,
    pub side: Side,
    pub view: View,
    pub label: ClassLabel,
    pub split: Split,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub image_size: usize,
    pub input_norm: InputNorm,
    pub domain: DomainSpec,
    pub records: Vec<RecordMeta>,
}

impl DatasetManifest {
    /// Parses and checks structural invariants: valid domain, safe file
    /// names, paired views with agreeing labels, one split per patient.
    pub fn from_json(s: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.image_size < 1 {
            return Err(Error::Data("image_size must be positive".into()));
        }
        for r in &self.records {
            let ok = !r.file.is_empty()
                && !r.file.starts_with('.')
                && r.file.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.');
            if !ok {
                return Err(Error::Data(format!("unsafe image file name {:?}", r.file)));
            }
        }
        let views: Vec<(u64, u64, Side, View, ClassLabel, Split)> =
            self.records.iter().map(|r| (r.patient_id, r.study_id, r.side, r.view, r.label, r.split)).collect();
        check_pairing(&views)
    }
}

fn check_pairing(views: &[(u64, u64, Side, View, ClassLabel, Split)]) -> Result<()> {
    let mut breasts: HashMap<(u64, u64, Side), (u8, u8, ClassLabel)> = HashMap::new();
    let mut patient_split: HashMap<u64, Split> = HashMap::new();
    for &(pid, sid, side, view, label, split) in views {
        if *patient_split.entry(pid).or_insert(split) != split {
            return Err(Error::Data(format!("patient {pid} appears in more than one split")));
        }
        let e = breasts.entry((pid, sid, side)).or_insert((0, 0, label));
        if e.2 != label {
            return Err(Error::Data(format!("views of breast ({pid}, {sid}, {side:?}) disagree on the label")));
        }
        match view {
            View::Cc => e.0 += 1,
            View::Mlo => e.1 += 1,
        }
    }
    for (key, (cc, mlo, _)) in breasts {
        if cc != 1 || mlo != 1 {
            return Err(Error::Data(format!("breast {key:?} has {cc} CC and {mlo} MLO views")));
        }
    }
    Ok(())
}

impl DomainDataset {
    pub fn name(&self) -> &str {
        &self.domain.name
    }

    pub fn validate(&self) -> Result<()> {
        let views: Vec<_> = self.records.iter().map(|r| (r.patient_id, r.study_id, r.side, r.view, r.label, r.split)).collect();
        check_pairing(&views)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Network inputs for every record, in record order.
    pub fn prepared(&self, size: usize) -> Result<Vec<Tensor>> {
        self.records.iter().map(|r| preprocess(&r.image, size, self.input_norm)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let mut metas = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let file = format!("{i:06}.bnst");
            r.image.write_bnst(&dir.join("images").join(&file))?;
            metas.push(RecordMeta {
                patient_id: r.patient_id,
                study_id: r.study_id,
                side: r.side,
                view: r.view,
                label: r.label,
                split: r.split,
                file,
            });
        }
        let manifest = DatasetManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            image_size: self.image_size,
            input_norm: self.input_norm,
            domain: self.domain.clone(),
            records: metas,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let m = DatasetManifest::from_json(&text)?;
        let mut records = Vec::with_capacity(m.records.len());
        for r in m.records {
            let image = Tensor::read_bnst(&dir.join("images").join(&r.file))?;
            if image.shape() != [1, m.image_size, m.image_size] {
                return Err(Error::Data(format!("{} has shape {:?}", r.file, image.shape())));
            }
            records.push(SampleRecord {
                patient_id: r.patient_id,
                study_id: r.study_id,
                side: r.side,
                view: r.view,
                label: r.label,
                split: r.split,
                image,
            });
        }
        Ok(DomainDataset { domain: m.domain, image_size: m.image_size, input_norm: m.input_norm, seed: m.seed, records })
    }
}

// ----- batch composition -----------------------------------------------------

/// A record of one dataset among several pooled ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRef {
    pub dataset: usize,
    pub record: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// 2 benign, 2 malignant, 4 negative source images.
    Classification,
    /// The classification batch plus 8 target images carrying only domain labels.
    Adversarial,
}

pub const CLASS_BATCH: [(ClassLabel, usize); 3] = [(ClassLabel::Benign, 2), (ClassLabel::Malignant, 2), (ClassLabel::Negative, 4)];
pub const TARGET_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub image: ImageRef,
    pub label: ClassLabel,
    pub domain: DomainLabel,
}

/// Draws class-balanced batches from shuffled per-class queues. An exhausted
/// queue is reshuffled and refilled (sampling with replacement across epochs).
pub struct BatchComposer {
    pools: HashMap<ClassLabel, Vec<ImageRef>>,
    queues: HashMap<ClassLabel, Vec<ImageRef>>,
    target_pool: Vec<ImageRef>,
    target_queue: Vec<ImageRef>,
    rng: ChaCha8Rng,
}

impl BatchComposer {
    /// `source` lists `(dataset index, record labels)` of training records to
    /// pool; `target` lists the target-domain training records.
    pub fn new(source: Vec<(ImageRef, ClassLabel)>, target: Vec<ImageRef>, seed: u64) -> Result<Self> {
        let mut pools: HashMap<ClassLabel, Vec<ImageRef>> = HashMap::new();
        for (r, c) in source {
            pools.entry(c).or_default().push(r);
        }
        for (c, _) in CLASS_BATCH {
            if pools.get(&c).is_none_or(|p| p.is_empty()) {
                return Err(Error::Data(format!("no {c:?} training images available for batch composition")));
            }
        }
        Ok(BatchComposer {
            pools,
            queues: HashMap::new(),
            target_pool: target,
            target_queue: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw(pool: &[ImageRef], queue: &mut Vec<ImageRef>, rng: &mut ChaCha8Rng, what: &str) -> ImageRef {
        if queue.is_empty() {
            queue.extend_from_slice(pool);
            queue.shuffle(rng);
            queue.reverse();
            info!("refilling {what} queue with {} images", pool.len());
        }
        queue.pop().expect("refilled queue")
    }

    pub fn compose(&mut self, phase: Phase) -> Result<Vec<BatchItem>> {
        let mut out = Vec::with_capacity(16);
        for (class, n) in CLASS_BATCH {
            let pool = &self.pools[&class];
            let queue = self.queues.entry(class).or_default();
            for _ in 0..n {
                let image = Self::draw(pool, queue, &mut self.rng, &format!("{class:?}"));
                out.push(BatchItem { image, label: class, domain: DomainLabel::Source });
            }
        }
        if phase == Phase::Adversarial {
            if self.target_pool.is_empty() {
                return Err(Error::Data("adversarial batches need target images".into()));
            }
            for _ in 0..TARGET_BATCH {
                let image = Self::draw(&self.target_pool, &mut self.target_queue, &mut self.rng, "target");
                out.push(BatchItem { image, label: ClassLabel::Negative, domain: DomainLabel::Target });
            }
        }
        Ok(out)
    }
}

/// Training records of `datasets`, tagged with their dataset index.
pub fn training_pool(datasets: &[&DomainDataset]) -> Vec<(ImageRef, ClassLabel)> {
    datasets
        .iter()
        .enumerate()
        .flat_map(|(d, ds)| {
            ds.records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.split == Split::Train)
                .map(move |(i, r)| (ImageRef { dataset: d, record: i }, r.label))
        })
        .collect()
}

/// Patients per split, for leakage checks.
pub fn patients_by_split(ds: &DomainDataset) -> HashMap<Split, HashSet<u64>> {
    let mut m: HashMap<Split, HashSet<u64>> = HashMap::new();
    for r in &ds.records {
        m.entry(r.split).or_default().insert(r.patient_id);
    }
    m
}
