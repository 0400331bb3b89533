//! BN activation traces and distribution-shift measures between them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 128;

/// Output of one BN layer on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub name: String,
    pub depth: usize,
    pub output: Tensor,
}

/// Post-BN outputs of every BN layer, in network depth order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub entries: Vec<TraceEntry>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDivergence {
    pub name: String,
    pub depth: usize,
    pub jsd: f64,
}

/// One JSD value per BN layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DivergenceProfile {
    pub layers: Vec<LayerDivergence>,
}

impl DivergenceProfile {
    /// Mean JSD over the layers whose names satisfy `pred`.
    pub fn mean_where(&self, pred: impl Fn(&str) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self.layers.iter().filter(|l| pred(&l.name)).map(|l| l.jsd).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,depth,jsd\n");
        for l in &self.layers {
            writeln!(s, "{},{},{:.10}", l.name, l.depth, l.jsd).expect("write to string");
        }
        s
    }
}

const NORMALIZATION_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], label: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("{label} has negative or non-finite mass")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("{label} sums to {total}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits between two normalized histograms.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("jsd", format!("{} vs {} bins", p.len(), q.len())));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / m).log2();
        }
        if b > 0.0 {
            kl_q += b * (b / m).log2();
        }
    }
    Ok((0.5 * kl_p + 0.5 * kl_q).clamp(0.0, 1.0))
}

/// Normalized histogram over `bins` equal-width bins spanning `[lo, hi]`.
/// The top edge belongs to the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    assert!(bins >= 1 && !values.is_empty());
    let mut h = vec![0.0; bins];
    let width = hi - lo;
    for &v in values {
        let idx = if width > 0.0 { (((v - lo) / width) * bins as f64).floor() as isize } else { 0 };
        h[idx.clamp(0, bins as isize - 1) as usize] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// JSD between the pooled value distributions of two samples over shared edges.
pub fn pooled_jsd(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(Error::invalid("pooled_jsd needs samples and at least one bin"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid("non-finite activations"));
    }
    jsd(&histogram(a, lo, hi, bins), &histogram(b, lo, hi, bins))
}

fn check_aligned(a: &ActivationTrace, b: &ActivationTrace) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("layer_divergence", format!("{} vs {} traced layers", a.len(), b.len())));
    }
    for (ea, eb) in a.entries.iter().zip(&b.entries) {
        if ea.name != eb.name || ea.output.shape() != eb.output.shape() {
            return Err(Error::shape(
                "layer_divergence",
                format!("{} {:?} vs {} {:?}", ea.name, ea.output.shape(), eb.name, eb.output.shape()),
            ));
        }
    }
    Ok(())
}

/// Per-layer JSD with all samples, channels, and positions of a layer pooled.
pub fn layer_divergence(a: &ActivationTrace, b: &ActivationTrace, bins: usize) -> Result<DivergenceProfile> {
    check_aligned(a, b)?;
    let layers = a
        .entries
        .iter()
        .zip(&b.entries)
        .map(|(ea, eb)| {
            Ok(LayerDivergence {
                name: ea.name.clone(),
                depth: ea.depth,
                jsd: pooled_jsd(ea.output.data(), eb.output.data(), bins)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DivergenceProfile { layers })
}

/// Values of channel `c` of an `N×C×…` tensor.
pub fn channel_values(t: &Tensor, c: usize) -> Vec<f64> {
    let s = t.shape();
    let (n, ch) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(n * inner);
    for i in 0..n {
        let base = (i * ch + c) * inner;
        out.extend_from_slice(&t.data()[base..base + inner]);
    }
    out
}

/// Per-layer, per-channel JSD values, for finer-grained views than the pooled profile.
pub fn channel_divergence(a: &ActivationTrace, b: &ActivationTrace, bins: usize) -> Result<Vec<(String, Vec<f64>)>> {
    check_aligned(a, b)?;
    a.entries
        .iter()
        .zip(&b.entries)
        .map(|(ea, eb)| {
            let channels = ea.output.shape().get(1).copied().unwrap_or(1);
            let per = (0..channels)
                .map(|c| pooled_jsd(&channel_values(&ea.output, c), &channel_values(&eb.output, c), bins))
                .collect::<Result<Vec<_>>>()?;
            Ok((ea.name.clone(), per))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule `1.06·σ̂·n^(−1/5)`.
    Auto,
    Fixed(f64),
}

fn sample_sd(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("KDE needs at least 2 samples"));
    }
    let sd = sample_sd(samples);
    if !(sd > 0.0) {
        return Err(Error::invalid("samples have zero spread; add a small jitter before estimating a density"));
    }
    Ok(1.06 * sd * (samples.len() as f64).powf(-0.2))
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn kde(samples: &[f64], grid: &[f64], bandwidth: Bandwidth) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::invalid("KDE needs at least 2 samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("KDE samples must be finite"));
    }
    let h = match bandwidth {
        Bandwidth::Auto => silverman_bandwidth(samples)?,
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::invalid(format!("bandwidth must be positive, got {h}"))),
    };
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            norm * samples
                .iter()
                .map(|&s| {
                    let z = (g - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect())
}

/// Evenly spaced grid covering every sample plus four bandwidths either side.
pub fn kde_grid(samples: &[f64], h: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2);
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

pub fn trapezoid(grid: &[f64], y: &[f64]) -> f64 {
    grid.windows(2).zip(y.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

/// Density curves of one layer for two traces on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKde {
    pub name: String,
    pub grid: Vec<f64>,
    pub density_a: Vec<f64>,
    pub density_b: Vec<f64>,
}

impl LayerKde {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid,density_a,density_b\n");
        for ((g, a), b) in self.grid.iter().zip(&self.density_a).zip(&self.density_b) {
            writeln!(s, "{g:.10},{a:.10},{b:.10}").expect("write to string");
        }
        s
    }
}

/// KDE curves for every layer, pooled like [`layer_divergence`].
pub fn layer_kdes(a: &ActivationTrace, b: &ActivationTrace, points: usize) -> Result<Vec<LayerKde>> {
    check_aligned(a, b)?;
    a.entries
        .iter()
        .zip(&b.entries)
        .map(|(ea, eb)| {
            let (xa, xb) = (ea.output.data(), eb.output.data());
            let ha = silverman_bandwidth(xa)?;
            let hb = silverman_bandwidth(xb)?;
            let joint: Vec<f64> = xa.iter().chain(xb).copied().collect();
            let grid = kde_grid(&joint, ha.max(hb), points);
            Ok(LayerKde {
                name: ea.name.clone(),
                density_a: kde(xa, &grid, Bandwidth::Fixed(ha))?,
                density_b: kde(xb, &grid, Bandwidth::Fixed(hb))?,
                grid,
            })
        })
        .collect()
}

/// Writes `divergence_profile.csv` and one `kde_layer_<name>.csv` per layer into `dir`.
pub fn export(dir: &Path, profile: &DivergenceProfile, kdes: &[LayerKde]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("divergence_profile.csv"), profile.to_csv())?;
    for k in kdes {
        let safe: String = k.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '_' }).collect();
        fs::write(dir.join(format!("kde_layer_{safe}.csv")), k.to_csv())?;
    }
    Ok(())
}
