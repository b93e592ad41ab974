//! Prediction-space coordinates for tracked features.
//!
//! Each feature is described by seven numbers: IMU rate and acceleration
//! magnitudes over the inter-frame window, patch entropy, whole-image blur,
//! a sparse optical-flow variance score, and low/high band magnitudes of the
//! patch spectrum.

use std::hash::{Hash, Hasher};

use nalgebra::Vector2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImuSample;
use crate::image::{to_f64, GrayImage};

pub const PREDICTOR_DIM: usize = 7;

/// Column names used whenever predictor vectors are written as CSV.
pub const PREDICTOR_COLUMNS: [&str; PREDICTOR_DIM] = ["w_mag", "a_mag", "entropy", "blur", "flow_var", "f_low", "f_high"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Side of the square patch used for entropy and spectrum terms.
    pub patch_size: usize,
    pub entropy_bins: usize,
    /// Box filter length of the re-blur comparison.
    pub blur_kernel: usize,
    pub flow_small_radius: f64,
    pub flow_large_radius: f64,
    /// Added to both region variances before taking logs (px²).
    pub flow_variance_floor: f64,
    /// Low/high band split as a fraction of the Nyquist frequency.
    pub fft_cutoff: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            entropy_bins: 256,
            blur_kernel: 9,
            flow_small_radius: 25.0,
            flow_large_radius: 100.0,
            flow_variance_floor: 1e-6,
            fft_cutoff: 0.25,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_size >= 2
            && self.entropy_bins >= 2
            && self.blur_kernel >= 2
            && self.flow_small_radius > 0.0
            && self.flow_large_radius > self.flow_small_radius
            && self.flow_variance_floor > 0.0
            && self.fft_cutoff > 0.0
            && self.fft_cutoff < 1.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid predictor config {self:?}")));
        }
        Ok(())
    }

    /// Stable fingerprint stored in trained models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::default();
        self.patch_size.hash(&mut h);
        self.entropy_bins.hash(&mut h);
        self.blur_kernel.hash(&mut h);
        self.flow_small_radius.to_bits().hash(&mut h);
        self.flow_large_radius.to_bits().hash(&mut h);
        self.flow_variance_floor.to_bits().hash(&mut h);
        self.fft_cutoff.to_bits().hash(&mut h);
        h.finish()
    }
}

/// FNV-1a; used for fingerprints and file checksums that must not change
/// between builds.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// A point in prediction space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorVector(pub [f64; PREDICTOR_DIM]);

impl PredictorVector {
    pub fn assemble(imu: ImuMagnitudes, terms: ImageTerms, flow_score: f64) -> Self {
        PredictorVector([
            imu.angular_rate,
            imu.acceleration,
            terms.entropy,
            terms.blur,
            flow_score,
            terms.f_low,
            terms.f_high,
        ])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn angular_rate(&self) -> f64 {
        self.0[0]
    }
    pub fn acceleration(&self) -> f64 {
        self.0[1]
    }
    pub fn entropy(&self) -> f64 {
        self.0[2]
    }
    pub fn blur(&self) -> f64 {
        self.0[3]
    }
    pub fn flow_score(&self) -> f64 {
        self.0[4]
    }
    pub fn f_low(&self) -> f64 {
        self.0[5]
    }
    pub fn f_high(&self) -> f64 {
        self.0[6]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuMagnitudes {
    pub angular_rate: f64,
    pub acceleration: f64,
}

/// Norms of the mean angular velocity and mean specific force.
pub fn imu_magnitudes(window: &[ImuSample]) -> Result<ImuMagnitudes> {
    if window.is_empty() {
        return Err(Error::EmptyInput("IMU window has no samples"));
    }
    let n = window.len() as f64;
    let w = window.iter().map(|s| s.omega).sum::<nalgebra::Vector3<f64>>() / n;
    let a = window.iter().map(|s| s.accel).sum::<nalgebra::Vector3<f64>>() / n;
    Ok(ImuMagnitudes {
        angular_rate: w.norm(),
        acceleration: a.norm(),
    })
}

/// Square window of intensities in `[0, 255]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::LengthMismatch {
                expected: size * size,
                found: data.len(),
            });
        }
        Ok(Self { size, data })
    }

    /// Window of side `size` centred near `(u, v)`, shifted as needed to lie
    /// inside the image.
    pub fn extract(image: &GrayImage, u: f64, v: f64, size: usize) -> Result<Self> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if size > w || size > h {
            return Err(Error::InvalidParameter(format!("patch of {size} px does not fit a {w}x{h} image")));
        }
        let origin = |c: f64, n: usize| {
            let start = (c.round() as i64) - (size as i64) / 2;
            start.clamp(0, (n - size) as i64) as usize
        };
        let (x0, y0) = (origin(u, w), origin(v, h));
        let raw = image.as_raw();
        let mut data = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            data.extend(raw[y * w + x0..y * w + x0 + size].iter().map(|&p| f64::from(p)));
        }
        Ok(Self { size, data })
    }
}

/// Shannon entropy (bits) of the intensity histogram with `bins` equal bins
/// over `[0, 256)`.
pub fn patch_entropy(patch: &Patch, bins: usize) -> f64 {
    let bins = bins.max(2);
    let mut counts = vec![0usize; bins];
    for &v in &patch.data {
        let k = ((v.clamp(0.0, 255.999_999) * bins as f64) / 256.0) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    let total = patch.data.len() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let s: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    s.max(0.0)
}

/// No-reference blur estimate in `[0, 1]`, larger meaning blurrier.
///
/// The image is re-blurred with a horizontal and a vertical box filter; the
/// score is the fraction of neighbouring-pixel variation that survives
/// re-blurring, taking the worse of the two directions. A sharp image loses
/// much of its variation (score near 0); an already blurred one barely
/// changes (score near 1).
pub fn blur_metric(image: &GrayImage) -> Result<f64> {
    blur_metric_with(image, PredictorConfig::default().blur_kernel)
}

pub fn blur_metric_with(image: &GrayImage, kernel: usize) -> Result<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < 3 || h < 3 {
        return Err(Error::InvalidParameter(format!("blur metric needs at least 3x3 pixels, got {w}x{h}")));
    }
    let f = to_f64(image);
    let kernel = kernel.max(2) as i64;
    let lo = -(kernel - 1) / 2;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;

    // Box means along each axis with replicated borders. The pixels are
    // integers, so the running sums are exact.
    let k = kernel as usize;
    let mut blur_h = vec![0.0; w * h];
    for y in 0..h {
        let row = &f[y * w..(y + 1) * w];
        let mut sum: f64 = (lo..lo + kernel).map(|i| row[clamp(i, w)]).sum();
        for x in 0..w {
            blur_h[y * w + x] = sum / kernel as f64;
            let x = x as i64;
            sum += row[clamp(x + lo + kernel, w)] - row[clamp(x + lo, w)];
        }
    }
    let mut blur_v = vec![0.0; w * h];
    let mut sum = vec![0.0; w];
    for i in lo..lo + kernel {
        let r = clamp(i, h);
        sum.iter_mut().zip(&f[r * w..(r + 1) * w]).for_each(|(s, v)| *s += v);
    }
    for y in 0..h {
        blur_v[y * w..(y + 1) * w].iter_mut().zip(&sum).for_each(|(b, s)| *b = s / k as f64);
        let (add, sub) = (clamp(y as i64 + lo + kernel, h), clamp(y as i64 + lo, h));
        for x in 0..w {
            sum[x] += f[add * w + x] - f[sub * w + x];
        }
    }

    let (mut s_fv, mut s_vv, mut s_fh, mut s_vh) = (0.0, 0.0, 0.0, 0.0);
    for y in 1..h {
        for x in 1..w {
            let i = y * w + x;
            let d_fv = (f[i] - f[i - w]).abs();
            let d_bv = (blur_v[i] - blur_v[i - w]).abs();
            let d_fh = (f[i] - f[i - 1]).abs();
            let d_bh = (blur_h[i] - blur_h[i - 1]).abs();
            s_fv += d_fv;
            s_vv += (d_fv - d_bv).max(0.0);
            s_fh += d_fh;
            s_vh += (d_fh - d_bh).max(0.0);
        }
    }
    let ratio = |s_f: f64, s_v: f64| (s_f > 0.0).then(|| ((s_f - s_v) / s_f).clamp(0.0, 1.0));
    Ok(match (ratio(s_fv, s_vv), ratio(s_fh, s_vh)) {
        (Some(a), Some(b)) => a.max(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 1.0,
    })
}

/// Sparse flow sample: left-image displacement of one track between frames,
/// anchored at its position in the later frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowVector {
    pub position: Vector2<f64>,
    pub flow: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowScore {
    pub score: f64,
    /// False when either region held fewer than two vectors; the score is
    /// then reported as zero.
    pub sufficient: bool,
}

/// Mean of the horizontal and vertical flow variances within `radius` of
/// `center`, plus the number of vectors used.
fn region_variance(flows: &[FlowVector], center: &Vector2<f64>, radius: f64) -> (f64, usize) {
    let r2 = radius * radius;
    let inside: Vec<&FlowVector> = flows.iter().filter(|f| (f.position - center).norm_squared() <= r2).collect();
    let n = inside.len();
    if n < 2 {
        return (0.0, n);
    }
    let nf = n as f64;
    let mean = inside.iter().map(|f| f.flow).sum::<Vector2<f64>>() / nf;
    let (vu, vv) = inside.iter().fold((0.0, 0.0), |(vu, vv), f| {
        let d = f.flow - mean;
        (vu + d.x * d.x, vv + d.y * d.y)
    });
    (0.5 * (vu / nf + vv / nf), n)
}

/// `ln(σ̄²_small + ε) - ln(σ̄²_large + ε)` around `center`.
pub fn flow_variance_score(flows: &[FlowVector], center: &Vector2<f64>, cfg: &PredictorConfig) -> FlowScore {
    let (var_s, n_s) = region_variance(flows, center, cfg.flow_small_radius);
    let (var_l, n_l) = region_variance(flows, center, cfg.flow_large_radius);
    if n_s < 2 || n_l < 2 {
        return FlowScore {
            score: 0.0,
            sufficient: false,
        };
    }
    let eps = cfg.flow_variance_floor;
    FlowScore {
        score: (var_s + eps).ln() - (var_l + eps).ln(),
        sufficient: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpectrumBands {
    pub low: f64,
    pub high: f64,
}

thread_local! {
    // plans are cached per size inside the planner
    static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

/// Mean spectral magnitude below and above `cutoff`·Nyquist of the
/// zero-mean patch. Patches whose side is not a power of two are
/// zero-padded. The transform is scaled by `1/N` so the coefficients do not
/// grow with patch size.
pub fn frequency_coefficients(patch: &Patch, cutoff: f64) -> SpectrumBands {
    let size = patch.size;
    if size == 0 {
        return SpectrumBands::default();
    }
    let n = size.next_power_of_two();
    let mean = patch.data.iter().sum::<f64>() / patch.data.len() as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); n * n];
    for y in 0..size {
        for x in 0..size {
            buf[y * n + x] = Complex::new(patch.data[y * size + x] - mean, 0.0);
        }
    }
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n));
    // rows, transpose, rows again: the spectrum ends up transposed, which
    // the radially symmetric band split below does not care about
    fft.process(&mut buf);
    let mut transposed = vec![Complex::new(0.0, 0.0); n * n];
    for y in 0..n {
        for x in 0..n {
            transposed[x * n + y] = buf[y * n + x];
        }
    }
    fft.process(&mut transposed);
    let buf = transposed;

    let freq = |k: usize| {
        let k = k as f64;
        let n = n as f64;
        if k < n / 2.0 {
            k / n
        } else {
            (k - n) / n
        }
    };
    let rho_c = cutoff * 0.5;
    let scale = 1.0 / n as f64;
    let (mut low, mut n_low, mut high, mut n_high) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..n {
        for x in 0..n {
            let rho_sq = freq(x).powi(2) + freq(y).powi(2);
            let mag = buf[y * n + x].norm_sqr().sqrt() * scale;
            if rho_sq < rho_c * rho_c {
                low += mag;
                n_low += 1;
            } else {
                high += mag;
                n_high += 1;
            }
        }
    }
    SpectrumBands {
        low: if n_low > 0 { low / n_low as f64 } else { 0.0 },
        high: if n_high > 0 { high / n_high as f64 } else { 0.0 },
    }
}

/// Image-derived predictor terms for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImageTerms {
    pub entropy: f64,
    pub blur: f64,
    pub f_low: f64,
    pub f_high: f64,
}

/// Patch terms at `(u, v)` given the image's precomputed blur metric.
pub fn image_terms_at(image: &GrayImage, blur: f64, u: f64, v: f64, cfg: &PredictorConfig) -> Result<ImageTerms> {
    let patch = Patch::extract(image, u, v, cfg.patch_size)?;
    let bands = frequency_coefficients(&patch, cfg.fft_cutoff);
    Ok(ImageTerms {
        entropy: patch_entropy(&patch, cfg.entropy_bins),
        blur,
        f_low: bands.low,
        f_high: bands.high,
    })
}

/// Per-frame state shared by every feature of one frame pair.
#[derive(Debug, Clone)]
pub struct FramePredictors<'a> {
    image: Option<&'a GrayImage>,
    blur: f64,
    imu: ImuMagnitudes,
    flows: &'a [FlowVector],
    cfg: &'a PredictorConfig,
}

impl<'a> FramePredictors<'a> {
    pub fn new(image: Option<&'a GrayImage>, imu_window: &[ImuSample], flows: &'a [FlowVector], cfg: &'a PredictorConfig) -> Result<Self> {
        let blur = match image {
            Some(img) => blur_metric_with(img, cfg.blur_kernel)?,
            None => 0.0,
        };
        Ok(Self {
            image,
            blur,
            imu: imu_magnitudes(imu_window)?,
            flows,
            cfg,
        })
    }

    pub fn image_terms(&self, u: f64, v: f64) -> Result<Option<ImageTerms>> {
        match self.image {
            Some(img) => image_terms_at(img, self.blur, u, v, self.cfg).map(Some),
            None => Ok(None),
        }
    }

    /// Predictor vector at left-image position `(u, v)`. `external` supplies
    /// the image terms when no image is attached.
    pub fn predict(&self, u: f64, v: f64, external: Option<ImageTerms>) -> Result<PredictorVector> {
        let terms = match self.image_terms(u, v)? {
            Some(t) => t,
            None => external.ok_or_else(|| Error::Dataset(format!("no image or precomputed predictors for feature at ({u:.1}, {v:.1})")))?,
        };
        let flow = flow_variance_score(self.flows, &Vector2::new(u, v), self.cfg);
        Ok(PredictorVector::assemble(self.imu, terms, flow.score))
    }
}

/// One-off predictor vector for a single feature.
pub fn build_predictor_vector(
    position: (f64, f64),
    image: &GrayImage,
    flows: &[FlowVector],
    imu_window: &[ImuSample],
    cfg: &PredictorConfig,
) -> Result<PredictorVector> {
    FramePredictors::new(Some(image), imu_window, flows, cfg)?.predict(position.0, position.1, None)
}
