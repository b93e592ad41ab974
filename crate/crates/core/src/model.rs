//! The trained feature-quality model.
//!
//! A model is a bag of `(π, α)` samples in standardized prediction space.
//! At test time the `K` nearest samples to a feature's π are averaged and
//! the result, normalised by the training mean `ᾱ` and raised to `γ`,
//! becomes the covariance scale β for that feature.

use std::fmt;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, StereoCamera};
use crate::kdtree::KdTree;
use crate::predictors::{Fnv64, PredictorConfig, PredictorVector, PREDICTOR_COLUMNS, PREDICTOR_DIM};

pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 1e6;
/// Training sets whose mean error falls below this are rejected.
pub const MIN_ALPHA_BAR: f64 = 1e-9;

pub const MODEL_MAGIC: &[u8; 4] = b"PRB1";
pub const MODEL_VERSION: u32 = 1;

/// How a traversal's error is turned into α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseMode {
    /// Error of one frame-to-frame translation.
    PerStep,
    /// Error accumulated between two sparse ground-truth fixes.
    Windowed,
    /// RMSE over every ground-truth position of the traversal.
    FullPath,
    /// Gap between the first and last estimated positions of a closed path.
    LoopClosure,
}

impl RmseMode {
    fn code(self) -> u8 {
        match self {
            RmseMode::PerStep => 0,
            RmseMode::Windowed => 1,
            RmseMode::FullPath => 2,
            RmseMode::LoopClosure => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => RmseMode::PerStep,
            1 => RmseMode::Windowed,
            2 => RmseMode::FullPath,
            3 => RmseMode::LoopClosure,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RmseMode::PerStep => "per_step",
            RmseMode::Windowed => "windowed",
            RmseMode::FullPath => "full_path",
            RmseMode::LoopClosure => "loop_closure",
        }
    }
}

impl fmt::Display for RmseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Translational error of an estimated path against ground truth.
///
/// `per_step` takes exactly two positions and compares the displacements.
/// `windowed` aligns both paths at their first position and takes the RMSE
/// over the rest. `full_path` is the plain RMSE over all positions, and
/// `loop_closure` ignores `truth` and returns the start-to-end gap.
pub fn compute_rmse(estimated: &[Point3], truth: &[Point3], mode: RmseMode) -> Result<f64> {
    if mode == RmseMode::LoopClosure {
        let (Some(first), Some(last)) = (estimated.first(), estimated.last()) else {
            return Err(Error::EmptyInput("loop-closure error needs a path"));
        };
        return Ok((last - first).norm());
    }
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: estimated.len(),
        });
    }
    match mode {
        RmseMode::PerStep | RmseMode::Windowed => {
            if mode == RmseMode::PerStep && estimated.len() != 2 {
                return Err(Error::LengthMismatch {
                    expected: 2,
                    found: estimated.len(),
                });
            }
            if estimated.len() < 2 {
                return Err(Error::EmptyInput("windowed error needs at least two positions"));
            }
            let (e0, g0) = (estimated[0], truth[0]);
            let sum: f64 = estimated[1..].iter().zip(&truth[1..]).map(|(e, g)| ((e - e0) - (g - g0)).norm_squared()).sum();
            Ok((sum / (estimated.len() - 1) as f64).sqrt())
        }
        RmseMode::FullPath => {
            if estimated.is_empty() {
                return Err(Error::EmptyInput("path is empty"));
            }
            let sum: f64 = estimated.iter().zip(truth).map(|(e, g)| (e - g).norm_squared()).sum();
            Ok((sum / estimated.len() as f64).sqrt())
        }
        RmseMode::LoopClosure => unreachable!(),
    }
}

/// Per-coordinate z-scoring of prediction space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; PREDICTOR_DIM],
    pub std: [f64; PREDICTOR_DIM],
}

impl Standardization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; PREDICTOR_DIM],
            std: [1.0; PREDICTOR_DIM],
        }
    }

    /// Population statistics of `points`. Coordinates that never vary get a
    /// unit scale so they drop out of distances instead of blowing up.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a PredictorVector>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; PREDICTOR_DIM];
        let mut sum_sq = [0.0; PREDICTOR_DIM];
        let mut shift: Option<[f64; PREDICTOR_DIM]> = None;
        for p in points {
            let s = *shift.get_or_insert(p.0);
            for d in 0..PREDICTOR_DIM {
                let v = p.0[d] - s[d];
                sum[d] += v;
                sum_sq[d] += v * v;
            }
            n += 1;
        }
        let Some(shift) = shift else {
            return Err(Error::EmptyInput("no predictor vectors to standardize"));
        };
        let nf = n as f64;
        let mut out = Self::identity();
        for d in 0..PREDICTOR_DIM {
            let m = sum[d] / nf;
            let var = (sum_sq[d] / nf - m * m).max(0.0);
            out.mean[d] = m + shift[d];
            let sd = var.sqrt();
            out.std[d] = if sd > 1e-12 * (1.0 + out.mean[d].abs()) { sd } else { 1.0 };
        }
        Ok(out)
    }

    pub fn apply(&self, p: &PredictorVector) -> [f64; PREDICTOR_DIM] {
        std::array::from_fn(|d| (p.0[d] - self.mean[d]) / self.std[d])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    /// Standardized prediction-space coordinates.
    pub pi: [f64; PREDICTOR_DIM],
    pub alpha: f64,
}

/// Θ together with the statistics needed to query it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    pub standardization: Standardization,
    pub alpha_bar: f64,
    pub mode: RmseMode,
}

impl TrainingSet {
    /// Standardizes raw samples with `standardization` and checks the ᾱ
    /// guard.
    pub fn new(raw: &[(PredictorVector, f64)], standardization: Standardization, mode: RmseMode) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Training("training produced no samples".into()));
        }
        let mut samples = Vec::with_capacity(raw.len());
        for (pi, alpha) in raw {
            if !pi.is_finite() || !alpha.is_finite() || *alpha < 0.0 {
                return Err(Error::Training(format!("invalid sample π={:?} α={alpha}", pi.0)));
            }
            samples.push(TrainingSample {
                pi: standardization.apply(pi),
                alpha: *alpha,
            });
        }
        let alpha_bar = samples.iter().map(|s| s.alpha).sum::<f64>() / samples.len() as f64;
        if alpha_bar < MIN_ALPHA_BAR {
            return Err(Error::Training(format!(
                "mean training error ᾱ = {alpha_bar:e} m is below {MIN_ALPHA_BAR:e} m; the data carry no error signal"
            )));
        }
        Ok(Self {
            samples,
            standardization,
            alpha_bar,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Θ as CSV: the seven standardized coordinates followed by α.
    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = PREDICTOR_COLUMNS.to_vec();
        header.push("alpha");
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.pi.iter().map(|v| v.to_string()).collect();
            row.push(s.alpha.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Neighbour-mean α of held-out samples for every candidate K, by 5-fold
/// cross-validation. Returns the smallest K with the lowest mean squared
/// error, and the error of every candidate.
///
/// Folds are assigned round-robin by sample index. At most
/// `max_queries_per_fold` held-out samples (evenly strided) are scored per
/// fold, which bounds the cost on large sets.
pub fn select_k(set: &TrainingSet, candidates: &[usize], max_queries_per_fold: usize) -> Result<(usize, Vec<(usize, f64)>)> {
    const FOLDS: usize = 5;
    let mut ks: Vec<usize> = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::InvalidParameter("K candidates must be a non-empty list of positive integers".into()));
    }
    let n = set.len();
    let train_size = n - n.div_ceil(FOLDS);
    if ks[ks.len() - 1] > train_size {
        return Err(Error::Training(format!(
            "largest K candidate {} exceeds the {train_size} samples available per cross-validation fold",
            ks[ks.len() - 1]
        )));
    }
    if ks.len() == 1 {
        return Ok((ks[0], vec![(ks[0], f64::NAN)]));
    }
    let k_max = ks[ks.len() - 1];
    let mut sq_err = vec![0.0; ks.len()];
    let mut count = 0usize;
    for fold in 0..FOLDS {
        let (mut train_pts, mut train_alpha) = (Vec::new(), Vec::new());
        let mut held = Vec::new();
        for (i, s) in set.samples.iter().enumerate() {
            if i % FOLDS == fold {
                held.push(i);
            } else {
                train_pts.push(s.pi);
                train_alpha.push(s.alpha);
            }
        }
        if held.is_empty() {
            continue;
        }
        let tree = KdTree::build(train_pts);
        let stride = held.len().div_ceil(max_queries_per_fold.max(1));
        for &i in held.iter().step_by(stride) {
            let target = set.samples[i].alpha;
            let nbrs = tree.nearest(&set.samples[i].pi, k_max);
            let mut prefix = 0.0;
            let mut next = 0;
            for (j, nb) in nbrs.iter().enumerate() {
                prefix += train_alpha[nb.index];
                while next < ks.len() && ks[next] == j + 1 {
                    let e = prefix / (j + 1) as f64 - target;
                    sq_err[next] += e * e;
                    next += 1;
                }
            }
            count += 1;
        }
    }
    let scores: Vec<(usize, f64)> = ks.iter().zip(&sq_err).map(|(&k, &s)| (k, s / count as f64)).collect();
    let best = argmin_first(scores.iter().map(|&(_, s)| s)).expect("candidates are non-empty");
    Ok((scores[best].0, scores))
}

/// Picks the γ whose pipeline error `evaluate(γ)` is lowest, preferring the
/// smallest γ among ties. Candidates are tried in ascending order.
pub fn select_gamma(candidates: &[f64], mut evaluate: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut gammas: Vec<f64> = candidates.to_vec();
    if gammas.is_empty() || gammas.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::InvalidParameter("γ candidates must be a non-empty list of non-negative numbers".into()));
    }
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    if gammas.len() == 1 {
        return Ok((gammas[0], vec![(gammas[0], f64::NAN)]));
    }
    let mut scores = Vec::with_capacity(gammas.len());
    for &g in &gammas {
        let e = evaluate(g)?;
        log::debug!("γ = {g}: training error {e:.6} m");
        scores.push((g, if e.is_finite() { e } else { f64::INFINITY }));
    }
    let best = argmin_first(scores.iter().map(|&(_, s)| s)).expect("candidates are non-empty");
    Ok((scores[best].0, scores))
}

fn argmin_first(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Provenance stored alongside the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub camera: StereoCamera,
    pub predictor_fingerprint: u64,
    pub mode: RmseMode,
}

/// A queryable model. Immutable once built.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    tree: KdTree<PREDICTOR_DIM>,
    alphas: Vec<f64>,
    pub k: usize,
    pub gamma: f64,
    pub alpha_bar: f64,
    pub standardization: Standardization,
    pub metadata: ModelMetadata,
    /// Set by [`ProbeModel::load_checked`] when the file was trained with a
    /// different predictor configuration.
    pub config_mismatch: bool,
}

impl ProbeModel {
    pub fn new(set: &TrainingSet, k: usize, gamma: f64, metadata: ModelMetadata) -> Result<Self> {
        if k == 0 || k > set.len() {
            return Err(Error::InvalidParameter(format!("K = {k} must lie in 1..={}", set.len())));
        }
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::InvalidParameter(format!("γ = {gamma} must be finite and non-negative")));
        }
        if set.alpha_bar < MIN_ALPHA_BAR {
            return Err(Error::Training(format!("ᾱ = {:e} is below the guard", set.alpha_bar)));
        }
        Ok(Self {
            tree: KdTree::build(set.samples.iter().map(|s| s.pi).collect()),
            alphas: set.samples.iter().map(|s| s.alpha).collect(),
            k,
            gamma,
            alpha_bar: set.alpha_bar,
            standardization: set.standardization.clone(),
            metadata,
            config_mismatch: false,
        })
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Copy of the model with a different exponent.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }

    /// α values of the K nearest training samples, closest first.
    pub fn knn_query(&self, pi: &PredictorVector) -> Vec<f64> {
        let q = self.standardization.apply(pi);
        self.tree.nearest(&q, self.k).into_iter().map(|n| self.alphas[n.index]).collect()
    }

    pub fn neighbor_mean(&self, pi: &PredictorVector) -> f64 {
        let a = self.knn_query(pi);
        a.iter().sum::<f64>() / a.len() as f64
    }

    /// β for a neighbour mean, clamped to `[BETA_MIN, BETA_MAX]`.
    pub fn beta_from_mean(&self, neighbor_mean: f64) -> f64 {
        beta_from_ratio(neighbor_mean / self.alpha_bar, self.gamma)
    }

    pub fn weight(&self, pi: &PredictorVector) -> f64 {
        self.beta_from_mean(self.neighbor_mean(pi))
    }

    /// Training samples in standardized coordinates with their α.
    pub fn samples(&self) -> impl Iterator<Item = TrainingSample> + '_ {
        self.tree.points().iter().zip(&self.alphas).map(|(pi, &alpha)| TrainingSample { pi: *pi, alpha })
    }

    pub fn training_set(&self) -> TrainingSet {
        TrainingSet {
            samples: self.samples().collect(),
            standardization: self.standardization.clone(),
            alpha_bar: self.alpha_bar,
            mode: self.metadata.mode,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u64(self.k as u64);
        w.f64(self.gamma);
        w.f64(self.alpha_bar);
        w.u8(self.metadata.mode.code());
        w.u64(self.metadata.predictor_fingerprint);
        let cam = &self.metadata.camera;
        for v in [cam.f, cam.b, cam.cu, cam.cv] {
            w.f64(v);
        }
        w.u32(cam.image_width);
        w.u32(cam.image_height);
        for v in self.standardization.mean.iter().chain(&self.standardization.std) {
            w.f64(*v);
        }
        w.u64(self.alphas.len() as u64);
        for s in self.samples() {
            for v in s.pi {
                w.f64(v);
            }
            w.f64(s.alpha);
        }
        let mut h = Fnv64::default();
        h.write(&w.buf);
        let sum = h.finish();
        w.u64(sum);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 {
            return Err(Error::CorruptModel(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(Error::CorruptModel("missing PRB1 magic bytes".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = ByteReader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::ModelVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let mut h = Fnv64::default();
        h.write(body);
        let stored = u64::from_le_bytes(tail.try_into().expect("eight bytes"));
        if h.finish() != stored {
            return Err(Error::CorruptModel("checksum mismatch (truncated or modified file)".into()));
        }
        let k = r.u64()? as usize;
        let gamma = r.f64()?;
        let alpha_bar = r.f64()?;
        let mode = RmseMode::from_code(r.u8()?).ok_or_else(|| Error::CorruptModel("unknown training mode".into()))?;
        let fingerprint = r.u64()?;
        let (f, b, cu, cv) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (width, height) = (r.u32()?, r.u32()?);
        let camera = StereoCamera::new(f, b, cu, cv, width, height).map_err(|e| Error::CorruptModel(format!("camera: {e}")))?;
        let mut standardization = Standardization::identity();
        for d in 0..PREDICTOR_DIM {
            standardization.mean[d] = r.f64()?;
        }
        for d in 0..PREDICTOR_DIM {
            standardization.std[d] = r.f64()?;
        }
        let n = r.u64()? as usize;
        let expected = n
            .checked_mul((PREDICTOR_DIM + 1) * 8)
            .ok_or_else(|| Error::CorruptModel("sample count overflows".into()))?;
        if r.remaining() != expected {
            return Err(Error::CorruptModel(format!("expected {expected} bytes of samples, found {}", r.remaining())));
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pi = [0.0; PREDICTOR_DIM];
            for v in &mut pi {
                *v = r.f64()?;
            }
            samples.push(TrainingSample { pi, alpha: r.f64()? });
        }
        let set = TrainingSet {
            samples,
            standardization,
            alpha_bar,
            mode,
        };
        ProbeModel::new(
            &set,
            k,
            gamma,
            ModelMetadata {
                camera,
                predictor_fingerprint: fingerprint,
                mode,
            },
        )
        .map_err(|e| Error::CorruptModel(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a model and flags it when its predictor configuration differs
    /// from `current`.
    pub fn load_checked(path: &Path, current: &PredictorConfig) -> Result<Self> {
        let mut model = Self::load(path)?;
        if model.metadata.predictor_fingerprint != current.fingerprint() {
            log::warn!("{}: model was trained with a different predictor configuration", path.display());
            model.config_mismatch = true;
        }
        Ok(model)
    }
}

/// `clamp(ratio^γ)`. `γ = 0` always gives exactly 1.
pub fn beta_from_ratio(ratio: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 1.0;
    }
    let b = ratio.max(0.0).powf(gamma);
    if b.is_nan() {
        return BETA_MAX;
    }
    b.clamp(BETA_MIN, BETA_MAX)
}

#[derive(Default)]
struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::CorruptModel(format!("unexpected end of data at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}
