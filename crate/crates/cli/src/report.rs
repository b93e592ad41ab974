//! Machine-readable outputs. Every type here has a JSON schema under
//! `book/src/schemas/`.

use std::fmt::Write as _;

use probe_core::dataset::Dataset;
use probe_core::frontend::{path_length, DiagnosticsSummary, FrameFailure, ModeKind, PairDiagnostics, SequenceRun};
use probe_core::model::{beta_from_ratio, ProbeModel, RmseMode};
use probe_core::predictors::PREDICTOR_COLUMNS;
use serde::{Deserialize, Serialize};

/// Rounds to four decimals, the precision of the comparison table.
pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathLengthSource {
    Groundtruth,
    Estimate,
}

/// Length of the ground-truth polyline when there are at least two fixes,
/// otherwise of the estimate.
pub fn trial_length(dataset: &Dataset, estimate: &SequenceRun) -> (f64, PathLengthSource) {
    let gt: Vec<_> = dataset.groundtruth_frames().into_iter().filter_map(|k| dataset.groundtruth_at(k)).collect();
    if gt.len() >= 2 {
        (path_length(&gt), PathLengthSource::Groundtruth)
    } else {
        (path_length(&estimate.positions()), PathLengthSource::Estimate)
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trial: String,
    pub mode: ModeKind,
    pub frames: usize,
    pub estimated_frames: usize,
    pub path_length: f64,
    pub path_length_source: PathLengthSource,
    /// Mean translational error over frames with ground truth (m).
    pub armse: Option<f64>,
    /// Error at the last frame with ground truth (m).
    pub final_error: Option<f64>,
    /// Distance between first and last estimated positions (m).
    pub loop_closure_error: f64,
    /// One entry per dataset frame; null where there is no ground truth or
    /// no estimate.
    pub errors: Vec<Option<f64>>,
    pub failure: Option<FrameFailure>,
    pub features: DiagnosticsSummary,
}

impl MetricsReport {
    pub fn new(dataset: &Dataset, run: &SequenceRun) -> Self {
        let metrics = run.metrics(dataset);
        let mut errors = vec![None; dataset.frames.len()];
        if let Some(m) = &metrics {
            for &(k, e) in &m.errors {
                errors[k] = Some(e);
            }
        }
        let (path_length, path_length_source) = trial_length(dataset, run);
        Self {
            trial: dataset.name.clone(),
            mode: run.mode,
            frames: dataset.frames.len(),
            estimated_frames: run.poses.len(),
            path_length,
            path_length_source,
            armse: metrics.as_ref().map(|m| m.armse),
            final_error: metrics.as_ref().map(|m| m.final_error),
            loop_closure_error: run.loop_closure_error(),
            errors,
            failure: run.failure.clone(),
            features: run.diagnostics_summary(),
        }
    }
}

/// Contents of `diagnostics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub summary: DiagnosticsSummary,
    pub pairs: Vec<PairDiagnostics>,
}

/// One mode's columns in the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub armse: Option<f64>,
    pub final_error: Option<f64>,
    pub loop_closure_error: f64,
    pub failed_at: Option<usize>,
}

impl ModeResult {
    pub fn new(dataset: &Dataset, run: &SequenceRun) -> Self {
        let metrics = run.metrics(dataset);
        Self {
            armse: metrics.as_ref().map(|m| round4(m.armse)),
            final_error: metrics.as_ref().map(|m| round4(m.final_error)),
            loop_closure_error: round4(run.loop_closure_error()),
            failed_at: run.failure.as_ref().map(|f| f.frame),
        }
    }
}

/// Contents of `comparison.json`: one row of the trial table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub trial: String,
    pub path_length: f64,
    pub path_length_source: PathLengthSource,
    pub nominal: ModeResult,
    pub aggressive: ModeResult,
    pub probe: ModeResult,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl ComparisonReport {
    /// Fixed-width text rendering of exactly the numbers in the JSON.
    pub fn to_table(&self) -> String {
        let header = [
            "Trial",
            "Path Length (m)",
            "Nominal ARMSE",
            "Nominal Final",
            "Aggressive ARMSE",
            "Aggressive Final",
            "PROBE ARMSE",
            "PROBE Final",
        ];
        let row = [
            self.trial.clone(),
            format!("{:.4}", self.path_length),
            cell(self.nominal.armse),
            cell(self.nominal.final_error),
            cell(self.aggressive.armse),
            cell(self.aggressive.final_error),
            cell(self.probe.armse),
            cell(self.probe.final_error),
        ];
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", line(&header.map(String::from)));
        let _ = writeln!(out, "{}", line(&row));
        let failures: Vec<String> = [("nominal", &self.nominal), ("aggressive", &self.aggressive), ("probe", &self.probe)]
            .iter()
            .filter_map(|(name, m)| m.failed_at.map(|f| format!("{name} failed at frame {f}")))
            .collect();
        if !failures.is_empty() {
            let _ = writeln!(out, "{}", failures.join("; "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSample {
    /// Neighbour-mean α as a multiple of ᾱ.
    pub multiple: f64,
    pub beta: f64,
}

/// Output of `probe inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub k: usize,
    pub gamma: f64,
    pub alpha_bar: f64,
    pub theta_size: usize,
    pub mode: RmseMode,
    pub predictor_fingerprint: String,
    pub matches_current_predictors: bool,
    pub standardization: Vec<CoordinateStats>,
    pub beta_curve: Vec<BetaSample>,
}

/// Multiples of ᾱ at which the β response is sampled.
pub const BETA_CURVE_MULTIPLES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

impl InspectReport {
    pub fn new(model: &ProbeModel) -> Self {
        Self {
            k: model.k,
            gamma: model.gamma,
            alpha_bar: model.alpha_bar,
            theta_size: model.len(),
            mode: model.metadata.mode,
            predictor_fingerprint: format!("{:016x}", model.metadata.predictor_fingerprint),
            matches_current_predictors: !model.config_mismatch,
            standardization: PREDICTOR_COLUMNS
                .iter()
                .enumerate()
                .map(|(i, name)| CoordinateStats {
                    name: name.to_string(),
                    mean: model.standardization.mean[i],
                    std: model.standardization.std[i],
                })
                .collect(),
            beta_curve: BETA_CURVE_MULTIPLES
                .iter()
                .map(|&m| BetaSample {
                    multiple: m,
                    beta: beta_from_ratio(m, model.gamma),
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "K                 {}", self.k);
        let _ = writeln!(out, "gamma             {}", number(self.gamma));
        let _ = writeln!(out, "alpha_bar         {} m", number(self.alpha_bar));
        let _ = writeln!(out, "samples           {}", self.theta_size);
        let _ = writeln!(out, "training mode     {}", self.mode);
        let status = if self.matches_current_predictors { "matches current config" } else { "differs from current config" };
        let _ = writeln!(out, "predictors        {} ({status})", self.predictor_fingerprint);
        let _ = writeln!(out, "standardization");
        for c in &self.standardization {
            let _ = writeln!(out, "  {:<9} mean {:>12}  std {:>12}", c.name, format!("{:.6}", c.mean), format!("{:.6}", c.std));
        }
        let _ = writeln!(out, "beta response");
        for s in &self.beta_curve {
            let _ = writeln!(out, "  {} x alpha_bar -> {}", number(s.multiple), number(s.beta));
        }
        out
    }
}

/// Shortest round-tripping decimal, with a trailing `.0` on integers.
fn number(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        v.to_string()
    }
}
