//! On-disk sequence layout and its in-memory form.
//!
//! A dataset directory holds
//!
//! ```text
//! calib.json            camera intrinsics, IMU-to-camera rotation, frame timing
//! imu.csv               t,wx,wy,wz,ax,ay,az
//! tracks.csv            frame_idx,track_id,ul,vl,ur,vr
//! images/NNNNNN.pgm     left images (optional)
//! predictors.csv        frame_idx,track_id,w_mag,...,f_high (used when images are absent)
//! groundtruth.csv       t,x,y,z in the first camera frame (optional, may be sparse)
//! ```
//!
//! Frame `k` is taken at `t0 + k / frame_rate`. Timestamps are matched with
//! a tolerance of [`TIME_EPS`] seconds so that values written in decimal
//! still land in the intended window.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImagePoint, ImuSample, Point3, RigCalibration, StereoCamera};
use crate::image::{read_pgm, write_pgm, GrayImage};
use crate::predictors::{ImageTerms, PredictorVector, PREDICTOR_COLUMNS};

pub const TIME_EPS: f64 = 1e-9;

/// Contents of `calib.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub f: f64,
    pub b: f64,
    pub cu: f64,
    pub cv: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// IMU-to-camera rotation, row-major.
    pub c_cv: [f64; 9],
    pub frame_rate: f64,
    #[serde(default)]
    pub t0: f64,
    /// Pixel noise standard deviation assumed by the estimator.
    #[serde(default = "default_sigma_px")]
    pub sigma_px: f64,
}

fn default_sigma_px() -> f64 {
    0.5
}

impl Calibration {
    pub fn camera(&self) -> Result<StereoCamera> {
        StereoCamera::new(self.f, self.b, self.cu, self.cv, self.image_width, self.image_height)
    }

    pub fn rig(&self) -> Result<RigCalibration> {
        RigCalibration::new(Matrix3::from_row_slice(&self.c_cv))
    }

    pub fn from_parts(camera: &StereoCamera, rig: &RigCalibration, frame_rate: f64, t0: f64, sigma_px: f64) -> Self {
        let c = rig.c_cv;
        Self {
            f: camera.f,
            b: camera.b,
            cu: camera.cu,
            cv: camera.cv,
            image_width: camera.image_width,
            image_height: camera.image_height,
            c_cv: [c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 0)], c[(1, 1)], c[(1, 2)], c[(2, 0)], c[(2, 1)], c[(2, 2)]],
            frame_rate,
            t0,
            sigma_px,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub track_id: u64,
    pub point: ImagePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub t: f64,
    /// Sorted by track id.
    pub observations: Vec<Observation>,
    pub image: Option<GrayImage>,
    /// Precomputed image terms keyed by track id, for datasets shipped
    /// without images.
    pub image_terms: BTreeMap<u64, ImageTerms>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedImu {
    pub t: f64,
    pub sample: ImuSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub camera: StereoCamera,
    pub rig: RigCalibration,
    pub frame_rate: f64,
    pub t0: f64,
    pub sigma_px: f64,
    pub frames: Vec<Frame>,
    /// Sorted by time.
    pub imu: Vec<TimedImu>,
    /// Ground-truth camera position per frame, where known.
    pub groundtruth: Option<Vec<Option<Point3>>>,
}

impl Dataset {
    pub fn frame_time(&self, index: usize) -> f64 {
        self.t0 + index as f64 / self.frame_rate
    }

    /// IMU samples with `t_a <= t < t_b`.
    pub fn imu_window(&self, t_a: f64, t_b: f64) -> Vec<ImuSample> {
        let start = self.imu.partition_point(|s| s.t < t_a - TIME_EPS);
        let end = self.imu.partition_point(|s| s.t < t_b - TIME_EPS);
        self.imu[start..end.max(start)].iter().map(|s| s.sample).collect()
    }

    /// Frame indices that carry ground truth, ascending.
    pub fn groundtruth_frames(&self) -> Vec<usize> {
        match &self.groundtruth {
            Some(gt) => gt.iter().enumerate().filter_map(|(i, p)| p.map(|_| i)).collect(),
            None => Vec::new(),
        }
    }

    pub fn groundtruth_at(&self, frame: usize) -> Option<Point3> {
        self.groundtruth.as_ref().and_then(|gt| gt.get(frame).copied().flatten())
    }

    pub fn has_images(&self) -> bool {
        self.frames.iter().all(|f| f.image.is_some())
    }

    pub fn calibration(&self) -> Calibration {
        Calibration::from_parts(&self.camera, &self.rig, self.frame_rate, self.t0, self.sigma_px)
    }
}

#[derive(Debug, Deserialize)]
struct ImuRow {
    t: f64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Deserialize)]
struct TrackRow {
    frame_idx: usize,
    track_id: u64,
    ul: f64,
    vl: f64,
    ur: f64,
    vr: f64,
}

#[derive(Debug, Deserialize)]
struct PredictorRow {
    frame_idx: usize,
    track_id: u64,
    #[allow(dead_code)]
    w_mag: f64,
    #[allow(dead_code)]
    a_mag: f64,
    entropy: f64,
    blur: f64,
    #[allow(dead_code)]
    flow_var: f64,
    f_low: f64,
    f_high: f64,
}

#[derive(Debug, Deserialize)]
struct GroundTruthRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::csv(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

fn finite(path: &Path, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Dataset(format!("{}: non-finite value", path.display())))
    }
}

/// Loads a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let calib_path = dir.join("calib.json");
    let text = fs::read_to_string(&calib_path).map_err(|e| Error::io(&calib_path, e))?;
    let calib: Calibration = serde_json::from_str(&text).map_err(|e| Error::json(&calib_path, e))?;
    let camera = calib.camera()?;
    let rig = calib.rig()?;
    if !(calib.frame_rate > 0.0 && calib.frame_rate.is_finite()) {
        return Err(Error::Dataset(format!("{}: frame_rate must be positive", calib_path.display())));
    }
    if !(calib.sigma_px > 0.0 && calib.sigma_px.is_finite()) {
        return Err(Error::Dataset(format!("{}: sigma_px must be positive", calib_path.display())));
    }

    let imu_path = dir.join("imu.csv");
    let imu_rows: Vec<ImuRow> = read_rows(&imu_path)?;
    let mut imu = Vec::with_capacity(imu_rows.len());
    for (i, r) in imu_rows.iter().enumerate() {
        finite(&imu_path, &[r.t, r.wx, r.wy, r.wz, r.ax, r.ay, r.az])?;
        if i > 0 && r.t <= imu_rows[i - 1].t {
            return Err(Error::Dataset(format!("{}: timestamps must increase (row {})", imu_path.display(), i + 2)));
        }
        let dt = match (imu_rows.get(i + 1), i.checked_sub(1)) {
            (Some(next), _) => next.t - r.t,
            (None, Some(prev)) => r.t - imu_rows[prev].t,
            (None, None) => 1.0 / calib.frame_rate,
        };
        imu.push(TimedImu {
            t: r.t,
            sample: ImuSample {
                omega: Vector3::new(r.wx, r.wy, r.wz),
                accel: Vector3::new(r.ax, r.ay, r.az),
                dt,
            },
        });
    }

    let tracks_path = dir.join("tracks.csv");
    let track_rows: Vec<TrackRow> = read_rows(&tracks_path)?;
    let n_frames = track_rows.iter().map(|r| r.frame_idx + 1).max().unwrap_or(0);
    if n_frames < 2 {
        return Err(Error::Dataset(format!("{}: need observations in at least two frames", tracks_path.display())));
    }
    let mut frames: Vec<Frame> = (0..n_frames)
        .map(|index| Frame {
            index,
            t: calib.t0 + index as f64 / calib.frame_rate,
            observations: Vec::new(),
            image: None,
            image_terms: BTreeMap::new(),
        })
        .collect();
    for r in &track_rows {
        finite(&tracks_path, &[r.ul, r.vl, r.ur, r.vr])?;
        frames[r.frame_idx].observations.push(Observation {
            track_id: r.track_id,
            point: ImagePoint::new(r.ul, r.vl, r.ur, r.vr),
        });
    }
    for f in &mut frames {
        f.observations.sort_by_key(|o| o.track_id);
        if let Some(w) = f.observations.windows(2).find(|w| w[0].track_id == w[1].track_id) {
            return Err(Error::Dataset(format!(
                "{}: track {} appears twice in frame {}",
                tracks_path.display(),
                w[0].track_id,
                f.index
            )));
        }
    }

    let images_dir = dir.join("images");
    if images_dir.is_dir() {
        for f in &mut frames {
            let path = images_dir.join(format!("{:06}.pgm", f.index));
            let img = read_pgm(&path)?;
            if img.width() != camera.image_width || img.height() != camera.image_height {
                return Err(Error::Dataset(format!(
                    "{}: image is {}x{}, calibration says {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    camera.image_width,
                    camera.image_height
                )));
            }
            f.image = Some(img);
        }
    } else {
        let pred_path = dir.join("predictors.csv");
        if pred_path.is_file() {
            let rows: Vec<PredictorRow> = read_rows(&pred_path)?;
            for r in rows {
                finite(&pred_path, &[r.entropy, r.blur, r.f_low, r.f_high])?;
                let frame = frames
                    .get_mut(r.frame_idx)
                    .ok_or_else(|| Error::Dataset(format!("{}: frame {} has no tracks", pred_path.display(), r.frame_idx)))?;
                frame.image_terms.insert(
                    r.track_id,
                    ImageTerms {
                        entropy: r.entropy,
                        blur: r.blur,
                        f_low: r.f_low,
                        f_high: r.f_high,
                    },
                );
            }
        }
    }

    let gt_path = dir.join("groundtruth.csv");
    let groundtruth = if gt_path.is_file() {
        let rows: Vec<GroundTruthRow> = read_rows(&gt_path)?;
        let mut gt = vec![None; n_frames];
        for r in rows {
            finite(&gt_path, &[r.t, r.x, r.y, r.z])?;
            let k = ((r.t - calib.t0) * calib.frame_rate).round();
            let t_k = calib.t0 + k / calib.frame_rate;
            if k < 0.0 || (r.t - t_k).abs() > 1e-6 {
                return Err(Error::Dataset(format!("{}: t = {} does not fall on a frame time", gt_path.display(), r.t)));
            }
            if let Some(slot) = gt.get_mut(k as usize) {
                *slot = Some(Vector3::new(r.x, r.y, r.z));
            }
        }
        Some(gt)
    } else {
        None
    };

    Ok(Dataset {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()),
        camera,
        rig,
        frame_rate: calib.frame_rate,
        t0: calib.t0,
        sigma_px: calib.sigma_px,
        frames,
        imu,
        groundtruth,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn write_record<I, T>(w: &mut csv::Writer<fs::File>, path: &Path, record: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(record).map_err(|e| Error::csv(path, e))
}

/// Writes `dataset` in the directory layout. Images are written when every
/// frame has one; otherwise `predictors` (one full vector per frame and
/// track) goes to `predictors.csv` if given.
pub fn write_dataset(dir: &Path, dataset: &Dataset, predictors: Option<&BTreeMap<(usize, u64), PredictorVector>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let calib_path = dir.join("calib.json");
    let text = serde_json::to_string_pretty(&dataset.calibration()).map_err(|e| Error::json(&calib_path, e))?;
    fs::write(&calib_path, text + "\n").map_err(|e| Error::io(&calib_path, e))?;

    let imu_path = dir.join("imu.csv");
    let mut w = csv_writer(&imu_path)?;
    write_record(&mut w, &imu_path, ["t", "wx", "wy", "wz", "ax", "ay", "az"])?;
    for s in &dataset.imu {
        let (o, a) = (s.sample.omega, s.sample.accel);
        write_record(&mut w, &imu_path, [s.t, o.x, o.y, o.z, a.x, a.y, a.z].map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&imu_path, e))?;

    let tracks_path = dir.join("tracks.csv");
    let mut w = csv_writer(&tracks_path)?;
    write_record(&mut w, &tracks_path, ["frame_idx", "track_id", "ul", "vl", "ur", "vr"])?;
    for f in &dataset.frames {
        for o in &f.observations {
            let p = o.point;
            write_record(
                &mut w,
                &tracks_path,
                [f.index.to_string(), o.track_id.to_string(), p.ul.to_string(), p.vl.to_string(), p.ur.to_string(), p.vr.to_string()],
            )?;
        }
    }
    w.flush().map_err(|e| Error::io(&tracks_path, e))?;

    if dataset.has_images() {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for f in &dataset.frames {
            write_pgm(&images_dir.join(format!("{:06}.pgm", f.index)), f.image.as_ref().expect("checked above"))?;
        }
    } else if let Some(pred) = predictors {
        let path = dir.join("predictors.csv");
        let mut w = csv_writer(&path)?;
        let mut header = vec!["frame_idx", "track_id"];
        header.extend(PREDICTOR_COLUMNS);
        write_record(&mut w, &path, header)?;
        for (&(frame, track), pi) in pred {
            let mut row = vec![frame.to_string(), track.to_string()];
            row.extend(pi.0.iter().map(|v| v.to_string()));
            write_record(&mut w, &path, row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    if let Some(gt) = &dataset.groundtruth {
        let path = dir.join("groundtruth.csv");
        let mut w = csv_writer(&path)?;
        write_record(&mut w, &path, ["t", "x", "y", "z"])?;
        for (k, p) in gt.iter().enumerate() {
            if let Some(p) = p {
                write_record(&mut w, &path, [dataset.frame_time(k), p.x, p.y, p.z].map(|v| v.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Files every dataset directory must contain.
pub const REQUIRED_FILES: [&str; 3] = ["calib.json", "imu.csv", "tracks.csv"];

pub fn missing_files(dir: &Path) -> Vec<PathBuf> {
    REQUIRED_FILES.iter().map(|f| dir.join(f)).filter(|p| !p.is_file()).collect()
}
