//! Sequence bundles on disk.
//!
//! ```text
//! meta.json                  rates, gravity, extrinsic, initial state
//! imu.csv                    t,wx,wy,wz,ax,ay,az
//! scans.txt                  one `t path` per scan, paths relative to the bundle
//! scans/*.xyz | *.ply        clouds in the LiDAR frame
//! groundtruth.tum            optional
//! groundtruth_velocity.txt   optional `t vx vy vz`, same timestamps as the TUM file
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use sio_core::eval::{self, Trajectory};
use sio_core::geom::{Pose, Rotation};
use sio_core::imu::{ImuSample, NavState};
use sio_core::registration::{self, PointCloud};

use crate::error::{io_err, AppError, Result};

pub const IMU_FILE: &str = "imu.csv";
pub const IMU_HEADER: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];
pub const META_FILE: &str = "meta.json";
pub const SCAN_INDEX_FILE: &str = "scans.txt";
pub const SCAN_DIR: &str = "scans";
pub const GT_FILE: &str = "groundtruth.tum";
pub const GT_VELOCITY_FILE: &str = "groundtruth_velocity.txt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub t: f64,
    /// Row-major body-to-world rotation.
    pub rotation: [[f64; 3]; 3],
    pub velocity: [f64; 3],
    pub position: [f64; 3],
}

impl From<NavState> for InitialState {
    fn from(s: NavState) -> Self {
        let r = s.rotation.matrix();
        InitialState {
            t: s.t,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            velocity: s.velocity.into(),
            position: s.position.into(),
        }
    }
}

impl InitialState {
    pub fn nav_state(&self) -> Result<NavState> {
        let m = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Ok(NavState::new(
            Rotation::new(m)?,
            Vector3::from(self.velocity),
            Vector3::from(self.position),
            self.t,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub imu_rate: f64,
    pub scan_rate: f64,
    pub gravity: [f64; 3],
    /// Row-major LiDAR-to-IMU transform, applied to clouds at ingest.
    pub extrinsic: [[f64; 4]; 4],
    /// State at the first scan; anchors pseudo-labelling and dead reckoning.
    #[serde(default)]
    pub initial_state: Option<InitialState>,
}

impl Meta {
    pub const IDENTITY_EXTRINSIC: [[f64; 4]; 4] = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn extrinsic_pose(&self) -> Result<Pose> {
        let m = Matrix4::from_fn(|i, j| self.extrinsic[i][j]);
        if (m.fixed_view::<1, 4>(3, 0) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax() > 1e-12 {
            return Err(AppError::Config("extrinsic bottom row must be [0, 0, 0, 1]".into()));
        }
        let r = Rotation::new(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Pose::new(r, m.fixed_view::<3, 1>(0, 3).into_owned()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub t: f64,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub meta: Meta,
    pub imu: Vec<ImuSample>,
    pub scans: Vec<ScanRecord>,
    pub ground_truth: Option<Trajectory>,
}

impl SequenceBundle {
    /// IMU timestamps strictly increase, scans strictly increase and every
    /// scan lies within the IMU time span.
    pub fn validate(&self) -> Result<()> {
        let (Some(first), Some(last)) = (self.imu.first(), self.imu.last()) else {
            return Err(AppError::Config("bundle has no IMU samples".into()));
        };
        if let Some(k) = self.imu.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(AppError::Config(format!("IMU timestamps not strictly increasing at sample {}", k + 1)));
        }
        if self.scans.len() < 2 {
            return Err(AppError::Config("bundle needs at least two scans".into()));
        }
        for (index, s) in self.scans.iter().enumerate() {
            let bracket = |msg: String| AppError::Bracketing { index, t: s.t, msg };
            if s.t < first.t {
                return Err(bracket(format!("precedes the first IMU sample at t = {}", first.t)));
            }
            if s.t > last.t {
                return Err(bracket(format!("follows the last IMU sample at t = {}", last.t)));
            }
            if index > 0 && !(s.t > self.scans[index - 1].t) {
                return Err(bracket("scan timestamps not strictly increasing".into()));
            }
        }
        self.meta.extrinsic_pose()?;
        Ok(())
    }

    pub fn initial_state(&self) -> Result<NavState> {
        self.meta
            .initial_state
            .ok_or_else(|| AppError::Config(format!("{META_FILE} has no initial_state")))?
            .nav_state()
    }
}

pub fn export(bundle: &SequenceBundle, dir: &Path) -> Result<()> {
    let scan_dir = dir.join(SCAN_DIR);
    fs::create_dir_all(&scan_dir).map_err(io_err(&scan_dir))?;

    let meta_path = dir.join(META_FILE);
    let meta = serde_json::to_string_pretty(&bundle.meta).map_err(|source| AppError::Json {
        path: meta_path.display().to_string(),
        source,
    })?;
    write(&meta_path, meta + "\n")?;

    let mut imu = IMU_HEADER.join(",") + "\n";
    for s in &bundle.imu {
        let _ = writeln!(
            imu,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        );
    }
    write(&dir.join(IMU_FILE), imu)?;

    let mut index = String::new();
    for (k, s) in bundle.scans.iter().enumerate() {
        let rel = format!("{SCAN_DIR}/scan_{k:06}.xyz");
        registration::write_xyz(&dir.join(&rel), &s.cloud)?;
        let _ = writeln!(index, "{:?} {rel}", s.t);
    }
    write(&dir.join(SCAN_INDEX_FILE), index)?;

    if let Some(gt) = &bundle.ground_truth {
        eval::write_tum(&dir.join(GT_FILE), gt)?;
        let mut vel = String::new();
        for s in gt.states() {
            let _ = writeln!(vel, "{:?} {:?} {:?} {:?}", s.t, s.velocity.x, s.velocity.y, s.velocity.z);
        }
        write(&dir.join(GT_VELOCITY_FILE), vel)?;
    }
    Ok(())
}

pub fn ingest(dir: &Path) -> Result<SequenceBundle> {
    let meta_path = dir.join(META_FILE);
    let meta: Meta = serde_json::from_str(&read(&meta_path)?).map_err(|source| AppError::Json {
        path: meta_path.display().to_string(),
        source,
    })?;
    let imu = read_imu_csv(&dir.join(IMU_FILE))?;
    let extrinsic = meta.extrinsic_pose()?;
    let identity = meta.extrinsic == Meta::IDENTITY_EXTRINSIC;
    let scans = read_scan_index(dir)?
        .into_iter()
        .map(|(t, path)| {
            let cloud = registration::read_cloud(&path).map_err(|e| with_path(e, &path))?;
            let cloud = if identity { cloud } else { cloud.transformed(&extrinsic) };
            Ok(ScanRecord { t, cloud })
        })
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = read_ground_truth(dir)?;
    let bundle = SequenceBundle {
        meta,
        imu,
        scans,
        ground_truth,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn with_path(e: sio_core::Error, path: &Path) -> AppError {
    match e {
        sio_core::Error::Io(source) => AppError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let name = path.display().to_string();
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_imu_csv(file, &name)
}

/// Parses IMU CSV with the exact header `t,wx,wy,wz,ax,ay,az`.
pub fn parse_imu_csv(input: impl std::io::Read, name: &str) -> Result<Vec<ImuSample>> {
    let csv_err = |line: u64, msg: String| AppError::Csv {
        path: name.to_string(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?;
    if header.iter().ne(IMU_HEADER) {
        return Err(csv_err(1, format!("expected header `{}`", IMU_HEADER.join(","))));
    }
    let mut samples: Vec<ImuSample> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let v = record
            .iter()
            .map(|cell| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_err(line, format!("bad number `{cell}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != 7 {
            return Err(csv_err(line, format!("expected 7 columns, found {}", v.len())));
        }
        if samples.last().is_some_and(|s| !(v[0] > s.t)) {
            return Err(csv_err(line, "timestamps not strictly increasing".into()));
        }
        samples.push(ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])));
    }
    if samples.is_empty() {
        return Err(csv_err(1, "no samples".into()));
    }
    Ok(samples)
}

/// `(t, absolute path)` per scan.
fn read_scan_index(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let path = dir.join(SCAN_INDEX_FILE);
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in read(&path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| AppError::Core(sio_core::Error::Parse {
            source_name: name.clone(),
            line: i + 1,
            msg,
        });
        let (t, file) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| parse_err("expected `t path`".into()))?;
        let t: f64 = t
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| parse_err(format!("bad timestamp `{t}`")))?;
        out.push((t, dir.join(file.trim())));
    }
    Ok(out)
}

fn read_ground_truth(dir: &Path) -> Result<Option<Trajectory>> {
    let tum = dir.join(GT_FILE);
    if !tum.exists() {
        return Ok(None);
    }
    let poses = eval::read_tum(&tum).map_err(|e| with_path(e, &tum))?;
    let vel_path = dir.join(GT_VELOCITY_FILE);
    if !vel_path.exists() {
        return Ok(Some(poses));
    }
    let name = vel_path.display().to_string();
    let mut velocities = Vec::new();
    for (i, line) in read(&vel_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| AppError::Core(sio_core::Error::Parse {
            source_name: name.clone(),
            line: i + 1,
            msg,
        });
        let v = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .filter(|v| v.len() == 4)
            .ok_or_else(|| parse_err("expected `t vx vy vz`".into()))?;
        velocities.push((i + 1, v));
    }
    if velocities.len() != poses.len() {
        return Err(AppError::Config(format!(
            "{name} has {} rows but {GT_FILE} has {}",
            velocities.len(),
            poses.len()
        )));
    }
    let states = poses
        .states()
        .iter()
        .zip(&velocities)
        .map(|(s, (line, v))| {
            if v[0] != s.t {
                return Err(AppError::Core(sio_core::Error::Parse {
                    source_name: name.clone(),
                    line: *line,
                    msg: format!("timestamp {} does not match {GT_FILE} ({})", v[0], s.t),
                }));
            }
            Ok(NavState {
                velocity: Vector3::new(v[1], v[2], v[3]),
                ..*s
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Trajectory::new(states)?))
}
