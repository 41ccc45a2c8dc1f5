//! The five pipeline stages and their on-disk artifacts.
//!
//! | stage        | reads                          | writes                                           |
//! |--------------|--------------------------------|--------------------------------------------------|
//! | pseudo-label | bundle                         | `pseudo_labels.txt`, `registration.txt`          |
//! | gmm-fit      | bundle                         | `gmm.ckpt`, `bic.txt`, `weights.txt`             |
//! | train        | `pseudo_labels.txt`, `gmm.ckpt`| `model.ckpt`, `loss_history.txt`                 |
//! | infer        | `model.ckpt`                   | `trajectory.tum`, `trajectory_imu.tum`, `baseline.tum` |
//! | eval         | the three trajectories, `model.ckpt`, ground truth | `metrics.json`               |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use sio_core::correction::{self, CorrectionModel, TrainItem, WindowModel};
use sio_core::eval::{self, IntervalEstimate, Trajectory};
use sio_core::imu::{self, ImuSegment, Matrix9, NavState, PreintDelta};
use sio_core::motion::{self, MotionModel, NormStats};
use sio_core::pgo::{self, CostKind, IcpEdge, ImuEdge, PoseGraph};
use sio_core::pseudolabel::{self, Scan};
use sio_core::registration::{self, IndexedCloud};

use crate::bundle::SequenceBundle;
use crate::config::{PipelineConfig, Purpose};
use crate::error::{io_err, AppError, Result};

pub const PSEUDO_LABELS: &str = "pseudo_labels.txt";
pub const REGISTRATION: &str = "registration.txt";
pub const GMM: &str = "gmm.ckpt";
pub const BIC: &str = "bic.txt";
pub const WEIGHTS: &str = "weights.txt";
pub const MODEL: &str = "model.ckpt";
pub const LOSS_HISTORY: &str = "loss_history.txt";
pub const TRAJECTORY: &str = "trajectory.tum";
pub const TRAJECTORY_IMU: &str = "trajectory_imu.tum";
pub const BASELINE: &str = "baseline.tum";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    PseudoLabel,
    GmmFit,
    Train,
    Infer,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::PseudoLabel, Stage::GmmFit, Stage::Train, Stage::Infer, Stage::Eval];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::PseudoLabel => "pseudo-label",
            Stage::GmmFit => "gmm-fit",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        }
    }
}

impl FromStr for Stage {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| AppError::Config(format!("unknown stage `{s}`")))
    }
}

/// Errors of one method against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub ape: f64,
    pub rpe: f64,
    pub rpe_count: usize,
    pub rpe_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// RPE interval, seconds.
    pub interval: f64,
    /// Raw IMU dead reckoning; RPE re-integrates raw IMU from ground truth.
    pub baseline: MethodMetrics,
    /// Corrected IMU dead reckoning; RPE re-integrates corrected IMU from ground truth.
    pub trained_imu: MethodMetrics,
    /// Adaptive PGO output; RPE over its own consecutive states.
    pub trained_pgo: MethodMetrics,
}

impl Metrics {
    /// The headline report: PGO APE with the reinitialized corrected-IMU RPE.
    pub fn report(&self) -> eval::MetricsReport {
        eval::MetricsReport {
            ape: self.trained_pgo.ape,
            rpe: self.trained_imu.rpe,
            interval: self.interval,
            count: self.trained_imu.rpe_count,
        }
    }
}

/// Bundle data shared by the stages.
pub struct Prepared {
    pub gravity: Vector3<f64>,
    pub origin: NavState,
    pub segments: Vec<ImuSegment>,
    pub scans: Vec<Scan>,
}

impl Prepared {
    pub fn new(bundle: &SequenceBundle) -> Result<Self> {
        bundle.validate()?;
        let origin = bundle.initial_state()?;
        if (origin.t - bundle.scans[0].t).abs() > eval::ASSOCIATION_TOLERANCE {
            return Err(AppError::Config(format!(
                "initial state at t = {} does not match the first scan at t = {}",
                origin.t, bundle.scans[0].t
            )));
        }
        let segments = bundle
            .scans
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                ImuSegment::from_stream(&bundle.imu, w[0].t, w[1].t).map_err(|e| AppError::Bracketing {
                    index: k,
                    t: w[0].t,
                    msg: format!("IMU segment to the next scan: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scans = bundle
            .scans
            .iter()
            .map(|s| Scan {
                t: s.t,
                cloud: IndexedCloud::new(s.cloud.clone()),
            })
            .collect();
        Ok(Prepared {
            gravity: bundle.meta.gravity(),
            origin,
            segments,
            scans,
        })
    }

    fn raw_deltas(&self) -> Vec<PreintDelta> {
        self.segments.iter().map(imu::preintegrate).collect()
    }

    fn corrected_deltas(&self, model: &WindowModel) -> Result<Vec<PreintDelta>> {
        self.segments
            .iter()
            .map(|s| corrected_delta(model, s))
            .collect()
    }

    fn dead_reckon(&self, deltas: &[PreintDelta]) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(deltas.len() + 1);
        states.push(self.origin);
        for (seg, d) in self.segments.iter().zip(deltas) {
            let prev = states[states.len() - 1];
            let mut next = imu::propagate_state(&prev, d, &self.gravity, seg.duration());
            next.t = seg.t_end();
            states.push(next);
        }
        Ok(Trajectory::new(states)?)
    }
}

fn corrected_delta(model: &WindowModel, seg: &ImuSegment) -> Result<PreintDelta> {
    let corr = model.predict(seg)?;
    Ok(imu::preintegrate_with_covariance(seg, &corr, &Matrix9::zeros())?)
}

fn require(out: &Path, name: &str, stage: Stage, producer: Stage) -> Result<PathBuf> {
    let path = out.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(AppError::MissingArtifact {
            stage: stage.as_str(),
            path,
            producer: producer.as_str(),
        })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Runs `stages` in pipeline order, writing artifacts under `out`. Returns the
/// metrics when the eval stage ran.
pub fn run_pipeline(bundle: &SequenceBundle, cfg: &PipelineConfig, stages: &[Stage], out: &Path) -> Result<Option<Metrics>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let prep = Prepared::new(bundle)?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut metrics = None;
    for stage in stages {
        log::info!("stage {}", stage.as_str());
        match stage {
            Stage::PseudoLabel => pseudo_label(&prep, cfg, out)?,
            Stage::GmmFit => gmm_fit(&prep, cfg, out)?,
            Stage::Train => train(&prep, cfg, out)?,
            Stage::Infer => infer(&prep, cfg, out)?,
            Stage::Eval => metrics = Some(evaluate(bundle, &prep, cfg, out)?),
        }
    }
    Ok(metrics)
}

pub fn pseudo_label(prep: &Prepared, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let run = pseudolabel::generate(&prep.scans, &prep.raw_deltas(), &prep.origin, &prep.gravity, &cfg.label_config())?;
    pseudolabel::write_table(&out.join(PSEUDO_LABELS), &run.origin, &run.labels)?;
    let mut text = String::from("# registration 1\n# i t0 t1 converged iterations rms correspondences T(12)\n");
    for (i, (r, l)) in run.registrations.iter().zip(&run.labels).enumerate() {
        let _ = write!(text, "{i} {:?} {:?} {} {} {:?} {}", l.t0, l.t1, r.converged, r.iterations, r.rms, r.correspondences);
        for v in r.transform.to_array12() {
            let _ = write!(text, " {v:?}");
        }
        text.push('\n');
    }
    write(&out.join(REGISTRATION), &text)
}

/// Raw window features of every segment.
fn segment_features(prep: &Prepared) -> Result<Vec<Vec<f64>>> {
    Ok(prep
        .segments
        .iter()
        .map(|s| motion::window_features(s).map(|f| f.to_vec()))
        .collect::<sio_core::Result<_>>()?)
}

fn descriptors(prep: &Prepared, stats: &NormStats, window_duration: f64) -> Result<Vec<Vec<f64>>> {
    Ok(prep
        .segments
        .iter()
        .map(|s| motion::extract_descriptor(s, stats, window_duration).map(|d| d.z))
        .collect::<sio_core::Result<_>>()?)
}

pub fn gmm_fit(prep: &Prepared, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let stats = NormStats::fit(&segment_features(prep)?)?;
    let z = descriptors(prep, &stats, cfg.window_duration)?;
    let fit = motion::fit_gmm(&z, &cfg.gmm.candidates, cfg.derived_seed(Purpose::Gmm), &cfg.em_config())?;
    let balance = motion::balance_weights(&fit.model, &z, cfg.gmm.beta)?;
    log::info!("GMM: {} components selected by BIC", fit.model.components());
    let model = MotionModel {
        stats,
        gmm: fit.model,
        beta: cfg.gmm.beta,
    };
    model.save(&out.join(GMM))?;
    write(&out.join(BIC), &motion::format_bic_table(&fit.table))?;
    let mut text = String::from("# g N_g w w_normalized\n");
    for g in 0..balance.counts.len() {
        let _ = writeln!(text, "{g} {:?} {:?} {:?}", balance.counts[g], balance.raw[g], balance.normalized[g]);
    }
    write(&out.join(WEIGHTS), &text)
}

pub fn train(prep: &Prepared, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let labels_path = require(out, PSEUDO_LABELS, Stage::Train, Stage::PseudoLabel)?;
    let gmm_path = require(out, GMM, Stage::Train, Stage::GmmFit)?;
    let (origin, labels) = pseudolabel::read_table(&labels_path)?;
    let motion_model = MotionModel::load(&gmm_path)?;
    if labels.len() != prep.segments.len() {
        return Err(AppError::Config(format!(
            "{} has {} segments but the bundle has {}",
            labels_path.display(),
            labels.len(),
            prep.segments.len()
        )));
    }
    if let Some(k) = labels
        .iter()
        .zip(&prep.segments)
        .position(|(l, s)| (l.t0 - s.t_start()).abs() > eval::ASSOCIATION_TOLERANCE || (l.t1 - s.t_end()).abs() > eval::ASSOCIATION_TOLERANCE)
    {
        return Err(AppError::Config(format!("{} segment {k} does not match the bundle's scan times", labels_path.display())));
    }

    let z = descriptors(prep, &motion_model.stats, cfg.window_duration)?;
    let balance = motion::balance_weights(&motion_model.gmm, &z, motion_model.beta)?;
    let items: Vec<TrainItem> = prep
        .segments
        .iter()
        .zip(&z)
        .enumerate()
        .map(|(k, (seg, zk))| TrainItem {
            segment: seg.clone(),
            start: if k == 0 { origin } else { labels[k - 1].state },
            label: labels[k].state,
            weight: motion::sample_weight(&motion_model.gmm, &balance, zk),
        })
        .collect();

    let model = WindowModel::new(
        cfg.train.hidden,
        motion_model.stats.clone(),
        cfg.derived_seed(Purpose::ModelInit),
        cfg.train.eta_bias,
    )?;
    let (trained, report) = correction::train(&model, &items, &prep.gravity, &cfg.train_config())?;
    log::info!(
        "training: loss {:.6e} -> {:.6e} in {} steps",
        report.initial_loss,
        report.history.last().copied().unwrap_or(report.initial_loss),
        report.steps
    );
    trained.save(&out.join(MODEL))?;
    let mut text = String::from("# epoch loss\n");
    let _ = writeln!(text, "0 {:?}", report.initial_loss);
    for (e, l) in report.history.iter().enumerate() {
        let _ = writeln!(text, "{} {l:?}", e + 1);
    }
    write(&out.join(LOSS_HISTORY), &text)
}

/// Inference PGO over the whole sequence: corrected IMU edges with their
/// propagated covariance and ICP edges weighted by overlap, initialized from
/// chained registration and anchored at the initial state.
pub fn adaptive_pgo(prep: &Prepared, cfg: &PipelineConfig, deltas: &[PreintDelta]) -> Result<Vec<NavState>> {
    let icp_cfg = cfg.icp();
    let registrations = pseudolabel::register_chain(&prep.scans, &prep.origin, &icp_cfg)?;
    let mut nodes = vec![prep.origin];
    for (k, r) in registrations.iter().enumerate() {
        let prev = nodes[k];
        let mut pose = prev.pose().compose(&r.transform);
        pose.rotation = pose.rotation.renormalized();
        let dt = prep.segments[k].duration();
        nodes.push(NavState::new(pose.rotation, (pose.translation - prev.position) / dt, pose.translation, prep.scans[k + 1].t));
    }
    let icp_edges = registrations
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let (a, b) = (&prep.scans[k].cloud, &prep.scans[k + 1].cloud);
            let tau = icp_cfg.overlap_threshold.unwrap_or_else(|| a.cloud.default_overlap_threshold());
            IcpEdge {
                i: k,
                dt: r.transform,
                overlap: registration::symmetric_overlap_indexed(&r.transform, a, b, tau),
            }
        })
        .collect();
    let imu_edges = deltas
        .iter()
        .enumerate()
        .map(|(k, d)| ImuEdge {
            i: k,
            delta: *d,
            dt: prep.segments[k].duration(),
        })
        .collect();
    let graph = PoseGraph {
        nodes,
        icp_edges,
        imu_edges,
        gravity: prep.gravity,
    };
    let (solved, report) = pgo::solve_lm(&graph, &cfg.weights(), CostKind::Inference, &cfg.solver())?;
    log::info!(
        "inference PGO: cost {:.6e} -> {:.6e} in {} iterations ({:?})",
        report.initial_cost,
        report.final_cost,
        report.iterations,
        report.termination
    );
    Ok(solved)
}

pub fn infer(prep: &Prepared, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let model = WindowModel::load(&require(out, MODEL, Stage::Infer, Stage::Train)?)?;
    let deltas = prep.corrected_deltas(&model)?;
    let solved = adaptive_pgo(prep, cfg, &deltas)?;
    eval::write_tum(&out.join(TRAJECTORY), &Trajectory::new(solved)?)?;
    eval::write_tum(&out.join(TRAJECTORY_IMU), &prep.dead_reckon(&deltas)?)?;
    eval::write_tum(&out.join(BASELINE), &prep.dead_reckon(&prep.raw_deltas())?)?;
    Ok(())
}

/// Re-integrates `interval` seconds of IMU from every ground-truth state that
/// has a full interval of data after it.
fn reinitialized_intervals(
    bundle: &SequenceBundle,
    gt: &Trajectory,
    gravity: &Vector3<f64>,
    interval: f64,
    delta_of: impl Fn(&ImuSegment) -> Result<PreintDelta>,
) -> Result<Vec<IntervalEstimate>> {
    let last = bundle.imu.last().map_or(f64::NEG_INFINITY, |s| s.t);
    let mut out = Vec::new();
    for g in gt.states() {
        let end = g.t + interval;
        if end > last + eval::ASSOCIATION_TOLERANCE {
            continue;
        }
        let seg = ImuSegment::from_stream(&bundle.imu, g.t, end)?;
        let mut state = imu::propagate_state(g, &delta_of(&seg)?, gravity, interval);
        state.t = end;
        out.push(IntervalEstimate { start: *g, end: state });
    }
    Ok(out)
}

fn method_metrics(est: &Trajectory, gt: &Trajectory, intervals: &[IntervalEstimate], interval: f64) -> Result<MethodMetrics> {
    let rpe = eval::rpe_fixed_interval(intervals, gt, interval)?;
    Ok(MethodMetrics {
        ape: eval::ape(est, gt)?,
        rpe: rpe.rpe,
        rpe_count: rpe.count,
        rpe_skipped: rpe.skipped,
    })
}

pub fn evaluate(bundle: &SequenceBundle, prep: &Prepared, cfg: &PipelineConfig, out: &Path) -> Result<Metrics> {
    let metrics_path = out.join(METRICS);
    let Some(gt) = &bundle.ground_truth else {
        write(&metrics_path, "{\n  \"status\": \"no ground truth\"\n}\n")?;
        return Err(AppError::NoGroundTruth);
    };
    let read = |name: &str| -> Result<Trajectory> { Ok(eval::read_tum(&require(out, name, Stage::Eval, Stage::Infer)?)?) };
    let (pgo_traj, imu_traj, base_traj) = (read(TRAJECTORY)?, read(TRAJECTORY_IMU)?, read(BASELINE)?);
    let model = WindowModel::load(&require(out, MODEL, Stage::Eval, Stage::Train)?)?;
    if gt.states().iter().all(|s| s.velocity == Vector3::zeros()) {
        log::warn!("ground truth has no velocities; reinitialized RPE starts at rest");
    }
    let interval = cfg.rpe_interval;
    let raw = reinitialized_intervals(bundle, gt, &prep.gravity, interval, |s| Ok(imu::preintegrate(s)))?;
    let corrected = reinitialized_intervals(bundle, gt, &prep.gravity, interval, |s| corrected_delta(&model, s))?;
    let metrics = Metrics {
        interval,
        baseline: method_metrics(&base_traj, gt, &raw, interval)?,
        trained_imu: method_metrics(&imu_traj, gt, &corrected, interval)?,
        trained_pgo: method_metrics(&pgo_traj, gt, &eval::intervals_from_trajectory(&pgo_traj, interval), interval)?,
    };
    let text = serde_json::to_string_pretty(&metrics).map_err(|source| AppError::Json {
        path: metrics_path.display().to_string(),
        source,
    })?;
    write(&metrics_path, &(text + "\n"))?;
    Ok(metrics)
}
