//! Pseudo-labels: per segment, pick the ICP or PGO relative pose with the
//! higher symmetric overlap and chain the picks into world-frame states.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::geom::{Pose, Rotation};
use crate::imu::{NavState, PreintDelta};
use crate::pgo::{solve_lm, CostKind, IcpEdge, ImuEdge, InfoWeights, PoseGraph, SolverConfig};
use crate::registration::{icp_align_indexed, symmetric_overlap_indexed, IcpConfig, IcpResult, IndexedCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Icp,
    Pgo,
}

impl LabelSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelSource::Icp => "icp",
            LabelSource::Pgo => "pgo",
        }
    }
}

impl std::str::FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icp" => Ok(LabelSource::Icp),
            "pgo" => Ok(LabelSource::Pgo),
            other => Err(Error::invalid(format!("unknown label source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub dt: Pose,
    pub source: LabelSource,
    pub s_icp: f64,
    pub s_pgo: f64,
}

/// One labelled segment; `state` is the derived world-frame state at `t1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub t0: f64,
    pub t1: f64,
    pub dt: Pose,
    pub source: LabelSource,
    pub s_icp: f64,
    pub s_pgo: f64,
    pub state: NavState,
}

/// Scores both candidates; equal scores go to ICP.
pub fn select_source(dt_icp: &Pose, dt_pgo: &Pose, p_i: &IndexedCloud, p_next: &IndexedCloud, tau: f64) -> Selection {
    let s_icp = symmetric_overlap_indexed(dt_icp, p_i, p_next, tau);
    let s_pgo = symmetric_overlap_indexed(dt_pgo, p_i, p_next, tau);
    let (dt, source) = if s_pgo > s_icp {
        (*dt_pgo, LabelSource::Pgo)
    } else {
        (*dt_icp, LabelSource::Icp)
    };
    Selection { dt, source, s_icp, s_pgo }
}

/// `T_next = T_i·ΔT`, `v_next = (p_next − p_i)/dt`. The rotation is
/// re-orthonormalized so that long label chains stay valid rotations.
pub fn make_pseudo_states(t_i: &Pose, dt_pose: &Pose, dt: f64) -> Result<(Pose, Vector3<f64>)> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("segment duration {dt} must be positive")));
    }
    let mut next = t_i.compose(dt_pose);
    next.rotation = next.rotation.renormalized();
    let v = (next.translation - t_i.translation) / dt;
    Ok((next, v))
}

/// A scan with its timestamp and search index.
#[derive(Debug, Clone)]
pub struct Scan {
    pub t: f64,
    pub cloud: IndexedCloud,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    pub icp: IcpConfig,
    pub weights: InfoWeights,
    pub solver: SolverConfig,
    /// Nodes per training PGO window; consecutive windows share one node.
    pub chunk_nodes: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            icp: IcpConfig::default(),
            weights: InfoWeights::default(),
            solver: SolverConfig::default(),
            chunk_nodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRun {
    pub origin: NavState,
    pub labels: Vec<PseudoLabel>,
    pub registrations: Vec<IcpResult>,
    /// PGO relative poses, one per segment.
    pub pgo_deltas: Vec<Pose>,
}

/// Registers scan `i+1` onto scan `i` for every consecutive pair. The first
/// guess is the origin velocity over one scan period; later guesses repeat the
/// previous result.
pub fn register_chain(scans: &[Scan], origin: &NavState, cfg: &IcpConfig) -> Result<Vec<IcpResult>> {
    if scans.len() < 2 {
        return Err(Error::invalid("registration needs at least two scans"));
    }
    let mut registrations = Vec::with_capacity(scans.len() - 1);
    let first_dt = scans[1].t - scans[0].t;
    let mut guess = Pose::from_translation(origin.rotation.inverse().rotate(&origin.velocity) * first_dt);
    for i in 0..scans.len() - 1 {
        let res = icp_align_indexed(&scans[i + 1].cloud.cloud, &scans[i].cloud.tree, &guess, cfg)?;
        if !res.converged {
            log::warn!(
                "ICP {i}->{}: {}",
                i + 1,
                res.diagnostic.as_deref().unwrap_or("not converged")
            );
        }
        guess = res.transform;
        registrations.push(res);
    }
    Ok(registrations)
}

/// Registers consecutive scans (source `i+1` onto target `i`, seeded with the
/// previous motion), solves the training PGO in overlapping windows, selects
/// per segment and chains the selections from `origin`.
///
/// `deltas[i]` is the preintegrated IMU between scans `i` and `i + 1`.
pub fn generate(scans: &[Scan], deltas: &[PreintDelta], origin: &NavState, gravity: &Vector3<f64>, cfg: &LabelConfig) -> Result<LabelRun> {
    if scans.len() < 2 {
        return Err(Error::invalid("pseudo-labelling needs at least two scans"));
    }
    if deltas.len() + 1 != scans.len() {
        return Err(Error::invalid(format!(
            "{} IMU deltas for {} scans",
            deltas.len(),
            scans.len()
        )));
    }
    if cfg.chunk_nodes < 2 {
        return Err(Error::invalid("PGO windows need at least 2 nodes"));
    }
    cfg.icp.validate()?;
    let taus: Vec<f64> = scans
        .iter()
        .map(|s| cfg.icp.overlap_threshold.unwrap_or_else(|| s.cloud.cloud.default_overlap_threshold()))
        .collect();

    let registrations = register_chain(scans, origin, &cfg.icp)?;
    let icp: Vec<Pose> = registrations.iter().map(|r| r.transform).collect();

    let pgo_nodes = training_pgo(scans, deltas, &icp, origin, gravity, cfg)?;
    let pgo_deltas: Vec<Pose> = pgo_nodes
        .windows(2)
        .map(|w| w[0].pose().inverse().compose(&w[1].pose()))
        .collect();

    let mut labels = Vec::with_capacity(deltas.len());
    let mut pose = origin.pose();
    for i in 0..deltas.len() {
        let sel = select_source(&icp[i], &pgo_deltas[i], &scans[i].cloud, &scans[i + 1].cloud, taus[i]);
        let dt = scans[i + 1].t - scans[i].t;
        let (next, v) = make_pseudo_states(&pose, &sel.dt, dt)?;
        labels.push(PseudoLabel {
            t0: scans[i].t,
            t1: scans[i + 1].t,
            dt: sel.dt,
            source: sel.source,
            s_icp: sel.s_icp,
            s_pgo: sel.s_pgo,
            state: NavState::new(next.rotation, v, next.translation, scans[i + 1].t),
        });
        pose = next;
    }
    let n_pgo = labels.iter().filter(|l| l.source == LabelSource::Pgo).count();
    log::info!("pseudo-labels: {} segments, {} from PGO", labels.len(), n_pgo);
    Ok(LabelRun {
        origin: *origin,
        labels,
        registrations,
        pgo_deltas,
    })
}

/// Training-cost PGO over windows of `chunk_nodes` nodes; each window is
/// anchored at the previous window's last solved node and initialized from
/// the chained ICP poses.
fn training_pgo(
    scans: &[Scan],
    deltas: &[PreintDelta],
    icp: &[Pose],
    origin: &NavState,
    gravity: &Vector3<f64>,
    cfg: &LabelConfig,
) -> Result<Vec<NavState>> {
    let n = scans.len();
    let mut solved = vec![*origin; n];
    solved[0].t = scans[0].t;
    let mut start = 0;
    while start + 1 < n {
        let end = (start + cfg.chunk_nodes).min(n);
        let mut nodes = Vec::with_capacity(end - start);
        nodes.push(solved[start]);
        for k in start..end - 1 {
            let prev: NavState = nodes[k - start];
            let mut pose = prev.pose().compose(&icp[k]);
            pose.rotation = pose.rotation.renormalized();
            let dt = scans[k + 1].t - scans[k].t;
            nodes.push(NavState::new(pose.rotation, (pose.translation - prev.position) / dt, pose.translation, scans[k + 1].t));
        }
        let mut graph = PoseGraph {
            nodes,
            icp_edges: Vec::with_capacity(end - start),
            imu_edges: Vec::with_capacity(end - start),
            gravity: *gravity,
        };
        for k in start..end - 1 {
            graph.icp_edges.push(IcpEdge {
                i: k - start,
                dt: icp[k],
                overlap: 1.0,
            });
            graph.imu_edges.push(ImuEdge {
                i: k - start,
                delta: deltas[k],
                dt: scans[k + 1].t - scans[k].t,
            });
        }
        let (nodes, report) = solve_lm(&graph, &cfg.weights, CostKind::Training, &cfg.solver)?;
        log::debug!("training PGO window {start}..{end}: cost {:e} -> {:e}", report.initial_cost, report.final_cost);
        solved[start..end].copy_from_slice(&nodes);
        start = end - 1;
    }
    Ok(solved)
}

const TABLE_HEADER: &str = "# pseudo-labels 1";

fn push_state(out: &mut String, s: &NavState) {
    let m = s.rotation.matrix();
    for r in 0..3 {
        for c in 0..3 {
            let _ = write!(out, " {:?}", m[(r, c)]);
        }
    }
    for v in s.velocity.iter().chain(s.position.iter()) {
        let _ = write!(out, " {v:?}");
    }
}

/// Text table: a header, one `origin t R(9) v(3) p(3)` line, then
/// `t0 t1 source s_icp s_pgo dT(12) R(9) v(3) p(3)` per segment.
pub fn format_table(origin: &NavState, labels: &[PseudoLabel]) -> String {
    let mut out = String::new();
    out.push_str(TABLE_HEADER);
    out.push('\n');
    let _ = write!(out, "origin {:?}", origin.t);
    push_state(&mut out, origin);
    out.push('\n');
    for l in labels {
        let _ = write!(out, "{:?} {:?} {} {:?} {:?}", l.t0, l.t1, l.source.as_str(), l.s_icp, l.s_pgo);
        for v in l.dt.to_array12() {
            let _ = write!(out, " {v:?}");
        }
        push_state(&mut out, &l.state);
        out.push('\n');
    }
    out
}

fn parse_state(vals: &[f64], t: f64, source: &str, line: usize) -> Result<NavState> {
    let r = Rotation::new(Matrix3::from_row_slice(&vals[..9])).map_err(|e| Error::parse(source, line, e.to_string()))?;
    Ok(NavState::new(r, Vector3::from_row_slice(&vals[9..12]), Vector3::from_row_slice(&vals[12..15]), t))
}

fn parse_floats(toks: &[&str], source: &str, line: usize) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(source, line, format!("bad number `{t}`")))
        })
        .collect()
}

pub fn parse_table(text: &str, source: &str) -> Result<(NavState, Vec<PseudoLabel>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == TABLE_HEADER => {}
        _ => return Err(Error::parse(source, 1, format!("expected `{TABLE_HEADER}` header"))),
    }
    let mut origin = None;
    let mut labels = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks[0] == "origin" {
            if toks.len() != 17 {
                return Err(Error::parse(source, ln, format!("origin needs 16 values, found {}", toks.len() - 1)));
            }
            let v = parse_floats(&toks[1..], source, ln)?;
            origin = Some(parse_state(&v[1..], v[0], source, ln)?);
            continue;
        }
        if toks.len() != 32 {
            return Err(Error::parse(source, ln, format!("label needs 32 fields, found {}", toks.len())));
        }
        let head = parse_floats(&toks[..2], source, ln)?;
        let label_source: LabelSource = toks[2].parse().map_err(|e: Error| Error::parse(source, ln, e.to_string()))?;
        let v = parse_floats(&toks[3..], source, ln)?;
        let dt = Pose::from_array12(&v[2..14]).map_err(|e| Error::parse(source, ln, e.to_string()))?;
        let (t0, t1) = (head[0], head[1]);
        if t1 <= t0 {
            return Err(Error::parse(source, ln, "segment end precedes start"));
        }
        labels.push(PseudoLabel {
            t0,
            t1,
            dt,
            source: label_source,
            s_icp: v[0],
            s_pgo: v[1],
            state: parse_state(&v[14..], t1, source, ln)?,
        });
    }
    let origin = origin.ok_or_else(|| Error::parse(source, 0, "missing origin record"))?;
    Ok((origin, labels))
}

pub fn write_table(path: &Path, origin: &NavState, labels: &[PseudoLabel]) -> Result<()> {
    std::fs::write(path, format_table(origin, labels))?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<(NavState, Vec<PseudoLabel>)> {
    let text = std::fs::read_to_string(path)?;
    parse_table(&text, &path.display().to_string())
}
