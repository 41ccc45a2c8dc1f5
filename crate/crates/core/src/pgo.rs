//! Pose graphs over navigation states, the fixed-weight training cost, the
//! confidence-weighted inference cost and a Levenberg–Marquardt solver.
//!
//! Each node carries `(R, v, p)`; updates use the right perturbation
//! `R·Exp(δφ), v + δv, p + δp`. Node 0 is held fixed. Residuals are whitened,
//! so every cost is the plain squared norm of the stacked residual vector.
//!
//! Velocity and position differences are de-gravitated into the frame of the
//! earlier node:
//! `Δv = Rᵢᵀ(vⱼ − vᵢ − g·dt)`, `Δp = Rᵢᵀ(pⱼ − pᵢ − vᵢ·dt − ½g·dt²)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, SVector, Vector3};

use crate::geom::{log_so3, relative_se3, Pose, Rotation};
use crate::imu::{check_psd, cov_block, Matrix9, NavState, PreintDelta};
use crate::{Error, Result};

/// Relative pose observation between nodes `i` and `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpEdge {
    pub i: usize,
    pub dt: Pose,
    /// Symmetric overlap score in `[0, 1]`.
    pub overlap: f64,
}

/// Preintegrated IMU observation between nodes `i` and `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuEdge {
    pub i: usize,
    pub delta: PreintDelta,
    /// Time between the two nodes, used for de-gravitation.
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoWeights {
    /// Training weights: ICP pose, IMU rotation, velocity, position.
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    /// Inference scaling of the ICP rotation and translation parts.
    pub kappa_r: f64,
    pub kappa_p: f64,
    /// Inference scaling of the IMU rotation, velocity and position parts.
    pub tau_r: f64,
    pub tau_v: f64,
    pub tau_p: f64,
}

impl Default for InfoWeights {
    fn default() -> Self {
        InfoWeights {
            w1: 10.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            kappa_r: 1.0,
            kappa_p: 1.0,
            tau_r: 1.0,
            tau_v: 1.0,
            tau_p: 1.0,
        }
    }
}

impl InfoWeights {
    pub fn uniform_training(w: f64) -> Self {
        InfoWeights {
            w1: w,
            w2: w,
            w3: w,
            w4: w,
            ..Default::default()
        }
    }

    fn values(&self) -> [f64; 9] {
        [
            self.w1,
            self.w2,
            self.w3,
            self.w4,
            self.kappa_r,
            self.kappa_p,
            self.tau_r,
            self.tau_v,
            self.tau_p,
        ]
    }

    /// All weights strictly positive and finite.
    pub fn validate(&self) -> Result<()> {
        if self.values().iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("information weights must be positive and finite"))
        }
    }

    /// Cost evaluation also accepts zero weights, which switch terms off.
    fn validate_nonnegative(&self) -> Result<()> {
        if self.values().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("information weights must be nonnegative and finite"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tol: f64,
    /// Stop when the proposed update norm falls below this.
    pub step_tol: f64,
    /// Central-difference step for the Jacobian.
    pub jacobian_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 50,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            cost_tol: 1e-12,
            step_tol: 1e-10,
            jacobian_step: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.lambda_init > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.cost_tol > 0.0
            && self.step_tol > 0.0
            && self.jacobian_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "solver configuration needs positive values and up factor > 1 > down factor > 0",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<NavState>,
    pub icp_edges: Vec<IcpEdge>,
    pub imu_edges: Vec<ImuEdge>,
    /// World-frame gravity, m/s².
    pub gravity: Vector3<f64>,
}

/// `(ΔR, Δv, Δp)` implied by two states under the de-gravitation convention.
pub fn implied_delta(a: &NavState, b: &NavState, gravity: &Vector3<f64>, dt: f64) -> (Rotation, Vector3<f64>, Vector3<f64>) {
    let rt = a.rotation.inverse();
    let dr = rt * b.rotation;
    let dv = rt.rotate(&(b.velocity - a.velocity - gravity * dt));
    let dp = rt.rotate(&(b.position - a.position - a.velocity * dt - gravity * (0.5 * dt * dt)));
    (dr, dv, dp)
}

/// Unweighted `Log(ΔT_ICP⁻¹·ΔT)` with `ΔT = Tᵢ⁻¹Tⱼ`, ordered (rotation, translation).
pub fn icp_residual(edge: &IcpEdge, a: &NavState, b: &NavState) -> SVector<f64, 6> {
    let rel = a.pose().inverse().compose(&b.pose());
    let tw = relative_se3(&edge.dt, &rel);
    let mut r = SVector::<f64, 6>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&tw.rotvec);
    r.fixed_rows_mut::<3>(3).copy_from(&tw.transvec);
    r
}

/// Unweighted IMU residual ordered (rotation, velocity, position).
pub fn imu_residual(edge: &ImuEdge, a: &NavState, b: &NavState, gravity: &Vector3<f64>) -> SVector<f64, 9> {
    let (dr, dv, dp) = implied_delta(a, b, gravity, edge.dt);
    let mut r = SVector::<f64, 9>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&log_so3(&(edge.delta.dr.inverse() * dr)));
    r.fixed_rows_mut::<3>(3).copy_from(&(edge.delta.dv - dv));
    r.fixed_rows_mut::<3>(6).copy_from(&(edge.delta.dp - dp));
    r
}

/// A residual block with its whitening.
#[derive(Debug, Clone)]
enum Factor {
    Icp { edge: usize, rot: f64, trans: f64 },
    Imu { edge: usize, whiten: [Matrix3<f64>; 3] },
}

impl Factor {
    fn dim(&self) -> usize {
        match self {
            Factor::Icp { .. } => 6,
            Factor::Imu { .. } => 9,
        }
    }

    fn first_node(&self, graph: &PoseGraph) -> usize {
        match self {
            Factor::Icp { edge, .. } => graph.icp_edges[*edge].i,
            Factor::Imu { edge, .. } => graph.imu_edges[*edge].i,
        }
    }

    /// Whitened residual in the leading `dim()` entries.
    fn residual(&self, graph: &PoseGraph, a: &NavState, b: &NavState) -> SVector<f64, 9> {
        let mut out = SVector::<f64, 9>::zeros();
        match self {
            Factor::Icp { edge, rot, trans } => {
                let r = icp_residual(&graph.icp_edges[*edge], a, b);
                out.fixed_rows_mut::<3>(0).copy_from(&(r.fixed_rows::<3>(0) * *rot));
                out.fixed_rows_mut::<3>(3).copy_from(&(r.fixed_rows::<3>(3) * *trans));
            }
            Factor::Imu { edge, whiten } => {
                let r = imu_residual(&graph.imu_edges[*edge], a, b, &graph.gravity);
                for (k, w) in whiten.iter().enumerate() {
                    out.fixed_rows_mut::<3>(3 * k).copy_from(&(w * r.fixed_rows::<3>(3 * k)));
                }
            }
        }
        out
    }
}

fn check_edges(graph: &PoseGraph) -> Result<()> {
    let n = graph.nodes.len();
    for (k, e) in graph.icp_edges.iter().enumerate() {
        if e.i + 1 >= n {
            return Err(Error::invalid(format!("ICP edge {k} references node {} of {n}", e.i + 1)));
        }
        if !(0.0..=1.0).contains(&e.overlap) {
            return Err(Error::invalid(format!("ICP edge {k} overlap {} outside [0, 1]", e.overlap)));
        }
    }
    for (k, e) in graph.imu_edges.iter().enumerate() {
        if e.i + 1 >= n {
            return Err(Error::invalid(format!("IMU edge {k} references node {} of {n}", e.i + 1)));
        }
        if !(e.dt.is_finite() && e.dt > 0.0) {
            return Err(Error::invalid(format!("IMU edge {k} has dt {}", e.dt)));
        }
    }
    Ok(())
}

fn build_factors(graph: &PoseGraph, w: &InfoWeights, kind: CostKind) -> Result<Vec<Factor>> {
    check_edges(graph)?;
    w.validate_nonnegative()?;
    let mut factors = Vec::with_capacity(graph.icp_edges.len() + graph.imu_edges.len());
    for (k, e) in graph.icp_edges.iter().enumerate() {
        let (rot, trans) = match kind {
            CostKind::Training => (w.w1.sqrt(), w.w1.sqrt()),
            CostKind::Inference => ((e.overlap * w.kappa_r).sqrt(), (e.overlap * w.kappa_p).sqrt()),
        };
        factors.push(Factor::Icp { edge: k, rot, trans });
    }
    for (k, e) in graph.imu_edges.iter().enumerate() {
        let whiten = match kind {
            CostKind::Training => [
                Matrix3::identity() * w.w2.sqrt(),
                Matrix3::identity() * w.w3.sqrt(),
                Matrix3::identity() * w.w4.sqrt(),
            ],
            CostKind::Inference => {
                let scale = [w.tau_r, w.tau_v, w.tau_p];
                let mut out = [Matrix3::zeros(); 3];
                for (b, o) in out.iter_mut().enumerate() {
                    *o = whitening(&e.delta.cov, b).map_err(|reason| Error::DegenerateInformation { edge: k, reason })?
                        * scale[b].sqrt();
                }
                out
            }
        };
        factors.push(Factor::Imu { edge: k, whiten });
    }
    Ok(factors)
}

/// `L⁻¹` for the Cholesky factor `L` of a diagonal covariance block, so that
/// `‖L⁻¹r‖² = rᵀΣ⁻¹r`.
fn whitening(cov: &Matrix9, block: usize) -> std::result::Result<Matrix3<f64>, String> {
    let names = ["rotation", "velocity", "position"];
    let c = cov_block(cov, block);
    if !c.iter().all(|v| v.is_finite()) {
        return Err(format!("{} covariance has non-finite entries", names[block]));
    }
    let sym = (c + c.transpose()) * 0.5;
    let chol = Cholesky::new(sym).ok_or_else(|| format!("{} covariance is not positive definite", names[block]))?;
    let l = chol.l();
    let inv = l
        .try_inverse()
        .ok_or_else(|| format!("{} covariance is singular", names[block]))?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(format!("{} covariance is numerically singular", names[block]));
    }
    Ok(inv)
}

fn stacked_residual(graph: &PoseGraph, factors: &[Factor], nodes: &[NavState]) -> DVector<f64> {
    let len = factors.iter().map(Factor::dim).sum();
    let mut r = DVector::zeros(len);
    let mut row = 0;
    for f in factors {
        let i = f.first_node(graph);
        let v = f.residual(graph, &nodes[i], &nodes[i + 1]);
        let d = f.dim();
        r.rows_mut(row, d).copy_from(&v.rows(0, d));
        row += d;
    }
    r
}

/// Cost and whitened residual vector of the given objective.
pub fn evaluate_cost(graph: &PoseGraph, w: &InfoWeights, kind: CostKind) -> Result<(f64, DVector<f64>)> {
    let factors = build_factors(graph, w, kind)?;
    let r = stacked_residual(graph, &factors, &graph.nodes);
    Ok((r.norm_squared(), r))
}

/// `Σ w₁‖Log(ΔT_ICP ⊟ ΔT)‖² + w₂‖Log(ΔR_IMU ⊟ ΔR)‖² + w₃‖Δv_IMU − Δv‖² + w₄‖Δp_IMU − Δp‖²`.
pub fn training_cost(graph: &PoseGraph, w: &InfoWeights) -> Result<(f64, DVector<f64>)> {
    evaluate_cost(graph, w, CostKind::Training)
}

/// ICP parts weighted by `overlap·κ`, IMU parts by `τ·Σ_block⁻¹`.
pub fn inference_cost(graph: &PoseGraph, w: &InfoWeights) -> Result<(f64, DVector<f64>)> {
    evaluate_cost(graph, w, CostKind::Inference)
}

/// Right-perturbation update of one state by `(δφ, δv, δp)`.
pub fn retract(s: &NavState, delta: &[f64]) -> NavState {
    let phi = Vector3::new(delta[0], delta[1], delta[2]);
    NavState {
        rotation: (s.rotation * Rotation::exp(&phi)).renormalized_if_needed(),
        velocity: s.velocity + Vector3::new(delta[3], delta[4], delta[5]),
        position: s.position + Vector3::new(delta[6], delta[7], delta[8]),
        t: s.t,
    }
}

/// Central-difference Jacobian of one factor with respect to its two nodes
/// (18 columns, first node first).
fn factor_jacobian(graph: &PoseGraph, f: &Factor, nodes: &[NavState], h: f64) -> SVector<SVector<f64, 9>, 18> {
    let i = f.first_node(graph);
    let (a, b) = (nodes[i], nodes[i + 1]);
    let mut cols = SVector::<SVector<f64, 9>, 18>::from_element(SVector::zeros());
    let mut d = [0.0; 9];
    for c in 0..18 {
        let k = c % 9;
        d[k] = h;
        let plus = if c < 9 {
            f.residual(graph, &retract(&a, &d), &b)
        } else {
            f.residual(graph, &a, &retract(&b, &d))
        };
        d[k] = -h;
        let minus = if c < 9 {
            f.residual(graph, &retract(&a, &d), &b)
        } else {
            f.residual(graph, &a, &retract(&b, &d))
        };
        d[k] = 0.0;
        cols[c] = (plus - minus) / (2.0 * h);
    }
    cols
}

/// Dense numerical Jacobian of the stacked residual with respect to nodes
/// `1..n` (node 0 is fixed).
pub fn numerical_jacobian(graph: &PoseGraph, w: &InfoWeights, kind: CostKind, h: f64) -> Result<DMatrix<f64>> {
    let factors = build_factors(graph, w, kind)?;
    let rows = factors.iter().map(Factor::dim).sum();
    let n = graph.nodes.len().saturating_sub(1) * 9;
    let mut j = DMatrix::zeros(rows, n);
    let mut row = 0;
    for f in &factors {
        let i = f.first_node(graph);
        let cols = factor_jacobian(graph, f, &graph.nodes, h);
        for c in 0..18 {
            let node = i + c / 9;
            if node == 0 {
                continue;
            }
            let col = 9 * (node - 1) + c % 9;
            for r in 0..f.dim() {
                j[(row + r, col)] = cols[c][r];
            }
        }
        row += f.dim();
    }
    Ok(j)
}

/// Symmetric positive definite matrix stored as its lower band.
#[derive(Debug, Clone)]
struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    fn zeros(n: usize, bw: usize) -> Self {
        BandedSpd {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    #[cfg(test)]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// Solves `(A + λI)x = b`; `None` if not positive definite.
    fn solve_damped(&self, lambda: f64, b: &DVector<f64>) -> Option<DVector<f64>> {
        let (n, bw) = (self.n, self.bw);
        let mut l = self.data.clone();
        for i in 0..n {
            let k = self.idx(i, i);
            l[k] += lambda;
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = l[self.idx(i, j)];
                for k in klo..j {
                    s -= l[self.idx(i, k)] * l[self.idx(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[self.idx(i, i)] = s.sqrt();
                } else {
                    l[self.idx(i, j)] = s / l[self.idx(j, j)];
                }
            }
        }
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= l[self.idx(i, k)] * y[k];
            }
            y[i] = s / l[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= l[self.idx(k, i)] * y[k];
            }
            y[i] = s / l[self.idx(i, i)];
        }
        Some(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CostTolerance,
    StepTolerance,
    MaxIterations,
    DampingLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
}

const LAMBDA_MAX: f64 = 1e16;
const LAMBDA_MIN: f64 = 1e-12;

fn finite_cost(r: &DVector<f64>, when: &str) -> Result<f64> {
    let c = r.norm_squared();
    if c.is_finite() {
        Ok(c)
    } else {
        let row = r.iter().position(|v| !v.is_finite()).unwrap_or(0);
        Err(Error::NonFinite(format!("residual row {row} is non-finite {when}")))
    }
}

/// Levenberg–Marquardt on the stacked residual with node 0 held fixed.
/// Returns the optimized states and a report.
pub fn solve_lm(graph: &PoseGraph, w: &InfoWeights, kind: CostKind, cfg: &SolverConfig) -> Result<(Vec<NavState>, SolveReport)> {
    cfg.validate()?;
    if graph.nodes.len() < 2 {
        return Err(Error::invalid("pose graph needs at least 2 nodes"));
    }
    let factors = build_factors(graph, w, kind)?;
    let mut nodes = graph.nodes.clone();
    let n = (nodes.len() - 1) * 9;
    let mut cost = finite_cost(&stacked_residual(graph, &factors, &nodes), "at the initial guess")?;
    let mut report = SolveReport {
        iterations: 0,
        accepted_steps: 0,
        initial_cost: cost,
        final_cost: cost,
        cost_history: vec![cost],
        termination: Termination::MaxIterations,
    };
    let mut lambda = cfg.lambda_init;
    'outer: while report.iterations < cfg.max_iterations {
        report.iterations += 1;
        if cost == 0.0 {
            report.termination = Termination::CostTolerance;
            break;
        }
        let mut h = BandedSpd::zeros(n, 17);
        let mut g = DVector::zeros(n);
        for f in &factors {
            let i = f.first_node(graph);
            let cols = factor_jacobian(graph, f, &nodes, cfg.jacobian_step);
            let r = f.residual(graph, &nodes[i], &nodes[i + 1]);
            let d = f.dim();
            // Node 0 columns are dropped.
            let active: Vec<(usize, usize)> = (0..18)
                .filter(|c| i + c / 9 > 0)
                .map(|c| (c, 9 * (i + c / 9 - 1) + c % 9))
                .collect();
            for &(ca, pa) in &active {
                g[pa] += cols[ca].rows(0, d).dot(&r.rows(0, d));
                for &(cb, pb) in &active {
                    if pb <= pa {
                        h.add(pa, pb, cols[ca].rows(0, d).dot(&cols[cb].rows(0, d)));
                    }
                }
            }
        }
        loop {
            let Some(step) = h.solve_damped(lambda, &(-&g)) else {
                lambda *= cfg.lambda_up;
                if lambda > LAMBDA_MAX {
                    report.termination = Termination::DampingLimit;
                    break 'outer;
                }
                continue;
            };
            if step.norm() < cfg.step_tol {
                report.termination = Termination::StepTolerance;
                break 'outer;
            }
            let candidate: Vec<NavState> = nodes
                .iter()
                .enumerate()
                .map(|(k, s)| if k == 0 { *s } else { retract(s, step.rows(9 * (k - 1), 9).as_slice()) })
                .collect();
            let r_new = stacked_residual(graph, &factors, &candidate);
            let new_cost = finite_cost(&r_new, &format!("after iteration {}", report.iterations))?;
            if new_cost < cost {
                let decrease = cost - new_cost;
                assert!(new_cost < cost, "accepted LM step must decrease the cost");
                nodes = candidate;
                let prev = cost;
                cost = new_cost;
                report.accepted_steps += 1;
                report.cost_history.push(cost);
                lambda = (lambda * cfg.lambda_down).max(LAMBDA_MIN);
                if decrease <= cfg.cost_tol * prev {
                    report.termination = Termination::CostTolerance;
                    break 'outer;
                }
                break;
            }
            lambda *= cfg.lambda_up;
            if lambda > LAMBDA_MAX {
                report.termination = Termination::DampingLimit;
                break 'outer;
            }
        }
    }
    report.final_cost = cost;
    log::debug!(
        "LM {:?}: {} iterations, {} accepted, cost {:e} -> {:e}",
        report.termination,
        report.iterations,
        report.accepted_steps,
        report.initial_cost,
        report.final_cost
    );
    Ok((nodes, report))
}

const DUMP_HEADER: &str = "pose-graph 1";

fn push_values(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        let _ = write!(out, " {v:?}");
    }
}

fn state_values(s: &NavState) -> Vec<f64> {
    let mut v = Vec::with_capacity(16);
    v.push(s.t);
    let m = s.rotation.matrix();
    for r in 0..3 {
        for c in 0..3 {
            v.push(m[(r, c)]);
        }
    }
    v.extend(s.velocity.iter());
    v.extend(s.position.iter());
    v
}

impl PoseGraph {
    /// Line-oriented text form; floats use shortest round-trip formatting.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str(DUMP_HEADER);
        out.push('\n');
        out.push_str("gravity");
        push_values(&mut out, self.gravity.iter().copied());
        out.push('\n');
        for (k, s) in self.nodes.iter().enumerate() {
            let _ = write!(out, "node {k}");
            push_values(&mut out, state_values(s));
            out.push('\n');
        }
        for e in &self.icp_edges {
            let _ = write!(out, "icp {}", e.i);
            push_values(&mut out, std::iter::once(e.overlap).chain(e.dt.to_array12()));
            out.push('\n');
        }
        for e in &self.imu_edges {
            let _ = write!(out, "imu {}", e.i);
            let d = &e.delta;
            let m = d.dr.matrix();
            let mut vals = vec![e.dt, d.dt];
            for r in 0..3 {
                for c in 0..3 {
                    vals.push(m[(r, c)]);
                }
            }
            vals.extend(d.dv.iter());
            vals.extend(d.dp.iter());
            for r in 0..9 {
                for c in 0..9 {
                    vals.push(d.cov[(r, c)]);
                }
            }
            push_values(&mut out, vals);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<PoseGraph> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == DUMP_HEADER => {}
            _ => return Err(Error::parse(source, 1, format!("expected `{DUMP_HEADER}` header"))),
        }
        let mut graph = PoseGraph {
            nodes: Vec::new(),
            icp_edges: Vec::new(),
            imu_edges: Vec::new(),
            gravity: Vector3::zeros(),
        };
        let mut have_gravity = false;
        for (i, line) in lines {
            let ln = i + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let index = |tok: Option<&&str>| -> Result<usize> {
                tok.and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::parse(source, ln, "bad index"))
            };
            let floats = |from: usize, count: usize| -> Result<Vec<f64>> {
                if toks.len() != from + count {
                    return Err(Error::parse(
                        source,
                        ln,
                        format!("`{}` record needs {} values, found {}", toks[0], count, toks.len().saturating_sub(from)),
                    ));
                }
                toks[from..]
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| Error::parse(source, ln, format!("bad number `{t}`"))))
                    .collect()
            };
            let rotation = |v: &[f64]| -> Result<Rotation> {
                Rotation::new(Matrix3::from_row_slice(v)).map_err(|e| Error::parse(source, ln, e.to_string()))
            };
            match toks[0] {
                "gravity" => {
                    let v = floats(1, 3)?;
                    graph.gravity = Vector3::new(v[0], v[1], v[2]);
                    have_gravity = true;
                }
                "node" => {
                    let k = index(toks.get(1))?;
                    if k != graph.nodes.len() {
                        return Err(Error::parse(source, ln, format!("node index {k} out of order")));
                    }
                    let v = floats(2, 16)?;
                    graph.nodes.push(NavState {
                        t: v[0],
                        rotation: rotation(&v[1..10])?,
                        velocity: Vector3::from_row_slice(&v[10..13]),
                        position: Vector3::from_row_slice(&v[13..16]),
                    });
                }
                "icp" => {
                    let k = index(toks.get(1))?;
                    let v = floats(2, 13)?;
                    let dt = Pose::from_array12(&v[1..]).map_err(|e| Error::parse(source, ln, e.to_string()))?;
                    graph.icp_edges.push(IcpEdge { i: k, dt, overlap: v[0] });
                }
                "imu" => {
                    let k = index(toks.get(1))?;
                    let v = floats(2, 2 + 9 + 3 + 3 + 81)?;
                    let cov = Matrix9::from_row_slice(&v[17..]);
                    check_psd(&cov, "IMU edge covariance").map_err(|e| Error::parse(source, ln, e.to_string()))?;
                    graph.imu_edges.push(ImuEdge {
                        i: k,
                        dt: v[0],
                        delta: PreintDelta {
                            dt: v[1],
                            dr: rotation(&v[2..11])?,
                            dv: Vector3::from_row_slice(&v[11..14]),
                            dp: Vector3::from_row_slice(&v[14..17]),
                            cov,
                        },
                    });
                }
                other => return Err(Error::parse(source, ln, format!("unknown record `{other}`"))),
            }
        }
        if !have_gravity {
            return Err(Error::parse(source, 0, "missing gravity record"));
        }
        check_edges(&graph).map_err(|e| Error::parse(source, 0, e.to_string()))?;
        Ok(graph)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<PoseGraph> {
        let text = std::fs::read_to_string(path)?;
        PoseGraph::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::exp_so3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-s..s))
    }

    /// Random chain with edges generated exactly from the states.
    fn consistent_graph(rng: &mut ChaCha8Rng, n: usize) -> PoseGraph {
        let dt = 0.2;
        let mut nodes = vec![NavState::new(exp_so3(&rand_vec(rng, 1.0)), rand_vec(rng, 1.0), rand_vec(rng, 5.0), 0.0)];
        for k in 1..n {
            let prev = nodes[k - 1];
            nodes.push(NavState::new(
                prev.rotation * exp_so3(&rand_vec(rng, 0.2)),
                prev.velocity + rand_vec(rng, 0.3),
                prev.position + prev.velocity * dt + rand_vec(rng, 0.1),
                prev.t + dt,
            ));
        }
        let mut graph = PoseGraph {
            nodes,
            icp_edges: vec![],
            imu_edges: vec![],
            gravity: G,
        };
        for i in 0..n - 1 {
            let (a, b) = (graph.nodes[i], graph.nodes[i + 1]);
            graph.icp_edges.push(IcpEdge {
                i,
                dt: a.pose().inverse().compose(&b.pose()),
                overlap: rng.random_range(0.5..1.0),
            });
            let (dr, dv, dp) = implied_delta(&a, &b, &G, dt);
            let l = Matrix9::from_fn(|r, c| if r == c { 0.1 } else if r > c { rng.random_range(-0.02..0.02) } else { 0.0 });
            graph.imu_edges.push(ImuEdge {
                i,
                dt,
                delta: PreintDelta { dr, dv, dp, cov: l * l.transpose(), dt },
            });
        }
        graph
    }

    fn perturb(rng: &mut ChaCha8Rng, graph: &PoseGraph, rot: f64, pos: f64) -> PoseGraph {
        let mut g = graph.clone();
        for s in g.nodes.iter_mut().skip(1) {
            s.rotation = s.rotation * exp_so3(&rand_vec(rng, rot));
            s.velocity += rand_vec(rng, pos);
            s.position += rand_vec(rng, pos);
        }
        g
    }

    #[test]
    fn consistent_graph_has_zero_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = consistent_graph(&mut rng, 8);
        assert!(training_cost(&g, &InfoWeights::default()).unwrap().0 <= 1e-18);
        assert!(inference_cost(&g, &InfoWeights::default()).unwrap().0 <= 1e-18);
    }

    #[test]
    fn position_perturbation_hand_computed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = consistent_graph(&mut rng, 4);
        let e = Vector3::new(0.03, -0.02, 0.05);
        g.nodes[3].position += e;
        let w = InfoWeights {
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
            w4: 2.5,
            ..Default::default()
        };
        // Only the last IMU edge sees node 3: residual −R₂ᵀe.
        let induced = g.nodes[2].rotation.inverse().rotate(&e);
        assert_relative_eq!(training_cost(&g, &w).unwrap().0, 2.5 * induced.norm_squared(), max_relative = 1e-12);
    }

    #[test]
    fn cost_is_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g0 = consistent_graph(&mut rng, 6);
        let g = perturb(&mut rng, &g0, 0.05, 0.1);
        let w = InfoWeights::default();
        let w2 = InfoWeights {
            w1: 2.0 * w.w1,
            w2: 2.0 * w.w2,
            w3: 2.0 * w.w3,
            w4: 2.0 * w.w4,
            ..w
        };
        let (c1, _) = training_cost(&g, &w).unwrap();
        let (c2, _) = training_cost(&g, &w2).unwrap();
        assert_relative_eq!(c2, 2.0 * c1, max_relative = 1e-12);
    }

    #[test]
    fn inference_zero_overlap_keeps_only_imu_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g0 = consistent_graph(&mut rng, 5);
        let mut g = perturb(&mut rng, &g0, 0.05, 0.1);
        for e in g.icp_edges.iter_mut() {
            e.overlap = 0.0;
        }
        let (c, r) = inference_cost(&g, &InfoWeights::default()).unwrap();
        let icp_rows = 6 * g.icp_edges.len();
        assert!(r.rows(0, icp_rows).iter().all(|v| *v == 0.0));
        assert_relative_eq!(c, r.rows(icp_rows, r.len() - icp_rows).norm_squared(), max_relative = 1e-14);
    }

    #[test]
    fn inference_matches_training_with_unit_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g0 = consistent_graph(&mut rng, 5);
        let mut g = perturb(&mut rng, &g0, 0.05, 0.1);
        for e in g.icp_edges.iter_mut() {
            e.overlap = 1.0;
        }
        for e in g.imu_edges.iter_mut() {
            e.delta.cov = Matrix9::identity();
        }
        let w = InfoWeights {
            w1: 1.0,
            ..Default::default()
        };
        let (ct, _) = training_cost(&g, &w).unwrap();
        let (ci, _) = inference_cost(&g, &w).unwrap();
        assert_relative_eq!(ct, ci, max_relative = 1e-14);
    }

    #[test]
    fn covariance_scaling_scales_mahalanobis_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g0 = consistent_graph(&mut rng, 3);
        let mut g = perturb(&mut rng, &g0, 0.05, 0.1);
        for e in g.icp_edges.iter_mut() {
            e.overlap = 0.0;
        }
        let contribution = |g: &PoseGraph| {
            let (_, r) = inference_cost(g, &InfoWeights::default()).unwrap();
            r.rows(12, 9).norm_squared()
        };
        let before = contribution(&g);
        g.imu_edges[0].delta.cov *= 4.0;
        assert_relative_eq!(contribution(&g), before / 4.0, max_relative = 1e-12);
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = consistent_graph(&mut rng, 3);
        g.imu_edges[1].delta.cov = Matrix9::zeros();
        match inference_cost(&g, &InfoWeights::default()) {
            Err(Error::DegenerateInformation { edge, .. }) => assert_eq!(edge, 1),
            other => panic!("unexpected {other:?}"),
        }
        // The training cost ignores covariances.
        assert!(training_cost(&g, &InfoWeights::default()).is_ok());
    }

    #[test]
    fn misindexed_edge_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = consistent_graph(&mut rng, 3);
        g.icp_edges[0].i = 2;
        assert!(training_cost(&g, &InfoWeights::default()).is_err());
    }

    #[test]
    fn lm_recovers_consistent_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = consistent_graph(&mut rng, 12);
        let g = perturb(&mut rng, &truth, 0.05, 0.1);
        for kind in [CostKind::Training, CostKind::Inference] {
            let (nodes, report) = solve_lm(&g, &InfoWeights::default(), kind, &SolverConfig::default()).unwrap();
            assert!(report.final_cost <= 1e-10, "{report:?}");
            assert!(report.cost_history.windows(2).all(|w| w[1] < w[0]));
            for (a, b) in nodes.iter().zip(&truth.nodes) {
                assert!(a.rotation.angle_to(&b.rotation) < 1e-4);
                assert!((a.velocity - b.velocity).amax() < 1e-4);
                assert!((a.position - b.position).amax() < 1e-4);
            }
        }
    }

    #[test]
    fn lm_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = consistent_graph(&mut rng, 6);
        let cfg = SolverConfig::default();
        let (nodes, report) = solve_lm(&g, &InfoWeights::default(), CostKind::Training, &cfg).unwrap();
        assert_eq!(report.accepted_steps, 0);
        assert_eq!(nodes, g.nodes);
    }

    #[test]
    fn banded_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, bw) = (40, 5);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        let mut band = BandedSpd::zeros(n, bw);
        let a = DMatrix::<f64>::from_fn(n, n, |r, c| if r.abs_diff(c) <= 2 { rng.random_range(-1.0..1.0) } else { 0.0 });
        let spd = &a * a.transpose();
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                band.add(i, j, spd[(i, j)]);
                dense[(i, j)] = spd[(i, j)];
                dense[(j, i)] = spd[(i, j)];
            }
        }
        let b = DVector::<f64>::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let lambda = 0.3;
        let x = band.solve_damped(lambda, &b).unwrap();
        let oracle = (dense + DMatrix::identity(n, n) * lambda).lu().solve(&b).unwrap();
        assert_relative_eq!(x, oracle, epsilon = 1e-10);
        assert_relative_eq!(band.get(3, 1), spd[(3, 1)]);
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g0 = consistent_graph(&mut rng, 5);
        let g = perturb(&mut rng, &g0, 0.05, 0.1);
        let text = g.dump();
        let back = PoseGraph::parse(&text, "mem").unwrap();
        assert_eq!(back, g);
        assert_eq!(back.dump(), text);
        let bad = text.replacen("node 1", "node 3", 1);
        assert!(PoseGraph::parse(&bad, "mem").is_err());
    }
}
