//! Learned IMU corrections and uncertainties, the self-supervised losses and
//! a small gradient-based trainer.

use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::log_so3;
use crate::imu::{preintegrate_with_covariance, propagate_state, CorrectionOutput, ImuSegment, Matrix9, NavState};
use crate::kv::KvDocument;
use crate::motion::{window_features, NormStats, FEATURES};
use crate::{Error, Result};

/// Raw outputs per window: 6 corrections, then 6 pre-activation variances.
pub const OUTPUTS: usize = 12;

/// Smallest predicted variance.
pub const ETA_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Maps raw outputs to `(sigma, eta)` with `eta = softplus(raw) + ETA_FLOOR`.
pub fn map_raw_outputs(raw: &[f64; OUTPUTS]) -> (Vector6<f64>, Vector6<f64>) {
    let sigma = Vector6::from_fn(|i, _| raw[i]);
    let eta = Vector6::from_fn(|i, _| softplus(raw[6 + i]) + ETA_FLOOR);
    (sigma, eta)
}

/// A parameterized map from an IMU segment to per-sample corrections.
pub trait CorrectionModel: Clone {
    fn parameters(&self) -> &[f64];

    fn set_parameters(&mut self, theta: &[f64]) -> Result<()>;

    fn predict(&self, seg: &ImuSegment) -> Result<CorrectionOutput>;

    /// Raw outputs for models that apply one correction to a whole window.
    fn window_raw(&self, _seg: &ImuSegment) -> Option<Result<[f64; OUTPUTS]>> {
        None
    }

    /// `∂L/∂θ` given `∂L/∂raw` for window models.
    fn window_backprop(&self, _seg: &ImuSegment, _d_raw: &[f64; OUTPUTS]) -> Option<Result<Vec<f64>>> {
        None
    }
}

/// Two-layer network from standardized window features to raw outputs:
/// `raw = W₂·tanh(W₁·z + b₁) + b₂`.
///
/// Parameter layout: `W₁` (H×F, row-major), `b₁` (H), `W₂` (12×H, row-major), `b₂` (12).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowModel {
    hidden: usize,
    theta: Vec<f64>,
    stats: NormStats,
}

pub fn window_model_parameter_count(hidden: usize) -> usize {
    (FEATURES + 1) * hidden + (hidden + 1) * OUTPUTS
}

impl WindowModel {
    /// All parameters zero.
    pub fn zeros(hidden: usize, stats: NormStats) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if stats.mean.len() != FEATURES || stats.std.len() != FEATURES {
            return Err(Error::invalid(format!("feature statistics must have {FEATURES} entries")));
        }
        Ok(WindowModel {
            hidden,
            theta: vec![0.0; window_model_parameter_count(hidden)],
            stats,
        })
    }

    /// Seeded hidden layer, zero output layer except the variance biases,
    /// which start at `eta_bias`.
    pub fn new(hidden: usize, stats: NormStats, seed: u64, eta_bias: f64) -> Result<Self> {
        let mut m = WindowModel::zeros(hidden, stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (FEATURES as f64).sqrt();
        for w in &mut m.theta[..FEATURES * hidden] {
            *w = rng.random_range(-scale..scale);
        }
        let b2 = m.theta.len() - OUTPUTS;
        for b in &mut m.theta[b2 + 6..] {
            *b = eta_bias;
        }
        Ok(m)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let h = self.hidden;
        let b1 = FEATURES * h;
        let w2 = b1 + h;
        let b2 = w2 + OUTPUTS * h;
        (b1, w2, b2)
    }

    fn forward(&self, seg: &ImuSegment) -> Result<(Vec<f64>, Vec<f64>, [f64; OUTPUTS])> {
        let z = self.stats.apply(&window_features(seg)?);
        let (b1, w2, b2) = self.offsets();
        let t = &self.theta;
        let hid: Vec<f64> = (0..self.hidden)
            .map(|i| {
                let row = &t[i * FEATURES..(i + 1) * FEATURES];
                (row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>() + t[b1 + i]).tanh()
            })
            .collect();
        let mut raw = [0.0; OUTPUTS];
        for (o, r) in raw.iter_mut().enumerate() {
            let row = &t[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
            *r = row.iter().zip(&hid).map(|(w, x)| w * x).sum::<f64>() + t[b2 + o];
        }
        Ok((z, hid, raw))
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new("window-model", 1);
        doc.push("features", FEATURES.to_string());
        doc.push("hidden", self.hidden.to_string());
        doc.push_f64_list("theta", &self.theta);
        doc.push_f64_list("feature_mean", &self.stats.mean);
        doc.push_f64_list("feature_std", &self.stats.std);
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        doc.expect_header("window-model", 1)?;
        let f: usize = doc.get_parsed("features")?;
        if f != FEATURES {
            return Err(Error::invalid(format!("checkpoint has {f} features, expected {FEATURES}")));
        }
        let hidden: usize = doc.get_parsed("hidden")?;
        let stats = NormStats {
            mean: doc.get_f64_list_len("feature_mean", FEATURES)?,
            std: doc.get_f64_list_len("feature_std", FEATURES)?,
        };
        let mut m = WindowModel::zeros(hidden, stats)?;
        let theta = doc.get_f64_list_len("theta", m.theta.len())?;
        m.set_parameters(&theta)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        WindowModel::from_kv(&KvDocument::read(path)?)
    }
}

impl CorrectionModel for WindowModel {
    fn parameters(&self) -> &[f64] {
        &self.theta
    }

    fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::invalid(format!(
                "{} parameters given, model has {}",
                theta.len(),
                self.theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    fn predict(&self, seg: &ImuSegment) -> Result<CorrectionOutput> {
        let (_, _, raw) = self.forward(seg)?;
        let (sigma, eta) = map_raw_outputs(&raw);
        Ok(CorrectionOutput::uniform(seg.len(), sigma, eta))
    }

    fn window_raw(&self, seg: &ImuSegment) -> Option<Result<[f64; OUTPUTS]>> {
        Some(self.forward(seg).map(|(_, _, raw)| raw))
    }

    fn window_backprop(&self, seg: &ImuSegment, d_raw: &[f64; OUTPUTS]) -> Option<Result<Vec<f64>>> {
        let (z, hid, _) = match self.forward(seg) {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        let h = self.hidden;
        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![0.0; self.theta.len()];
        let mut d_hid = vec![0.0; h];
        for o in 0..OUTPUTS {
            grad[b2 + o] = d_raw[o];
            for i in 0..h {
                grad[w2 + o * h + i] = d_raw[o] * hid[i];
                d_hid[i] += d_raw[o] * self.theta[w2 + o * h + i];
            }
        }
        for i in 0..h {
            let d_pre = d_hid[i] * (1.0 - hid[i] * hid[i]);
            grad[b1 + i] = d_pre;
            for (j, zj) in z.iter().enumerate() {
                grad[i * FEATURES + j] = d_pre * zj;
            }
        }
        Some(Ok(grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_v: f64,
    pub l_p: f64,
    pub l_r_cov: f64,
    pub l_v_cov: f64,
    pub l_p_cov: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(pose: (f64, f64, f64), cov: (f64, f64, f64), epsilon: f64) -> Self {
        let mut b = LossBreakdown {
            l_r: pose.0,
            l_v: pose.1,
            l_p: pose.2,
            l_r_cov: cov.0,
            l_v_cov: cov.1,
            l_p_cov: cov.2,
            total: 0.0,
        };
        b.total = b.weighted_total(epsilon);
        b
    }

    pub fn pose_sum(&self) -> f64 {
        self.l_r + self.l_v + self.l_p
    }

    pub fn cov_sum(&self) -> f64 {
        self.l_r_cov + self.l_v_cov + self.l_p_cov
    }

    pub fn weighted_total(&self, epsilon: f64) -> f64 {
        self.pose_sum() + epsilon * self.cov_sum()
    }
}

/// `(‖Log(R_labelᵀR_pred)‖, ‖v_label − v_pred‖, ‖p_label − p_pred‖)`.
pub fn pose_losses(pred: &NavState, label: &NavState) -> (f64, f64, f64) {
    let dr = label.rotation.inverse() * pred.rotation;
    (
        log_so3(&dr).norm(),
        (label.velocity - pred.velocity).norm(),
        (label.position - pred.position).norm(),
    )
}

/// `½(eᵀΣ⁻¹e + ln det Σ)` for one 3×3 block.
pub fn gaussian_nll(e: &Vector3<f64>, sigma: &Matrix3<f64>, what: &str) -> Result<f64> {
    let sym = (sigma + sigma.transpose()) * 0.5;
    let det = sym.determinant();
    if !(det.is_finite() && det >= 1e-300) {
        return Err(Error::DegenerateCovariance(format!("{what} block has determinant {det:e}")));
    }
    let chol = nalgebra::Cholesky::new(sym)
        .ok_or_else(|| Error::DegenerateCovariance(format!("{what} block is not positive definite")))?;
    let y = chol.l().solve_lower_triangular(e).unwrap_or_else(|| Vector3::from_element(f64::NAN));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let v = 0.5 * (y.norm_squared() + logdet);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DegenerateCovariance(format!("{what} block is numerically singular")))
    }
}

/// Uncertainty-aware losses on the three diagonal blocks of `cov`, with the
/// rotation error `Log(R_predᵀR_label)` and world-frame velocity/position
/// errors. `cov` must already be expressed in those frames.
pub fn cov_losses(pred: &NavState, label: &NavState, cov: &Matrix9) -> Result<(f64, f64, f64)> {
    let e_r = log_so3(&(pred.rotation.inverse() * label.rotation));
    let e_v = label.velocity - pred.velocity;
    let e_p = label.position - pred.position;
    let block = |b: usize| cov.fixed_view::<3, 3>(3 * b, 3 * b).into_owned();
    Ok((
        gaussian_nll(&e_r, &block(0), "rotation")?,
        gaussian_nll(&e_v, &block(1), "velocity")?,
        gaussian_nll(&e_p, &block(2), "position")?,
    ))
}

/// Rotates the velocity and position blocks of a start-frame covariance into
/// the world frame with the start rotation; the rotation block is left in the
/// body frame.
pub fn covariance_to_world(cov: &Matrix9, start_rotation: &Matrix3<f64>) -> Matrix9 {
    let mut t = Matrix9::identity();
    t.fixed_view_mut::<3, 3>(3, 3).copy_from(start_rotation);
    t.fixed_view_mut::<3, 3>(6, 6).copy_from(start_rotation);
    t * cov * t.transpose()
}

/// `(1/|B|)·Σ w·[L_r + L_v + L_p + ε(L_r_cov + L_v_cov + L_p_cov)]`.
pub fn batch_loss(items: &[(LossBreakdown, f64)], epsilon: f64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(k) = items.iter().position(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid(format!("batch weight {k} is negative or non-finite")));
    }
    Ok(items.iter().map(|(b, w)| w * b.weighted_total(epsilon)).sum::<f64>() / items.len() as f64)
}

/// One supervised segment: IMU between two label times, the label state at
/// the start, the label state at the end and its motion weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub segment: ImuSegment,
    pub start: NavState,
    pub label: NavState,
    pub weight: f64,
}

/// Predicted end state and its loss terms for one item.
pub fn item_loss(item: &TrainItem, corr: &CorrectionOutput, gravity: &Vector3<f64>, epsilon: f64) -> Result<(NavState, LossBreakdown)> {
    let delta = preintegrate_with_covariance(&item.segment, corr, &Matrix9::zeros())?;
    let dt = item.label.t - item.start.t;
    let pred = propagate_state(&item.start, &delta, gravity, dt);
    let cov = covariance_to_world(&delta.cov, item.start.rotation.matrix());
    let pose = pose_losses(&pred, &item.label);
    let covl = cov_losses(&pred, &item.label, &cov)?;
    Ok((pred, LossBreakdown::new(pose, covl, epsilon)))
}

fn item_loss_raw(item: &TrainItem, raw: &[f64; OUTPUTS], gravity: &Vector3<f64>, epsilon: f64) -> Result<f64> {
    let (sigma, eta) = map_raw_outputs(raw);
    let corr = CorrectionOutput::uniform(item.segment.len(), sigma, eta);
    Ok(item_loss(item, &corr, gravity, epsilon)?.1.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Central differences over every parameter.
    FiniteDifference,
    /// Central differences over each window's raw outputs, chained through
    /// the model's own backward pass.
    OutputChain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub gradient_mode: GradientMode,
    pub fd_step: f64,
    pub optimizer: Optimizer,
    /// Items per step; 0 uses the whole dataset.
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epsilon: 1e-3,
            learning_rate: 1e-2,
            epochs: 30,
            gradient_mode: GradientMode::FiniteDifference,
            fd_step: 1e-6,
            optimizer: Optimizer::GradientDescent,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be nonnegative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("at least one epoch is required"));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(Error::invalid("finite-difference step must be positive"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let ok = (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0;
            if !ok {
                return Err(Error::invalid("Adam needs betas in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }
}

/// A batch-decomposable loss over a parameter vector.
pub trait Objective {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn loss(&self, theta: &[f64], batch: &[usize]) -> Result<f64>;

    /// Defaults to central differences of [`Objective::loss`].
    fn gradient(&self, theta: &[f64], batch: &[usize], h: f64) -> Result<Vec<f64>> {
        fd_gradient(|t| self.loss(t, batch), theta, h)
    }
}

/// Central-difference gradient of `f` at `theta`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut t = theta.to_vec();
    let mut g = vec![0.0; theta.len()];
    for j in 0..theta.len() {
        t[j] = theta[j] + h;
        let plus = f(&t)?;
        t[j] = theta[j] - h;
        let minus = f(&t)?;
        t[j] = theta[j];
        g[j] = (plus - minus) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Whole-dataset loss after each epoch.
    pub history: Vec<f64>,
    pub steps: usize,
}

/// Mini-batch descent on `objective`, updating `theta` in place.
pub fn optimize(objective: &impl Objective, theta: &mut [f64], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let n = objective.len();
    if n == 0 {
        return Err(Error::invalid("training dataset is empty"));
    }
    let all: Vec<usize> = (0..n).collect();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut steps = 0;
    let initial_loss = objective.loss(theta, &all)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = all.clone();
    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let g = objective.gradient(theta, chunk, cfg.fd_step)?;
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient entry {j} in epoch {epoch}")));
            }
            steps += 1;
            match cfg.optimizer {
                Optimizer::GradientDescent => {
                    for (t, gj) in theta.iter_mut().zip(&g) {
                        *t -= cfg.learning_rate * gj;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(steps as i32);
                    let c2 = 1.0 - beta2.powi(steps as i32);
                    for j in 0..theta.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        theta[j] -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        let loss = objective.loss(theta, &all)?;
        log::debug!("epoch {epoch}: loss {loss:.6e}");
        history.push(loss);
    }
    Ok(TrainReport {
        initial_loss,
        history,
        steps,
    })
}

/// The self-supervised training objective of a correction model.
pub struct SelfSupervised<'a, M: CorrectionModel> {
    pub model: M,
    pub items: &'a [TrainItem],
    pub gravity: Vector3<f64>,
    pub epsilon: f64,
    pub mode: GradientMode,
}

impl<M: CorrectionModel> SelfSupervised<'_, M> {
    fn with_theta(&self, theta: &[f64]) -> Result<M> {
        let mut m = self.model.clone();
        m.set_parameters(theta)?;
        Ok(m)
    }

    fn item_total(&self, model: &M, k: usize) -> Result<f64> {
        let item = &self.items[k];
        let corr = model.predict(&item.segment)?;
        let total = item_loss(item, &corr, &self.gravity, self.epsilon)
            .map_err(|e| Error::NonFinite(format!("segment {k}: {e}")))?
            .1
            .total;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss of segment {k} is {total}")));
        }
        Ok(total)
    }

    fn chain_gradient(&self, theta: &[f64], batch: &[usize], h: f64) -> Result<Vec<f64>> {
        let model = self.with_theta(theta)?;
        let mut grad = vec![0.0; theta.len()];
        for &k in batch {
            let item = &self.items[k];
            let raw = model
                .window_raw(&item.segment)
                .ok_or_else(|| Error::invalid("output-chain gradients need a window model"))??;
            let w = item.weight;
            if w == 0.0 {
                continue;
            }
            let mut d_raw = [0.0; OUTPUTS];
            let mut r = raw;
            for o in 0..OUTPUTS {
                r[o] = raw[o] + h;
                let plus = item_loss_raw(item, &r, &self.gravity, self.epsilon);
                r[o] = raw[o] - h;
                let minus = item_loss_raw(item, &r, &self.gravity, self.epsilon);
                r[o] = raw[o];
                let (plus, minus) = (
                    plus.map_err(|e| Error::NonFinite(format!("segment {k}: {e}")))?,
                    minus.map_err(|e| Error::NonFinite(format!("segment {k}: {e}")))?,
                );
                d_raw[o] = w * (plus - minus) / (2.0 * h);
            }
            if let Some(o) = d_raw.iter().position(|d| !d.is_finite()) {
                return Err(Error::NonFinite(format!("segment {k}: output gradient {o}")));
            }
            let g = model
                .window_backprop(&item.segment, &d_raw)
                .ok_or_else(|| Error::invalid("output-chain gradients need a window model"))??;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(grad)
    }

    /// Per-item breakdowns at the current parameters.
    pub fn breakdowns(&self) -> Result<Vec<(LossBreakdown, f64)>> {
        self.items
            .iter()
            .enumerate()
            .map(|(k, item)| {
                let corr = self.model.predict(&item.segment)?;
                let (_, b) = item_loss(item, &corr, &self.gravity, self.epsilon)
                    .map_err(|e| Error::NonFinite(format!("segment {k}: {e}")))?;
                Ok((b, item.weight))
            })
            .collect()
    }
}

impl<M: CorrectionModel> Objective for SelfSupervised<'_, M> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn loss(&self, theta: &[f64], batch: &[usize]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let model = self.with_theta(theta)?;
        let mut sum = 0.0;
        for &k in batch {
            let w = self.items[k].weight;
            if w != 0.0 {
                sum += w * self.item_total(&model, k)?;
            }
        }
        Ok(sum / batch.len() as f64)
    }

    fn gradient(&self, theta: &[f64], batch: &[usize], h: f64) -> Result<Vec<f64>> {
        match self.mode {
            GradientMode::FiniteDifference => fd_gradient(|t| self.loss(t, batch), theta, h),
            GradientMode::OutputChain => self.chain_gradient(theta, batch, h),
        }
    }
}

/// Trains `model` on `items`; returns the trained model and the report.
pub fn train<M: CorrectionModel>(model: &M, items: &[TrainItem], gravity: &Vector3<f64>, cfg: &TrainConfig) -> Result<(M, TrainReport)> {
    if items.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if let Some(k) = items.iter().position(|i| !(i.weight.is_finite() && i.weight >= 0.0)) {
        return Err(Error::invalid(format!("segment {k} has an invalid weight")));
    }
    let objective = SelfSupervised {
        model: model.clone(),
        items,
        gravity: *gravity,
        epsilon: cfg.epsilon,
        mode: cfg.gradient_mode,
    };
    let mut theta = model.parameters().to_vec();
    let report = optimize(&objective, &mut theta, cfg)?;
    let mut trained = model.clone();
    trained.set_parameters(&theta)?;
    Ok((trained, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::exp_so3;
    use crate::imu::ImuSample;
    use approx::assert_relative_eq;

    fn segment(seed: u64) -> ImuSegment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..40)
            .map(|k| {
                ImuSample::new(
                    k as f64 * 0.005,
                    Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
                    Vector3::new(0.0, 0.0, 9.81) + Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                )
            })
            .collect();
        ImuSegment::new(samples, 0.0, 0.2).unwrap()
    }

    #[test]
    fn parameter_count() {
        let m = WindowModel::zeros(8, NormStats::identity(FEATURES)).unwrap();
        assert_eq!(m.parameters().len(), 13 * 8 + 9 * 12);
    }

    #[test]
    fn zero_model_predicts_softplus_zero() {
        let m = WindowModel::zeros(4, NormStats::identity(FEATURES)).unwrap();
        let out = m.predict(&segment(1)).unwrap();
        assert_eq!(out.len(), 40);
        for (s, e) in out.sigma.iter().zip(&out.eta) {
            assert_eq!(*s, Vector6::zeros());
            assert_relative_eq!(*e, Vector6::from_element(2f64.ln() + ETA_FLOOR), epsilon = 1e-15);
        }
    }

    #[test]
    fn prediction_is_deterministic_and_channel_local() {
        let m = WindowModel::new(4, NormStats::identity(FEATURES), 3, -2.0).unwrap();
        let seg = segment(2);
        assert_eq!(m.predict(&seg).unwrap(), m.predict(&seg.clone()).unwrap());
        // Output bias of channel 2 only moves sigma[2].
        let mut m2 = m.clone();
        let mut theta = m.parameters().to_vec();
        let b2 = theta.len() - OUTPUTS;
        theta[b2 + 2] += 0.5;
        m2.set_parameters(&theta).unwrap();
        let (a, b) = (m.predict(&seg).unwrap(), m2.predict(&seg).unwrap());
        let ds = b.sigma[0] - a.sigma[0];
        assert_relative_eq!(ds[2], 0.5, epsilon = 1e-12);
        assert!(ds.iter().enumerate().all(|(i, v)| i == 2 || *v == 0.0));
        assert_eq!(a.eta, b.eta);
    }

    #[test]
    fn pose_loss_examples() {
        let s = NavState::default();
        assert_eq!(pose_losses(&s, &s), (0.0, 0.0, 0.0));
        let mut p = s;
        p.position = Vector3::new(3.0, 4.0, 0.0);
        assert_relative_eq!(pose_losses(&p, &s).2, 5.0);
        let mut r = s;
        r.rotation = exp_so3(&Vector3::new(0.0, 0.0, 0.2));
        assert!((pose_losses(&r, &s).0 - 0.2).abs() <= 1e-9);
    }

    #[test]
    fn cov_loss_examples() {
        let s = NavState::default();
        let (a, b, c) = cov_losses(&s, &s, &Matrix9::identity()).unwrap();
        assert_eq!((a, b, c), (0.0, 0.0, 0.0));
        let (a, _, _) = cov_losses(&s, &s, &(Matrix9::identity() * 4.0)).unwrap();
        assert_relative_eq!(a, 0.5 * 64f64.ln(), epsilon = 1e-12);
        let mut p = s;
        p.position = Vector3::new(0.3, -0.1, 0.2);
        let diag = [0.5, 2.0, 0.1];
        let mut cov = Matrix9::identity();
        for (k, d) in diag.iter().enumerate() {
            cov[(6 + k, 6 + k)] = *d;
        }
        let oracle: f64 = 0.5
            * (0..3)
                .map(|k| p.position[k].powi(2) / diag[k] + diag[k].ln())
                .sum::<f64>();
        assert_relative_eq!(cov_losses(&p, &s, &cov).unwrap().2, oracle, epsilon = 1e-12);
        let mut sing = Matrix9::identity();
        sing[(3, 3)] = 0.0;
        assert!(matches!(cov_losses(&s, &s, &sing), Err(Error::DegenerateCovariance(_))));
    }

    #[test]
    fn batch_loss_examples() {
        let a = LossBreakdown::new((1.0, 2.0, 3.0), (0.5, -1.0, 2.0), 0.1);
        let b = LossBreakdown::new((0.1, 0.2, 0.3), (1.0, 1.0, 1.0), 0.1);
        assert_relative_eq!(batch_loss(&[(a, 1.0), (b, 1.0)], 0.1).unwrap(), 0.5 * (a.total + b.total));
        assert_relative_eq!(batch_loss(&[(a, 0.0), (b, 1.0)], 0.1).unwrap(), 0.5 * b.total);
        assert!(batch_loss(&[], 0.1).is_err());
    }

    struct Quadratic;

    impl Objective for Quadratic {
        fn len(&self) -> usize {
            1
        }

        fn loss(&self, theta: &[f64], _batch: &[usize]) -> Result<f64> {
            Ok((theta[0] - 3.0).powi(2))
        }
    }

    #[test]
    fn gradient_descent_matches_closed_form() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 10,
            fd_step: 1e-4,
            ..Default::default()
        };
        let mut theta = vec![0.0];
        optimize(&Quadratic, &mut theta, &cfg).unwrap();
        // θ_{k+1} = θ_k − 0.2(θ_k − 3) ⇒ θ_k = 3 − 3·0.8^k.
        assert!((theta[0] - (3.0 - 3.0 * 0.8f64.powi(10))).abs() < 1e-8);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut stats = NormStats::identity(FEATURES);
        stats.mean[3] = 0.1;
        stats.std[5] = 1.0 / 3.0;
        let m = WindowModel::new(5, stats, 9, -3.0).unwrap();
        let text = m.to_kv().to_string();
        let back = WindowModel::from_kv(&KvDocument::parse(&text, "mem").unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_kv().to_string(), text);
    }
}
