//! Pipeline configuration as strict JSON.
//!
//! Every section has defaults, so `{}` is a complete configuration. Unknown
//! keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sio_core::correction::{GradientMode, Optimizer, TrainConfig};
use sio_core::motion::EmConfig;
use sio_core::pgo::{InfoWeights, SolverConfig};
use sio_core::pseudolabel::LabelConfig;
use sio_core::registration::IcpConfig;

use crate::error::{io_err, AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Single source of randomness for every stage.
    pub seed: u64,
    /// Expected IMU window length, seconds; segments must match within 20 %.
    pub window_duration: f64,
    /// Reinitialization interval for the relative pose error, seconds.
    pub rpe_interval: f64,
    pub icp: IcpSection,
    pub weights: WeightsSection,
    pub solver: SolverSection,
    /// Nodes per training PGO window.
    pub chunk_nodes: usize,
    pub gmm: GmmSection,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            window_duration: 0.2,
            rpe_interval: 0.2,
            icp: IcpSection::default(),
            weights: WeightsSection::default(),
            solver: SolverSection::default(),
            chunk_nodes: 20,
            gmm: GmmSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpSection {
    pub max_iterations: usize,
    /// Correspondences farther than this are dropped, meters.
    pub correspondence_cutoff: f64,
    pub convergence_tol: f64,
    /// Overlap inlier distance; `null` uses twice the target's median spacing.
    pub overlap_threshold: Option<f64>,
}

impl Default for IcpSection {
    fn default() -> Self {
        IcpSection {
            max_iterations: 60,
            correspondence_cutoff: 0.2,
            convergence_tol: 1e-10,
            overlap_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    /// Training PGO: ICP rotation, ICP translation, IMU rotation, IMU velocity and position.
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    /// Inference PGO: ICP rotation and translation.
    pub kappa_r: f64,
    pub kappa_p: f64,
    /// Inference PGO: IMU rotation, velocity and position.
    pub tau_r: f64,
    pub tau_v: f64,
    pub tau_p: f64,
}

/// ICP information as inverse variances of roughly 1e-4 rad and 1 mm, so that
/// registration is not swamped by the learned IMU covariances.
pub const DEFAULT_KAPPA_R: f64 = 1e8;
pub const DEFAULT_KAPPA_P: f64 = 1e6;

impl Default for WeightsSection {
    fn default() -> Self {
        let w = InfoWeights::default();
        WeightsSection {
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            w4: w.w4,
            kappa_r: DEFAULT_KAPPA_R,
            kappa_p: DEFAULT_KAPPA_P,
            tau_r: w.tau_r,
            tau_v: w.tau_v,
            tau_p: w.tau_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub cost_tol: f64,
    pub step_tol: f64,
    pub jacobian_step: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        SolverSection {
            max_iterations: s.max_iterations,
            lambda_init: s.lambda_init,
            lambda_up: s.lambda_up,
            lambda_down: s.lambda_down,
            cost_tol: s.cost_tol,
            step_tol: s.step_tol,
            jacobian_step: s.jacobian_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSection {
    /// Component counts compared by BIC.
    pub candidates: Vec<usize>,
    /// Class-balance hyperparameter in `[0, 1)`.
    pub beta: f64,
    pub max_iterations: usize,
    pub tol: f64,
    pub var_floor: f64,
    pub collapse_weight: f64,
}

impl Default for GmmSection {
    fn default() -> Self {
        let em = EmConfig::default();
        GmmSection {
            candidates: (1..=6).collect(),
            beta: 0.999,
            max_iterations: em.max_iterations,
            tol: em.tol,
            var_floor: em.var_floor,
            collapse_weight: em.collapse_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSetting {
    FiniteDifference,
    OutputChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerSetting {
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Hidden units of the window model.
    pub hidden: usize,
    /// Initial bias of the variance outputs before the softplus.
    pub eta_bias: f64,
    /// Weight of the covariance loss.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub gradient_mode: GradientSetting,
    pub fd_step: f64,
    pub optimizer: OptimizerSetting,
    /// Segments per step; 0 uses all.
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            hidden: 8,
            eta_bias: -10.0,
            epsilon: 1e-3,
            learning_rate: 1e-2,
            epochs: 100,
            gradient_mode: GradientSetting::OutputChain,
            fd_step: 1e-5,
            optimizer: OptimizerSetting::Adam,
            batch_size: 32,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|source| AppError::Json {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AppError::Config(msg));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.window_duration) {
            return bad("window_duration must be positive".into());
        }
        if !positive(self.rpe_interval) {
            return bad("rpe_interval must be positive".into());
        }
        if self.chunk_nodes < 2 {
            return bad("chunk_nodes must be at least 2".into());
        }
        if self.gmm.candidates.is_empty() || self.gmm.candidates.contains(&0) {
            return bad("gmm.candidates must be nonempty positive counts".into());
        }
        if !(self.gmm.beta.is_finite() && (0.0..1.0).contains(&self.gmm.beta)) {
            return bad("gmm.beta must lie in [0, 1)".into());
        }
        if !(positive(self.gmm.tol) && positive(self.gmm.var_floor) && positive(self.gmm.collapse_weight)) || self.gmm.max_iterations == 0 {
            return bad("gmm iteration settings must be positive".into());
        }
        if self.train.hidden == 0 || !self.train.eta_bias.is_finite() {
            return bad("train.hidden must be positive and train.eta_bias finite".into());
        }
        self.icp().validate()?;
        self.weights().validate()?;
        self.solver().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn icp(&self) -> IcpConfig {
        IcpConfig {
            max_iterations: self.icp.max_iterations,
            correspondence_cutoff: self.icp.correspondence_cutoff,
            convergence_tol: self.icp.convergence_tol,
            overlap_threshold: self.icp.overlap_threshold,
        }
    }

    pub fn weights(&self) -> InfoWeights {
        let w = &self.weights;
        InfoWeights {
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            w4: w.w4,
            kappa_r: w.kappa_r,
            kappa_p: w.kappa_p,
            tau_r: w.tau_r,
            tau_v: w.tau_v,
            tau_p: w.tau_p,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            max_iterations: s.max_iterations,
            lambda_init: s.lambda_init,
            lambda_up: s.lambda_up,
            lambda_down: s.lambda_down,
            cost_tol: s.cost_tol,
            step_tol: s.step_tol,
            jacobian_step: s.jacobian_step,
        }
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            icp: self.icp(),
            weights: self.weights(),
            solver: self.solver(),
            chunk_nodes: self.chunk_nodes,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            max_iterations: self.gmm.max_iterations,
            tol: self.gmm.tol,
            var_floor: self.gmm.var_floor,
            collapse_weight: self.gmm.collapse_weight,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epsilon: t.epsilon,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            gradient_mode: match t.gradient_mode {
                GradientSetting::FiniteDifference => GradientMode::FiniteDifference,
                GradientSetting::OutputChain => GradientMode::OutputChain,
            },
            fd_step: t.fd_step,
            optimizer: match t.optimizer {
                OptimizerSetting::Gd => Optimizer::GradientDescent,
                OptimizerSetting::Adam => Optimizer::adam(),
            },
            batch_size: t.batch_size,
            seed: self.derived_seed(Purpose::Shuffle),
        }
    }

    pub fn derived_seed(&self, purpose: Purpose) -> u64 {
        self.seed.wrapping_add(purpose as u64)
    }
}

/// Streams derived from the single configured seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Gmm = 0,
    ModelInit = 1,
    Shuffle = 2,
}
