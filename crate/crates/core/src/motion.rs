//! Motion descriptors over IMU windows, a diagonal Gaussian mixture fitted by
//! EM with BIC model selection, class-balanced component weights and the 1-D
//! Wasserstein distance.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imu::ImuSegment;
use crate::kv::KvDocument;
use crate::{Error, Result};

/// Number of window features.
pub const FEATURES: usize = 12;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mut it = values.clone();
    if let Some(first) = it.next() {
        // Summation rounding would otherwise leave a spurious spread.
        if it.all(|v| v == first) {
            return (first, 0.0);
        }
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Raw window features:
/// per-axis gyro means (3), per-axis accel means (3),
/// gyro and accel magnitude means (2), magnitude standard deviations (2),
/// and standard deviations of the magnitudes' first differences (2).
pub fn window_features(seg: &ImuSegment) -> Result<[f64; FEATURES]> {
    let s = seg.samples();
    if s.len() < 4 {
        return Err(Error::invalid(format!("window has {} samples, need at least 4", s.len())));
    }
    let n = s.len() as f64;
    let mut f = [0.0; FEATURES];
    for k in 0..3 {
        f[k] = s.iter().map(|x| x.gyro[k]).sum::<f64>() / n;
        f[3 + k] = s.iter().map(|x| x.accel[k]).sum::<f64>() / n;
    }
    let gm: Vec<f64> = s.iter().map(|x| x.gyro.norm()).collect();
    let am: Vec<f64> = s.iter().map(|x| x.accel.norm()).collect();
    let (g_mean, g_std) = mean_std(gm.iter().copied());
    let (a_mean, a_std) = mean_std(am.iter().copied());
    let (_, gd_std) = mean_std(gm.windows(2).map(|w| w[1] - w[0]));
    let (_, ad_std) = mean_std(am.windows(2).map(|w| w[1] - w[0]));
    f[6] = g_mean;
    f[7] = a_mean;
    f[8] = g_std;
    f[9] = a_std;
    f[10] = gd_std;
    f[11] = ad_std;
    Ok(f)
}

/// Per-feature standardization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviations; constant features use 1.
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("cannot standardize an empty dataset"));
        };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("feature rows have different lengths"));
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let (m, s) = mean_std(rows.iter().map(|r| r[j]));
            mean[j] = m;
            std[j] = if s > 1e-12 * m.abs().max(1.0) { s } else { 1.0 };
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        NormStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Standardized feature vector of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionDescriptor {
    pub z: Vec<f64>,
}

/// Features of `window`, z-scored with `stats`; the window must last within
/// 20% of `window_duration`.
pub fn extract_descriptor(window: &ImuSegment, stats: &NormStats, window_duration: f64) -> Result<MotionDescriptor> {
    if (window.duration() - window_duration).abs() > 0.2 * window_duration {
        return Err(Error::invalid(format!(
            "window lasts {} s, expected {window_duration} s ± 20%",
            window.duration()
        )));
    }
    let f = window_features(window)?;
    Ok(MotionDescriptor { z: stats.apply(&f) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Absolute log-likelihood increase below which EM stops.
    pub tol: f64,
    pub var_floor: f64,
    /// Component weight below which a component counts as collapsed.
    pub collapse_weight: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 300,
            tol: 1e-8,
            var_floor: 1e-4,
            collapse_weight: 1e-8,
        }
    }
}

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Free parameters: `G·(2D + 1) − 1`.
    pub fn parameter_count(&self) -> usize {
        self.components() * (2 * self.dim() + 1) - 1
    }

    pub fn validate(&self) -> Result<()> {
        let (g, d) = (self.components(), self.dim());
        if g == 0 || d == 0 {
            return Err(Error::invalid("mixture has no components or zero dimension"));
        }
        if self.means.len() != g || self.vars.len() != g || self.means.iter().chain(&self.vars).any(|v| v.len() != d) {
            return Err(Error::invalid("mixture parameter shapes disagree"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("mixture weights must sum to 1"));
        }
        if self.vars.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("mixture variances must be positive"));
        }
        Ok(())
    }

    /// `ln(π_g·N(z | μ_g, Σ_g))` for one component.
    pub fn log_weighted_density(&self, g: usize, z: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, m), v) in z.iter().zip(&self.means[g]).zip(&self.vars[g]) {
            s += (2.0 * PI * v).ln() + (x - m).powi(2) / v;
        }
        self.weights[g].ln() - 0.5 * s
    }

    /// `ln p(z)`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let logs: Vec<f64> = (0..self.components()).map(|g| self.log_weighted_density(g, z)).collect();
        log_sum_exp(&logs)
    }

    pub fn log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        data.iter().map(|z| self.log_density(z)).sum()
    }

    /// `k·ln N − 2·ln L`.
    pub fn bic(&self, data: &[Vec<f64>]) -> f64 {
        self.parameter_count() as f64 * (data.len() as f64).ln() - 2.0 * self.log_likelihood(data)
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new("gmm", 1);
        doc.push("components", self.components().to_string());
        doc.push("dim", self.dim().to_string());
        doc.push_f64_list("weights", &self.weights);
        doc.push_f64_list("means", &self.means.concat());
        doc.push_f64_list("vars", &self.vars.concat());
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        doc.expect_header("gmm", 1)?;
        let g: usize = doc.get_parsed("components")?;
        let d: usize = doc.get_parsed("dim")?;
        let weights = doc.get_f64_list_len("weights", g)?;
        let means = doc.get_f64_list_len("means", g * d)?;
        let vars = doc.get_f64_list_len("vars", g * d)?;
        let model = GmmModel {
            weights,
            means: means.chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
            vars: vars.chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Posterior component probabilities, computed in the log domain.
pub fn responsibilities(model: &GmmModel, z: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = (0..model.components()).map(|g| model.log_weighted_density(g, z)).collect();
    let lse = log_sum_exp(&logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

/// One EM run for a fixed component count.
#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub model: GmmModel,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Log-likelihood per iteration; restarted after a component re-seed.
    pub history: Vec<f64>,
    pub reseeds: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn global_vars(data: &[Vec<f64>], floor: f64) -> Vec<f64> {
    let d = data[0].len();
    (0..d)
        .map(|j| mean_std(data.iter().map(|r| r[j])).1.powi(2).max(floor))
        .collect()
}

/// k-means++ seeding followed by one hard assignment.
fn kmeans_pp_init(data: &[Vec<f64>], g: usize, floor: f64, rng: &mut ChaCha8Rng) -> GmmModel {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < g {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centers[centers.len() - 1]));
        }
    }
    let fallback = global_vars(data, floor);
    let d = data[0].len();
    let mut counts = vec![0usize; g];
    let mut sums = vec![vec![0.0; d]; g];
    let mut sq = vec![vec![0.0; d]; g];
    for x in data {
        let k = (0..g)
            .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
            .unwrap_or(0);
        counts[k] += 1;
        for j in 0..d {
            sums[k][j] += x[j];
            sq[k][j] += x[j] * x[j];
        }
    }
    let mut model = GmmModel {
        weights: vec![0.0; g],
        means: centers,
        vars: vec![fallback.clone(); g],
    };
    for k in 0..g {
        model.weights[k] = (counts[k].max(1)) as f64;
        if counts[k] >= 2 {
            let c = counts[k] as f64;
            for j in 0..d {
                let m = sums[k][j] / c;
                model.means[k][j] = m;
                model.vars[k][j] = (sq[k][j] / c - m * m).max(floor);
            }
        }
    }
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);
    model
}

/// EM for `g` components from a k-means++ start drawn from `rng`. Stops once
/// the log-likelihood gains less than `tol`; a rounding-level decrease keeps
/// the previous model, so `history` never decreases.
pub fn fit_em(data: &[Vec<f64>], g: usize, cfg: &EmConfig, rng: &mut ChaCha8Rng) -> Result<EmRun> {
    if g == 0 || data.is_empty() {
        return Err(Error::invalid("EM needs data and at least one component"));
    }
    let (n, d) = (data.len(), data[0].len());
    let mut model = kmeans_pp_init(data, g, cfg.var_floor, rng);
    let fallback = global_vars(data, cfg.var_floor);
    let mut reseeded = vec![false; g];
    let mut history: Vec<f64> = Vec::new();
    let mut resp = vec![vec![0.0; g]; n];
    let mut point_ll = vec![0.0; n];
    let mut iterations = 0;
    let mut reseeds = 0;
    let mut ll = f64::NEG_INFINITY;
    let mut evaluated = model.clone();
    while iterations < cfg.max_iterations {
        iterations += 1;
        // E-step.
        ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let logs: Vec<f64> = (0..g).map(|k| model.log_weighted_density(k, x)).collect();
            let lse = log_sum_exp(&logs);
            point_ll[i] = lse;
            ll += lse;
            for k in 0..g {
                resp[i][k] = (logs[k] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::NonFinite(format!("EM log-likelihood at iteration {iterations}")));
        }
        if let Some(&prev) = history.last() {
            let slack = 1e-9 * prev.abs().max(1.0);
            if ll < prev - slack {
                return Err(Error::NonFinite(format!(
                    "EM log-likelihood decreased from {prev} to {ll} at iteration {iterations}"
                )));
            }
            if ll < prev {
                // Rounding-level decrease at convergence: keep the previous model.
                model = evaluated;
                ll = prev;
                break;
            }
            history.push(ll);
            if ll - prev < cfg.tol {
                break;
            }
        } else {
            history.push(ll);
        }
        // M-step.
        evaluated.clone_from(&model);
        let mut collapsed = None;
        for k in 0..g {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk / (n as f64) < cfg.collapse_weight {
                collapsed = Some(k);
                break;
            }
            let mut mean = vec![0.0; d];
            for (r, x) in resp.iter().zip(data) {
                for j in 0..d {
                    mean[j] += r[k] * x[j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for (r, x) in resp.iter().zip(data) {
                for j in 0..d {
                    var[j] += r[k] * (x[j] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v = (*v / nk).max(cfg.var_floor));
            model.weights[k] = nk / n as f64;
            model.means[k] = mean;
            model.vars[k] = var;
        }
        if let Some(k) = collapsed {
            if reseeded[k] {
                return Err(Error::EmCollapse { component: k, components: g });
            }
            reseeded[k] = true;
            reseeds += 1;
            // Restart from the worst-explained point.
            let worst = (0..n).min_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b])).unwrap_or(0);
            log::debug!("EM: re-seeding component {k} of {g} at point {worst}");
            model.means[k] = data[worst].clone();
            model.vars[k] = fallback.clone();
            model.weights[k] = 1.0 / g as f64;
            let total: f64 = model.weights.iter().sum();
            model.weights.iter_mut().for_each(|w| *w /= total);
            history.clear();
            continue;
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(EmRun {
        model,
        log_likelihood: ll,
        iterations,
        history,
        reseeds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicEntry {
    pub components: usize,
    pub bic: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    pub table: Vec<BicEntry>,
    pub runs: Vec<EmRun>,
}

/// Fits every candidate count and keeps the minimum-BIC model (ties go to
/// fewer components). Each candidate draws its start from a generator
/// seeded by `(seed, G)`.
pub fn fit_gmm(data: &[Vec<f64>], candidates: &[usize], seed: u64, cfg: &EmConfig) -> Result<GmmFit> {
    let Some(&max_g) = candidates.iter().max() else {
        return Err(Error::invalid("no component-count candidates"));
    };
    if candidates.contains(&0) {
        return Err(Error::invalid("component counts must be positive"));
    }
    if data.len() < 10 * max_g {
        return Err(Error::invalid(format!(
            "{} descriptors are too few for {max_g} components (need {})",
            data.len(),
            10 * max_g
        )));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("descriptors must be finite and of equal nonzero length"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut table = Vec::new();
    let mut runs: Vec<EmRun> = Vec::new();
    for &g in &sorted {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let run = fit_em(data, g, cfg, &mut rng)?;
        let bic = run.model.parameter_count() as f64 * (data.len() as f64).ln() - 2.0 * run.log_likelihood;
        log::debug!("GMM G={g}: lnL {:.6}, BIC {:.6}, {} iterations", run.log_likelihood, bic, run.iterations);
        table.push(BicEntry {
            components: g,
            bic,
            log_likelihood: run.log_likelihood,
        });
        runs.push(run);
    }
    let best = (0..table.len())
        .min_by(|&a, &b| table[a].bic.total_cmp(&table[b].bic))
        .unwrap_or(0);
    Ok(GmmFit {
        model: runs[best].model.clone(),
        table,
        runs,
    })
}

/// Two-column `G BIC` report.
pub fn format_bic_table(table: &[BicEntry]) -> String {
    let mut out = String::from("# G BIC\n");
    for e in table {
        let _ = writeln!(out, "{} {:?}", e.components, e.bic);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceWeights {
    pub beta: f64,
    /// Effective frequencies `N_g = Σ_n γ_g(z_n)`.
    pub counts: Vec<f64>,
    /// `(1 − β)/(1 − β^{N_g})`.
    pub raw: Vec<f64>,
    /// `raw / mean(raw)`.
    pub normalized: Vec<f64>,
}

impl BalanceWeights {
    /// Components with `N_g = 0` (raw weight undefined) take the largest
    /// defined raw weight.
    pub fn from_counts(counts: &[f64], beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!("beta {beta} outside (0, 1)")));
        }
        if counts.is_empty() || counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("component frequencies must be finite and nonnegative"));
        }
        let mut raw: Vec<Option<f64>> = counts
            .iter()
            .map(|&n| {
                let w = (1.0 - beta) / (1.0 - beta.powf(n));
                (n > 0.0 && w.is_finite()).then_some(w)
            })
            .collect();
        let max = raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let fill = if max.is_finite() { max } else { 1.0 };
        let raw: Vec<f64> = raw.iter_mut().map(|w| w.unwrap_or(fill)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let normalized = raw.iter().map(|w| w / mean).collect();
        Ok(BalanceWeights {
            beta,
            counts: counts.to_vec(),
            raw,
            normalized,
        })
    }
}

pub fn balance_weights(model: &GmmModel, descriptors: &[Vec<f64>], beta: f64) -> Result<BalanceWeights> {
    let mut counts = vec![0.0; model.components()];
    for z in descriptors {
        for (c, r) in counts.iter_mut().zip(responsibilities(model, z)) {
            *c += r;
        }
    }
    BalanceWeights::from_counts(&counts, beta)
}

/// `w_GMM(z) = Σ_g γ_g(z)·w̃_g`.
pub fn sample_weight(model: &GmmModel, weights: &BalanceWeights, z: &[f64]) -> f64 {
    responsibilities(model, z)
        .iter()
        .zip(&weights.normalized)
        .map(|(g, w)| g * w)
        .sum()
}

/// Earth mover's distance between two empirical samples on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Wasserstein distance needs nonempty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // ∫|F_a − F_b| over the merged support.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => break,
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Fitted mixture together with the descriptor standardization it was fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub stats: NormStats,
    pub gmm: GmmModel,
    pub beta: f64,
}

impl MotionModel {
    pub fn to_kv(&self) -> KvDocument {
        let mut doc = self.gmm.to_kv();
        doc.push_f64("beta", self.beta);
        doc.push_f64_list("feature_mean", &self.stats.mean);
        doc.push_f64_list("feature_std", &self.stats.std);
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let gmm = GmmModel::from_kv(doc)?;
        let d = gmm.dim();
        Ok(MotionModel {
            beta: doc.get_parsed("beta")?,
            stats: NormStats {
                mean: doc.get_f64_list_len("feature_mean", d)?,
                std: doc.get_f64_list_len("feature_std", d)?,
            },
            gmm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        MotionModel::from_kv(&KvDocument::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::ImuSample;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand_distr::{Distribution, Normal};

    fn blob(rng: &mut ChaCha8Rng, n: usize, center: &[f64], sigma: f64) -> Vec<Vec<f64>> {
        let normal = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| center.iter().map(|c| c + normal.sample(rng)).collect())
            .collect()
    }

    fn const_window(n: usize, dt: f64) -> ImuSegment {
        let samples = (0..n)
            .map(|k| ImuSample::new(k as f64 * dt, Vector3::new(0.1, 0.0, 0.2), Vector3::new(0.0, 0.0, 9.81)))
            .collect();
        ImuSegment::new(samples, 0.0, n as f64 * dt).unwrap()
    }

    #[test]
    fn constant_window_has_zero_spread() {
        let f = window_features(&const_window(40, 0.005)).unwrap();
        assert_eq!(&f[8..], &[0.0; 4]);
        assert_relative_eq!(f[2], 0.2);
        assert_relative_eq!(f[7], 9.81);
        assert!(window_features(&const_window(3, 0.005)).is_err());
    }

    #[test]
    fn descriptor_duration_check() {
        let w = const_window(40, 0.005);
        let stats = NormStats::identity(FEATURES);
        assert!(extract_descriptor(&w, &stats, 0.2).is_ok());
        assert_eq!(extract_descriptor(&w, &stats, 0.2).unwrap(), extract_descriptor(&w, &stats, 0.2).unwrap());
        assert!(extract_descriptor(&w, &stats, 0.5).is_err());
    }

    #[test]
    fn standardized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..5).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64 * 10.0).collect())
            .collect();
        let stats = NormStats::fit(&rows).unwrap();
        let z: Vec<Vec<f64>> = rows.iter().map(|r| stats.apply(r)).collect();
        for j in 0..5 {
            let (m, s) = mean_std(z.iter().map(|r| r[j]));
            assert!(m.abs() < 1e-10);
            assert!((s * s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn bic_picks_one_blob() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = blob(&mut rng, 400, &[1.0, -2.0], 0.5);
        let fit = fit_gmm(&data, &[1, 2, 3], 7, &EmConfig::default()).unwrap();
        assert_eq!(fit.model.components(), 1);
    }

    #[test]
    fn bic_picks_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = blob(&mut rng, 300, &[0.0, 0.0], 1.0);
        data.extend(blob(&mut rng, 300, &[10.0, 0.0], 1.0));
        let fit = fit_gmm(&data, &[1, 2, 3], 11, &EmConfig::default()).unwrap();
        assert_eq!(fit.model.components(), 2);
        let mut xs: Vec<f64> = fit.model.means.iter().map(|m| m[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!(xs[0].abs() < 0.1 && (xs[1] - 10.0).abs() < 0.1, "{xs:?}");
        for run in &fit.runs {
            assert!(run.history.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)));
        }
        assert!(fit.model.validate().is_ok());
    }

    #[test]
    fn responsibilities_examples() {
        let single = GmmModel {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            vars: vec![vec![1.0, 1.0]],
        };
        assert_eq!(responsibilities(&single, &[3.0, 1.0]), vec![1.0]);
        let two = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0, 0.0], vec![20.0, 0.0]],
            vars: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        assert!(responsibilities(&two, &[0.0, 0.0])[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn responsibilities_match_direct_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = GmmModel {
            weights: vec![0.2, 0.5, 0.3],
            means: (0..3).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
            vars: (0..3).map(|_| (0..3).map(|_| rng.random_range(0.5..2.0)).collect()).collect(),
        };
        for _ in 0..50 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let dens: Vec<f64> = (0..3)
                .map(|g| {
                    let mut p = model.weights[g];
                    for j in 0..3 {
                        let v = model.vars[g][j];
                        p *= (-(z[j] - model.means[g][j]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                    }
                    p
                })
                .collect();
            let total: f64 = dens.iter().sum();
            let r = responsibilities(&model, &z);
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for g in 0..3 {
                assert!((r[g] - dens[g] / total).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn balance_weight_examples() {
        let b = BalanceWeights::from_counts(&[1.0, 2.0], 0.9).unwrap();
        assert_relative_eq!(b.raw[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(b.raw[1], 0.1 / 0.19, epsilon = 1e-12);
        assert!((b.normalized[0] - 1.3103).abs() < 1e-4);
        assert!((b.normalized[1] - 0.6897).abs() < 1e-4);
        let eq = BalanceWeights::from_counts(&[5.0, 5.0, 5.0], 0.99).unwrap();
        assert!(eq.normalized.iter().all(|w| (w - 1.0).abs() < 1e-12));
        let big = BalanceWeights::from_counts(&[1e6], 0.999).unwrap();
        assert!((big.raw[0] - 0.001).abs() < 1e-6);
        let empty = BalanceWeights::from_counts(&[0.0, 3.0, 10.0], 0.9).unwrap();
        assert_eq!(empty.raw[0], empty.raw[1]);
        assert!(BalanceWeights::from_counts(&[1.0], 1.0).is_err());
    }

    #[test]
    fn sample_weight_is_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = GmmModel {
            weights: vec![0.6, 0.4],
            means: vec![vec![0.0], vec![1.5]],
            vars: vec![vec![1.0], vec![0.5]],
        };
        let w = BalanceWeights::from_counts(&[100.0, 7.0], 0.99).unwrap();
        for _ in 0..20 {
            let z = [rng.random_range(-3.0..4.0)];
            let oracle: f64 = responsibilities(&model, &z).iter().zip(&w.normalized).map(|(a, b)| a * b).sum();
            let s = sample_weight(&model, &w, &z);
            assert!((s - oracle).abs() <= 1e-12);
            assert!(s >= w.normalized[0].min(w.normalized[1]) - 1e-12);
            assert!(s <= w.normalized[0].max(w.normalized[1]) + 1e-12);
        }
        let ones = BalanceWeights::from_counts(&[4.0, 4.0], 0.5).unwrap();
        assert_relative_eq!(sample_weight(&model, &ones, &[0.3]), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_relative_eq!(wasserstein_1d(&[0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
        // Unequal sizes: {0, 1} vs {0.5}.
        assert_relative_eq!(wasserstein_1d(&[0.0, 1.0], &[0.5]).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 2000;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) + 0.3).collect();
        assert!((wasserstein_1d(&a, &b).unwrap() - 0.3).abs() < 3.0 / (n as f64).sqrt());
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = blob(&mut rng, 100, &[0.0, 1.0, 2.0], 1.0);
        let fit = fit_gmm(&data, &[1, 2], 1, &EmConfig::default()).unwrap();
        let m = MotionModel {
            stats: NormStats::fit(&data).unwrap(),
            gmm: fit.model,
            beta: 0.999,
        };
        let text = m.to_kv().to_string();
        let back = MotionModel::from_kv(&KvDocument::parse(&text, "mem").unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_kv().to_string(), text);
    }
}
