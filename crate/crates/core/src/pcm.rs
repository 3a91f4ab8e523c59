//! Pose clustering: a full-covariance Gaussian mixture over normalized pose
//! vectors, fitted by EM.
//!
//! The mixture supplies the pose density, per-component posteriors, a hard
//! cluster label, and the rarity score `sum_n alpha_n * w_n` used to pick the
//! rarest candidate from an augmentation pool.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::NormalizedPose;

pub const FORMAT_TAG: &str = "posetrans-gmm";
pub const FORMAT_VERSION: u32 = 1;
/// Components whose weight falls below this are reseeded (once) during EM.
pub const MIN_COMPONENT_WEIGHT: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PcmError {
    #[error("need at least {need} samples (10 per component), got {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("component {0} collapsed twice during EM")]
    DegenerateComponent(usize),
    #[error("every component density underflowed for this query")]
    AllZeroDensity,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("sample dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcmConfig {
    pub n_components: usize,
    pub reg_epsilon: f64,
    pub max_iters: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
}

impl Default for PcmConfig {
    fn default() -> Self {
        Self {
            n_components: 20,
            reg_epsilon: 1e-6,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    /// Data log-likelihood at every E-step of the final EM run.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_samples: usize,
    /// Components that were reseeded after collapsing; the trace restarts
    /// at each reseed.
    pub reseeded: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ComponentCache {
    chol: DMatrix<f64>,
    /// `ln alpha - 0.5 (d ln 2pi + ln det Sigma)`
    log_norm: f64,
}

/// Fitted mixture. Immutable after construction; queries are read-only.
#[derive(Debug, Clone)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    reg_epsilon: f64,
    meta: FitMetadata,
    cache: Vec<ComponentCache>,
}

impl PartialEq for GmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
            && self.reg_epsilon == other.reg_epsilon
            && self.meta == other.meta
    }
}

/// Posterior of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub posterior: Vec<f64>,
    /// `argmax posterior`, ties to the lowest index.
    pub label: usize,
    /// `sum_n alpha_n * posterior_n`; small means rare.
    pub rarity: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        reg_epsilon: f64,
        meta: FitMetadata,
    ) -> Result<Self, PcmError> {
        let bad = |m: String| Err(PcmError::InvalidModel(m));
        let n = weights.len();
        if n == 0 || means.len() != n || covariances.len() != n {
            return bad("component count mismatch".into());
        }
        let d = means[0].len();
        if d == 0 {
            return bad("zero-dimensional model".into());
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return bad("weights must be finite and non-negative".into());
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("weights sum to {total}"));
        }
        let mut cache = Vec::with_capacity(n);
        for k in 0..n {
            let cov = &covariances[k];
            if means[k].len() != d || cov.nrows() != d || cov.ncols() != d {
                return bad(format!("component {k} has wrong shape"));
            }
            if (cov - cov.transpose()).amax() > 1e-9 {
                return bad(format!("covariance {k} is not symmetric"));
            }
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| PcmError::InvalidModel(format!("covariance {k} is not positive definite")))?;
            let l = chol.unpack();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_norm = weights[k].ln() - 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            cache.push(ComponentCache { chol: l, log_norm });
        }
        Ok(Self {
            weights,
            means,
            covariances,
            reg_epsilon,
            meta,
            cache,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn reg_epsilon(&self) -> f64 {
        self.reg_epsilon
    }

    pub fn metadata(&self) -> &FitMetadata {
        &self.meta
    }

    fn check_dim(&self, got: usize) -> Result<(), PcmError> {
        if got != self.dim() {
            return Err(PcmError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// `ln(alpha_n N(x; mu_n, Sigma_n))` for every component.
    pub fn weighted_log_pdfs(&self, x: &[f64]) -> Result<Vec<f64>, PcmError> {
        self.check_dim(x.len())?;
        let x = DVector::from_column_slice(x);
        Ok(self
            .cache
            .iter()
            .zip(&self.means)
            .map(|(c, mu)| {
                let mut z = &x - mu;
                c.chol.solve_lower_triangular_mut(&mut z);
                c.log_norm - 0.5 * z.norm_squared()
            })
            .collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, PcmError> {
        Ok(log_sum_exp(&self.weighted_log_pdfs(x)?))
    }

    /// Mixture density `sum_n alpha_n N(x; mu_n, Sigma_n)`.
    pub fn density(&self, x: &[f64]) -> Result<f64, PcmError> {
        Ok(self.log_density(x)?.exp())
    }

    pub fn assignment(&self, x: &[f64]) -> Result<ClusterAssignment, PcmError> {
        let lp = self.weighted_log_pdfs(x)?;
        let lse = log_sum_exp(&lp);
        if !lse.is_finite() {
            return Err(PcmError::AllZeroDensity);
        }
        let posterior: Vec<f64> = lp.iter().map(|&l| (l - lse).exp()).collect();
        let label = argmax_first(&posterior);
        let rarity = posterior.iter().zip(&self.weights).map(|(w, a)| w * a).sum();
        Ok(ClusterAssignment {
            posterior,
            label,
            rarity,
        })
    }

    /// Same model with components reordered so that new component `i` is old
    /// component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<GmmModel, PcmError> {
        GmmModel::new(
            perm.iter().map(|&p| self.weights[p]).collect(),
            perm.iter().map(|&p| self.means[p].clone()).collect(),
            perm.iter().map(|&p| self.covariances[p].clone()).collect(),
            self.reg_epsilon,
            self.meta.clone(),
        )
    }

    /// Log-likelihood of a data set under the model.
    pub fn total_log_likelihood(&self, data: &[Vec<f64>]) -> Result<f64, PcmError> {
        data.iter().map(|x| self.log_density(x)).sum()
    }
}

// ---------------------------------------------------------------------------
// Pose-level queries

pub fn density(model: &GmmModel, pose: &NormalizedPose) -> Result<f64, PcmError> {
    model.density(&pose.feature_vector())
}

pub fn responsibilities(model: &GmmModel, pose: &NormalizedPose) -> Result<ClusterAssignment, PcmError> {
    model.assignment(&pose.feature_vector())
}

pub fn assign_cluster(model: &GmmModel, pose: &NormalizedPose) -> Result<usize, PcmError> {
    Ok(responsibilities(model, pose)?.label)
}

/// Index minimizing `rarities`, ties to the lowest index.
pub fn argmin_first(rarities: &[f64]) -> Option<usize> {
    if rarities.is_empty() {
        return None;
    }
    let mut best = 0;
    for (i, &r) in rarities.iter().enumerate().skip(1) {
        if r < rarities[best] {
            best = i;
        }
    }
    Some(best)
}

/// Index of the pool member with the smallest rarity score.
pub fn select_rarest(model: &GmmModel, pool: &[NormalizedPose]) -> Result<usize, PcmError> {
    let rarities = pool
        .iter()
        .map(|p| responsibilities(model, p).map(|a| a.rarity))
        .collect::<Result<Vec<_>, _>>()?;
    argmin_first(&rarities).ok_or(PcmError::EmptyPool)
}

// ---------------------------------------------------------------------------
// Fitting

struct Params {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn data_matrix(data: &[Vec<f64>]) -> Result<DMatrix<f64>, PcmError> {
    let d = data.first().map(|x| x.len()).unwrap_or(0);
    if let Some(bad) = data.iter().find(|x| x.len() != d) {
        return Err(PcmError::DimensionMismatch { expected: d, got: bad.len() });
    }
    // columns are samples
    Ok(DMatrix::from_fn(d, data.len(), |r, c| data[c][r]))
}

fn pooled_covariance(x: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let n = x.ncols() as f64;
    let mean = x.column_mean();
    let centered = x - &mean * DVector::from_element(x.ncols(), 1.0).transpose();
    let mut cov = &centered * centered.transpose() / n;
    for i in 0..cov.nrows() {
        cov[(i, i)] += eps;
    }
    symmetrize(&mut cov);
    cov
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn kmeans_pp<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let n = x.ncols();
    let mut centers = vec![x.column(rng.random_range(0..n)).into_owned()];
    let mut d2: Vec<f64> = (0..n).map(|i| (x.column(i) - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = x.column(idx).into_owned();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min((x.column(i) - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Per-component weighted log-pdf matrix, `n_samples x n_components`.
fn e_step(x: &DMatrix<f64>, p: &Params) -> Result<Vec<Vec<f64>>, usize> {
    let d = x.nrows() as f64;
    let per_comp: Vec<Result<Vec<f64>, usize>> = (0..p.weights.len())
        .into_par_iter()
        .map(|k| {
            let chol = p.covs[k].clone().cholesky().ok_or(k)?;
            let l = chol.unpack();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_norm = p.weights[k].ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det);
            let mut z = x.clone();
            for mut col in z.column_iter_mut() {
                col -= &p.means[k];
            }
            l.solve_lower_triangular_mut(&mut z);
            Ok(z.column_iter().map(|c| log_norm - 0.5 * c.norm_squared()).collect())
        })
        .collect();
    let per_comp = per_comp.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = x.ncols();
    Ok((0..n).map(|i| per_comp.iter().map(|c| c[i]).collect()).collect())
}

fn m_step(x: &DMatrix<f64>, resp: &DMatrix<f64>, eps: f64) -> Params {
    let n = x.ncols();
    let k = resp.ncols();
    let comps: Vec<(f64, DVector<f64>, DMatrix<f64>)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let r = resp.column(j);
            let nk: f64 = r.iter().sum();
            let nk_safe = nk.max(f64::MIN_POSITIVE);
            let mean = x * r / nk_safe;
            let mut scaled = x.clone();
            for (i, mut col) in scaled.column_iter_mut().enumerate() {
                col -= &mean;
                col *= r[i].sqrt();
            }
            let mut cov = &scaled * scaled.transpose() / nk_safe;
            symmetrize(&mut cov);
            for i in 0..cov.nrows() {
                cov[(i, i)] += eps;
            }
            (nk, mean, cov)
        })
        .collect();
    let mut params = Params {
        weights: Vec::with_capacity(k),
        means: Vec::with_capacity(k),
        covs: Vec::with_capacity(k),
    };
    for (nk, mean, cov) in comps {
        params.weights.push(nk / n as f64);
        params.means.push(mean);
        params.covs.push(cov);
    }
    params
}

fn run_em(x: &DMatrix<f64>, mut p: Params, config: &PcmConfig) -> Result<GmmModel, PcmError> {
    let n = x.ncols();
    let k = p.weights.len();
    let mut meta = FitMetadata {
        n_samples: n,
        ..FitMetadata::default()
    };
    let mut reseeded_once = vec![false; k];
    let mut prev: Option<f64> = None;
    for iter in 0..config.max_iters.max(1) {
        let logp = e_step(x, &p).map_err(PcmError::DegenerateComponent)?;
        let lse: Vec<f64> = logp.iter().map(|row| log_sum_exp(row)).collect();
        let ll: f64 = lse.iter().sum();
        if !ll.is_finite() {
            return Err(PcmError::InvalidModel("log-likelihood is not finite".into()));
        }
        meta.log_likelihood_trace.push(ll);
        meta.iterations = iter + 1;
        if let Some(prev) = prev {
            if (ll - prev).abs() <= config.tol * prev.abs() {
                meta.converged = true;
                break;
            }
        }
        if iter + 1 == config.max_iters {
            break;
        }
        prev = Some(ll);
        let resp = DMatrix::from_fn(n, k, |i, j| (logp[i][j] - lse[i]).exp());
        p = m_step(x, &resp, config.reg_epsilon);

        if let Some(c) = p.weights.iter().position(|&w| w < MIN_COMPONENT_WEIGHT) {
            if reseeded_once[c] {
                return Err(PcmError::DegenerateComponent(c));
            }
            reseeded_once[c] = true;
            // move it onto the worst-explained sample
            let worst = argmin_first(&lse).expect("non-empty data");
            p.means[c] = x.column(worst).into_owned();
            p.covs[c] = pooled_covariance(x, config.reg_epsilon);
            p.weights[c] = 1.0 / k as f64;
            let total: f64 = p.weights.iter().sum();
            p.weights.iter_mut().for_each(|w| *w /= total);
            meta.reseeded.push(c);
            meta.log_likelihood_trace.clear();
            prev = None;
        }
    }
    let total: f64 = p.weights.iter().sum();
    let weights = p.weights.iter().map(|w| w / total).collect();
    GmmModel::new(weights, p.means, p.covs, config.reg_epsilon, meta)
}

fn check_count(have: usize, n_components: usize) -> Result<(), PcmError> {
    let need = 10 * n_components;
    if have < need || n_components == 0 {
        return Err(PcmError::InsufficientData { have, need });
    }
    Ok(())
}

/// EM from k-means++ means, uniform weights and the pooled covariance.
pub fn fit_gmm<R: Rng + ?Sized>(data: &[Vec<f64>], config: &PcmConfig, rng: &mut R) -> Result<GmmModel, PcmError> {
    check_count(data.len(), config.n_components)?;
    let x = data_matrix(data)?;
    let pooled = pooled_covariance(&x, config.reg_epsilon);
    let k = config.n_components;
    let init = Params {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp(&x, k, rng),
        covs: vec![pooled; k],
    };
    run_em(&x, init, config)
}

pub fn fit_poses<R: Rng + ?Sized>(poses: &[NormalizedPose], config: &PcmConfig, rng: &mut R) -> Result<GmmModel, PcmError> {
    let data: Vec<Vec<f64>> = poses.iter().map(|p| p.feature_vector()).collect();
    fit_gmm(&data, config, rng)
}

/// Warm-started EM on `original ++ augmented`, starting from `model`.
pub fn refit(
    model: &GmmModel,
    original: &[Vec<f64>],
    augmented: &[Vec<f64>],
    config: &PcmConfig,
) -> Result<GmmModel, PcmError> {
    check_count(original.len() + augmented.len(), model.n_components())?;
    let data: Vec<Vec<f64>> = original.iter().chain(augmented).cloned().collect();
    let x = data_matrix(&data)?;
    if x.nrows() != model.dim() {
        return Err(PcmError::DimensionMismatch {
            expected: model.dim(),
            got: x.nrows(),
        });
    }
    let init = Params {
        weights: model.weights.clone(),
        means: model.means.clone(),
        covs: model.covariances.clone(),
    };
    run_em(&x, init, config)
}

pub fn refit_poses(
    model: &GmmModel,
    original: &[NormalizedPose],
    augmented: &[NormalizedPose],
    config: &PcmConfig,
) -> Result<GmmModel, PcmError> {
    let o: Vec<Vec<f64>> = original.iter().map(|p| p.feature_vector()).collect();
    let a: Vec<Vec<f64>> = augmented.iter().map(|p| p.feature_vector()).collect();
    refit(model, &o, &a, config)
}

// ---------------------------------------------------------------------------
// Model file

/// On-disk record. Matrices are row-major; covariances are listed per
/// component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFile {
    pub format: String,
    pub version: u32,
    pub n_components: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub reg_epsilon: f64,
    pub metadata: FitMetadata,
}

impl From<&GmmModel> for GmmFile {
    fn from(m: &GmmModel) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            n_components: m.n_components(),
            dim: m.dim(),
            weights: m.weights.clone(),
            means: m.means.iter().map(|v| v.iter().copied().collect()).collect(),
            covariances: m
                .covariances
                .iter()
                .map(|c| c.transpose().iter().copied().collect())
                .collect(),
            reg_epsilon: m.reg_epsilon,
            metadata: m.meta.clone(),
        }
    }
}

impl TryFrom<GmmFile> for GmmModel {
    type Error = PcmError;
    fn try_from(f: GmmFile) -> Result<Self, PcmError> {
        if f.format != FORMAT_TAG || f.version != FORMAT_VERSION {
            return Err(PcmError::InvalidModel(format!("unsupported format {} v{}", f.format, f.version)));
        }
        let d = f.dim;
        if f.means.iter().any(|m| m.len() != d) || f.covariances.iter().any(|c| c.len() != d * d) {
            return Err(PcmError::InvalidModel("shape does not match dim".into()));
        }
        GmmModel::new(
            f.weights,
            f.means.iter().map(|m| DVector::from_column_slice(m)).collect(),
            f.covariances.iter().map(|c| DMatrix::from_row_slice(d, d, c)).collect(),
            f.reg_epsilon,
            f.metadata,
        )
    }
}

impl GmmModel {
    pub fn save(&self, path: &Path) -> Result<(), PcmError> {
        let text = serde_json::to_vec_pretty(&GmmFile::from(self)).expect("serializable");
        std::fs::write(path, text).map_err(|e| PcmError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PcmError> {
        let err = |message: String| PcmError::File {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let file: GmmFile = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        GmmModel::try_from(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn iso(d: usize, var: f64) -> DMatrix<f64> {
        DMatrix::identity(d, d) * var
    }

    fn gaussian_pdf_2d(x: [f64; 2], mu: [f64; 2], var: [f64; 2]) -> f64 {
        // independent coordinates: product of scalar pdfs
        (0..2)
            .map(|i| (-(x[i] - mu[i]).powi(2) / (2.0 * var[i])).exp() / (2.0 * std::f64::consts::PI * var[i]).sqrt())
            .product()
    }

    fn two_comp_2d() -> GmmModel {
        GmmModel::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![0.2, 0.8]), DVector::from_vec(vec![0.6, 0.4])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, 0.02]),
                DMatrix::from_row_slice(2, 2, &[0.04, 0.0, 0.0, 0.03]),
            ],
            0.0,
            FitMetadata::default(),
        )
        .unwrap()
    }

    #[test]
    fn peak_density_of_standard_normal_in_34d() {
        let m = GmmModel::new(vec![1.0], vec![DVector::zeros(34)], vec![iso(34, 1.0)], 0.0, FitMetadata::default()).unwrap();
        let want = (2.0 * std::f64::consts::PI).powi(-17);
        let got = m.density(&[0.0; 34]).unwrap();
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn symmetric_two_component_density_and_posterior() {
        let m = GmmModel::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0])],
            vec![iso(2, 0.5), iso(2, 0.5)],
            0.0,
            FitMetadata::default(),
        )
        .unwrap();
        let single = GmmModel::new(vec![1.0], vec![DVector::from_vec(vec![-1.0, 0.0])], vec![iso(2, 0.5)], 0.0, FitMetadata::default())
            .unwrap();
        let q = [0.0, 0.3];
        assert!((m.density(&q).unwrap() - single.density(&q).unwrap()).abs() < 1e-15);
        let a = m.assignment(&q).unwrap();
        assert!((a.posterior[0] - 0.5).abs() < 1e-15 && (a.posterior[1] - 0.5).abs() < 1e-15);
        assert_eq!(a.label, 0);
    }

    #[test]
    fn hand_built_density_and_bayes() {
        let m = two_comp_2d();
        let q = [0.3, 0.7];
        let p0 = 0.3 * gaussian_pdf_2d(q, [0.2, 0.8], [0.01, 0.02]);
        let p1 = 0.7 * gaussian_pdf_2d(q, [0.6, 0.4], [0.04, 0.03]);
        assert!((m.density(&q).unwrap() - (p0 + p1)).abs() <= 1e-12 * (p0 + p1));
        let a = m.assignment(&q).unwrap();
        assert!((a.posterior[0] - p0 / (p0 + p1)).abs() < 1e-12);
        assert_eq!(a.label, 0);
        assert!((a.rarity - (0.3 * p0 + 0.7 * p1) / (p0 + p1)).abs() < 1e-12);
    }

    #[test]
    fn single_component_assignment() {
        let m = GmmModel::new(vec![1.0], vec![DVector::zeros(3)], vec![iso(3, 1.0)], 0.0, FitMetadata::default()).unwrap();
        let a = m.assignment(&[5.0, 1.0, -2.0]).unwrap();
        assert_eq!(a.posterior, vec![1.0]);
        assert_eq!(a.label, 0);
    }

    #[test]
    fn far_query_underflows() {
        let m = GmmModel::new(vec![1.0], vec![DVector::zeros(1)], vec![iso(1, 1e-300)], 0.0, FitMetadata::default()).unwrap();
        assert!(matches!(m.assignment(&[1e300]), Err(PcmError::AllZeroDensity)));
    }

    #[test]
    fn select_rarest_examples() {
        // posteriors (1,0,0), (0,1,0), (0,0,1) against alpha (0.7, 0.2, 0.1)
        let alpha = [0.7, 0.2, 0.1];
        let w = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let r: Vec<f64> = w.iter().map(|wt| wt.iter().zip(&alpha).map(|(a, b)| a * b).sum()).collect();
        assert_eq!(r, vec![0.7, 0.2, 0.1]);
        assert_eq!(argmin_first(&r), Some(2));
        assert_eq!(argmin_first(&[0.4]), Some(0));
        assert_eq!(argmin_first(&[0.3, 0.3, 0.3]), Some(0));
        assert_eq!(argmin_first(&[]), None);

        // same through the model: well separated components, queries at means
        let d = NormalizedPose::DIM;
        let means: Vec<DVector<f64>> = (0..3).map(|k| DVector::from_element(d, 0.2 + 0.3 * k as f64)).collect();
        let m = GmmModel::new(alpha.to_vec(), means.clone(), vec![iso(d, 1e-4); 3], 0.0, FitMetadata::default()).unwrap();
        let pool: Vec<NormalizedPose> = means
            .iter()
            .map(|mu| NormalizedPose::from_feature_vector(mu.as_slice()).unwrap())
            .collect();
        assert_eq!(select_rarest(&m, &pool).unwrap(), 2);
        assert_eq!(select_rarest(&m, &pool[..1]).unwrap(), 0);
        assert_eq!(select_rarest(&m, &[pool[1], pool[1], pool[1]]).unwrap(), 0);
        assert!(matches!(select_rarest(&m, &[]), Err(PcmError::EmptyPool)));
        assert_eq!(assign_cluster(&m, &pool[1]).unwrap(), 1);
    }

    fn blobs(seed: u64, centers: &[[f64; 2]], counts: &[usize], std: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (c, &n) in centers.iter().zip(counts) {
            for _ in 0..n {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                out.push(vec![c[0] + std * a, c[1] + std * b]);
            }
        }
        out
    }

    #[test]
    fn single_component_is_closed_form_mle() {
        let data = blobs(1, &[[0.3, -0.2]], &[200], 0.5);
        let cfg = PcmConfig { n_components: 1, ..PcmConfig::default() };
        let m = fit_gmm(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = data.len() as f64;
        let mean = [0, 1].map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n);
        for j in 0..2 {
            assert!((m.means()[0][j] - mean[j]).abs() < 1e-12);
        }
        for a in 0..2 {
            for b in 0..2 {
                let c = data.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / n
                    + if a == b { cfg.reg_epsilon } else { 0.0 };
                assert!((m.covariances()[0][(a, b)] - c).abs() < 1e-12);
            }
        }
        assert!(m.metadata().converged);
        assert!(m.metadata().iterations <= 3);
    }

    #[test]
    fn recovers_separated_clusters_and_is_monotone() {
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let data = blobs(5, &centers, &[300, 200, 100], 1.0);
        let cfg = PcmConfig { n_components: 3, ..PcmConfig::default() };
        let m = fit_gmm(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let truth = [0.5, 1.0 / 3.0, 1.0 / 6.0];
        for (c, &w) in centers.iter().zip(&truth) {
            let k = (0..3)
                .min_by(|&a, &b| {
                    let da = (m.means()[a][0] - c[0]).hypot(m.means()[a][1] - c[1]);
                    let db = (m.means()[b][0] - c[0]).hypot(m.means()[b][1] - c[1]);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert!((m.means()[k][0] - c[0]).hypot(m.means()[k][1] - c[1]) < 0.1 * 1.0 * 2.0_f64.sqrt());
            assert!((m.weights()[k] - w).abs() < 0.05);
        }
        for w in m.metadata().log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn refit_examples() {
        let centers = [[0.0, 0.0], [8.0, 8.0]];
        let data = blobs(7, &centers, &[180, 20], 1.0);
        let cfg = PcmConfig { n_components: 2, ..PcmConfig::default() };
        let m = fit_gmm(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ll0 = m.total_log_likelihood(&data).unwrap();
        let r = refit(&m, &data, &[], &cfg).unwrap();
        assert!(r.total_log_likelihood(&data).unwrap() >= ll0 - 1e-8);

        let rare = (0..2).min_by(|&a, &b| m.weights()[a].total_cmp(&m.weights()[b])).unwrap();
        let extra = blobs(8, &[centers[1]], &[60], 1.0);
        let r = refit(&m, &data, &extra, &cfg).unwrap();
        assert!(r.weights()[rare] > m.weights()[rare]);

        let small = PcmConfig { n_components: 2, ..cfg };
        assert!(matches!(
            refit(&m, &data[..10], &data[10..15], &small),
            Err(PcmError::InsufficientData { have: 15, need: 20 })
        ));
    }

    #[test]
    fn insufficient_data() {
        let data = blobs(1, &[[0.0, 0.0]], &[29], 1.0);
        let cfg = PcmConfig { n_components: 3, ..PcmConfig::default() };
        assert!(matches!(
            fit_gmm(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(PcmError::InsufficientData { have: 29, need: 30 })
        ));
    }

    #[test]
    fn duplicate_points_stay_positive_definite() {
        let mut data = vec![vec![0.5, 0.5]; 40];
        data.extend(vec![vec![0.1, 0.9]; 40]);
        let cfg = PcmConfig { n_components: 2, ..PcmConfig::default() };
        let m = fit_gmm(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for c in m.covariances() {
            let eig = c.clone().symmetric_eigen().eigenvalues;
            assert!(eig.min() >= cfg.reg_epsilon * (1.0 - 1e-6));
        }
    }

    #[test]
    fn model_file_roundtrip_is_exact() {
        let data = blobs(3, &[[0.0, 0.0], [5.0, 5.0]], &[50, 50], 1.0);
        let cfg = PcmConfig { n_components: 2, ..PcmConfig::default() };
        let m = fit_gmm(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(GmmModel::load(&p).unwrap(), m);
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GmmModel {
        let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let means = (0..n).map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>())).collect();
        let covs = (0..n)
            .map(|_| {
                let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
                let mut c = &a * a.transpose() * 0.1 + DMatrix::identity(d, d) * 0.05;
                symmetrize(&mut c);
                c
            })
            .collect();
        GmmModel::new(w, means, covs, 0.0, FitMetadata::default()).unwrap()
    }

    proptest! {
        #[test]
        fn posterior_normalized_and_rarity_bounded(seed in any::<u64>(), n in 1usize..6, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, n, d);
            let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
            let a = m.assignment(&q).unwrap();
            prop_assert!((a.posterior.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let lo = m.weights().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.weights().iter().copied().fold(0.0, f64::max);
            prop_assert!(a.rarity >= lo - 1e-12 && a.rarity <= hi + 1e-12);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), n in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = NormalizedPose::DIM;
            let m = random_model(&mut rng, n, d);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1);
            let p = m.permuted(&perm).unwrap();
            let pool: Vec<NormalizedPose> = (0..4)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
                    NormalizedPose::from_feature_vector(&v).unwrap()
                })
                .collect();
            for q in &pool {
                let a = responsibilities(&m, q).unwrap();
                let b = responsibilities(&p, q).unwrap();
                for (i, &pi) in perm.iter().enumerate() {
                    prop_assert!((b.posterior[i] - a.posterior[pi]).abs() <= 1e-12);
                }
                prop_assert!((a.rarity - b.rarity).abs() <= 1e-12);
                let (da, db) = (density(&m, q).unwrap(), density(&p, q).unwrap());
                prop_assert!((da - db).abs() <= 1e-9 * da.abs().max(f64::MIN_POSITIVE));
            }
            prop_assert_eq!(select_rarest(&m, &pool).unwrap(), select_rarest(&p, &pool).unwrap());
        }
    }
}
