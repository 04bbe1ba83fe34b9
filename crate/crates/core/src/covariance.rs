//! Reconstruction of the covariate covariance of a trial reported only in
//! aggregate.
//!
//! Each IPD source `k` that can be reweighted to the case-mix of target `j`
//! yields weighted first and raw second moments of `L`. These are averaged
//! over sources and combined into `Sigma = M - mu mu'`. A correlation
//! borrowing baseline is provided for comparison.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{AggregatedTrial, IpdTrial, Study, StudyCollection};
use crate::error::{Error, Result};
use crate::linalg::{condition_number_sym, symmetrize};
use crate::weights::{fit_pair, PropensityRatioFit, SolverOptions, WeightModel};

/// Weighted moments of `L` in population `j` estimated from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceMoments {
    pub source: usize,
    pub n: usize,
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionMethod {
    Weighting,
    CorrelationExtrapolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Unweighted,
    SampleSize,
}

/// Moments of `L | S = j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedMoments {
    pub target: usize,
    #[serde(rename = "mu", with = "crate::linalg::serde_vec")]
    pub mean: DVector<f64>,
    /// Raw second moments `E[L L' | S = j]`.
    #[serde(skip, default = "empty")]
    pub second: DMatrix<f64>,
    #[serde(with = "crate::linalg::serde_rows")]
    pub cov: DMatrix<f64>,
    pub method: ReconstructionMethod,
    pub sources: Vec<usize>,
    /// Ridge added to the covariance diagonal when it was near-singular.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

fn empty() -> DMatrix<f64> {
    DMatrix::zeros(0, 0)
}

impl ReconstructedMoments {
    pub fn from_parts(
        target: usize,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        method: ReconstructionMethod,
        sources: Vec<usize>,
    ) -> Self {
        let second = &cov + &mean * mean.transpose();
        Self { target, mean, second, cov, method, sources, ridge: None }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Restores `second` after deserialization.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut r: Self = serde_json::from_str(s)?;
        if r.cov.nrows() != r.mean.len() || r.cov.ncols() != r.mean.len() {
            return Err(Error::validation("covariance dimension differs from mean"));
        }
        r.second = &r.cov + &r.mean * r.mean.transpose();
        Ok(r)
    }
}

/// Self-normalized weighted first and raw second moments of the source
/// covariates. Moment matching is a property of the untruncated weights, so
/// those are used.
pub fn second_moment_from_source(source: &IpdTrial, fit: &PropensityRatioFit) -> Result<SourceMoments> {
    if !fit.converged {
        return Err(Error::numerical(format!(
            "fit ({}, {}) did not converge",
            fit.target, fit.source
        )));
    }
    let w = fit.original_weights();
    if w.len() != source.len() {
        return Err(Error::validation("fit does not belong to this source"));
    }
    let total = w.sum();
    let l = source.covariates();
    let d = l.ncols();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for i in 0..l.nrows() {
        let row = l.row(i).transpose();
        let wi = w[i] / total;
        mean += &row * wi;
        second += &row * row.transpose() * wi;
    }
    Ok(SourceMoments {
        source: fit.source,
        n: source.len(),
        mean,
        second: symmetrize(&second),
    })
}

fn ridge_repair(cov: &mut DMatrix<f64>) -> Option<f64> {
    let p = cov.nrows();
    if p == 0 || condition_number_sym(cov) <= 1e12 {
        return None;
    }
    let eps = 1e-8 * cov.trace() / p as f64;
    for i in 0..p {
        cov[(i, i)] += eps;
    }
    Some(eps)
}

/// Averages per-source moments and assembles `Sigma = M - mu mu'`.
pub fn average_reconstructions(
    target: usize,
    per_source: &[SourceMoments],
    averaging: Averaging,
) -> Result<ReconstructedMoments> {
    let first = per_source
        .first()
        .ok_or_else(|| Error::validation(format!("no source could be reweighted to study {target}")))?;
    let d = first.mean.len();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    let mut total = 0.0;
    for s in per_source {
        if s.mean.len() != d || s.second.shape() != (d, d) {
            return Err(Error::validation("source moments differ in dimension"));
        }
        let a = match averaging {
            Averaging::Unweighted => 1.0,
            Averaging::SampleSize => s.n as f64,
        };
        mean += &s.mean * a;
        second += &s.second * a;
        total += a;
    }
    mean /= total;
    second /= total;
    let mut cov = symmetrize(&(&second - &mean * mean.transpose()));
    let ridge = ridge_repair(&mut cov);
    if ridge.is_some() {
        second = &cov + &mean * mean.transpose();
    }
    Ok(ReconstructedMoments {
        target,
        mean,
        second,
        cov,
        method: ReconstructionMethod::Weighting,
        sources: per_source.iter().map(|s| s.source).collect(),
        ridge,
    })
}

/// Weighting-based reconstruction for study `j` from every IPD source.
/// Sources whose fit fails are skipped with a warning.
pub fn reconstruct_target(
    studies: &StudyCollection,
    j: usize,
    model: &WeightModel,
    opts: &SolverOptions,
    averaging: Averaging,
) -> Result<ReconstructedMoments> {
    let mut parts = Vec::new();
    for k in studies.ipd_indices() {
        if k == j {
            continue;
        }
        match fit_pair(studies, j, k, model, opts) {
            Ok(fit) => parts.push(second_moment_from_source(studies.ipd(k).expect("ipd"), &fit)?),
            Err(e) => warn!("skipping source {k} when reconstructing study {j}: {e}"),
        }
    }
    average_reconstructions(j, &parts, averaging)
}

/// Sample correlation matrix with divisor `n`.
fn correlation(trial: &IpdTrial) -> Result<DMatrix<f64>> {
    let m = trial.sample_moments();
    let d = trial.dim();
    let n = trial.len() as f64;
    let l = trial.covariates();
    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for i in 0..l.nrows() {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (l[(i, a)] - m.mean[a]) * (l[(i, b)] - m.mean[b]) / n;
            }
        }
    }
    let sd: Vec<f64> = (0..d).map(|a| cov[(a, a)].sqrt()).collect();
    let mut out = DMatrix::identity(d, d);
    for a in 0..d {
        for b in 0..d {
            if a != b {
                out[(a, b)] = if sd[a] > 0.0 && sd[b] > 0.0 {
                    cov[(a, b)] / (sd[a] * sd[b])
                } else {
                    0.0
                };
            }
        }
    }
    Ok(out)
}

/// Baseline that borrows the average source correlation and rescales it by
/// the target's reported standard deviations. Assumes correlations are
/// shared across populations.
pub fn correlation_extrapolation(
    j: usize,
    target: &AggregatedTrial,
    sources: &[(usize, &IpdTrial)],
) -> Result<ReconstructedMoments> {
    if sources.is_empty() {
        return Err(Error::validation("correlation extrapolation needs at least one source"));
    }
    let pooled = target.pool_arm_moments();
    let var = pooled.variance();
    let d = var.len();
    for (c, v) in var.iter().enumerate() {
        if !(*v > 0.0) {
            return Err(Error::validation(format!(
                "study {}: covariate l{} has zero variance",
                target.study_id,
                c + 1
            )));
        }
    }
    let mut corr = DMatrix::zeros(d, d);
    for (_, s) in sources {
        if s.dim() != d {
            return Err(Error::validation("source covariate dimension differs from target"));
        }
        corr += correlation(s)?;
    }
    corr /= sources.len() as f64;
    let sd = DVector::from_iterator(d, var.iter().map(|v| v.sqrt()));
    let cov = symmetrize(&DMatrix::from_fn(d, d, |a, b| corr[(a, b)] * sd[a] * sd[b]));
    Ok(ReconstructedMoments::from_parts(
        j,
        DVector::from_vec(pooled.mean),
        cov,
        ReconstructionMethod::CorrelationExtrapolation,
        sources.iter().map(|(k, _)| *k).collect(),
    ))
}

/// Correlation baseline for study `j` of a collection using every IPD trial.
pub fn correlation_extrapolation_for(studies: &StudyCollection, j: usize) -> Result<ReconstructedMoments> {
    let target = match studies.study(j) {
        Study::Aggregated(a) => a,
        Study::Ipd(_) => return Err(Error::validation(format!("study {j} already has participant data"))),
    };
    let sources: Vec<(usize, &IpdTrial)> = studies
        .ipd_indices()
        .map(|k| (k, studies.ipd(k).expect("ipd")))
        .collect();
    correlation_extrapolation(j, target, &sources)
}
