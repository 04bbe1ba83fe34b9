//! Synthetic participant rows for aggregated trials.
//!
//! Covariates are drawn from a standard normal base sample that is centred,
//! whitened by its own sample covariance and recoloured, so the sample mean
//! and covariance (divisor `n`) equal the requested values exactly. Arm
//! labels and outcomes reproduce the reported arm sizes and outcome means up
//! to integer rounding.

use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::ReconstructedMoments;
use crate::data::{write_ipd_rows, AggregatedTrial, IpdTrial};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, pd_inv_sqrt, psd_sqrt, serde_rows, serde_vec, symmetrize};
use crate::seed::stream_rng;

/// Relative disagreement between reported and reconstructed variances above
/// which the reported variances are ignored.
pub const VARIANCE_CONFLICT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Reconstructed correlation with the reported variances on the diagonal.
    ReconstructedCorrelationReportedVariance,
    /// Reconstructed covariance as is.
    Reconstructed,
}

/// Covariate moments an aggregated trial's pseudo rows are built to match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMoments {
    pub target: usize,
    pub n: usize,
    #[serde(with = "serde_vec")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_rows")]
    pub cov: DMatrix<f64>,
    pub cov_source: CovarianceSource,
    pub warnings: Vec<String>,
}

impl ResolvedMoments {
    /// `E[L L' | S = j]`.
    pub fn second(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }
}

/// Combines the reconstructed covariance with the trial's reported
/// variances. The means are the reconstructed (reweighted) ones.
pub fn resolve_moments(trial: &AggregatedTrial, recon: &ReconstructedMoments) -> Result<ResolvedMoments> {
    let d = trial.dim();
    if recon.dim() != d {
        return Err(Error::validation(format!(
            "study {}: reconstruction has {} covariates, report has {d}",
            trial.study_id,
            recon.dim()
        )));
    }
    let reported = trial.pool_arm_moments().variance();
    let mut warnings = Vec::new();
    for c in 0..d {
        let rec = recon.cov[(c, c)];
        let rep = reported[c];
        let rel = (rec - rep).abs() / rep.abs().max(f64::MIN_POSITIVE);
        if !(rel <= VARIANCE_CONFLICT) {
            warnings.push(format!(
                "study {}: covariate l{}: reconstructed variance {rec:.6} differs from reported {rep:.6} by {:.1}%",
                trial.study_id,
                c + 1,
                100.0 * rel
            ));
        }
    }
    let (cov, cov_source) = if warnings.is_empty() {
        let sd_rec: Vec<f64> = (0..d).map(|c| recon.cov[(c, c)].sqrt()).collect();
        let sd_rep: Vec<f64> = reported.iter().map(|v| v.sqrt()).collect();
        let cov = DMatrix::from_fn(d, d, |a, b| {
            if a == b {
                reported[a]
            } else {
                recon.cov[(a, b)] / (sd_rec[a] * sd_rec[b]) * sd_rep[a] * sd_rep[b]
            }
        });
        (symmetrize(&cov), CovarianceSource::ReconstructedCorrelationReportedVariance)
    } else {
        for w in &warnings {
            warn!("{w}; using the reconstructed covariance");
        }
        (recon.cov.clone(), CovarianceSource::Reconstructed)
    };
    Ok(ResolvedMoments {
        target: recon.target,
        n: trial.total_size(),
        mean: recon.mean.clone(),
        cov,
        cov_source,
        warnings,
    })
}

/// `n` rows whose sample mean is `mu` and sample covariance (divisor `n`)
/// is `cov`.
pub fn generate_covariates(n: usize, mu: &DVector<f64>, cov: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    let d = mu.len();
    if cov.shape() != (d, d) {
        return Err(Error::validation("covariance dimension differs from mean"));
    }
    if n <= d {
        return Err(Error::validation(format!(
            "{n} rows cannot match a {d}x{d} covariance exactly; match means only or supply more rows"
        )));
    }
    let scale = cov.diagonal().amax().max(f64::MIN_POSITIVE);
    if min_eigenvalue(cov) < -1e-10 * scale {
        return Err(Error::numerical("target covariance is not positive semidefinite"));
    }
    let mut rng = stream_rng(seed, 0);
    let mut z = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let means = z.row_mean();
    for mut row in z.row_iter_mut() {
        row -= &means;
    }
    let sample = z.tr_mul(&z) / n as f64;
    let whiten = pd_inv_sqrt(&sample)?;
    let color = psd_sqrt(cov);
    let mut out = z * whiten * color;
    for mut row in out.row_iter_mut() {
        row += mu.transpose();
    }
    Ok(out)
}

/// Pseudo participant data for an aggregated trial.
#[derive(Debug, Clone)]
pub struct PseudoTrial {
    pub trial: IpdTrial,
    pub moments: ResolvedMoments,
    /// `n_x * mean_y - successes`, per arm `[x=0, x=1]`.
    pub rounding_residual: [f64; 2],
    pub seed: u64,
}

/// Report written next to the pseudo rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoReport {
    pub study_id: i64,
    pub n: usize,
    pub seed: u64,
    pub moments: ResolvedMoments,
    #[serde(with = "serde_vec")]
    pub sample_mean: DVector<f64>,
    #[serde(with = "serde_rows")]
    pub sample_cov: DMatrix<f64>,
    pub mean_error: f64,
    pub cov_error: f64,
    pub arm_sizes: [usize; 2],
    pub successes: [usize; 2],
    pub rounding_residual: [f64; 2],
}

/// Sample mean and covariance (divisor `n`).
pub fn sample_moments(l: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = l.nrows() as f64;
    let mean = l.row_mean().transpose();
    let mut c = l.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    (mean, symmetrize(&(c.tr_mul(&c) / n)))
}

/// Allocates arms and outcomes to generated covariate rows.
pub fn assign_arms_outcomes(
    trial: &AggregatedTrial,
    covariates: DMatrix<f64>,
    seed: u64,
) -> Result<(IpdTrial, [f64; 2])> {
    let n = trial.total_size();
    if covariates.nrows() != n {
        return Err(Error::validation(format!(
            "study {}: {} covariate rows for {n} participants",
            trial.study_id,
            covariates.nrows()
        )));
    }
    let mut rng = stream_rng(seed, 1);
    let n1 = trial.arm(true).n;
    let mut treatment: Vec<bool> = (0..n).map(|i| i < n1).collect();
    treatment.shuffle(&mut rng);
    let mut outcome = vec![false; n];
    let mut residual = [0.0; 2];
    for x in [false, true] {
        let arm = trial.arm(x);
        let expected = arm.n as f64 * arm.mean_y;
        let successes = expected.round_ties_even() as usize;
        residual[x as usize] = expected - successes as f64;
        let mut members: Vec<usize> = (0..n).filter(|&i| treatment[i] == x).collect();
        members.shuffle(&mut rng);
        for &i in members.iter().take(successes) {
            outcome[i] = true;
        }
    }
    Ok((IpdTrial::new(trial.study_id, covariates, treatment, outcome)?, residual))
}

pub fn generate_pseudo_trial(trial: &AggregatedTrial, moments: &ResolvedMoments, seed: u64) -> Result<PseudoTrial> {
    let n = trial.total_size();
    let l = generate_covariates(n, &moments.mean, &moments.cov, seed)?;
    let (ipd, rounding_residual) = assign_arms_outcomes(trial, l, seed)?;
    Ok(PseudoTrial {
        trial: ipd,
        moments: moments.clone(),
        rounding_residual,
        seed,
    })
}

impl PseudoTrial {
    pub fn report(&self) -> PseudoReport {
        let (mean, cov) = sample_moments(self.trial.covariates());
        let successes = |x: bool| {
            (0..self.trial.len())
                .filter(|&i| self.trial.treatment()[i] == x && self.trial.outcome()[i])
                .count()
        };
        PseudoReport {
            study_id: self.trial.study_id,
            n: self.trial.len(),
            seed: self.seed,
            mean_error: (&mean - &self.moments.mean).amax(),
            cov_error: (&cov - &self.moments.cov).norm(),
            sample_mean: mean,
            sample_cov: cov,
            moments: self.moments.clone(),
            arm_sizes: [self.trial.arm_size(false), self.trial.arm_size(true)],
            successes: [successes(false), successes(true)],
            rounding_residual: self.rounding_residual,
        }
    }

    /// IPD CSV with a trailing `pseudo=1` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_ipd_rows(writer, std::slice::from_ref(&self.trial), Some(("pseudo", "1")))
    }

    pub fn save(&self, csv_path: impl AsRef<Path>, report_path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv_path)?))?;
        std::fs::write(report_path, serde_json::to_string_pretty(&self.report())?)?;
        Ok(())
    }
}
