//! Moment-matched propensity-ratio weights.
//!
//! For a source trial `k` with participant data and a target population `j`
//! described only by basis means `phi_bar_j`, the ratio
//! `P(S=j|L) / P(S=k|L)` is modelled as `exp(beta' psi(L))` and `beta` is
//! chosen to minimize
//!
//! ```text
//! f(beta) = || n_k^-1 sum_i phi(L_i) exp(beta' psi(L_i)) - phi_bar_j ||^2
//! ```
//!
//! where `phi` are the moment functions and `psi` the linear-predictor
//! basis. When `phi == psi` the minimum is zero and is found through the
//! convex dual `n_k^-1 sum_i exp(beta' psi_i) - beta' phi_bar_j`; otherwise
//! `f` itself is minimized by a safeguarded Newton method.
//!
//! Weights are stored on the `n_k^-1` scale (they average one when the
//! constant moment is matched). Standardized effects use self-normalized
//! arm means, so that scale never matters downstream.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{AggregatedTrial, EffectScale, IpdTrial, Study, StudyCollection};
use crate::error::{Error, Result};
use crate::linalg::quantile_inverse_cdf;

/// Moment functions and linear predictor of the weight model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightModel {
    pub moments: BasisSpec,
    pub predictor: BasisSpec,
}

impl WeightModel {
    pub fn new(moments: BasisSpec, predictor: BasisSpec) -> Result<Self> {
        if !moments.has_constant() || !predictor.has_constant() {
            return Err(Error::validation(
                "both the moment basis and the linear predictor need a constant term",
            ));
        }
        if predictor.len() > moments.len() {
            return Err(Error::validation(format!(
                "{} moment functions cannot identify {} coefficients",
                moments.len(),
                predictor.len()
            )));
        }
        Ok(Self { moments, predictor })
    }

    /// Matching of covariate means with a main-effects log-linear ratio.
    pub fn maic(d: usize) -> Self {
        let b = BasisSpec::main_effects(d);
        Self {
            moments: b.clone(),
            predictor: b,
        }
    }

    /// Same basis for moments and predictor.
    pub fn exactly_identified(basis: BasisSpec) -> Result<Self> {
        Self::new(basis.clone(), basis)
    }

    pub fn is_exactly_identified(&self) -> bool {
        self.moments == self.predictor
    }
}

/// Basis means of a target population.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTargets {
    pub target: usize,
    pub values: DVector<f64>,
}

/// Basis means available from an aggregated report (constants, linear terms
/// and squares only).
pub fn target_from_aggregated(
    j: usize,
    trial: &AggregatedTrial,
    spec: &BasisSpec,
) -> Result<MomentTargets> {
    spec.check_dim(trial.dim())?;
    let pooled = trial.pool_arm_moments();
    let mut values = Vec::with_capacity(spec.len());
    for &t in spec.terms() {
        values.push(match t {
            crate::basis::BasisTerm::Constant => 1.0,
            crate::basis::BasisTerm::Linear(i) => pooled.mean[i],
            crate::basis::BasisTerm::Square(i) => pooled.raw2[i],
            crate::basis::BasisTerm::Interaction(..) => {
                return Err(Error::InsufficientAggregatedData(format!(
                    "study {} reports no mixed moment for basis term {t}",
                    trial.study_id
                )))
            }
        });
    }
    Ok(MomentTargets {
        target: j,
        values: DVector::from_vec(values),
    })
}

/// Sample basis means of a trial with participant data.
pub fn target_from_ipd(j: usize, trial: &IpdTrial, spec: &BasisSpec) -> Result<MomentTargets> {
    let phi = spec.design(trial.covariates())?;
    let n = phi.nrows() as f64;
    Ok(MomentTargets {
        target: j,
        values: phi.row_sum().transpose() / n,
    })
}

pub fn target_for_study(j: usize, study: &Study, spec: &BasisSpec) -> Result<MomentTargets> {
    match study {
        Study::Aggregated(a) => target_from_aggregated(j, a, spec),
        Study::Ipd(t) => target_from_ipd(j, t, spec),
    }
}

/// Options for [`solve_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Iterates whose (standardized) norm exceeds this are treated as divergent.
    pub max_beta_norm: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 200,
            max_beta_norm: 50.0,
        }
    }
}

/// The moment-matching objective for one `(j, k)` pair on the raw `beta` scale.
#[derive(Debug, Clone)]
pub struct MomentObjective {
    phi: DMatrix<f64>,
    psi: DMatrix<f64>,
    target: DVector<f64>,
}

impl MomentObjective {
    pub fn new(source: &IpdTrial, targets: &MomentTargets, model: &WeightModel) -> Result<Self> {
        let phi = model.moments.design(source.covariates())?;
        let psi = model.predictor.design(source.covariates())?;
        if targets.values.len() != phi.ncols() {
            return Err(Error::validation(format!(
                "target has {} basis means, moment basis has {}",
                targets.values.len(),
                phi.ncols()
            )));
        }
        if targets.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("target basis means must be finite"));
        }
        Ok(Self {
            phi,
            psi,
            target: targets.values.clone(),
        })
    }

    fn n(&self) -> f64 {
        self.phi.nrows() as f64
    }

    pub fn weights(&self, beta: &DVector<f64>) -> DVector<f64> {
        (&self.psi * beta).map(f64::exp)
    }

    /// `g(beta) = n^-1 Phi' w - phi_bar`.
    pub fn residual(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.phi.tr_mul(&self.weights(beta)) / self.n() - &self.target
    }

    pub fn value(&self, beta: &DVector<f64>) -> f64 {
        self.residual(beta).norm_squared()
    }

    /// `d g / d beta`, a `d x m` matrix.
    pub fn jacobian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let w = self.weights(beta);
        let mut wpsi = self.psi.clone();
        for (i, mut row) in wpsi.row_iter_mut().enumerate() {
            row *= w[i];
        }
        self.phi.tr_mul(&wpsi) / self.n()
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let g = self.residual(beta);
        self.jacobian(beta).tr_mul(&g) * 2.0
    }

    pub fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let w = self.weights(beta);
        let g = self.residual(beta);
        let j = self.jacobian(beta);
        let phig = &self.phi * &g;
        let mut scaled = self.psi.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= w[i] * phig[i];
        }
        let curvature = self.psi.tr_mul(&scaled) / self.n();
        (j.tr_mul(&j) + curvature) * 2.0
    }
}

/// Weight cap applied after fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub percentile: f64,
    pub cap: f64,
}

/// Fitted propensity-ratio model for one `(target j, source k)` pair.
#[derive(Debug, Clone)]
pub struct PropensityRatioFit {
    pub source: usize,
    pub target: usize,
    pub model: WeightModel,
    /// Coefficients of the linear predictor on the raw covariate scale.
    pub beta: DVector<f64>,
    pub converged: bool,
    pub objective: f64,
    pub grad_norm: f64,
    /// Whether the Hessian of `f` is positive definite at `beta`.
    pub hessian_pd: bool,
    pub iterations: usize,
    pub truncation: Option<Truncation>,
    weights: DVector<f64>,
    untruncated: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightsSummary {
    pub min: f64,
    pub max: f64,
    pub p95: f64,
    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub ess: f64,
}

/// Serializable digest of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub j: usize,
    pub k: usize,
    pub beta: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub weights_summary: WeightsSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<Truncation>,
}

impl PropensityRatioFit {
    /// Rebuilds a fit from stored coefficients.
    pub fn from_beta(
        k: usize,
        j: usize,
        source: &IpdTrial,
        model: WeightModel,
        beta: DVector<f64>,
    ) -> Result<Self> {
        let psi = model.predictor.design(source.covariates())?;
        if beta.len() != psi.ncols() {
            return Err(Error::validation(format!(
                "pair ({j},{k}): {} coefficients for a {}-term predictor",
                beta.len(),
                psi.ncols()
            )));
        }
        let weights = (&psi * &beta).map(f64::exp);
        Ok(Self {
            source: k,
            target: j,
            model,
            beta,
            converged: true,
            objective: f64::NAN,
            grad_norm: f64::NAN,
            hessian_pd: true,
            iterations: 0,
            truncation: None,
            weights,
            untruncated: None,
        })
    }

    /// Current weights (capped if truncated), on the `n_k^-1` scale.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Weights before truncation.
    pub fn original_weights(&self) -> &DVector<f64> {
        self.untruncated.as_ref().unwrap_or(&self.weights)
    }

    /// Weights divided by their sum.
    pub fn normalized_weights(&self) -> DVector<f64> {
        &self.weights / self.weights.sum()
    }

    pub fn weights_summary(&self) -> WeightsSummary {
        let w = self.weights.as_slice();
        let sum: f64 = w.iter().sum();
        let sum2: f64 = w.iter().map(|v| v * v).sum();
        WeightsSummary {
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            p95: quantile_inverse_cdf(w, 0.95),
            ess: sum * sum / sum2,
        }
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            j: self.target,
            k: self.source,
            beta: self.beta.as_slice().to_vec(),
            objective: self.objective,
            converged: self.converged,
            weights_summary: self.weights_summary(),
            truncation: self.truncation,
        }
    }
}

struct Standardizer {
    active: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Predictor columns other than the constant are centred and scaled;
    /// columns that are constant in the source are dropped.
    fn new(psi: &DMatrix<f64>) -> Self {
        let n = psi.nrows() as f64;
        let mut active = vec![0];
        let mut center = vec![0.0];
        let mut scale = vec![1.0];
        for c in 1..psi.ncols() {
            let col = psi.column(c);
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                active.push(c);
                center.push(m);
                scale.push(sd);
            }
        }
        Self { active, center, scale }
    }

    fn transform(&self, psi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(psi.nrows(), self.active.len());
        for (a, &c) in self.active.iter().enumerate() {
            for i in 0..psi.nrows() {
                out[(i, a)] = if a == 0 {
                    1.0
                } else {
                    (psi[(i, c)] - self.center[a]) / self.scale[a]
                };
            }
        }
        out
    }

    fn to_raw(&self, beta_std: &DVector<f64>, m: usize) -> DVector<f64> {
        let mut beta = DVector::zeros(m);
        let mut intercept = beta_std[0];
        for a in 1..self.active.len() {
            let b = beta_std[a] / self.scale[a];
            beta[self.active[a]] = b;
            intercept -= b * self.center[a];
        }
        beta[0] = intercept;
        beta
    }
}

fn overlap_check(k: usize, j: usize, phi: &DMatrix<f64>, model: &WeightModel, target: &DVector<f64>) -> Result<()> {
    for c in 0..phi.ncols() {
        let col = phi.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = target[c];
        let term = model.moments.terms()[c];
        let range = hi - lo;
        if range <= 1e-12 * (1.0 + hi.abs()) {
            if (t - hi).abs() > 1e-10 {
                return Err(Error::Infeasible {
                    target: j,
                    source_study: k,
                    reason: format!(
                        "basis coordinate {} ({term}) is constant at {hi} in the source but the target mean is {t}",
                        c + 1
                    ),
                });
            }
        } else if t <= lo + 1e-12 * range || t >= hi - 1e-12 * range {
            return Err(Error::Infeasible {
                target: j,
                source_study: k,
                reason: format!(
                    "basis coordinate {} ({term}): target mean {t} is not inside the source range [{lo}, {hi}]",
                    c + 1
                ),
            });
        }
    }
    Ok(())
}

fn diverged(k: usize, j: usize, norm: f64) -> Error {
    Error::Infeasible {
        target: j,
        source_study: k,
        reason: format!(
            "Newton iterates diverge (standardized coefficient norm {norm:.1}); the target moments are likely outside the convex hull of the source basis"
        ),
    }
}

fn exp_design(x: &DMatrix<f64>, beta: &DVector<f64>) -> Option<DVector<f64>> {
    let w = (x * beta).map(f64::exp);
    w.iter().all(|v| v.is_finite()).then_some(w)
}

fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>, n: f64) -> DMatrix<f64> {
    let mut wx = x.clone();
    for (i, mut row) in wx.row_iter_mut().enumerate() {
        row *= w[i];
    }
    x.tr_mul(&wx) / n
}

fn spd_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    h.clone().cholesky().map(|c| c.solve(rhs))
}

/// Newton on the convex dual for exactly identified models. Returns
/// standardized coefficients and iteration count.
fn solve_dual(
    k: usize,
    j: usize,
    x: &DMatrix<f64>,
    t: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, usize)> {
    let n = x.nrows() as f64;
    let m = x.ncols();
    let dual = |b: &DVector<f64>| exp_design(x, b).map(|w| w.sum() / n - b.dot(t));
    let mut beta = DVector::zeros(m);
    let mut current = dual(&beta).expect("finite at zero");
    for it in 0..opts.max_iter {
        let w = exp_design(x, &beta).expect("iterates stay finite");
        let g = x.tr_mul(&w) / n - t;
        let h = weighted_gram(x, &w, n);
        let step = match spd_solve(&h, &(-&g)) {
            Some(s) => s,
            None => {
                let ridge = 1e-10 * (1.0 + h.trace());
                let hr = &h + DMatrix::identity(m, m) * ridge;
                spd_solve(&hr, &(-&g)).ok_or_else(|| Error::numerical("dual Hessian is singular"))?
            }
        };
        let decrement = -g.dot(&step);
        if decrement <= 1e-30 || g.amax() <= 1e-15 * (1.0 + t.amax()) {
            return Ok((beta, it));
        }
        // Near the optimum the decrease falls below the rounding error of
        // the dual, so allow for that when testing sufficient decrease.
        let noise = 64.0 * f64::EPSILON * (1.0 + current.abs());
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &beta + &step * s;
            if let Some(v) = dual(&cand) {
                if v <= current - 1e-4 * s * decrement + noise {
                    accepted = Some((cand, v));
                    break;
                }
            }
            s *= 0.5;
        }
        match accepted {
            Some((b, v)) => {
                beta = b;
                current = v;
            }
            None => return Ok((beta, it)),
        }
        if beta.norm() > opts.max_beta_norm {
            return Err(diverged(k, j, beta.norm()));
        }
    }
    Ok((beta, opts.max_iter))
}

/// Safeguarded Newton on `f` for over-identified models.
fn solve_least_squares(
    k: usize,
    j: usize,
    phi: &DMatrix<f64>,
    x: &DMatrix<f64>,
    t: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, usize)> {
    let n = x.nrows() as f64;
    let m = x.ncols();
    let eval = |b: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, f64)> {
        let w = exp_design(x, b)?;
        let g = phi.tr_mul(&w) / n - t;
        let f = g.norm_squared();
        Some((w, g, f))
    };
    let mut beta = DVector::zeros(m);
    let (mut w, mut g, mut f) = eval(&beta).expect("finite at zero");
    for it in 0..opts.max_iter {
        let mut wx = x.clone();
        for (i, mut row) in wx.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let jac = phi.tr_mul(&wx) / n;
        let grad = jac.tr_mul(&g) * 2.0;
        if grad.amax() <= 1e-15 {
            return Ok((beta, it));
        }
        let phig = phi * &g;
        let mut scaled = x.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= w[i] * phig[i];
        }
        let gn = jac.tr_mul(&jac) * 2.0;
        let hess = &gn + x.tr_mul(&scaled) * (2.0 / n);

        // Full Newton when the Hessian is positive definite, otherwise
        // Levenberg-damped Gauss-Newton with growing damping.
        let mut directions: Vec<DVector<f64>> = Vec::new();
        if let Some(s) = spd_solve(&hess, &(-&grad)) {
            directions.push(s);
        }
        let base = 1e-10 * (1.0 + gn.trace());
        let mut mu = base;
        for _ in 0..12 {
            let damped = &gn + DMatrix::identity(m, m) * mu;
            if let Some(s) = spd_solve(&damped, &(-&grad)) {
                directions.push(s);
            }
            mu *= 100.0;
        }
        let mut accepted = None;
        'dirs: for step in &directions {
            let slope = grad.dot(step);
            if slope >= 0.0 {
                continue;
            }
            let mut s = 1.0;
            for _ in 0..40 {
                let cand = &beta + step * s;
                if let Some((w2, g2, f2)) = eval(&cand) {
                    if f2 <= f + 1e-4 * s * slope {
                        accepted = Some((cand, w2, g2, f2));
                        break 'dirs;
                    }
                }
                s *= 0.5;
            }
        }
        match accepted {
            Some((b, w2, g2, f2)) => {
                let stalled = (f - f2) <= 1e-30 * (1.0 + f);
                beta = b;
                w = w2;
                g = g2;
                f = f2;
                if stalled {
                    return Ok((beta, it + 1));
                }
            }
            None => return Ok((beta, it)),
        }
        if beta.norm() > opts.max_beta_norm {
            return Err(diverged(k, j, beta.norm()));
        }
    }
    Ok((beta, opts.max_iter))
}

/// Estimates the propensity-ratio coefficients for target `targets.target`
/// from source trial `k`.
pub fn solve_weights(
    k: usize,
    source: &IpdTrial,
    targets: &MomentTargets,
    model: &WeightModel,
    opts: &SolverOptions,
) -> Result<PropensityRatioFit> {
    let j = targets.target;
    let objective = MomentObjective::new(source, targets, model)?;
    overlap_check(k, j, &objective.phi, model, &objective.target)?;

    let std = Standardizer::new(&objective.psi);
    let x = std.transform(&objective.psi);
    let m = objective.psi.ncols();

    let (beta_std, iterations) = if model.is_exactly_identified() {
        let mut t = DVector::zeros(std.active.len());
        for (a, &c) in std.active.iter().enumerate() {
            t[a] = if a == 0 {
                objective.target[c]
            } else {
                (objective.target[c] - std.center[a]) / std.scale[a]
            };
        }
        solve_dual(k, j, &x, &t, opts)?
    } else {
        solve_least_squares(k, j, &objective.phi, &x, &objective.target, opts)?
    };
    let beta = std.to_raw(&beta_std, m);
    let grad = objective.gradient(&beta);
    let grad_norm = grad.norm();
    let value = objective.value(&beta);
    if !(grad_norm <= opts.grad_tol) {
        return Err(Error::NotConverged {
            iterations,
            grad_norm,
            last: beta.as_slice().to_vec(),
        });
    }
    let hessian_pd = objective.hessian(&beta).cholesky().is_some();
    let weights = objective.weights(&beta);
    Ok(PropensityRatioFit {
        source: k,
        target: j,
        model: model.clone(),
        beta,
        converged: true,
        objective: value,
        grad_norm,
        hessian_pd,
        iterations,
        truncation: None,
        weights,
        untruncated: None,
    })
}

/// Fits the pair `(j, k)` of a collection; `k` must have IPD.
pub fn fit_pair(
    studies: &StudyCollection,
    j: usize,
    k: usize,
    model: &WeightModel,
    opts: &SolverOptions,
) -> Result<PropensityRatioFit> {
    let source = studies
        .ipd(k)
        .ok_or_else(|| Error::validation(format!("study {k} has no participant data")))?;
    let targets = target_for_study(j, studies.study(j), &model.moments)?;
    solve_weights(k, source, &targets, model, opts)
}

/// Caps weights above the given sample percentile (inverse empirical CDF).
pub fn truncate_weights(fit: &PropensityRatioFit, percentile: f64) -> Result<PropensityRatioFit> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::validation(format!(
            "truncation percentile {percentile} outside (0, 1]"
        )));
    }
    let original = fit.original_weights().clone();
    let cap = quantile_inverse_cdf(original.as_slice(), percentile);
    let mut out = fit.clone();
    out.weights = original.map(|w| w.min(cap));
    out.untruncated = Some(original);
    out.truncation = Some(Truncation { percentile, cap });
    Ok(out)
}

/// Case-mix standardized effect of source `k` in population `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizedEffect {
    pub j: usize,
    pub k: usize,
    pub scale: EffectScale,
    pub estimate: f64,
    /// Standardized risk under treatment.
    pub mu1: f64,
    /// Standardized risk under control.
    pub mu0: f64,
}

/// Self-normalized weighted arm risks `(mu1, mu0)`.
pub fn weighted_arm_risks(source: &IpdTrial, weights: &DVector<f64>) -> Result<(f64, f64)> {
    if weights.len() != source.len() {
        return Err(Error::validation("weight vector length differs from trial size"));
    }
    let mut num = [0.0; 2];
    let mut den = [0.0; 2];
    for i in 0..source.len() {
        let a = source.treatment()[i] as usize;
        den[a] += weights[i];
        if source.outcome()[i] {
            num[a] += weights[i];
        }
    }
    for a in [1, 0] {
        if !(den[a] > 0.0) {
            return Err(Error::UndefinedEstimand(format!(
                "arm x={a} has zero total weight"
            )));
        }
    }
    Ok((num[1] / den[1], num[0] / den[0]))
}

pub fn standardize_effect(
    source: &IpdTrial,
    fit: &PropensityRatioFit,
    scale: EffectScale,
) -> Result<StandardizedEffect> {
    if !fit.converged {
        return Err(Error::numerical(format!(
            "fit ({}, {}) did not converge",
            fit.target, fit.source
        )));
    }
    let (mu1, mu0) = weighted_arm_risks(source, fit.weights())?;
    Ok(StandardizedEffect {
        j: fit.target,
        k: fit.source,
        scale,
        estimate: scale.contrast(mu1, mu0)?,
        mu1,
        mu0,
    })
}

/// Risk difference in the inverse-weighting form with known allocation
/// `r = [r0, r1]`: `sum_i w_i Y_i [X_i / r1 - (1 - X_i) / r0] / sum_i w_i`.
pub fn horvitz_thompson_risk_difference(
    source: &IpdTrial,
    weights: &DVector<f64>,
    r: [f64; 2],
) -> f64 {
    let total = weights.sum();
    let mut acc = 0.0;
    for i in 0..source.len() {
        if source.outcome()[i] {
            let c = if source.treatment()[i] { 1.0 / r[1] } else { -1.0 / r[0] };
            acc += weights[i] * c;
        }
    }
    acc / total
}
