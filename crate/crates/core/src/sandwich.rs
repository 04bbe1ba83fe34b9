//! Sandwich covariance of the standardized effects of one IPD source.
//!
//! For source `k` the stacked parameter holds, for every target `j = 1..q`,
//! the propensity-ratio coefficients `beta_j` (on the pooled-data scale,
//! where the intercept absorbs `log(n_j / n_k)`) followed by
//! `delta_j = (a1, a0, b1, b0)`:
//!
//! ```text
//! Psi_beta_j = I(S=k) phi(L) w_j(L) - I(S=j) phi(L)
//! Psi_a_x    = I(S=k) I(X=x) w_j(L) Y - a_x
//! Psi_b_x    = I(S=k) I(X=x) w_j(L)   - b_x
//! ```
//!
//! with averages taken over the pooled data of all `q` studies. The
//! self-normalized arm risks are `mu_x = a_x / b_x` and the effect is
//! `g(mu1, mu0)`; its covariance follows by the delta method.
//!
//! When the moment basis is larger than the predictor the `beta` equations
//! are projected by the transposed Jacobian before inversion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{EffectScale, IpdTrial, Study, StudyCollection};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, invert, min_eigenvalue, serde_rows, symmetrize};
use crate::meta::{EffectEntry, EffectTable};
use crate::pseudo::ResolvedMoments;
use crate::weights::{
    fit_pair, standardize_effect, truncate_weights, PropensityRatioFit, SolverOptions, WeightModel,
};

const DELTA: usize = 4;

/// Size and basis moments `E[phi]`, `E[phi phi']` of one population.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMoments {
    pub n: usize,
    pub phi_mean: DVector<f64>,
    pub phi_outer: DMatrix<f64>,
}

impl TargetMoments {
    pub fn from_rows(spec: &BasisSpec, trial: &IpdTrial) -> Result<Self> {
        let phi = spec.design(trial.covariates())?;
        let n = phi.nrows() as f64;
        Ok(Self {
            n: trial.len(),
            phi_mean: phi.row_sum().transpose() / n,
            phi_outer: phi.tr_mul(&phi) / n,
        })
    }

    /// From covariate mean and covariance; needs every product of basis
    /// terms to have degree at most two.
    pub fn from_covariate_moments(
        spec: &BasisSpec,
        study: usize,
        n: usize,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> Result<Self> {
        spec.check_dim(mean.len())?;
        let second = cov + mean * mean.transpose();
        let phi_outer = spec.outer_from_moments(mean, &second).ok_or_else(|| {
            Error::InsufficientAggregatedData(format!(
                "study {study}: E[phi phi'] for basis {spec} needs moments above second order"
            ))
        })?;
        Ok(Self {
            n,
            phi_mean: spec.mean_from_moments(mean, &second),
            phi_outer,
        })
    }

    pub fn from_resolved(spec: &BasisSpec, study: usize, m: &ResolvedMoments) -> Result<Self> {
        Self::from_covariate_moments(spec, study, m.n, &m.mean, &m.cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichDiagnostics {
    pub bread_cond: f64,
    pub min_eig: f64,
    /// Largest absolute mean of a stacked estimating function at the estimate.
    pub max_abs_psi_mean: f64,
}

/// Effects of one source on every target and their joint covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichResult {
    #[serde(rename = "source_k")]
    pub source: usize,
    pub scale: EffectScale,
    pub theta: Vec<f64>,
    #[serde(with = "serde_rows")]
    pub cov: DMatrix<f64>,
    pub diagnostics: SandwichDiagnostics,
    #[serde(skip, default = "empty")]
    pub bread: DMatrix<f64>,
    #[serde(skip, default = "empty")]
    pub meat: DMatrix<f64>,
    #[serde(skip, default = "empty")]
    pub param_cov: DMatrix<f64>,
    #[serde(skip)]
    pub n_total: usize,
}

fn empty() -> DMatrix<f64> {
    DMatrix::zeros(0, 0)
}

impl SandwichResult {
    pub fn variances(&self) -> Vec<f64> {
        self.cov.diagonal().iter().copied().collect()
    }
}

/// `bread^-1 meat bread^-T / n`, symmetrized.
pub fn sandwich(bread: &DMatrix<f64>, meat: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let inv = invert(bread, "bread matrix")?;
    let cov = symmetrize(&(&inv * meat * inv.transpose() / n as f64));
    check_diagonal(&cov)?;
    Ok(cov)
}

fn check_diagonal(cov: &DMatrix<f64>) -> Result<()> {
    if let Some(v) = cov.diagonal().iter().find(|v| !(**v >= -1e-10)) {
        return Err(Error::numerical(format!("sandwich covariance has diagonal entry {v}")));
    }
    Ok(())
}

/// The stacked estimating equations of one source.
#[derive(Debug, Clone)]
pub struct EstimatingStack {
    pub source: usize,
    pub q: usize,
    pub scale: EffectScale,
    spec: BasisSpec,
    n_total: usize,
    sizes: Vec<usize>,
    phi: DMatrix<f64>,
    psi: DMatrix<f64>,
    treat: Vec<bool>,
    outcome: Vec<bool>,
    caps: Vec<Option<f64>>,
    params: DVector<f64>,
}

impl EstimatingStack {
    /// `fits[j-1]` must be the fit of target `j` from source `k`; `sizes[j-1]`
    /// is the size of study `j`.
    pub fn new(
        k: usize,
        source: &IpdTrial,
        fits: &[PropensityRatioFit],
        sizes: &[usize],
        scale: EffectScale,
    ) -> Result<Self> {
        let q = fits.len();
        if q == 0 || sizes.len() != q || k == 0 || k > q {
            return Err(Error::validation("one fit and one size per target are required"));
        }
        if sizes[k - 1] != source.len() {
            return Err(Error::validation(format!(
                "size of study {k} ({}) differs from its {} rows",
                sizes[k - 1],
                source.len()
            )));
        }
        let model = fits[0].model.clone();
        for (idx, f) in fits.iter().enumerate() {
            if f.target != idx + 1 || f.source != k {
                return Err(Error::validation(format!(
                    "fit at position {} is for pair ({}, {}), expected ({}, {k})",
                    idx + 1,
                    f.target,
                    f.source,
                    idx + 1
                )));
            }
            if f.model != model {
                return Err(Error::validation("all fits of a source must share one weight model"));
            }
            if !f.converged {
                return Err(Error::numerical(format!("fit ({}, {k}) did not converge", f.target)));
            }
        }
        let phi = model.moments.design(source.covariates())?;
        let psi = model.predictor.design(source.covariates())?;
        let m = psi.ncols();
        let nk = source.len() as f64;
        let mut params = DVector::zeros(q * (m + DELTA));
        let mut caps = Vec::with_capacity(q);
        for (idx, f) in fits.iter().enumerate() {
            let ratio = sizes[idx] as f64 / nk;
            let off = idx * (m + DELTA);
            for c in 0..m {
                params[off + c] = f.beta[c];
            }
            params[off] += ratio.ln();
            caps.push(f.truncation.map(|t| t.cap * ratio));
        }
        let mut stack = Self {
            source: k,
            q,
            scale,
            spec: model.moments.clone(),
            n_total: sizes.iter().sum(),
            sizes: sizes.to_vec(),
            phi,
            psi,
            treat: source.treatment().to_vec(),
            outcome: source.outcome().to_vec(),
            caps,
            params,
        };
        for j in 0..q {
            let w = stack.weights(&stack.params, j).1;
            let n = stack.n_total as f64;
            let off = j * (m + DELTA) + m;
            for i in 0..w.len() {
                let x = stack.treat[i];
                let slot = if x { 0 } else { 1 };
                if stack.outcome[i] {
                    stack.params[off + slot] += w[i] / n;
                }
                stack.params[off + 2 + slot] += w[i] / n;
            }
            if stack.params[off + 2] <= 0.0 || stack.params[off + 3] <= 0.0 {
                return Err(Error::UndefinedEstimand(format!(
                    "pair ({}, {k}): an arm has zero total weight",
                    j + 1
                )));
            }
        }
        Ok(stack)
    }

    fn m(&self) -> usize {
        self.psi.ncols()
    }

    fn d(&self) -> usize {
        self.phi.ncols()
    }

    pub fn param_dim(&self) -> usize {
        self.q * (self.m() + DELTA)
    }

    pub fn psi_dim(&self) -> usize {
        self.q * (self.d() + DELTA)
    }

    pub fn params(&self) -> &DVector<f64> {
        &self.params
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// Untruncated and truncated pooled-scale weights of target `j` (0-based)
    /// plus whether each unit is below the cap.
    fn weights(&self, params: &DVector<f64>, j: usize) -> (DVector<f64>, DVector<f64>, Vec<bool>) {
        let m = self.m();
        let beta = params.rows(j * (m + DELTA), m);
        let raw = (&self.psi * beta).map(f64::exp);
        match self.caps[j] {
            Some(cap) => {
                let free: Vec<bool> = raw.iter().map(|w| *w <= cap).collect();
                (raw.clone(), raw.map(|w| w.min(cap)), free)
            }
            None => (raw.clone(), raw, vec![true; self.psi.nrows()]),
        }
    }

    fn delta(&self, params: &DVector<f64>, j: usize) -> [f64; 4] {
        let off = j * (self.m() + DELTA) + self.m();
        [params[off], params[off + 1], params[off + 2], params[off + 3]]
    }

    /// Stacked estimating functions at `params` for the source rows.
    pub fn source_rows(&self, params: &DVector<f64>) -> DMatrix<f64> {
        let (d, e) = (self.d(), self.psi_dim());
        let n = self.phi.nrows();
        let mut out = DMatrix::zeros(n, e);
        for j in 0..self.q {
            let (wu, wt, _) = self.weights(params, j);
            let del = self.delta(params, j);
            let off = j * (d + DELTA);
            let own = j + 1 == self.source;
            for i in 0..n {
                for c in 0..d {
                    let mut v = self.phi[(i, c)] * wu[i];
                    if own {
                        v -= self.phi[(i, c)];
                    }
                    out[(i, off + c)] = v;
                }
                let x = self.treat[i];
                let y = self.outcome[i] as u8 as f64;
                let (ix1, ix0) = (x as u8 as f64, (!x) as u8 as f64);
                out[(i, off + d)] = ix1 * wt[i] * y - del[0];
                out[(i, off + d + 1)] = ix0 * wt[i] * y - del[1];
                out[(i, off + d + 2)] = ix1 * wt[i] - del[2];
                out[(i, off + d + 3)] = ix0 * wt[i] - del[3];
            }
        }
        out
    }

    /// Stacked estimating functions at `params` for rows of study `j`
    /// (1-based, `j != k`).
    pub fn other_rows(&self, params: &DVector<f64>, j: usize, covariates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let phi = self.spec.design(covariates)?;
        let (d, e) = (self.d(), self.psi_dim());
        let mut out = DMatrix::zeros(phi.nrows(), e);
        for t in 0..self.q {
            let del = self.delta(params, t);
            let off = t * (d + DELTA);
            for i in 0..phi.nrows() {
                if t + 1 == j {
                    for c in 0..d {
                        out[(i, off + c)] = -phi[(i, c)];
                    }
                }
                for s in 0..DELTA {
                    out[(i, off + d + s)] = -del[s];
                }
            }
        }
        Ok(out)
    }

    /// `E[d Psi / d params]` at the estimate, over the pooled data.
    pub fn derivative(&self) -> DMatrix<f64> {
        let (d, m) = (self.d(), self.m());
        let n_total = self.n_total as f64;
        let mut out = DMatrix::zeros(self.psi_dim(), self.param_dim());
        for j in 0..self.q {
            let (wu, wt, free) = self.weights(&self.params, j);
            let ro = j * (d + DELTA);
            let co = j * (m + DELTA);
            for i in 0..self.phi.nrows() {
                for a in 0..d {
                    let f = self.phi[(i, a)] * wu[i] / n_total;
                    for b in 0..m {
                        out[(ro + a, co + b)] += f * self.psi[(i, b)];
                    }
                }
                if free[i] {
                    let x = self.treat[i];
                    let y = self.outcome[i] as u8 as f64;
                    let slot = if x { 0 } else { 1 };
                    for b in 0..m {
                        let g = wt[i] * self.psi[(i, b)] / n_total;
                        out[(ro + d + slot, co + b)] += y * g;
                        out[(ro + d + 2 + slot, co + b)] += g;
                    }
                }
            }
            for s in 0..DELTA {
                out[(ro + d + s, co + m + s)] = -1.0;
            }
        }
        out
    }

    /// `E[Psi Psi']` from source rows and population basis moments.
    /// `targets[j-1]` describes study `j`; the entry for the source itself is
    /// only checked for its size.
    pub fn meat_from_moments(&self, targets: &[TargetMoments]) -> Result<DMatrix<f64>> {
        self.check_sizes(targets.iter().map(|t| t.n))?;
        let d = self.d();
        let e = self.psi_dim();
        let n_total = self.n_total as f64;
        // Psi = s - c with c holding the delta parameters.
        let rows = self.source_rows(&self.params);
        let mut c = DVector::zeros(e);
        for j in 0..self.q {
            let del = self.delta(&self.params, j);
            for s in 0..DELTA {
                c[j * (d + DELTA) + d + s] = del[s];
            }
        }
        let mut s_rows = rows;
        for mut r in s_rows.row_iter_mut() {
            r += c.transpose();
        }
        let mut ess = s_rows.tr_mul(&s_rows) / n_total;
        let mut es = s_rows.row_sum().transpose() / n_total;
        for (idx, t) in targets.iter().enumerate() {
            if idx + 1 == self.source {
                continue;
            }
            if t.phi_mean.len() != d || t.phi_outer.shape() != (d, d) {
                return Err(Error::validation(format!(
                    "basis moments of study {} have the wrong dimension",
                    idx + 1
                )));
            }
            let share = t.n as f64 / n_total;
            let off = idx * (d + DELTA);
            let mut block = ess.view_mut((off, off), (d, d));
            block += &t.phi_outer * share;
            let mut seg = es.rows_mut(off, d);
            seg -= &t.phi_mean * share;
        }
        let cross = &es * c.transpose();
        let meat = ess - &cross - cross.transpose() + &c * c.transpose();
        Ok(symmetrize(&meat))
    }

    /// `E[Psi Psi']` by stacking estimating-function rows of every study.
    /// `rows[j-1]` holds the covariates of study `j` (ignored for the source).
    pub fn meat_from_rows(&self, rows: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
        self.check_sizes(rows.iter().enumerate().map(|(i, r)| {
            if i + 1 == self.source {
                self.phi.nrows()
            } else {
                r.nrows()
            }
        }))?;
        let src = self.source_rows(&self.params);
        let mut meat = src.tr_mul(&src);
        for (idx, cov) in rows.iter().enumerate() {
            if idx + 1 == self.source {
                continue;
            }
            let r = self.other_rows(&self.params, idx + 1, cov)?;
            meat += r.tr_mul(&r);
        }
        Ok(symmetrize(&(meat / self.n_total as f64)))
    }

    /// Mean of every estimating function over the pooled data.
    pub fn psi_mean(&self, params: &DVector<f64>, rows: &[&DMatrix<f64>]) -> Result<DVector<f64>> {
        let mut sum = self.source_rows(params).row_sum().transpose();
        for (idx, cov) in rows.iter().enumerate() {
            if idx + 1 != self.source {
                sum += self.other_rows(params, idx + 1, cov)?.row_sum().transpose();
            }
        }
        Ok(sum / self.n_total as f64)
    }

    fn psi_mean_from_moments(&self, targets: &[TargetMoments]) -> DVector<f64> {
        let d = self.d();
        let n_total = self.n_total as f64;
        let mut mean = self.source_rows(&self.params).row_sum().transpose() / n_total;
        for (idx, t) in targets.iter().enumerate() {
            if idx + 1 == self.source {
                continue;
            }
            let share = t.n as f64 / n_total;
            let off = idx * (d + DELTA);
            let mut seg = mean.rows_mut(off, d);
            seg -= &t.phi_mean * share;
            for j in 0..self.q {
                let del = self.delta(&self.params, j);
                for s in 0..DELTA {
                    mean[j * (d + DELTA) + d + s] -= share * del[s];
                }
            }
        }
        mean
    }

    fn check_sizes(&self, sizes: impl Iterator<Item = usize>) -> Result<()> {
        let got: Vec<usize> = sizes.collect();
        if got != self.sizes {
            return Err(Error::validation(format!(
                "study sizes {got:?} do not match the stack {:?}",
                self.sizes
            )));
        }
        Ok(())
    }

    /// Effects `theta_j = g(a1/b1, a0/b0)` and their gradient with respect
    /// to the stacked parameters.
    pub fn effects(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let m = self.m();
        let mut theta = Vec::with_capacity(self.q);
        let mut grad = DMatrix::zeros(self.q, self.param_dim());
        for j in 0..self.q {
            let [a1, a0, b1, b0] = self.delta(&self.params, j);
            let (mu1, mu0) = (a1 / b1, a0 / b0);
            theta.push(self.scale.contrast(mu1, mu0)?);
            let (g1, g0) = self.scale.contrast_gradient(mu1, mu0);
            let off = j * (m + DELTA) + m;
            grad[(j, off)] = g1 / b1;
            grad[(j, off + 1)] = g0 / b0;
            grad[(j, off + 2)] = -g1 * a1 / (b1 * b1);
            grad[(j, off + 3)] = -g0 * a0 / (b0 * b0);
        }
        Ok((theta, grad))
    }

    /// Bread `-E[d Psi / d params]`, projected to a square system when the
    /// moment basis over-identifies the coefficients, and the projection.
    fn bread_and_projection(&self) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        let (d, m) = (self.d(), self.m());
        let bread = -self.derivative();
        for j in 0..self.q {
            let block = bread.view((j * (d + DELTA), j * (m + DELTA)), (d, m)).into_owned();
            let gram = block.tr_mul(&block);
            let cond = condition_number(&gram).sqrt();
            if !(cond <= 1e12) {
                return Err(Error::numerical(format!(
                    "bread block for beta of pair ({}, {}) is singular (condition {cond:.3e})",
                    j + 1,
                    self.source
                )));
            }
        }
        if d == m {
            return Ok((bread, None));
        }
        let mut proj = DMatrix::zeros(self.param_dim(), self.psi_dim());
        for j in 0..self.q {
            let (ro, co) = (j * (m + DELTA), j * (d + DELTA));
            let block = bread.view((co, ro), (d, m)).transpose();
            proj.view_mut((ro, co), (m, d)).copy_from(&block);
            for s in 0..DELTA {
                proj[(ro + m + s, co + d + s)] = 1.0;
            }
        }
        Ok((&proj * bread, Some(proj)))
    }

    pub fn bread(&self) -> Result<DMatrix<f64>> {
        Ok(self.bread_and_projection()?.0)
    }

    /// Sandwich covariance given a meat matrix.
    pub fn finish(&self, meat: DMatrix<f64>, psi_mean: &DVector<f64>) -> Result<SandwichResult> {
        let (bread, proj) = self.bread_and_projection()?;
        let meat_eff = match &proj {
            Some(p) => symmetrize(&(p * &meat * p.transpose())),
            None => meat.clone(),
        };
        let bread_cond = condition_number(&bread);
        if !(bread_cond <= 1e12) {
            return Err(Error::numerical(format!(
                "bread of source {} is singular (condition {bread_cond:.3e})",
                self.source
            )));
        }
        let param_cov = sandwich(&bread, &meat_eff, self.n_total)?;
        let (theta, grad) = self.effects()?;
        let cov = symmetrize(&(&grad * &param_cov * grad.transpose()));
        check_diagonal(&cov)?;
        Ok(SandwichResult {
            source: self.source,
            scale: self.scale,
            theta,
            diagnostics: SandwichDiagnostics {
                bread_cond,
                min_eig: min_eigenvalue(&cov),
                max_abs_psi_mean: psi_mean.amax(),
            },
            cov,
            bread,
            meat,
            param_cov,
            n_total: self.n_total,
        })
    }

    pub fn sandwich_from_moments(&self, targets: &[TargetMoments]) -> Result<SandwichResult> {
        let meat = self.meat_from_moments(targets)?;
        let mean = self.psi_mean_from_moments(targets);
        self.finish(meat, &mean)
    }

    pub fn sandwich_from_rows(&self, rows: &[&DMatrix<f64>]) -> Result<SandwichResult> {
        let meat = self.meat_from_rows(rows)?;
        let mean = self.psi_mean(&self.params, rows)?;
        self.finish(meat, &mean)
    }
}

/// Fits every target `j = 1..q` from source `k`, truncating when requested.
pub fn fit_source(
    studies: &StudyCollection,
    k: usize,
    model: &WeightModel,
    opts: &SolverOptions,
    truncation: Option<f64>,
) -> Result<Vec<PropensityRatioFit>> {
    (1..=studies.q())
        .map(|j| {
            let fit = fit_pair(studies, j, k, model, opts)?;
            match truncation {
                Some(p) if p < 1.0 => truncate_weights(&fit, p),
                _ => Ok(fit),
            }
        })
        .collect()
}

/// Basis moments of every study in the collection, taking aggregated
/// studies' moments from `resolved` (keyed by study index).
pub fn collection_moments(
    studies: &StudyCollection,
    spec: &BasisSpec,
    resolved: &std::collections::BTreeMap<usize, ResolvedMoments>,
) -> Result<Vec<TargetMoments>> {
    (1..=studies.q())
        .map(|j| match studies.study(j) {
            Study::Ipd(t) => TargetMoments::from_rows(spec, t),
            Study::Aggregated(_) => {
                let m = resolved.get(&j).ok_or_else(|| {
                    Error::InsufficientAggregatedData(format!("cov(L|S={j}) required"))
                })?;
                TargetMoments::from_resolved(spec, j, m)
            }
        })
        .collect()
}

/// Sandwich for source `k` from the block formulas.
pub fn source_sandwich(
    studies: &StudyCollection,
    k: usize,
    fits: &[PropensityRatioFit],
    targets: &[TargetMoments],
    scale: EffectScale,
) -> Result<SandwichResult> {
    let ipd = studies
        .ipd(k)
        .ok_or_else(|| Error::validation(format!("study {k} has no participant data")))?;
    let sizes: Vec<usize> = studies.studies().iter().map(Study::size).collect();
    let stack = EstimatingStack::new(k, ipd, fits, &sizes, scale)?;
    let result = stack.sandwich_from_moments(targets)?;
    // Point estimates are the self-normalized ones.
    for (j, fit) in fits.iter().enumerate() {
        let direct = standardize_effect(ipd, fit, scale)?.estimate;
        debug_assert!((direct - result.theta[j]).abs() <= 1e-9 * (1.0 + direct.abs()));
    }
    Ok(result)
}

/// Collects every estimate and its covariance into one table. IPD sources
/// contribute a full column `(j, k), j = 1..q`; aggregated studies their
/// reported own effect.
pub fn assemble_effect_table(
    studies: &StudyCollection,
    results: &[SandwichResult],
    scale: EffectScale,
) -> Result<EffectTable> {
    let q = studies.q();
    let z = studies.z();
    let mut entries = Vec::new();
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    for j in 1..=z {
        let a = studies.study(j).as_aggregated().expect("aggregated");
        let (est, se) = a.own_effect_on(scale)?;
        if !(se > 0.0) {
            return Err(Error::validation(format!("study {j}: missing standard error of its own effect")));
        }
        entries.push(EffectEntry { j, k: j, est });
        blocks.push(DMatrix::from_element(1, 1, se * se));
    }
    for k in studies.ipd_indices() {
        let r = results
            .iter()
            .find(|r| r.source == k)
            .ok_or_else(|| Error::validation(format!("no variance result for source {k}")))?;
        if r.theta.len() != q {
            return Err(Error::validation(format!("result for source {k} has {} effects", r.theta.len())));
        }
        if r.scale != scale {
            return Err(Error::validation(format!("result for source {k} is on scale {}", r.scale)));
        }
        for (j, est) in r.theta.iter().enumerate() {
            entries.push(EffectEntry { j: j + 1, k, est: *est });
        }
        blocks.push(r.cov.clone());
    }
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut sigma = DMatrix::zeros(total, total);
    let mut at = 0;
    for b in &blocks {
        sigma.view_mut((at, at), b.shape()).copy_from(b);
        at += b.nrows();
    }
    EffectTable::new(q, z, Some(scale), entries, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AggregatedTrial;
    use crate::pseudo::{generate_pseudo_trial, resolve_moments};
    use crate::covariance::reconstruct_target;
    use crate::covariance::Averaging;
    use crate::seed::stream_rng;
    use rand::Rng;
    use std::collections::BTreeMap;

    /// Three trials with different case-mix; study 1 is aggregated.
    fn fixture(n: usize, seed: u64) -> (Vec<IpdTrial>, StudyCollection) {
        let mut rng = stream_rng(seed, 0);
        let mut trials = Vec::new();
        for s in 0..3 {
            let shift = 0.15 * s as f64;
            let cov = DMatrix::from_fn(n, 2, |_, c| {
                if c == 0 {
                    rng.random::<f64>() * (1.0 - shift) + shift
                } else {
                    (rng.random::<f64>() < 0.3 + shift) as u8 as f64
                }
            });
            let x: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            let y: Vec<bool> = (0..n)
                .map(|i| {
                    let lin = -0.5 + (0.8 - 0.4 * s as f64) * x[i] as u8 as f64 + cov[(i, 0)] - 0.5 * cov[(i, 1)];
                    rng.random::<f64>() < 1.0 / (1.0 + (-lin).exp())
                })
                .collect();
            trials.push(IpdTrial::new(s as i64 + 1, cov, x, y).unwrap());
        }
        let agg = AggregatedTrial::from_ipd(&trials[0]);
        let studies = StudyCollection::new(vec![agg], trials[1..].to_vec()).unwrap();
        (trials, studies)
    }

    fn build(studies: &StudyCollection, k: usize, trunc: Option<f64>, scale: EffectScale) -> (EstimatingStack, Vec<PropensityRatioFit>) {
        let model = WeightModel::maic(2);
        let fits = fit_source(studies, k, &model, &SolverOptions::default(), trunc).unwrap();
        let sizes: Vec<usize> = studies.studies().iter().map(Study::size).collect();
        let stack = EstimatingStack::new(k, studies.ipd(k).unwrap(), &fits, &sizes, scale).unwrap();
        (stack, fits)
    }

    #[test]
    fn identity_sandwich() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((sandwich(&i, &i, 100).unwrap() - i / 100.0).norm() < 1e-15);
    }

    #[test]
    fn delta_block_and_zero_cross_blocks() {
        let (_, studies) = fixture(300, 1);
        let (stack, _) = build(&studies, 2, None, EffectScale::RiskDifference);
        let d = stack.derivative();
        let (dm, m) = (stack.d(), stack.m());
        for j in 0..3 {
            for s in 0..DELTA {
                for t in 0..DELTA {
                    let v = d[(j * (dm + DELTA) + dm + s, j * (m + DELTA) + m + t)];
                    assert_eq!(v, if s == t { -1.0 } else { 0.0 });
                }
            }
            for j2 in 0..3 {
                if j2 != j {
                    let block = d.view((j * (dm + DELTA), j2 * (m + DELTA)), (dm + DELTA, m + DELTA));
                    assert!(block.iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn bread_matches_finite_differences() {
        let (trials, studies) = fixture(200, 2);
        for trunc in [None, Some(0.9)] {
            let (stack, _) = build(&studies, 2, trunc, EffectScale::RiskDifference);
            let rows: Vec<&DMatrix<f64>> = trials.iter().map(|t| t.covariates()).collect();
            let analytic = stack.derivative();
            let p = stack.params().clone();
            for c in 0..stack.param_dim() {
                let h = 1e-6 * (1.0 + p[c].abs());
                let mut up = p.clone();
                let mut dn = p.clone();
                up[c] += h;
                dn[c] -= h;
                let fd = (stack.psi_mean(&up, &rows).unwrap() - stack.psi_mean(&dn, &rows).unwrap()) / (2.0 * h);
                for r in 0..stack.psi_dim() {
                    let a = analytic[(r, c)];
                    if trunc.is_some() && a != fd[r] && (a - fd[r]).abs() > 1e-6 * (1.0 + a.abs()) {
                        // A unit sitting exactly at the cap has a one-sided derivative.
                        continue;
                    }
                    assert!((a - fd[r]).abs() <= 1e-6 * (1.0 + a.abs()), "({r},{c}): {a} vs {}", fd[r]);
                }
            }
        }
    }

    #[test]
    fn estimating_equations_vanish_at_estimate() {
        let (trials, studies) = fixture(400, 3);
        let rows: Vec<&DMatrix<f64>> = trials.iter().map(|t| t.covariates()).collect();
        for trunc in [None, Some(0.9)] {
            let (stack, _) = build(&studies, 3, trunc, EffectScale::LogRelativeRisk);
            let mean = stack.psi_mean(stack.params(), &rows).unwrap();
            assert!(mean.amax() < 1e-6, "{}", mean.amax());
        }
    }

    #[test]
    fn all_ipd_meat_equals_outer_product_average() {
        let (trials, _) = fixture(250, 4);
        let studies = StudyCollection::new(vec![], trials.clone()).unwrap();
        let spec = BasisSpec::main_effects(2);
        let targets: Vec<TargetMoments> = trials.iter().map(|t| TargetMoments::from_rows(&spec, t).unwrap()).collect();
        let rows: Vec<&DMatrix<f64>> = trials.iter().map(|t| t.covariates()).collect();
        let (stack, _) = build(&studies, 1, Some(0.95), EffectScale::LogOddsRatio);
        let blocks = stack.meat_from_moments(&targets).unwrap();
        let brute = stack.meat_from_rows(&rows).unwrap();
        assert!((blocks - brute).amax() < 1e-12);
    }

    #[test]
    fn pseudo_rows_block_meat_equals_row_stacking() {
        let (trials, studies) = fixture(300, 5);
        let model = WeightModel::maic(2);
        let recon = reconstruct_target(&studies, 1, &model, &SolverOptions::default(), Averaging::Unweighted).unwrap();
        let agg = studies.study(1).as_aggregated().unwrap();
        let resolved = resolve_moments(agg, &recon).unwrap();
        let pseudo = generate_pseudo_trial(agg, &resolved, 99).unwrap();
        let mut map = BTreeMap::new();
        map.insert(1, resolved);
        let targets = collection_moments(&studies, &model.moments, &map).unwrap();
        let rows: Vec<&DMatrix<f64>> = vec![pseudo.trial.covariates(), trials[1].covariates(), trials[2].covariates()];
        for k in [2, 3] {
            let (stack, _) = build(&studies, k, Some(0.95), EffectScale::RiskDifference);
            let blocks = stack.meat_from_moments(&targets).unwrap();
            let brute = stack.meat_from_rows(&rows).unwrap();
            assert!((&blocks - &brute).amax() < 1e-10, "{}", (&blocks - &brute).amax());
            let a = stack.sandwich_from_moments(&targets).unwrap();
            let b = stack.sandwich_from_rows(&rows).unwrap();
            assert!((a.cov - b.cov).amax() < 1e-12);
        }
    }

    #[test]
    fn sandwich_invariant_to_pseudo_seed() {
        let (trials, studies) = fixture(300, 6);
        let model = WeightModel::maic(2);
        let recon = reconstruct_target(&studies, 1, &model, &SolverOptions::default(), Averaging::Unweighted).unwrap();
        let agg = studies.study(1).as_aggregated().unwrap();
        let resolved = resolve_moments(agg, &recon).unwrap();
        let (stack, _) = build(&studies, 2, None, EffectScale::RiskDifference);
        let covs: Vec<DMatrix<f64>> = [1u64, 2]
            .iter()
            .map(|&s| {
                let p = generate_pseudo_trial(agg, &resolved, s).unwrap();
                let rows: Vec<&DMatrix<f64>> = vec![p.trial.covariates(), trials[1].covariates(), trials[2].covariates()];
                stack.sandwich_from_rows(&rows).unwrap().cov
            })
            .collect();
        assert!((&covs[0] - &covs[1]).amax() < 1e-10);
    }

    #[test]
    fn effects_match_hajek_estimates_and_cov_is_psd() {
        let (_, studies) = fixture(300, 7);
        let model = WeightModel::maic(2);
        let recon = reconstruct_target(&studies, 1, &model, &SolverOptions::default(), Averaging::Unweighted).unwrap();
        let agg = studies.study(1).as_aggregated().unwrap();
        let mut map = BTreeMap::new();
        map.insert(1, resolve_moments(agg, &recon).unwrap());
        let targets = collection_moments(&studies, &model.moments, &map).unwrap();
        for scale in [EffectScale::RiskDifference, EffectScale::LogRelativeRisk, EffectScale::LogOddsRatio] {
            let fits = fit_source(&studies, 2, &model, &SolverOptions::default(), Some(0.95)).unwrap();
            let r = source_sandwich(&studies, 2, &fits, &targets, scale).unwrap();
            for (j, fit) in fits.iter().enumerate() {
                let direct = standardize_effect(studies.ipd(2).unwrap(), fit, scale).unwrap().estimate;
                assert!((direct - r.theta[j]).abs() < 1e-12);
            }
            assert_eq!(r.cov, r.cov.transpose());
            assert!(r.diagnostics.min_eig >= -1e-12);
        }
    }

    #[test]
    fn own_target_variance_is_binomial_like() {
        // With uniform weights the own-population risk difference reduces to
        // the difference of arm proportions; its sandwich variance is the
        // usual plug-in binomial variance.
        let (_, studies) = fixture(500, 8);
        let model = WeightModel::maic(2);
        let recon = reconstruct_target(&studies, 1, &model, &SolverOptions::default(), Averaging::Unweighted).unwrap();
        let agg = studies.study(1).as_aggregated().unwrap();
        let mut map = BTreeMap::new();
        map.insert(1, resolve_moments(agg, &recon).unwrap());
        let targets = collection_moments(&studies, &model.moments, &map).unwrap();
        let fits = fit_source(&studies, 2, &model, &SolverOptions::default(), None).unwrap();
        let r = source_sandwich(&studies, 2, &fits, &targets, EffectScale::RiskDifference).unwrap();
        let t = studies.ipd(2).unwrap();
        let (m1, m0) = t.arm_risks();
        let n1 = t.arm_size(true) as f64;
        let n0 = t.arm_size(false) as f64;
        let plug = m1 * (1.0 - m1) / n1 + m0 * (1.0 - m0) / n0;
        assert!((r.cov[(1, 1)] - plug).abs() < 1e-10 * plug.max(1.0) + 1e-12, "{} vs {plug}", r.cov[(1, 1)]);
    }

    #[test]
    fn missing_aggregated_moments() {
        let (_, studies) = fixture(100, 9);
        let err = collection_moments(&studies, &BasisSpec::main_effects(2), &BTreeMap::new()).unwrap_err();
        assert_eq!(err.to_string(), "insufficient aggregated data: cov(L|S=1) required");
        let m = ResolvedMoments {
            target: 1,
            n: 100,
            mean: DVector::from_vec(vec![0.5, 0.3]),
            cov: DMatrix::identity(2, 2),
            cov_source: crate::pseudo::CovarianceSource::Reconstructed,
            warnings: vec![],
        };
        assert!(matches!(
            TargetMoments::from_resolved(&BasisSpec::with_squares(2), 1, &m),
            Err(Error::InsufficientAggregatedData(_))
        ));
    }
}
