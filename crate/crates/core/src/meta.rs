//! Joint meta-analysis of standardized effects.
//!
//! Estimates `theta_hat(j, k)` of trial `k`'s regimen in population `j` are
//! available on the diagonal for every trial and off the diagonal for IPD
//! sources (`k > z`). The fitted submodel is
//!
//! ```text
//! theta_hat(j, k) = theta_k + beta_j + e_jk      (k > z)
//! theta_hat(j, j) = theta   + u_j    + e_jj      (all j)
//! beta_j ~ N(0, omega2),  u_j ~ N(0, tau2),  e ~ N(0, Sigma)
//! ```
//!
//! with `Sigma` known. Case-mix heterogeneity `omega2`, total heterogeneity
//! `tau2` and the beyond-case-mix part `xi2 = max(0, tau2 - omega2)` are
//! reported. Fitting is by Gibbs sampling (joint Gaussian draw of all
//! location parameters, slice updates for the variances) or by REML.

use std::io::Write;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EffectScale;
use crate::error::{Error, Result};
use crate::linalg::{quantile, serde_rows};
use crate::seed::stream_rng;

/// One available estimate `theta_hat(j, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEntry {
    pub j: usize,
    pub k: usize,
    pub est: f64,
}

/// Available estimates with their known residual covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub q: usize,
    pub z: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<EffectScale>,
    pub entries: Vec<EffectEntry>,
    #[serde(with = "serde_rows")]
    pub sigma: DMatrix<f64>,
}

impl EffectTable {
    pub fn new(
        q: usize,
        z: usize,
        scale: Option<EffectScale>,
        entries: Vec<EffectEntry>,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let t = Self { q, z, scale, entries, sigma };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let (q, z) = (self.q, self.z);
        if z >= q {
            return Err(Error::validation("at least one trial with participant data is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.j == 0 || e.j > q || e.k == 0 || e.k > q {
                return Err(Error::validation(format!("entry ({}, {}) outside 1..{q}", e.j, e.k)));
            }
            if e.j != e.k && e.k <= z {
                return Err(Error::validation(format!(
                    "entry ({}, {}) is not available: study {} has no participant data",
                    e.j, e.k, e.k
                )));
            }
            if !e.est.is_finite() {
                return Err(Error::validation(format!("entry ({}, {}) is not finite", e.j, e.k)));
            }
            if !seen.insert((e.j, e.k)) {
                return Err(Error::validation(format!("entry ({}, {}) appears twice", e.j, e.k)));
            }
        }
        for j in 1..=q {
            if !seen.contains(&(j, j)) {
                return Err(Error::validation(format!("diagonal entry ({j}, {j}) is missing")));
            }
        }
        let n = self.entries.len();
        if self.sigma.shape() != (n, n) {
            return Err(Error::validation(format!(
                "sigma is {}x{} for {n} entries",
                self.sigma.nrows(),
                self.sigma.ncols()
            )));
        }
        let scale = self.sigma.amax().max(f64::MIN_POSITIVE);
        if (&self.sigma - self.sigma.transpose()).amax() > 1e-10 * scale || self.sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("sigma must be finite and symmetric"));
        }
        Ok(())
    }

    pub fn index_of(&self, j: usize, k: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.j == j && e.k == k)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

/// How IPD diagonal estimates enter the submodel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalMode {
    /// In both lines, each line with its own block of `Sigma`.
    #[default]
    Literal,
    /// Only in the diagonal line; one joint likelihood.
    Dedupe,
}

/// Random effect of the diagonal line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalEffect {
    /// `u_j ~ N(0, tau2)` independent of `beta_j`.
    #[default]
    Independent,
    /// `beta_j + gamma_j` with `gamma_j ~ N(0, xi2)`, so `tau2 = omega2 + xi2`.
    SharedBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaModelSpec {
    pub diagonal: DiagonalMode,
    pub random: DiagonalEffect,
    /// Prior variance of `theta` and `theta_k`.
    pub location_prior_var: f64,
    /// Upper bound of the uniform variance priors.
    pub variance_upper: f64,
}

impl Default for MetaModelSpec {
    fn default() -> Self {
        Self {
            diagonal: DiagonalMode::Literal,
            random: DiagonalEffect::Independent,
            location_prior_var: 1000.0,
            variance_upper: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    pub chains: usize,
    pub adapt: usize,
    pub samples: usize,
    pub thin: usize,
    /// Holds `omega2` fixed instead of sampling it.
    pub fixed_omega2: Option<f64>,
    /// Holds the diagonal-line variance (`tau2`, or `xi2` for the shared
    /// variant) fixed.
    pub fixed_diagonal_var: Option<f64>,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            chains: 2,
            adapt: 10_000,
            samples: 1_000,
            thin: 5,
            fixed_omega2: None,
            fixed_diagonal_var: None,
        }
    }
}

/// Regression form of the submodel.
#[derive(Debug, Clone)]
struct Design {
    q: usize,
    z: usize,
    spec: MetaModelSpec,
    y: DVector<f64>,
    x: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Design {
    /// Locations are `[theta, theta_{z+1..q}, beta_{1..q}, u_{1..q}]`.
    fn n_loc(&self) -> usize {
        1 + (self.q - self.z) + 2 * self.q
    }

    fn theta_k_col(&self, k: usize) -> usize {
        1 + (k - self.z - 1)
    }

    fn beta_col(&self, j: usize) -> usize {
        1 + (self.q - self.z) + (j - 1)
    }

    fn u_col(&self, j: usize) -> usize {
        1 + (self.q - self.z) + self.q + (j - 1)
    }

    fn fixed_cols(&self) -> std::ops::Range<usize> {
        0..1 + (self.q - self.z)
    }

    fn new(table: &EffectTable, spec: MetaModelSpec) -> Result<Self> {
        table.validate()?;
        let (q, z) = (table.q, table.z);
        let mut line1 = Vec::new();
        let mut line2 = Vec::new();
        for (idx, e) in table.entries.iter().enumerate() {
            if e.j == e.k {
                line2.push(idx);
                if e.k > z && spec.diagonal == DiagonalMode::Literal {
                    line1.push(idx);
                }
            } else {
                line1.push(idx);
            }
        }
        let rows = line1.len() + line2.len();
        let mut d = Self {
            q,
            z,
            spec,
            y: DVector::zeros(rows),
            x: DMatrix::zeros(rows, 1 + (q - z) + 2 * q),
            r: DMatrix::zeros(rows, rows),
        };
        for (row, &idx) in line1.iter().enumerate() {
            let e = table.entries[idx];
            d.y[row] = e.est;
            let c = d.theta_k_col(e.k);
            d.x[(row, c)] = 1.0;
            let c = d.beta_col(e.j);
            d.x[(row, c)] = 1.0;
        }
        for (off, &idx) in line2.iter().enumerate() {
            let row = line1.len() + off;
            let e = table.entries[idx];
            d.y[row] = e.est;
            d.x[(row, 0)] = 1.0;
            let c = d.u_col(e.j);
            d.x[(row, c)] = 1.0;
            if spec.random == DiagonalEffect::SharedBeta {
                let c = d.beta_col(e.j);
                d.x[(row, c)] = 1.0;
            }
        }
        let all: Vec<usize> = line1.iter().chain(line2.iter()).copied().collect();
        for (a, &ia) in all.iter().enumerate() {
            for (b, &ib) in all.iter().enumerate() {
                let same_block = match spec.diagonal {
                    DiagonalMode::Dedupe => true,
                    DiagonalMode::Literal => (a < line1.len()) == (b < line1.len()),
                };
                if same_block {
                    d.r[(a, b)] = table.sigma[(ia, ib)];
                }
            }
        }
        Ok(d)
    }

    fn r_cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        self.r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("residual covariance is singular; the likelihood is not finite"))
    }
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub theta: f64,
    /// `theta_k` for `k = z+1..q`.
    pub theta_k: Vec<f64>,
    pub beta: Vec<f64>,
    pub omega2: f64,
    pub tau2: f64,
    pub xi2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            median: quantile(values, 0.5),
            lower: quantile(values, 0.025),
            upper: quantile(values, 0.975),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub q: usize,
    pub z: usize,
    pub spec: MetaModelSpec,
    pub settings: McmcSettings,
    pub seed: u64,
    /// `chains[c][t]`.
    pub chains: Vec<Vec<Draw>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSummary {
    pub index: usize,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub theta: Summary,
    pub omega2: Summary,
    pub tau2: Summary,
    pub xi2: Summary,
    pub theta_k: Vec<LabeledSummary>,
    /// `theta + beta_j` per population.
    pub population: Vec<LabeledSummary>,
    pub rhat_theta: f64,
    pub chains: usize,
    pub adapt: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl Posterior {
    pub fn draws(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flatten()
    }

    fn collect(&self, f: impl Fn(&Draw) -> f64) -> Vec<f64> {
        self.draws().map(f).collect()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.collect(|d| d.theta)
    }

    pub fn omega2(&self) -> Vec<f64> {
        self.collect(|d| d.omega2)
    }

    pub fn tau2(&self) -> Vec<f64> {
        self.collect(|d| d.tau2)
    }

    /// Per-draw `max(0, tau2 - omega2)`.
    pub fn xi2(&self) -> Vec<f64> {
        self.collect(|d| d.xi2)
    }

    pub fn derive_xi(&self) -> Summary {
        Summary::of(&self.xi2())
    }

    /// Summary of `theta + beta_j`.
    pub fn population_summary(&self, j: usize) -> Result<Summary> {
        if j == 0 || j > self.q {
            return Err(Error::validation(format!("population {j} outside 1..{}", self.q)));
        }
        Ok(Summary::of(&self.collect(|d| d.theta + d.beta[j - 1])))
    }

    /// Split-R-hat of `theta`.
    pub fn rhat_theta(&self) -> f64 {
        let mut seqs: Vec<Vec<f64>> = Vec::new();
        for c in &self.chains {
            let h = c.len() / 2;
            if h < 2 {
                return f64::NAN;
            }
            seqs.push(c[..h].iter().map(|d| d.theta).collect());
            seqs.push(c[h..2 * h].iter().map(|d| d.theta).collect());
        }
        split_rhat(&seqs)
    }

    pub fn summary(&self) -> PosteriorSummary {
        let theta_k = (self.z + 1..=self.q)
            .map(|k| LabeledSummary {
                index: k,
                summary: Summary::of(&self.collect(|d| d.theta_k[k - self.z - 1])),
            })
            .collect();
        let population = (1..=self.q)
            .map(|j| LabeledSummary {
                index: j,
                summary: self.population_summary(j).expect("valid index"),
            })
            .collect();
        PosteriorSummary {
            theta: Summary::of(&self.theta()),
            omega2: Summary::of(&self.omega2()),
            tau2: Summary::of(&self.tau2()),
            xi2: self.derive_xi(),
            theta_k,
            population,
            rhat_theta: self.rhat_theta(),
            chains: self.settings.chains,
            adapt: self.settings.adapt,
            samples: self.settings.samples,
            thin: self.settings.thin,
            seed: self.seed,
            warnings: self.warnings.clone(),
        }
    }

    /// Long-format CSV: `chain,iter,param,value`.
    pub fn write_draws_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["chain", "iter", "param", "value"])?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (t, d) in chain.iter().enumerate() {
                let mut put = |name: String, v: f64| w.write_record([c.to_string(), t.to_string(), name, v.to_string()]);
                put("theta".into(), d.theta)?;
                for (i, v) in d.theta_k.iter().enumerate() {
                    put(format!("theta_k[{}]", self.z + 1 + i), *v)?;
                }
                for (i, v) in d.beta.iter().enumerate() {
                    put(format!("beta[{}]", i + 1), *v)?;
                }
                put("omega2".into(), d.omega2)?;
                put("tau2".into(), d.tau2)?;
                put("xi2".into(), d.xi2)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn split_rhat(seqs: &[Vec<f64>]) -> f64 {
    let m = seqs.len() as f64;
    let n = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Stepping-out slice sampler on `(0, upper)`.
fn slice_sample(rng: &mut ChaCha8Rng, x0: f64, upper: f64, logf: impl Fn(f64) -> f64) -> f64 {
    let width = 1.0;
    let f0 = logf(x0);
    let e: f64 = Exp1.sample(rng);
    let level = f0 - e;
    let mut lo = x0 - width * rng.random::<f64>();
    let mut hi = lo + width;
    while lo > 0.0 && logf(lo) > level {
        lo -= width;
    }
    while hi < upper && logf(hi) > level {
        hi += width;
    }
    lo = lo.max(0.0);
    hi = hi.min(upper);
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if x > 0.0 && logf(x) > level {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
    }
}

fn variance_logpost(q: usize, ss: f64) -> impl Fn(f64) -> f64 {
    move |v: f64| {
        if v <= 0.0 {
            f64::NEG_INFINITY
        } else {
            -0.5 * q as f64 * v.ln() - ss / (2.0 * v)
        }
    }
}

fn precision_of(v: f64) -> f64 {
    1.0 / v.max(1e-12)
}

struct ChainInput<'a> {
    design: &'a Design,
    xtrx: &'a DMatrix<f64>,
    xtry: &'a DVector<f64>,
    settings: McmcSettings,
}

fn run_chain(input: &ChainInput<'_>, mut rng: ChaCha8Rng) -> Result<Vec<Draw>> {
    let d = input.design;
    let s = input.settings;
    let spec = d.spec;
    let (q, z) = (d.q, d.z);
    let nl = d.n_loc();
    let mut omega2 = s.fixed_omega2.unwrap_or(0.1);
    let mut diag_var = s.fixed_diagonal_var.unwrap_or(0.1);
    let total = s.adapt + s.samples * s.thin;
    let mut out = Vec::with_capacity(s.samples);
    for it in 0..total {
        let mut qm = input.xtrx.clone();
        for c in d.fixed_cols() {
            qm[(c, c)] += 1.0 / spec.location_prior_var;
        }
        for j in 1..=q {
            qm[(d.beta_col(j), d.beta_col(j))] += precision_of(omega2);
            qm[(d.u_col(j), d.u_col(j))] += precision_of(diag_var);
        }
        let chol = qm
            .cholesky()
            .ok_or_else(|| Error::numerical("posterior precision of the location parameters is singular"))?;
        let mean = chol.solve(input.xtry);
        let noise = DVector::from_fn(nl, |_, _| StandardNormal.sample(&mut rng));
        let l_t = chol.l().transpose();
        let dev = l_t
            .solve_upper_triangular(&noise)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let eta = mean + dev;

        if s.fixed_omega2.is_none() {
            let ss: f64 = (1..=q).map(|j| eta[d.beta_col(j)].powi(2)).sum();
            omega2 = slice_sample(&mut rng, omega2, spec.variance_upper, variance_logpost(q, ss));
        }
        if s.fixed_diagonal_var.is_none() {
            let ss: f64 = (1..=q).map(|j| eta[d.u_col(j)].powi(2)).sum();
            diag_var = slice_sample(&mut rng, diag_var, spec.variance_upper, variance_logpost(q, ss));
        }

        if it >= s.adapt && (it - s.adapt + 1) % s.thin == 0 {
            let (tau2, xi2) = match spec.random {
                DiagonalEffect::Independent => (diag_var, (diag_var - omega2).max(0.0)),
                DiagonalEffect::SharedBeta => (omega2 + diag_var, diag_var),
            };
            out.push(Draw {
                theta: eta[0],
                theta_k: (z + 1..=q).map(|k| eta[d.theta_k_col(k)]).collect(),
                beta: (1..=q).map(|j| eta[d.beta_col(j)]).collect(),
                omega2,
                tau2,
                xi2,
            });
        }
    }
    Ok(out)
}

/// Samples the submodel posterior; chains run in parallel on independent
/// streams of `seed`.
pub fn fit_submodel_mcmc(
    table: &EffectTable,
    spec: MetaModelSpec,
    settings: McmcSettings,
    seed: u64,
) -> Result<Posterior> {
    if settings.chains == 0 || settings.samples == 0 || settings.thin == 0 {
        return Err(Error::validation("chains, samples and thin must be positive"));
    }
    for v in [settings.fixed_omega2, settings.fixed_diagonal_var].into_iter().flatten() {
        if !(0.0..=spec.variance_upper).contains(&v) {
            return Err(Error::validation(format!("fixed variance {v} outside the prior support")));
        }
    }
    let design = Design::new(table, spec)?;
    let chol = design.r_cholesky()?;
    let rinv_x = chol.solve(&design.x);
    let xtrx = design.x.tr_mul(&rinv_x);
    let xtry = rinv_x.tr_mul(&design.y);
    let input = ChainInput { design: &design, xtrx: &xtrx, xtry: &xtry, settings };
    let chains = (0..settings.chains)
        .into_par_iter()
        .map(|c| run_chain(&input, stream_rng(seed, c as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut post = Posterior {
        q: table.q,
        z: table.z,
        spec,
        settings,
        seed,
        chains,
        warnings: Vec::new(),
    };
    if settings.chains > 1 {
        let r = post.rhat_theta();
        if r > 1.2 {
            let msg = format!("split R-hat of theta is {r:.3}; chains may not have converged");
            warn!("{msg}");
            post.warnings.push(msg);
        }
    }
    Ok(post)
}

/// REML point estimates with predicted random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemlFit {
    pub theta: f64,
    pub theta_k: Vec<LabeledValue>,
    pub omega2: f64,
    pub tau2: f64,
    pub xi2: f64,
    /// Predicted `beta_j`.
    pub beta: Vec<f64>,
    /// Predicted diagonal-line effects (`u_j` or `gamma_j`).
    pub diagonal_effects: Vec<f64>,
    pub restricted_loglik: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledValue {
    pub index: usize,
    pub value: f64,
}

struct RemlState {
    vinv: DMatrix<f64>,
    p: DMatrix<f64>,
    fixed: DVector<f64>,
    loglik: f64,
}

fn reml_state(x: &DMatrix<f64>, y: &DVector<f64>, v: &DMatrix<f64>) -> Result<RemlState> {
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("marginal covariance is not positive definite"))?;
    let vinv = chol.inverse();
    let logdet_v = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let xtvx = x.tr_mul(&(&vinv * x));
    let xchol = xtvx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("fixed effects are not identified"))?;
    let logdet_x = 2.0 * xchol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let vx = &vinv * x;
    let p = &vinv - &vx * xchol.solve(&vx.transpose());
    let fixed = xchol.solve(&vx.tr_mul(y));
    let py = &p * y;
    let loglik = -0.5 * (logdet_v + logdet_x + y.dot(&py));
    Ok(RemlState { vinv, p, fixed, loglik })
}

/// REML by projected Fisher scoring on the two variance components.
pub fn fit_submodel_reml(table: &EffectTable, spec: MetaModelSpec) -> Result<RemlFit> {
    let design = Design::new(table, spec)?;
    let (q, z) = (design.q, design.z);
    let fixed_cols: Vec<usize> = design.fixed_cols().collect();
    let x = design.x.select_columns(&fixed_cols);
    let zb = design.x.select_columns(&(1..=q).map(|j| design.beta_col(j)).collect::<Vec<_>>());
    let zu = design.x.select_columns(&(1..=q).map(|j| design.u_col(j)).collect::<Vec<_>>());
    let ks = [&zb * zb.transpose(), &zu * zu.transpose()];
    let y = &design.y;
    let marginal = |s: &[f64; 2]| &design.r + &ks[0] * s[0] + &ks[1] * s[1];

    let mut s = [0.1, 0.1];
    let mut state = reml_state(&x, y, &marginal(&s))?;
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it + 1;
        let py = &state.p * y;
        let pk: Vec<DMatrix<f64>> = ks.iter().map(|k| &state.p * k).collect();
        let score: Vec<f64> = (0..2)
            .map(|c| -0.5 * pk[c].trace() + 0.5 * py.dot(&(&ks[c] * &py)))
            .collect();
        let info = DMatrix::from_fn(2, 2, |a, b| 0.5 * (&pk[a] * &pk[b]).trace());
        let active: Vec<usize> = (0..2).filter(|&c| !(s[c] <= 0.0 && score[c] <= 0.0)).collect();
        if active.is_empty() {
            break;
        }
        let ia = DMatrix::from_fn(active.len(), active.len(), |a, b| info[(active[a], active[b])]);
        let sa = DVector::from_iterator(active.len(), active.iter().map(|&c| score[c]));
        let step = ia
            .clone()
            .lu()
            .solve(&sa)
            .ok_or_else(|| Error::numerical("REML information matrix is singular"))?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let mut cand = s;
            for (a, &c) in active.iter().enumerate() {
                cand[c] = (s[c] + t * step[a]).max(0.0);
            }
            if let Ok(next) = reml_state(&x, y, &marginal(&cand)) {
                if next.loglik >= state.loglik - 1e-12 * state.loglik.abs().max(1.0) {
                    let change = (0..2).map(|c| (cand[c] - s[c]).abs() / (1.0 + s[c])).fold(0.0, f64::max);
                    s = cand;
                    state = next;
                    moved = change > 1e-12;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if iterations >= 500 {
        return Err(Error::NotConverged {
            iterations,
            grad_norm: f64::NAN,
            last: s.to_vec(),
        });
    }
    let resid = y - &x * &state.fixed;
    let vr = &state.vinv * resid;
    let beta: Vec<f64> = (zb.tr_mul(&vr) * s[0]).iter().copied().collect();
    let diagonal_effects: Vec<f64> = (zu.tr_mul(&vr) * s[1]).iter().copied().collect();
    let (omega2, tau2, xi2) = match spec.random {
        DiagonalEffect::Independent => (s[0], s[1], (s[1] - s[0]).max(0.0)),
        DiagonalEffect::SharedBeta => (s[0], s[0] + s[1], s[1]),
    };
    Ok(RemlFit {
        theta: state.fixed[0],
        theta_k: (z + 1..=q)
            .map(|k| LabeledValue { index: k, value: state.fixed[k - z] })
            .collect(),
        omega2,
        tau2,
        xi2,
        beta,
        diagonal_effects,
        restricted_loglik: state.loglik,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_table(q: usize, z: usize, est: impl Fn(usize, usize) -> f64, var: f64) -> EffectTable {
        let mut entries = Vec::new();
        for j in 1..=z {
            entries.push(EffectEntry { j, k: j, est: est(j, j) });
        }
        for k in z + 1..=q {
            for j in 1..=q {
                entries.push(EffectEntry { j, k, est: est(j, k) });
            }
        }
        let n = entries.len();
        EffectTable::new(q, z, None, entries, DMatrix::identity(n, n) * var).unwrap()
    }

    #[test]
    fn availability_mask_enforced() {
        let sigma = DMatrix::identity(3, 3);
        let bad = vec![
            EffectEntry { j: 1, k: 1, est: 0.0 },
            EffectEntry { j: 2, k: 2, est: 0.0 },
            EffectEntry { j: 2, k: 1, est: 0.0 },
        ];
        assert!(EffectTable::new(2, 1, None, bad, sigma).is_err());
        let t = diag_table(3, 1, |_, _| 0.0, 1.0);
        assert_eq!(t.entries.len(), 1 + 2 * 3);
    }

    #[test]
    fn conjugate_normal_posterior() {
        let y = 0.7;
        let s2 = 0.04;
        let table = EffectTable::new(
            1,
            0,
            None,
            vec![EffectEntry { j: 1, k: 1, est: y }],
            DMatrix::from_element(1, 1, s2),
        )
        .unwrap();
        let settings = McmcSettings {
            chains: 2,
            adapt: 200,
            samples: 4000,
            thin: 1,
            fixed_omega2: Some(0.0),
            fixed_diagonal_var: Some(0.0),
        };
        let post = fit_submodel_mcmc(&table, MetaModelSpec::default(), settings, 11).unwrap();
        let prec = 1.0 / s2 + 1.0 / 1000.0;
        let mean = y / s2 / prec;
        let sd = (1.0 / prec).sqrt();
        let th = post.theta();
        let m = th.iter().sum::<f64>() / th.len() as f64;
        let mc_se = sd / (th.len() as f64).sqrt();
        assert!((m - mean).abs() < 3.0 * mc_se, "{m} vs {mean}");
        let v = th.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (th.len() as f64 - 1.0);
        assert!((v.sqrt() / sd - 1.0).abs() < 0.05);
    }

    #[test]
    fn seed_determinism_and_xi_identity() {
        let table = diag_table(4, 2, |j, k| 0.1 * j as f64 - 0.05 * k as f64, 0.05);
        let settings = McmcSettings { adapt: 100, samples: 50, thin: 2, ..Default::default() };
        let a = fit_submodel_mcmc(&table, MetaModelSpec::default(), settings, 3).unwrap();
        let b = fit_submodel_mcmc(&table, MetaModelSpec::default(), settings, 3).unwrap();
        assert_eq!(a.chains, b.chains);
        for d in a.draws() {
            assert!(d.omega2 >= 0.0 && d.tau2 >= 0.0);
            assert_eq!(d.xi2, (d.tau2 - d.omega2).max(0.0));
        }
        let s = a.summary();
        assert_eq!(s.population.len(), 4);
        assert!(a.population_summary(5).is_err());
    }

    #[test]
    fn degenerate_case_mix_effect() {
        let table = diag_table(3, 1, |_, _| 0.3, 0.05);
        let settings = McmcSettings {
            adapt: 100,
            samples: 200,
            thin: 1,
            fixed_omega2: Some(0.0),
            ..Default::default()
        };
        let post = fit_submodel_mcmc(&table, MetaModelSpec::default(), settings, 5).unwrap();
        let th = Summary::of(&post.theta());
        for j in 1..=3 {
            let p = post.population_summary(j).unwrap();
            assert!((p.median - th.median).abs() < 1e-5);
        }
    }

    #[test]
    fn reml_zero_heterogeneity() {
        let table = diag_table(4, 1, |_, _| 0.25, 1e-4);
        let fit = fit_submodel_reml(&table, MetaModelSpec::default()).unwrap();
        assert_eq!(fit.omega2, 0.0);
        assert_eq!(fit.tau2, 0.0);
        assert!(fit.beta.iter().all(|b| *b == 0.0));
        assert!((fit.theta - 0.25).abs() < 1e-12);
    }

    /// Independent one-dimensional REML for `y_i ~ N(mu, v_i + t)`,
    /// maximized by golden-section search.
    fn reml_1d(y: &[f64], v: &[f64]) -> f64 {
        let ll = |t: f64| {
            let w: Vec<f64> = v.iter().map(|vi| 1.0 / (vi + t)).collect();
            let sw: f64 = w.iter().sum();
            let mu = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sw;
            -0.5 * (v.iter().map(|vi| (vi + t).ln()).sum::<f64>()
                + sw.ln()
                + w.iter().zip(y).map(|(a, b)| a * (b - mu).powi(2)).sum::<f64>())
        };
        let (mut a, mut b) = (0.0f64, 10.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if ll(c) > ll(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn single_column_reduces_to_one_random_effect() {
        // One IPD source: its column is a classic random-effects
        // meta-analysis for omega2 and the diagonal line one for tau2.
        let q = 6;
        let z = 5;
        let vals = [0.3, -0.1, 0.5, 0.05, 0.8, 0.2];
        let diag = [0.1, 0.6, -0.4, 0.3, 0.0, 0.45];
        let mut entries = Vec::new();
        let mut var = Vec::new();
        for j in 1..=z {
            entries.push(EffectEntry { j, k: j, est: diag[j - 1] });
            var.push(0.02 + 0.01 * j as f64);
        }
        for j in 1..=q {
            let est = if j == q { diag[q - 1] } else { vals[j - 1] };
            entries.push(EffectEntry { j, k: q, est });
            var.push(0.03 + 0.005 * j as f64);
        }
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(var.clone()));
        let table = EffectTable::new(q, z, None, entries.clone(), sigma).unwrap();
        let spec = MetaModelSpec { diagonal: DiagonalMode::Dedupe, ..Default::default() };
        let fit = fit_submodel_reml(&table, spec).unwrap();

        let line1_y: Vec<f64> = vals[..z].to_vec();
        let line1_v: Vec<f64> = var[z..z + z].to_vec();
        let mut line2_y: Vec<f64> = diag[..z].to_vec();
        let mut line2_v: Vec<f64> = var[..z].to_vec();
        line2_y.push(diag[q - 1]);
        line2_v.push(var[z + q - 1]);
        let w2 = reml_1d(&line1_y, &line1_v);
        let t2 = reml_1d(&line2_y, &line2_v);
        assert!((fit.omega2 - w2).abs() < 1e-4, "{} vs {w2}", fit.omega2);
        assert!((fit.tau2 - t2).abs() < 1e-4, "{} vs {t2}", fit.tau2);
    }

    #[test]
    fn shared_beta_and_wider_sigma() {
        let table = diag_table(4, 2, |j, k| 0.2 * j as f64 - 0.1 * k as f64, 0.02);
        let settings = McmcSettings { adapt: 500, samples: 500, thin: 2, ..Default::default() };
        let spec = MetaModelSpec { random: DiagonalEffect::SharedBeta, ..Default::default() };
        let post = fit_submodel_mcmc(&table, spec, settings, 2).unwrap();
        for d in post.draws() {
            assert!((d.tau2 - d.omega2 - d.xi2).abs() < 1e-12);
        }
        let reml = fit_submodel_reml(&table, spec).unwrap();
        assert!(reml.tau2 >= reml.omega2);
    }

    #[test]
    fn singular_sigma_is_reported() {
        let entries = vec![EffectEntry { j: 1, k: 1, est: 0.1 }];
        let table = EffectTable::new(1, 0, None, entries, DMatrix::zeros(1, 1)).unwrap();
        let err = fit_submodel_mcmc(&table, MetaModelSpec::default(), McmcSettings::default(), 1).unwrap_err();
        assert!(err.to_string().contains("singular"));
    }
}
