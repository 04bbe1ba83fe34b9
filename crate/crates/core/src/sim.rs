//! Simulation studies: transportation of trial results to an aggregated
//! trial's population, and the joint meta-analysis model.

use std::io::Write;
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{reconstruct_target, Averaging};
use crate::data::{AggregatedTrial, EffectScale, IpdTrial, StudyCollection};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, psd_sqrt, quantile, symmetrize};
use crate::meta::{fit_submodel_mcmc, EffectEntry, EffectTable, McmcSettings, MetaModelSpec};
use crate::pseudo::resolve_moments;
use crate::sandwich::{collection_moments, fit_source, source_sandwich};
use crate::seed::{child_seed, stream_rng};
use crate::weights::{SolverOptions, WeightModel};

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Three-trial data-generating mechanism with covariates
/// `L1 ~ U(0,1)`, `L2 ~ Bernoulli(0.5)` and 1:1 randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportDgp {
    /// 1: main-effects membership model; 2: adds `-3 L1^2` to trials 2 and 3.
    pub setting: u8,
    /// Treatment coefficient of the outcome model in each trial.
    pub treatment_coef: [f64; 3],
}

impl TransportDgp {
    pub fn new(setting: u8) -> Result<Self> {
        if !(1..=2).contains(&setting) {
            return Err(Error::validation(format!("unknown setting {setting}; expected 1 or 2")));
        }
        Ok(Self {
            setting,
            treatment_coef: [1.75, 0.5, -0.25],
        })
    }

    /// `P(S = s | L)` for `s = 1, 2, 3`.
    pub fn membership(&self, l1: f64, l2: f64) -> [f64; 3] {
        let extra = if self.setting == 2 { -3.0 * l1 * l1 } else { 0.0 };
        let e2 = (1.0 - l1 - l2 + extra).exp();
        let e3 = (-1.0 + l1 + l2 + extra).exp();
        let tot = 1.0 + e2 + e3;
        [1.0 / tot, e2 / tot, e3 / tot]
    }

    /// `P(Y = 1 | X, L)` under trial `s`'s outcome model.
    pub fn outcome_prob(&self, s: usize, x: bool, l1: f64, l2: f64) -> f64 {
        let xf = x as u8 as f64;
        expit(-0.25 + self.treatment_coef[s - 1] * xf - l2 + l1 - 2.0 * xf * l2 + 2.0 * xf * l1)
    }

    /// Conditional risk difference of trial `k`'s regimen.
    pub fn effect(&self, k: usize, l1: f64, l2: f64) -> f64 {
        self.outcome_prob(k, true, l1, l2) - self.outcome_prob(k, false, l1, l2)
    }

    /// `n` patients split into trials by the membership model.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<IpdTrial>> {
        let mut rows: [Vec<(f64, f64, bool, bool)>; 3] = Default::default();
        for _ in 0..n {
            let l1: f64 = rng.random();
            let l2 = rng.random::<f64>() < 0.5;
            let l2f = l2 as u8 as f64;
            let x = rng.random::<f64>() < 0.5;
            let p = self.membership(l1, l2f);
            let u: f64 = rng.random();
            let s = if u < p[0] { 1 } else if u < p[0] + p[1] { 2 } else { 3 };
            let y = rng.random::<f64>() < self.outcome_prob(s, x, l1, l2f);
            rows[s - 1].push((l1, l2f, x, y));
        }
        rows.iter()
            .enumerate()
            .map(|(s, r)| {
                let cov = DMatrix::from_fn(r.len(), 2, |i, c| if c == 0 { r[i].0 } else { r[i].1 });
                IpdTrial::new(
                    s as i64 + 1,
                    cov,
                    r.iter().map(|v| v.2).collect(),
                    r.iter().map(|v| v.3).collect(),
                )
            })
            .collect()
    }
}

pub fn dgp_transport<R: Rng>(setting: u8, n: usize, rng: &mut R) -> Result<Vec<IpdTrial>> {
    TransportDgp::new(setting)?.sample(n, rng)
}

/// Monte Carlo truths `theta(j, k)` (risk differences), `out[j-1][k-1]`.
///
/// Each draw of `L` contributes `P(S=j|L) * effect_k(L)`, normalized by the
/// summed membership probabilities.
pub fn oracle_truth_table(dgp: &TransportDgp, draws: usize, seed: u64) -> [[f64; 3]; 3] {
    const CHUNK: usize = 1 << 16;
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<([f64; 3], [[f64; 3]; 3])> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let m = CHUNK.min(draws - c * CHUNK);
            let mut den = [0.0; 3];
            let mut num = [[0.0; 3]; 3];
            for _ in 0..m {
                let l1: f64 = rng.random();
                let l2 = (rng.random::<f64>() < 0.5) as u8 as f64;
                let p = dgp.membership(l1, l2);
                let e = [dgp.effect(1, l1, l2), dgp.effect(2, l1, l2), dgp.effect(3, l1, l2)];
                for j in 0..3 {
                    den[j] += p[j];
                    for k in 0..3 {
                        num[j][k] += p[j] * e[k];
                    }
                }
            }
            (den, num)
        })
        .collect();
    let mut den = [0.0; 3];
    let mut num = [[0.0; 3]; 3];
    for (d, n) in sums {
        for j in 0..3 {
            den[j] += d[j];
            for k in 0..3 {
                num[j][k] += n[j][k];
            }
        }
    }
    let mut out = [[0.0; 3]; 3];
    for j in 0..3 {
        for k in 0..3 {
            out[j][k] = num[j][k] / den[j];
        }
    }
    out
}

pub fn oracle_truth(dgp: &TransportDgp, j: usize, k: usize, draws: usize, seed: u64) -> Result<f64> {
    if !(1..=3).contains(&j) || !(1..=3).contains(&k) {
        return Err(Error::validation(format!("pair ({j}, {k}) outside 1..3")));
    }
    Ok(oracle_truth_table(dgp, draws, seed)[j - 1][k - 1])
}

/// Default number of patient profiles for the truth oracle.
pub const ORACLE_DRAWS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportSimConfig {
    pub setting: u8,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub oracle_draws: usize,
}

impl TransportSimConfig {
    pub fn new(setting: u8, n: usize, replicates: usize, seed: u64) -> Self {
        Self { setting, n, replicates, seed, oracle_draws: ORACLE_DRAWS }
    }
}

/// One row of the transport report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub setting: u8,
    pub parameter: String,
    pub n: usize,
    pub truth: f64,
    pub bias: f64,
    /// Across-replicate variance of the estimates (divisor `R`).
    pub var: f64,
    /// Across-replicate median of the sandwich variances.
    pub var_hat_median: f64,
    pub mse: f64,
    /// Percent of replicates whose 95% interval covers the truth.
    pub coverage: f64,
    /// Monte Carlo standard error of `coverage`, in percentage points.
    pub coverage_se: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportReplicate {
    pub rep: usize,
    pub estimate: [f64; 2],
    pub variance: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: TransportSimConfig,
    pub rows: Vec<SimRow>,
    pub failed: usize,
    pub runtime_secs: f64,
    #[serde(skip)]
    pub replicates: Vec<TransportReplicate>,
}

impl SimReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_rows_csv(writer, &self.rows)
    }
}

pub fn write_rows_csv<W: Write>(writer: W, rows: &[SimRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["Setting", "Parameter", "n", "Truth", "Bias", "var", "var_hat_median", "MSE", "Coverage", "Coverage_se", "Replicates"])?;
    for r in rows {
        w.write_record([
            r.setting.to_string(),
            r.parameter.clone(),
            r.n.to_string(),
            format!("{:.6e}", r.truth),
            format!("{:.6e}", r.bias),
            format!("{:.6e}", r.var),
            format!("{:.6e}", r.var_hat_median),
            format!("{:.6e}", r.mse),
            format!("{:.2}", r.coverage),
            format!("{:.2}", r.coverage_se),
            r.replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Hides trial 1's participant data, keeps its summaries, and estimates
/// `theta(1, 2)`, `theta(1, 3)` with sandwich variances.
pub fn transport_estimates(trials: &[IpdTrial]) -> Result<([f64; 2], [f64; 2])> {
    if trials.len() != 3 {
        return Err(Error::validation(format!("expected three trials, got {}", trials.len())));
    }
    let agg = AggregatedTrial::from_ipd(&trials[0]).validate()?;
    let studies = StudyCollection::new(vec![agg], trials[1..].to_vec())?;
    let model = WeightModel::maic(2);
    let opts = SolverOptions::default();
    let recon = reconstruct_target(&studies, 1, &model, &opts, Averaging::Unweighted)?;
    let resolved = resolve_moments(studies.study(1).as_aggregated().expect("aggregated"), &recon)?;
    let mut map = std::collections::BTreeMap::new();
    map.insert(1, resolved);
    let targets = collection_moments(&studies, &model.moments, &map)?;
    let mut estimate = [0.0; 2];
    let mut variance = [0.0; 2];
    for k in [2usize, 3] {
        let fits = fit_source(&studies, k, &model, &opts, None)?;
        let r = source_sandwich(&studies, k, &fits, &targets, EffectScale::RiskDifference)?;
        estimate[k - 2] = r.theta[0];
        variance[k - 2] = r.cov[(0, 0)];
    }
    Ok((estimate, variance))
}

/// Replicate `rep` of the transport study, seeded by `(seed, rep)` alone.
pub fn transport_replicate(dgp: &TransportDgp, n: usize, seed: u64, rep: usize) -> Result<TransportReplicate> {
    let mut rng = stream_rng(seed, rep as u64);
    let trials = dgp.sample(n, &mut rng)?;
    let (estimate, variance) = transport_estimates(&trials)?;
    Ok(TransportReplicate { rep, estimate, variance })
}

/// Summary statistics of one parameter over replicates.
pub fn summarize(setting: u8, parameter: &str, n: usize, truth: f64, est: &[f64], var: &[f64]) -> SimRow {
    let r = est.len() as f64;
    let mean = est.iter().sum::<f64>() / r;
    let bias = mean - truth;
    let v = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / r;
    let mse = est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r;
    let covered = est
        .iter()
        .zip(var)
        .filter(|(e, v)| (*e - truth).abs() <= 1.959963984540054 * v.max(0.0).sqrt())
        .count() as f64;
    let c = covered / r;
    SimRow {
        setting,
        parameter: parameter.to_string(),
        n,
        truth,
        bias,
        var: v,
        var_hat_median: quantile(var, 0.5),
        mse,
        coverage: 100.0 * c,
        coverage_se: 100.0 * (c * (1.0 - c) / r).sqrt(),
        replicates: est.len(),
    }
}

pub fn run_transport_sim(cfg: &TransportSimConfig) -> Result<SimReport> {
    if cfg.replicates == 0 {
        return Err(Error::validation("at least one replicate is required"));
    }
    let start = Instant::now();
    let dgp = TransportDgp::new(cfg.setting)?;
    let truth = oracle_truth_table(&dgp, cfg.oracle_draws, child_seed(cfg.seed, 0xA11CE));
    let outcomes: Vec<Result<TransportReplicate>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| transport_replicate(&dgp, cfg.n, cfg.seed, rep))
        .collect();
    let mut ok = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(r) => ok.push(r),
            Err(e) => {
                failed += 1;
                warn!("replicate failed: {e}");
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::numerical("every replicate failed"));
    }
    let rows = (0..2)
        .map(|p| {
            let est: Vec<f64> = ok.iter().map(|r| r.estimate[p]).collect();
            let var: Vec<f64> = ok.iter().map(|r| r.variance[p]).collect();
            summarize(cfg.setting, &format!("theta(1,{})", p + 2), cfg.n, truth[0][p + 1], &est, &var)
        })
        .collect();
    Ok(SimReport {
        config: *cfg,
        rows,
        failed,
        runtime_secs: start.elapsed().as_secs_f64(),
        replicates: ok,
    })
}

/// Position of `(j, k)` in the `q^2` residual vector.
pub fn pair_index(q: usize, j: usize, k: usize) -> usize {
    (j - 1) * q + (k - 1)
}

/// Residual covariance of all `q^2` standardized effects: a random
/// orthogonal rotation of evenly spaced eigenvalues, with covariances of
/// pairs sharing neither population nor regimen set to zero, divided by 9.9.
pub fn gen_residual_cov(q: usize, seed: u64) -> Result<DMatrix<f64>> {
    if q < 2 {
        return Err(Error::validation("at least two studies are required"));
    }
    let n = q * q;
    let mut rng = stream_rng(seed, 0);
    let normal = Normal::new(0.5, 0.2).expect("valid normal");
    let a = DMatrix::from_fn(n, n, |_, _| normal.sample(&mut rng));
    let p = a.qr().q();
    let sigma = DVector::from_fn(n, |i, _| 5e-3 * (n - 1 - i) as f64);
    let mut s = p.transpose() * DMatrix::from_diagonal(&sigma) * p;
    for j in 1..=q {
        for k in 1..=q {
            for j2 in 1..=q {
                for k2 in 1..=q {
                    if j != j2 && k != k2 {
                        s[(pair_index(q, j, k), pair_index(q, j2, k2))] = 0.0;
                    }
                }
            }
        }
    }
    Ok(symmetrize(&(s / 9.9)))
}

/// Entry order used by the meta simulation: aggregated diagonals, then each
/// IPD source's full column.
pub fn available_pairs(q: usize, z: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (1..=z).map(|j| (j, j)).collect();
    for k in z + 1..=q {
        for j in 1..=q {
            out.push((j, k));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaSimConfig {
    pub q: usize,
    pub z: usize,
    pub replicates: usize,
    pub seed: u64,
    pub theta: f64,
    pub omega2: f64,
    pub xi2: f64,
    pub mcmc: McmcSettings,
    pub model: MetaModelSpec,
}

impl MetaSimConfig {
    pub fn new(q: usize, z: usize, replicates: usize, seed: u64) -> Self {
        Self {
            q,
            z,
            replicates,
            seed,
            theta: 0.0,
            omega2: 0.5,
            xi2: 0.5,
            mcmc: McmcSettings::default(),
            model: MetaModelSpec::default(),
        }
    }
}

/// Posterior medians of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaSimRecord {
    pub rep: usize,
    pub theta: f64,
    pub omega2: f64,
    pub tau2: f64,
    pub xi2: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Spread {
    fn of(v: &[f64]) -> Self {
        Self { median: quantile(v, 0.5), q25: quantile(v, 0.25), q75: quantile(v, 0.75) }
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSimReport {
    pub config: MetaSimConfig,
    pub theta: Spread,
    pub omega2: Spread,
    pub tau2: Spread,
    pub xi2: Spread,
    pub failed: usize,
    pub divergent: usize,
    pub sigma_min_eigenvalue: f64,
    pub sigma_mean_variance: f64,
    pub runtime_secs: f64,
    #[serde(skip)]
    pub records: Vec<MetaSimRecord>,
}

impl MetaSimReport {
    /// One row per replicate: `rep,theta,omega2,tau2,xi2,rhat`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rep", "theta", "omega2", "tau2", "xi2", "rhat"])?;
        for r in &self.records {
            w.write_record([
                r.rep.to_string(),
                r.theta.to_string(),
                r.omega2.to_string(),
                r.tau2.to_string(),
                r.xi2.to_string(),
                r.rhat.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws one table from the two-random-effect model.
pub fn simulate_effect_table<R: Rng>(
    cfg: &MetaSimConfig,
    pairs: &[(usize, usize)],
    sigma: &DMatrix<f64>,
    sigma_root: &DMatrix<f64>,
    rng: &mut R,
) -> Result<EffectTable> {
    let q = cfg.q;
    let beta: Vec<f64> = (0..q).map(|_| cfg.omega2.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let gamma: Vec<f64> = (0..q).map(|_| cfg.xi2.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let e = sigma_root * DVector::from_fn(sigma_root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let entries: Vec<EffectEntry> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(j, k))| EffectEntry { j, k, est: cfg.theta + beta[j - 1] + gamma[k - 1] + e[i] })
        .collect();
    EffectTable::new(q, cfg.z, None, entries, sigma.clone())
}

pub fn run_meta_sim(cfg: &MetaSimConfig) -> Result<MetaSimReport> {
    if cfg.replicates == 0 || cfg.z >= cfg.q {
        return Err(Error::validation("need at least one replicate and z < q"));
    }
    let start = Instant::now();
    let full = gen_residual_cov(cfg.q, child_seed(cfg.seed, 0x5167))?;
    let pairs = available_pairs(cfg.q, cfg.z);
    let idx: Vec<usize> = pairs.iter().map(|&(j, k)| pair_index(cfg.q, j, k)).collect();
    let sigma = DMatrix::from_fn(idx.len(), idx.len(), |a, b| full[(idx[a], idx[b])]);
    let sigma_min_eigenvalue = min_eigenvalue(&sigma);
    let sigma_mean_variance = full.trace() / full.nrows() as f64;
    let root = psd_sqrt(&sigma);
    let outcomes: Vec<Result<MetaSimRecord>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(cfg.seed, rep as u64);
            let table = simulate_effect_table(cfg, &pairs, &sigma, &root, &mut rng)?;
            let post = fit_submodel_mcmc(&table, cfg.model, cfg.mcmc, child_seed(cfg.seed, rep as u64 + 1))?;
            let med = |v: Vec<f64>| quantile(&v, 0.5);
            Ok(MetaSimRecord {
                rep,
                theta: med(post.theta()),
                omega2: med(post.omega2()),
                tau2: med(post.tau2()),
                xi2: med(post.xi2()),
                rhat: post.rhat_theta(),
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(e) => {
                failed += 1;
                warn!("replicate failed: {e}");
            }
        }
    }
    if records.is_empty() {
        return Err(Error::numerical("every replicate failed"));
    }
    let col = |f: fn(&MetaSimRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    Ok(MetaSimReport {
        config: *cfg,
        theta: Spread::of(&col(|r| r.theta)),
        omega2: Spread::of(&col(|r| r.omega2)),
        tau2: Spread::of(&col(|r| r.tau2)),
        xi2: Spread::of(&col(|r| r.xi2)),
        failed,
        divergent: records.iter().filter(|r| r.rhat > 1.2).count(),
        sigma_min_eigenvalue,
        sigma_mean_variance,
        runtime_secs: start.elapsed().as_secs_f64(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent route to the truths: Simpson's rule over `L1` and the
    /// two values of `L2`.
    fn quadrature(dgp: &TransportDgp, j: usize, k: usize) -> f64 {
        let m = 20_000;
        let h = 1.0 / m as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for l2 in [0.0, 1.0] {
            for i in 0..=m {
                let l1 = i as f64 * h;
                let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                let p = dgp.membership(l1, l2)[j - 1];
                num += w * p * dgp.effect(k, l1, l2);
                den += w * p;
            }
        }
        num / den
    }

    #[test]
    fn membership_probabilities_sum_to_one() {
        for s in [1, 2] {
            let d = TransportDgp::new(s).unwrap();
            let p = d.membership(0.3, 1.0);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(TransportDgp::new(3).is_err());
    }

    #[test]
    fn monte_carlo_oracle_agrees_with_quadrature() {
        for s in [1, 2] {
            let d = TransportDgp::new(s).unwrap();
            let mc = oracle_truth_table(&d, 2_000_000, 1);
            for j in 1..=3 {
                for k in 1..=3 {
                    let exact = quadrature(&d, j, k);
                    assert!((mc[j - 1][k - 1] - exact).abs() < 1.5e-3, "({j},{k}) {} vs {exact}", mc[j - 1][k - 1]);
                }
            }
        }
    }

    #[test]
    fn equal_coefficients_remove_regimen_dependence() {
        let mut d = TransportDgp::new(1).unwrap();
        d.treatment_coef = [0.5; 3];
        let t = oracle_truth_table(&d, 100_000, 2);
        for row in t {
            assert_eq!(row[0], row[1]);
            assert_eq!(row[1], row[2]);
        }
    }

    #[test]
    fn sampled_trials_are_randomized() {
        let d = TransportDgp::new(1).unwrap();
        let trials = d.sample(20_000, &mut stream_rng(3, 0)).unwrap();
        let n: usize = trials.iter().map(IpdTrial::len).sum();
        assert_eq!(n, 20_000);
        let treated: usize = trials.iter().map(|t| t.arm_size(true)).sum();
        let p = treated as f64 / n as f64;
        assert!((p - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn summary_identities() {
        let est = [0.1, 0.3, 0.25, 0.2];
        let var = [0.01, 0.02, 0.015, 0.01];
        let r = summarize(1, "t", 10, 0.2, &est, &var);
        assert!((r.mse - (r.bias * r.bias + r.var)).abs() < 1e-15);
        assert!((0.0..=100.0).contains(&r.coverage));
    }

    proptest! {
        #[test]
        fn report_rows_obey_identities(
            est in prop::collection::vec(-1.0f64..1.0, 2..60),
            truth in -1.0f64..1.0,
        ) {
            let var: Vec<f64> = est.iter().map(|e| 0.01 + e * e).collect();
            let r = summarize(1, "t", 100, truth, &est, &var);
            prop_assert!((r.mse - (r.bias * r.bias + r.var)).abs() <= 1e-9);
            prop_assert!(r.mse >= r.bias * r.bias - 1e-12);
            prop_assert!((0.0..=100.0).contains(&r.coverage));
        }
    }

    #[test]
    fn residual_cov_structure() {
        let q = 4;
        let s = gen_residual_cov(q, 1).unwrap();
        assert_eq!(s, s.transpose());
        for j in 1..=q {
            for k in 1..=q {
                for j2 in 1..=q {
                    for k2 in 1..=q {
                        let v = s[(pair_index(q, j, k), pair_index(q, j2, k2))];
                        if j != j2 && k != k2 {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
        assert_eq!(s, gen_residual_cov(q, 1).unwrap());
    }

    #[test]
    fn residual_cov_mean_variance() {
        let s = gen_residual_cov(20, 1).unwrap();
        let mean = s.trace() / 400.0;
        // Evenly spaced eigenvalues 0, 0.005, ... average 0.9975 before scaling.
        assert!((mean - 0.9975 / 9.9).abs() < 1e-10, "{mean}");
    }

    #[test]
    fn available_pairs_follow_mask() {
        let p = available_pairs(5, 2);
        assert_eq!(p.len(), 2 + 3 * 5);
        assert!(p.iter().all(|&(j, k)| j == k || k > 2));
    }
}
