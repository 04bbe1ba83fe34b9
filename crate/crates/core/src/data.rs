//! Trial representations, file ingestion and pooled moments.
//!
//! Two kinds of trial enter an analysis: trials with individual participant
//! data ([`IpdTrial`]) and trials that only publish arm-level summaries
//! ([`AggregatedTrial`]). A [`StudyCollection`] orders them with the
//! aggregated trials first and relabels studies `1..=q`.
//!
//! Moments follow the "divide by n" convention throughout: an implied
//! variance is `raw2 - mean^2`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MOMENT_TOL: f64 = 1e-12;

/// Scale on which treatment effects are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectScale {
    #[serde(rename = "rd", alias = "risk_difference", alias = "risk-difference")]
    RiskDifference,
    #[serde(rename = "log-rr", alias = "log_relative_risk", alias = "log_rr")]
    LogRelativeRisk,
    #[serde(rename = "log-or", alias = "log_odds_ratio", alias = "log_or")]
    LogOddsRatio,
}

impl EffectScale {
    /// Effect from the two arm risks `(mu1, mu0)`.
    pub fn contrast(self, mu1: f64, mu0: f64) -> Result<f64> {
        match self {
            EffectScale::RiskDifference => Ok(mu1 - mu0),
            EffectScale::LogRelativeRisk => {
                if mu1 <= 0.0 || mu0 <= 0.0 {
                    return Err(Error::UndefinedEstimand(format!(
                        "log relative risk needs positive arm risks, got ({mu1}, {mu0})"
                    )));
                }
                Ok((mu1 / mu0).ln())
            }
            EffectScale::LogOddsRatio => {
                let ok = |m: f64| m > 0.0 && m < 1.0;
                if !ok(mu1) || !ok(mu0) {
                    return Err(Error::UndefinedEstimand(format!(
                        "log odds ratio needs arm risks strictly inside (0,1), got ({mu1}, {mu0})"
                    )));
                }
                Ok((mu1 / (1.0 - mu1)).ln() - (mu0 / (1.0 - mu0)).ln())
            }
        }
    }

    /// Partial derivatives of [`contrast`](Self::contrast) with respect to `(mu1, mu0)`.
    pub fn contrast_gradient(self, mu1: f64, mu0: f64) -> (f64, f64) {
        match self {
            EffectScale::RiskDifference => (1.0, -1.0),
            EffectScale::LogRelativeRisk => (1.0 / mu1, -1.0 / mu0),
            EffectScale::LogOddsRatio => (1.0 / (mu1 * (1.0 - mu1)), -1.0 / (mu0 * (1.0 - mu0))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EffectScale::RiskDifference => "rd",
            EffectScale::LogRelativeRisk => "log-rr",
            EffectScale::LogOddsRatio => "log-or",
        }
    }
}

impl fmt::Display for EffectScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EffectScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rd" | "risk-difference" | "risk_difference" => Ok(EffectScale::RiskDifference),
            "log-rr" | "log_rr" | "log_relative_risk" => Ok(EffectScale::LogRelativeRisk),
            "log-or" | "log_or" | "log_odds_ratio" => Ok(EffectScale::LogOddsRatio),
            other => Err(Error::validation(format!("unknown effect scale `{other}`"))),
        }
    }
}

/// One trial with participant-level rows.
#[derive(Debug, Clone, PartialEq)]
pub struct IpdTrial {
    pub study_id: i64,
    covariates: DMatrix<f64>,
    treatment: Vec<bool>,
    outcome: Vec<bool>,
}

impl IpdTrial {
    pub fn new(
        study_id: i64,
        covariates: DMatrix<f64>,
        treatment: Vec<bool>,
        outcome: Vec<bool>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::validation(format!(
                "study {study_id}: {n} covariate rows but {} treatments and {} outcomes",
                treatment.len(),
                outcome.len()
            )));
        }
        if n < 2 {
            return Err(Error::validation(format!(
                "study {study_id}: at least two participants required"
            )));
        }
        let treated = treatment.iter().filter(|&&x| x).count();
        if treated == 0 || treated == n {
            return Err(Error::validation(format!(
                "study {study_id}: both treatment arms must be non-empty"
            )));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "study {study_id}: non-finite covariate at row {}, column {}",
                pos % n + 1,
                pos / n + 1
            )));
        }
        Ok(Self {
            study_id,
            covariates,
            treatment,
            outcome,
        })
    }

    pub fn len(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of covariates, `p - 1`.
    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[bool] {
        &self.outcome
    }

    pub fn arm_size(&self, x: bool) -> usize {
        self.treatment.iter().filter(|&&t| t == x).count()
    }

    /// Whole-trial sample moments `(mean, raw second moment)` per covariate.
    pub fn sample_moments(&self) -> PooledMoments {
        let n = self.len() as f64;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut raw2 = vec![0.0; d];
        for c in 0..d {
            let col = self.covariates.column(c);
            mean[c] = col.iter().sum::<f64>() / n;
            raw2[c] = col.iter().map(|v| v * v).sum::<f64>() / n;
        }
        PooledMoments { mean, raw2 }
    }

    /// Unweighted arm risks `(mu1, mu0)`.
    pub fn arm_risks(&self) -> (f64, f64) {
        let mut s = [0.0; 2];
        let mut c = [0.0; 2];
        for (&x, &y) in self.treatment.iter().zip(&self.outcome) {
            let a = x as usize;
            c[a] += 1.0;
            if y {
                s[a] += 1.0;
            }
        }
        (s[1] / c[1], s[0] / c[0])
    }

    /// Writes the trial as `study,treat,outcome,l1,...` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_ipd_rows(writer, std::slice::from_ref(self), None)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub(crate) fn write_ipd_rows<W: Write>(
    writer: W,
    trials: &[IpdTrial],
    marker: Option<(&str, &str)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = trials.first().map_or(0, IpdTrial::dim);
    let mut header = vec!["study".to_string(), "treat".into(), "outcome".into()];
    header.extend((1..=d).map(|c| format!("l{c}")));
    if let Some((name, _)) = marker {
        header.push(name.to_string());
    }
    w.write_record(&header)?;
    for t in trials {
        for i in 0..t.len() {
            let mut rec = vec![
                t.study_id.to_string(),
                (t.treatment[i] as u8).to_string(),
                (t.outcome[i] as u8).to_string(),
            ];
            rec.extend((0..d).map(|c| format!("{}", t.covariates[(i, c)])));
            if let Some((_, value)) = marker {
                rec.push(value.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Expected column layout for IPD files.
#[derive(Debug, Clone, Copy, Default)]
pub struct IpdSchema {
    /// Required number of covariate columns; `None` accepts whatever the header declares.
    pub n_covariates: Option<usize>,
}

/// Loads a single-study IPD CSV.
pub fn load_ipd(path: impl AsRef<Path>, schema: IpdSchema) -> Result<IpdTrial> {
    let mut trials = load_ipd_studies(path.as_ref(), schema)?;
    if trials.len() != 1 {
        return Err(Error::validation(format!(
            "{}: expected a single study, found {}",
            path.as_ref().display(),
            trials.len()
        )));
    }
    Ok(trials.remove(0))
}

/// Loads an IPD CSV that may hold several studies, in order of first appearance.
pub fn load_ipd_studies(path: impl AsRef<Path>, schema: IpdSchema) -> Result<Vec<IpdTrial>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path)
        .map_err(|e| Error::validation(format!("cannot open IPD file {shown}: {e}")))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: shown.clone(),
        row,
        column: column.to_string(),
        message,
    };
    for (pos, name) in ["study", "treat", "outcome"].iter().enumerate() {
        if header.get(pos).map(String::as_str) != Some(*name) {
            return Err(parse_err(1, name, "missing column (header must start with study,treat,outcome)".into()));
        }
    }
    let mut d = 0;
    while header.get(3 + d).map(String::as_str) == Some(format!("l{}", d + 1).as_str()) {
        d += 1;
    }
    for extra in &header[3 + d..] {
        if extra != "pseudo" {
            return Err(parse_err(1, extra, "unexpected column".into()));
        }
    }
    if let Some(want) = schema.n_covariates {
        if want != d {
            let col = format!("l{}", d.min(want) + 1);
            return Err(parse_err(1, &col, format!("expected {want} covariate columns, found {d}")));
        }
    }

    let mut order: Vec<i64> = Vec::new();
    let mut rows: Vec<(Vec<f64>, Vec<bool>, Vec<bool>)> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let study: i64 = field(0)
            .parse()
            .map_err(|_| parse_err(line, "study", format!("not an integer: `{}`", field(0))))?;
        let binary = |c: usize, name: &str| -> Result<bool> {
            match field(c) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(line, name, format!("expected 0 or 1, got `{other}`"))),
            }
        };
        let x = binary(1, "treat")?;
        let y = binary(2, "outcome")?;
        let slot = match order.iter().position(|&s| s == study) {
            Some(p) => p,
            None => {
                order.push(study);
                rows.push((Vec::new(), Vec::new(), Vec::new()));
                order.len() - 1
            }
        };
        let entry = &mut rows[slot];
        for c in 0..d {
            let name = format!("l{}", c + 1);
            let raw = field(3 + c);
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, &name, format!("not a number: `{raw}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, &name, "missing or non-finite value".into()));
            }
            entry.0.push(v);
        }
        entry.1.push(x);
        entry.2.push(y);
    }
    if order.is_empty() {
        return Err(parse_err(2, "study", "file has no data rows".into()));
    }
    order
        .into_iter()
        .zip(rows)
        .map(|(study, (flat, x, y))| {
            let n = x.len();
            let cov = DMatrix::from_row_slice(n, d, &flat);
            IpdTrial::new(study, cov, x, y)
                .map_err(|e| parse_err(0, "treat", format!("study {study}: {e}")))
        })
        .collect()
}

/// Summary of one treatment arm of an aggregated trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub x: u8,
    pub n: usize,
    pub mean_l: Vec<f64>,
    pub raw2_l: Vec<f64>,
    pub mean_y: f64,
}

/// Published effect estimate of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwnEffect {
    pub scale: EffectScale,
    pub est: f64,
    pub se: f64,
}

/// One trial for which only arm-level summaries are available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedTrial {
    pub study_id: i64,
    pub arms: Vec<ArmSummary>,
    /// `[P(X=0), P(X=1)]`.
    pub allocation: [f64; 2],
    pub own_effect: OwnEffect,
}

/// Pooled first and raw second moments per covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledMoments {
    pub mean: Vec<f64>,
    pub raw2: Vec<f64>,
}

impl PooledMoments {
    pub fn variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.raw2)
            .map(|(m, r)| r - m * m)
            .collect()
    }
}

impl AggregatedTrial {
    /// Checks every invariant and puts the arms in `x = 0, 1` order.
    pub fn validate(mut self) -> Result<Self> {
        let id = self.study_id;
        if self.arms.len() != 2 {
            return Err(Error::validation(format!("study {id}: exactly two arms required")));
        }
        self.arms.sort_by_key(|a| a.x);
        if self.arms[0].x != 0 || self.arms[1].x != 1 {
            return Err(Error::validation(format!("study {id}: arms must be x=0 and x=1")));
        }
        let d = self.arms[0].mean_l.len();
        for arm in &self.arms {
            if arm.n == 0 {
                return Err(Error::validation(format!("study {id}: arm x={} is empty", arm.x)));
            }
            if arm.mean_l.len() != d || arm.raw2_l.len() != d {
                return Err(Error::validation(format!(
                    "study {id}: arm x={} has inconsistent covariate dimensions",
                    arm.x
                )));
            }
            if !(0.0..=1.0).contains(&arm.mean_y) {
                return Err(Error::validation(format!(
                    "study {id}: arm x={} outcome mean {} outside [0,1]",
                    arm.x, arm.mean_y
                )));
            }
            for (c, (&m, &r)) in arm.mean_l.iter().zip(&arm.raw2_l).enumerate() {
                if !m.is_finite() || !r.is_finite() {
                    return Err(Error::validation(format!(
                        "study {id}: arm x={} covariate {} has non-finite moments",
                        arm.x,
                        c + 1
                    )));
                }
                if r < m * m - MOMENT_TOL * (1.0 + m * m) {
                    return Err(Error::validation(format!(
                        "study {id}: arm x={} covariate l{}: raw second moment {r} is below squared mean {}",
                        arm.x,
                        c + 1,
                        m * m
                    )));
                }
            }
        }
        let [r0, r1] = self.allocation;
        if !(0.0..=1.0).contains(&r0) || !(0.0..=1.0).contains(&r1) || (r0 + r1 - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "study {id}: allocation ({r0}, {r1}) must be probabilities summing to 1"
            )));
        }
        if !self.own_effect.est.is_finite() || !(self.own_effect.se > 0.0) {
            return Err(Error::validation(format!(
                "study {id}: own effect needs a finite estimate and positive standard error"
            )));
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.arms[0].mean_l.len()
    }

    pub fn arm(&self, x: bool) -> &ArmSummary {
        &self.arms[x as usize]
    }

    pub fn total_size(&self) -> usize {
        self.arms.iter().map(|a| a.n).sum()
    }

    /// Pooled moments `m = sum_x r_x m_x`.
    pub fn pool_arm_moments(&self) -> PooledMoments {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut raw2 = vec![0.0; d];
        for (arm, r) in self.arms.iter().zip(self.allocation) {
            for c in 0..d {
                mean[c] += r * arm.mean_l[c];
                raw2[c] += r * arm.raw2_l[c];
            }
        }
        PooledMoments { mean, raw2 }
    }

    /// Own effect on `scale`, recomputed from the arm outcome means when the
    /// published estimate is on a different scale.
    pub fn own_effect_on(&self, scale: EffectScale) -> Result<(f64, f64)> {
        if self.own_effect.scale == scale {
            return Ok((self.own_effect.est, self.own_effect.se));
        }
        let (a1, a0) = (self.arm(true), self.arm(false));
        let est = scale.contrast(a1.mean_y, a0.mean_y)?;
        let var_mean = |m: f64, n: usize| m * (1.0 - m) / n as f64;
        let (g1, g0) = scale.contrast_gradient(a1.mean_y, a0.mean_y);
        let var = g1 * g1 * var_mean(a1.mean_y, a1.n) + g0 * g0 * var_mean(a0.mean_y, a0.n);
        Ok((est, var.sqrt()))
    }

    /// Summarizes an IPD trial the way a trial report would.
    pub fn from_ipd(trial: &IpdTrial) -> Self {
        let n = trial.len() as f64;
        let d = trial.dim();
        let arms: Vec<ArmSummary> = [false, true]
            .iter()
            .map(|&x| {
                let idx: Vec<usize> = (0..trial.len()).filter(|&i| trial.treatment[i] == x).collect();
                let nx = idx.len() as f64;
                let mut mean_l = vec![0.0; d];
                let mut raw2_l = vec![0.0; d];
                for &i in &idx {
                    for c in 0..d {
                        let v = trial.covariates[(i, c)];
                        mean_l[c] += v;
                        raw2_l[c] += v * v;
                    }
                }
                mean_l.iter_mut().for_each(|v| *v /= nx);
                raw2_l.iter_mut().for_each(|v| *v /= nx);
                let mean_y = idx.iter().filter(|&&i| trial.outcome[i]).count() as f64 / nx;
                ArmSummary {
                    x: x as u8,
                    n: idx.len(),
                    mean_l,
                    raw2_l,
                    mean_y,
                }
            })
            .collect();
        let (n0, n1) = (arms[0].n as f64, arms[1].n as f64);
        let (p1, p0) = (arms[1].mean_y, arms[0].mean_y);
        let se = (p1 * (1.0 - p1) / n1 + p0 * (1.0 - p0) / n0).sqrt();
        AggregatedTrial {
            study_id: trial.study_id,
            arms,
            allocation: [n0 / n, n1 / n],
            own_effect: OwnEffect {
                scale: EffectScale::RiskDifference,
                est: p1 - p0,
                se: if se > 0.0 { se } else { f64::MIN_POSITIVE },
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Loads and validates an aggregated-trial JSON document.
pub fn load_agg(path: impl AsRef<Path>) -> Result<AggregatedTrial> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::validation(format!("cannot open aggregated file {}: {e}", path.display())))?;
    let trial: AggregatedTrial = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    trial.validate()
}

/// A trial in a collection.
#[derive(Debug, Clone, PartialEq)]
pub enum Study {
    Aggregated(AggregatedTrial),
    Ipd(IpdTrial),
}

impl Study {
    pub fn size(&self) -> usize {
        match self {
            Study::Aggregated(a) => a.total_size(),
            Study::Ipd(t) => t.len(),
        }
    }

    pub fn original_id(&self) -> i64 {
        match self {
            Study::Aggregated(a) => a.study_id,
            Study::Ipd(t) => t.study_id,
        }
    }

    pub fn as_ipd(&self) -> Option<&IpdTrial> {
        match self {
            Study::Ipd(t) => Some(t),
            Study::Aggregated(_) => None,
        }
    }

    pub fn as_aggregated(&self) -> Option<&AggregatedTrial> {
        match self {
            Study::Aggregated(a) => Some(a),
            Study::Ipd(_) => None,
        }
    }
}

/// Ordered trials of one analysis: studies `1..=z` are aggregated, `z+1..=q` have IPD.
///
/// Study indices in this type are 1-based, matching the labels written to
/// every artifact.
#[derive(Debug, Clone)]
pub struct StudyCollection {
    studies: Vec<Study>,
    z: usize,
    dim: usize,
}

impl StudyCollection {
    pub fn new(aggregated: Vec<AggregatedTrial>, ipd: Vec<IpdTrial>) -> Result<Self> {
        if ipd.is_empty() {
            return Err(Error::validation("at least one trial with IPD is required"));
        }
        let dim = ipd[0].dim();
        let mut seen = HashSet::new();
        let z = aggregated.len();
        let mut studies = Vec::with_capacity(z + ipd.len());
        for a in aggregated {
            studies.push(Study::Aggregated(a.validate()?));
        }
        studies.extend(ipd.into_iter().map(Study::Ipd));
        for s in &studies {
            let d = match s {
                Study::Aggregated(a) => a.dim(),
                Study::Ipd(t) => t.dim(),
            };
            if d != dim {
                return Err(Error::validation(format!(
                    "study {} has {d} covariates, expected {dim}",
                    s.original_id()
                )));
            }
            if !seen.insert(s.original_id()) {
                return Err(Error::validation(format!(
                    "duplicate study id {}",
                    s.original_id()
                )));
            }
        }
        Ok(Self { studies, z, dim })
    }

    pub fn q(&self) -> usize {
        self.studies.len()
    }

    pub fn z(&self) -> usize {
        self.z
    }

    /// Covariate dimension `p - 1`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Study `j` (1-based).
    pub fn study(&self, j: usize) -> &Study {
        &self.studies[j - 1]
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn ipd(&self, k: usize) -> Option<&IpdTrial> {
        self.study(k).as_ipd()
    }

    /// 1-based indices of the IPD studies.
    pub fn ipd_indices(&self) -> std::ops::RangeInclusive<usize> {
        self.z + 1..=self.q()
    }

    pub fn total_size(&self) -> usize {
        self.studies.iter().map(Study::size).sum()
    }

    /// `(normalized index, original id)` pairs.
    pub fn id_map(&self) -> Vec<(usize, i64)> {
        self.studies
            .iter()
            .enumerate()
            .map(|(i, s)| (i + 1, s.original_id()))
            .collect()
    }

    /// Covariate means of study `j`: pooled report moments or IPD sample means.
    pub fn covariate_means(&self, j: usize) -> DVector<f64> {
        match self.study(j) {
            Study::Aggregated(a) => DVector::from_vec(a.pool_arm_moments().mean),
            Study::Ipd(t) => DVector::from_vec(t.sample_moments().mean),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_ipd_csv() {
        let f = write_tmp("study,treat,outcome,l1\n7,0,1,0.5\n7,1,0,0.1\n7,0,0,0.2\n7,1,1,0.9\n");
        let t = load_ipd(f.path(), IpdSchema::default()).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.dim(), 1);
        assert_eq!(t.study_id, 7);
        assert_eq!(t.covariates()[(3, 0)], 0.9);
    }

    #[test]
    fn non_binary_treatment_names_row() {
        let f = write_tmp("study,treat,outcome,l1\n1,0,1,0.5\n1,2,0,0.1\n1,1,1,0.3\n");
        let err = load_ipd(f.path(), IpdSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}");
        assert!(msg.contains("treat"), "{msg}");
    }

    #[test]
    fn missing_column_and_empty_arm() {
        let f = write_tmp("study,outcome,l1\n1,1,0.5\n");
        assert!(load_ipd(f.path(), IpdSchema::default()).is_err());
        let f = write_tmp("study,treat,outcome,l1\n1,1,1,0.5\n1,1,0,0.1\n");
        let err = load_ipd(f.path(), IpdSchema::default()).unwrap_err();
        assert!(err.to_string().contains("non-empty"));
        let f = write_tmp("study,treat,outcome,l1\n1,1,1,\n1,0,0,0.1\n");
        assert!(load_ipd(f.path(), IpdSchema::default()).is_err());
    }

    #[test]
    fn schema_covariate_count_enforced() {
        let f = write_tmp("study,treat,outcome,l1\n1,0,1,0.5\n1,1,0,0.1\n");
        let schema = IpdSchema { n_covariates: Some(2) };
        assert!(load_ipd(f.path(), schema).is_err());
    }

    fn agg_json(raw2: f64) -> String {
        format!(
            r#"{{"study_id": 3,
                "arms": [{{"x":1,"n":10,"mean_l":[0.5],"raw2_l":[{raw2}],"mean_y":0.4}},
                         {{"x":0,"n":10,"mean_l":[0.5],"raw2_l":[0.25],"mean_y":0.3}}],
                "allocation": [0.5, 0.5],
                "own_effect": {{"scale":"rd","est":0.1,"se":0.2}}}}"#
        )
    }

    #[test]
    fn moment_inequality_boundary_and_violation() {
        let f = write_tmp(&agg_json(0.25));
        let a = load_agg(f.path()).unwrap();
        assert_eq!(a.arms[0].x, 0);
        let f = write_tmp(&agg_json(0.2));
        let err = load_agg(f.path()).unwrap_err();
        assert!(err.to_string().contains("l1"), "{err}");
    }

    #[test]
    fn table_baseline_study_one_pooled_age() {
        // Arm rows of study 1: risankizumab 52 (72.2%), ustekinumab 20 (27.8%).
        let raw2 = |m: f64, sd: f64| sd * sd + m * m;
        let a = AggregatedTrial {
            study_id: 1,
            arms: vec![
                ArmSummary { x: 0, n: 20, mean_l: vec![49.1], raw2_l: vec![raw2(49.1, 12.8)], mean_y: 0.75 },
                ArmSummary { x: 1, n: 52, mean_l: vec![46.3], raw2_l: vec![raw2(46.3, 12.0)], mean_y: 0.942 },
            ],
            allocation: [0.278, 0.722],
            own_effect: OwnEffect { scale: EffectScale::LogRelativeRisk, est: (0.942f64 / 0.75).ln(), se: 0.1 },
        }
        .validate()
        .unwrap();
        let pooled = a.pool_arm_moments();
        assert!((pooled.mean[0] - (0.722 * 46.3 + 0.278 * 49.1)).abs() < 1e-12);
        assert!((pooled.mean[0] - 47.08).abs() < 1e-2);
    }

    #[test]
    fn pooling_examples() {
        let mut a = AggregatedTrial {
            study_id: 1,
            arms: vec![
                ArmSummary { x: 0, n: 5, mean_l: vec![0.2], raw2_l: vec![0.1], mean_y: 0.5 },
                ArmSummary { x: 1, n: 5, mean_l: vec![0.4], raw2_l: vec![0.3], mean_y: 0.5 },
            ],
            allocation: [0.5, 0.5],
            own_effect: OwnEffect { scale: EffectScale::RiskDifference, est: 0.0, se: 0.1 },
        };
        assert!((a.pool_arm_moments().mean[0] - 0.3).abs() < 1e-15);
        a.allocation = [1.0, 0.0];
        let p = a.pool_arm_moments();
        assert_eq!(p.mean, vec![0.2]);
        assert_eq!(p.raw2, vec![0.1]);
    }

    #[test]
    fn collection_orders_aggregated_first() {
        let cov = DMatrix::from_row_slice(4, 1, &[0.1, 0.2, 0.3, 0.4]);
        let t = IpdTrial::new(20, cov, vec![true, false, true, false], vec![true, true, false, false]).unwrap();
        let a = AggregatedTrial::from_ipd(&t);
        let mut a2 = a.clone();
        a2.study_id = 5;
        let c = StudyCollection::new(vec![a2], vec![t]).unwrap();
        assert_eq!(c.q(), 2);
        assert_eq!(c.z(), 1);
        assert_eq!(c.id_map(), vec![(1, 5), (2, 20)]);
        assert!(c.ipd(2).is_some());
        assert_eq!(c.total_size(), 8);
    }

    #[test]
    fn own_effect_rescaled_from_arm_means() {
        let cov = DMatrix::from_row_slice(4, 1, &[0.1, 0.2, 0.3, 0.4]);
        let t = IpdTrial::new(1, cov, vec![true, false, true, false], vec![true, true, true, false]).unwrap();
        let a = AggregatedTrial::from_ipd(&t);
        let (est, _) = a.own_effect_on(EffectScale::LogRelativeRisk).unwrap();
        assert!((est - (1.0f64 / 0.5).ln()).abs() < 1e-12);
    }
}
