use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use casemix::covariance::{correlation_extrapolation_for, reconstruct_target, Averaging, ReconstructedMoments};
use casemix::data::{load_agg, load_ipd, load_ipd_studies, IpdSchema};
use casemix::meta::{fit_submodel_mcmc, fit_submodel_reml, EffectTable, McmcSettings, PosteriorSummary, RemlFit};
use casemix::pseudo::{generate_pseudo_trial, resolve_moments, PseudoReport};
use casemix::sandwich::{
    assemble_effect_table, collection_moments, source_sandwich, EstimatingStack, SandwichResult,
};
use casemix::seed::child_seed;
use casemix::sim::{run_meta_sim, run_transport_sim, MetaSimConfig, MetaSimReport, SimReport, TransportSimConfig};
use casemix::weights::{fit_pair, standardize_effect, truncate_weights, FitSummary, PropensityRatioFit, SolverOptions, WeightModel};
use casemix::{BasisSpec, EffectScale, Error, ErrorKind, Result, Study, StudyCollection};
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Invocation};
use crate::config::{CovarianceMethod, PipelineConfig, VarianceMethod};

pub struct Context {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub invocation: Invocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyLabel {
    pub index: usize,
    pub study_id: i64,
    pub aggregated: bool,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub j: usize,
    pub k: usize,
    pub estimate: f64,
    pub mu1: f64,
    pub mu0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub j: usize,
    pub k: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectsPayload {
    pub scale: EffectScale,
    pub truncation: f64,
    pub basis: String,
    pub predictor: String,
    pub studies: Vec<StudyLabel>,
    pub estimates: Vec<EstimateRow>,
    pub fits: Vec<FitSummary>,
    pub skipped: Vec<SkippedPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconPayload {
    pub method: CovarianceMethod,
    pub averaging: Averaging,
    pub targets: Vec<ReconstructedMoments>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoPayload {
    pub reports: Vec<PseudoReport>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaPayload {
    pub method: VarianceMethod,
    pub studies: Vec<StudyLabel>,
    pub table: EffectTable,
    pub sources: Vec<SandwichResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorPayload {
    pub studies: Vec<StudyLabel>,
    pub summary: PosteriorSummary,
    pub reml: Option<RemlFit>,
}

pub fn load_studies(cfg: &PipelineConfig) -> Result<StudyCollection> {
    cfg.validate()?;
    let mut ipd = Vec::new();
    for p in &cfg.ipd {
        ipd.extend(load_ipd_studies(p, IpdSchema::default())?);
    }
    let agg = cfg.aggregated.iter().map(load_agg).collect::<Result<Vec<_>>>()?;
    StudyCollection::new(agg, ipd)
}

pub fn weight_model(cfg: &PipelineConfig, d: usize) -> Result<WeightModel> {
    let moments: BasisSpec = match &cfg.basis {
        Some(s) => s.parse()?,
        None => BasisSpec::main_effects(d),
    };
    moments.check_dim(d)?;
    let predictor = match &cfg.predictor {
        Some(s) => s.parse()?,
        None => moments.clone(),
    };
    WeightModel::new(moments, predictor)
}

fn labels(studies: &StudyCollection) -> Vec<StudyLabel> {
    studies
        .studies()
        .iter()
        .enumerate()
        .map(|(i, s)| StudyLabel {
            index: i + 1,
            study_id: s.original_id(),
            aggregated: matches!(s, Study::Aggregated(_)),
            n: s.size(),
        })
        .collect()
}

fn truncate(fit: PropensityRatioFit, p: f64) -> Result<PropensityRatioFit> {
    if p < 1.0 {
        truncate_weights(&fit, p)
    } else {
        Ok(fit)
    }
}

pub fn standardize(ctx: &Context) -> Result<EffectsPayload> {
    let cfg = &ctx.cfg;
    let studies = load_studies(cfg)?;
    let model = weight_model(cfg, studies.dim())?;
    let opts = SolverOptions::default();
    let pairs: Vec<(usize, usize)> = studies
        .ipd_indices()
        .flat_map(|k| (1..=studies.q()).map(move |j| (j, k)))
        .collect();
    let results: Vec<Result<(FitSummary, EstimateRow)>> = pairs
        .par_iter()
        .map(|&(j, k)| {
            let fit = truncate(fit_pair(&studies, j, k, &model, &opts)?, cfg.truncation)?;
            let eff = standardize_effect(studies.ipd(k).expect("ipd source"), &fit, cfg.scale)?;
            Ok((
                fit.summary(),
                EstimateRow { j, k, estimate: eff.estimate, mu1: eff.mu1, mu0: eff.mu0 },
            ))
        })
        .collect();
    let mut fits = Vec::new();
    let mut estimates = Vec::new();
    let mut skipped = Vec::new();
    for (&(j, k), r) in pairs.iter().zip(results) {
        match r {
            Ok((f, e)) => {
                fits.push(f);
                estimates.push(e);
            }
            Err(e) if cfg.skip_infeasible && e.kind() == ErrorKind::Infeasible => {
                warn!("skipping pair ({j},{k}): {e}");
                skipped.push(SkippedPair { j, k, reason: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    let payload = EffectsPayload {
        scale: cfg.scale,
        truncation: cfg.truncation,
        basis: model.moments.to_string(),
        predictor: model.predictor.to_string(),
        studies: labels(&studies),
        estimates,
        fits,
        skipped,
    };
    artifact::write(&ctx.out, artifact::EFFECTS, &ctx.invocation, &payload)?;
    info!("standardized {} pairs ({} skipped)", payload.estimates.len(), payload.skipped.len());
    Ok(payload)
}

pub fn recon_cov(ctx: &Context) -> Result<ReconPayload> {
    let cfg = &ctx.cfg;
    let studies = load_studies(cfg)?;
    let model = weight_model(cfg, studies.dim())?;
    let opts = SolverOptions::default();
    let targets = (1..=studies.z())
        .map(|j| match cfg.covariance {
            CovarianceMethod::Weighting => reconstruct_target(&studies, j, &model, &opts, cfg.averaging),
            CovarianceMethod::Correlation => correlation_extrapolation_for(&studies, j),
        })
        .collect::<Result<Vec<_>>>()?;
    let payload = ReconPayload { method: cfg.covariance, averaging: cfg.averaging, targets };
    artifact::write(&ctx.out, artifact::RECON, &ctx.invocation, &payload)?;
    Ok(payload)
}

fn pseudo_file(study_id: i64) -> String {
    format!("pseudo_{study_id}.csv")
}

pub fn pseudo_ipd(ctx: &Context) -> Result<PseudoPayload> {
    let studies = load_studies(&ctx.cfg)?;
    let recon: ReconPayload = artifact::read(&ctx.out, artifact::RECON, "recon-cov")?.payload;
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for j in 1..=studies.z() {
        let agg = studies.study(j).as_aggregated().expect("aggregated");
        let rm = recon
            .targets
            .iter()
            .find(|r| r.target == j)
            .ok_or_else(|| Error::InsufficientAggregatedData(format!("cov(L|S={j}) required")))?;
        let resolved = resolve_moments(agg, rm)?;
        for w in &resolved.warnings {
            warn!("study {}: {w}", agg.study_id);
        }
        let pseudo = generate_pseudo_trial(agg, &resolved, child_seed(ctx.seed, j as u64))?;
        let name = pseudo_file(agg.study_id);
        pseudo.write_csv(BufWriter::new(File::create(ctx.out.join(&name))?))?;
        reports.push(pseudo.report());
        files.push(name);
    }
    let payload = PseudoPayload { reports, files };
    artifact::write(&ctx.out, artifact::PSEUDO, &ctx.invocation, &payload)?;
    Ok(payload)
}

/// Rebuilds the fits recorded by `standardize`.
fn stored_fits(
    studies: &StudyCollection,
    model: &WeightModel,
    effects: &EffectsPayload,
    k: usize,
) -> Result<Vec<PropensityRatioFit>> {
    let ipd = studies.ipd(k).expect("ipd source");
    (1..=studies.q())
        .map(|j| {
            let f = effects.fits.iter().find(|f| f.j == j && f.k == k).ok_or_else(|| {
                match effects.skipped.iter().find(|s| s.j == j && s.k == k) {
                    Some(s) => Error::Infeasible { target: j, source_study: k, reason: s.reason.clone() },
                    None => Error::Validation(format!("{} has no fit for pair ({j},{k})", artifact::EFFECTS)),
                }
            })?;
            let fit = PropensityRatioFit::from_beta(k, j, ipd, model.clone(), DVector::from_vec(f.beta.clone()))?;
            truncate(fit, effects.truncation)
        })
        .collect()
}

pub fn variance(ctx: &Context) -> Result<SigmaPayload> {
    let cfg = &ctx.cfg;
    let studies = load_studies(cfg)?;
    let effects: EffectsPayload = artifact::read(&ctx.out, artifact::EFFECTS, "standardize")?.payload;
    if effects.studies != labels(&studies) {
        return Err(Error::Validation(format!(
            "{} was produced from different studies; rerun `casemix standardize`",
            artifact::EFFECTS
        )));
    }
    let model = WeightModel::new(effects.basis.parse()?, effects.predictor.parse()?)?;
    let pseudo: PseudoPayload = if studies.z() > 0 {
        artifact::read(&ctx.out, artifact::PSEUDO, "pseudo-ipd")?.payload
    } else {
        PseudoPayload { reports: Vec::new(), files: Vec::new() }
    };
    let resolved: BTreeMap<usize, _> = pseudo.reports.iter().map(|r| (r.moments.target, r.moments.clone())).collect();
    let scale = effects.scale;
    let sizes: Vec<usize> = studies.studies().iter().map(Study::size).collect();

    let rows: Vec<DMatrix<f64>> = match cfg.variance {
        VarianceMethod::Moments => Vec::new(),
        VarianceMethod::PseudoRows => (1..=studies.q())
            .map(|j| match studies.study(j) {
                Study::Ipd(t) => Ok(t.covariates().clone()),
                Study::Aggregated(a) => {
                    let name = pseudo_file(a.study_id);
                    let path = ctx.out.join(&name);
                    if !path.is_file() {
                        return Err(Error::Validation(format!(
                            "missing artifact {}: run `casemix pseudo-ipd` first",
                            path.display()
                        )));
                    }
                    Ok(load_ipd(&path, IpdSchema { n_covariates: Some(studies.dim()) })?.covariates().clone())
                }
            })
            .collect::<Result<_>>()?,
    };
    let targets = match cfg.variance {
        VarianceMethod::Moments => collection_moments(&studies, &model.moments, &resolved)?,
        VarianceMethod::PseudoRows => Vec::new(),
    };
    let sources = studies
        .ipd_indices()
        .map(|k| {
            let fits = stored_fits(&studies, &model, &effects, k)?;
            let r = match cfg.variance {
                VarianceMethod::Moments => source_sandwich(&studies, k, &fits, &targets, scale)?,
                VarianceMethod::PseudoRows => {
                    let refs: Vec<&DMatrix<f64>> = rows.iter().collect();
                    EstimatingStack::new(k, studies.ipd(k).expect("ipd source"), &fits, &sizes, scale)?
                        .sandwich_from_rows(&refs)?
                }
            };
            for (j, t) in r.theta.iter().enumerate() {
                let stored = effects.estimates.iter().find(|e| e.j == j + 1 && e.k == k).map(|e| e.estimate);
                if stored.is_some_and(|s| (s - t).abs() > 1e-9 * (1.0 + s.abs())) {
                    warn!("pair ({},{k}): effect {t} differs from the standardized estimate", j + 1);
                }
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = assemble_effect_table(&studies, &sources, scale)?;
    let payload = SigmaPayload { method: cfg.variance, studies: labels(&studies), table, sources };
    artifact::write(&ctx.out, artifact::SIGMA, &ctx.invocation, &payload)?;
    Ok(payload)
}

pub fn meta(ctx: &Context) -> Result<PosteriorPayload> {
    let sigma: SigmaPayload = artifact::read(&ctx.out, artifact::SIGMA, "variance")?.payload;
    sigma.table.validate()?;
    let post = fit_submodel_mcmc(&sigma.table, ctx.cfg.model, ctx.cfg.mcmc, ctx.seed)?;
    for w in &post.warnings {
        warn!("{w}");
    }
    let reml = match fit_submodel_reml(&sigma.table, ctx.cfg.model) {
        Ok(r) => Some(r),
        Err(e) => {
            warn!("REML cross-check failed: {e}");
            None
        }
    };
    post.write_draws_csv(BufWriter::new(File::create(ctx.out.join(artifact::DRAWS))?))?;
    let payload = PosteriorPayload { studies: sigma.studies, summary: post.summary(), reml };
    artifact::write(&ctx.out, artifact::POSTERIOR, &ctx.invocation, &payload)?;
    Ok(payload)
}

/// Standardized effects with 95% intervals, population summaries and the
/// overall location, one row each.
pub fn write_forest(out: &Path, sigma: &SigmaPayload, post: &PosteriorPayload) -> Result<()> {
    let id = |j: usize| sigma.studies[j - 1].study_id.to_string();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join(artifact::FOREST))?));
    w.write_record(["row", "j", "k", "study_j", "study_k", "estimate", "lower", "upper"])?;
    for (i, e) in sigma.table.entries.iter().enumerate() {
        let se = sigma.table.sigma[(i, i)].sqrt();
        w.write_record([
            "standardized".to_string(),
            e.j.to_string(),
            e.k.to_string(),
            id(e.j),
            id(e.k),
            e.est.to_string(),
            (e.est - 1.959963984540054 * se).to_string(),
            (e.est + 1.959963984540054 * se).to_string(),
        ])?;
    }
    for p in &post.summary.population {
        let s = &p.summary;
        w.write_record([
            "population".to_string(),
            p.index.to_string(),
            String::new(),
            id(p.index),
            String::new(),
            s.median.to_string(),
            s.lower.to_string(),
            s.upper.to_string(),
        ])?;
    }
    let t = &post.summary.theta;
    w.write_record(["overall", "", "", "", "", &t.median.to_string(), &t.lower.to_string(), &t.upper.to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn pipeline(ctx: &Context) -> Result<()> {
    standardize(ctx)?;
    recon_cov(ctx)?;
    pseudo_ipd(ctx)?;
    let sigma = variance(ctx)?;
    let post = meta(ctx)?;
    write_forest(&ctx.out, &sigma, &post)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimSetting {
    Transport(u8),
    Meta,
}

impl std::str::FromStr for SimSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(SimSetting::Transport(1)),
            "2" => Ok(SimSetting::Transport(2)),
            "meta" => Ok(SimSetting::Meta),
            other => Err(format!("unknown setting `{other}` (expected 1, 2 or meta)")),
        }
    }
}

pub struct SimulateArgs {
    pub setting: SimSetting,
    pub n: usize,
    pub reps: usize,
    pub q: usize,
    pub z: usize,
    pub oracle_draws: usize,
    pub mcmc: McmcSettings,
}

pub enum SimOutput {
    Transport(SimReport),
    Meta(MetaSimReport),
}

pub fn simulate(ctx: &Context, args: &SimulateArgs) -> Result<SimOutput> {
    match args.setting {
        SimSetting::Transport(setting) => {
            let mut cfg = TransportSimConfig::new(setting, args.n, args.reps, ctx.seed);
            cfg.oracle_draws = args.oracle_draws;
            let report = run_transport_sim(&cfg)?;
            report.write_csv(BufWriter::new(File::create(ctx.out.join("sim_report.csv"))?))?;
            artifact::write(&ctx.out, "sim_report.json", &ctx.invocation, &report)?;
            Ok(SimOutput::Transport(report))
        }
        SimSetting::Meta => {
            let mut cfg = MetaSimConfig::new(args.q, args.z, args.reps, ctx.seed);
            cfg.mcmc = args.mcmc;
            cfg.model = ctx.cfg.model;
            let report = run_meta_sim(&cfg)?;
            report.write_csv(BufWriter::new(File::create(ctx.out.join("meta_sim.csv"))?))?;
            artifact::write(&ctx.out, "meta_sim.json", &ctx.invocation, &report)?;
            Ok(SimOutput::Meta(report))
        }
    }
}
