//! Repeated-simulation experiments: simulate, estimate, score.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    argmax, lambda_series_report, LambdaReport, RmseAccumulator, RmseSeries, RmseTable, TableMeta,
};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_small_image, map_estimate, mle_estimate, CgOptions, ExactContext, HyperPriorSpec,
    ObservationNoise, SigmaMode,
};
use crate::grid::{Tissue, TissueMap, Volume};
use crate::phantom::{
    build_phantom, replicate_seed, simulate_from_truth, NoiseModel, PhantomSpec, SimulatedDataset,
};
use crate::phase::PhaseOperator;
use crate::priors::{PrecisionOperator, PriorChoice, SpatialPrior, Theta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mle,
    /// CG MAP with fixed hyperparameters (transferred or configured).
    MapBesag,
    MapBesagTissue,
    MapLeroux,
    /// Exact hyperparameter posterior; small grids only.
    BhmBesag,
    BhmBesagTissue,
    BhmLeroux,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Mle,
        Method::MapBesag,
        Method::MapBesagTissue,
        Method::MapLeroux,
        Method::BhmBesag,
        Method::BhmBesagTissue,
        Method::BhmLeroux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::MapBesag => "map-besag",
            Method::MapBesagTissue => "map-besag-tissue",
            Method::MapLeroux => "map-leroux",
            Method::BhmBesag => "bhm-besag",
            Method::BhmBesagTissue => "bhm-besag-tissue",
            Method::BhmLeroux => "bhm-leroux",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn prior(self) -> Option<PriorChoice> {
        match self {
            Method::Mle => None,
            Method::MapBesag | Method::BhmBesag => Some(PriorChoice::Besag),
            Method::MapBesagTissue | Method::BhmBesagTissue => Some(PriorChoice::BesagTissue),
            Method::MapLeroux | Method::BhmLeroux => Some(PriorChoice::Leroux),
        }
    }

    pub fn is_bhm(self) -> bool {
        matches!(
            self,
            Method::BhmBesag | Method::BhmBesagTissue | Method::BhmLeroux
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Default constant τ̂ for large-image MAP runs, by noise level.
pub fn default_large_tau(rsnr: f64) -> f64 {
    if rsnr >= 5.0 {
        0.1
    } else {
        0.01
    }
}

fn default_psi0() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub noise: NoiseModel,
    pub simulations: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub hyper: HyperPriorSpec,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    #[serde(default)]
    pub cg: CgOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_psi0")]
    pub psi0: f64,
    /// Constant τ̂ for MAP methods; defaults by rSNR.
    #[serde(default)]
    pub map_tau: Option<f64>,
    /// λ̂ per time point for `map-leroux`; otherwise read from `small_summary`.
    #[serde(default)]
    pub map_lambda: Option<Vec<f64>>,
    /// Summary file written by a small-image run containing `bhm-leroux`.
    #[serde(default)]
    pub small_summary: Option<PathBuf>,
    /// Classes to score; defaults to every non-background class present.
    #[serde(default)]
    pub tissues: Option<Vec<Tissue>>,
    /// Give Leroux priors a flat global mean.
    #[serde(default)]
    pub leroux_intercept: bool,
}

impl ExperimentConfig {
    pub fn new(
        phantom: PhantomSpec,
        noise: NoiseModel,
        simulations: usize,
        methods: Vec<Method>,
    ) -> Self {
        ExperimentConfig {
            phantom,
            noise,
            simulations,
            methods,
            hyper: HyperPriorSpec::default(),
            sigma_mode: SigmaMode::default(),
            cg: CgOptions::default(),
            seed: 0,
            psi0: 1.0,
            map_tau: None,
            map_lambda: None,
            small_summary: None,
            tissues: None,
            leroux_intercept: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.simulations == 0 {
            return Err(Error::Config("simulations must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        if !(self.psi0.is_finite() && self.psi0 != 0.0) {
            return Err(Error::Config(format!(
                "psi0 must be finite and nonzero, got {}",
                self.psi0
            )));
        }
        if let Some(tau) = self.map_tau {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::Config(format!(
                    "map_tau must be positive, got {tau}"
                )));
            }
        }
        self.phantom.validate()?;
        self.noise.validate()?;
        self.cg.validate()?;
        if self.methods.iter().any(|m| m.is_bhm()) {
            self.hyper.validate()?;
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Hyperparameter estimates of one Bayesian method over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSeries {
    pub method: Method,
    /// `tau_hat[s][t]`: simulation `s`, time point `t`.
    pub tau_hat: Vec<Vec<f64>>,
    pub lambda_hat: Option<Vec<Vec<f64>>>,
}

impl HyperSeries {
    pub fn tau_mean(&self) -> Vec<f64> {
        mean_over_sims(&self.tau_hat)
    }

    pub fn lambda_mean(&self) -> Option<Vec<f64>> {
        self.lambda_hat.as_deref().map(mean_over_sims)
    }
}

fn mean_over_sims(series: &[Vec<f64>]) -> Vec<f64> {
    let n = series.first().map_or(0, Vec::len);
    (0..n)
        .map(|t| series.iter().map(|s| s[t]).sum::<f64>() / series.len() as f64)
        .collect()
}

/// What a small-image run hands to a large-image run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallImageSummary {
    pub config_hash: String,
    pub rsnr: f64,
    pub times: Vec<f64>,
    pub vessel_mean: Vec<f64>,
    pub hyper: Vec<HyperSeries>,
}

impl SmallImageSummary {
    pub fn series(&self, method: Method) -> Option<&HyperSeries> {
        self.hyper.iter().find(|h| h.method == method)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub table: RmseTable,
    pub summary: SmallImageSummary,
    pub lambda_report: Option<LambdaReport>,
    pub peak_index: usize,
}

impl ExperimentResult {
    pub fn vessel_mean(&self) -> &[f64] {
        &self.summary.vessel_mean
    }
}

struct Prepared {
    psi: PhaseOperator,
    tissue: TissueMap,
    truth: Vec<Volume>,
    scored: Vec<(Tissue, Vec<usize>)>,
    exact: BTreeMap<PriorChoice, ExactContext>,
    map_priors: BTreeMap<Method, Vec<PrecisionOperator>>,
}

struct SimOutcome {
    acc: Vec<Vec<RmseAccumulator>>,
    hyper: Vec<(Vec<f64>, Option<Vec<f64>>)>,
}

fn resolve_map_hyper(
    config: &ExperimentConfig,
    time_points: usize,
) -> Result<(f64, Option<Vec<f64>>)> {
    let tau = config
        .map_tau
        .unwrap_or_else(|| default_large_tau(config.noise.rsnr));
    if !config.methods.contains(&Method::MapLeroux) {
        return Ok((tau, None));
    }
    let lambda = match (&config.map_lambda, &config.small_summary) {
        (Some(l), _) => l.clone(),
        (None, Some(path)) => {
            let summary = SmallImageSummary::read(path).map_err(|e| {
                Error::Config(format!(
                    "cannot read small-image summary {}: {e}",
                    path.display()
                ))
            })?;
            summary
                .series(Method::BhmLeroux)
                .and_then(HyperSeries::lambda_mean)
                .ok_or_else(|| {
                    Error::Config(format!("{} has no bhm-leroux λ̂ series", path.display()))
                })?
        }
        (None, None) => {
            return Err(Error::Config(
                "map-leroux needs λ̂ from a small-image summary (small_summary) or map_lambda"
                    .into(),
            ))
        }
    };
    if lambda.len() != time_points {
        return Err(Error::Config(format!(
            "λ̂ series has {} points for {time_points} time points",
            lambda.len()
        )));
    }
    Ok((tau, Some(lambda)))
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let dims = config.phantom.dims;
    let psi = PhaseOperator::for_grid(dims, config.psi0)?;
    let (tissue, truth) = build_phantom(&config.phantom)?;
    let classes: Vec<Tissue> = match &config.tissues {
        Some(t) => t.clone(),
        None => Tissue::ALL
            .into_iter()
            .filter(|&t| t != Tissue::Background && tissue.count(t) > 0)
            .collect(),
    };
    let mut scored = Vec::new();
    for class in classes {
        let idx = tissue.indices_of(class);
        if idx.is_empty() {
            return Err(Error::Config(format!(
                "tissue class {class} has no voxels on {dims}"
            )));
        }
        scored.push((class, idx));
    }

    let mut exact = BTreeMap::new();
    let mut map_priors = BTreeMap::new();
    let (tau, lambda) = resolve_map_hyper(config, truth.len())?;
    for &m in &config.methods {
        let Some(choice) = m.prior() else { continue };
        let prior = choice
            .spatial_prior(dims, Some(&tissue))?
            .with_intercept(config.leroux_intercept);
        if m.is_bhm() {
            if let Entry::Vacant(e) = exact.entry(choice) {
                e.insert(ExactContext::new(&psi, prior)?);
            }
        } else {
            let ops = (0..truth.len())
                .map(|t| {
                    let l = lambda.as_ref().map_or(0.5, |l| l[t]);
                    let l = l.clamp(1e-6, 1.0 - 1e-6);
                    SpatialPrior::precision(&prior, Theta::new(tau, l))
                })
                .collect::<Result<Vec<_>>>()?;
            map_priors.insert(m, ops);
        }
    }
    Ok(Prepared {
        psi,
        tissue,
        truth,
        scored,
        exact,
        map_priors,
    })
}

fn run_simulation(config: &ExperimentConfig, prep: &Prepared, sim: usize) -> Result<SimOutcome> {
    let seed = replicate_seed(config.seed, sim as u64);
    let data = simulate_from_truth(
        &prep.tissue,
        &prep.truth,
        &config.phantom.time,
        &config.noise,
        &prep.psi,
        seed,
    )?;
    let tp = data.len();
    let mut acc = Vec::with_capacity(config.methods.len());
    let mut hyper = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let mut per_class = vec![RmseAccumulator::new(tp); prep.scored.len()];
        let mut taus = Vec::new();
        let mut lambdas = Vec::new();
        for t in 0..tp {
            let estimate = estimate_one(config, prep, &data, method, t, &mut taus, &mut lambdas)?;
            for ((_, idx), a) in prep.scored.iter().zip(per_class.iter_mut()) {
                a.add(t, &estimate, &data.truth[t], idx)?;
            }
        }
        acc.push(per_class);
        hyper.push((taus, (!lambdas.is_empty()).then_some(lambdas)));
    }
    Ok(SimOutcome { acc, hyper })
}

fn estimate_one(
    config: &ExperimentConfig,
    prep: &Prepared,
    data: &SimulatedDataset,
    method: Method,
    t: usize,
    taus: &mut Vec<f64>,
    lambdas: &mut Vec<f64>,
) -> Result<Volume> {
    if method.is_bhm() {
        let choice = method.prior().expect("bhm methods have a prior");
        let summary = estimate_small_image(
            data,
            t,
            &prep.exact[&choice],
            &config.hyper,
            config.sigma_mode,
        )?;
        taus.push(summary.tau_hat);
        if let Some(l) = summary.lambda_hat {
            lambdas.push(l);
        }
        return Ok(summary.mean);
    }
    let c_m = &data.magnitude[t];
    let noise =
        ObservationNoise::for_mode(config.sigma_mode, c_m, Some(&data.truth[t]), &data.noise)?;
    let est = match method {
        Method::Mle => mle_estimate(c_m, &data.phase[t], &noise, &prep.psi, &config.cg)?,
        _ => map_estimate(
            c_m,
            &data.phase[t],
            &noise,
            &prep.psi,
            &prep.map_priors[&method][t],
            &config.cg,
        )?,
    };
    Ok(est.volume)
}

/// Runs every simulation and method; outputs depend only on the config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let prep = prepare(config)?;
    let outcomes: Vec<Result<SimOutcome>> = (0..config.simulations)
        .into_par_iter()
        .map(|s| run_simulation(config, &prep, s))
        .collect();
    let tp = prep.truth.len();
    let mut totals = vec![vec![RmseAccumulator::new(tp); prep.scored.len()]; config.methods.len()];
    let mut hyper: Vec<HyperSeries> = config
        .methods
        .iter()
        .filter(|m| m.is_bhm())
        .map(|&method| HyperSeries {
            method,
            tau_hat: Vec::new(),
            lambda_hat: (method == Method::BhmLeroux).then(Vec::new),
        })
        .collect();
    for outcome in outcomes {
        let outcome = outcome?;
        for (total, part) in totals.iter_mut().zip(&outcome.acc) {
            for (a, b) in total.iter_mut().zip(part) {
                a.merge(b);
            }
        }
        let bhm = config
            .methods
            .iter()
            .zip(&outcome.hyper)
            .filter(|(m, _)| m.is_bhm());
        for (series, (_, (taus, lambdas))) in hyper.iter_mut().zip(bhm) {
            series.tau_hat.push(taus.clone());
            if let (Some(dst), Some(src)) = (series.lambda_hat.as_mut(), lambdas) {
                dst.push(src.clone());
            }
        }
    }

    let mut series = Vec::new();
    for (method, per_class) in config.methods.iter().zip(&totals) {
        for ((class, _), acc) in prep.scored.iter().zip(per_class) {
            series.push(RmseSeries {
                method: method.name().to_string(),
                tissue: *class,
                values: acc.finish()?,
            });
        }
    }
    let times = config.phantom.time.times().to_vec();
    let vessel = prep.tissue.indices_of(Tissue::Vessel);
    let vessel_mean: Vec<f64> = prep
        .truth
        .iter()
        .map(|c| vessel.iter().map(|&i| c.values()[i]).sum::<f64>() / vessel.len() as f64)
        .collect();
    let peak_index = argmax(&vessel_mean).expect("nonempty time grid");
    let hash = config.hash();
    let lambda_report = match hyper.iter().find(|h| h.method == Method::BhmLeroux) {
        Some(h) => Some(lambda_series_report(
            &times,
            h.lambda_hat.as_deref().unwrap_or(&[]),
            &vessel_mean,
        )?),
        None => None,
    };
    Ok(ExperimentResult {
        table: RmseTable {
            times: times.clone(),
            series,
            meta: TableMeta {
                config_hash: hash.clone(),
                seed: config.seed,
                simulations: config.simulations,
                rsnr: config.noise.rsnr,
            },
        },
        summary: SmallImageSummary {
            config_hash: hash,
            rsnr: config.noise.rsnr,
            times,
            vessel_mean,
            hyper,
        },
        lambda_report,
        peak_index,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub files: Vec<String>,
}

pub const RMSE_FILE: &str = "rmse.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LAMBDA_FILE: &str = "lambda.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `rmse.csv`, `summary.json`, `lambda.csv` (when a Leroux BHM ran)
/// and `manifest.json` into `dir`.
pub fn write_artifacts(
    config: &ExperimentConfig,
    result: &ExperimentResult,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![RMSE_FILE.to_string(), SUMMARY_FILE.to_string()];
    fs::write(dir.join(RMSE_FILE), result.table.to_csv())?;
    let mut summary = serde_json::to_vec_pretty(&result.summary)?;
    summary.push(b'\n');
    fs::write(dir.join(SUMMARY_FILE), summary)?;
    if let Some(report) = &result.lambda_report {
        fs::write(dir.join(LAMBDA_FILE), report.to_csv())?;
        files.push(LAMBDA_FILE.to_string());
    }
    let manifest = Manifest {
        config_hash: config.hash(),
        config: config.clone(),
        files: files.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), bytes)?;
    files.push(MANIFEST_FILE.to_string());
    Ok(files.into_iter().map(|f| dir.join(f)).collect())
}
