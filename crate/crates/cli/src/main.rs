use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use caquant_core::checks::property_suite;
use caquant_core::estimators::{
    hyper::log_spaced, map_estimate, mle_estimate, CgOptions, ExactContext, HyperPriorSpec,
    ObservationNoise, SigmaMode,
};
use caquant_core::eval::{
    compare_methods, run_experiment, write_artifacts, ExperimentConfig, ExperimentResult, Method,
};
use caquant_core::io::{read_tissue, read_volume, write_tissue, write_volume};
use caquant_core::phantom::{simulate, NoiseModel, PhantomSpec};
use caquant_core::{GridDims, PhaseOperator, PriorChoice, Theta, Tissue, Volume};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "caquant",
    version,
    about = "CA concentration estimation from magnitude and phase data"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phantom dataset and write CAVOL1/CATIS1 files.
    Simulate(SimulateArgs),
    /// Estimate concentration volumes from a simulated dataset.
    Estimate(EstimateArgs),
    /// Run one experiment from a JSON config and write rMSE tables.
    Evaluate(EvaluateArgs),
    /// Small- and large-image experiments at both noise levels.
    Sweep(SweepArgs),
    /// Run the dense-oracle and property suites.
    OracleCheck(OracleArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Phantom spec as JSON; overrides --size.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    size: usize,
    #[arg(long, default_value_t = 5.0)]
    rsnr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimateMethod {
    Mle,
    MapBesag,
    MapBesagTissue,
    MapLeroux,
    BhmExact,
}

#[derive(clap::Args)]
struct EstimateArgs {
    /// Dataset manifest written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: EstimateMethod,
    /// Prior for bhm-exact.
    #[arg(long, default_value = "leroux")]
    prior: String,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// τ grid for bhm-exact as `lo:hi:count` (log-spaced).
    #[arg(long)]
    tau_grid: Option<String>,
    /// Number of uniform λ grid points for bhm-exact.
    #[arg(long)]
    lambda_points: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Leroux prior with a flat global mean.
    #[arg(long)]
    intercept: bool,
    /// Use the true concentration for the magnitude variances.
    #[arg(long)]
    truth_sigma: bool,
    /// Only this time index; all time points otherwise.
    #[arg(long)]
    time: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 30)]
    small_sims: usize,
    #[arg(long, default_value_t = 10)]
    large_sims: usize,
    #[arg(long, default_value_t = 64)]
    large_size: usize,
    /// λ grid points for the small-image Bayesian runs.
    #[arg(long, default_value_t = 19)]
    lambda_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    dims: GridDims,
    times: Vec<f64>,
    noise: NoiseModel,
    seed: u64,
    psi0: f64,
    tissue: String,
    truth: Vec<String>,
    magnitude: Vec<String>,
    phase: Vec<String>,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::OracleCheck(a) => cmd_oracle(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<bool> {
    let spec: PhantomSpec = match &a.config {
        Some(path) => serde_json::from_slice(&fs::read(path)?)?,
        None => PhantomSpec::new(GridDims::cube(a.size)?),
    };
    let noise = NoiseModel::with_rsnr(a.rsnr);
    let psi0 = 1.0;
    let op = PhaseOperator::for_grid(spec.dims, psi0)?;
    let data = simulate(&spec, &noise, &op, a.seed)?;
    fs::create_dir_all(&a.out)?;
    write_tissue(a.out.join("tissue.catis"), &data.tissue)?;
    let mut names = [Vec::new(), Vec::new(), Vec::new()];
    for t in 0..data.len() {
        for (k, (prefix, vol)) in [
            ("truth", &data.truth[t]),
            ("magnitude", &data.magnitude[t]),
            ("phase", &data.phase[t]),
        ]
        .into_iter()
        .enumerate()
        {
            let name = format!("{prefix}_t{t:02}.cavol");
            write_volume(a.out.join(&name), vol)?;
            names[k].push(name);
        }
    }
    let [truth, magnitude, phase] = names;
    let manifest = DatasetManifest {
        dims: spec.dims,
        times: spec.time.times().to_vec(),
        noise,
        seed: a.seed,
        psi0,
        tissue: "tissue.catis".into(),
        truth,
        magnitude,
        phase,
    };
    write_json(&a.out.join("dataset.json"), &manifest)?;
    println!(
        "wrote {} time points on {} to {}",
        data.len(),
        spec.dims,
        a.out.display()
    );
    Ok(true)
}

fn parse_tau_grid(s: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("tau grid must be lo:hi:count, got {s:?}").into());
    }
    Ok(log_spaced(
        parts[0].parse()?,
        parts[1].parse()?,
        parts[2].parse()?,
    ))
}

#[derive(Serialize)]
struct EstimateRecord {
    time_index: usize,
    time_s: f64,
    file: String,
    iterations: Option<usize>,
    relative_residual: Option<f64>,
    negative_fraction: f64,
    tau_hat: Option<f64>,
    lambda_hat: Option<f64>,
    weights: Option<Vec<caquant_core::estimators::GridPoint>>,
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<bool> {
    let base = a.input.parent().unwrap_or(Path::new("."));
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&a.input)?)?;
    let tissue = read_tissue(base.join(&manifest.tissue))?;
    let op = PhaseOperator::for_grid(manifest.dims, manifest.psi0)?;
    let opts = CgOptions::with_tolerance(a.tol);
    let mode = if a.truth_sigma {
        SigmaMode::TruthSigma
    } else {
        SigmaMode::PlugIn
    };
    let indices: Vec<usize> = match a.time {
        Some(t) if t < manifest.times.len() => vec![t],
        Some(t) => return Err(format!("time index {t} out of range").into()),
        None => (0..manifest.times.len()).collect(),
    };
    let prior_choice = match a.method {
        EstimateMethod::Mle => None,
        EstimateMethod::MapBesag => Some(PriorChoice::Besag),
        EstimateMethod::MapBesagTissue => Some(PriorChoice::BesagTissue),
        EstimateMethod::MapLeroux => Some(PriorChoice::Leroux),
        EstimateMethod::BhmExact => Some(
            PriorChoice::from_name(&a.prior)
                .ok_or_else(|| format!("unknown prior {:?}", a.prior))?,
        ),
    };
    let prior = prior_choice
        .map(|p| p.spatial_prior(manifest.dims, Some(&tissue)))
        .transpose()?
        .map(|p| p.with_intercept(a.intercept));
    let exact = match (&prior, a.method) {
        (Some(p), EstimateMethod::BhmExact) => Some(ExactContext::new(&op, p.clone())?),
        _ => None,
    };
    let mut hp = HyperPriorSpec::default();
    if let Some(g) = &a.tau_grid {
        hp.tau_grid = parse_tau_grid(g)?;
    }
    if let Some(n) = a.lambda_points {
        hp = hp.with_lambda_points(n);
    }

    fs::create_dir_all(&a.out)?;
    let mut records = Vec::new();
    for t in indices {
        let c_m = read_volume(base.join(&manifest.magnitude[t]))?;
        let dphi = read_volume(base.join(&manifest.phase[t]))?;
        let truth = match mode {
            SigmaMode::TruthSigma => Some(read_volume(base.join(&manifest.truth[t]))?),
            SigmaMode::PlugIn => None,
        };
        let noise = ObservationNoise::for_mode(mode, &c_m, truth.as_ref(), &manifest.noise)?;
        let file = format!("estimate_t{t:02}.cavol");
        let mut record = EstimateRecord {
            time_index: t,
            time_s: manifest.times[t],
            file: file.clone(),
            iterations: None,
            relative_residual: None,
            negative_fraction: 0.0,
            tau_hat: None,
            lambda_hat: None,
            weights: None,
        };
        let volume: Volume = match (&exact, &prior) {
            (Some(ctx), _) => {
                let s = ctx.hyperparameter_posterior(&c_m, &dphi, &noise, &hp)?;
                record.tau_hat = Some(s.tau_hat);
                record.lambda_hat = s.lambda_hat;
                record.negative_fraction = s.negative_fraction;
                record.weights = Some(s.points);
                s.mean
            }
            (None, Some(p)) => {
                let q = p.precision(Theta::new(a.tau, a.lambda))?;
                let e = map_estimate(&c_m, &dphi, &noise, &op, &q, &opts)?;
                record.iterations = Some(e.iterations);
                record.relative_residual = Some(e.relative_residual);
                record.negative_fraction = e.negative_fraction;
                e.volume
            }
            (None, None) => {
                let e = mle_estimate(&c_m, &dphi, &noise, &op, &opts)?;
                record.iterations = Some(e.iterations);
                record.relative_residual = Some(e.relative_residual);
                record.negative_fraction = e.negative_fraction;
                e.volume
            }
        };
        write_volume(a.out.join(&file), &volume)?;
        records.push(record);
    }
    write_json(&a.out.join("summary.json"), &records)?;
    println!("wrote {} estimates to {}", records.len(), a.out.display());
    Ok(true)
}

fn report(result: &ExperimentResult) -> CliResult<()> {
    let peak = result.peak_index;
    println!(
        "peak time point: {} s (index {peak})",
        result.table.times[peak]
    );
    for cmp in compare_methods(&result.table, Tissue::Vessel, peak)? {
        if cmp.baseline == "mle" {
            println!(
                "vessel {} vs mle: peak -{:.1}%, tail -{:.1}%, mean diff {:.4}",
                cmp.candidate, cmp.peak_decrease_pct, cmp.tail_decrease_pct, cmp.mean_difference
            );
        }
    }
    if let Some(r) = &result.lambda_report {
        println!("Spearman(λ̂, vessel mean) = {:.3}", r.spearman);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<bool> {
    let mut config: ExperimentConfig = serde_json::from_slice(&fs::read(&a.config)?)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(path) = &config.small_summary {
        if path.is_relative() {
            let base = a.config.parent().unwrap_or(Path::new("."));
            config.small_summary = Some(base.join(path));
        }
    }
    let result = run_experiment(&config)?;
    let files = write_artifacts(&config, &result, &a.out)?;
    report(&result)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(true)
}

fn cmd_sweep(a: SweepArgs) -> CliResult<bool> {
    let small_dims = GridDims::cube(10)?;
    let large_dims = GridDims::cube(a.large_size)?;
    let hp = HyperPriorSpec::default().with_lambda_points(a.lambda_points);
    for rsnr in [5.0, 1.0] {
        let tag = format!("rsnr{rsnr}");
        let mut small = ExperimentConfig::new(
            PhantomSpec::new(small_dims),
            NoiseModel::with_rsnr(rsnr),
            a.small_sims,
            vec![
                Method::Mle,
                Method::BhmLeroux,
                Method::BhmBesag,
                Method::BhmBesagTissue,
            ],
        );
        small.hyper = hp.clone();
        small.seed = a.seed;
        let dir = a.out.join(format!("small_{tag}"));
        println!("== small image, rSNR={rsnr}");
        let result = run_experiment(&small)?;
        write_artifacts(&small, &result, &dir)?;
        report(&result)?;

        let mut large = ExperimentConfig::new(
            PhantomSpec::new(large_dims),
            NoiseModel::with_rsnr(rsnr),
            a.large_sims,
            vec![Method::Mle, Method::MapLeroux],
        );
        large.seed = a.seed;
        large.small_summary = Some(dir.join(caquant_core::eval::experiment::SUMMARY_FILE));
        println!("== large image, rSNR={rsnr}");
        let result = run_experiment(&large)?;
        write_artifacts(&large, &result, &a.out.join(format!("large_{tag}")))?;
        report(&result)?;
    }
    Ok(true)
}

fn cmd_oracle(a: OracleArgs) -> CliResult<bool> {
    let results = property_suite(a.seed);
    let mut ok = true;
    for r in &results {
        println!("{r}");
        ok &= r.passed;
    }
    println!(
        "{}",
        if ok {
            "all checks passed"
        } else {
            "some checks FAILED"
        }
    );
    Ok(ok)
}
