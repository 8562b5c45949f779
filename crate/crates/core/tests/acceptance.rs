//! Acceptance criteria 1 to 7. Each test prints one pass/fail line.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use caquant_core::checks::{
    check_besag_structure, check_cg_vs_dense, check_estimators_vs_dense, check_full_conditionals,
    check_leroux_positive_definite, check_magnitude_variance, check_objective_gradient,
    check_phase_operator, CheckResult,
};
use caquant_core::estimators::{ExactContext, HyperPriorSpec, ObservationNoise};
use caquant_core::eval::{run_experiment, tail_mean, ExperimentConfig, ExperimentResult, Method};
use caquant_core::phantom::{corrupt_magnitude, corrupt_phase, NoiseModel, PhantomSpec};
use caquant_core::priors::{sample_leroux, LerouxModel};
use caquant_core::{GridDims, NeighborGraph, PhaseOperator, SpatialPrior, Tissue};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

const SEED: u64 = 2024;
const LAMBDA_POINTS: usize = 10;

/// Criteria carry wall-clock budgets, so they run one at a time.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes to the stderr handle directly so the line survives test capture.
fn report(criterion: u32, passed: bool, elapsed: Duration, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr().lock(),
        "criterion {criterion}: {tag} ({:.1}s) {detail}",
        elapsed.as_secs_f64()
    );
}

fn report_checks(
    criterion: u32,
    checks: &[CheckResult],
    elapsed: Duration,
    budget: Duration,
) -> bool {
    for c in checks {
        let _ = writeln!(std::io::stderr().lock(), "  {c}");
    }
    let in_time = elapsed < budget;
    let passed = checks.iter().all(|c| c.passed) && in_time;
    let failing: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    let detail = if failing.is_empty() {
        format!("{} checks, budget {}s", checks.len(), budget.as_secs())
    } else {
        format!("failing: {}", failing.join(", "))
    };
    report(criterion, passed, elapsed, &detail);
    passed
}

fn small_config(rsnr: f64, simulations: usize, methods: Vec<Method>) -> ExperimentConfig {
    let mut config = ExperimentConfig::new(
        PhantomSpec::new(GridDims::cube(10).unwrap()),
        NoiseModel::with_rsnr(rsnr),
        simulations,
        methods,
    );
    config.hyper = HyperPriorSpec::default().with_lambda_points(LAMBDA_POINTS);
    config.seed = SEED;
    config
}

/// Default small-image experiment at rSNR 5, shared by criteria 3 to 5.
fn small_rsnr5() -> &'static (ExperimentResult, Duration) {
    static CELL: OnceLock<(ExperimentResult, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let config = small_config(
            5.0,
            30,
            vec![Method::Mle, Method::BhmBesag, Method::BhmLeroux],
        );
        (run_experiment(&config).unwrap(), start.elapsed())
    })
}

#[test]
fn criterion_1_estimators_match_dense_oracle() {
    let _serial = serial();
    let start = Instant::now();
    let (map, mle) = check_estimators_vs_dense(20, SEED);
    let ok = report_checks(1, &[map, mle], start.elapsed(), Duration::from_secs(30));
    assert!(ok);
}

#[test]
fn criterion_2_phase_operator_matches_dense_matrix() {
    let _serial = serial();
    let start = Instant::now();
    let check = check_phase_operator();
    let ok = report_checks(2, &[check], start.elapsed(), Duration::from_secs(5));
    assert!(ok);
}

#[test]
fn criterion_3_small_image_rmse_reduction() {
    let _serial = serial();
    let (result, elapsed) = small_rsnr5();
    let t = &result.table;
    let p = result.peak_index;
    let mle = t.get("mle", Tissue::Vessel).unwrap();
    let leroux = t.get("bhm-leroux", Tissue::Vessel).unwrap();
    let besag = t.get("bhm-besag", Tissue::Vessel).unwrap();
    let leroux_peak = leroux[p] / mle[p];
    let besag_peak = besag[p] / mle[p];
    let leroux_tail = tail_mean(leroux) / tail_mean(mle);
    let passed = leroux_peak <= 0.80
        && besag_peak <= 0.90
        && leroux_tail <= 0.90
        && *elapsed < Duration::from_secs(30 * 60);
    report(
        3,
        passed,
        *elapsed,
        &format!(
            "peak t={}s: leroux/mle {leroux_peak:.3} (<= 0.80), besag/mle {besag_peak:.3} (<= 0.90); \
             tail leroux/mle {leroux_tail:.3} (<= 0.90)",
            t.times[p]
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_4_lambda_tracks_concentration_negatively() {
    let _serial = serial();
    let (result, elapsed) = small_rsnr5();
    let lambda = result.lambda_report.as_ref().expect("bhm-leroux ran");
    let passed = lambda.spearman < -0.3;
    let series: Vec<String> = lambda
        .lambda_mean
        .iter()
        .map(|l| format!("{l:.2}"))
        .collect();
    report(
        4,
        passed,
        *elapsed,
        &format!(
            "spearman {:.3} (< -0.3); lambda mean [{}]",
            lambda.spearman,
            series.join(" ")
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_5_large_image_map_leroux() {
    let _serial = serial();
    let start = Instant::now();
    let lambda5 = small_rsnr5()
        .0
        .summary
        .series(Method::BhmLeroux)
        .and_then(|s| s.lambda_mean())
        .unwrap();
    // λ̂ at rSNR 1 comes from its own small-image run.
    let small1 = run_experiment(&small_config(1.0, 10, vec![Method::BhmLeroux])).unwrap();
    let lambda1 = small1
        .summary
        .series(Method::BhmLeroux)
        .and_then(|s| s.lambda_mean())
        .unwrap();

    let tissues = [Tissue::Vessel, Tissue::TumorRim, Tissue::WhiteMatter];
    let large = |rsnr: f64, lambda: Vec<f64>| {
        let mut config = ExperimentConfig::new(
            PhantomSpec::new(GridDims::cube(64).unwrap()),
            NoiseModel::with_rsnr(rsnr),
            10,
            vec![Method::Mle, Method::MapLeroux],
        );
        config.seed = SEED;
        config.map_lambda = Some(lambda);
        config.tissues = Some(tissues.to_vec());
        run_experiment(&config).unwrap()
    };
    let hi = large(5.0, lambda5);
    let lo = large(1.0, lambda1);

    let mut passed = true;
    let mut detail = Vec::new();
    for (label, r) in [("rsnr5", &hi), ("rsnr1", &lo)] {
        let p = r.peak_index;
        for class in tissues {
            let mle = r.table.get("mle", class).unwrap()[p];
            let map = r.table.get("map-leroux", class).unwrap()[p];
            passed &= map <= mle;
            detail.push(format!("{label} {class} map/mle {:.3}", map / mle));
        }
    }
    for method in ["mle", "map-leroux"] {
        for class in tissues {
            let a = lo.table.get(method, class).unwrap();
            let b = hi.table.get(method, class).unwrap();
            let ordered = a.iter().zip(b).all(|(a, b)| a > b);
            passed &= ordered;
            if !ordered {
                detail.push(format!(
                    "{method} {class}: rsnr1 not above rsnr5 everywhere"
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(2 * 3600);
    report(5, passed, elapsed, &detail.join("; "));
    assert!(passed);
}

#[test]
fn criterion_6_hyperparameter_self_recovery() {
    let _serial = serial();
    let start = Instant::now();
    let dims = GridDims::cube(10).unwrap();
    let graph = Arc::new(NeighborGraph::build(dims, None).unwrap());
    let model = LerouxModel {
        graph: graph.clone(),
        tau: 1.0,
        lambda: 0.9,
    };
    let psi = PhaseOperator::for_grid(dims, 1.0).unwrap();
    let ctx = ExactContext::new(&psi, SpatialPrior::leroux(graph)).unwrap();
    let noise = NoiseModel::with_rsnr(5.0);
    let hp = HyperPriorSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let replicates = 20;
    let (mut lambda_sum, mut log_tau_sum) = (0.0, 0.0);
    for r in 0..replicates {
        let c = sample_leroux(&model, &mut rng).unwrap();
        let seed = SEED + r as u64;
        let c_m = corrupt_magnitude(&c, &noise, seed).unwrap();
        let dphi = corrupt_phase(&c, &psi, &noise, seed).unwrap();
        let obs = ObservationNoise::from_truth(&c, &noise).unwrap();
        let s = ctx
            .hyperparameter_posterior(&c_m, &dphi, &obs, &hp)
            .unwrap();
        lambda_sum += s.lambda_hat.unwrap();
        log_tau_sum += s.tau_hat.ln();
    }
    let lambda = lambda_sum / replicates as f64;
    let tau = (log_tau_sum / replicates as f64).exp();
    let passed = (lambda - 0.9).abs() <= 0.15 && (0.5..=2.0).contains(&tau);
    report(
        6,
        passed,
        start.elapsed(),
        &format!("mean lambda {lambda:.3} (0.9 ± 0.15), geometric mean tau {tau:.3} (1 within x2)"),
    );
    assert!(passed);
}

#[test]
fn criterion_7_property_suites() {
    let _serial = serial();
    let start = Instant::now();
    let checks = vec![
        check_besag_structure(),
        check_leroux_positive_definite(),
        check_full_conditionals(100, SEED),
        check_cg_vs_dense(20, SEED),
        check_objective_gradient(5, SEED),
        check_magnitude_variance(SEED),
    ];
    let ok = report_checks(7, &checks, start.elapsed(), Duration::from_secs(120));
    assert!(ok);
}
