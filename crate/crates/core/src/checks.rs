//! Oracle and property suites behind `caquant oracle-check`.
//!
//! Each check compares a production path against an independently computed
//! reference and reports the worst discrepancy it saw.

use std::f64::consts::PI;
use std::sync::Arc;

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::estimators::{
    conjugate_gradient_preconditioned, map_estimate, mle_estimate, CgOptions, ExactContext,
    NormalOperator, ObservationNoise,
};
use crate::grid::{GridDims, Volume};
use crate::phantom::{corrupt_magnitude, NoiseModel};
use crate::phase::{build_dipole_kernel, dense_psi_matrix, dft_frequency, PhaseOperator};
use crate::priors::{
    besag_precision, full_conditional, leroux_precision, BesagModel, LerouxModel, NeighborGraph,
    PriorModel, SpatialPrior, Theta,
};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error and the tolerance it was held to.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, worst: f64, tolerance: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: worst.is_finite() && worst <= tolerance,
            worst,
            tolerance,
            detail,
        }
    }

    fn failed(name: &str, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: false,
            worst: f64::INFINITY,
            tolerance: 0.0,
            detail,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: worst {:.3e} (tol {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.detail
        )
    }
}

fn guard(name: &str, f: impl FnOnce() -> Result<CheckResult>) -> CheckResult {
    f().unwrap_or_else(|e| CheckResult::failed(name, format!("error: {e}")))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect()
}

fn dense_solve(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let llt = a
        .llt(Side::Lower)
        .map_err(|e| crate::Error::Factorization(format!("{e:?}")))?;
    Ok(crate::estimators::exact::cholesky_solve(llt.L(), b))
}

/// A random instance on `dims`: observations, heteroscedastic noise.
pub struct Instance {
    pub psi: PhaseOperator,
    pub c_m: Volume,
    pub dphi: Volume,
    pub noise: ObservationNoise,
    pub graph: Arc<NeighborGraph>,
}

pub fn random_instance(dims: GridDims, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = dims.len();
    let psi = PhaseOperator::for_grid(dims, 1.0)?;
    let truth = Volume::new(dims, random_vec(rng, n, 0.0, 3.0))?;
    let c_m = Volume::new(
        dims,
        truth
            .values()
            .iter()
            .map(|c| c + 0.3 * (rng.random::<f64>() - 0.5))
            .collect(),
    )?;
    let clean = psi.apply(&truth)?;
    let dphi = Volume::new(
        dims,
        clean
            .values()
            .iter()
            .map(|p| p + 0.05 * (rng.random::<f64>() - 0.5))
            .collect(),
    )?;
    let noise = ObservationNoise::new(
        random_vec(rng, n, 0.05, 1.0),
        random_vec(rng, n, 0.01, 0.05),
    )?;
    Ok(Instance {
        psi,
        c_m,
        dphi,
        noise,
        graph: Arc::new(NeighborGraph::build(dims, None)?),
    })
}

/// Dense `Ψ` from the DFT definition, without any FFT:
/// `Ψ_ab = (1/N) Σ_k G(k) cos(2π k·(a − b))`.
pub fn naive_psi_matrix(dims: GridDims, psi0: f64) -> Result<Mat<f64>> {
    let kernel = build_dipole_kernel(dims, psi0)?;
    let n = dims.len();
    let mut m = Mat::<f64>::zeros(n, n);
    for a in 0..n {
        let (ai, aj, ak) = dims.coords(a)?;
        for b in 0..n {
            let (bi, bj, bk) = dims.coords(b)?;
            let mut s = 0.0;
            for (q, g) in kernel.values().iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                let (qi, qj, qk) = dims.coords(q)?;
                let phase = dft_frequency(qi, dims.nx) * (ai as f64 - bi as f64)
                    + dft_frequency(qj, dims.ny) * (aj as f64 - bj as f64)
                    + dft_frequency(qk, dims.nz) * (ak as f64 - bk as f64);
                s += g * (2.0 * PI * phase).cos();
            }
            m[(a, b)] = s / n as f64;
        }
    }
    Ok(m)
}

/// FFT-applied `Ψ` against the naive DFT matrix on every grid up to 4×4×4,
/// plus self-adjointness and annihilation of constants.
pub fn check_phase_operator() -> CheckResult {
    let name = "phase operator vs dense DFT (grids ≤ 4x4x4)";
    guard(name, || {
        let mut worst: f64 = 0.0;
        let mut grids = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for nx in 1..=4 {
            for ny in 1..=4 {
                for nz in 1..=4 {
                    let dims = GridDims::new(nx, ny, nz)?;
                    let op = PhaseOperator::for_grid(dims, 1.0)?;
                    let fast = dense_psi_matrix(&op)?;
                    let naive = naive_psi_matrix(dims, 1.0)?;
                    let n = dims.len();
                    for i in 0..n {
                        for j in 0..n {
                            worst = worst.max((fast[(i, j)] - naive[(i, j)]).abs());
                        }
                    }
                    let x = Volume::new(dims, random_vec(&mut rng, n, -1.0, 1.0))?;
                    let y = Volume::new(dims, random_vec(&mut rng, n, -1.0, 1.0))?;
                    let lhs = op.apply(&x)?.dot(&y)?;
                    let rhs = x.dot(&op.apply(&y)?)?;
                    worst = worst.max((lhs - rhs).abs());
                    let constant = op.apply(&Volume::constant(dims, 2.5))?;
                    worst = worst.max(constant.values().iter().fold(0.0, |m, v| m.max(v.abs())));
                    grids += 1;
                }
            }
        }
        Ok(CheckResult::new(
            name,
            worst,
            1e-10,
            format!("{grids} grids"),
        ))
    })
}

/// `map_estimate` against `dense_posterior` and `mle_estimate` against a dense
/// normal-equation solve on random 6×6×6 instances.
pub fn check_estimators_vs_dense(instances: usize, seed: u64) -> (CheckResult, CheckResult) {
    let map_name = "map_estimate vs dense posterior mean (6x6x6)";
    let mle_name = "mle_estimate vs dense normal equations (6x6x6)";
    let run = || -> Result<(CheckResult, CheckResult)> {
        let dims = GridDims::cube(6)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = CgOptions::with_tolerance(1e-12);
        let (mut map_worst, mut mle_worst): (f64, f64) = (0.0, 0.0);
        for case in 0..instances {
            let inst = random_instance(dims, &mut rng)?;
            let leroux = case % 2 == 0;
            let prior = if leroux {
                SpatialPrior::leroux(inst.graph.clone())
            } else {
                SpatialPrior::besag(inst.graph.clone())
            };
            let theta = Theta::new(
                10f64.powf(rng.random::<f64>() * 4.0 - 2.0),
                0.05 + 0.9 * rng.random::<f64>(),
            );
            let ctx = ExactContext::new(&inst.psi, prior.clone())?;
            let dense = ctx.dense_posterior(&inst.c_m, &inst.dphi, &inst.noise, theta)?;
            let q = prior.precision(theta)?;
            let map = map_estimate(&inst.c_m, &inst.dphi, &inst.noise, &inst.psi, &q, &opts)?;
            map_worst = map_worst.max(rel_err(map.volume.values(), dense.mean.values()));

            let h = ctx.data_precision(&inst.noise);
            let b = ctx.rhs(&inst.c_m, &inst.dphi, &inst.noise);
            let reference = dense_solve(&h, &b)?;
            let mle = mle_estimate(&inst.c_m, &inst.dphi, &inst.noise, &inst.psi, &opts)?;
            mle_worst = mle_worst.max(rel_err(mle.volume.values(), &reference));
        }
        Ok((
            CheckResult::new(map_name, map_worst, 1e-6, format!("{instances} instances")),
            CheckResult::new(mle_name, mle_worst, 1e-8, format!("{instances} instances")),
        ))
    };
    run().unwrap_or_else(|e| {
        (
            CheckResult::failed(map_name, format!("error: {e}")),
            CheckResult::failed(mle_name, format!("error: {e}")),
        )
    })
}

/// Besag rows sum to zero and `cᵀQc` ignores constant shifts.
pub fn check_besag_structure() -> CheckResult {
    let name = "Besag row sums and constant-shift invariance";
    guard(name, || {
        let dims = GridDims::new(6, 5, 4)?;
        let graph = Arc::new(NeighborGraph::build(dims, None)?);
        let q = besag_precision(&BesagModel { graph, tau: 2.7 })?;
        let mut worst: f64 = 0.0;
        let mut ones_out = vec![0.0; q.len()];
        q.matvec(&vec![1.0; q.len()], &mut ones_out);
        worst = worst.max(ones_out.iter().fold(0.0, |m, v| m.max(v.abs())));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = random_vec(&mut rng, q.len(), -2.0, 2.0);
            let k = rng.random::<f64>() * 10.0 - 5.0;
            let shifted: Vec<f64> = c.iter().map(|v| v + k).collect();
            let (a, b) = (q.quadratic_form(&c), q.quadratic_form(&shifted));
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
        Ok(CheckResult::new(name, worst, 1e-10, String::new()))
    })
}

/// Leroux precision admits a Cholesky factorization for λ = 0.1..0.9 on 6×6×6.
pub fn check_leroux_positive_definite() -> CheckResult {
    let name = "Leroux Q positive definite (6x6x6, λ = 0.1..0.9)";
    guard(name, || {
        let graph = Arc::new(NeighborGraph::build(GridDims::cube(6)?, None)?);
        let mut failures = Vec::new();
        for step in 1..=9 {
            let lambda = step as f64 / 10.0;
            let q = leroux_precision(&LerouxModel {
                graph: graph.clone(),
                tau: 1.0,
                lambda,
            })?
            .to_dense()?;
            if q.llt(Side::Lower).is_err() {
                failures.push(lambda);
            }
        }
        let worst = failures.len() as f64;
        Ok(CheckResult::new(
            name,
            worst,
            0.0,
            format!("failed at {failures:?}"),
        ))
    })
}

/// Full-conditional means and variances against `−Σ_j Q_ij c_j / Q_ii` and
/// `1 / Q_ii` on random voxels.
pub fn check_full_conditionals(voxels: usize, seed: u64) -> CheckResult {
    let name = "full conditionals vs precision rows";
    guard(name, || {
        let dims = GridDims::cube(6)?;
        let graph = Arc::new(NeighborGraph::build(dims, None)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Volume::new(dims, random_vec(&mut rng, dims.len(), -1.0, 3.0))?;
        let mut worst: f64 = 0.0;
        for v in 0..voxels {
            let i = rng.random_range(0..dims.len());
            let tau = 0.1 + 5.0 * rng.random::<f64>();
            let model = if v % 2 == 0 {
                PriorModel::Besag(BesagModel {
                    graph: graph.clone(),
                    tau,
                })
            } else {
                PriorModel::Leroux(LerouxModel {
                    graph: graph.clone(),
                    tau,
                    lambda: 0.05 + 0.9 * rng.random::<f64>(),
                })
            };
            let q = match &model {
                PriorModel::Besag(m) => besag_precision(m)?,
                PriorModel::Leroux(m) => leroux_precision(m)?,
            };
            let (mean, var) = full_conditional(&model, &c, i)?;
            let qii = q.entry(i, i);
            let off: f64 = (0..dims.len())
                .filter(|&j| j != i)
                .map(|j| q.entry(i, j) * c.values()[j])
                .sum();
            worst = worst
                .max((mean - (-off / qii)).abs())
                .max((var - 1.0 / qii).abs() * qii);
        }
        Ok(CheckResult::new(
            name,
            worst,
            1e-12,
            format!("{voxels} voxels"),
        ))
    })
}

/// CG against dense Cholesky on random SPD systems `MᵀM + I`.
pub fn check_cg_vs_dense(systems: usize, seed: u64) -> CheckResult {
    let name = "conjugate gradient vs dense solve (random SPD)";
    guard(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for s in 0..systems {
            let n = 10 + 20 * (s % 5);
            let m = Mat::<f64>::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let mut a = m.transpose() * &m;
            for i in 0..n {
                a[(i, i)] += 1.0;
            }
            let b = random_vec(&mut rng, n, -1.0, 1.0);
            let apply = |x: &[f64], y: &mut [f64]| {
                for (i, yi) in y.iter_mut().enumerate() {
                    *yi = (0..n).map(|j| a[(i, j)] * x[j]).sum();
                }
            };
            let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
            let sol = conjugate_gradient_preconditioned(
                apply,
                &b,
                Some(&diag),
                &CgOptions::with_tolerance(1e-13),
            )?;
            worst = worst.max(rel_err(&sol.x, &dense_solve(&a, &b)?));
        }
        Ok(CheckResult::new(
            name,
            worst,
            1e-8,
            format!("{systems} systems"),
        ))
    })
}

/// The MAP objective's analytic gradient against central differences.
pub fn check_objective_gradient(points: usize, seed: u64) -> CheckResult {
    let name = "MAP objective gradient vs finite differences";
    guard(name, || {
        let dims = GridDims::new(4, 4, 3)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(dims, &mut rng)?;
        let q = SpatialPrior::leroux(inst.graph.clone()).precision(Theta::new(1.3, 0.7))?;
        let op = NormalOperator::new(&inst.psi, &inst.noise, Some(&q))?;
        let (cm, dp) = (inst.c_m.values(), inst.dphi.values());
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let c = random_vec(&mut rng, dims.len(), -1.0, 3.0);
            let grad = op.gradient(&c, cm, dp);
            let h = 1e-5;
            let fd: Vec<f64> = (0..c.len())
                .map(|i| {
                    let mut plus = c.clone();
                    let mut minus = c.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    (op.objective(&plus, cm, dp) - op.objective(&minus, cm, dp)) / (2.0 * h)
                })
                .collect();
            worst = worst.max(rel_err(&fd, &grad));
        }
        Ok(CheckResult::new(
            name,
            worst,
            1e-5,
            format!("{points} points"),
        ))
    })
}

/// Monte Carlo `Var[c_m] = ξ_var c² + σ_m²` at fixed concentrations.
pub fn check_magnitude_variance(seed: u64) -> CheckResult {
    let name = "Monte Carlo Var[c_m] within 2%";
    guard(name, || {
        let noise = NoiseModel::with_rsnr(2.0);
        let dims = GridDims::new(50, 40, 50)?;
        let mut worst: f64 = 0.0;
        let mut detail = Vec::new();
        for (k, level) in [0.0, 1.0, 4.0].into_iter().enumerate() {
            let c = Volume::constant(dims, level);
            let sample = corrupt_magnitude(&c, &noise, seed.wrapping_add(k as u64))?;
            let n = sample.len() as f64;
            let mean = sample.sum() / n;
            let var = sample
                .values()
                .iter()
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            let expected = noise.xi_variance * level * level + noise.sigma_m().powi(2);
            let rel = (var / expected - 1.0).abs();
            worst = worst.max(rel);
            detail.push(format!("c={level}: {var:.4} vs {expected:.4}"));
        }
        Ok(CheckResult::new(name, worst, 0.02, detail.join("; ")))
    })
}

/// The suite run by `oracle-check`.
pub fn property_suite(seed: u64) -> Vec<CheckResult> {
    let (map, mle) = check_estimators_vs_dense(20, seed);
    vec![
        check_phase_operator(),
        map,
        mle,
        check_besag_structure(),
        check_leroux_positive_definite(),
        check_full_conditionals(100, seed),
        check_cg_vs_dense(20, seed),
        check_objective_gradient(5, seed),
        check_magnitude_variance(seed),
    ]
}
