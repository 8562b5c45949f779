//! Posterior over the prior hyperparameters by grid integration.
//!
//! Every grid point needs `log det Q_post(θ)` and `Q_post(θ)⁻¹ b` with
//! `Q_post = τ M₀(λ) + H`. Writing `H = L Lᵀ` and tridiagonalizing
//! `L⁻¹ M₀(λ) L⁻ᵀ = U T Uᵀ` once per `λ` reduces every `τ` on that row to a
//! tridiagonal `I + τ T` factorization, which is linear in the voxel count.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::householder;
use faer::{Conj, Mat, Par, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exact::{check_theta, ExactContext};
use super::{ObservationNoise, SigmaMode};
use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::phantom::SimulatedDataset;
use crate::phase::PhaseOperator;
use crate::priors::{PriorKind, SpatialPrior, Theta};

/// Hyperpriors and the integration grid.
///
/// `ln τ ~ LogGamma(shape, rate)` and `logit λ ~ Logitbeta(a, b)`. The
/// integration runs on those internal scales with midpoint cell widths, so a
/// log-spaced τ grid and a uniform λ grid both integrate correctly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPriorSpec {
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub tau_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
}

impl Default for HyperPriorSpec {
    fn default() -> Self {
        HyperPriorSpec {
            tau_shape: 1.0,
            tau_rate: 5e-5,
            lambda_a: 1.0,
            lambda_b: 1.0,
            tau_grid: log_spaced(1e-3, 1e3, 25),
            lambda_grid: uniform_lambda_grid(19),
        }
    }
}

/// `n` points log-spaced over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `n` cell midpoints of `(0, 1)`: 19 gives `{0.05, 0.10, ..., 0.95}`.
pub fn uniform_lambda_grid(n: usize) -> Vec<f64> {
    if n == 19 {
        return (1..=19).map(|i| i as f64 * 0.05).collect();
    }
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

fn check_grid(name: &str, grid: &[f64], valid: impl Fn(f64) -> bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{name} grid is empty")));
    }
    if let Some(bad) = grid.iter().find(|&&v| !(v.is_finite() && valid(v))) {
        return Err(Error::Config(format!(
            "{name} grid point {bad} is out of range"
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "{name} grid must be strictly increasing"
        )));
    }
    Ok(())
}

/// Log midpoint widths on an internal scale; a single point gets width 1.
fn log_cell_widths(internal: &[f64]) -> Vec<f64> {
    let n = internal.len();
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| {
            let lo = if i == 0 {
                internal[0]
            } else {
                0.5 * (internal[i - 1] + internal[i])
            };
            let hi = if i + 1 == n {
                internal[n - 1]
            } else {
                0.5 * (internal[i] + internal[i + 1])
            };
            (hi - lo).ln()
        })
        .collect()
}

impl HyperPriorSpec {
    pub fn single(theta: Theta) -> Self {
        HyperPriorSpec {
            tau_grid: vec![theta.tau],
            lambda_grid: vec![theta.lambda],
            ..HyperPriorSpec::default()
        }
    }

    pub fn with_lambda_points(mut self, n: usize) -> Self {
        self.lambda_grid = uniform_lambda_grid(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_shape", self.tau_shape),
            ("tau_rate", self.tau_rate),
            ("lambda_a", self.lambda_a),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        check_grid("tau", &self.tau_grid, |t| t > 0.0)?;
        check_grid("lambda", &self.lambda_grid, |l| l > 0.0 && l < 1.0)
    }

    /// Unnormalized log density of `ln τ`.
    pub fn log_prior_tau(&self, tau: f64) -> f64 {
        self.tau_shape * tau.ln() - self.tau_rate * tau
    }

    /// Unnormalized log density of `logit λ`.
    pub fn log_prior_lambda(&self, lambda: f64) -> f64 {
        self.lambda_a * lambda.ln() + self.lambda_b * (1.0 - lambda).ln()
    }

    fn tau_log_widths(&self) -> Vec<f64> {
        log_cell_widths(&self.tau_grid.iter().map(|t| t.ln()).collect::<Vec<_>>())
    }

    fn lambda_log_widths(&self) -> Vec<f64> {
        log_cell_widths(
            &self
                .lambda_grid
                .iter()
                .map(|l| (l / (1.0 - l)).ln())
                .collect::<Vec<_>>(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub tau: f64,
    /// `None` for the Besag prior.
    pub lambda: Option<f64>,
    pub log_marginal: f64,
    pub log_weight: f64,
    pub weight: f64,
}

/// Hyperparameter posterior and the mixture posterior mean.
#[derive(Clone, Debug, Serialize)]
pub struct PosteriorSummary {
    #[serde(skip)]
    pub mean: Volume,
    /// Per-voxel posterior s.d., filled only on the dense oracle path.
    #[serde(skip)]
    pub sd: Option<Vec<f64>>,
    pub kind: PriorKind,
    pub points: Vec<GridPoint>,
    pub tau_hat: f64,
    pub lambda_hat: Option<f64>,
    pub negative_fraction: f64,
}

impl PosteriorSummary {
    pub fn weight_sum(&self) -> f64 {
        self.points.iter().map(|p| p.weight).sum()
    }

    pub fn map_point(&self) -> &GridPoint {
        self.points
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight))
            .expect("nonempty grid")
    }
}

/// Per-dataset quantities reused across the whole grid.
struct DataFactor {
    linv: Mat<f64>,
    log_det_h: f64,
    beta: Vec<f64>,
    /// `L⁻¹ L⁻ᵀ`, centered when the Leroux intercept is on; absent for Besag.
    a: Option<Mat<f64>>,
    /// `L⁻¹ R L⁻ᵀ` with `R` the graph Laplacian.
    b: Mat<f64>,
    /// `−½(yᵀΣ⁻¹y + log det Σ)` plus the `2π` constant.
    constant: f64,
}

impl ExactContext {
    fn factor(&self, c_m: &Volume, dphi: &Volume, noise: &ObservationNoise) -> Result<DataFactor> {
        let n = self.len();
        let h = self.data_precision(noise);
        let llt = h
            .llt(Side::Lower)
            .map_err(|e| Error::Factorization(format!("data precision: {e:?}")))?;
        let l = llt.L();
        let log_det_h = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        let mut linv = Mat::<f64>::zeros(n, n);
        faer::linalg::triangular_inverse::invert_lower_triangular(linv.as_mut(), l, Par::Seq);
        let rhs = self.rhs(c_m, dphi, noise);
        let beta: Vec<f64> = (0..n)
            .map(|i| (0..=i).map(|k| linv[(i, k)] * rhs[k]).sum())
            .collect();

        // C = L⁻¹ R column by column from the sparse Laplacian, then B = C L⁻ᵀ.
        let graph = &self.prior.graph;
        let mut c = Mat::<f64>::zeros(n, n);
        for j in 0..n {
            let d = graph.degree(j) as f64;
            for i in j..n {
                c[(i, j)] = d * linv[(i, j)];
            }
            for &nb in graph.neighbors(j) {
                let nb = nb as usize;
                for i in nb..n {
                    c[(i, j)] -= linv[(i, nb)];
                }
            }
        }
        let mut b = &c * linv.transpose();
        super::exact::symmetrize(&mut b);
        let a = match self.prior.kind {
            PriorKind::Besag => None,
            PriorKind::Leroux => {
                let mut a = &linv * linv.transpose();
                if self.prior.intercept {
                    // L⁻¹ (I − 11ᵀ/N) L⁻ᵀ = A − a aᵀ/N with a = L⁻¹ 1.
                    let ones: Vec<f64> = (0..n)
                        .map(|i| (0..=i).map(|k| linv[(i, k)]).sum())
                        .collect();
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        for i in 0..n {
                            a[(i, j)] -= ones[i] * ones[j] * inv_n;
                        }
                    }
                }
                super::exact::symmetrize(&mut a);
                Some(a)
            }
        };
        let (yy, log_det_sigma) = Self::observation_terms(c_m, dphi, noise);
        Ok(DataFactor {
            linv,
            log_det_h,
            beta,
            a,
            b,
            constant: -0.5 * (yy + log_det_sigma) + self.log_two_pi_term(),
        })
    }

    /// Grid integration over `θ` with exact marginal likelihoods.
    pub fn hyperparameter_posterior(
        &self,
        c_m: &Volume,
        dphi: &Volume,
        noise: &ObservationNoise,
        hp: &HyperPriorSpec,
    ) -> Result<PosteriorSummary> {
        self.check(c_m, dphi, noise)?;
        hp.validate()?;
        let kind = self.prior.kind;
        let n = self.len();
        let factor = self.factor(c_m, dphi, noise)?;
        let lambdas: Vec<Option<f64>> = match kind {
            PriorKind::Besag => vec![None],
            PriorKind::Leroux => hp.lambda_grid.iter().map(|&l| Some(l)).collect(),
        };
        let lambda_widths = match kind {
            PriorKind::Besag => vec![0.0],
            PriorKind::Leroux => hp.lambda_log_widths(),
        };
        let tau_widths = hp.tau_log_widths();

        let rows: Vec<Result<Row>> = lambdas
            .par_iter()
            .zip(lambda_widths.par_iter())
            .map(|(&lambda, &lw_lambda)| self.grid_row(&factor, hp, lambda, lw_lambda, &tau_widths))
            .collect();
        let rows: Vec<Row> = rows.into_iter().collect::<Result<_>>()?;

        let global_max = rows.iter().map(|r| r.max).fold(f64::NEG_INFINITY, f64::max);
        if !global_max.is_finite() {
            return Err(Error::Numerical(
                "every grid point has zero posterior weight".into(),
            ));
        }
        let mut total = 0.0;
        let mut points = Vec::with_capacity(lambdas.len() * hp.tau_grid.len());
        for row in &rows {
            for p in &row.points {
                total += (p.log_weight - global_max).exp();
            }
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Numerical(format!(
                "degenerate weight normalization {total}"
            )));
        }
        let mut acc = vec![0.0; n];
        let (mut tau_hat, mut lambda_hat) = (0.0, 0.0);
        for row in rows {
            let scale = (row.max - global_max).exp() / total;
            acc.iter_mut()
                .zip(&row.weighted)
                .for_each(|(a, v)| *a += scale * v);
            for mut p in row.points {
                p.weight = (p.log_weight - global_max).exp() / total;
                tau_hat += p.weight * p.tau;
                lambda_hat += p.weight * p.lambda.unwrap_or(0.0);
                points.push(p);
            }
        }
        // Mixture mean = L⁻ᵀ Σ_k w_k U_k z_k.
        let mean: Vec<f64> = (0..n)
            .map(|j| (j..n).map(|i| factor.linv[(i, j)] * acc[i]).sum())
            .collect();
        let negative = mean.iter().filter(|&&v| v < 0.0).count();
        Ok(PosteriorSummary {
            negative_fraction: negative as f64 / n.max(1) as f64,
            mean: Volume::new(*c_m.dims(), mean)?,
            sd: None,
            kind,
            points,
            tau_hat,
            lambda_hat: (kind == PriorKind::Leroux).then_some(lambda_hat),
        })
    }

    fn grid_row(
        &self,
        factor: &DataFactor,
        hp: &HyperPriorSpec,
        lambda: Option<f64>,
        lambda_log_width: f64,
        tau_widths: &[f64],
    ) -> Result<Row> {
        let n = self.len();
        let mut m = match (lambda, &factor.a) {
            (Some(l), Some(a)) => {
                Mat::<f64>::from_fn(n, n, |i, j| (1.0 - l) * a[(i, j)] + l * factor.b[(i, j)])
            }
            _ => factor.b.clone(),
        };
        let trid = Tridiagonal::reduce(&mut m, &factor.beta);
        let log_prior_lambda = lambda.map_or(0.0, |l| hp.log_prior_lambda(l));
        let mut points = Vec::with_capacity(hp.tau_grid.len());
        let mut solutions = Vec::with_capacity(hp.tau_grid.len());
        for (&tau, &tau_width) in hp.tau_grid.iter().zip(tau_widths) {
            let theta = Theta::new(tau, lambda.unwrap_or(0.5));
            check_theta(self.prior.kind, theta)?;
            let (log_det_s, z) = trid.shifted_solve(tau);
            let quad: f64 = trid.g.iter().zip(&z).map(|(g, z)| g * z).sum();
            let log_det_post = factor.log_det_h + log_det_s;
            let log_marginal =
                0.5 * (self.prior_log_det(theta)? - log_det_post + quad) + factor.constant;
            let log_weight = log_marginal
                + hp.log_prior_tau(tau)
                + tau_width
                + log_prior_lambda
                + lambda_log_width;
            if log_weight.is_nan() {
                return Err(Error::Numerical(format!(
                    "NaN log weight at tau={tau}, lambda={lambda:?}"
                )));
            }
            points.push(GridPoint {
                tau,
                lambda,
                log_marginal,
                log_weight,
                weight: 0.0,
            });
            solutions.push(z);
        }
        let max = points
            .iter()
            .map(|p| p.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut weighted = vec![0.0; n];
        if max.is_finite() {
            for (p, z) in points.iter().zip(&solutions) {
                let w = (p.log_weight - max).exp();
                weighted
                    .iter_mut()
                    .zip(z)
                    .for_each(|(acc, z)| *acc += w * z);
            }
        }
        trid.apply_u(&mut weighted);
        Ok(Row {
            points,
            max,
            weighted,
        })
    }
}

struct Row {
    points: Vec<GridPoint>,
    max: f64,
    /// `U Σ_τ e^{lw − max} z_τ` in whitened coordinates.
    weighted: Vec<f64>,
}

/// `M = U T Uᵀ` with `T` symmetric tridiagonal, plus `g = Uᵀ β`.
struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
    g: Vec<f64>,
    reduced: Mat<f64>,
    householder: Mat<f64>,
}

impl Tridiagonal {
    fn reduce(m: &mut Mat<f64>, beta: &[f64]) -> Self {
        let n = m.nrows();
        let bs = faer::linalg::qr::no_pivoting::factor::recommended_block_size::<f64>(n, n).max(1);
        let mut hh = Mat::<f64>::zeros(bs, n.saturating_sub(1));
        let mut g = beta.to_vec();
        if n > 1 {
            let req = faer::linalg::evd::tridiag::tridiag_in_place_scratch::<f64>(n, Par::Seq, Default::default())
                .or(householder::apply_block_householder_sequence_transpose_on_the_left_in_place_scratch::<f64>(
                    n - 1,
                    bs,
                    1,
                ))
                .or(householder::apply_block_householder_sequence_on_the_left_in_place_scratch::<f64>(n - 1, bs, 1));
            let mut buf = MemBuffer::new(req);
            let stack = MemStack::new(&mut buf);
            faer::linalg::evd::tridiag::tridiag_in_place(
                m.as_mut(),
                hh.as_mut(),
                Par::Seq,
                stack,
                Default::default(),
            );
            let mut gm = Mat::<f64>::from_fn(n, 1, |i, _| beta[i]);
            householder::apply_block_householder_sequence_transpose_on_the_left_in_place_with_conj(
                m.as_ref().submatrix(1, 0, n - 1, n - 1),
                hh.as_ref(),
                Conj::No,
                gm.as_mut().subrows_mut(1, n - 1),
                Par::Seq,
                stack,
            );
            g = (0..n).map(|i| gm[(i, 0)]).collect();
        }
        let diag = (0..n).map(|i| m[(i, i)]).collect();
        let off = (1..n).map(|i| m[(i, i - 1)]).collect();
        Tridiagonal {
            diag,
            off,
            g,
            reduced: std::mem::replace(m, Mat::zeros(0, 0)),
            householder: hh,
        }
    }

    /// `log det (I + τT)` and `(I + τT)⁻¹ g` by tridiagonal LDLᵀ.
    fn shifted_solve(&self, tau: f64) -> (f64, Vec<f64>) {
        let n = self.diag.len();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut log_det = 0.0;
        for i in 0..n {
            let a = 1.0 + tau * self.diag[i];
            if i == 0 {
                d[0] = a;
                y[0] = self.g[0];
            } else {
                let e = tau * self.off[i - 1];
                l[i] = e / d[i - 1];
                d[i] = a - l[i] * e;
                y[i] = self.g[i] - l[i] * y[i - 1];
            }
            log_det += d[i].ln();
        }
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            z[i] = y[i] / d[i] - if i + 1 < n { l[i + 1] * z[i + 1] } else { 0.0 };
        }
        (log_det, z)
    }

    /// `v ← U v`.
    fn apply_u(&self, v: &mut [f64]) {
        let n = v.len();
        if n <= 1 {
            return;
        }
        let bs = self.householder.nrows();
        let req = householder::apply_block_householder_sequence_on_the_left_in_place_scratch::<f64>(
            n - 1,
            bs,
            1,
        );
        let mut buf = MemBuffer::new(req);
        let stack = MemStack::new(&mut buf);
        let mut vm = Mat::<f64>::from_fn(n, 1, |i, _| v[i]);
        householder::apply_block_householder_sequence_on_the_left_in_place_with_conj(
            self.reduced.as_ref().submatrix(1, 0, n - 1, n - 1),
            self.householder.as_ref(),
            Conj::No,
            vm.as_mut().subrows_mut(1, n - 1),
            Par::Seq,
            stack,
        );
        v.iter_mut().enumerate().for_each(|(i, x)| *x = vm[(i, 0)]);
    }
}

/// Hyperparameter posterior; builds a one-off [`ExactContext`].
pub fn hyperparameter_posterior(
    c_m: &Volume,
    dphi: &Volume,
    noise: &ObservationNoise,
    psi: &PhaseOperator,
    prior: &SpatialPrior,
    hp: &HyperPriorSpec,
) -> Result<PosteriorSummary> {
    ExactContext::new(psi, prior.clone())?.hyperparameter_posterior(c_m, dphi, noise, hp)
}

/// The small-image Bayesian path for one time point of a simulated dataset.
pub fn estimate_small_image(
    data: &SimulatedDataset,
    time_index: usize,
    ctx: &ExactContext,
    hp: &HyperPriorSpec,
    mode: SigmaMode,
) -> Result<PosteriorSummary> {
    if time_index >= data.len() {
        return Err(Error::IndexOutOfBounds {
            index: time_index,
            len: data.len(),
        });
    }
    let c_m = &data.magnitude[time_index];
    let dphi = &data.phase[time_index];
    let noise = ObservationNoise::for_mode(mode, c_m, Some(&data.truth[time_index]), &data.noise)?;
    ctx.hyperparameter_posterior(c_m, dphi, &noise, hp)
}
